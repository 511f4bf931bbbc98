#!/usr/bin/env python3
"""Convert a Hugging Face GPT-2 checkpoint into a .wtm blob plus .wtm.json manifest.

    python3 tools/export_gpt2.py path/to/checkpoint model.wtm

With --random-toy the script instead builds a 2-layer random GPT-2 over the
27513-token vocabulary, exports it, and writes reference logits for a fixed
token sequence (used by the parity test).
"""

import argparse
import json
import os

import numpy as np
import torch
from transformers import GPT2Config, GPT2LMHeadModel

SKIPPED_SUFFIXES = (".attn.bias", ".attn.masked_bias")


def export(model, path):
    tensors, offset = {}, 0
    with open(path, "wb") as blob:
        for name, t in model.state_dict().items():
            if not name.startswith("transformer.") or name.endswith(SKIPPED_SUFFIXES):
                continue
            arr = t.detach().cpu().numpy().astype("<f4")
            tensors[name[len("transformer."):]] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset}
            blob.write(arr.tobytes())
            offset += arr.nbytes
    c = model.config
    tied = model.lm_head.weight.data_ptr() == model.transformer.wte.weight.data_ptr()
    if not tied:
        arr = model.lm_head.weight.detach().cpu().numpy().astype("<f4")
        with open(path, "ab") as blob:
            blob.write(arr.tobytes())
        tensors["lm_head.weight"] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset}
        offset += arr.nbytes
    manifest = {
        "format": "wtm",
        "version": 1,
        "byte_order": "little",
        "blob": os.path.basename(path),
        "blob_bytes": offset,
        "tensors": tensors,
        "config": {
            "n_layers": c.n_layer,
            "n_heads": c.n_head,
            "d_model": c.n_embd,
            "d_ff": c.n_inner or 4 * c.n_embd,
            "context_len": c.n_positions,
            "vocab_size": c.vocab_size,
            "layernorm_eps": c.layer_norm_epsilon,
            "tie_embeddings": tied,
        },
    }
    with open(path + ".json", "w") as f:
        json.dump(manifest, f, indent=2)


def random_toy(seed):
    torch.manual_seed(seed)
    cfg = GPT2Config(vocab_size=27513, n_positions=1024, n_embd=64, n_layer=2, n_head=4,
                     activation_function="gelu_new", eos_token_id=None, bos_token_id=None)
    model = GPT2LMHeadModel(cfg).eval()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if ".ln_" in name or name.startswith("transformer.ln_f") or name.endswith("bias"):
                p.add_(0.1 * torch.randn_like(p))
    return model


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("checkpoint", nargs="?", help="Hugging Face model directory or hub id")
    ap.add_argument("out", help="output .wtm path")
    ap.add_argument("--random-toy", type=int, metavar="SEED")
    ap.add_argument("--reference", help="with --random-toy: JSON file for tokens and logits")
    args = ap.parse_args()

    if args.random_toy is not None:
        model = random_toy(args.random_toy)
    elif args.checkpoint:
        model = GPT2LMHeadModel.from_pretrained(args.checkpoint).eval()
    else:
        ap.error("give a checkpoint or --random-toy")
    export(model, args.out)

    if args.reference:
        tokens = [27512, 0, 10049, 11060, 3, 10010, 11000 + 128 * 24 + 40, 3, 10099, 27000, 9999, 10999, 27511]
        with torch.no_grad():
            logits = model(torch.tensor([tokens])).logits[0].numpy().astype(np.float32)
        with open(args.reference, "w") as f:
            json.dump({"tokens": tokens, "logits": logits.tolist()}, f)


if __name__ == "__main__":
    main()
