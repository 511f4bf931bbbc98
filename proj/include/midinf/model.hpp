#pragma once

// GPT-2 style decoder-only transformer: learned positions, pre-LN blocks,
// tanh-GELU MLP, tied token embedding / output projection by default.
//
// Weights use the GPT-2 Conv1D layout: projection matrices are [in, out],
// row-major. See docs/weights.md for the on-disk container.

#include <cstdint>
#include <filesystem>
#include <map>
#include <atomic>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "midinf/error.hpp"
#include "midinf/tokenizer.hpp"

namespace midinf {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int context_len = 1024;
  int vocab_size = 0;
  float layernorm_eps = 1e-5f;
  bool tie_embeddings = true;

  /// "toy" (2/4/64), "small" (12/12/768), "medium" (24/16/1024).
  static ModelConfig preset(std::string_view name, int vocab_size);

  int head_dim() const { return d_model / n_heads; }
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const;
};

/// Named float32 tensors. Immutable once handed to a Model.
class WeightStore {
 public:
  void put(std::string name, Tensor tensor);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  /// Throws MissingTensor / ShapeMismatch. Extra tensors are ignored.
  void validate(const ModelConfig& config) const;

  /// Writes `path` (raw blob) and `path` + ".json" (manifest).
  void save(const std::filesystem::path& path, const ModelConfig* config = nullptr) const;

  bool operator==(const WeightStore& other) const;

 private:
  std::map<std::string, Tensor> tensors_;
};

/// Every tensor the architecture needs, with its expected shape.
std::vector<std::pair<std::string, std::vector<std::int64_t>>> required_tensors(
    const ModelConfig& config);

/// Accepts either the blob path or the manifest path. Errors: CorruptFile, Io.
WeightStore load_weights(const std::filesystem::path& path);

/// Reads the optional "config" object from a manifest, if present.
std::optional<ModelConfig> load_manifest_config(const std::filesystem::path& path);

/// N(0, 0.02) matrices (residual output projections scaled by 1/sqrt(2 n_layers)),
/// zero biases, unit layernorm gains. Deterministic per seed.
WeightStore init_random(const ModelConfig& config, std::uint64_t seed);

class KVCache {
 public:
  explicit KVCache(const ModelConfig& config);

  int length() const { return length_; }
  int capacity() const { return capacity_; }
  void reset() { length_ = 0; }

 private:
  friend class Model;
  int capacity_;
  int d_model_;
  int length_ = 0;
  // Per layer: [capacity, d_model] row-major.
  std::vector<std::vector<float>> keys_;
  std::vector<std::vector<float>> values_;
};

/// Row-major [rows, cols] logits.
struct LogitMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;

  std::span<const float> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }
};

class Model {
 public:
  /// Validates `weights` against `config`.
  Model(ModelConfig config, std::shared_ptr<const WeightStore> weights);

  const ModelConfig& config() const { return config_; }

  /// Batched causal forward over the whole sequence.
  LogitMatrix forward_full(std::span<const TokenId> tokens) const;

  /// Appends `token` at position cache.length() and writes logits for the rows in
  /// `rows` into `logits` (size vocab_size); entries outside `rows` are untouched.
  /// An empty `rows` skips the output projection (prefill).
  void forward_step(TokenId token, KVCache& cache, std::span<float> logits,
                    TokenRange rows) const;
  std::vector<float> forward_step(TokenId token, KVCache& cache) const;

  /// When enabled, every attention softmax row is checked to sum to 1 (InternalCheck on failure).
  void set_debug_checks(bool enabled) { debug_checks_ = enabled; }
  std::uint64_t softmax_rows_checked() const { return softmax_rows_checked_.load(); }

 private:
  struct Layer {
    const float* ln1_g;
    const float* ln1_b;
    const float* attn_w;
    const float* attn_b;
    const float* proj_w;
    const float* proj_b;
    const float* ln2_g;
    const float* ln2_b;
    const float* fc_w;
    const float* fc_b;
    const float* fc_proj_w;
    const float* fc_proj_b;
  };

  void check_token(TokenId token) const;
  void check_softmax_row(std::span<const float> row) const;

  ModelConfig config_;
  std::shared_ptr<const WeightStore> weights_;
  const float* wte_;
  const float* wpe_;
  const float* lnf_g_;
  const float* lnf_b_;
  const float* head_;
  std::vector<Layer> layers_;
  bool debug_checks_ = false;
  mutable std::atomic<std::uint64_t> softmax_rows_checked_{0};
};

}  // namespace midinf
