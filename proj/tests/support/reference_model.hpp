#pragma once

// Deliberately naive GPT-2 forward pass in double precision: explicit loops,
// per-head attention over full score matrices, no caching. Used as the oracle
// for the optimized model.

#include <cmath>
#include <string>
#include <vector>

#include "midinf/model.hpp"

namespace midinf::testing {

class ReferenceModel {
 public:
  ReferenceModel(const ModelConfig& config, const WeightStore& weights) : c_(config), w_(weights) {}

  /// [T][vocab] logits.
  std::vector<std::vector<double>> forward(const std::vector<TokenId>& tokens) const {
    const int T = static_cast<int>(tokens.size());
    const int d = c_.d_model;
    Mat x(T, std::vector<double>(d));
    const auto& wte = w_.at("wte.weight").data;
    const auto& wpe = w_.at("wpe.weight").data;
    for (int t = 0; t < T; ++t)
      for (int i = 0; i < d; ++i)
        x[t][i] = double(wte[std::size_t(tokens[t]) * d + i]) + double(wpe[std::size_t(t) * d + i]);

    for (int l = 0; l < c_.n_layers; ++l) {
      const std::string p = "h." + std::to_string(l) + ".";
      Mat a = layernorm(x, p + "ln_1");
      Mat qkv = linear(a, p + "attn.c_attn", 3 * d);
      Mat attn = attention(qkv);
      Mat proj = linear(attn, p + "attn.c_proj", d);
      add(x, proj);
      Mat b = layernorm(x, p + "ln_2");
      Mat h = linear(b, p + "mlp.c_fc", c_.d_ff);
      for (auto& row : h)
        for (double& v : row) v = 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
      Mat out = linear(h, p + "mlp.c_proj", d);
      add(x, out);
    }
    Mat f = layernorm(x, "ln_f");
    const auto& head = c_.tie_embeddings ? wte : w_.at("lm_head.weight").data;
    Mat logits(T, std::vector<double>(c_.vocab_size));
    for (int t = 0; t < T; ++t)
      for (int v = 0; v < c_.vocab_size; ++v) {
        double s = 0;
        for (int i = 0; i < d; ++i) s += f[t][i] * double(head[std::size_t(v) * d + i]);
        logits[t][v] = s;
      }
    return logits;
  }

 private:
  using Mat = std::vector<std::vector<double>>;

  static void add(Mat& x, const Mat& y) {
    for (std::size_t t = 0; t < x.size(); ++t)
      for (std::size_t i = 0; i < x[t].size(); ++i) x[t][i] += y[t][i];
  }

  Mat layernorm(const Mat& x, const std::string& name) const {
    const auto& g = w_.at(name + ".weight").data;
    const auto& b = w_.at(name + ".bias").data;
    Mat out = x;
    for (auto& row : out) {
      double mean = 0, var = 0;
      for (double v : row) mean += v;
      mean /= double(row.size());
      for (double v : row) var += (v - mean) * (v - mean);
      var /= double(row.size());
      for (std::size_t i = 0; i < row.size(); ++i)
        row[i] = (row[i] - mean) / std::sqrt(var + c_.layernorm_eps) * g[i] + b[i];
    }
    return out;
  }

  // Conv1D: weight is [in, out].
  Mat linear(const Mat& x, const std::string& name, int out_dim) const {
    const auto& W = w_.at(name + ".weight").data;
    const auto& B = w_.at(name + ".bias").data;
    const int in_dim = static_cast<int>(x[0].size());
    Mat y(x.size(), std::vector<double>(out_dim));
    for (std::size_t t = 0; t < x.size(); ++t)
      for (int o = 0; o < out_dim; ++o) {
        double s = B[o];
        for (int i = 0; i < in_dim; ++i) s += x[t][i] * double(W[std::size_t(i) * out_dim + o]);
        y[t][o] = s;
      }
    return y;
  }

  Mat attention(const Mat& qkv) const {
    const int T = static_cast<int>(qkv.size());
    const int d = c_.d_model, H = c_.n_heads, hd = d / H;
    Mat out(T, std::vector<double>(d, 0.0));
    for (int h = 0; h < H; ++h) {
      for (int i = 0; i < T; ++i) {
        std::vector<double> score(T, -INFINITY);
        double mx = -INFINITY;
        for (int j = 0; j <= i; ++j) {
          double s = 0;
          for (int k = 0; k < hd; ++k) s += qkv[i][h * hd + k] * qkv[j][d + h * hd + k];
          score[j] = s / std::sqrt(double(hd));
          mx = std::max(mx, score[j]);
        }
        double z = 0;
        for (int j = 0; j <= i; ++j) z += std::exp(score[j] - mx);
        for (int j = 0; j <= i; ++j) {
          const double p = std::exp(score[j] - mx) / z;
          for (int k = 0; k < hd; ++k) out[i][h * hd + k] += p * qkv[j][2 * d + h * hd + k];
        }
      }
    }
    return out;
  }

  ModelConfig c_;
  const WeightStore& w_;
};

}  // namespace midinf::testing
