#include "midinf/model.hpp"

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

namespace midinf {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<const RowMatrix>;
using VectorMap = Eigen::Map<const Eigen::VectorXf>;
using RowVectorMap = Eigen::Map<const Eigen::RowVectorXf>;

constexpr float kGeluScale = 0.7978845608028654f;  // sqrt(2 / pi)

float gelu(float x) { return 0.5f * x * (1.0f + std::tanh(kGeluScale * (x + 0.044715f * x * x * x))); }

void layernorm(const float* x, const float* g, const float* b, float eps, int n, float* out) {
  float mean = 0.0f;
  for (int i = 0; i < n; ++i) mean += x[i];
  mean /= static_cast<float>(n);
  float var = 0.0f;
  for (int i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= static_cast<float>(n);
  const float inv = 1.0f / std::sqrt(var + eps);
  for (int i = 0; i < n; ++i) out[i] = (x[i] - mean) * inv * g[i] + b[i];
}

void softmax_inplace(float* row, int n) {
  float max = row[0];
  for (int i = 1; i < n; ++i) max = std::max(max, row[i]);
  float sum = 0.0f;
  for (int i = 0; i < n; ++i) {
    row[i] = std::exp(row[i] - max);
    sum += row[i];
  }
  const float inv = 1.0f / sum;
  for (int i = 0; i < n; ++i) row[i] *= inv;
}

std::string layer_name(int layer, std::string_view suffix) {
  return "h." + std::to_string(layer) + "." + std::string(suffix);
}

std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::filesystem::path blob_path_of(const std::filesystem::path& path) {
  if (path.extension() == ".json") return path.parent_path() / path.stem();
  return path;
}

std::filesystem::path manifest_path_of(const std::filesystem::path& path) {
  if (path.extension() == ".json") return path;
  return std::filesystem::path(path.string() + ".json");
}

nlohmann::json read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw Error(ErrorCode::Io, "cannot open manifest " + manifest_path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptFile, manifest_path.string() + ": " + e.what());
  }
}

}  // namespace

ModelConfig ModelConfig::preset(std::string_view name, int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  if (name == "toy") {
    c.n_layers = 2, c.n_heads = 4, c.d_model = 64;
  } else if (name == "small") {
    c.n_layers = 12, c.n_heads = 12, c.d_model = 768;
  } else if (name == "medium") {
    c.n_layers = 24, c.n_heads = 16, c.d_model = 1024;
  } else {
    throw Error(ErrorCode::InvalidConfig, "unknown preset '" + std::string(name) + "'");
  }
  c.d_ff = 4 * c.d_model;
  return c;
}

void ModelConfig::validate() const {
  if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_ff <= 0 || context_len <= 0 ||
      vocab_size <= 0) {
    throw Error(ErrorCode::InvalidConfig, "model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw Error(ErrorCode::InvalidConfig, "d_model must be divisible by n_heads");
  }
  if (!(layernorm_eps > 0.0f)) throw Error(ErrorCode::InvalidConfig, "layernorm_eps must be > 0");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},         {"n_heads", c.n_heads},
                     {"d_model", c.d_model},           {"d_ff", c.d_ff},
                     {"context_len", c.context_len},   {"vocab_size", c.vocab_size},
                     {"layernorm_eps", c.layernorm_eps}, {"tie_embeddings", c.tie_embeddings}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.value("d_ff", 4 * c.d_model);
  c.context_len = j.value("context_len", 1024);
  c.vocab_size = j.at("vocab_size").get<int>();
  c.layernorm_eps = j.value("layernorm_eps", 1e-5f);
  c.tie_embeddings = j.value("tie_embeddings", true);
}

std::int64_t Tensor::numel() const {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void WeightStore::put(std::string name, Tensor tensor) {
  if (tensor.numel() != static_cast<std::int64_t>(tensor.data.size())) {
    throw Error(ErrorCode::ShapeMismatch, name + ": data size does not match shape");
  }
  tensors_[std::move(name)] = std::move(tensor);
}

const Tensor& WeightStore::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error(ErrorCode::MissingTensor, name);
  return it->second;
}

bool WeightStore::operator==(const WeightStore& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  for (const auto& [name, t] : tensors_) {
    auto it = other.tensors_.find(name);
    if (it == other.tensors_.end() || it->second.shape != t.shape) return false;
    if (std::memcmp(t.data.data(), it->second.data.data(), t.data.size() * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

std::vector<std::pair<std::string, std::vector<std::int64_t>>> required_tensors(
    const ModelConfig& c) {
  const std::int64_t d = c.d_model;
  std::vector<std::pair<std::string, std::vector<std::int64_t>>> out = {
      {"wte.weight", {c.vocab_size, d}},
      {"wpe.weight", {c.context_len, d}},
  };
  for (int l = 0; l < c.n_layers; ++l) {
    out.push_back({layer_name(l, "ln_1.weight"), {d}});
    out.push_back({layer_name(l, "ln_1.bias"), {d}});
    out.push_back({layer_name(l, "attn.c_attn.weight"), {d, 3 * d}});
    out.push_back({layer_name(l, "attn.c_attn.bias"), {3 * d}});
    out.push_back({layer_name(l, "attn.c_proj.weight"), {d, d}});
    out.push_back({layer_name(l, "attn.c_proj.bias"), {d}});
    out.push_back({layer_name(l, "ln_2.weight"), {d}});
    out.push_back({layer_name(l, "ln_2.bias"), {d}});
    out.push_back({layer_name(l, "mlp.c_fc.weight"), {d, c.d_ff}});
    out.push_back({layer_name(l, "mlp.c_fc.bias"), {c.d_ff}});
    out.push_back({layer_name(l, "mlp.c_proj.weight"), {c.d_ff, d}});
    out.push_back({layer_name(l, "mlp.c_proj.bias"), {d}});
  }
  out.push_back({"ln_f.weight", {d}});
  out.push_back({"ln_f.bias", {d}});
  if (!c.tie_embeddings) out.push_back({"lm_head.weight", {c.vocab_size, d}});
  return out;
}

void WeightStore::validate(const ModelConfig& config) const {
  for (const auto& [name, shape] : required_tensors(config)) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error(ErrorCode::MissingTensor, name);
    if (it->second.shape != shape) {
      throw Error(ErrorCode::ShapeMismatch, name + ": expected " + shape_string(shape) +
                                                ", found " + shape_string(it->second.shape));
    }
  }
}

void WeightStore::save(const std::filesystem::path& path, const ModelConfig* config) const {
  const auto blob = blob_path_of(path);
  std::ofstream out(blob, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + blob.string());

  nlohmann::json manifest{{"format", "wtm"},
                          {"version", 1},
                          {"byte_order", "little"},
                          {"blob", blob.filename().string()}};
  if (config) manifest["config"] = *config;
  nlohmann::json entries = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors_) {
    entries[name] = {{"shape", t.shape}, {"dtype", "f32"}, {"offset", offset}};
    for (float v : t.data) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
    offset += t.data.size() * sizeof(float);
  }
  manifest["blob_bytes"] = offset;
  manifest["tensors"] = std::move(entries);
  if (!out) throw Error(ErrorCode::Io, "short write to " + blob.string());

  std::ofstream mout(manifest_path_of(blob));
  if (!mout) throw Error(ErrorCode::Io, "cannot write manifest for " + blob.string());
  mout << manifest.dump(2) << '\n';
}

std::optional<ModelConfig> load_manifest_config(const std::filesystem::path& path) {
  const auto manifest = read_manifest(manifest_path_of(blob_path_of(path)));
  if (!manifest.contains("config")) return std::nullopt;
  try {
    return manifest.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptFile, std::string("manifest config: ") + e.what());
  }
}

WeightStore load_weights(const std::filesystem::path& path) {
  const auto blob_path = blob_path_of(path);
  const auto manifest = read_manifest(manifest_path_of(blob_path));

  std::ifstream in(blob_path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + blob_path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  WeightStore store;
  try {
    if (manifest.value("format", "") != "wtm") {
      throw Error(ErrorCode::CorruptFile, "manifest format is not 'wtm'");
    }
    if (manifest.contains("blob_bytes") &&
        manifest.at("blob_bytes").get<std::uint64_t>() != bytes.size()) {
      throw Error(ErrorCode::CorruptFile, blob_path.string() + ": blob is " +
                                              std::to_string(bytes.size()) +
                                              " bytes, manifest says " +
                                              manifest.at("blob_bytes").dump());
    }
    for (const auto& [name, entry] : manifest.at("tensors").items()) {
      if (entry.value("dtype", "f32") != "f32") {
        throw Error(ErrorCode::CorruptFile, name + ": unsupported dtype " + entry.at("dtype").dump());
      }
      Tensor t;
      t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      for (auto d : t.shape) {
        if (d < 0) throw Error(ErrorCode::CorruptFile, name + ": negative dimension");
      }
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto count = static_cast<std::uint64_t>(t.numel());
      if (offset % sizeof(float) != 0 || offset + count * sizeof(float) > bytes.size()) {
        throw Error(ErrorCode::CorruptFile, name + ": byte range outside blob");
      }
      t.data.resize(count);
      for (std::uint64_t i = 0; i < count; ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, bytes.data() + offset + i * sizeof(float), sizeof bits);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        t.data[i] = std::bit_cast<float>(bits);
      }
      store.put(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptFile, std::string("manifest: ") + e.what());
  }
  return store;
}

WeightStore init_random(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 0.02f);
  const float residual_scale = 1.0f / std::sqrt(2.0f * static_cast<float>(config.n_layers));

  WeightStore store;
  for (const auto& [name, shape] : required_tensors(config)) {
    Tensor t{shape, {}};
    t.data.resize(static_cast<std::size_t>(t.numel()));
    const bool is_bias = name.ends_with(".bias");
    const bool is_gain = name.ends_with("ln_1.weight") || name.ends_with("ln_2.weight") ||
                         name == "ln_f.weight";
    if (is_gain) {
      std::fill(t.data.begin(), t.data.end(), 1.0f);
    } else if (!is_bias) {
      const bool residual = name.ends_with("c_proj.weight");
      for (auto& v : t.data) v = normal(rng) * (residual ? residual_scale : 1.0f);
    }
    store.put(name, std::move(t));
  }
  return store;
}

KVCache::KVCache(const ModelConfig& config)
    : capacity_(config.context_len),
      d_model_(config.d_model),
      keys_(config.n_layers,
            std::vector<float>(static_cast<std::size_t>(config.context_len) * config.d_model)),
      values_(config.n_layers,
              std::vector<float>(static_cast<std::size_t>(config.context_len) * config.d_model)) {}

Model::Model(ModelConfig config, std::shared_ptr<const WeightStore> weights)
    : config_(config), weights_(std::move(weights)) {
  config_.validate();
  weights_->validate(config_);
  auto ptr = [&](const std::string& name) { return weights_->at(name).data.data(); };
  wte_ = ptr("wte.weight");
  wpe_ = ptr("wpe.weight");
  lnf_g_ = ptr("ln_f.weight");
  lnf_b_ = ptr("ln_f.bias");
  head_ = config_.tie_embeddings ? wte_ : ptr("lm_head.weight");
  for (int l = 0; l < config_.n_layers; ++l) {
    auto p = [&](std::string_view s) { return ptr(layer_name(l, s)); };
    layers_.push_back(Layer{p("ln_1.weight"), p("ln_1.bias"), p("attn.c_attn.weight"),
                            p("attn.c_attn.bias"), p("attn.c_proj.weight"), p("attn.c_proj.bias"),
                            p("ln_2.weight"), p("ln_2.bias"), p("mlp.c_fc.weight"),
                            p("mlp.c_fc.bias"), p("mlp.c_proj.weight"), p("mlp.c_proj.bias")});
  }
}

void Model::check_token(TokenId token) const {
  if (token < 0 || token >= config_.vocab_size) {
    throw Error(ErrorCode::KindMismatch, "token id " + std::to_string(token) + " outside vocabulary");
  }
}

void Model::check_softmax_row(std::span<const float> row) const {
  double sum = 0.0;
  for (float p : row) sum += p;
  softmax_rows_checked_.fetch_add(1, std::memory_order_relaxed);
  if (std::abs(sum - 1.0) > 1e-4) {
    throw Error(ErrorCode::InternalCheck, "attention softmax row sums to " + std::to_string(sum));
  }
}

LogitMatrix Model::forward_full(std::span<const TokenId> tokens) const {
  const int T = static_cast<int>(tokens.size());
  if (T < 1) throw Error(ErrorCode::ContextOverflow, "empty input");
  if (T > config_.context_len) {
    throw Error(ErrorCode::ContextOverflow, std::to_string(T) + " tokens exceeds context " +
                                                std::to_string(config_.context_len));
  }
  const int d = config_.d_model;
  const int hd = config_.head_dim();
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  RowMatrix x(T, d);
  for (int t = 0; t < T; ++t) {
    check_token(tokens[t]);
    x.row(t) = RowVectorMap(wte_ + static_cast<std::size_t>(tokens[t]) * d, d) +
               RowVectorMap(wpe_ + static_cast<std::size_t>(t) * d, d);
  }

  RowMatrix a(T, d);
  RowMatrix scores(T, T);
  RowMatrix attn(T, d);
  for (const Layer& L : layers_) {
    for (int t = 0; t < T; ++t) layernorm(&x(t, 0), L.ln1_g, L.ln1_b, config_.layernorm_eps, d, &a(t, 0));
    RowMatrix qkv = a * MatrixMap(L.attn_w, d, 3 * d);
    qkv.rowwise() += RowVectorMap(L.attn_b, 3 * d);

    for (int h = 0; h < config_.n_heads; ++h) {
      auto q = qkv.middleCols(h * hd, hd);
      auto k = qkv.middleCols(d + h * hd, hd);
      auto v = qkv.middleCols(2 * d + h * hd, hd);
      scores.noalias() = (q * k.transpose()) * scale;
      for (int i = 0; i < T; ++i) {
        softmax_inplace(&scores(i, 0), i + 1);
        for (int j = i + 1; j < T; ++j) scores(i, j) = 0.0f;
        if (debug_checks_) check_softmax_row({&scores(i, 0), static_cast<std::size_t>(i + 1)});
      }
      attn.middleCols(h * hd, hd).noalias() = scores * v;
    }
    x.noalias() += attn * MatrixMap(L.proj_w, d, d);
    x.rowwise() += RowVectorMap(L.proj_b, d);

    for (int t = 0; t < T; ++t) layernorm(&x(t, 0), L.ln2_g, L.ln2_b, config_.layernorm_eps, d, &a(t, 0));
    RowMatrix hidden = a * MatrixMap(L.fc_w, d, config_.d_ff);
    hidden.rowwise() += RowVectorMap(L.fc_b, config_.d_ff);
    hidden = hidden.unaryExpr([](float u) { return gelu(u); });
    x.noalias() += hidden * MatrixMap(L.fc_proj_w, config_.d_ff, d);
    x.rowwise() += RowVectorMap(L.fc_proj_b, d);
  }

  for (int t = 0; t < T; ++t) layernorm(&x(t, 0), lnf_g_, lnf_b_, config_.layernorm_eps, d, &a(t, 0));

  LogitMatrix out{T, config_.vocab_size, {}};
  out.data.resize(static_cast<std::size_t>(T) * config_.vocab_size);
  Eigen::Map<RowMatrix> logits(out.data.data(), T, config_.vocab_size);
  logits.noalias() = a * MatrixMap(head_, config_.vocab_size, d).transpose();
  return out;
}

void Model::forward_step(TokenId token, KVCache& cache, std::span<float> logits,
                         TokenRange rows) const {
  check_token(token);
  const int pos = cache.length_;
  if (pos >= config_.context_len || pos >= cache.capacity_) {
    throw Error(ErrorCode::ContextOverflow,
                "KV cache full at " + std::to_string(pos) + " positions");
  }
  if (!rows.empty() && (rows.begin < 0 || rows.end > config_.vocab_size ||
                        logits.size() != static_cast<std::size_t>(config_.vocab_size))) {
    throw Error(ErrorCode::ShapeMismatch, "logit buffer does not match vocabulary");
  }
  const int d = config_.d_model;
  const int hd = config_.head_dim();
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  Eigen::VectorXf x = VectorMap(wte_ + static_cast<std::size_t>(token) * d, d) +
                      VectorMap(wpe_ + static_cast<std::size_t>(pos) * d, d);
  Eigen::VectorXf a(d);
  Eigen::VectorXf qkv(3 * d);
  Eigen::VectorXf attn(d);
  Eigen::VectorXf hidden(config_.d_ff);
  Eigen::VectorXf scores(pos + 1);

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& L = layers_[l];
    layernorm(x.data(), L.ln1_g, L.ln1_b, config_.layernorm_eps, d, a.data());
    qkv.noalias() = MatrixMap(L.attn_w, d, 3 * d).transpose() * a;
    qkv += VectorMap(L.attn_b, 3 * d);

    float* kcache = cache.keys_[l].data();
    float* vcache = cache.values_[l].data();
    std::copy_n(qkv.data() + d, d, kcache + static_cast<std::size_t>(pos) * d);
    std::copy_n(qkv.data() + 2 * d, d, vcache + static_cast<std::size_t>(pos) * d);
    MatrixMap keys(kcache, pos + 1, d);
    MatrixMap values(vcache, pos + 1, d);

    for (int h = 0; h < config_.n_heads; ++h) {
      scores.noalias() = keys.middleCols(h * hd, hd) * qkv.segment(h * hd, hd) * scale;
      softmax_inplace(scores.data(), pos + 1);
      if (debug_checks_) check_softmax_row({scores.data(), static_cast<std::size_t>(pos + 1)});
      attn.segment(h * hd, hd).noalias() = values.middleCols(h * hd, hd).transpose() * scores;
    }
    x.noalias() += MatrixMap(L.proj_w, d, d).transpose() * attn;
    x += VectorMap(L.proj_b, d);

    layernorm(x.data(), L.ln2_g, L.ln2_b, config_.layernorm_eps, d, a.data());
    hidden.noalias() = MatrixMap(L.fc_w, d, config_.d_ff).transpose() * a;
    hidden += VectorMap(L.fc_b, config_.d_ff);
    for (int i = 0; i < config_.d_ff; ++i) hidden[i] = gelu(hidden[i]);
    x.noalias() += MatrixMap(L.fc_proj_w, config_.d_ff, d).transpose() * hidden;
    x += VectorMap(L.fc_proj_b, d);
  }
  cache.length_ = pos + 1;

  if (rows.empty()) return;
  layernorm(x.data(), lnf_g_, lnf_b_, config_.layernorm_eps, d, a.data());
  Eigen::Map<Eigen::VectorXf> out(logits.data() + rows.begin, rows.size());
  out.noalias() = MatrixMap(head_ + static_cast<std::size_t>(rows.begin) * d, rows.size(), d) * a;
}

std::vector<float> Model::forward_step(TokenId token, KVCache& cache) const {
  std::vector<float> logits(static_cast<std::size_t>(config_.vocab_size));
  forward_step(token, cache, logits, TokenRange{0, config_.vocab_size});
  return logits;
}

}  // namespace midinf
