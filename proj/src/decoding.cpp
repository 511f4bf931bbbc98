#include "midinf/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Core>

namespace midinf {

namespace {

constexpr double kGreedyTemperature = 1e-6;

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

TokenKind kind_at(int cycle) {
  static constexpr TokenKind kCycle[3] = {TokenKind::Time, TokenKind::Duration, TokenKind::Note};
  return kCycle[cycle];
}

int steps_for(double seconds, const VocabSpec& vocab) {
  return static_cast<int>(std::llround(seconds * 1000.0 / vocab.time_resolution_ms));
}

void mask_range(std::span<float> logits, TokenId begin, TokenId end) {
  if (end > begin) std::fill(logits.begin() + begin, logits.begin() + end, kMaskedLogit);
}

struct Candidate {
  double p;
  TokenId id;
};

bool ranks_before(const Candidate& a, const Candidate& b) {
  return a.p > b.p || (a.p == b.p && a.id < b.id);
}

// Reorders `items` so that its first k entries are the nucleus, and returns k.
// Expected linear time: a quickselect that partitions on rank and descends by mass.
std::size_t select_nucleus(std::vector<Candidate>& items, double top_p) {
  double total = 0.0;
  for (const auto& c : items) total += c.p;
  if (total < top_p) return items.size();

  std::size_t lo = 0;
  std::size_t hi = items.size();
  double need = top_p;
  while (lo < hi) {
    const Candidate pivot = items[lo + (hi - lo) / 2];
    auto first = items.begin() + static_cast<std::ptrdiff_t>(lo);
    auto last = items.begin() + static_cast<std::ptrdiff_t>(hi);
    auto mid = std::partition(first, last, [&](const Candidate& c) { return ranks_before(c, pivot); });
    std::iter_swap(mid, std::find_if(mid, last, [&](const Candidate& c) { return c.id == pivot.id; }));
    double ahead = 0.0;
    for (auto it = first; it != mid; ++it) ahead += it->p;
    const auto split = static_cast<std::size_t>(mid - items.begin());
    if (ahead >= need) {
      hi = split;
      continue;
    }
    need -= ahead + pivot.p;
    if (need <= 0.0) return split + 1;
    lo = split + 1;
  }
  return std::max<std::size_t>(hi, 1);
}

std::vector<Candidate> candidates_from_probs(std::span<const float> probs) {
  std::vector<Candidate> items;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0f) items.push_back({probs[i], static_cast<TokenId>(i)});
  }
  return items;
}

}  // namespace

void GenParams::validate(const VocabSpec& vocab) const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw Error(ErrorCode::InvalidParams, "temperature must be > 0");
  }
  if (!(top_p > 0.0 && top_p <= 1.0)) throw Error(ErrorCode::InvalidParams, "top_p must be in (0, 1]");
  if (!(bias_alpha >= 0.0) || !std::isfinite(bias_alpha)) {
    throw Error(ErrorCode::InvalidParams, "bias_alpha must be >= 0");
  }
  if (!(max_advance_s >= 0.0) || !std::isfinite(max_advance_s)) {
    throw Error(ErrorCode::InvalidParams, "max_advance_s must be >= 0");
  }
  if (ensemble) {
    if (ensemble->empty()) throw Error(ErrorCode::InvalidParams, "ensemble must not be empty");
    for (int i : *ensemble) {
      if (i < 0 || i >= vocab.num_instruments) {
        throw Error(ErrorCode::InvalidParams, "ensemble instrument " + std::to_string(i) +
                                                  " outside [0, " +
                                                  std::to_string(vocab.num_instruments) + ")");
      }
    }
  }
}

void to_json(nlohmann::json& j, const GenParams& p) {
  j = nlohmann::json{{"temperature", p.temperature},
                     {"top_p", p.top_p},
                     {"bias_alpha", p.bias_alpha},
                     {"ensemble", nullptr},
                     {"seed", p.seed},
                     {"max_advance_s", p.max_advance_s}};
  if (p.ensemble) j["ensemble"] = *p.ensemble;
}

void from_json(const nlohmann::json& j, GenParams& p) {
  GenParams d;
  p.temperature = j.value("temperature", d.temperature);
  p.top_p = j.value("top_p", d.top_p);
  p.bias_alpha = j.value("bias_alpha", d.bias_alpha);
  p.seed = j.value("seed", d.seed);
  p.max_advance_s = j.value("max_advance_s", d.max_advance_s);
  p.ensemble.reset();
  if (j.contains("ensemble") && !j.at("ensemble").is_null()) {
    p.ensemble = j.at("ensemble").get<std::vector<int>>();
  }
}

GenParams merge_params(const GenParams& base, const nlohmann::json& patch, const VocabSpec& vocab) {
  if (!patch.is_object()) throw Error(ErrorCode::InvalidParams, "params must be a JSON object");
  nlohmann::json merged = base;
  for (const auto& [key, value] : patch.items()) {
    if (!merged.contains(key)) throw Error(ErrorCode::InvalidParams, "unknown parameter '" + key + "'");
    merged[key] = value;
  }
  GenParams out;
  try {
    out = merged.get<GenParams>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidParams, e.what());
  }
  out.validate(vocab);
  return out;
}

Rng::Rng(std::uint64_t seed) {
  for (auto& s : s_) s = splitmix64(seed);
}

std::uint64_t Rng::next() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

DecodeState DecodeState::fresh(const VocabSpec& vocab, const GenParams& params, TokenId pending) {
  DecodeState s;
  s.last_onset_step.assign(static_cast<std::size_t>(vocab.num_instruments), std::nullopt);
  if (params.ensemble) {
    s.ensemble.assign(static_cast<std::size_t>(vocab.num_instruments), false);
    for (int i : *params.ensemble) s.ensemble[static_cast<std::size_t>(i)] = true;
  }
  s.pending = pending;
  s.rng = Rng(params.seed);
  return s;
}

void grammar_mask(std::span<float> logits, const DecodeState& state, const VocabSpec& vocab) {
  const TokenRange keep = vocab.range_of(kind_at(state.cycle));
  mask_range(logits, 0, keep.begin);
  mask_range(logits, keep.end, static_cast<TokenId>(logits.size()));
  if (state.cycle == 0) mask_range(logits, keep.begin, keep.begin + std::min(state.prev_onset_step, keep.size()));
  for (TokenId id = keep.begin; id < keep.end; ++id) {
    if (!is_masked(logits[id])) return;
  }
  throw Error(ErrorCode::EmptySupport, "no " + std::string(to_string(kind_at(state.cycle))) +
                                           " token survives the grammar mask");
}

namespace {

// Largest onset step the window and the chunk cap allow next.
int onset_upper(const DecodeState& state, const VocabSpec& vocab, const GenParams& params) {
  int upper = vocab.max_time_steps - 1;
  if (params.max_advance_s > 0.0) {
    upper = std::min(upper, state.prev_onset_step + std::max(1, steps_for(params.max_advance_s, vocab)));
  }
  if (state.max_onset_step) upper = std::min(upper, *state.max_onset_step);
  return upper;
}

}  // namespace

void onset_window_mask(std::span<float> logits, const DecodeState& state, const VocabSpec& vocab,
                       const GenParams& params) {
  if (state.cycle != 0) return;
  const int upper = onset_upper(state, vocab, params);
  mask_range(logits, vocab.time_base() + std::max(upper + 1, 0), vocab.dur_base());
}

void ensemble_mask(std::span<float> logits, const DecodeState& state, const VocabSpec& vocab) {
  if (state.cycle != 2 || !state.ensemble_active()) return;
  for (int instr = 0; instr < vocab.num_instruments; ++instr) {
    if (state.in_ensemble(instr)) continue;
    const TokenId begin = vocab.note_base() + instr * vocab.num_pitches;
    mask_range(logits, begin, begin + vocab.num_pitches);
  }
}

double gap_seconds(const DecodeState& state, int instrument, const VocabSpec& vocab) {
  const auto& last = state.last_onset_step[static_cast<std::size_t>(instrument)];
  const std::int64_t gap = state.clock_step - (last ? *last : 0);
  return static_cast<double>(gap) * vocab.step_seconds();
}

void density_bias(std::span<float> logits, const DecodeState& state, const VocabSpec& vocab,
                  const GenParams& params) {
  if (state.cycle != 2 || !state.ensemble_active() || params.bias_alpha == 0.0) return;
  for (int instr = 0; instr < vocab.num_instruments; ++instr) {
    if (!state.ensemble[static_cast<std::size_t>(instr)]) continue;
    const auto bias = static_cast<float>(params.bias_alpha * gap_seconds(state, instr, vocab));
    const TokenId begin = vocab.note_base() + instr * vocab.num_pitches;
    for (TokenId id = begin; id < begin + vocab.num_pitches; ++id) {
      if (!is_masked(logits[id])) logits[id] += bias;
    }
  }
}

std::vector<TokenId> nucleus_support(std::span<const float> probs, double top_p) {
  auto items = candidates_from_probs(probs);
  const std::size_t k = select_nucleus(items, top_p);
  std::vector<TokenId> ids;
  ids.reserve(k);
  for (std::size_t i = 0; i < k && i < items.size(); ++i) ids.push_back(items[i].id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

TokenId sample(std::span<const float> logits, const GenParams& params, Rng& rng) {
  TokenId best = -1;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!is_masked(logits[i]) && (best < 0 || logits[i] > logits[best])) best = static_cast<TokenId>(i);
  }
  if (best < 0) throw Error(ErrorCode::EmptySupport, "every logit is masked");
  if (params.temperature < kGreedyTemperature) return best;

  // Vectorised float exponentials; masked entries underflow to exactly 0.
  thread_local Eigen::ArrayXf weights;
  thread_local std::vector<Candidate> items;
  const Eigen::Map<const Eigen::ArrayXf> l(logits.data(), static_cast<Eigen::Index>(logits.size()));
  weights = ((l - logits[best]) * static_cast<float>(1.0 / params.temperature)).exp();
  items.clear();
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const float w = weights[static_cast<Eigen::Index>(i)];
    if (w > 0.0f && !is_masked(logits[i])) {
      items.push_back({w, static_cast<TokenId>(i)});
      total += w;
    }
  }
  for (auto& c : items) c.p /= total;

  const std::size_t k = params.top_p >= 1.0 ? items.size() : select_nucleus(items, params.top_p);
  double mass = 0.0;
  for (std::size_t i = 0; i < k; ++i) mass += items[i].p;
  double u = rng.uniform() * mass;
  for (std::size_t i = 0; i < k; ++i) {
    u -= items[i].p;
    if (u < 0.0) return items[i].id;
  }
  return items[k - 1].id;
}

TripletDecoder::TripletDecoder(VocabSpec vocab, GenParams params)
    : vocab_(vocab), params_(std::move(params)) {
  params_.validate(vocab_);
  pipeline_.push_back(std::make_unique<GrammarMask>(vocab_));
  pipeline_.push_back(std::make_unique<OnsetWindow>(vocab_, params_));
  pipeline_.push_back(std::make_unique<EnsembleMask>(vocab_));
  pipeline_.push_back(std::make_unique<DensityBias>(vocab_, params_));
  logits_.resize(static_cast<std::size_t>(vocab_.vocab_size()));
}

void TripletDecoder::apply_pipeline(std::span<float> logits, const DecodeState& state) const {
  for (const auto& p : pipeline_) p->process(logits, state);
}

TokenId TripletDecoder::decode_one(const StepFn& step, DecodeState& state) {
  const TokenKind kind = kind_at(state.cycle);
  TokenRange rows = vocab_.range_of(kind);
  if (kind == TokenKind::Time) {
    // Onsets outside [prev, upper] are masked anyway, so the model skips those rows.
    const int lo = std::clamp(state.prev_onset_step, 0, rows.size());
    const int hi = std::clamp(onset_upper(state, vocab_, params_) + 1, lo, rows.size());
    rows = {rows.begin + lo, rows.begin + hi};
  }
  step(state.pending, rows, logits_);
  TokenId token;
  try {
    apply_pipeline(logits_, state);
    token = sample(logits_, params_, state.rng);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::EmptySupport) throw;
    throw Error(ErrorCode::ChunkRollover, e.what());
  }

  if (kind == TokenKind::Time) {
    state.prev_onset_step = token - vocab_.time_base();
    state.clock_step = state.prev_onset_step;
    if (state.rollover_step && state.prev_onset_step > *state.rollover_step) {
      state.pending = token;
      state.cycle = 1;
      throw Error(ErrorCode::ChunkRollover, "onset step " + std::to_string(state.prev_onset_step) +
                                                " passes rollover step " +
                                                std::to_string(*state.rollover_step));
    }
  } else if (kind == TokenKind::Note) {
    const int instrument = (token - vocab_.note_base()) / vocab_.num_pitches;
    state.last_onset_step[static_cast<std::size_t>(instrument)] = state.clock_step;
  }
  state.cycle = (state.cycle + 1) % 3;
  state.pending = token;
  return token;
}

Triplet TripletDecoder::decode_note_triplet(const StepFn& step, DecodeState& state) {
  if (state.cycle != 0) {
    throw Error(ErrorCode::GrammarViolation, "triplet decoding must start at a Time position");
  }
  Triplet t;
  t.time = decode_one(step, state);
  t.dur = decode_one(step, state);
  t.note = decode_one(step, state);
  return t;
}

}  // namespace midinf
