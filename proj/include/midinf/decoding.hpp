#pragma once

// Logit processors and sampling for triplet-grammar decoding.
//
// Each processor rewrites the logit vector in place given the current
// DecodeState. Masked entries hold kMaskedLogit (the most negative finite
// float) so softmax stays well defined.

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "midinf/error.hpp"
#include "midinf/tokenizer.hpp"

namespace midinf {

inline constexpr float kMaskedLogit = std::numeric_limits<float>::lowest();

inline bool is_masked(float logit) { return logit == kMaskedLogit; }

struct GenParams {
  double temperature = 1.0;
  double top_p = 0.98;
  /// Density bias, logits per second of instrument silence.
  double bias_alpha = 0.5;
  /// Instruments allowed at note positions; unset means all.
  std::optional<std::vector<int>> ensemble;
  std::uint64_t seed = 0;
  /// Largest onset advance per note, seconds. 0 disables the limit.
  double max_advance_s = 0.5;

  /// Throws InvalidParams.
  void validate(const VocabSpec& vocab) const;

  bool operator==(const GenParams&) const = default;
};

void to_json(nlohmann::json& j, const GenParams& p);
void from_json(const nlohmann::json& j, GenParams& p);

/// Applies the keys present in `patch` on top of `base`. The result is validated
/// before being returned; `base` is never modified.
GenParams merge_params(const GenParams& base, const nlohmann::json& patch, const VocabSpec& vocab);

/// SplitMix64-seeded xoshiro256** generator; identical streams on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);
  std::uint64_t next();
  /// Uniform in [0, 1).
  double uniform();

 private:
  std::uint64_t s_[4];
};

struct DecodeState {
  /// 0 expects Time, 1 Duration, 2 Note.
  int cycle = 0;
  /// Chunk-relative onset step of the last sampled time token.
  int prev_onset_step = 0;
  /// Chunk-relative clock (onset of the triplet in progress), steps.
  int clock_step = 0;
  /// Per instrument: chunk-relative onset step of its last note (may be negative
  /// when the note predates the current window), or nullopt if never played.
  std::vector<std::optional<std::int64_t>> last_onset_step;
  /// Empty means no ensemble restriction.
  std::vector<bool> ensemble;
  /// Hard cap on the next onset step (masked above it); nullopt for none.
  std::optional<int> max_onset_step;
  /// Sampling an onset above this ends the chunk (ChunkRollover).
  std::optional<int> rollover_step;
  /// Token to feed the model before the next logits are available.
  TokenId pending = 0;
  Rng rng;

  static DecodeState fresh(const VocabSpec& vocab, const GenParams& params, TokenId pending);

  bool ensemble_active() const { return !ensemble.empty(); }
  bool in_ensemble(int instrument) const {
    return ensemble.empty() || (instrument >= 0 && instrument < static_cast<int>(ensemble.size()) &&
                                ensemble[instrument]);
  }
};

class LogitProcessor {
 public:
  virtual ~LogitProcessor() = default;
  virtual void process(std::span<float> logits, const DecodeState& state) const = 0;
};

/// Wrong-kind tokens, onsets before the previous onset, and SOS are masked.
/// Throws EmptySupport if nothing survives.
void grammar_mask(std::span<float> logits, const DecodeState& state, const VocabSpec& vocab);

/// At Time positions, masks onsets beyond prev + max_advance_s and beyond
/// state.max_onset_step.
void onset_window_mask(std::span<float> logits, const DecodeState& state, const VocabSpec& vocab,
                       const GenParams& params);

/// At Note positions, masks instruments outside the active ensemble.
void ensemble_mask(std::span<float> logits, const DecodeState& state, const VocabSpec& vocab);

/// Silence gap of `instrument` at the current clock, in seconds.
double gap_seconds(const DecodeState& state, int instrument, const VocabSpec& vocab);

/// At Note positions with an active ensemble, adds bias_alpha * gap_seconds(j)
/// to every unmasked note id of each ensemble instrument j.
void density_bias(std::span<float> logits, const DecodeState& state, const VocabSpec& vocab,
                  const GenParams& params);

class GrammarMask final : public LogitProcessor {
 public:
  explicit GrammarMask(VocabSpec vocab) : vocab_(vocab) {}
  void process(std::span<float> logits, const DecodeState& state) const override {
    grammar_mask(logits, state, vocab_);
  }

 private:
  VocabSpec vocab_;
};

class OnsetWindow final : public LogitProcessor {
 public:
  OnsetWindow(VocabSpec vocab, GenParams params) : vocab_(vocab), params_(std::move(params)) {}
  void process(std::span<float> logits, const DecodeState& state) const override {
    onset_window_mask(logits, state, vocab_, params_);
  }

 private:
  VocabSpec vocab_;
  GenParams params_;
};

class EnsembleMask final : public LogitProcessor {
 public:
  explicit EnsembleMask(VocabSpec vocab) : vocab_(vocab) {}
  void process(std::span<float> logits, const DecodeState& state) const override {
    ensemble_mask(logits, state, vocab_);
  }

 private:
  VocabSpec vocab_;
};

class DensityBias final : public LogitProcessor {
 public:
  DensityBias(VocabSpec vocab, GenParams params) : vocab_(vocab), params_(std::move(params)) {}
  void process(std::span<float> logits, const DecodeState& state) const override {
    density_bias(logits, state, vocab_, params_);
  }

 private:
  VocabSpec vocab_;
  GenParams params_;
};

/// Indices kept by nucleus filtering: the shortest prefix of tokens ordered by
/// descending probability (ties by ascending id) whose mass reaches top_p.
/// `probs` must be normalized over the finite entries.
std::vector<TokenId> nucleus_support(std::span<const float> probs, double top_p);

/// Temperature + nucleus sampling. Temperature below 1e-6 means argmax
/// (lowest id on ties). Throws EmptySupport when every logit is masked.
TokenId sample(std::span<const float> logits, const GenParams& params, Rng& rng);

/// Feeds `token` to the model and fills `logits` with next-position logits.
/// Only the ids in `wanted` need to be computed; the rest may be left as is.
using StepFn = std::function<void(TokenId token, TokenRange wanted, std::span<float> logits)>;

/// The ordered processor pipeline plus sampler for one stream.
class TripletDecoder {
 public:
  TripletDecoder(VocabSpec vocab, GenParams params);

  const GenParams& params() const { return params_; }
  const VocabSpec& vocab() const { return vocab_; }

  /// Runs every processor, in order, on `logits`.
  void apply_pipeline(std::span<float> logits, const DecodeState& state) const;

  /// Three model steps, each followed by the pipeline and a draw. Updates the
  /// cycle, onsets and per-instrument history in `state`.
  /// Throws ChunkRollover if the grammar leaves no support or the sampled onset
  /// passes state.rollover_step; `state` then holds the partial triplet.
  Triplet decode_note_triplet(const StepFn& step, DecodeState& state);

 private:
  TokenId decode_one(const StepFn& step, DecodeState& state);

  VocabSpec vocab_;
  GenParams params_;
  std::vector<std::unique_ptr<LogitProcessor>> pipeline_;
  std::vector<float> logits_;
};

}  // namespace midinf
