#pragma once

// Endless chunk-wise generation.
//
// Each chunk conditions on the most recent notes of the stream (at most
// window_notes), shifted so the first of them sits at onset 0, then samples
// up to chunk_notes new triplets and shifts them back to stream time.
// Window (170 notes, 510 tokens) + SOS + chunk (510 tokens) fits in 1024.

#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "midinf/bounded_queue.hpp"
#include "midinf/decoding.hpp"
#include "midinf/model.hpp"
#include "midinf/tokenizer.hpp"

namespace midinf {

struct StreamConfig {
  int chunk_notes = 170;
  int window_notes = 170;
  /// A sampled onset beyond this relative step ends the chunk early.
  int rollover_step = 9900;
  /// Older window notes are dropped until the window spans at most this many steps.
  int max_window_span_steps = 5000;
};

struct StreamChunk {
  std::size_t index = 0;
  /// New notes, stream-global time.
  std::vector<NoteEvent> notes;
  /// The conditioning window as the model saw it (first onset 0).
  std::vector<NoteEvent> window;
  /// SOS + window triplets.
  std::size_t context_tokens = 0;
  bool rolled_over = false;
};

class StreamState {
 public:
  StreamState(std::shared_ptr<const Model> model, VocabSpec vocab, GenParams params,
              std::span<const NoteEvent> prompt = {}, StreamConfig config = {});

  StreamChunk next_chunk();

  /// Replaces the sampling parameters from the next chunk on.
  void set_params(const GenParams& params);
  const GenParams& params() const { return params_; }

  const VocabSpec& vocab() const { return vocab_; }
  const StreamConfig& config() const { return config_; }

  std::size_t chunk_index() const { return chunk_index_; }
  std::uint64_t total_notes() const { return total_notes_; }
  /// Tokens fed to the model for conditioning (window prefill) of the last chunk.
  std::size_t context_length() const;
  /// Largest number of cache positions any chunk has used so far.
  int peak_cache_length() const { return peak_cache_length_; }
  /// Onset of the most recent note (prompt or generated), seconds.
  double last_onset_s() const;

 private:
  std::vector<QuantizedNote> current_window() const;

  std::shared_ptr<const Model> model_;
  VocabSpec vocab_;
  StreamConfig config_;
  GenParams params_;
  TripletDecoder decoder_;
  KVCache cache_;
  Rng rng_;
  std::deque<QuantizedNote> history_;
  std::vector<std::optional<std::int64_t>> last_onset_global_;
  std::int64_t last_onset_step_ = 0;
  std::size_t chunk_index_ = 0;
  std::uint64_t total_notes_ = 0;
  std::size_t last_context_tokens_ = 1;
  int peak_cache_length_ = 0;
};

/// Prompt notes, if any, are snapped to the grid and canonically sorted; only the
/// last window_notes of them condition the first chunk.
StreamState start_stream(std::shared_ptr<const Model> model, const VocabSpec& vocab,
                         const GenParams& params, std::span<const NoteEvent> prompt = {},
                         const StreamConfig& config = {});

StreamChunk next_chunk(StreamState& state);

class NoteSink {
 public:
  virtual ~NoteSink() = default;
  /// May block; throws SinkClosed when the consumer has gone away.
  virtual void push(const NoteEvent& note) = 0;
};

class QueueSink final : public NoteSink {
 public:
  explicit QueueSink(BoundedQueue<NoteEvent>& queue) : queue_(queue) {}
  void push(const NoteEvent& note) override { queue_.push(note); }

 private:
  BoundedQueue<NoteEvent>& queue_;
};

struct StopCondition {
  std::optional<std::uint64_t> max_notes;
  const std::atomic<bool>* stop_requested = nullptr;
  /// Called before every chunk; returning false stops the stream.
  std::function<bool(StreamState&)> before_chunk;
};

struct StreamSummary {
  std::uint64_t notes = 0;
  std::size_t chunks = 0;
  double wall_s = 0.0;
  double tok_s = 0.0;
  bool sink_closed = false;
};

void to_json(nlohmann::json& j, const StreamSummary& s);

StreamSummary run_stream(StreamState& state, NoteSink& sink, const StopCondition& stop);

}  // namespace midinf
