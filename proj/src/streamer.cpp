#include "midinf/streamer.hpp"

#include <algorithm>

namespace midinf {

StreamState::StreamState(std::shared_ptr<const Model> model, VocabSpec vocab, GenParams params,
                         std::span<const NoteEvent> prompt, StreamConfig config)
    : model_(std::move(model)),
      vocab_(vocab),
      config_(config),
      params_(params),
      decoder_(vocab, params),
      cache_(model_->config()),
      rng_(params.seed),
      last_onset_global_(static_cast<std::size_t>(vocab.num_instruments)) {
  if (model_->config().vocab_size != vocab_.vocab_size()) {
    throw Error(ErrorCode::InvalidConfig, "model vocab_size " +
                                              std::to_string(model_->config().vocab_size) +
                                              " does not match tokenizer " +
                                              std::to_string(vocab_.vocab_size()));
  }
  const std::size_t needed = 1 + 3 * static_cast<std::size_t>(config_.window_notes) +
                             3 * static_cast<std::size_t>(config_.chunk_notes);
  if (config_.chunk_notes <= 0 || config_.window_notes < 0 ||
      needed > static_cast<std::size_t>(model_->config().context_len) + 1) {
    throw Error(ErrorCode::InvalidConfig, "window + chunk do not fit the model context");
  }
  if (config_.max_window_span_steps >= config_.rollover_step ||
      config_.rollover_step >= vocab_.max_time_steps) {
    throw Error(ErrorCode::InvalidConfig, "window span must leave room below the rollover step");
  }

  std::vector<QuantizedNote> q;
  q.reserve(prompt.size());
  for (const auto& n : prompt) {
    QuantizedNote qn = quantize(n, vocab_);
    if (qn.onset_step < 0) throw Error(ErrorCode::OnsetOutOfRange, "prompt onset is negative");
    if (qn.instrument < 0 || qn.instrument >= vocab_.num_instruments || qn.pitch < 0 ||
        qn.pitch >= vocab_.num_pitches) {
      throw Error(ErrorCode::InvalidNote, "prompt note outside vocabulary");
    }
    q.push_back(qn);
  }
  std::stable_sort(q.begin(), q.end(), canonical_less);
  for (const auto& n : q) {
    last_onset_global_[static_cast<std::size_t>(n.instrument)] = n.onset_step;
    last_onset_step_ = n.onset_step;
  }
  const std::size_t keep = std::min(q.size(), static_cast<std::size_t>(config_.window_notes));
  history_.assign(q.end() - static_cast<std::ptrdiff_t>(keep), q.end());
  last_context_tokens_ = 1 + 3 * current_window().size();
}

std::vector<QuantizedNote> StreamState::current_window() const {
  std::vector<QuantizedNote> window(history_.begin(), history_.end());
  if (window.empty()) return window;
  const std::int64_t last = window.back().onset_step;
  auto first = std::find_if(window.begin(), window.end(), [&](const QuantizedNote& n) {
    return last - n.onset_step <= config_.max_window_span_steps;
  });
  window.erase(window.begin(), first);
  return window;
}

std::size_t StreamState::context_length() const { return last_context_tokens_; }

double StreamState::last_onset_s() const {
  return static_cast<double>(last_onset_step_) * vocab_.step_seconds();
}

void StreamState::set_params(const GenParams& params) {
  params.validate(vocab_);
  if (params.seed != params_.seed) rng_ = Rng(params.seed);
  params_ = params;
  decoder_ = TripletDecoder(vocab_, params_);
}

StreamChunk StreamState::next_chunk() {
  StreamChunk chunk;
  chunk.index = chunk_index_++;

  const std::vector<QuantizedNote> window = current_window();
  const std::int64_t origin = window.empty() ? last_onset_step_ : window.front().onset_step;

  std::vector<TokenId> context{vocab_.sos_id()};
  context.reserve(1 + 3 * window.size());
  chunk.window.reserve(window.size());
  for (QuantizedNote n : window) {
    n.onset_step -= origin;
    const Triplet t = encode_note(n, vocab_);
    context.insert(context.end(), {t.time, t.dur, t.note});
    chunk.window.push_back(to_event(n, vocab_));
  }
  chunk.context_tokens = context.size();
  last_context_tokens_ = context.size();

  cache_.reset();
  for (std::size_t i = 0; i + 1 < context.size(); ++i) {
    model_->forward_step(context[i], cache_, {}, TokenRange{});
  }

  DecodeState state = DecodeState::fresh(vocab_, params_, context.back());
  state.rng = rng_;
  state.prev_onset_step = static_cast<int>(last_onset_step_ - origin);
  state.clock_step = state.prev_onset_step;
  for (std::size_t i = 0; i < last_onset_global_.size(); ++i) {
    if (last_onset_global_[i]) state.last_onset_step[i] = *last_onset_global_[i] - origin;
  }
  // The first note is confined below the rollover step so every chunk makes progress.
  state.max_onset_step = config_.rollover_step;
  state.rollover_step = config_.rollover_step;

  const StepFn step = [&](TokenId token, TokenRange wanted, std::span<float> logits) {
    model_->forward_step(token, cache_, logits, wanted);
  };

  chunk.notes.reserve(static_cast<std::size_t>(config_.chunk_notes));
  for (int i = 0; i < config_.chunk_notes; ++i) {
    Triplet t;
    try {
      t = decoder_.decode_note_triplet(step, state);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ChunkRollover) throw;
      chunk.rolled_over = true;
      break;
    }
    state.max_onset_step.reset();

    QuantizedNote n = decode_note_steps(t, vocab_);
    n.onset_step += origin;
    last_onset_step_ = n.onset_step;
    last_onset_global_[static_cast<std::size_t>(n.instrument)] = n.onset_step;
    history_.push_back(n);
    if (history_.size() > static_cast<std::size_t>(config_.window_notes)) history_.pop_front();
    chunk.notes.push_back(to_event(n, vocab_));
  }
  peak_cache_length_ = std::max(peak_cache_length_, cache_.length());
  rng_ = state.rng;
  total_notes_ += chunk.notes.size();
  return chunk;
}

StreamState start_stream(std::shared_ptr<const Model> model, const VocabSpec& vocab,
                         const GenParams& params, std::span<const NoteEvent> prompt,
                         const StreamConfig& config) {
  return StreamState(std::move(model), vocab, params, prompt, config);
}

StreamChunk next_chunk(StreamState& state) { return state.next_chunk(); }

void to_json(nlohmann::json& j, const StreamSummary& s) {
  j = nlohmann::json{{"notes", s.notes},   {"chunks", s.chunks},
                     {"wall_s", s.wall_s}, {"tok_s", s.tok_s},
                     {"sink_closed", s.sink_closed}};
}

StreamSummary run_stream(StreamState& state, NoteSink& sink, const StopCondition& stop) {
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  StreamSummary summary;
  auto stopping = [&] {
    if (stop.stop_requested && stop.stop_requested->load()) return true;
    return stop.max_notes && summary.notes >= *stop.max_notes;
  };

  try {
    while (!stopping()) {
      if (stop.before_chunk && !stop.before_chunk(state)) break;
      StreamChunk chunk = state.next_chunk();
      ++summary.chunks;
      for (const auto& note : chunk.notes) {
        if (stopping()) break;
        sink.push(note);
        ++summary.notes;
      }
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::SinkClosed) throw;
    summary.sink_closed = true;
  }

  summary.wall_s = std::chrono::duration<double>(Clock::now() - start).count();
  summary.tok_s = 3.0 * static_cast<double>(summary.notes) / std::max(summary.wall_s, 1e-3);
  return summary;
}

}  // namespace midinf
