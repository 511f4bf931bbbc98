#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <random>
#include <vector>

#include "midinf/model.hpp"
#include "midinf/tokenizer.hpp"

namespace midinf::testing {

inline const VocabSpec& vocab() {
  static const VocabSpec v;
  return v;
}

inline ModelConfig toy_config() { return ModelConfig::preset("toy", vocab().vocab_size()); }

/// Toy model with random weights, built once per seed and shared.
inline std::shared_ptr<const Model> toy_model(std::uint64_t seed = 7) {
  static std::map<std::uint64_t, std::shared_ptr<const Model>> cache;
  auto& slot = cache[seed];
  if (!slot) {
    auto weights = std::make_shared<WeightStore>(init_random(toy_config(), seed));
    slot = std::make_shared<Model>(toy_config(), std::move(weights));
  }
  return slot;
}

/// Grid-aligned random note, onset below `max_onset_steps`.
inline NoteEvent random_grid_note(std::mt19937_64& rng, int max_onset_steps = 10000,
                                  bool random_velocity = false) {
  const VocabSpec& v = vocab();
  QuantizedNote q;
  q.onset_step = std::uniform_int_distribution<int>(0, max_onset_steps - 1)(rng);
  q.dur_steps = std::uniform_int_distribution<int>(1, v.max_dur_steps)(rng);
  q.instrument = std::uniform_int_distribution<int>(0, v.num_instruments - 1)(rng);
  q.pitch = std::uniform_int_distribution<int>(0, v.num_pitches - 1)(rng);
  q.velocity = random_velocity ? std::uniform_int_distribution<int>(1, 127)(rng) : 80;
  return to_event(q, v);
}

/// `notes_per_s` notes per second for `seconds`, placed at bin midpoints of
/// width 1/notes_per_s so onset counting is exact in every 1 s bin.
inline std::vector<NoteEvent> constant_density(double notes_per_s, double seconds, int instrument = 0) {
  std::vector<NoteEvent> out;
  const int n = static_cast<int>(std::lround(notes_per_s * seconds));
  for (int k = 0; k < n; ++k) {
    NoteEvent e;
    e.onset_s = (k + 0.5) / notes_per_s;
    e.duration_s = 0.01;
    e.instrument = instrument;
    e.pitch = 60;
    out.push_back(e);
  }
  return out;
}

}  // namespace midinf::testing
