#pragma once

// Triplet note vocabulary: every note is (onset time, duration, instrument+pitch).
//
// Id layout with the default VocabSpec:
//   [0, 10000)        onset time steps (10 ms each, onsets in [0 s, 100 s))
//   [10000, 11000)    duration steps (1..1000 steps, i.e. (0 s, 10 s])
//   [11000, 27512)    instrument * 128 + pitch
//   27512             start-of-sequence
//
// A sequence is an optional SOS followed by triplets; onsets never decrease.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "midinf/error.hpp"

namespace midinf {

using TokenId = std::int32_t;

enum class TokenKind { Time, Duration, Note, Sos };

std::string_view to_string(TokenKind kind);

/// Half-open id interval.
struct TokenRange {
  TokenId begin = 0;
  TokenId end = 0;

  constexpr TokenId size() const { return end - begin; }
  constexpr bool empty() const { return end <= begin; }
  constexpr bool contains(TokenId id) const { return id >= begin && id < end; }
};

struct VocabSpec {
  int time_resolution_ms = 10;
  int max_time_steps = 10000;
  int max_dur_steps = 1000;
  int num_instruments = 129;
  int num_pitches = 128;

  static constexpr int kDrumInstrument = 128;

  TokenId time_base() const { return 0; }
  TokenId dur_base() const { return max_time_steps; }
  TokenId note_base() const { return max_time_steps + max_dur_steps; }
  TokenId sos_id() const { return note_base() + num_instruments * num_pitches; }
  int vocab_size() const { return sos_id() + 1; }

  TokenRange time_range() const { return {time_base(), dur_base()}; }
  TokenRange dur_range() const { return {dur_base(), note_base()}; }
  TokenRange note_range() const { return {note_base(), sos_id()}; }
  TokenRange range_of(TokenKind kind) const;

  /// Throws KindMismatch for ids outside [0, vocab_size).
  TokenKind kind_of(TokenId id) const;

  double step_seconds() const { return time_resolution_ms / 1000.0; }

  void validate() const;

  bool operator==(const VocabSpec&) const = default;
};

void to_json(nlohmann::json& j, const VocabSpec& v);
void from_json(const nlohmann::json& j, VocabSpec& v);

struct NoteEvent {
  double onset_s = 0.0;
  double duration_s = 0.0;
  int instrument = 0;
  int pitch = 0;
  int velocity = 80;

  static constexpr int kDefaultVelocity = 80;

  bool operator==(const NoteEvent&) const = default;
};

void to_json(nlohmann::json& j, const NoteEvent& n);
void from_json(const nlohmann::json& j, NoteEvent& n);

/// A note snapped to the grid, in integer steps.
struct QuantizedNote {
  std::int64_t onset_step = 0;
  int dur_steps = 1;
  int instrument = 0;
  int pitch = 0;
  int velocity = NoteEvent::kDefaultVelocity;

  bool operator==(const QuantizedNote&) const = default;
};

/// Round-to-nearest on the time grid; durations clamp to [1, max_dur_steps].
/// Onsets are not range-checked here (stream-global time may exceed 100 s).
QuantizedNote quantize(const NoteEvent& note, const VocabSpec& vocab);
NoteEvent to_event(const QuantizedNote& note, const VocabSpec& vocab);

/// quantize() followed by to_event(): the value decode(encode(n)) must reproduce.
NoteEvent snap_to_grid(const NoteEvent& note, const VocabSpec& vocab);

/// Canonical order: onset, then instrument, then pitch, then duration.
bool canonical_less(const QuantizedNote& a, const QuantizedNote& b);
void canonical_sort(std::vector<NoteEvent>& notes, const VocabSpec& vocab);

struct Triplet {
  TokenId time = 0;
  TokenId dur = 0;
  TokenId note = 0;

  bool operator==(const Triplet&) const = default;
};

Triplet encode_note(const NoteEvent& note, const VocabSpec& vocab);
Triplet encode_note(const QuantizedNote& note, const VocabSpec& vocab);
NoteEvent decode_note(const Triplet& t, const VocabSpec& vocab);
QuantizedNote decode_note_steps(const Triplet& t, const VocabSpec& vocab);

struct TokenSeq {
  std::vector<TokenId> tokens;
  bool has_sos = false;

  std::size_t body_size() const { return tokens.size() - (has_sos ? 1 : 0); }
};

inline constexpr std::size_t kMaxSequenceTokens = 1024;
inline constexpr std::size_t kMaxSequenceNotes = 341;

struct EncodeOptions {
  bool with_sos = true;
  bool enforce_cap = true;
  /// When false, input out of canonical order is rejected with Unsorted.
  bool auto_sort = false;
};

TokenSeq encode_sequence(std::span<const NoteEvent> notes, const VocabSpec& vocab,
                         const EncodeOptions& options = {});

/// Thrown for sequences that break the triplet cycle or onset monotonicity.
class GrammarViolation : public Error {
 public:
  GrammarViolation(std::size_t index, TokenKind expected, const std::string& detail);

  std::size_t index() const { return index_; }
  TokenKind expected() const { return expected_; }

 private:
  std::size_t index_;
  TokenKind expected_;
};

/// Throws GrammarViolation at the first offending index.
void check_sequence(const TokenSeq& seq, const VocabSpec& vocab);

std::vector<NoteEvent> decode_sequence(const TokenSeq& seq, const VocabSpec& vocab);

}  // namespace midinf
