#include "midinf/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

namespace midinf {

std::string_view to_string(TokenKind kind) {
  switch (kind) {
    case TokenKind::Time: return "Time";
    case TokenKind::Duration: return "Duration";
    case TokenKind::Note: return "Note";
    case TokenKind::Sos: return "SOS";
  }
  return "?";
}

TokenRange VocabSpec::range_of(TokenKind kind) const {
  switch (kind) {
    case TokenKind::Time: return time_range();
    case TokenKind::Duration: return dur_range();
    case TokenKind::Note: return note_range();
    case TokenKind::Sos: return {sos_id(), sos_id() + 1};
  }
  return {};
}

TokenKind VocabSpec::kind_of(TokenId id) const {
  if (id < 0 || id >= vocab_size()) {
    throw Error(ErrorCode::KindMismatch, "token id " + std::to_string(id) + " outside vocabulary");
  }
  if (id < dur_base()) return TokenKind::Time;
  if (id < note_base()) return TokenKind::Duration;
  if (id < sos_id()) return TokenKind::Note;
  return TokenKind::Sos;
}

void VocabSpec::validate() const {
  if (time_resolution_ms <= 0 || max_time_steps <= 0 || max_dur_steps <= 0 ||
      num_instruments <= 0 || num_pitches <= 0) {
    throw Error(ErrorCode::InvalidConfig, "vocabulary fields must be positive");
  }
}

void to_json(nlohmann::json& j, const VocabSpec& v) {
  j = nlohmann::json{{"time_resolution_ms", v.time_resolution_ms},
                     {"max_time_steps", v.max_time_steps},
                     {"max_dur_steps", v.max_dur_steps},
                     {"num_instruments", v.num_instruments},
                     {"num_pitches", v.num_pitches}};
}

void from_json(const nlohmann::json& j, VocabSpec& v) {
  VocabSpec d;
  v.time_resolution_ms = j.value("time_resolution_ms", d.time_resolution_ms);
  v.max_time_steps = j.value("max_time_steps", d.max_time_steps);
  v.max_dur_steps = j.value("max_dur_steps", d.max_dur_steps);
  v.num_instruments = j.value("num_instruments", d.num_instruments);
  v.num_pitches = j.value("num_pitches", d.num_pitches);
  v.validate();
}

void to_json(nlohmann::json& j, const NoteEvent& n) {
  j = nlohmann::json{{"onset_s", n.onset_s},
                     {"dur_s", n.duration_s},
                     {"instrument", n.instrument},
                     {"pitch", n.pitch},
                     {"velocity", n.velocity}};
}

void from_json(const nlohmann::json& j, NoteEvent& n) {
  n.onset_s = j.at("onset_s").get<double>();
  n.duration_s = j.at("dur_s").get<double>();
  n.instrument = j.at("instrument").get<int>();
  n.pitch = j.at("pitch").get<int>();
  n.velocity = j.value("velocity", NoteEvent::kDefaultVelocity);
}

QuantizedNote quantize(const NoteEvent& note, const VocabSpec& vocab) {
  const double steps_per_second = 1000.0 / vocab.time_resolution_ms;
  QuantizedNote q;
  q.onset_step = std::llround(note.onset_s * steps_per_second);
  const long long dur = std::llround(note.duration_s * steps_per_second);
  q.dur_steps = static_cast<int>(std::clamp<long long>(dur, 1, vocab.max_dur_steps));
  q.instrument = note.instrument;
  q.pitch = note.pitch;
  q.velocity = note.velocity;
  return q;
}

NoteEvent to_event(const QuantizedNote& note, const VocabSpec& vocab) {
  // Divide rather than multiply by the step length so grid values print cleanly (1.23, not 1.2300000000000002).
  const double steps_per_second = 1000.0 / vocab.time_resolution_ms;
  return NoteEvent{static_cast<double>(note.onset_step) / steps_per_second,
                   static_cast<double>(note.dur_steps) / steps_per_second, note.instrument,
                   note.pitch, note.velocity};
}

NoteEvent snap_to_grid(const NoteEvent& note, const VocabSpec& vocab) {
  return to_event(quantize(note, vocab), vocab);
}

bool canonical_less(const QuantizedNote& a, const QuantizedNote& b) {
  return std::tie(a.onset_step, a.instrument, a.pitch, a.dur_steps) <
         std::tie(b.onset_step, b.instrument, b.pitch, b.dur_steps);
}

void canonical_sort(std::vector<NoteEvent>& notes, const VocabSpec& vocab) {
  std::stable_sort(notes.begin(), notes.end(), [&](const NoteEvent& a, const NoteEvent& b) {
    return canonical_less(quantize(a, vocab), quantize(b, vocab));
  });
}

Triplet encode_note(const QuantizedNote& q, const VocabSpec& vocab) {
  if (q.onset_step < 0 || q.onset_step >= vocab.max_time_steps) {
    throw Error(ErrorCode::OnsetOutOfRange,
                "onset step " + std::to_string(q.onset_step) + " not in [0, " +
                    std::to_string(vocab.max_time_steps) + ")");
  }
  if (q.instrument < 0 || q.instrument >= vocab.num_instruments || q.pitch < 0 ||
      q.pitch >= vocab.num_pitches) {
    throw Error(ErrorCode::InvalidNote, "instrument " + std::to_string(q.instrument) +
                                            " pitch " + std::to_string(q.pitch) +
                                            " outside vocabulary");
  }
  return Triplet{static_cast<TokenId>(q.onset_step), vocab.dur_base() + (q.dur_steps - 1),
                 vocab.note_base() + q.instrument * vocab.num_pitches + q.pitch};
}

Triplet encode_note(const NoteEvent& note, const VocabSpec& vocab) {
  return encode_note(quantize(note, vocab), vocab);
}

QuantizedNote decode_note_steps(const Triplet& t, const VocabSpec& vocab) {
  auto expect = [&](TokenId id, TokenKind kind) {
    if (!vocab.range_of(kind).contains(id)) {
      throw Error(ErrorCode::KindMismatch, "token " + std::to_string(id) + " is not a " +
                                               std::string(to_string(kind)) + " token");
    }
  };
  expect(t.time, TokenKind::Time);
  expect(t.dur, TokenKind::Duration);
  expect(t.note, TokenKind::Note);
  const int packed = t.note - vocab.note_base();
  return QuantizedNote{t.time - vocab.time_base(), t.dur - vocab.dur_base() + 1,
                       packed / vocab.num_pitches, packed % vocab.num_pitches,
                       NoteEvent::kDefaultVelocity};
}

NoteEvent decode_note(const Triplet& t, const VocabSpec& vocab) {
  return to_event(decode_note_steps(t, vocab), vocab);
}

TokenSeq encode_sequence(std::span<const NoteEvent> notes, const VocabSpec& vocab,
                         const EncodeOptions& options) {
  std::vector<QuantizedNote> q;
  q.reserve(notes.size());
  for (const auto& n : notes) q.push_back(quantize(n, vocab));

  if (!std::is_sorted(q.begin(), q.end(), canonical_less)) {
    if (!options.auto_sort) {
      throw Error(ErrorCode::Unsorted, "notes are not in (onset, instrument, pitch) order");
    }
    std::stable_sort(q.begin(), q.end(), canonical_less);
  }

  const std::size_t length = (options.with_sos ? 1 : 0) + 3 * q.size();
  if (options.enforce_cap && length > kMaxSequenceTokens) {
    throw Error(ErrorCode::TooLong, std::to_string(length) + " tokens exceeds " +
                                        std::to_string(kMaxSequenceTokens));
  }

  TokenSeq seq;
  seq.has_sos = options.with_sos;
  seq.tokens.reserve(length);
  if (options.with_sos) seq.tokens.push_back(vocab.sos_id());
  for (const auto& n : q) {
    const Triplet t = encode_note(n, vocab);
    seq.tokens.insert(seq.tokens.end(), {t.time, t.dur, t.note});
  }
  return seq;
}

GrammarViolation::GrammarViolation(std::size_t index, TokenKind expected,
                                   const std::string& detail)
    : Error(ErrorCode::GrammarViolation, "at index " + std::to_string(index) + ", expected " +
                                             std::string(to_string(expected)) + ": " + detail),
      index_(index),
      expected_(expected) {}

void check_sequence(const TokenSeq& seq, const VocabSpec& vocab) {
  static constexpr TokenKind kCycle[3] = {TokenKind::Time, TokenKind::Duration, TokenKind::Note};

  std::size_t start = 0;
  if (seq.has_sos) {
    if (seq.tokens.empty() || seq.tokens[0] != vocab.sos_id()) {
      throw GrammarViolation(0, TokenKind::Sos, "sequence does not start with SOS");
    }
    start = 1;
  }
  TokenId prev_time = -1;
  for (std::size_t i = start; i < seq.tokens.size(); ++i) {
    const TokenKind expected = kCycle[(i - start) % 3];
    const TokenId id = seq.tokens[i];
    if (!vocab.range_of(expected).contains(id)) {
      throw GrammarViolation(i, expected, "found token " + std::to_string(id));
    }
    if (expected == TokenKind::Time) {
      if (id < prev_time) {
        throw GrammarViolation(i, expected, "onset step " + std::to_string(id) +
                                                " precedes " + std::to_string(prev_time));
      }
      prev_time = id;
    }
  }
  if ((seq.tokens.size() - start) % 3 != 0) {
    throw GrammarViolation(seq.tokens.size(), kCycle[(seq.tokens.size() - start) % 3],
                           "sequence ends inside a triplet");
  }
}

std::vector<NoteEvent> decode_sequence(const TokenSeq& seq, const VocabSpec& vocab) {
  check_sequence(seq, vocab);
  const std::size_t start = seq.has_sos ? 1 : 0;
  std::vector<QuantizedNote> q;
  q.reserve(seq.body_size() / 3);
  for (std::size_t i = start; i + 2 < seq.tokens.size(); i += 3) {
    q.push_back(decode_note_steps({seq.tokens[i], seq.tokens[i + 1], seq.tokens[i + 2]}, vocab));
  }
  std::stable_sort(q.begin(), q.end(), canonical_less);
  std::vector<NoteEvent> out;
  out.reserve(q.size());
  for (const auto& n : q) out.push_back(to_event(n, vocab));
  return out;
}

}  // namespace midinf
