#pragma once

// Standard MIDI File input/output (format 0 and 1). See docs/midi.md for the
// supported subset.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "midinf/error.hpp"
#include "midinf/tokenizer.hpp"

namespace midinf {

struct MidiEvent {
  std::uint64_t tick = 0;
  std::uint8_t status = 0;  // 0xFF for meta events, 0xF0/0xF7 for sysex
  std::uint8_t meta_type = 0;
  std::vector<std::uint8_t> data;
};

struct TempoChange {
  std::uint64_t tick = 0;
  std::uint32_t us_per_quarter = 500000;
};

struct MidiDocument {
  int format = 1;
  int ticks_per_quarter = 480;
  /// Sorted by tick; the implicit 500000 us/qn applies before the first entry.
  std::vector<TempoChange> tempo_map;
  /// Events carry absolute ticks; running status is already expanded.
  std::vector<std::vector<MidiEvent>> tracks;

  double seconds_at(std::uint64_t tick) const;
};

/// Errors: MalformedHeader, MalformedTrack, UnsupportedFormat.
MidiDocument parse_midi(std::span<const std::uint8_t> bytes);

struct MidiReadResult {
  std::vector<NoteEvent> notes;
  /// Note-ons never matched by a note-off; closed at their track's end.
  std::size_t dangling_closed = 0;
};

/// Notes come back snapped to the vocab grid and canonically sorted. Channel 10
/// maps to the drum instrument (128); other channels use their last program.
MidiReadResult read_midi(std::span<const std::uint8_t> bytes, const VocabSpec& vocab = {});

inline constexpr int kWriteTicksPerQuarter = 480;
inline constexpr std::uint32_t kWriteTempo = 500000;

/// SMF format 1 at 480 PPQ and 120 BPM: a tempo track, then one track per
/// instrument. Throws TooManyInstruments beyond 15 melodic instruments + drums.
std::vector<std::uint8_t> write_midi(std::span<const NoteEvent> notes);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace midinf
