#include "midinf/midi_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <fstream>
#include <map>
#include <tuple>

namespace midinf {

namespace {

constexpr int kDrumChannel = 9;

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, ErrorCode code) : bytes_(bytes), code_(code) {}

  bool done() const { return pos_ >= bytes_.size(); }
  std::size_t pos() const { return pos_; }

  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint8_t peek() {
    need(1);
    return bytes_[pos_];
  }
  std::uint16_t u16() {
    const auto hi = u8();
    return static_cast<std::uint16_t>((hi << 8) | u8());
  }
  std::uint32_t u32() {
    const std::uint32_t hi = u16();
    return (hi << 16) | u16();
  }
  std::uint32_t varlen() {
    std::uint32_t value = 0;
    for (int i = 0; i < 4; ++i) {
      const auto b = u8();
      value = (value << 7) | (b & 0x7F);
      if ((b & 0x80) == 0) return value;
    }
    throw Error(code_, "variable-length quantity longer than 4 bytes");
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error(code_, "unexpected end of data");
  }

  std::span<const std::uint8_t> bytes_;
  ErrorCode code_;
  std::size_t pos_ = 0;
};

std::vector<MidiEvent> parse_track(std::span<const std::uint8_t> data) {
  Reader r(data, ErrorCode::MalformedTrack);
  std::vector<MidiEvent> events;
  std::uint64_t tick = 0;
  std::uint8_t running = 0;
  while (!r.done()) {
    tick += r.varlen();
    MidiEvent ev;
    ev.tick = tick;
    std::uint8_t status = r.peek();
    if (status & 0x80) {
      r.u8();
    } else {
      if (running == 0) throw Error(ErrorCode::MalformedTrack, "data byte without running status");
      status = running;
    }
    ev.status = status;
    if (status == 0xFF) {
      ev.meta_type = r.u8();
      const auto len = r.varlen();
      auto payload = r.take(len);
      ev.data.assign(payload.begin(), payload.end());
      events.push_back(std::move(ev));
      if (events.back().meta_type == 0x2F) break;
      continue;
    }
    if (status == 0xF0 || status == 0xF7) {
      const auto len = r.varlen();
      auto payload = r.take(len);
      ev.data.assign(payload.begin(), payload.end());
      running = 0;
      events.push_back(std::move(ev));
      continue;
    }
    if (status >= 0xF0) throw Error(ErrorCode::MalformedTrack, "unsupported system message in file");
    running = status;
    const std::uint8_t type = status & 0xF0;
    const int n_data = (type == 0xC0 || type == 0xD0) ? 1 : 2;
    for (int i = 0; i < n_data; ++i) {
      const auto b = r.u8();
      if (b & 0x80) throw Error(ErrorCode::MalformedTrack, "status byte where data byte expected");
      ev.data.push_back(b);
    }
    events.push_back(std::move(ev));
  }
  return events;
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  put_u16(out, static_cast<std::uint16_t>(v >> 16));
  put_u16(out, static_cast<std::uint16_t>(v));
}

void put_varlen(std::vector<std::uint8_t>& out, std::uint32_t v) {
  std::uint8_t buf[5];
  int n = 0;
  buf[n++] = v & 0x7F;
  while (v >>= 7) buf[n++] = static_cast<std::uint8_t>((v & 0x7F) | 0x80);
  while (n) out.push_back(buf[--n]);
}

void put_track(std::vector<std::uint8_t>& out, const std::vector<std::uint8_t>& body) {
  out.insert(out.end(), {'M', 'T', 'r', 'k'});
  put_u32(out, static_cast<std::uint32_t>(body.size()));
  out.insert(out.end(), body.begin(), body.end());
}

std::uint64_t seconds_to_ticks(double seconds) {
  const double ticks_per_second = kWriteTicksPerQuarter * 1e6 / kWriteTempo;
  return static_cast<std::uint64_t>(std::llround(std::max(0.0, seconds) * ticks_per_second));
}

}  // namespace

double MidiDocument::seconds_at(std::uint64_t tick) const {
  double seconds = 0.0;
  std::uint64_t last_tick = 0;
  std::uint32_t tempo = 500000;
  for (const auto& change : tempo_map) {
    if (change.tick >= tick) break;
    seconds += static_cast<double>(change.tick - last_tick) * tempo / (1e6 * ticks_per_quarter);
    last_tick = change.tick;
    tempo = change.us_per_quarter;
  }
  return seconds + static_cast<double>(tick - last_tick) * tempo / (1e6 * ticks_per_quarter);
}

MidiDocument parse_midi(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, ErrorCode::MalformedHeader);
  if (bytes.size() < 14) throw Error(ErrorCode::MalformedHeader, "file too short");
  auto magic = r.take(4);
  if (!std::equal(magic.begin(), magic.end(), "MThd")) {
    throw Error(ErrorCode::MalformedHeader, "missing MThd chunk");
  }
  const auto header_len = r.u32();
  if (header_len < 6) throw Error(ErrorCode::MalformedHeader, "header chunk shorter than 6 bytes");
  MidiDocument doc;
  doc.format = r.u16();
  const auto n_tracks = r.u16();
  const auto division = r.u16();
  r.take(header_len - 6);
  if (doc.format == 2) throw Error(ErrorCode::UnsupportedFormat, "SMF format 2");
  if (doc.format > 2) throw Error(ErrorCode::MalformedHeader, "unknown SMF format " + std::to_string(doc.format));
  if (division & 0x8000) throw Error(ErrorCode::UnsupportedFormat, "SMPTE time division");
  if (division == 0) throw Error(ErrorCode::MalformedHeader, "zero ticks per quarter note");
  doc.ticks_per_quarter = division;

  Reader chunks(bytes.subspan(r.pos()), ErrorCode::MalformedTrack);
  while (!chunks.done() && doc.tracks.size() < n_tracks) {
    auto id = chunks.take(4);
    const auto len = chunks.u32();
    auto body = chunks.take(len);
    if (!std::equal(id.begin(), id.end(), "MTrk")) continue;
    doc.tracks.push_back(parse_track(body));
  }
  if (doc.tracks.size() != n_tracks) {
    throw Error(ErrorCode::MalformedTrack, "header declares " + std::to_string(n_tracks) +
                                               " tracks, found " + std::to_string(doc.tracks.size()));
  }

  for (const auto& track : doc.tracks) {
    for (const auto& ev : track) {
      if (ev.status == 0xFF && ev.meta_type == 0x51 && ev.data.size() == 3) {
        doc.tempo_map.push_back(
            {ev.tick, static_cast<std::uint32_t>((ev.data[0] << 16) | (ev.data[1] << 8) | ev.data[2])});
      }
    }
  }
  std::stable_sort(doc.tempo_map.begin(), doc.tempo_map.end(),
                   [](const TempoChange& a, const TempoChange& b) { return a.tick < b.tick; });
  return doc;
}

MidiReadResult read_midi(std::span<const std::uint8_t> bytes, const VocabSpec& vocab) {
  const MidiDocument doc = parse_midi(bytes);

  struct Ref {
    std::uint64_t tick;
    std::size_t track;
    std::size_t index;
  };
  std::vector<Ref> order;
  for (std::size_t t = 0; t < doc.tracks.size(); ++t) {
    for (std::size_t i = 0; i < doc.tracks[t].size(); ++i) order.push_back({doc.tracks[t][i].tick, t, i});
  }
  std::stable_sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) {
    return std::tie(a.tick, a.track, a.index) < std::tie(b.tick, b.track, b.index);
  });

  struct Open {
    std::uint64_t tick;
    int instrument;
    int velocity;
    std::size_t track;
  };
  std::array<int, 16> program{};
  std::map<std::pair<int, int>, std::deque<Open>> open;
  MidiReadResult result;
  auto emit = [&](const Open& on, std::uint64_t off_tick, int pitch) {
    const double onset = doc.seconds_at(on.tick);
    NoteEvent n{onset, doc.seconds_at(off_tick) - onset, on.instrument, pitch, on.velocity};
    result.notes.push_back(snap_to_grid(n, vocab));
  };

  for (const Ref& ref : order) {
    const MidiEvent& ev = doc.tracks[ref.track][ref.index];
    if (ev.status >= 0xF0) continue;
    const int channel = ev.status & 0x0F;
    const int type = ev.status & 0xF0;
    if (type == 0xC0) {
      program[static_cast<std::size_t>(channel)] = ev.data[0];
    } else if (type == 0x90 && ev.data[1] > 0) {
      const int instrument = channel == kDrumChannel ? VocabSpec::kDrumInstrument : program[static_cast<std::size_t>(channel)];
      open[{channel, ev.data[0]}].push_back({ev.tick, instrument, ev.data[1], ref.track});
    } else if (type == 0x80 || type == 0x90) {
      auto it = open.find({channel, ev.data[0]});
      if (it == open.end() || it->second.empty()) continue;
      emit(it->second.front(), ev.tick, ev.data[0]);
      it->second.pop_front();
    }
  }

  for (auto& [key, queue] : open) {
    for (const Open& on : queue) {
      const auto& track = doc.tracks[on.track];
      emit(on, track.empty() ? on.tick : track.back().tick, key.second);
      ++result.dangling_closed;
    }
  }
  canonical_sort(result.notes, vocab);
  return result;
}

std::vector<std::uint8_t> write_midi(std::span<const NoteEvent> notes) {
  std::vector<int> instruments;
  for (const auto& n : notes) {
    if (n.instrument < 0 || n.instrument > VocabSpec::kDrumInstrument || n.pitch < 0 || n.pitch > 127) {
      throw Error(ErrorCode::InvalidNote, "note outside MIDI ranges");
    }
    instruments.push_back(n.instrument);
  }
  std::sort(instruments.begin(), instruments.end());
  instruments.erase(std::unique(instruments.begin(), instruments.end()), instruments.end());
  const auto melodic = std::count_if(instruments.begin(), instruments.end(),
                                     [](int i) { return i != VocabSpec::kDrumInstrument; });
  if (melodic > 15) {
    throw Error(ErrorCode::TooManyInstruments,
                std::to_string(instruments.size()) + " distinct instruments (" + std::to_string(melodic) +
                    " melodic); a file holds at most 15 melodic instruments plus drums. "
                    "Restrict the ensemble or split the export.");
  }

  std::vector<std::uint8_t> out{'M', 'T', 'h', 'd'};
  put_u32(out, 6);
  put_u16(out, 1);
  put_u16(out, static_cast<std::uint16_t>(notes.empty() ? 1 : 1 + instruments.size()));
  put_u16(out, kWriteTicksPerQuarter);

  std::vector<std::uint8_t> tempo_track;
  if (!notes.empty()) {
    tempo_track.insert(tempo_track.end(), {0x00, 0xFF, 0x51, 0x03, static_cast<std::uint8_t>(kWriteTempo >> 16),
                                           static_cast<std::uint8_t>(kWriteTempo >> 8),
                                           static_cast<std::uint8_t>(kWriteTempo)});
  }
  tempo_track.insert(tempo_track.end(), {0x00, 0xFF, 0x2F, 0x00});
  put_track(out, tempo_track);

  int next_channel = 0;
  for (int instrument : instruments) {
    int channel;
    if (instrument == VocabSpec::kDrumInstrument) {
      channel = kDrumChannel;
    } else {
      if (next_channel == kDrumChannel) ++next_channel;
      channel = next_channel++;
    }
    // Sorted by (tick, is_on, order): note-offs precede note-ons at the same tick,
    // and simultaneous note-ons go out in order of their note-off tick so that a
    // first-on first-off reader pairs each with its own release.
    struct Pending {
      std::uint64_t tick;
      int is_on;
      std::uint64_t order;
      std::uint8_t status, d1, d2;
    };
    std::vector<Pending> events;
    for (const auto& n : notes) {
      if (n.instrument != instrument) continue;
      const auto on = seconds_to_ticks(n.onset_s);
      const auto off = std::max(on, seconds_to_ticks(n.onset_s + n.duration_s));
      const auto velocity = static_cast<std::uint8_t>(std::clamp(n.velocity, 1, 127));
      events.push_back({on, 1, off, static_cast<std::uint8_t>(0x90 | channel),
                        static_cast<std::uint8_t>(n.pitch), velocity});
      events.push_back({off, 0, on, static_cast<std::uint8_t>(0x80 | channel),
                        static_cast<std::uint8_t>(n.pitch), 0});
    }
    std::stable_sort(events.begin(), events.end(), [](const Pending& a, const Pending& b) {
      return std::tie(a.tick, a.is_on, a.order) < std::tie(b.tick, b.is_on, b.order);
    });

    std::vector<std::uint8_t> body{0x00, static_cast<std::uint8_t>(0xC0 | channel),
                                   static_cast<std::uint8_t>(instrument == VocabSpec::kDrumInstrument ? 0 : instrument)};
    std::uint64_t tick = 0;
    for (const auto& e : events) {
      put_varlen(body, static_cast<std::uint32_t>(e.tick - tick));
      tick = e.tick;
      body.insert(body.end(), {e.status, e.d1, e.d2});
    }
    body.insert(body.end(), {0x00, 0xFF, 0x2F, 0x00});
    put_track(out, body);
  }
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::Io, "short write to " + path.string());
}

}  // namespace midinf
