#pragma once

// Minimal hand-rolled SMF byte builder for constructing reader fixtures.

#include <cstdint>
#include <initializer_list>
#include <vector>

namespace midinf::testing {

class TrackBuilder {
 public:
  TrackBuilder& delta(std::uint32_t ticks) {
    std::uint8_t buf[5];
    int n = 0;
    buf[n++] = ticks & 0x7F;
    while (ticks >>= 7) buf[n++] = static_cast<std::uint8_t>((ticks & 0x7F) | 0x80);
    while (n) bytes.push_back(buf[--n]);
    return *this;
  }
  TrackBuilder& raw(std::initializer_list<std::uint8_t> b) {
    bytes.insert(bytes.end(), b);
    return *this;
  }
  TrackBuilder& tempo(std::uint32_t dt, std::uint32_t us) {
    return delta(dt).raw({0xFF, 0x51, 0x03, std::uint8_t(us >> 16), std::uint8_t(us >> 8), std::uint8_t(us)});
  }
  TrackBuilder& end(std::uint32_t dt = 0) { return delta(dt).raw({0xFF, 0x2F, 0x00}); }

  std::vector<std::uint8_t> bytes;
};

inline std::vector<std::uint8_t> smf(int format, int ppq, const std::vector<TrackBuilder>& tracks) {
  std::vector<std::uint8_t> out{'M', 'T', 'h', 'd', 0, 0, 0, 6, 0, std::uint8_t(format),
                                std::uint8_t(tracks.size() >> 8), std::uint8_t(tracks.size()),
                                std::uint8_t(ppq >> 8), std::uint8_t(ppq)};
  for (const auto& t : tracks) {
    const auto n = t.bytes.size();
    out.insert(out.end(), {'M', 'T', 'r', 'k', std::uint8_t(n >> 24), std::uint8_t(n >> 16), std::uint8_t(n >> 8),
                           std::uint8_t(n)});
    out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  }
  return out;
}

}  // namespace midinf::testing
