#pragma once

// Live broadcast of one generation stream over WebSocket (JSON text frames).
// Protocol: docs/protocol.md.

#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <string>

#include "json.hpp"
#include "midinf/streamer.hpp"

namespace midinf {

inline constexpr int kProtocolVersion = 1;

enum class ControlKind { Start, Stop, SetParams };

struct ControlMessage {
  ControlKind kind = ControlKind::Start;
  /// Partial GenParams for SetParams.
  nlohmann::json params = nlohmann::json::object();
};

/// Error codes carried in error frames.
namespace frame_error {
inline constexpr const char* kMalformed = "malformed_frame";
inline constexpr const char* kUnknownKind = "unknown_kind";
inline constexpr const char* kUnsupportedVersion = "unsupported_version";
inline constexpr const char* kInvalidParams = "invalid_params";
}  // namespace frame_error

/// Thrown by parse_control; `code()` is one of frame_error.
class ProtocolError : public std::runtime_error {
 public:
  ProtocolError(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

ControlMessage parse_control(const std::string& text);
std::string_view to_string(ControlKind kind);

std::string hello_frame(const VocabSpec& vocab, const GenParams& params, double buffer_s,
                        std::size_t next_chunk);
std::string note_frame(const NoteEvent& note, std::size_t chunk);
std::string ack_frame(ControlKind kind, std::size_t applied_at_chunk);
std::string error_frame(const std::string& code, const std::string& message);

/// Per-client outgoing frames. push() reports overflow instead of blocking; the
/// owner then drops the client as lagged.
class SendQueue {
 public:
  explicit SendQueue(std::size_t capacity) : capacity_(capacity) {}
  bool push(std::string frame);
  bool empty() const { return frames_.empty(); }
  std::size_t size() const { return frames_.size(); }
  const std::string& front() const { return frames_.front(); }
  void pop() { frames_.pop_front(); }
  void clear() { frames_.clear(); }
  /// Drops frames from the back; the survivors keep their addresses.
  void truncate(std::size_t n) {
    while (frames_.size() > n) frames_.pop_back();
  }

 private:
  std::size_t capacity_;
  std::deque<std::string> frames_;
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  /// 0 picks a free port; see StreamService::port().
  unsigned short port = 0;
  /// Playback buffer advertised to clients in the hello frame.
  double buffer_s = 2.0;
  std::size_t client_queue_frames = 8192;
  /// Generate immediately, or wait for a start control message.
  bool autostart = true;
  /// Pause generation while it is this far ahead of wall-clock playback; 0 disables.
  double max_lead_s = 0.0;
  /// Cap the broadcast rate (tokens per second); 0 disables.
  double throttle_tok_s = 0.0;
  std::optional<std::uint64_t> notes_limit;
};

class StreamService {
 public:
  StreamService(StreamState stream, ServiceConfig config);
  ~StreamService();
  StreamService(const StreamService&) = delete;
  StreamService& operator=(const StreamService&) = delete;

  /// Binds and starts the network and generation threads. Throws PortInUse.
  void start();
  /// Idempotent; joins all threads.
  void stop();

  unsigned short port() const;
  /// True once notes_limit notes have been broadcast.
  bool finished() const;
  std::size_t client_count() const;
  StreamSummary summary() const;
  GenParams params() const;

  /// Receives every broadcast note on the generation thread (may block it).
  void set_note_observer(NoteSink* sink);

 private:
  friend class ServiceSession;
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace midinf
