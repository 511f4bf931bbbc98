#include "midinf/stream_service.hpp"

#include <boost/asio/dispatch.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/asio/post.hpp>
#include <boost/asio/strand.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace midinf {

namespace beast = boost::beast;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

std::string_view to_string(ControlKind kind) {
  switch (kind) {
    case ControlKind::Start: return "start";
    case ControlKind::Stop: return "stop";
    case ControlKind::SetParams: return "set_params";
  }
  return "?";
}

ControlMessage parse_control(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(frame_error::kMalformed, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ProtocolError(frame_error::kMalformed, "frame must be a JSON object");
  if (j.contains("v") && j["v"] != kProtocolVersion) {
    throw ProtocolError(frame_error::kUnsupportedVersion, "protocol version " + j["v"].dump());
  }
  if (!j.contains("kind") || !j["kind"].is_string()) {
    throw ProtocolError(frame_error::kMalformed, "missing string field 'kind'");
  }
  const auto kind = j["kind"].get<std::string>();
  ControlMessage msg;
  if (kind == "start") {
    msg.kind = ControlKind::Start;
  } else if (kind == "stop") {
    msg.kind = ControlKind::Stop;
  } else if (kind == "set_params") {
    msg.kind = ControlKind::SetParams;
    if (!j.contains("params") || !j["params"].is_object()) {
      throw ProtocolError(frame_error::kMalformed, "set_params needs an object field 'params'");
    }
    msg.params = j["params"];
  } else {
    throw ProtocolError(frame_error::kUnknownKind, "unknown control kind '" + kind + "'");
  }
  return msg;
}

std::string hello_frame(const VocabSpec& vocab, const GenParams& params, double buffer_s,
                        std::size_t next_chunk) {
  nlohmann::json vocab_json = vocab;
  vocab_json["vocab_size"] = vocab.vocab_size();
  return nlohmann::json{{"v", kProtocolVersion},    {"type", "hello"},         {"vocab", vocab_json},
                        {"params", params},         {"buffer_s", buffer_s},    {"chunk", next_chunk}}
      .dump();
}

std::string note_frame(const NoteEvent& note, std::size_t chunk) {
  nlohmann::json j = note;
  j["v"] = kProtocolVersion;
  j["type"] = "note";
  j["chunk"] = chunk;
  return j.dump();
}

std::string ack_frame(ControlKind kind, std::size_t applied_at_chunk) {
  return nlohmann::json{{"v", kProtocolVersion},
                        {"type", "ack"},
                        {"kind", to_string(kind)},
                        {"applied_at_chunk", applied_at_chunk}}
      .dump();
}

std::string error_frame(const std::string& code, const std::string& message) {
  return nlohmann::json{{"v", kProtocolVersion}, {"type", "error"}, {"code", code}, {"message", message}}.dump();
}

bool SendQueue::push(std::string frame) {
  if (frames_.size() >= capacity_) return false;
  frames_.push_back(std::move(frame));
  return true;
}

class ServiceSession;

struct StreamService::Impl {
  Impl(StreamState s, ServiceConfig c)
      : config(std::move(c)), stream(std::move(s)), params_snapshot(stream.params()) {}

  void accept_loop();
  void register_session(const std::shared_ptr<ServiceSession>& session);
  void on_frame(const std::shared_ptr<ServiceSession>& session, const std::string& text);
  void broadcast(const std::string& frame);
  std::string hello();
  void generation_loop();
  void apply_mail();
  bool wait_for_mail(std::chrono::steady_clock::time_point until);

  ServiceConfig config;
  StreamState stream;

  mutable std::mutex state_mutex;
  GenParams params_snapshot;
  std::size_t next_chunk_snapshot = 0;
  StreamSummary summary;

  net::io_context ioc;
  tcp::acceptor acceptor{ioc};
  unsigned short bound_port = 0;
  std::thread io_thread;
  std::thread gen_thread;

  mutable std::mutex hub_mutex;
  std::vector<std::weak_ptr<ServiceSession>> sessions;

  std::mutex mail_mutex;
  std::condition_variable mail_cv;
  std::deque<std::pair<std::weak_ptr<ServiceSession>, ControlMessage>> mailbox;
  bool shutdown = false;

  std::atomic<bool> running{false};
  std::atomic<bool> finished{false};
  std::atomic<NoteSink*> observer{nullptr};
  bool started = false;
  bool stopped = false;
};

class ServiceSession : public std::enable_shared_from_this<ServiceSession> {
 public:
  ServiceSession(tcp::socket socket, StreamService::Impl& service)
      : ws_(std::move(socket)), service_(service), queue_(service.config.client_queue_frames) {}

  void run() {
    net::dispatch(ws_.get_executor(), [self = shared_from_this()] {
      self->ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
      self->ws_.async_accept(beast::bind_front_handler(&ServiceSession::on_accept, self));
    });
  }

  /// Thread-safe: hops onto the session strand.
  void send(std::string frame) {
    net::post(ws_.get_executor(), [self = shared_from_this(), f = std::move(frame)]() mutable {
      self->enqueue(std::move(f));
    });
  }

  bool closed() const { return closed_.load(); }

  void close() {
    net::post(ws_.get_executor(), [self = shared_from_this()] {
      if (self->closed_.exchange(true)) return;
      self->ws_.async_close(websocket::close_code::going_away, [self](beast::error_code) {});
    });
  }

 private:
  void on_accept(beast::error_code ec) {
    if (ec) {
      closed_ = true;
      return;
    }
    ws_.text(true);
    enqueue(service_.hello());
    service_.register_session(shared_from_this());
    do_read();
  }

  void do_read() {
    ws_.async_read(buffer_, beast::bind_front_handler(&ServiceSession::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) {
      closed_ = true;
      return;
    }
    std::string text = beast::buffers_to_string(buffer_.data());
    buffer_.consume(buffer_.size());
    service_.on_frame(shared_from_this(), text);
    do_read();
  }

  void enqueue(std::string frame) {
    if (closed_) return;
    if (!queue_.push(std::move(frame))) {
      lagged();
      return;
    }
    if (!writing_) do_write();
  }

  void do_write() {
    writing_ = true;
    ws_.async_write(net::buffer(queue_.front()),
                    beast::bind_front_handler(&ServiceSession::on_write, shared_from_this()));
  }

  void on_write(beast::error_code ec, std::size_t) {
    if (ec) {
      closed_ = true;
      writing_ = false;
      return;
    }
    queue_.pop();
    if (queue_.empty() || closed_) {
      writing_ = false;
      return;
    }
    do_write();
  }

  void lagged() {
    closed_ = true;
    // The in-flight frame (the front) must outlive its async_write.
    queue_.truncate(writing_ ? 1 : 0);
    ws_.async_close(websocket::close_reason(websocket::close_code::policy_error, "lagged"),
                    [self = shared_from_this()](beast::error_code) {});
  }

  websocket::stream<beast::tcp_stream> ws_;
  StreamService::Impl& service_;
  beast::flat_buffer buffer_;
  SendQueue queue_;
  bool writing_ = false;
  std::atomic<bool> closed_{false};
};

void StreamService::Impl::accept_loop() {
  acceptor.async_accept(net::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
    if (!ec) std::make_shared<ServiceSession>(std::move(socket), *this)->run();
    if (acceptor.is_open()) accept_loop();
  });
}

void StreamService::Impl::register_session(const std::shared_ptr<ServiceSession>& session) {
  std::lock_guard lock(hub_mutex);
  sessions.push_back(session);
}

void StreamService::Impl::broadcast(const std::string& frame) {
  std::lock_guard lock(hub_mutex);
  std::erase_if(sessions, [](const std::weak_ptr<ServiceSession>& w) {
    auto s = w.lock();
    return !s || s->closed();
  });
  for (const auto& w : sessions) {
    if (auto s = w.lock()) s->send(frame);
  }
}

std::string StreamService::Impl::hello() {
  std::lock_guard lock(state_mutex);
  return hello_frame(stream.vocab(), params_snapshot, config.buffer_s, next_chunk_snapshot);
}

void StreamService::Impl::on_frame(const std::shared_ptr<ServiceSession>& session, const std::string& text) {
  try {
    ControlMessage msg = parse_control(text);
    {
      std::lock_guard lock(mail_mutex);
      mailbox.emplace_back(session, std::move(msg));
    }
    mail_cv.notify_all();
  } catch (const ProtocolError& e) {
    session->send(error_frame(e.code(), e.what()));
  }
}

void StreamService::Impl::apply_mail() {
  std::deque<std::pair<std::weak_ptr<ServiceSession>, ControlMessage>> pending;
  {
    std::lock_guard lock(mail_mutex);
    pending.swap(mailbox);
  }
  for (auto& [weak, msg] : pending) {
    auto session = weak.lock();
    try {
      switch (msg.kind) {
        case ControlKind::Start: running = true; break;
        case ControlKind::Stop: running = false; break;
        case ControlKind::SetParams: {
          GenParams next = merge_params(stream.params(), msg.params, stream.vocab());
          stream.set_params(next);
          std::lock_guard lock(state_mutex);
          params_snapshot = next;
          break;
        }
      }
      if (session) session->send(ack_frame(msg.kind, stream.chunk_index()));
    } catch (const Error& e) {
      if (session) session->send(error_frame(frame_error::kInvalidParams, e.what()));
    }
  }
}

bool StreamService::Impl::wait_for_mail(std::chrono::steady_clock::time_point until) {
  std::unique_lock lock(mail_mutex);
  mail_cv.wait_until(lock, until, [&] { return shutdown || !mailbox.empty(); });
  return !shutdown;
}

void StreamService::Impl::generation_loop() {
  using Clock = std::chrono::steady_clock;
  Clock::time_point first_chunk{};
  Clock::time_point throttle_origin{};
  double first_onset = 0.0;
  std::uint64_t sent = 0;
  const auto start = Clock::now();

  auto record = [&] {
    std::lock_guard lock(state_mutex);
    summary.notes = sent;
    summary.chunks = stream.chunk_index();
    summary.wall_s = std::chrono::duration<double>(Clock::now() - start).count();
    summary.tok_s = 3.0 * static_cast<double>(sent) / std::max(summary.wall_s, 1e-3);
    next_chunk_snapshot = stream.chunk_index();
  };

  while (true) {
    {
      std::lock_guard lock(mail_mutex);
      if (shutdown) break;
    }
    apply_mail();
    record();
    if (!running || finished) {
      if (!wait_for_mail(Clock::now() + std::chrono::milliseconds(50))) break;
      continue;
    }
    if (config.max_lead_s > 0.0 && sent > 0) {
      const double played = std::chrono::duration<double>(Clock::now() - first_chunk).count();
      if (stream.last_onset_s() - first_onset - played > config.max_lead_s) {
        if (!wait_for_mail(Clock::now() + std::chrono::milliseconds(20))) break;
        continue;
      }
    }

    StreamChunk chunk = stream.next_chunk();
    if (sent == 0) {
      first_chunk = Clock::now();
      throttle_origin = first_chunk;
      if (!chunk.notes.empty()) first_onset = chunk.notes.front().onset_s;
    }
    for (const auto& note : chunk.notes) {
      if (config.notes_limit && sent >= *config.notes_limit) break;
      if (config.throttle_tok_s > 0.0) {
        const auto due = throttle_origin + std::chrono::duration_cast<Clock::duration>(
                                               std::chrono::duration<double>(3.0 * (sent + 1) / config.throttle_tok_s));
        std::unique_lock lock(mail_mutex);
        if (mail_cv.wait_until(lock, due, [&] { return shutdown; })) break;
      }
      broadcast(note_frame(note, chunk.index));
      if (NoteSink* sink = observer.load()) {
        try {
          sink->push(note);
        } catch (const Error& e) {
          if (e.code() != ErrorCode::SinkClosed) throw;
          observer = nullptr;
        }
      }
      ++sent;
    }
    if (config.notes_limit && sent >= *config.notes_limit) finished = true;
  }
  record();
}

StreamService::StreamService(StreamState stream, ServiceConfig config)
    : impl_(std::make_unique<Impl>(std::move(stream), std::move(config))) {}

StreamService::~StreamService() { stop(); }

void StreamService::start() {
  if (impl_->started) return;
  Impl& s = *impl_;
  beast::error_code ec;
  const auto address = net::ip::make_address(s.config.host, ec);
  if (ec) throw Error(ErrorCode::Io, "bad listen address '" + s.config.host + "'");
  const tcp::endpoint endpoint(address, s.config.port);
  s.acceptor.open(endpoint.protocol(), ec);
  if (!ec) s.acceptor.set_option(net::socket_base::reuse_address(true), ec);
  if (!ec) s.acceptor.bind(endpoint, ec);
  if (ec == net::error::address_in_use) {
    throw Error(ErrorCode::PortInUse, s.config.host + ":" + std::to_string(s.config.port));
  }
  if (!ec) s.acceptor.listen(net::socket_base::max_listen_connections, ec);
  if (ec) throw Error(ErrorCode::Io, "listen on " + s.config.host + ": " + ec.message());
  s.bound_port = s.acceptor.local_endpoint().port();

  s.running = s.config.autostart;
  s.accept_loop();
  s.io_thread = std::thread([&s] { s.ioc.run(); });
  s.gen_thread = std::thread([&s] { s.generation_loop(); });
  s.started = true;
}

void StreamService::stop() {
  Impl& s = *impl_;
  if (!s.started || s.stopped) return;
  s.stopped = true;
  {
    std::lock_guard lock(s.mail_mutex);
    s.shutdown = true;
  }
  s.mail_cv.notify_all();
  if (s.gen_thread.joinable()) s.gen_thread.join();

  {
    std::lock_guard lock(s.hub_mutex);
    for (const auto& w : s.sessions) {
      if (auto session = w.lock()) session->close();
    }
  }
  net::post(s.ioc, [&s] {
    beast::error_code ignored;
    s.acceptor.close(ignored);
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  s.ioc.stop();
  if (s.io_thread.joinable()) s.io_thread.join();
}

unsigned short StreamService::port() const { return impl_->bound_port; }

bool StreamService::finished() const { return impl_->finished.load(); }

std::size_t StreamService::client_count() const {
  std::lock_guard lock(impl_->hub_mutex);
  std::size_t n = 0;
  for (const auto& w : impl_->sessions) {
    auto s = w.lock();
    if (s && !s->closed()) ++n;
  }
  return n;
}

StreamSummary StreamService::summary() const {
  std::lock_guard lock(impl_->state_mutex);
  return impl_->summary;
}

GenParams StreamService::params() const {
  std::lock_guard lock(impl_->state_mutex);
  return impl_->params_snapshot;
}

void StreamService::set_note_observer(NoteSink* sink) { impl_->observer = sink; }

}  // namespace midinf
