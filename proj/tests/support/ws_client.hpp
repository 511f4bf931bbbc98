#pragma once

// WebSocket test client with a receive timeout. One async read stays pending
// across calls, so a timed-out read() loses nothing.

#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <chrono>
#include <optional>
#include <string>

#include "json.hpp"

namespace midinf::testing {

class WsClient {
 public:
  explicit WsClient(unsigned short port, int timeout_ms = 5000) : ws_(ioc_), timeout_(timeout_ms) {
    namespace net = boost::asio;
    net::ip::tcp::resolver resolver(ioc_);
    net::connect(ws_.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
    ws_.handshake("127.0.0.1", "/");
    ws_.text(true);
  }

  void set_timeout(int ms) { timeout_ = std::chrono::milliseconds(ms); }

  void send(const std::string& text) { ws_.write(boost::asio::buffer(text)); }
  void send(const nlohmann::json& j) { send(j.dump()); }

  /// Next frame, or nullopt on timeout / close (see closed_reason()).
  std::optional<nlohmann::json> read() {
    if (!pending_) {
      pending_ = true;
      done_ = false;
      ws_.async_read(buffer_, [this](boost::beast::error_code ec, std::size_t) {
        done_ = true;
        last_error_ = ec;
      });
    }
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    ioc_.restart();
    while (!done_ && std::chrono::steady_clock::now() < deadline) {
      if (ioc_.run_one_until(deadline) == 0 && ioc_.stopped()) ioc_.restart();
    }
    if (!done_) return std::nullopt;
    pending_ = false;
    if (last_error_) return std::nullopt;
    auto frame = nlohmann::json::parse(boost::beast::buffers_to_string(buffer_.data()));
    buffer_.consume(buffer_.size());
    return frame;
  }

  /// Next frame whose "type" matches.
  std::optional<nlohmann::json> read_type(const std::string& type) {
    while (auto f = read()) {
      if (f->at("type") == type) return f;
    }
    return std::nullopt;
  }

  std::string closed_reason() const { return std::string(ws_.reason().reason.c_str()); }
  boost::beast::error_code last_error() const { return last_error_; }

 private:
  boost::asio::io_context ioc_;
  boost::beast::websocket::stream<boost::asio::ip::tcp::socket> ws_;
  std::chrono::milliseconds timeout_;
  boost::beast::flat_buffer buffer_;
  bool pending_ = false;
  bool done_ = false;
  boost::beast::error_code last_error_;
};

}  // namespace midinf::testing
