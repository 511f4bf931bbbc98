#include <gtest/gtest.h>

#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "midinf/stream_service.hpp"
#include "support/fixtures.hpp"
#include "support/ws_client.hpp"

using namespace midinf;
using midinf::testing::toy_model;
using midinf::testing::vocab;
using midinf::testing::WsClient;
using nlohmann::json;

namespace {

StreamService make_service(ServiceConfig config, GenParams params = {}) {
  return StreamService(start_stream(toy_model(), vocab(), params), std::move(config));
}

ServiceConfig paused(std::uint64_t notes_limit = 2000) {
  ServiceConfig c;
  c.autostart = false;
  c.notes_limit = notes_limit;
  return c;
}

json control(const std::string& kind, json params = nullptr) {
  json j{{"v", 1}, {"kind", kind}};
  if (!params.is_null()) j["params"] = std::move(params);
  return j;
}

}  // namespace

TEST(Protocol, ParseControl) {
  EXPECT_EQ(parse_control(R"({"v":1,"kind":"start"})").kind, ControlKind::Start);
  EXPECT_EQ(parse_control(R"({"kind":"stop"})").kind, ControlKind::Stop);
  const auto sp = parse_control(R"({"v":1,"kind":"set_params","params":{"bias_alpha":10}})");
  EXPECT_EQ(sp.kind, ControlKind::SetParams);
  EXPECT_EQ(sp.params.at("bias_alpha"), 10);

  auto code_of = [](const std::string& text) {
    try {
      parse_control(text);
    } catch (const ProtocolError& e) {
      return e.code();
    }
    return std::string("none");
  };
  EXPECT_EQ(code_of("{oops"), "malformed_frame");
  EXPECT_EQ(code_of("[1,2]"), "malformed_frame");
  EXPECT_EQ(code_of(R"({"v":1})"), "malformed_frame");
  EXPECT_EQ(code_of(R"({"v":1,"kind":"set_params"})"), "malformed_frame");
  EXPECT_EQ(code_of(R"({"v":1,"kind":"dance"})"), "unknown_kind");
  EXPECT_EQ(code_of(R"({"v":2,"kind":"start"})"), "unsupported_version");
}

TEST(Protocol, FrameSchemas) {
  const json hello = json::parse(hello_frame(vocab(), GenParams{}, 2.0, 0));
  EXPECT_EQ(hello.at("v"), 1);
  EXPECT_EQ(hello.at("type"), "hello");
  EXPECT_EQ(hello.at("buffer_s"), 2.0);
  EXPECT_EQ(hello.at("vocab").at("vocab_size"), 27513);
  EXPECT_EQ(hello.at("vocab").at("time_resolution_ms"), 10);
  EXPECT_EQ(hello.at("params").get<GenParams>(), GenParams{});

  const json note = json::parse(note_frame(NoteEvent{1.5, 0.25, 3, 60, 80}, 4));
  for (const char* k : {"onset_s", "dur_s", "instrument", "pitch", "velocity"}) EXPECT_TRUE(note.contains(k)) << k;
  EXPECT_EQ(note.at("type"), "note");
  EXPECT_EQ(note.at("chunk"), 4);

  const json ack = json::parse(ack_frame(ControlKind::SetParams, 7));
  EXPECT_EQ(ack.at("applied_at_chunk"), 7);
  EXPECT_EQ(ack.at("kind"), "set_params");

  const json err = json::parse(error_frame("unknown_kind", "nope"));
  EXPECT_EQ(err.at("type"), "error");
  EXPECT_EQ(err.at("code"), "unknown_kind");
  EXPECT_EQ(err.at("message"), "nope");
}

TEST(Protocol, SendQueueBounded) {
  SendQueue q(2);
  EXPECT_TRUE(q.push("a"));
  EXPECT_TRUE(q.push("b"));
  EXPECT_FALSE(q.push("c"));
  const std::string* front = &q.front();
  q.truncate(1);
  EXPECT_EQ(q.size(), 1u);
  EXPECT_EQ(&q.front(), front);
}

TEST(Service, HelloFirstAndWaitsForStart) {
  StreamService service = make_service(paused());
  service.start();
  ASSERT_NE(service.port(), 0);
  WsClient client(service.port(), 300);
  const auto hello = client.read();
  ASSERT_TRUE(hello);
  EXPECT_EQ(hello->at("type"), "hello");
  EXPECT_EQ(hello->at("buffer_s"), 2.0);
  EXPECT_EQ(hello->at("chunk"), 0);
  EXPECT_FALSE(client.read());  // nothing is generated before start
  EXPECT_EQ(service.summary().notes, 0u);
}

TEST(Service, TwoClientsReceiveIdenticalNotes) {
  StreamService service = make_service(paused(600));
  service.start();
  WsClient a(service.port()), b(service.port());
  ASSERT_EQ(a.read()->at("type"), "hello");
  ASSERT_EQ(b.read()->at("type"), "hello");
  a.send(control("start"));
  std::vector<json> na, nb;
  for (int i = 0; i < 600; ++i) {
    auto fa = a.read_type("note");
    auto fb = b.read_type("note");
    ASSERT_TRUE(fa && fb) << i;
    na.push_back(*fa);
    nb.push_back(*fb);
  }
  EXPECT_EQ(na, nb);
  for (std::size_t i = 1; i < na.size(); ++i) EXPECT_LE(na[i - 1].at("onset_s"), na[i].at("onset_s"));
  EXPECT_EQ(service.client_count(), 2u);
  for (int i = 0; i < 100 && !service.finished(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(20));
  EXPECT_TRUE(service.finished());
  service.stop();
  EXPECT_EQ(service.summary().notes, 600u);
}

TEST(Service, SetParamsTakesEffectAtAckedChunk) {
  ServiceConfig config = paused(1400);
  StreamService service = make_service(config);
  service.start();
  WsClient client(service.port());
  ASSERT_TRUE(client.read());
  client.send(control("start"));
  ASSERT_EQ(client.read_type("ack")->at("kind"), "start");

  // Let at least one chunk through, then restrict the ensemble.
  auto first = client.read_type("note");
  ASSERT_TRUE(first);
  client.send(control("set_params", {{"ensemble", {42}}, {"bias_alpha", 10}}));
  std::vector<json> notes{*first};
  std::optional<std::size_t> applied;
  while (auto f = client.read()) {
    if (f->at("type") == "ack") applied = f->at("applied_at_chunk").get<std::size_t>();
    if (f->at("type") == "note") notes.push_back(*f);
    if (notes.size() == 1400) break;
  }
  ASSERT_TRUE(applied);
  EXPECT_GE(*applied, 1u);
  std::map<std::size_t, std::set<int>> instruments_by_chunk;
  for (const auto& n : notes) instruments_by_chunk[n.at("chunk")].insert(n.at("instrument").get<int>());
  for (const auto& [chunk, instruments] : instruments_by_chunk) {
    if (chunk >= *applied)
      EXPECT_EQ(instruments, std::set<int>{42}) << "chunk " << chunk;
    else
      EXPECT_GT(instruments.size(), 1u) << "chunk " << chunk;
  }
  EXPECT_EQ(service.params().ensemble, std::vector<int>{42});
  EXPECT_EQ(service.params().bias_alpha, 10);

  WsClient late(service.port());
  const auto hello = late.read();
  EXPECT_EQ(hello->at("params").at("bias_alpha"), 10);
}

TEST(Service, ErrorFramesKeepConnectionOpen) {
  StreamService service = make_service(paused());
  service.start();
  WsClient client(service.port());
  ASSERT_TRUE(client.read());
  const std::vector<std::pair<std::string, std::string>> cases{
      {"not json", "malformed_frame"},
      {R"({"v":1,"kind":"dance"})", "unknown_kind"},
      {R"({"v":9,"kind":"start"})", "unsupported_version"},
      {R"({"v":1,"kind":"set_params","params":{"top_p":5}})", "invalid_params"},
      {R"({"v":1,"kind":"set_params","params":{"volume":5}})", "invalid_params"},
  };
  for (const auto& [text, code] : cases) {
    client.send(text);
    const auto f = client.read();
    ASSERT_TRUE(f) << text;
    EXPECT_EQ(f->at("type"), "error") << text;
    EXPECT_EQ(f->at("code"), code) << text;
  }
  EXPECT_EQ(service.params(), GenParams{});
  client.send(control("stop"));
  EXPECT_EQ(client.read_type("ack")->at("kind"), "stop");
}

TEST(Service, PortInUse) {
  StreamService first = make_service(paused());
  first.start();
  ServiceConfig config = paused();
  config.port = first.port();
  StreamService second = make_service(config);
  try {
    second.start();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::PortInUse);
  }
}

TEST(Service, ObserverSeesBroadcastNotes) {
  class Collect : public NoteSink {
   public:
    void push(const NoteEvent& n) override {
      std::lock_guard lock(m);
      notes.push_back(n);
    }
    std::mutex m;
    std::vector<NoteEvent> notes;
  } sink;
  ServiceConfig config;
  config.notes_limit = 300;
  StreamService service = make_service(config);
  service.set_note_observer(&sink);
  service.start();
  for (int i = 0; i < 200 && !service.finished(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(20));
  service.stop();
  ASSERT_EQ(sink.notes.size(), 300u);

  StreamState reference = start_stream(toy_model(), vocab(), GenParams{});
  std::vector<NoteEvent> expected;
  while (expected.size() < 300) {
    auto c = reference.next_chunk();
    expected.insert(expected.end(), c.notes.begin(), c.notes.end());
  }
  expected.resize(300);
  EXPECT_EQ(sink.notes, expected);
}

TEST(Service, SlowClientIsDroppedAsLagged) {
  ServiceConfig config = paused(5000);
  config.client_queue_frames = 4;
  StreamService service = make_service(config);
  service.start();
  WsClient slow(service.port());
  ASSERT_TRUE(slow.read());
  slow.send(control("start"));
  for (int i = 0; i < 250 && !service.finished(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(20));
  // Drain whatever was delivered; the stream must end with a "lagged" close.
  int frames = 0;
  while (slow.read()) ++frames;
  EXPECT_LT(frames, 5000);
  EXPECT_EQ(slow.closed_reason(), "lagged");
  EXPECT_EQ(service.client_count(), 0u);
}

TEST(Service, ThrottleCapsRate) {
  ServiceConfig config;
  config.notes_limit = 60;
  config.throttle_tok_s = 600;  // 200 notes/s
  StreamService service = make_service(config);
  const auto t0 = std::chrono::steady_clock::now();
  service.start();
  while (!service.finished()) std::this_thread::sleep_for(std::chrono::milliseconds(5));
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  service.stop();
  EXPECT_GE(elapsed, 0.28);
  EXPECT_LE(service.summary().tok_s, 600 * 1.1);
}
