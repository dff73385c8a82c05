#include <doctest.h>

#include <thread>

#include "ctxsynth/http_backend.hpp"
#include "ctxsynth/llm.hpp"
#include "ctxsynth/mock_backend.hpp"
#include "support.hpp"

using namespace ctxsynth;
using namespace ctxsynth::llm;
using nlohmann::json;

TEST_CASE("request validation") {
  ChatRequest r;
  CHECK_THROWS_AS(r.validate(), Error);
  r.messages.push_back({Role::assistant, "hi"});
  CHECK_THROWS_AS(r.validate(), Error);
  r.messages.push_back({Role::user, ""});
  CHECK_THROWS_AS(r.validate(), Error);
  r.messages.back().content = "ok";
  CHECK_NOTHROW(r.validate());
}

TEST_CASE("retry delays grow exponentially and cap") {
  RetryPolicy p;
  p.base_delay = std::chrono::milliseconds(100);
  p.max_delay = std::chrono::milliseconds(1000);
  CHECK(p.delay_after(1).count() == 100);
  CHECK(p.delay_after(2).count() == 200);
  CHECK(p.delay_after(3).count() == 400);
  CHECK(p.delay_after(4).count() == 800);
  CHECK(p.delay_after(5).count() == 1000);
  CHECK(p.delay_after(60).count() == 1000);
}

TEST_CASE("status classification") {
  for (int s : {408, 429, 500, 502, 503, 599}) CHECK(BackendError::is_transient_status(s));
  for (int s : {400, 401, 403, 404, 422, 200}) CHECK_FALSE(BackendError::is_transient_status(s));
}

TEST_CASE("mock: first matching rule wins and repeats are identical") {
  auto mock = testing::mock_from({{"rules",
                                   {{{"contains", "capital of France"}, {"response", "Paris."}},
                                    {{"contains", "capital"}, {"response", "Somewhere."}}}},
                                  {"default", "dunno"}});
  Gateway gw(mock, testing::no_sleep());
  CHECK(gw.chat(testing::user_request("What is the capital of France?")).content == "Paris.");
  CHECK(gw.chat(testing::user_request("What is the capital of France?")).content == "Paris.");
  CHECK(gw.chat(testing::user_request("Name a capital")).content == "Somewhere.");
  CHECK(gw.chat(testing::user_request("Hello")).content == "dunno");
  CHECK(mock->calls() == 4);
}

TEST_CASE("mock: contains list and regex captures") {
  auto mock = testing::mock_from(
      {{"rules",
        {{{"contains", {"alpha", "beta"}}, {"response", "both"}},
         {{"regex", "Long answer: ([^\\n]*)\\nShort answer: $"}, {"response", "Short answer: [$1]"}}}}});
  Gateway gw(mock, testing::no_sleep());
  CHECK(gw.chat(testing::user_request("alpha and beta")).content == "both");
  CHECK(gw.chat(testing::user_request("alpha only")).content == "Answer: No answer was found.");
  CHECK(gw.chat(testing::user_request("Long answer: old\nLong answer: it is 42\nShort answer: ")).content ==
        "Short answer: [it is 42]");
}

TEST_CASE("mock: script errors") {
  CHECK_THROWS_AS(MockScript::from_json(json::array()), Error);
  CHECK_THROWS_AS(MockScript::from_json({{"rules", {{{"response", "x"}}}}}), Error);
  CHECK_THROWS_AS(MockScript::from_json({{"rules", {{{"regex", "("}, {"response", "x"}}}}}), Error);
  CHECK_THROWS_AS(MockScript::from_json({{"delay_ms", {5, 1}}}), Error);
}

TEST_CASE("two transient 429s then success: 3 attempts in the audit log") {
  testing::TempDir dir;
  auto mock = testing::mock_from(
      {{"rules", {{{"contains", "flaky"}, {"response", "ok"}, {"fail", {{"status", 429}, {"times", 2}}}}}}});
  auto opts = testing::no_sleep();
  std::vector<std::chrono::milliseconds> slept;
  opts.sleep = [&](std::chrono::milliseconds d) { slept.push_back(d); };
  opts.audit = std::make_shared<AuditLog>(dir / "audit.jsonl");
  Gateway gw(mock, opts);
  auto req = testing::user_request("flaky call", "req-1");
  CHECK(gw.chat(req).content == "ok");
  CHECK(mock->calls() == 3);
  CHECK(slept == std::vector<std::chrono::milliseconds>{opts.retry.delay_after(1), opts.retry.delay_after(2)});
  opts.audit.reset();

  std::vector<json> lines;
  std::istringstream in(testing::read_text(dir / "audit.jsonl"));
  for (std::string line; std::getline(in, line);) lines.push_back(json::parse(line));
  REQUIRE(lines.size() == 3);
  for (const auto& l : lines) CHECK(l["request_id"] == "req-1");
  CHECK(lines[0]["outcome"] == "transient_error");
  CHECK(lines[0]["status"] == 429);
  CHECK(lines[2]["outcome"] == "ok");
  CHECK(lines[2]["attempts"] == 3);
  CHECK(lines[2]["response"]["content"] == "ok");
}

TEST_CASE("non-retryable 4xx fails immediately") {
  auto mock = testing::mock_from(
      {{"rules", {{{"contains", "bad"}, {"response", "x"}, {"fail", {{"status", 400}, {"times", -1}}}}}}});
  Gateway gw(mock, testing::no_sleep());
  try {
    gw.chat(testing::user_request("bad request", "b"));
    FAIL("expected ChatError");
  } catch (const ChatError& e) {
    CHECK(e.attempts() == 1);
    CHECK(e.request_id() == "b");
  }
  CHECK(mock->calls() == 1);
}

TEST_CASE("exhausted attempts carry the last cause") {
  auto mock = testing::mock_from(
      {{"rules", {{{"contains", "down"}, {"response", "x"}, {"fail", {{"status", 503}, {"times", -1}}}}}}});
  Gateway gw(mock, testing::no_sleep(4));
  try {
    gw.chat(testing::user_request("service down"));
    FAIL("expected ChatError");
  } catch (const ChatError& e) {
    CHECK(e.attempts() == 4);
    CHECK(std::string(e.what()).find("503") != std::string::npos);
  }
  CHECK(mock->calls() == 4);
}

TEST_CASE("batch: 10 requests, max_in_flight 3") {
  auto mock = testing::mock_from({{"rules", {{{"regex", "item (\\d+)"}, {"response", "reply $1"}}}},
                                  {"delay_ms", {1, 15}},
                                  {"seed", 11}});
  Gateway gw(mock, testing::no_sleep());
  std::vector<ChatRequest> reqs;
  for (int i = 0; i < 10; ++i) reqs.push_back(testing::user_request("item " + std::to_string(i)));
  auto out = gw.chat_batch(reqs, 3);
  REQUIRE(out.size() == 10);
  for (int i = 0; i < 10; ++i) {
    REQUIRE(out[i].ok());
    CHECK(out[i].response->content == "reply " + std::to_string(i));
    CHECK(out[i].attempts == 1);
  }
  CHECK(mock->peak_in_flight() <= 3);
  CHECK(mock->peak_in_flight() >= 1);
}

TEST_CASE("batch: positional alignment under randomized completion order") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto mock = testing::mock_from(
        {{"rules", {{{"regex", "q=(\\w+)"}, {"response", "a=$1"}}}}, {"delay_ms", {0, 8}}, {"seed", seed}});
    Gateway gw(mock, testing::no_sleep());
    std::vector<ChatRequest> reqs;
    for (int i = 0; i < 40; ++i) reqs.push_back(testing::user_request("q=k" + std::to_string(i * 7 + seed)));
    auto out = gw.chat_batch(reqs, 6);
    for (int i = 0; i < 40; ++i) {
      REQUIRE(out[i].ok());
      CHECK(out[i].response->content == "a=k" + std::to_string(i * 7 + seed));
    }
    CHECK(mock->peak_in_flight() <= 6);
  }
}

TEST_CASE("batch: one permanent failure stays in its slot") {
  auto mock = testing::mock_from({{"rules",
                                   {{{"contains", "request 5"}, {"response", "x"}, {"fail", {{"status", 500}}}},
                                    {{"regex", "request (\\d+)"}, {"response", "done $1"}}}}});
  Gateway gw(mock, testing::no_sleep(3));
  std::vector<ChatRequest> reqs;
  for (int i = 0; i < 10; ++i) reqs.push_back(testing::user_request("request " + std::to_string(i)));
  auto out = gw.chat_batch(reqs, 4);
  for (int i = 0; i < 10; ++i) {
    if (i == 5) {
      CHECK_FALSE(out[i].ok());
      CHECK(out[i].attempts == 3);
      CHECK_FALSE(out[i].error.empty());
    } else {
      REQUIRE(out[i].ok());
      CHECK(out[i].response->content == "done " + std::to_string(i));
    }
  }
}

TEST_CASE("batch: empty input and invalid bound") {
  auto mock = testing::mock_from(json::object());
  Gateway gw(mock, testing::no_sleep());
  CHECK(gw.chat_batch({}, 3).empty());
  std::vector<ChatRequest> one = {testing::user_request("x")};
  CHECK_THROWS_AS(gw.chat_batch(one, 0), Error);
}

TEST_CASE("a shared slot pool bounds concurrent callers together") {
  auto mock = testing::mock_from({{"delay_ms", {3, 6}}});
  auto opts = testing::no_sleep();
  opts.shared_slots = std::make_shared<SlotPool>(2);
  Gateway a(mock, opts), b(mock, opts);
  std::vector<ChatRequest> reqs;
  for (int i = 0; i < 12; ++i) reqs.push_back(testing::user_request("x" + std::to_string(i)));
  std::jthread t1([&] { a.chat_batch(reqs, 8); });
  std::jthread t2([&] { b.chat_batch(reqs, 8); });
  t1.join();
  t2.join();
  CHECK(mock->peak_in_flight() <= 2);
  CHECK(mock->calls() == 24);
}

TEST_CASE("temperature 0 goes out on the wire") {
  auto req = testing::user_request("hi");
  auto wire = to_wire_request(req, "m");
  CHECK(wire["temperature"] == 0.0);
  CHECK(wire["model"] == "m");
  CHECK(wire["max_tokens"] == 1024);
  CHECK(wire["messages"][0]["role"] == "user");
  CHECK(wire["messages"][0]["content"] == "hi");
  auto back = from_wire_request(wire);
  CHECK(back.messages == req.messages);
}

TEST_CASE("wire response parsing") {
  ChatResponse r;
  r.content = "hello";
  r.finish_reason = FinishReason::length;
  r.usage = {3, 1};
  auto back = from_wire_response(to_wire_response(r, "m"));
  CHECK(back.content == "hello");
  CHECK(back.finish_reason == FinishReason::length);
  CHECK(back.usage.prompt_tokens == 3);
  CHECK_THROWS(from_wire_response(json{{"choices", json::array()}}));
}

TEST_CASE("HTTP round trip through the chat server") {
  auto mock = testing::mock_from(
      {{"rules",
        {{{"contains", "ping"}, {"response", "pong"}},
         {{"contains", "teapot"}, {"response", "x"}, {"fail", {{"status", 418}, {"times", -1}}}},
         {{"contains", "busy"}, {"response", "finally"}, {"fail", {{"status", 503}, {"times", 1}}}}}}});
  ChatServer server(mock, "mock-model");
  const int port = server.start("127.0.0.1", 0);
  REQUIRE(port > 0);

  HttpConfig cfg;
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port);
  cfg.timeout = std::chrono::seconds(10);
  auto http = std::make_shared<HttpBackend>(cfg);
  CHECK_NOTHROW(http->probe());
  Gateway gw(http, testing::no_sleep());
  auto r = gw.chat(testing::user_request("ping"));
  CHECK(r.content == "pong");
  CHECK(r.finish_reason == FinishReason::stop);

  try {
    http->complete(testing::user_request("teapot"));
    FAIL("expected BackendError");
  } catch (const BackendError& e) {
    CHECK(e.status() == 418);
    CHECK_FALSE(e.transient());
  }
  CHECK(gw.chat(testing::user_request("busy")).content == "finally");
  server.stop();

  HttpConfig dead = cfg;
  dead.endpoint = "http://127.0.0.1:1";
  dead.timeout = std::chrono::seconds(2);
  HttpBackend unreachable(dead);
  try {
    unreachable.probe();
    FAIL("expected BackendError");
  } catch (const BackendError& e) {
    CHECK(e.transient());
  }
}
