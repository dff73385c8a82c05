#pragma once

#include <chrono>
#include <memory>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "ctxsynth/llm.hpp"

namespace httplib {
class Server;
}

namespace ctxsynth::llm {

// Wire format: the common chat-completions JSON shape.
//   request:  {"model", "messages": [{"role", "content"}], "temperature", "max_tokens"}
//   response: {"choices": [{"message": {"role", "content"}, "finish_reason"}],
//              "usage": {"prompt_tokens", "completion_tokens"}}
nlohmann::json to_wire_request(const ChatRequest& request, const std::string& model);
ChatRequest from_wire_request(const nlohmann::json& body);
nlohmann::json to_wire_response(const ChatResponse& response, const std::string& model);
ChatResponse from_wire_response(const nlohmann::json& body);

struct HttpConfig {
  std::string endpoint = "http://127.0.0.1:8000";  // scheme://host[:port]
  std::string path = "/v1/chat/completions";
  std::string model = "default";
  std::string api_key;
  std::chrono::seconds timeout{120};
};

class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(HttpConfig config);

  ChatResponse complete(const ChatRequest& request) override;
  /// Any HTTP answer from the server counts as reachable.
  void probe() override;
  std::string describe() const override { return "http:" + config_.endpoint; }

 private:
  HttpConfig config_;
};

/// Serves a Backend over the chat-completions wire format. Backend errors map to their
/// HTTP status (500 when none).
class ChatServer {
 public:
  explicit ChatServer(std::shared_ptr<Backend> backend, std::string model = "mock");
  ~ChatServer();
  ChatServer(const ChatServer&) = delete;
  ChatServer& operator=(const ChatServer&) = delete;

  /// Binds and serves in a background thread. Port 0 picks a free port. Returns the bound port.
  int start(const std::string& host, int port);
  /// Binds and serves on the calling thread until stop().
  void run(const std::string& host, int port);
  void stop();

 private:
  void install_routes();

  std::shared_ptr<Backend> backend_;
  std::string model_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

}  // namespace ctxsynth::llm
