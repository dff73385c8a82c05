#include "ctxsynth/http_backend.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

namespace ctxsynth::llm {

using json = nlohmann::json;

json to_wire_request(const ChatRequest& request, const std::string& model) {
  json messages = json::array();
  for (const auto& m : request.messages) messages.push_back({{"role", to_string(m.role)}, {"content", m.content}});
  return {{"model", model},
          {"messages", std::move(messages)},
          {"temperature", request.temperature},
          {"max_tokens", request.max_tokens}};
}

ChatRequest from_wire_request(const json& body) {
  if (!body.is_object() || !body.contains("messages") || !body["messages"].is_array()) {
    throw Error("request body lacks a messages array");
  }
  ChatRequest request;
  for (const auto& m : body["messages"]) {
    request.messages.push_back({parse_role(m.value("role", std::string("user"))), m.value("content", std::string())});
  }
  request.temperature = body.value("temperature", 0.0);
  request.max_tokens = body.value("max_tokens", 1024);
  request.request_id = body.value("request_id", std::string("wire"));
  return request;
}

json to_wire_response(const ChatResponse& response, const std::string& model) {
  return {{"object", "chat.completion"},
          {"model", model},
          {"choices",
           json::array({{{"index", 0},
                         {"message", {{"role", "assistant"}, {"content", response.content}}},
                         {"finish_reason", to_string(response.finish_reason)}}})},
          {"usage",
           {{"prompt_tokens", response.usage.prompt_tokens},
            {"completion_tokens", response.usage.completion_tokens},
            {"total_tokens", response.usage.prompt_tokens + response.usage.completion_tokens}}}};
}

ChatResponse from_wire_response(const json& body) {
  const auto choices = body.find("choices");
  if (choices == body.end() || !choices->is_array() || choices->empty()) {
    throw BackendError("response has no choices", false);
  }
  const json& choice = (*choices)[0];
  ChatResponse response;
  if (auto msg = choice.find("message"); msg != choice.end() && msg->is_object()) {
    if (auto c = msg->find("content"); c != msg->end() && c->is_string()) response.content = c->get<std::string>();
  }
  std::string reason;
  if (auto fr = choice.find("finish_reason"); fr != choice.end() && fr->is_string()) reason = fr->get<std::string>();
  response.finish_reason = parse_finish_reason(reason);
  if (auto u = body.find("usage"); u != body.end() && u->is_object()) {
    response.usage.prompt_tokens = u->value("prompt_tokens", 0);
    response.usage.completion_tokens = u->value("completion_tokens", 0);
  }
  if (response.finish_reason == FinishReason::stop && response.content.empty()) {
    response.finish_reason = FinishReason::error;
  }
  return response;
}

HttpBackend::HttpBackend(HttpConfig config) : config_(std::move(config)) {}

namespace {

httplib::Client make_client(const HttpConfig& config) {
  httplib::Client client(config.endpoint);
  client.set_connection_timeout(config.timeout);
  client.set_read_timeout(config.timeout);
  client.set_write_timeout(config.timeout);
  if (!config.api_key.empty()) client.set_bearer_token_auth(config.api_key);
  return client;
}

}  // namespace

ChatResponse HttpBackend::complete(const ChatRequest& request) {
  auto client = make_client(config_);
  const std::string body = to_wire_request(request, config_.model).dump();
  auto res = client.Post(config_.path, body, "application/json");
  if (!res) {
    throw BackendError("transport error: " + httplib::to_string(res.error()), true);
  }
  if (res->status != 200) {
    std::string detail = res->body.substr(0, 200);
    throw BackendError("HTTP " + std::to_string(res->status) + ": " + detail,
                       BackendError::is_transient_status(res->status), res->status);
  }
  json parsed = json::parse(res->body, nullptr, false);
  if (parsed.is_discarded()) throw BackendError("response body is not JSON", false, res->status);
  return from_wire_response(parsed);
}

void HttpBackend::probe() {
  auto client = make_client(config_);
  auto res = client.Get("/v1/models");
  if (!res) throw BackendError("backend " + config_.endpoint + " unreachable: " + httplib::to_string(res.error()), true);
}

ChatServer::ChatServer(std::shared_ptr<Backend> backend, std::string model)
    : backend_(std::move(backend)), model_(std::move(model)), server_(std::make_unique<httplib::Server>()) {
  install_routes();
}

ChatServer::~ChatServer() { stop(); }

void ChatServer::install_routes() {
  server_->Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
    json body = json::parse(req.body, nullptr, false);
    ChatRequest request;
    try {
      request = from_wire_request(body);
      ChatResponse response = backend_->complete(request);
      res.set_content(to_wire_response(response, model_).dump(), "application/json");
    } catch (const BackendError& e) {
      res.status = e.status() ? e.status() : 500;
      res.set_content(json{{"error", {{"message", e.what()}}}}.dump(), "application/json");
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(json{{"error", {{"message", e.what()}}}}.dump(), "application/json");
    }
  });
  server_->Get("/v1/models", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(json{{"object", "list"}, {"data", json::array({{{"id", model_}, {"object", "model"}}})}}.dump(),
                    "application/json");
  });
  server_->Get("/health", [](const httplib::Request&, httplib::Response& res) { res.set_content("ok", "text/plain"); });
}

int ChatServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = server_->bind_to_any_port(host);
  } else if (!server_->bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

void ChatServer::run(const std::string& host, int port) {
  if (!server_->listen(host, port)) throw Error("cannot serve on " + host + ":" + std::to_string(port));
}

void ChatServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace ctxsynth::llm
