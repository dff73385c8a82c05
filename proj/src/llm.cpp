#include "ctxsynth/llm.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include <spdlog/spdlog.h>

namespace ctxsynth::llm {

using json = nlohmann::json;

std::string_view to_string(Role role) noexcept {
  switch (role) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
  }
  return "user";
}

Role parse_role(std::string_view name) {
  if (name == "system") return Role::system;
  if (name == "user") return Role::user;
  if (name == "assistant") return Role::assistant;
  throw Error("unknown message role '" + std::string(name) + "'");
}

std::string_view to_string(FinishReason reason) noexcept {
  switch (reason) {
    case FinishReason::stop: return "stop";
    case FinishReason::length: return "length";
    case FinishReason::error: return "error";
  }
  return "error";
}

FinishReason parse_finish_reason(std::string_view name) noexcept {
  if (name == "stop" || name == "eos" || name.empty()) return FinishReason::stop;
  if (name == "length") return FinishReason::length;
  return FinishReason::error;
}

void ChatRequest::validate() const {
  if (messages.empty() || messages.back().role != Role::user) {
    throw Error("chat request " + request_id + ": last message must have the user role");
  }
  for (const auto& m : messages) {
    if (m.content.empty()) throw Error("chat request " + request_id + ": empty message content");
  }
  if (temperature < 0.0) throw Error("chat request " + request_id + ": negative temperature");
}

std::string ChatRequest::joined_content() const {
  std::string out;
  for (std::size_t i = 0; i < messages.size(); ++i) {
    if (i) out.push_back('\n');
    out += messages[i].content;
  }
  return out;
}

bool BackendError::is_transient_status(int status) noexcept {
  return status == 408 || status == 429 || status >= 500;
}

std::chrono::milliseconds RetryPolicy::delay_after(int attempt) const {
  const double scaled = static_cast<double>(base_delay.count()) * std::pow(multiplier, std::max(0, attempt - 1));
  const double capped = std::min(scaled, static_cast<double>(max_delay.count()));
  return std::chrono::milliseconds(static_cast<long long>(capped));
}

AuditLog::AuditLog(const std::filesystem::path& path) : out_(path, std::ios::app) {
  if (!out_) throw Error("cannot open audit log " + path.string());
}

void AuditLog::append(const json& entry) {
  const std::string line = entry.dump();
  std::lock_guard lock(mu_);
  out_ << line << '\n';
  out_.flush();
}

json to_json(const ChatRequest& request) {
  json messages = json::array();
  for (const auto& m : request.messages) messages.push_back({{"role", to_string(m.role)}, {"content", m.content}});
  return {{"request_id", request.request_id},
          {"messages", std::move(messages)},
          {"temperature", request.temperature},
          {"max_tokens", request.max_tokens}};
}

json to_json(const ChatResponse& response) {
  return {{"content", response.content},
          {"finish_reason", to_string(response.finish_reason)},
          {"usage", {{"prompt_tokens", response.usage.prompt_tokens},
                     {"completion_tokens", response.usage.completion_tokens}}},
          {"latency_ms", response.latency.count()}};
}

Gateway::Gateway(std::shared_ptr<Backend> backend, GatewayOptions options)
    : backend_(std::move(backend)),
      options_(std::move(options)),
      slots_(options_.shared_slots ? options_.shared_slots
                                   : std::make_shared<SlotPool>(
                                         static_cast<std::ptrdiff_t>(std::max<std::size_t>(1, options_.max_in_flight)))) {
  if (!backend_) throw Error("gateway requires a backend");
  if (options_.retry.max_attempts < 1) throw Error("retry policy needs at least one attempt");
  if (!options_.sleep) options_.sleep = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

ChatResponse Gateway::attempt(const ChatRequest& request) {
  slots_->acquire();
  struct Release {
    SlotPool& s;
    ~Release() { s.release(); }
  } release{*slots_};
  ++sent_;
  const auto start = std::chrono::steady_clock::now();
  ChatResponse response = backend_->complete(request);
  if (response.latency.count() == 0) {
    response.latency =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
  }
  return response;
}

ChatResponse Gateway::chat(const ChatRequest& request) {
  int attempts = 0;
  return run(request, attempts);
}

ChatResponse Gateway::run(const ChatRequest& request, int& attempts) {
  request.validate();
  std::string last_cause;
  for (int n = 1; n <= options_.retry.max_attempts; ++n) {
    attempts = n;
    try {
      ChatResponse response = attempt(request);
      if (options_.audit) {
        options_.audit->append({{"request_id", request.request_id},
                                {"attempt", n},
                                {"attempts", n},
                                {"outcome", "ok"},
                                {"request", to_json(request)},
                                {"response", to_json(response)}});
      }
      return response;
    } catch (const BackendError& e) {
      last_cause = e.what();
      const bool retry = e.transient() && n < options_.retry.max_attempts;
      if (options_.audit) {
        json entry = {{"request_id", request.request_id},
                      {"attempt", n},
                      {"outcome", e.transient() ? "transient_error" : "permanent_error"},
                      {"status", e.status()},
                      {"error", e.what()}};
        if (!retry) {
          entry["attempts"] = n;
          entry["request"] = to_json(request);
        }
        options_.audit->append(entry);
      }
      if (!e.transient()) throw ChatError(request.request_id, n, last_cause);
      if (retry) {
        spdlog::debug("request {} attempt {} failed ({}); retrying", request.request_id, n, e.what());
        options_.sleep(options_.retry.delay_after(n));
      }
    }
  }
  throw ChatError(request.request_id, options_.retry.max_attempts, last_cause);
}

std::vector<ChatOutcome> Gateway::chat_batch(std::span<const ChatRequest> requests, std::size_t max_in_flight) {
  if (max_in_flight == 0) throw Error("chat_batch requires max_in_flight >= 1");
  std::vector<ChatOutcome> out(requests.size());
  if (requests.empty()) return out;

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < requests.size(); i = next++) {
      try {
        out[i].response = run(requests[i], out[i].attempts);
      } catch (const ChatError& e) {
        out[i].error = e.what();
        out[i].attempts = e.attempts();
      } catch (const std::exception& e) {
        out[i].error = e.what();
      }
    }
  };
  const std::size_t nthreads = std::min(max_in_flight, requests.size());
  if (nthreads == 1) {
    worker();
    return out;
  }
  std::vector<std::jthread> threads;
  threads.reserve(nthreads);
  for (std::size_t t = 0; t < nthreads; ++t) threads.emplace_back(worker);
  threads.clear();
  return out;
}

}  // namespace ctxsynth::llm
