#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxsynth/text.hpp"

namespace ctxsynth::llm {

enum class Role { system, user, assistant };

std::string_view to_string(Role role) noexcept;
Role parse_role(std::string_view name);

struct Message {
  Role role = Role::user;
  std::string content;

  friend bool operator==(const Message&, const Message&) = default;
};

struct ChatRequest {
  std::vector<Message> messages;
  double temperature = 0.0;
  int max_tokens = 1024;
  std::string request_id;

  /// Throws Error unless the last message is from the user and no content is empty.
  void validate() const;
  /// Message contents joined by newlines; what mock rules match against.
  std::string joined_content() const;
};

enum class FinishReason { stop, length, error };

std::string_view to_string(FinishReason reason) noexcept;
FinishReason parse_finish_reason(std::string_view name) noexcept;

struct Usage {
  int prompt_tokens = 0;
  int completion_tokens = 0;
};

struct ChatResponse {
  std::string content;
  FinishReason finish_reason = FinishReason::stop;
  Usage usage;
  std::chrono::milliseconds latency{0};
};

/// Raised by a backend for one failed attempt.
class BackendError : public Error {
 public:
  BackendError(std::string message, bool transient, int status = 0)
      : Error(std::move(message)), transient_(transient), status_(status) {}
  bool transient() const noexcept { return transient_; }
  int status() const noexcept { return status_; }

  /// 408, 429 and 5xx are retryable; other statuses are not.
  static bool is_transient_status(int status) noexcept;

 private:
  bool transient_;
  int status_;
};

/// Raised by the gateway once a request has definitively failed.
class ChatError : public Error {
 public:
  ChatError(std::string request_id, int attempts, const std::string& cause)
      : Error("request " + request_id + " failed after " + std::to_string(attempts) + " attempt(s): " + cause),
        request_id_(std::move(request_id)),
        attempts_(attempts) {}
  const std::string& request_id() const noexcept { return request_id_; }
  int attempts() const noexcept { return attempts_; }

 private:
  std::string request_id_;
  int attempts_;
};

class Backend {
 public:
  virtual ~Backend() = default;
  /// One attempt. Throws BackendError on failure.
  virtual ChatResponse complete(const ChatRequest& request) = 0;
  /// Throws BackendError when the backend cannot be reached.
  virtual void probe() {}
  virtual std::string describe() const = 0;
};

struct RetryPolicy {
  int max_attempts = 5;
  std::chrono::milliseconds base_delay{500};
  std::chrono::milliseconds max_delay{30000};
  double multiplier = 2.0;

  /// Delay before attempt `attempt + 1`, given `attempt` >= 1 failures so far.
  std::chrono::milliseconds delay_after(int attempt) const;
};

/// Append-only JSON-lines log shared by concurrent callers.
class AuditLog {
 public:
  explicit AuditLog(const std::filesystem::path& path);
  void append(const nlohmann::json& entry);

 private:
  std::mutex mu_;
  std::ofstream out_;
};

/// Result slot of a batch call: either a response or the final error.
struct ChatOutcome {
  std::optional<ChatResponse> response;
  std::string error;
  int attempts = 0;

  bool ok() const noexcept { return response.has_value(); }
};

using SlotPool = std::counting_semaphore<1 << 20>;

struct GatewayOptions {
  RetryPolicy retry;
  std::size_t max_in_flight = 8;  // bound across all callers of this gateway
  std::shared_ptr<SlotPool> shared_slots;  // when set, overrides max_in_flight and is shared
  std::shared_ptr<AuditLog> audit;
  std::function<void(std::chrono::milliseconds)> sleep;  // defaults to std::this_thread::sleep_for
};

/// Retrying, concurrency-bounded front end over a Backend. Safe for concurrent callers.
class Gateway {
 public:
  Gateway(std::shared_ptr<Backend> backend, GatewayOptions options = {});

  ChatResponse chat(const ChatRequest& request);

  /// Output i corresponds to requests[i]; at most `max_in_flight` requests run at once.
  std::vector<ChatOutcome> chat_batch(std::span<const ChatRequest> requests, std::size_t max_in_flight);

  Backend& backend() noexcept { return *backend_; }
  std::size_t requests_sent() const noexcept { return sent_.load(); }

 private:
  ChatResponse attempt(const ChatRequest& request);
  ChatResponse run(const ChatRequest& request, int& attempts);

  std::shared_ptr<Backend> backend_;
  GatewayOptions options_;
  std::shared_ptr<SlotPool> slots_;
  std::atomic<std::size_t> sent_{0};
};

nlohmann::json to_json(const ChatRequest& request);
nlohmann::json to_json(const ChatResponse& response);

}  // namespace ctxsynth::llm
