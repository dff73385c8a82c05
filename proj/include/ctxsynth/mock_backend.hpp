#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxsynth/llm.hpp"

namespace ctxsynth::llm {

/// One scripted rule. All `contains` substrings and the optional regex must match the
/// joined request content. With a regex, `$1`-style references in the response are expanded.
struct MockRule {
  std::vector<std::string> contains;
  std::optional<std::string> regex_source;
  std::optional<std::regex> regex;
  std::string response;
  int fail_status = 0;  // 0: never fails
  int fail_times = -1;  // failures per distinct request before succeeding; -1: always

  /// Rendered response when the rule matches `content`.
  std::optional<std::string> apply(const std::string& content) const;
};

/// Ordered rules, first match wins; `fallback` answers everything else.
struct MockScript {
  std::vector<MockRule> rules;
  std::string fallback = "Answer: No answer was found.";
  int min_delay_ms = 0;
  int max_delay_ms = 0;
  std::uint64_t seed = 0;

  static MockScript from_json(const nlohmann::json& j);
  static MockScript load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

/// Deterministic in-process backend driven by a MockScript. Internally synchronized.
class MockBackend final : public Backend {
 public:
  explicit MockBackend(MockScript script);

  ChatResponse complete(const ChatRequest& request) override;
  std::string describe() const override { return "mock"; }

  std::size_t calls() const noexcept { return calls_.load(); }
  std::size_t peak_in_flight() const noexcept { return peak_.load(); }
  /// Request ids in arrival order (including failed attempts).
  std::vector<std::string> request_log() const;
  void reset_counters();

 private:
  MockScript script_;
  std::atomic<std::size_t> calls_{0};
  std::atomic<std::size_t> in_flight_{0};
  std::atomic<std::size_t> peak_{0};
  mutable std::mutex mu_;
  std::map<std::pair<std::size_t, std::uint64_t>, int> failures_;
  std::vector<std::string> log_;
};

}  // namespace ctxsynth::llm
