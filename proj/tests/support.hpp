#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxsynth/llm.hpp"
#include "ctxsynth/mock_backend.hpp"

namespace testing {

namespace fs = std::filesystem;

/// Unique scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "ctxsynth") {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = fs::temp_directory_path() /
            (tag + "-" + std::to_string(stamp) + "-" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

/// "w<i>" words, handy for word-count tests.
inline std::string numbered_words(std::size_t n, const std::string& prefix = "w") {
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out.push_back(' ');
    out += prefix + std::to_string(i);
  }
  return out;
}

inline ctxsynth::llm::GatewayOptions no_sleep(int max_attempts = 5, std::size_t max_in_flight = 8) {
  ctxsynth::llm::GatewayOptions o;
  o.retry.max_attempts = max_attempts;
  o.max_in_flight = max_in_flight;
  o.sleep = [](std::chrono::milliseconds) {};
  return o;
}

inline std::shared_ptr<ctxsynth::llm::MockBackend> mock_from(const nlohmann::json& script) {
  return std::make_shared<ctxsynth::llm::MockBackend>(ctxsynth::llm::MockScript::from_json(script));
}

inline ctxsynth::llm::ChatRequest user_request(const std::string& content, const std::string& id = "r") {
  ctxsynth::llm::ChatRequest r;
  r.messages.push_back({ctxsynth::llm::Role::user, content});
  r.request_id = id;
  return r;
}

/// Ranker rule that grades a passage "a" when it contains `marker`, else "e".
inline nlohmann::json contains_answer_grader(const std::string& marker) {
  return nlohmann::json::array({
      {{"contains", {"decide if the given question can be answered", marker}},
       {"response", "The passage contains the answer.\nAnswer: a)"}},
      {{"contains", "decide if the given question can be answered"},
       {"response", "The passage is unrelated.\nAnswer: e)"}},
  });
}

}  // namespace testing
