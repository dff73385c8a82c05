#include "ctxsynth/mock_backend.hpp"

#include <fstream>
#include <thread>

#include "ctxsynth/rng.hpp"

namespace ctxsynth::llm {

using json = nlohmann::json;

std::optional<std::string> MockRule::apply(const std::string& content) const {
  for (const auto& needle : contains) {
    if (content.find(needle) == std::string::npos) return std::nullopt;
  }
  if (regex) {
    std::smatch m;
    if (!std::regex_search(content, m, *regex)) return std::nullopt;
    return m.format(response);
  }
  return response;
}

MockScript MockScript::from_json(const json& j) {
  MockScript script;
  if (!j.is_object()) throw Error("mock script must be a JSON object");
  script.fallback = j.value("default", script.fallback);
  script.seed = j.value("seed", std::uint64_t{0});
  if (auto d = j.find("delay_ms"); d != j.end()) {
    if (d->is_array() && d->size() == 2) {
      script.min_delay_ms = (*d)[0].get<int>();
      script.max_delay_ms = (*d)[1].get<int>();
    } else {
      script.min_delay_ms = script.max_delay_ms = d->get<int>();
    }
    if (script.min_delay_ms < 0 || script.max_delay_ms < script.min_delay_ms) throw Error("invalid mock delay_ms");
  }
  for (const auto& r : j.value("rules", json::array())) {
    MockRule rule;
    if (auto c = r.find("contains"); c != r.end()) {
      if (c->is_string()) {
        rule.contains.push_back(c->get<std::string>());
      } else {
        rule.contains = c->get<std::vector<std::string>>();
      }
    }
    if (auto re = r.find("regex"); re != r.end()) {
      rule.regex_source = re->get<std::string>();
      try {
        rule.regex.emplace(*rule.regex_source, std::regex::ECMAScript);
      } catch (const std::regex_error& e) {
        throw Error("mock rule regex '" + *rule.regex_source + "': " + e.what());
      }
    }
    if (rule.contains.empty() && !rule.regex) throw Error("mock rule needs 'contains' or 'regex'");
    rule.response = r.value("response", std::string{});
    if (auto f = r.find("fail"); f != r.end()) {
      rule.fail_status = f->value("status", 500);
      rule.fail_times = f->value("times", -1);
    }
    script.rules.push_back(std::move(rule));
  }
  return script;
}

MockScript MockScript::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open mock script " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw Error("mock script " + path.string() + " is not valid JSON");
  return from_json(j);
}

json MockScript::to_json() const {
  json rules_json = json::array();
  for (const auto& r : rules) {
    json rj = {{"response", r.response}};
    if (!r.contains.empty()) rj["contains"] = r.contains;
    if (r.regex_source) rj["regex"] = *r.regex_source;
    if (r.fail_status) rj["fail"] = {{"status", r.fail_status}, {"times", r.fail_times}};
    rules_json.push_back(std::move(rj));
  }
  return {{"rules", std::move(rules_json)},
          {"default", fallback},
          {"delay_ms", {min_delay_ms, max_delay_ms}},
          {"seed", seed}};
}

MockBackend::MockBackend(MockScript script) : script_(std::move(script)) {}

ChatResponse MockBackend::complete(const ChatRequest& request) {
  ++calls_;
  const std::size_t now = ++in_flight_;
  struct Leave {
    std::atomic<std::size_t>& n;
    ~Leave() { --n; }
  } leave{in_flight_};
  for (std::size_t peak = peak_.load(); now > peak && !peak_.compare_exchange_weak(peak, now);) {
  }
  {
    std::lock_guard lock(mu_);
    log_.push_back(request.request_id);
  }
  request.validate();

  const std::string content = request.joined_content();
  const std::uint64_t content_hash = fnv1a64(content);
  if (script_.max_delay_ms > 0) {
    SplitMix64 g(derive_seed({script_.seed, content_hash}));
    const auto span = static_cast<std::uint64_t>(script_.max_delay_ms - script_.min_delay_ms + 1);
    std::this_thread::sleep_for(std::chrono::milliseconds(script_.min_delay_ms + static_cast<int>(g.below(span))));
  }

  std::string reply = script_.fallback;
  for (std::size_t i = 0; i < script_.rules.size(); ++i) {
    const MockRule& rule = script_.rules[i];
    auto rendered = rule.apply(content);
    if (!rendered) continue;
    if (rule.fail_status != 0) {
      std::lock_guard lock(mu_);
      int& failed = failures_[{i, content_hash}];
      if (rule.fail_times < 0 || failed < rule.fail_times) {
        ++failed;
        const int status = rule.fail_status;
        throw BackendError("mock failure (HTTP " + std::to_string(status) + ")",
                           BackendError::is_transient_status(status), status);
      }
    }
    reply = std::move(*rendered);
    break;
  }

  ChatResponse response;
  response.content = std::move(reply);
  response.finish_reason = response.content.empty() ? FinishReason::error : FinishReason::stop;
  response.usage.prompt_tokens = static_cast<int>(text::count_words(content));
  response.usage.completion_tokens = static_cast<int>(text::count_words(response.content));
  return response;
}

std::vector<std::string> MockBackend::request_log() const {
  std::lock_guard lock(mu_);
  return log_;
}

void MockBackend::reset_counters() {
  std::lock_guard lock(mu_);
  calls_ = 0;
  peak_ = 0;
  log_.clear();
}

}  // namespace ctxsynth::llm
