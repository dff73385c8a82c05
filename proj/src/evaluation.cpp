#include "ctxsynth/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <istream>
#include <set>
#include <unordered_map>

#include <spdlog/spdlog.h>

#include "ctxsynth/synthesis.hpp"

namespace ctxsynth::evaluation {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

std::vector<std::string> normalized_tokens(std::string_view s) {
  std::string stripped;
  stripped.reserve(s.size());
  for (char c : s) {
    if (!text::is_ascii_punct(c)) stripped.push_back(text::to_lower(c));
  }
  std::vector<std::string> tokens;
  for (auto w : text::split_words(stripped)) {
    if (w == "a" || w == "an" || w == "the") continue;
    tokens.emplace_back(w);
  }
  return tokens;
}

}  // namespace

std::string normalize_answer(std::string_view s) {
  const auto tokens = normalized_tokens(s);
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

int exact_match(std::string_view prediction, std::span<const std::string> golds) {
  if (golds.empty()) throw Error("exact_match needs at least one gold answer");
  const std::string p = normalize_answer(prediction);
  for (const auto& g : golds) {
    if (normalize_answer(g) == p) return 1;
  }
  return 0;
}

double token_f1(std::string_view prediction, std::string_view gold) {
  const auto p = normalized_tokens(prediction);
  const auto g = normalized_tokens(gold);
  if (p.empty() && g.empty()) return 1.0;
  if (p.empty() || g.empty()) return 0.0;
  std::unordered_map<std::string_view, int> gold_counts;
  for (const auto& t : g) ++gold_counts[t];
  std::size_t common = 0;
  for (const auto& t : p) {
    auto it = gold_counts.find(t);
    if (it != gold_counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(p.size());
  const double recall = static_cast<double>(common) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

double token_f1(std::string_view prediction, std::span<const std::string> golds) {
  if (golds.empty()) throw Error("token_f1 needs at least one gold answer");
  double best = 0.0;
  for (const auto& g : golds) best = std::max(best, token_f1(prediction, std::string_view(g)));
  return best;
}

std::vector<Prediction> load_predictions(std::istream& in) {
  std::vector<Prediction> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (!j.is_object() || !j.contains("task_id") || !j.contains("raw_output") || !j["raw_output"].is_string()) {
      throw EvalError("predictions line " + std::to_string(lineno) + ": expected {task_id, raw_output}");
    }
    Prediction p;
    p.task_id = j["task_id"].is_string() ? j["task_id"].get<std::string>() : j["task_id"].dump();
    p.raw_output = j["raw_output"].get<std::string>();
    out.push_back(std::move(p));
  }
  return out;
}

std::string offline_short_answer(std::string_view raw_output) {
  if (auto fa = synthesis::extract_final_answer(raw_output); fa.answer) return *fa.answer;
  return std::string(text::trim(raw_output));
}

AnswerExtractor::AnswerExtractor(llm::Gateway* gateway, std::size_t max_in_flight,
                                 const templates::PromptTemplate& tmpl)
    : gateway_(gateway), max_in_flight_(max_in_flight), tmpl_(tmpl) {}

llm::ChatRequest AnswerExtractor::build_prompt(std::string_view question, std::string_view raw_output,
                                               const templates::PromptTemplate& tmpl) {
  llm::ChatRequest request;
  request.messages.push_back(
      {llm::Role::user, tmpl.render({{"question", std::string(question)}, {"answer", std::string(raw_output)}})});
  request.max_tokens = 64;
  return request;
}

std::string AnswerExtractor::clean_reply(std::string_view reply) {
  for (auto line : text::split_lines(reply)) {
    line = text::trim(line);
    if (line.empty()) continue;
    for (std::string_view label : {"short answer:", "answer:"}) {
      if (text::istarts_with(line, label)) {
        line = text::trim(line.substr(label.size()));
        break;
      }
    }
    if (!line.empty()) return std::string(line);
  }
  return {};
}

std::string AnswerExtractor::extract(std::string_view question, std::string_view raw_output) {
  std::vector<Prediction> one{{"single", std::string(raw_output), std::nullopt}};
  extract_all(one, {{"single", std::string(question)}});
  return *one[0].extracted_answer;
}

void AnswerExtractor::extract_all(std::vector<Prediction>& predictions,
                                  const std::map<std::string, std::string>& questions) {
  if (!gateway_) {
    for (auto& p : predictions) p.extracted_answer = offline_short_answer(p.raw_output);
    return;
  }
  std::vector<llm::ChatRequest> requests;
  requests.reserve(predictions.size());
  for (const auto& p : predictions) {
    auto q = questions.find(p.task_id);
    auto req = build_prompt(q == questions.end() ? std::string_view{} : std::string_view(q->second),
                            text::trim(p.raw_output).empty() ? std::string_view("(empty)") : p.raw_output, tmpl_);
    req.request_id = "extract/" + p.task_id;
    requests.push_back(std::move(req));
  }
  auto outcomes = gateway_->chat_batch(requests, max_in_flight_);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    std::string answer;
    if (outcomes[i].ok()) answer = clean_reply(outcomes[i].response->content);
    if (!outcomes[i].ok() || answer.empty()) {
      if (!outcomes[i].ok()) {
        spdlog::warn("short-answer extraction for {} failed, using offline rule: {}", predictions[i].task_id,
                     outcomes[i].error);
      }
      answer = offline_short_answer(predictions[i].raw_output);
    }
    predictions[i].extracted_answer = std::move(answer);
  }
}

std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

ordered_json EvalReport::to_json() const {
  ordered_json j;
  ordered_json cfg;
  cfg["retriever"] = config.retriever;
  cfg["context_size"] = config.context_size ? ordered_json(*config.context_size) : ordered_json(nullptr);
  j["config"] = std::move(cfg);
  j["count"] = count;
  j["mean_em"] = mean_em;
  j["mean_f1"] = mean_f1;
  j["short_context_tasks"] = short_context;
  ordered_json rows_json = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json rj;
    rj["task_id"] = r.task_id;
    rj["em"] = r.em;
    rj["f1"] = r.f1;
    rows_json.push_back(std::move(rj));
  }
  j["rows"] = std::move(rows_json);
  return j;
}

std::string EvalReport::to_csv() const {
  std::string out = "task_id,em,f1\n";
  for (const auto& r : rows) {
    std::string id = r.task_id;
    if (id.find_first_of(",\"\n") != std::string::npos) {
      std::string quoted = "\"";
      for (char c : id) {
        if (c == '"') quoted.push_back('"');
        quoted.push_back(c);
      }
      id = quoted + "\"";
    }
    out += id + "," + std::to_string(r.em) + "," + format_metric(r.f1) + "\n";
  }
  return out;
}

EvalReport evaluate(std::span<const Prediction> predictions,
                    const std::map<std::string, std::vector<std::string>>& golds, const EvalConfig& config) {
  if (predictions.empty()) throw EvalError("no predictions to score");
  std::vector<std::string> missing;
  std::set<std::string_view> seen;
  for (const auto& p : predictions) {
    if (!seen.insert(p.task_id).second) throw EvalError("duplicate prediction for task " + p.task_id);
    auto g = golds.find(p.task_id);
    if (g == golds.end() || g->second.empty()) missing.push_back(p.task_id);
  }
  if (!missing.empty()) {
    std::string msg = "no gold answers for task(s):";
    for (const auto& id : missing) msg += " " + id;
    throw EvalError(msg);
  }

  EvalReport report;
  report.config = config;
  report.rows.reserve(predictions.size());
  for (const auto& p : predictions) {
    const auto& g = golds.at(p.task_id);
    const std::string& answer = p.extracted_answer ? *p.extracted_answer : p.raw_output;
    report.rows.push_back({p.task_id, exact_match(answer, g), token_f1(answer, g)});
  }
  std::sort(report.rows.begin(), report.rows.end(),
            [](const EvalRow& a, const EvalRow& b) { return a.task_id < b.task_id; });
  double em_sum = 0.0;
  double f1_sum = 0.0;
  for (const auto& r : report.rows) {
    em_sum += r.em;
    f1_sum += r.f1;
  }
  report.count = report.rows.size();
  report.mean_em = em_sum / static_cast<double>(report.count);
  report.mean_f1 = f1_sum / static_cast<double>(report.count);
  return report;
}

std::string SweepTable::to_csv() const {
  std::string out = "size,em,f1,n\n";
  for (const auto& row : rows) {
    out += std::to_string(row.size) + "," + format_metric(row.report.mean_em) + "," +
           format_metric(row.report.mean_f1) + "," + std::to_string(row.report.count) + "\n";
  }
  return out;
}

ordered_json SweepTable::to_json() const {
  ordered_json j = ordered_json::array();
  for (const auto& row : rows) {
    ordered_json rj;
    rj["size"] = row.size;
    rj["report"] = row.report.to_json();
    j.push_back(std::move(rj));
  }
  return j;
}

SweepTable sweep_context_sizes(std::span<const SweepTask> tasks, std::span<const std::size_t> sizes,
                               const Answerer& answerer, AnswerExtractor& extractor, const EvalConfig& config) {
  if (sizes.empty()) throw EvalError("sweep needs at least one context size");
  if (std::any_of(sizes.begin(), sizes.end(), [](std::size_t s) { return s == 0; })) {
    throw EvalError("sweep sizes must be at least 1");
  }
  if (tasks.empty()) throw EvalError("sweep needs at least one task");

  std::map<std::string, std::vector<std::string>> golds;
  std::map<std::string, std::string> questions;
  for (const auto& t : tasks) {
    golds[t.task_id] = t.golds;
    questions[t.task_id] = t.question;
  }

  SweepTable table;
  for (std::size_t size : sizes) {
    std::vector<AnswerQuery> queries;
    queries.reserve(tasks.size());
    std::size_t short_tasks = 0;
    for (const auto& t : tasks) {
      AnswerQuery q{t.task_id, t.question, {}};
      const std::size_t take = std::min(size, t.passages.size());
      if (take < size) ++short_tasks;
      q.passages.assign(t.passages.begin(), t.passages.begin() + static_cast<std::ptrdiff_t>(take));
      queries.push_back(std::move(q));
    }
    const auto outputs = answerer(queries);
    if (outputs.size() != queries.size()) throw EvalError("answerer returned a misaligned batch");

    std::vector<Prediction> predictions;
    predictions.reserve(tasks.size());
    for (std::size_t i = 0; i < tasks.size(); ++i) predictions.push_back({tasks[i].task_id, outputs[i], std::nullopt});
    extractor.extract_all(predictions, questions);

    EvalConfig cfg = config;
    cfg.context_size = size;
    SweepRow row{size, evaluate(predictions, golds, cfg)};
    row.report.short_context = short_tasks;
    if (short_tasks) spdlog::warn("size {}: {} task(s) had fewer candidates than requested", size, short_tasks);
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace ctxsynth::evaluation
