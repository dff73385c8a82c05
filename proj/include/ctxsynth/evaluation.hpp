#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxsynth/llm.hpp"
#include "ctxsynth/templates.hpp"

namespace ctxsynth::evaluation {

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse whitespace.
std::string normalize_answer(std::string_view text);

/// 1 iff the normalized prediction equals some normalized gold. Throws Error on empty golds.
int exact_match(std::string_view prediction, std::span<const std::string> golds);

/// Bag-of-tokens F1 over normalized text, maximized over golds.
double token_f1(std::string_view prediction, std::span<const std::string> golds);
double token_f1(std::string_view prediction, std::string_view gold);

struct Prediction {
  std::string task_id;
  std::string raw_output;
  std::optional<std::string> extracted_answer;
};

/// Reads JSON lines {task_id, raw_output}.
std::vector<Prediction> load_predictions(std::istream& in);

/// Text after the last "Answer:" line, else the trimmed raw output.
std::string offline_short_answer(std::string_view raw_output);

/// Reduces long answers to short spans. Without a gateway, or when the LM call fails,
/// falls back to offline_short_answer.
class AnswerExtractor {
 public:
  AnswerExtractor() = default;
  explicit AnswerExtractor(llm::Gateway* gateway, std::size_t max_in_flight = 8,
                           const templates::PromptTemplate& tmpl = templates::extractor());

  std::string extract(std::string_view question, std::string_view raw_output);

  /// Fills extracted_answer for every prediction; `questions` maps task_id to question.
  void extract_all(std::vector<Prediction>& predictions, const std::map<std::string, std::string>& questions);

  static llm::ChatRequest build_prompt(std::string_view question, std::string_view raw_output,
                                       const templates::PromptTemplate& tmpl = templates::extractor());
  /// First nonempty line of the LM reply, minus any "Short answer:"/"Answer:" label.
  static std::string clean_reply(std::string_view reply);

 private:
  llm::Gateway* gateway_ = nullptr;
  std::size_t max_in_flight_ = 8;
  templates::PromptTemplate tmpl_ = templates::extractor();
};

struct EvalRow {
  std::string task_id;
  int em = 0;
  double f1 = 0.0;
};

struct EvalConfig {
  std::string retriever = "none";
  std::optional<std::size_t> context_size;
};

struct EvalReport {
  std::vector<EvalRow> rows;  // sorted by task_id
  double mean_em = 0.0;
  double mean_f1 = 0.0;
  std::size_t count = 0;
  EvalConfig config;
  std::size_t short_context = 0;  // tasks with fewer candidates than context_size

  nlohmann::ordered_json to_json() const;
  /// task_id,em,f1 rows.
  std::string to_csv() const;
};

class EvalError : public Error {
 public:
  using Error::Error;
};

/// Scores extracted answers (raw output when not extracted). Throws EvalError on an empty
/// prediction set, duplicate task ids, or predictions without golds.
EvalReport evaluate(std::span<const Prediction> predictions,
                    const std::map<std::string, std::vector<std::string>>& golds, const EvalConfig& config = {});

/// One task of a context-size sweep: candidate passages in retrieval order.
struct SweepTask {
  std::string task_id;
  std::string question;
  std::vector<std::string> passages;
  std::vector<std::string> golds;
};

struct AnswerQuery {
  std::string task_id;
  std::string question;
  std::vector<std::string_view> passages;
};

/// Produces one raw output per query, positionally aligned.
using Answerer = std::function<std::vector<std::string>(std::span<const AnswerQuery>)>;

inline const std::vector<std::size_t> kDefaultSweepSizes = {5, 10, 20, 50, 100};

struct SweepRow {
  std::size_t size = 0;
  EvalReport report;
};

struct SweepTable {
  std::vector<SweepRow> rows;

  /// size,em,f1,n
  std::string to_csv() const;
  nlohmann::ordered_json to_json() const;
};

/// For each size s, answers every task from its top-s passages and scores the result.
SweepTable sweep_context_sizes(std::span<const SweepTask> tasks, std::span<const std::size_t> sizes,
                               const Answerer& answerer, AnswerExtractor& extractor, const EvalConfig& config = {});

/// Fixed-precision decimal used in CSV output.
std::string format_metric(double v);

}  // namespace ctxsynth::evaluation
