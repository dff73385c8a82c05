#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxsynth/llm.hpp"
#include "ctxsynth/synthesis.hpp"
#include "ctxsynth/templates.hpp"

namespace ctxsynth::dataset {

/// Character range [start, end) of messages[message].content carrying loss, in code points.
struct LossSpan {
  std::size_t message = 0;
  std::size_t start = 0;
  std::size_t end = 0;

  friend bool operator==(const LossSpan&, const LossSpan&) = default;
};

struct RecordMeta {
  std::string source_task_id;
  std::string augmentation = "none";  // none | original | shuffled
  std::size_t estimated_prompt_tokens = 0;

  friend bool operator==(const RecordMeta&, const RecordMeta&) = default;
};

/// One fine-tuning example: full context + question in, chain-of-thought answer out.
struct TrainingRecord {
  std::string record_id;
  std::vector<llm::Message> messages;
  std::vector<LossSpan> loss_spans;
  RecordMeta meta;

  friend bool operator==(const TrainingRecord&, const TrainingRecord&) = default;
};

/// Everything the record is built from besides the synthesized answer. `context` is either
/// every candidate passage in stored order or the raw document.
struct TrainingInput {
  std::string record_id;
  std::string source_task_id;
  std::string question;
  std::string augmentation = "none";
  std::variant<std::vector<std::string>, std::string> context;
};

/// Throws Error when the synthesis record has no chain-of-thought answer.
TrainingRecord build_training_record(const TrainingInput& input, const synthesis::SynthesisRecord& synthesized,
                                     const templates::PromptTemplate& tmpl = templates::generator(),
                                     const synthesis::TokenEstimator& estimator =
                                         synthesis::TokenEstimator::word_scaled());

/// Text covered by the record's loss spans, concatenated.
std::string loss_text(const TrainingRecord& record);

/// Stable field order: record_id, messages, loss_spans, meta.
nlohmann::ordered_json to_json(const TrainingRecord& record);
TrainingRecord training_record_from_json(const nlohmann::json& j);

enum class FilterPolicy { keep_all, drop_no_answer, drop_unparsed };

std::string_view to_string(FilterPolicy policy) noexcept;
FilterPolicy parse_filter_policy(std::string_view name);

/// A built record plus the synthesis flags filtering looks at (never serialized).
struct AssembledRecord {
  TrainingRecord record;
  bool no_answer = false;
  bool answer_parsed = true;
};

struct FilterReport {
  std::size_t input = 0;
  std::size_t kept = 0;
  std::size_t dropped = 0;
};

std::vector<AssembledRecord> filter_records(std::vector<AssembledRecord> records, FilterPolicy policy,
                                            FilterReport* report = nullptr);

struct DatasetManifest {
  std::size_t records = 0;
  std::size_t lines = 0;
  std::map<std::string, std::size_t> token_histogram;  // bucket label -> count
  double augmentation_ratio = 0.0;                      // shuffled copies / records
  std::string sha256;

  nlohmann::ordered_json to_json() const;
};

/// Token-estimate bucket label, e.g. "1024-2047" or "65536+".
std::string token_bucket(std::size_t tokens);

/// Writes JSON lines atomically (temp file + rename); on failure nothing is left behind.
DatasetManifest write_dataset(std::span<const TrainingRecord> records, const std::filesystem::path& path);
std::vector<TrainingRecord> read_dataset(const std::filesystem::path& path);

}  // namespace ctxsynth::dataset
