#include "ctxsynth/dataset.hpp"

#include <fstream>

#include "ctxsynth/hashing.hpp"

namespace ctxsynth::dataset {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

TrainingRecord build_training_record(const TrainingInput& input, const synthesis::SynthesisRecord& synthesized,
                                     const templates::PromptTemplate& tmpl,
                                     const synthesis::TokenEstimator& estimator) {
  if (synthesized.cot_answer.empty()) {
    throw Error("task " + synthesized.task_id + " has no chain-of-thought answer");
  }
  std::string passages;
  if (const auto* passage_list = std::get_if<std::vector<std::string>>(&input.context)) {
    std::vector<std::string_view> views(passage_list->begin(), passage_list->end());
    if (views.empty()) throw Error("record " + input.record_id + " has an empty context");
    passages = synthesis::render_passages(views);
  } else {
    passages = std::get<std::string>(input.context);
  }

  TrainingRecord record;
  record.record_id = input.record_id;
  record.messages.push_back({llm::Role::user, tmpl.render({{"question", input.question}, {"passages", passages}})});
  record.messages.push_back({llm::Role::assistant, synthesized.cot_answer});
  record.loss_spans.push_back({1, 0, text::utf8_length(synthesized.cot_answer)});
  record.meta.source_task_id = input.source_task_id;
  record.meta.augmentation = input.augmentation;
  record.meta.estimated_prompt_tokens = estimator(record.messages.front().content);
  return record;
}

std::string loss_text(const TrainingRecord& record) {
  std::string out;
  for (const auto& span : record.loss_spans) {
    if (span.message >= record.messages.size()) throw Error("loss span references a missing message");
    out.append(text::utf8_substr(record.messages[span.message].content, span.start, span.end));
  }
  return out;
}

ordered_json to_json(const TrainingRecord& r) {
  ordered_json j;
  j["record_id"] = r.record_id;
  ordered_json messages = ordered_json::array();
  for (const auto& m : r.messages) {
    ordered_json mj;
    mj["role"] = llm::to_string(m.role);
    mj["content"] = m.content;
    messages.push_back(std::move(mj));
  }
  j["messages"] = std::move(messages);
  ordered_json spans = ordered_json::array();
  for (const auto& s : r.loss_spans) {
    ordered_json sj;
    sj["message"] = s.message;
    sj["start"] = s.start;
    sj["end"] = s.end;
    spans.push_back(std::move(sj));
  }
  j["loss_spans"] = std::move(spans);
  ordered_json meta;
  meta["source_task_id"] = r.meta.source_task_id;
  meta["augmentation"] = r.meta.augmentation;
  meta["estimated_prompt_tokens"] = r.meta.estimated_prompt_tokens;
  j["meta"] = std::move(meta);
  return j;
}

TrainingRecord training_record_from_json(const json& j) {
  TrainingRecord r;
  r.record_id = j.at("record_id").get<std::string>();
  for (const auto& m : j.at("messages")) {
    r.messages.push_back({llm::parse_role(m.at("role").get<std::string>()), m.at("content").get<std::string>()});
  }
  for (const auto& s : j.at("loss_spans")) {
    r.loss_spans.push_back(
        {s.at("message").get<std::size_t>(), s.at("start").get<std::size_t>(), s.at("end").get<std::size_t>()});
  }
  const auto& meta = j.at("meta");
  r.meta.source_task_id = meta.at("source_task_id").get<std::string>();
  r.meta.augmentation = meta.at("augmentation").get<std::string>();
  r.meta.estimated_prompt_tokens = meta.at("estimated_prompt_tokens").get<std::size_t>();
  return r;
}

std::string_view to_string(FilterPolicy policy) noexcept {
  switch (policy) {
    case FilterPolicy::keep_all: return "keep-all";
    case FilterPolicy::drop_no_answer: return "drop-no-answer";
    case FilterPolicy::drop_unparsed: return "drop-unparsed";
  }
  return "keep-all";
}

FilterPolicy parse_filter_policy(std::string_view name) {
  if (name == "keep-all") return FilterPolicy::keep_all;
  if (name == "drop-no-answer") return FilterPolicy::drop_no_answer;
  if (name == "drop-unparsed") return FilterPolicy::drop_unparsed;
  throw Error("unknown filter policy '" + std::string(name) + "'");
}

std::vector<AssembledRecord> filter_records(std::vector<AssembledRecord> records, FilterPolicy policy,
                                            FilterReport* report) {
  FilterReport local;
  local.input = records.size();
  std::vector<AssembledRecord> kept;
  kept.reserve(records.size());
  for (auto& r : records) {
    const bool drop = (policy == FilterPolicy::drop_no_answer && r.no_answer) ||
                      (policy == FilterPolicy::drop_unparsed && !r.answer_parsed);
    if (!drop) kept.push_back(std::move(r));
  }
  local.kept = kept.size();
  local.dropped = local.input - local.kept;
  if (report) *report = local;
  return kept;
}

std::string token_bucket(std::size_t tokens) {
  if (tokens < 1024) return "0-1023";
  std::size_t lo = 1024;
  while (lo < 65536 && tokens >= lo * 2) lo *= 2;
  if (lo >= 65536) return "65536+";
  return std::to_string(lo) + "-" + std::to_string(lo * 2 - 1);
}

ordered_json DatasetManifest::to_json() const {
  ordered_json j;
  j["records"] = records;
  j["lines"] = lines;
  ordered_json hist;
  for (const auto& [bucket, n] : token_histogram) hist[bucket] = n;
  j["token_histogram"] = std::move(hist);
  j["augmentation_ratio"] = augmentation_ratio;
  j["sha256"] = sha256;
  return j;
}

DatasetManifest write_dataset(std::span<const TrainingRecord> records, const std::filesystem::path& path) {
  DatasetManifest manifest;
  std::size_t shuffled = 0;
  std::string payload;
  for (const auto& r : records) {
    payload += to_json(r).dump();
    payload.push_back('\n');
    ++manifest.lines;
    ++manifest.token_histogram[token_bucket(r.meta.estimated_prompt_tokens)];
    if (r.meta.augmentation == "shuffled") ++shuffled;
  }
  manifest.records = records.size();
  manifest.augmentation_ratio =
      records.empty() ? 0.0 : static_cast<double>(shuffled) / static_cast<double>(records.size());
  write_file_atomic(path, payload);
  manifest.sha256 = sha256_hex(payload);
  return manifest;
}

std::vector<TrainingRecord> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset " + path.string());
  std::vector<TrainingRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw Error(path.string() + ":" + std::to_string(lineno) + ": invalid JSON");
    out.push_back(training_record_from_json(j));
  }
  return out;
}

}  // namespace ctxsynth::dataset
