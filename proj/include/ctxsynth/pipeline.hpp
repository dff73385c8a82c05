#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxsynth/augmentation.hpp"
#include "ctxsynth/corpus.hpp"
#include "ctxsynth/dataset.hpp"
#include "ctxsynth/http_backend.hpp"
#include "ctxsynth/llm.hpp"
#include "ctxsynth/ranker.hpp"
#include "ctxsynth/retrieval.hpp"

namespace ctxsynth::pipeline {

namespace fs = std::filesystem;

struct BackendConfig {
  std::string kind = "mock";  // mock | http
  fs::path mock_script;
  llm::HttpConfig http;
  std::string api_key_env;
  llm::RetryPolicy retry;

  /// Stable identity used to share one backend between roles.
  std::string key() const;
};

enum class Stage { ingest, synthesize, assemble, eval, sweep };

std::string_view to_string(Stage stage) noexcept;

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct PipelineConfig {
  std::vector<fs::path> corpus;
  fs::path tasks;
  corpus::ContextMode mode = corpus::ContextMode::rag;
  fs::path output_dir = "out";
  std::uint64_t seed = 0;
  std::optional<std::size_t> task_limit;
  std::size_t max_in_flight = 8;
  std::size_t parallel_tasks = 4;
  std::size_t chunk_size_words = corpus::kDefaultChunkWords;

  retrieval::RetrieverKind retriever = retrieval::RetrieverKind::bm25;
  std::size_t top_k = 100;
  retrieval::Bm25Params bm25;
  std::optional<fs::path> rankings;

  BackendConfig ranker_backend;
  BackendConfig generator_backend;
  std::optional<BackendConfig> extractor_backend;  // unset: offline extraction
  double temperature = 0.0;

  ranking::RankerOptions ranker;
  std::optional<fs::path> ranker_template;
  bool dump_rankings = false;

  std::size_t budget_tokens = 6000;
  double token_scale = 1.35;
  int generator_max_tokens = 1024;
  std::optional<fs::path> generator_template;
  std::optional<fs::path> extractor_template;

  bool augment = true;
  augmentation::ShuffleSpec shuffle;  // seed is taken from `seed`
  dataset::FilterPolicy filter = dataset::FilterPolicy::keep_all;

  std::optional<fs::path> predictions;
  std::string eval_retriever_tag;
  std::optional<std::size_t> eval_context_size;
  std::vector<std::size_t> sweep_sizes = {5, 10, 20, 50, 100};

  /// Relative paths resolve against `base_dir`.
  static PipelineConfig from_json(const nlohmann::json& j, const fs::path& base_dir = {});
  static PipelineConfig load(const fs::path& path);

  /// Checks that every input the stage reads exists. Throws ConfigError.
  void validate(Stage stage) const;
};

struct FileDigest {
  std::string path;
  std::string sha256;
};

struct StageManifest {
  std::string stage;
  std::vector<FileDigest> inputs;
  std::vector<FileDigest> outputs;
  std::map<std::string, std::size_t> counts;
  std::vector<std::string> failures;  // "<task_id>: <reason>", non-fatal
  std::size_t fatal_errors = 0;
  double wall_seconds = 0.0;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();

  nlohmann::ordered_json to_json() const;
  static StageManifest from_json(const nlohmann::json& j);
  bool ok() const noexcept { return fatal_errors == 0; }
};

using BackendFactory = std::function<std::shared_ptr<llm::Backend>(const BackendConfig&)>;

/// Mock script or HTTP client, per the config's kind.
std::shared_ptr<llm::Backend> make_backend(const BackendConfig& config);

struct RunOptions {
  BackendFactory backend_factory;  // defaults to make_backend
  std::function<void(std::chrono::milliseconds)> sleep;  // retry sleeps; defaults to real sleeping
};

// Output file names inside output_dir.
inline constexpr const char* kIndexFile = "bm25.index";
inline constexpr const char* kAuditFile = "audit.jsonl";
inline constexpr const char* kProgressFile = "synthesis.progress.jsonl";
inline constexpr const char* kSynthesisFile = "synthesis.jsonl";
inline constexpr const char* kContextsFile = "contexts.jsonl";
inline constexpr const char* kRankingsFile = "rankings.jsonl";
inline constexpr const char* kDatasetFile = "dataset.jsonl";
inline constexpr const char* kReportJson = "report.json";
inline constexpr const char* kReportCsv = "report.csv";
inline constexpr const char* kSweepCsv = "sweep.csv";
inline constexpr const char* kSweepJson = "sweep.json";

fs::path manifest_path(const PipelineConfig& config, Stage stage);

/// Builds the passage store and (for bm25) the index file.
StageManifest cmd_ingest(const PipelineConfig& config);

/// Retrieve, rank, pack, generate and extract for every task. Resumable: tasks already in
/// the progress file are not re-run.
StageManifest cmd_synthesize(const PipelineConfig& config, const RunOptions& options = {});

/// Augmentation copies, training-record build, filtering, and dataset write.
StageManifest cmd_assemble(const PipelineConfig& config);

/// Scores a predictions file against the tasks' gold answers.
StageManifest cmd_eval(const PipelineConfig& config, const RunOptions& options = {});

/// Answers every task at each context size with the generator backend and scores it.
StageManifest cmd_sweep(const PipelineConfig& config, const RunOptions& options = {});

}  // namespace ctxsynth::pipeline
