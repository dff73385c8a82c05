#include "ctxsynth/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "ctxsynth/evaluation.hpp"
#include "ctxsynth/hashing.hpp"
#include "ctxsynth/mock_backend.hpp"
#include "ctxsynth/synthesis.hpp"

namespace ctxsynth::pipeline {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::string_view to_string(Stage stage) noexcept {
  switch (stage) {
    case Stage::ingest: return "ingest";
    case Stage::synthesize: return "synthesize";
    case Stage::assemble: return "assemble";
    case Stage::eval: return "eval";
    case Stage::sweep: return "sweep";
  }
  return "unknown";
}

std::string BackendConfig::key() const {
  if (kind == "mock") return "mock:" + mock_script.string();
  return "http:" + http.endpoint + http.path + "#" + http.model;
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

fs::path resolve(const fs::path& base, const fs::path& p) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config field '") + key + "' has the wrong type");
  }
}

BackendConfig parse_backend(const json& j, const fs::path& base) {
  if (!j.is_object()) throw ConfigError("backend config must be an object");
  BackendConfig b;
  b.kind = get_or<std::string>(j, "kind", "mock");
  if (b.kind != "mock" && b.kind != "http") throw ConfigError("backend kind must be mock or http");
  b.mock_script = resolve(base, get_or<std::string>(j, "script", ""));
  b.http.endpoint = get_or<std::string>(j, "endpoint", b.http.endpoint);
  b.http.path = get_or<std::string>(j, "path", b.http.path);
  b.http.model = get_or<std::string>(j, "model", b.http.model);
  b.http.timeout = std::chrono::seconds(get_or<long long>(j, "timeout_s", b.http.timeout.count()));
  b.api_key_env = get_or<std::string>(j, "api_key_env", "");
  b.retry.max_attempts = get_or<int>(j, "max_attempts", b.retry.max_attempts);
  b.retry.base_delay = std::chrono::milliseconds(get_or<long long>(j, "base_delay_ms", b.retry.base_delay.count()));
  b.retry.max_delay = std::chrono::milliseconds(get_or<long long>(j, "max_delay_ms", b.retry.max_delay.count()));
  if (b.retry.max_attempts < 1) throw ConfigError("max_attempts must be at least 1");
  if (b.kind == "mock" && b.mock_script.empty()) throw ConfigError("mock backend needs a 'script' path");
  return b;
}

std::optional<fs::path> optional_path(const json& j, const char* key, const fs::path& base) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return resolve(base, it->get<std::string>());
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "corpus",   "tasks",     "mode",        "output_dir",   "seed",      "task_limit", "max_in_flight",
      "parallel_tasks", "chunk_size_words", "retrieval", "backend", "ranker", "generator", "temperature",
      "augmentation", "filter", "eval"};
  return keys;
}

}  // namespace

PipelineConfig PipelineConfig::from_json(const json& j, const fs::path& base) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known_keys().contains(key)) throw ConfigError("unknown config field '" + key + "'");
  }
  PipelineConfig c;
  if (auto it = j.find("corpus"); it != j.end()) {
    if (it->is_string()) {
      c.corpus.push_back(resolve(base, it->get<std::string>()));
    } else {
      for (const auto& p : *it) c.corpus.push_back(resolve(base, p.get<std::string>()));
    }
  }
  c.tasks = resolve(base, get_or<std::string>(j, "tasks", ""));
  c.mode = corpus::parse_context_mode(get_or<std::string>(j, "mode", "rag"));
  c.output_dir = resolve(base, get_or<std::string>(j, "output_dir", "out"));
  c.seed = get_or<std::uint64_t>(j, "seed", 0);
  if (auto it = j.find("task_limit"); it != j.end() && !it->is_null()) c.task_limit = it->get<std::size_t>();
  c.max_in_flight = get_or<std::size_t>(j, "max_in_flight", c.max_in_flight);
  c.parallel_tasks = get_or<std::size_t>(j, "parallel_tasks", c.parallel_tasks);
  c.chunk_size_words = get_or<std::size_t>(j, "chunk_size_words", c.chunk_size_words);
  c.temperature = get_or<double>(j, "temperature", c.temperature);
  if (c.max_in_flight < 1 || c.parallel_tasks < 1) throw ConfigError("max_in_flight and parallel_tasks must be >= 1");
  if (c.chunk_size_words < 1) throw ConfigError("chunk_size_words must be >= 1");
  if (c.temperature < 0.0) throw ConfigError("temperature must be >= 0");

  const json retrieval_j = j.value("retrieval", json::object());
  c.retriever = retrieval::parse_retriever_kind(get_or<std::string>(retrieval_j, "retriever", "bm25"));
  c.top_k = get_or<std::size_t>(retrieval_j, "top_k", c.top_k);
  c.bm25.k1 = get_or<double>(retrieval_j, "k1", c.bm25.k1);
  c.bm25.b = get_or<double>(retrieval_j, "b", c.bm25.b);
  c.rankings = optional_path(retrieval_j, "rankings", base);
  if (c.top_k < 1) throw ConfigError("retrieval.top_k must be >= 1");

  BackendConfig shared;
  bool have_shared = false;
  if (auto it = j.find("backend"); it != j.end()) {
    shared = parse_backend(*it, base);
    have_shared = true;
  }

  const json ranker_j = j.value("ranker", json::object());
  if (auto it = ranker_j.find("backend"); it != ranker_j.end()) {
    c.ranker_backend = parse_backend(*it, base);
  } else if (have_shared) {
    c.ranker_backend = shared;
  }
  if (auto it = ranker_j.find("grade_limit"); it != ranker_j.end() && !it->is_null()) {
    c.ranker.grade_limit = it->get<std::size_t>();
  }
  c.ranker.max_tokens = get_or<int>(ranker_j, "max_tokens", c.ranker.max_tokens);
  c.ranker_template = optional_path(ranker_j, "template", base);
  c.dump_rankings = get_or<bool>(ranker_j, "dump", false);

  const json gen_j = j.value("generator", json::object());
  if (auto it = gen_j.find("backend"); it != gen_j.end()) {
    c.generator_backend = parse_backend(*it, base);
  } else if (have_shared) {
    c.generator_backend = shared;
  }
  c.budget_tokens = get_or<std::size_t>(gen_j, "budget_tokens", c.budget_tokens);
  c.token_scale = get_or<double>(gen_j, "token_scale", c.token_scale);
  c.generator_max_tokens = get_or<int>(gen_j, "max_tokens", c.generator_max_tokens);
  c.generator_template = optional_path(gen_j, "template", base);
  if (!(c.token_scale > 0.0)) throw ConfigError("generator.token_scale must be positive");

  const json aug_j = j.value("augmentation", json::object());
  c.augment = get_or<bool>(aug_j, "enabled", c.augment);
  c.shuffle.window = get_or<std::size_t>(aug_j, "window", c.shuffle.window);
  c.shuffle.stride = get_or<std::size_t>(aug_j, "stride", c.shuffle.stride);
  c.shuffle.seed = c.seed;
  try {
    c.shuffle.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }

  c.filter = dataset::parse_filter_policy(get_or<std::string>(j, "filter", "keep-all"));

  const json eval_j = j.value("eval", json::object());
  c.predictions = optional_path(eval_j, "predictions", base);
  c.eval_retriever_tag = get_or<std::string>(eval_j, "retriever_tag", "");
  if (auto it = eval_j.find("context_size"); it != eval_j.end() && !it->is_null()) {
    c.eval_context_size = it->get<std::size_t>();
  }
  c.sweep_sizes = get_or<std::vector<std::size_t>>(eval_j, "sweep_sizes", c.sweep_sizes);
  if (auto it = eval_j.find("extractor"); it != eval_j.end() && !it->is_null()) {
    if (it->is_string()) {
      if (it->get<std::string>() != "offline") throw ConfigError("eval.extractor must be \"offline\" or an object");
    } else {
      if (auto b = it->find("backend"); b != it->end()) {
        c.extractor_backend = parse_backend(*b, base);
      } else if (have_shared) {
        c.extractor_backend = shared;
      }
      c.extractor_template = optional_path(*it, "template", base);
    }
  }
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
  return from_json(j, path.parent_path());
}

void PipelineConfig::validate(Stage stage) const {
  auto require = [](const fs::path& p, const char* what) {
    if (p.empty()) throw ConfigError(std::string(what) + " path is not configured");
    if (!fs::exists(p)) throw ConfigError(std::string(what) + " not found: " + p.string());
  };
  auto require_backend = [&](const BackendConfig& b, const char* role) {
    if (b.kind == "mock") require(b.mock_script, (std::string(role) + " mock script").c_str());
  };
  const bool needs_corpus = mode == corpus::ContextMode::rag &&
                            (stage == Stage::ingest || stage == Stage::synthesize || stage == Stage::assemble ||
                             stage == Stage::sweep);
  if (needs_corpus || stage == Stage::ingest) {
    if (corpus.empty()) throw ConfigError("no corpus files configured");
    for (const auto& p : corpus) require(p, "corpus file");
  }
  if (stage != Stage::ingest) require(tasks, "task file");
  if (stage == Stage::synthesize) {
    require_backend(ranker_backend, "ranker");
    require_backend(generator_backend, "generator");
  }
  if (stage == Stage::sweep) require_backend(generator_backend, "generator");
  if ((stage == Stage::synthesize || stage == Stage::sweep) && rankings) require(*rankings, "rankings file");
  if (stage == Stage::eval) {
    if (!predictions) throw ConfigError("no predictions file configured");
    require(*predictions, "predictions file");
  }
  if ((stage == Stage::eval || stage == Stage::sweep) && extractor_backend) {
    require_backend(*extractor_backend, "extractor");
  }
  for (const auto& t : {ranker_template, generator_template, extractor_template}) {
    if (t) require(*t, "template");
  }
  if (stage == Stage::sweep) {
    if (sweep_sizes.empty()) throw ConfigError("eval.sweep_sizes is empty");
    for (auto s : sweep_sizes) {
      if (s < 1) throw ConfigError("sweep sizes must be >= 1");
    }
  }
}

// ---------------------------------------------------------------------------
// Manifests

ordered_json StageManifest::to_json() const {
  ordered_json j;
  j["stage"] = stage;
  auto digests = [](const std::vector<FileDigest>& files) {
    ordered_json arr = ordered_json::array();
    for (const auto& f : files) {
      ordered_json fj;
      fj["path"] = f.path;
      fj["sha256"] = f.sha256;
      arr.push_back(std::move(fj));
    }
    return arr;
  };
  j["inputs"] = digests(inputs);
  j["outputs"] = digests(outputs);
  ordered_json counts_j = ordered_json::object();
  for (const auto& [k, v] : counts) counts_j[k] = v;
  j["counts"] = std::move(counts_j);
  j["failures"] = failures;
  j["fatal_errors"] = fatal_errors;
  j["wall_seconds"] = wall_seconds;
  j["extra"] = extra;
  return j;
}

StageManifest StageManifest::from_json(const json& j) {
  StageManifest m;
  m.stage = j.at("stage").get<std::string>();
  for (const char* key : {"inputs", "outputs"}) {
    auto& dst = std::string_view(key) == "inputs" ? m.inputs : m.outputs;
    for (const auto& f : j.at(key)) dst.push_back({f.at("path").get<std::string>(), f.at("sha256").get<std::string>()});
  }
  for (const auto& [k, v] : j.at("counts").items()) m.counts[k] = v.get<std::size_t>();
  m.failures = j.value("failures", std::vector<std::string>{});
  m.fatal_errors = j.value("fatal_errors", std::size_t{0});
  m.wall_seconds = j.value("wall_seconds", 0.0);
  m.extra = j.value("extra", ordered_json::object());
  return m;
}

fs::path manifest_path(const PipelineConfig& config, Stage stage) {
  return config.output_dir / (std::string(to_string(stage)) + ".manifest.json");
}

std::shared_ptr<llm::Backend> make_backend(const BackendConfig& config) {
  if (config.kind == "mock") return std::make_shared<llm::MockBackend>(llm::MockScript::load(config.mock_script));
  llm::HttpConfig http = config.http;
  if (!config.api_key_env.empty()) {
    if (const char* key = std::getenv(config.api_key_env.c_str())) http.api_key = key;
  }
  return std::make_shared<llm::HttpBackend>(std::move(http));
}

// ---------------------------------------------------------------------------
// Shared stage plumbing

namespace {

using Clock = std::chrono::steady_clock;

FileDigest digest(const fs::path& p) { return {p.string(), sha256_file(p)}; }

void finish(StageManifest& m, const PipelineConfig& config, Stage stage, Clock::time_point start) {
  m.stage = std::string(to_string(stage));
  m.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  fs::create_directories(config.output_dir);
  write_file_atomic(manifest_path(config, stage), m.to_json().dump(2) + "\n");
}

corpus::PassageStore load_store(const PipelineConfig& config, StageManifest* manifest) {
  corpus::PassageStore store;
  std::size_t skipped = 0;
  std::size_t lines = 0;
  ordered_json skipped_at = ordered_json::array();
  for (const auto& path : config.corpus) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read corpus " + path.string());
    corpus::IngestStats stats;
    corpus::ingest_corpus_into(store, in, corpus::CorpusFormat::autodetect, &stats);
    skipped += stats.skipped;
    lines += stats.lines;
    for (auto l : stats.skipped_lines) {
      if (skipped_at.size() < 100) skipped_at.push_back(path.filename().string() + ":" + std::to_string(l));
    }
    if (manifest) manifest->inputs.push_back(digest(path));
  }
  if (manifest) {
    manifest->counts["corpus_lines"] = lines;
    manifest->counts["passages"] = store.size();
    manifest->counts["skipped_lines"] = skipped;
    if (!skipped_at.empty()) manifest->extra["skipped_lines"] = skipped_at;
  }
  return store;
}

std::vector<corpus::Task> load_task_list(const PipelineConfig& config, StageManifest* manifest) {
  std::ifstream in(config.tasks);
  if (!in) throw ConfigError("cannot read tasks " + config.tasks.string());
  auto tasks = corpus::load_tasks(in, config.mode);
  if (config.task_limit && tasks.size() > *config.task_limit) tasks.resize(*config.task_limit);
  if (manifest) {
    manifest->inputs.push_back(digest(config.tasks));
    manifest->counts["tasks"] = tasks.size();
  }
  return tasks;
}

templates::PromptTemplate template_or(const std::optional<fs::path>& path, const templates::PromptTemplate& builtin) {
  return path ? templates::PromptTemplate::load(*path) : builtin;
}

/// One gateway per distinct backend, all sharing one in-flight pool and audit log.
class Gateways {
 public:
  Gateways(const PipelineConfig& config, const RunOptions& options)
      : config_(config),
        options_(options),
        slots_(std::make_shared<llm::SlotPool>(static_cast<std::ptrdiff_t>(config.max_in_flight))) {
    fs::create_directories(config.output_dir);
    audit_ = std::make_shared<llm::AuditLog>(config.output_dir / kAuditFile);
  }

  llm::Gateway& get(const BackendConfig& backend) {
    std::lock_guard lock(mu_);
    auto& slot = gateways_[backend.key()];
    if (!slot) {
      auto made = options_.backend_factory ? options_.backend_factory(backend) : make_backend(backend);
      try {
        made->probe();
      } catch (const std::exception& e) {
        throw Error("backend " + made->describe() + " is unreachable: " + e.what());
      }
      llm::GatewayOptions go;
      go.retry = backend.retry;
      go.shared_slots = slots_;
      go.audit = audit_;
      go.sleep = options_.sleep;
      slot = std::make_unique<llm::Gateway>(std::move(made), std::move(go));
    }
    return *slot;
  }

  std::size_t requests_sent() const {
    std::size_t n = 0;
    for (const auto& [_, g] : gateways_) n += g->requests_sent();
    return n;
  }

 private:
  const PipelineConfig& config_;
  const RunOptions& options_;
  std::shared_ptr<llm::SlotPool> slots_;
  std::shared_ptr<llm::AuditLog> audit_;
  std::mutex mu_;
  std::map<std::string, std::unique_ptr<llm::Gateway>> gateways_;
};

/// Candidate sources for rag tasks.
struct CandidateSource {
  const PipelineConfig& config;
  const corpus::PassageStore& store;
  std::optional<retrieval::Bm25Index> index;
  std::map<std::string, retrieval::RetrievalResult> imported;

  retrieval::RetrievalResult candidates(const corpus::Task& task, std::size_t k) const {
    retrieval::RetrievalResult r;
    if (config.retriever == retrieval::RetrieverKind::bm25) {
      r = index->search(task.question, k, task.task_id);
    } else if (config.rankings) {
      auto it = imported.find(task.task_id);
      if (it == imported.end()) throw Error("no imported ranking for task");
      r = it->second;
      if (r.ranked.size() > k) r.ranked.resize(k);
    } else {
      r.task_id = task.task_id;
      r.retriever = retrieval::RetrieverKind::imported;
      for (std::size_t i = 0; i < task.chunk_ids.size() && i < k; ++i) {
        if (!store.contains(task.chunk_ids[i])) throw Error("unknown chunk id '" + task.chunk_ids[i] + "'");
        r.ranked.push_back({task.chunk_ids[i], 1.0 / static_cast<double>(i + 1)});
      }
    }
    if (r.ranked.empty()) throw Error("retrieval returned no candidates");
    return r;
  }
};

CandidateSource make_candidate_source(const PipelineConfig& config, const corpus::PassageStore& store,
                                      StageManifest& manifest) {
  CandidateSource src{config, store, std::nullopt, {}};
  if (config.retriever == retrieval::RetrieverKind::bm25) {
    const fs::path index_path = config.output_dir / kIndexFile;
    if (!fs::exists(index_path)) throw ConfigError("BM25 index not found at " + index_path.string() + "; run ingest first");
    std::ifstream in(index_path, std::ios::binary);
    src.index = retrieval::Bm25Index::load(in);
    if (src.index->size() != store.size()) {
      throw ConfigError("BM25 index covers " + std::to_string(src.index->size()) + " passages but the corpus has " +
                        std::to_string(store.size()) + "; rerun ingest");
    }
    manifest.inputs.push_back(digest(index_path));
  } else if (config.rankings) {
    std::ifstream in(*config.rankings);
    for (auto& r : retrieval::import_rankings(in, store)) {
      const std::string id = r.task_id;
      if (!src.imported.emplace(id, std::move(r)).second) {
        throw ConfigError("rankings file has two records for task " + id);
      }
    }
    manifest.inputs.push_back(digest(*config.rankings));
  }
  return src;
}

std::map<std::string, json> read_jsonl_by_task(const fs::path& path, bool tolerate_partial) {
  std::map<std::string, json> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    if (text::trim(line).empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("task_id")) {
      if (tolerate_partial) continue;
      throw Error(path.string() + ": malformed line");
    }
    auto id = j["task_id"].get<std::string>();
    out[id] = std::move(j);
  }
  return out;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::string payload;
  for (const auto& l : lines) {
    payload += l;
    payload.push_back('\n');
  }
  write_file_atomic(path, payload);
}

/// Runs fn(i) for i in [0, n) on up to `parallelism` threads.
void parallel_for(std::size_t n, std::size_t parallelism, const std::function<void(std::size_t)>& fn) {
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) fn(i);
  };
  const std::size_t threads = std::min(parallelism, n);
  if (threads <= 1) {
    worker();
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
}

}  // namespace

// ---------------------------------------------------------------------------
// Stages

StageManifest cmd_ingest(const PipelineConfig& config) {
  const auto start = Clock::now();
  config.validate(Stage::ingest);
  fs::create_directories(config.output_dir);
  StageManifest m;
  auto store = load_store(config, &m);
  if (config.retriever == retrieval::RetrieverKind::bm25) {
    const auto index = retrieval::Bm25Index::build(store, config.bm25);
    std::ostringstream buf;
    index.save(buf);
    const fs::path index_path = config.output_dir / kIndexFile;
    write_file_atomic(index_path, buf.str());
    m.outputs.push_back(digest(index_path));
    m.counts["vocabulary"] = index.vocabulary_size();
    m.extra["bm25"] = {{"k1", config.bm25.k1}, {"b", config.bm25.b}, {"average_length", index.average_length()}};
  }
  finish(m, config, Stage::ingest, start);
  return m;
}

StageManifest cmd_synthesize(const PipelineConfig& config, const RunOptions& options) {
  const auto start = Clock::now();
  config.validate(Stage::synthesize);
  fs::create_directories(config.output_dir);
  StageManifest m;

  const auto tasks = load_task_list(config, &m);
  corpus::PassageStore store;
  std::optional<CandidateSource> source;
  if (config.mode == corpus::ContextMode::rag) {
    store = load_store(config, &m);
    source.emplace(make_candidate_source(config, store, m));
  }

  const auto ranker_tmpl = template_or(config.ranker_template, templates::ranker());
  const auto generator_tmpl = template_or(config.generator_template, templates::generator());

  Gateways gateways(config, options);
  llm::Gateway& ranker_gw = gateways.get(config.ranker_backend);
  llm::Gateway& generator_gw = gateways.get(config.generator_backend);

  ranking::RankerOptions ranker_opts = config.ranker;
  ranker_opts.temperature = config.temperature;
  ranker_opts.max_in_flight = config.max_in_flight;

  synthesis::SynthesisOptions synth_opts;
  synth_opts.budget_tokens = config.budget_tokens;
  synth_opts.estimator = synthesis::TokenEstimator::word_scaled(config.token_scale);
  synth_opts.temperature = config.temperature;
  synth_opts.max_tokens = config.generator_max_tokens;

  const fs::path progress_path = config.output_dir / kProgressFile;
  auto done = read_jsonl_by_task(progress_path, /*tolerate_partial=*/true);
  std::vector<std::size_t> pending;
  std::size_t resumed = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (done.contains(tasks[i].task_id)) {
      ++resumed;
    } else {
      pending.push_back(i);
    }
  }
  if (resumed) spdlog::info("resuming: {} of {} tasks already synthesized", resumed, tasks.size());
  if (fs::exists(progress_path)) {
    // drop a torn trailing line so new entries start on a fresh line
    std::vector<std::string> kept;
    for (const auto& [id, entry] : done) kept.push_back(entry.dump());
    write_lines(progress_path, kept);
  }

  std::mutex mu;
  std::ofstream progress(progress_path, std::ios::app);
  if (!progress) throw Error("cannot open " + progress_path.string());
  std::vector<std::string> failures;

  parallel_for(pending.size(), config.parallel_tasks, [&](std::size_t p) {
    const corpus::Task& task = tasks[pending[p]];
    try {
      std::vector<corpus::Chunk> local_chunks;
      std::vector<ranking::Candidate> cands;
      std::map<std::string, std::string_view, std::less<>> texts;
      if (task.mode == corpus::ContextMode::rag) {
        const auto retrieved = source->candidates(task, config.top_k);
        for (std::size_t i = 0; i < retrieved.ranked.size(); ++i) {
          const auto& id = retrieved.ranked[i].chunk_id;
          cands.push_back({id, store.at(id).text, i});
        }
      } else {
        local_chunks = corpus::chunk_document(task.task_id, task.text, config.chunk_size_words);
        if (local_chunks.empty()) throw Error("document is empty");
        for (const auto& c : local_chunks) cands.push_back({c.chunk_id, c.text, c.position});
      }
      for (const auto& c : cands) texts.emplace(c.chunk_id, c.text);

      auto ranked = ranking::rank_chunks(task.question, cands, ranker_gw, ranker_opts, "rank/" + task.task_id,
                                         ranker_tmpl);
      auto record = synthesis::synthesize(
          task.task_id, task.question, ranked, [&](const std::string& id) { return texts.at(id); }, generator_gw,
          synth_opts, generator_tmpl);

      ordered_json entry;
      entry["task_id"] = task.task_id;
      entry["record"] = synthesis::to_json(record);
      std::vector<std::string> candidate_ids;
      for (const auto& c : cands) candidate_ids.push_back(c.chunk_id);
      entry["candidates"] = candidate_ids;
      ordered_json graded = ordered_json::array();
      for (const auto& rc : ranked) {
        ordered_json g;
        g["chunk_id"] = rc.chunk_id;
        g["grade"] = std::string(1, ranking::letter(rc.grade.grade));
        g["retrieval_rank"] = rc.retrieval_rank;
        g["final_rank"] = rc.final_rank;
        graded.push_back(std::move(g));
      }
      entry["graded"] = std::move(graded);
      const std::string line = entry.dump();
      std::lock_guard lock(mu);
      progress << line << '\n';
      progress.flush();
      done[task.task_id] = json::parse(line);
    } catch (const std::exception& e) {
      spdlog::warn("task {} failed: {}", task.task_id, e.what());
      std::lock_guard lock(mu);
      failures.push_back(task.task_id + ": " + e.what());
    }
  });
  progress.close();

  std::sort(failures.begin(), failures.end());
  std::vector<std::string> synthesis_lines;
  std::vector<std::string> context_lines;
  std::vector<std::string> ranking_lines;
  std::size_t parse_failures = 0;
  std::size_t no_answer = 0;
  for (const auto& task : tasks) {
    auto it = done.find(task.task_id);
    if (it == done.end()) continue;
    const auto record = synthesis::synthesis_record_from_json(it->second.at("record"));
    if (!record.final_answer) ++parse_failures;
    if (record.no_answer_flag) ++no_answer;
    synthesis_lines.push_back(synthesis::to_json(record).dump());
    ordered_json ctx;
    ctx["task_id"] = task.task_id;
    ctx["chunk_ids"] = it->second.at("candidates");
    context_lines.push_back(ctx.dump());
    if (config.dump_rankings) {
      ordered_json rk;
      rk["task_id"] = task.task_id;
      rk["graded"] = it->second.at("graded");
      ranking_lines.push_back(rk.dump());
    }
  }

  const fs::path synthesis_path = config.output_dir / kSynthesisFile;
  const fs::path contexts_path = config.output_dir / kContextsFile;
  write_lines(synthesis_path, synthesis_lines);
  write_lines(contexts_path, context_lines);
  m.outputs.push_back(digest(synthesis_path));
  m.outputs.push_back(digest(contexts_path));
  if (config.dump_rankings) {
    const fs::path rankings_path = config.output_dir / kRankingsFile;
    write_lines(rankings_path, ranking_lines);
    m.outputs.push_back(digest(rankings_path));
  }

  m.counts["completed"] = synthesis_lines.size();
  m.counts["resumed"] = resumed;
  m.counts["synthesized"] = pending.size() - failures.size();
  m.counts["failures"] = failures.size();
  m.counts["parse_failures"] = parse_failures;
  m.counts["no_answer"] = no_answer;
  m.counts["llm_requests"] = gateways.requests_sent();
  m.failures = std::move(failures);
  finish(m, config, Stage::synthesize, start);
  return m;
}

StageManifest cmd_assemble(const PipelineConfig& config) {
  const auto start = Clock::now();
  config.validate(Stage::assemble);
  if (config.mode == corpus::ContextMode::document && config.augment) {
    throw ConfigError("augmentation applies to rag mode only; disable augmentation for document tasks");
  }
  StageManifest m;
  const auto tasks = load_task_list(config, &m);
  const fs::path synthesis_path = config.output_dir / kSynthesisFile;
  const fs::path contexts_path = config.output_dir / kContextsFile;
  if (!fs::exists(synthesis_path)) throw ConfigError("no synthesis output at " + synthesis_path.string());
  m.inputs.push_back(digest(synthesis_path));
  const auto records = read_jsonl_by_task(synthesis_path, false);
  std::map<std::string, json> contexts;
  corpus::PassageStore store;
  if (config.mode == corpus::ContextMode::rag) {
    if (!fs::exists(contexts_path)) throw ConfigError("no context file at " + contexts_path.string());
    m.inputs.push_back(digest(contexts_path));
    contexts = read_jsonl_by_task(contexts_path, false);
    store = load_store(config, &m);
  }

  const auto tmpl = template_or(config.generator_template, templates::generator());
  const auto estimator = synthesis::TokenEstimator::word_scaled(config.token_scale);
  augmentation::ShuffleSpec spec = config.shuffle;
  spec.seed = config.seed;

  std::vector<dataset::AssembledRecord> built;
  std::size_t missing = 0;
  for (const auto& task : tasks) {
    auto rec_it = records.find(task.task_id);
    if (rec_it == records.end()) {
      ++missing;
      continue;
    }
    const auto synthesized = synthesis::synthesis_record_from_json(rec_it->second);
    std::vector<dataset::TrainingInput> inputs;
    try {
      if (task.mode == corpus::ContextMode::rag) {
        auto ctx_it = contexts.find(task.task_id);
        if (ctx_it == contexts.end()) throw Error("no stored context");
        corpus::Task base = task;
        base.chunk_ids = ctx_it->second.at("chunk_ids").get<std::vector<std::string>>();
        auto to_input = [&](const corpus::Task& t, std::string tag) {
          std::vector<std::string> passages;
          passages.reserve(t.chunk_ids.size());
          for (const auto& id : t.chunk_ids) passages.push_back(store.at(id).text);
          return dataset::TrainingInput{t.task_id, task.task_id, task.question, std::move(tag), std::move(passages)};
        };
        if (config.augment) {
          auto copies = augmentation::make_augmented_copies(base, spec);
          inputs.push_back(to_input(copies[0], "original"));
          inputs.push_back(to_input(copies[1], "shuffled"));
        } else {
          inputs.push_back(to_input(base, "none"));
        }
      } else {
        inputs.push_back({task.task_id, task.task_id, task.question, "none", task.text});
      }
      for (const auto& in : inputs) {
        built.push_back({dataset::build_training_record(in, synthesized, tmpl, estimator), synthesized.no_answer_flag,
                         synthesized.final_answer.has_value()});
      }
    } catch (const std::exception& e) {
      m.failures.push_back(task.task_id + ": " + e.what());
    }
  }

  dataset::FilterReport filter_report;
  auto kept = dataset::filter_records(std::move(built), config.filter, &filter_report);
  std::vector<dataset::TrainingRecord> records_out;
  records_out.reserve(kept.size());
  for (auto& a : kept) records_out.push_back(std::move(a.record));

  const fs::path dataset_path = config.output_dir / kDatasetFile;
  const auto dm = dataset::write_dataset(records_out, dataset_path);
  m.outputs.push_back(digest(dataset_path));
  m.counts["synthesized_tasks"] = tasks.size() - missing;
  m.counts["missing_synthesis"] = missing;
  m.counts["built"] = filter_report.input;
  m.counts["filtered_out"] = filter_report.dropped;
  m.counts["records"] = dm.records;
  m.counts["failures"] = m.failures.size();
  m.extra["filter"] = std::string(dataset::to_string(config.filter));
  m.extra["augmentation"] = config.augment;
  m.extra["dataset"] = dm.to_json();
  finish(m, config, Stage::assemble, start);
  return m;
}

namespace {

evaluation::AnswerExtractor make_extractor(const PipelineConfig& config, Gateways& gateways) {
  if (!config.extractor_backend) return {};
  return evaluation::AnswerExtractor(&gateways.get(*config.extractor_backend), config.max_in_flight,
                                     template_or(config.extractor_template, templates::extractor()));
}

std::string retriever_tag(const PipelineConfig& config) {
  return config.eval_retriever_tag.empty() ? std::string(retrieval::to_string(config.retriever))
                                           : config.eval_retriever_tag;
}

}  // namespace

StageManifest cmd_eval(const PipelineConfig& config, const RunOptions& options) {
  const auto start = Clock::now();
  config.validate(Stage::eval);
  fs::create_directories(config.output_dir);
  StageManifest m;
  const auto tasks = load_task_list(config, &m);
  std::map<std::string, std::vector<std::string>> golds;
  std::map<std::string, std::string> questions;
  for (const auto& t : tasks) {
    if (t.gold_answers) golds[t.task_id] = *t.gold_answers;
    questions[t.task_id] = t.question;
  }

  std::ifstream in(*config.predictions);
  auto predictions = evaluation::load_predictions(in);
  m.inputs.push_back(digest(*config.predictions));

  Gateways gateways(config, options);
  auto extractor = make_extractor(config, gateways);
  extractor.extract_all(predictions, questions);

  evaluation::EvalConfig ec{retriever_tag(config), config.eval_context_size};
  const auto report = evaluation::evaluate(predictions, golds, ec);

  const fs::path json_path = config.output_dir / kReportJson;
  const fs::path csv_path = config.output_dir / kReportCsv;
  write_file_atomic(json_path, report.to_json().dump(2) + "\n");
  write_file_atomic(csv_path, report.to_csv());
  m.outputs.push_back(digest(json_path));
  m.outputs.push_back(digest(csv_path));
  m.counts["predictions"] = report.count;
  m.extra["mean_em"] = report.mean_em;
  m.extra["mean_f1"] = report.mean_f1;
  finish(m, config, Stage::eval, start);
  return m;
}

StageManifest cmd_sweep(const PipelineConfig& config, const RunOptions& options) {
  const auto start = Clock::now();
  config.validate(Stage::sweep);
  if (config.mode != corpus::ContextMode::rag) throw ConfigError("the context-size sweep needs rag-mode tasks");
  fs::create_directories(config.output_dir);
  StageManifest m;
  const auto tasks = load_task_list(config, &m);
  auto store = load_store(config, &m);
  auto source = make_candidate_source(config, store, m);
  const std::size_t k = std::max(config.top_k, *std::max_element(config.sweep_sizes.begin(), config.sweep_sizes.end()));

  std::vector<evaluation::SweepTask> sweep_tasks;
  std::vector<std::string> no_gold;
  for (const auto& t : tasks) {
    if (!t.gold_answers) {
      no_gold.push_back(t.task_id);
      continue;
    }
    evaluation::SweepTask st{t.task_id, t.question, {}, *t.gold_answers};
    for (const auto& sc : source.candidates(t, k).ranked) st.passages.push_back(store.at(sc.chunk_id).text);
    sweep_tasks.push_back(std::move(st));
  }
  if (!no_gold.empty()) {
    std::string msg = "sweep tasks without gold answers:";
    for (const auto& id : no_gold) msg += " " + id;
    throw ConfigError(msg);
  }

  Gateways gateways(config, options);
  llm::Gateway& generator_gw = gateways.get(config.generator_backend);
  const auto tmpl = template_or(config.generator_template, templates::generator());
  auto extractor = make_extractor(config, gateways);

  evaluation::Answerer answerer = [&](std::span<const evaluation::AnswerQuery> queries) {
    std::vector<llm::ChatRequest> requests;
    requests.reserve(queries.size());
    for (const auto& q : queries) {
      auto req = synthesis::build_generator_prompt(q.question, q.passages, tmpl);
      req.temperature = config.temperature;
      req.max_tokens = config.generator_max_tokens;
      req.request_id = "sweep/" + std::to_string(q.passages.size()) + "/" + q.task_id;
      requests.push_back(std::move(req));
    }
    auto outcomes = generator_gw.chat_batch(requests, config.max_in_flight);
    std::vector<std::string> outputs;
    outputs.reserve(outcomes.size());
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
      if (!outcomes[i].ok()) spdlog::warn("sweep answer for {} failed: {}", queries[i].task_id, outcomes[i].error);
      outputs.push_back(outcomes[i].ok() ? outcomes[i].response->content : std::string());
    }
    return outputs;
  };

  evaluation::EvalConfig ec{retriever_tag(config), std::nullopt};
  const auto table = evaluation::sweep_context_sizes(sweep_tasks, config.sweep_sizes, answerer, extractor, ec);

  const fs::path csv_path = config.output_dir / kSweepCsv;
  const fs::path json_path = config.output_dir / kSweepJson;
  write_file_atomic(csv_path, table.to_csv());
  write_file_atomic(json_path, table.to_json().dump(2) + "\n");
  m.outputs.push_back(digest(csv_path));
  m.outputs.push_back(digest(json_path));
  m.counts["sizes"] = table.rows.size();
  m.counts["llm_requests"] = gateways.requests_sent();
  finish(m, config, Stage::sweep, start);
  return m;
}

}  // namespace ctxsynth::pipeline
