#include <doctest.h>

#include "ctxsynth/hashing.hpp"
#include "ctxsynth/pipeline.hpp"
#include "fixture.hpp"
#include "support.hpp"

using namespace ctxsynth;
using namespace ctxsynth::pipeline;
using nlohmann::json;

namespace {

/// Builds mock backends from config and remembers them for call counting.
struct CountingFactory {
  std::vector<std::shared_ptr<llm::MockBackend>> made;

  RunOptions options() {
    RunOptions o;
    o.backend_factory = [this](const BackendConfig& c) -> std::shared_ptr<llm::Backend> {
      auto m = std::make_shared<llm::MockBackend>(llm::MockScript::load(c.mock_script));
      made.push_back(m);
      return m;
    };
    o.sleep = [](std::chrono::milliseconds) {};
    return o;
  }
  std::size_t calls() const {
    std::size_t n = 0;
    for (const auto& m : made) n += m->calls();
    return n;
  }
};

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::istringstream in(testing::read_text(p));
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("config parsing") {
  testing::TempDir dir;
  auto paths = fixture::write_rag(dir.path(), {});
  auto c = PipelineConfig::load(paths.config);
  CHECK(c.corpus == std::vector<fs::path>{dir / "corpus.tsv"});
  CHECK(c.tasks == dir / "tasks.jsonl");
  CHECK(c.output_dir == dir / "out");
  CHECK(c.top_k == 100);
  CHECK(c.budget_tokens == 6000);
  CHECK(c.token_scale == 1.35);
  CHECK(c.chunk_size_words == 100);
  CHECK(c.shuffle.window == 30);
  CHECK(c.shuffle.stride == 20);
  CHECK(c.shuffle.seed == 42);
  CHECK(c.sweep_sizes == std::vector<std::size_t>{5, 10, 20, 50, 100});
  CHECK(c.temperature == 0.0);
  CHECK(c.ranker_backend.key() == c.generator_backend.key());
  CHECK_FALSE(c.extractor_backend.has_value());
  CHECK_NOTHROW(c.validate(Stage::ingest));

  CHECK_THROWS_AS(PipelineConfig::from_json({{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_json({{"retrieval", {{"top_k", 0}}}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_json({{"augmentation", {{"window", 0}}}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_json({{"backend", {{"kind", "carrier-pigeon"}}}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_json({{"max_in_flight", 0}}), ConfigError);

  auto with_extractor = PipelineConfig::from_json(
      {{"backend", {{"kind", "mock"}, {"script", "m.json"}}}, {"eval", {{"extractor", {{"template", "x.txt"}}}}}},
      "/base");
  REQUIRE(with_extractor.extractor_backend.has_value());
  CHECK(with_extractor.extractor_backend->mock_script == fs::path("/base/m.json"));
  CHECK(with_extractor.extractor_template == fs::path("/base/x.txt"));
}

TEST_CASE("ingest: manifest counts, idempotent hashes, bad path") {
  testing::TempDir dir;
  auto paths = fixture::write_rag(dir.path(), {.tasks = 3, .passages = 40});
  auto config = PipelineConfig::load(paths.config);
  auto m1 = cmd_ingest(config);
  CHECK(m1.ok());
  CHECK(m1.counts.at("passages") == 40);
  CHECK(m1.counts.at("corpus_lines") == 40);
  REQUIRE(m1.outputs.size() == 1);
  CHECK(m1.outputs[0].sha256 == sha256_file(paths.out / kIndexFile));
  auto m2 = cmd_ingest(config);
  CHECK(m2.outputs[0].sha256 == m1.outputs[0].sha256);
  CHECK(m2.inputs[0].sha256 == m1.inputs[0].sha256);
  auto on_disk = StageManifest::from_json(json::parse(testing::read_text(manifest_path(config, Stage::ingest))));
  CHECK(on_disk.counts == m2.counts);

  testing::TempDir other;
  auto bad = config;
  bad.corpus = {dir / "missing.tsv"};
  bad.output_dir = other / "never";
  CHECK_THROWS_AS(cmd_ingest(bad), ConfigError);
  CHECK_FALSE(fs::exists(other / "never"));
}

TEST_CASE("synthesize: three tasks, 100 candidates, answers found") {
  testing::TempDir dir;
  auto paths = fixture::write_rag(dir.path(), {.tasks = 3, .passages = 150});
  auto config = PipelineConfig::load(paths.config);
  cmd_ingest(config);
  CountingFactory f;
  auto m = cmd_synthesize(config, f.options());
  CHECK(m.ok());
  CHECK(m.counts.at("completed") == 3);
  CHECK(m.counts.at("failures") == 0);
  CHECK(m.counts.at("no_answer") == 0);
  CHECK(m.counts.at("parse_failures") == 0);
  REQUIRE(f.made.size() == 1);  // ranker and generator share one backend

  auto records = lines_of(paths.out / kSynthesisFile);
  REQUIRE(records.size() == 3);
  for (std::size_t t = 0; t < 3; ++t) {
    auto r = json::parse(records[t]);
    CHECK(r["task_id"] == "task" + std::to_string(t));
    CHECK(r["final_answer"] == fixture::code(t));
    CHECK(r["no_answer_flag"] == false);
    CHECK_FALSE(r["selected_chunk_ids"].empty());
  }
  for (const auto& line : lines_of(paths.out / kContextsFile)) CHECK(json::parse(line)["chunk_ids"].size() == 100);
  CHECK(f.calls() == 3 * 100 + 3);
  CHECK(fs::exists(paths.out / kAuditFile));
}

TEST_CASE("synthesize requires ingest for bm25") {
  testing::TempDir dir;
  auto paths = fixture::write_rag(dir.path(), {});
  auto config = PipelineConfig::load(paths.config);
  CountingFactory f;
  CHECK_THROWS_AS(cmd_synthesize(config, f.options()), ConfigError);
}

TEST_CASE("synthesize aborts when a backend is unreachable") {
  testing::TempDir dir;
  auto paths = fixture::write_rag(dir.path(), {});
  auto config = PipelineConfig::load(paths.config);
  cmd_ingest(config);
  struct Dead final : llm::Backend {
    llm::ChatResponse complete(const llm::ChatRequest&) override { throw llm::BackendError("down", true); }
    void probe() override { throw llm::BackendError("connection refused", true); }
    std::string describe() const override { return "dead"; }
  };
  RunOptions o;
  o.backend_factory = [](const BackendConfig&) { return std::make_shared<Dead>(); };
  CHECK_THROWS_WITH_AS(cmd_synthesize(config, o), doctest::Contains("unreachable"), Error);
  CHECK_FALSE(fs::exists(paths.out / kSynthesisFile));
}

TEST_CASE("per-task generator failures are recorded, not fatal") {
  testing::TempDir dir;
  auto paths = fixture::write_rag(dir.path(), {.tasks = 3});
  auto script = json::parse(testing::read_text(paths.mock));
  script["rules"].insert(script["rules"].begin(),
                         json{{"contains", {"Think carefully", fixture::question(1)}},
                              {"response", "x"},
                              {"fail", {{"status", 400}}}});
  testing::write_text(paths.mock, script.dump());
  auto config = PipelineConfig::load(paths.config);
  cmd_ingest(config);
  CountingFactory f;
  auto m = cmd_synthesize(config, f.options());
  CHECK(m.ok());
  CHECK(m.counts.at("completed") == 2);
  CHECK(m.counts.at("failures") == 1);
  REQUIRE(m.failures.size() == 1);
  CHECK(m.failures[0].rfind("task1:", 0) == 0);
}

TEST_CASE("resume skips finished tasks and reproduces the same bytes") {
  testing::TempDir dir;
  auto paths = fixture::write_rag(dir.path(), {.tasks = 5, .passages = 80});
  auto config = PipelineConfig::load(paths.config);
  cmd_ingest(config);
  CountingFactory full;
  cmd_synthesize(config, full.options());
  const auto synthesis_bytes = testing::read_text(paths.out / kSynthesisFile);
  const auto contexts_bytes = testing::read_text(paths.out / kContextsFile);
  const std::size_t per_task = full.calls() / 5;

  // Simulate a kill after two tasks: keep two progress lines plus a torn third.
  auto progress = lines_of(paths.out / kProgressFile);
  REQUIRE(progress.size() == 5);
  testing::write_text(paths.out / kProgressFile,
                      progress[0] + "\n" + progress[3] + "\n" + progress[1].substr(0, progress[1].size() / 2));
  fs::remove(paths.out / kSynthesisFile);
  fs::remove(paths.out / kContextsFile);

  CountingFactory resumed;
  auto m = cmd_synthesize(config, resumed.options());
  CHECK(m.counts.at("resumed") == 2);
  CHECK(m.counts.at("synthesized") == 3);
  CHECK(resumed.calls() == 3 * per_task);
  for (const auto& id : resumed.made[0]->request_log()) {
    CHECK(id.find(json::parse(progress[0])["task_id"].get<std::string>() + "/") == std::string::npos);
  }
  CHECK(testing::read_text(paths.out / kSynthesisFile) == synthesis_bytes);
  CHECK(testing::read_text(paths.out / kContextsFile) == contexts_bytes);

  CountingFactory again;
  cmd_synthesize(config, again.options());
  CHECK(again.calls() == 0);
}

TEST_CASE("assemble: record counts and document-mode error") {
  testing::TempDir dir;
  auto paths = fixture::write_rag(dir.path(), {.tasks = 3});
  auto config = PipelineConfig::load(paths.config);
  cmd_ingest(config);
  CountingFactory f;
  cmd_synthesize(config, f.options());

  auto m = cmd_assemble(config);
  CHECK(m.ok());
  CHECK(m.counts.at("records") == 6);
  auto lines = lines_of(paths.out / kDatasetFile);
  REQUIRE(lines.size() == 6);
  CHECK(json::parse(lines[0])["record_id"] == "task0:orig");
  CHECK(json::parse(lines[1])["record_id"] == "task0:shuf");
  CHECK(json::parse(lines[1])["meta"]["augmentation"] == "shuffled");
  // every candidate passage, not only the packed subset, reaches the training prompt
  const auto user = json::parse(lines[0])["messages"][0]["content"].get<std::string>();
  CHECK(user.find("Passage 100:") != std::string::npos);

  auto off = config;
  off.augment = false;
  CHECK(cmd_assemble(off).counts.at("records") == 3);
  CHECK(json::parse(lines_of(paths.out / kDatasetFile)[0])["meta"]["augmentation"] == "none");

  auto doc = config;
  doc.mode = corpus::ContextMode::document;
  CHECK_THROWS_AS(cmd_assemble(doc), ConfigError);
}

TEST_CASE("document mode end to end") {
  testing::TempDir dir;
  std::mt19937_64 rng(1);
  std::string tasks;
  for (int t = 0; t < 2; ++t) {
    std::string book = fixture::filler(rng, 130) + " " + fixture::answer_sentence(t) + " " + fixture::filler(rng, 90);
    tasks += json{{"task_id", "book" + std::to_string(t)}, {"question", fixture::question(t)}, {"text", book},
                  {"answers", {fixture::code(t)}}}
                 .dump() +
             "\n";
  }
  testing::write_text(dir / "tasks.jsonl", tasks);
  testing::write_text(dir / "mock.json", fixture::mock_script(2, /*generator_anywhere=*/true).dump());
  testing::write_text(dir / "config.json",
                      json{{"tasks", "tasks.jsonl"},
                           {"mode", "document"},
                           {"chunk_size_words", 50},
                           {"backend", {{"kind", "mock"}, {"script", "mock.json"}}},
                           {"augmentation", {{"enabled", false}}}}
                          .dump());
  auto config = PipelineConfig::load(dir / "config.json");
  CountingFactory f;
  auto m = cmd_synthesize(config, f.options());
  CHECK(m.counts.at("completed") == 2);
  CHECK(m.counts.at("no_answer") == 0);
  CHECK(f.calls() == 2 * 5 + 2);  // 226 words in 50-word chunks
  auto a = cmd_assemble(config);
  CHECK(a.counts.at("records") == 2);
  auto rec = json::parse(lines_of(config.output_dir / kDatasetFile)[0]);
  CHECK(rec["messages"][0]["content"].get<std::string>().find(fixture::answer_sentence(0)) != std::string::npos);
}

TEST_CASE("eval: reports and validation") {
  testing::TempDir dir;
  auto paths = fixture::write_rag(dir.path(), {.tasks = 3});
  auto config = PipelineConfig::load(paths.config);
  CHECK_THROWS_AS(cmd_eval(config), ConfigError);
  config.predictions = dir / "missing.jsonl";
  CHECK_THROWS_AS(cmd_eval(config), ConfigError);

  testing::write_text(dir / "pred.jsonl",
                      json{{"task_id", "task0"}, {"raw_output", "Answer: " + fixture::code(0)}}.dump() + "\n" +
                          json{{"task_id", "task1"}, {"raw_output", "Answer: wrong"}}.dump() + "\n");
  config.predictions = dir / "pred.jsonl";
  auto m = cmd_eval(config);
  CHECK(m.ok());
  auto report = json::parse(testing::read_text(paths.out / kReportJson));
  CHECK(report["mean_em"] == 0.5);
  CHECK(report["config"]["retriever"] == "bm25");
  CHECK(testing::read_text(paths.out / kReportCsv) == "task_id,em,f1\ntask0,1,1.000000\ntask1,0,0.000000\n");
}

TEST_CASE("sweep over imported rankings") {
  testing::TempDir dir;
  auto paths = fixture::write_sweep(dir.path(), 4, 20, 6, [](std::size_t t) { return t % 2 == 0; }, {5, 10, 20});
  auto config = PipelineConfig::load(paths.config);
  CountingFactory f;
  auto m = cmd_sweep(config, f.options());
  CHECK(m.ok());
  CHECK(testing::read_text(paths.out / kSweepCsv) ==
        "size,em,f1,n\n5,0.000000,0.000000,4\n10,0.500000,0.500000,4\n20,0.500000,0.500000,4\n");
  CHECK(f.calls() == 12);
}
