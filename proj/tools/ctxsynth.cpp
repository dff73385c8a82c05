// ctxsynth command-line driver.
#include <csignal>
#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "ctxsynth/hashing.hpp"
#include "ctxsynth/http_backend.hpp"
#include "ctxsynth/mock_backend.hpp"
#include "ctxsynth/pipeline.hpp"

namespace cp = ctxsynth::pipeline;

namespace {

struct Overrides {
  std::string config_path;
  std::string output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> limit;
  std::string predictions;
  std::vector<std::size_t> sizes;
  bool no_augment = false;
  std::string filter;
};

cp::PipelineConfig load_config(const Overrides& o) {
  auto config = cp::PipelineConfig::load(o.config_path);
  if (!o.output_dir.empty()) config.output_dir = o.output_dir;
  if (o.seed) {
    config.seed = *o.seed;
    config.shuffle.seed = *o.seed;
  }
  if (o.limit) config.task_limit = *o.limit;
  if (!o.predictions.empty()) config.predictions = o.predictions;
  if (!o.sizes.empty()) config.sweep_sizes = o.sizes;
  if (o.no_augment) config.augment = false;
  if (!o.filter.empty()) config.filter = ctxsynth::dataset::parse_filter_policy(o.filter);
  return config;
}

void print_summary(const cp::StageManifest& m) {
  std::cout << m.stage << ":";
  for (const auto& [k, v] : m.counts) std::cout << " " << k << "=" << v;
  std::cout << " (" << m.wall_seconds << "s)\n";
  for (const auto& f : m.failures) std::cout << "  failed " << f << "\n";
}

template <typename Fn>
int run_stage(cp::Stage stage, const Overrides& o, Fn&& fn) {
  std::optional<cp::PipelineConfig> config;
  try {
    config = load_config(o);
    auto m = fn(*config);
    print_summary(m);
    return m.ok() ? 0 : 1;
  } catch (const std::exception& e) {
    spdlog::error("{} failed: {}", cp::to_string(stage), e.what());
    if (config) {
      cp::StageManifest m;
      m.stage = std::string(cp::to_string(stage));
      m.fatal_errors = 1;
      m.failures.push_back(e.what());
      try {
        std::filesystem::create_directories(config->output_dir);
        ctxsynth::write_file_atomic(cp::manifest_path(*config, stage), m.to_json().dump(2) + "\n");
      } catch (const std::exception&) {
      }
    }
    return 1;
  }
}

ctxsynth::llm::ChatServer* g_server = nullptr;

extern "C" void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retrieval-grounded chain-of-thought data synthesis"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  Overrides o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", o.config_path, "Pipeline config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("-o,--output-dir", o.output_dir, "Override output directory");
    sub->add_option("--seed", o.seed, "Override the global seed");
  };

  auto* ingest = app.add_subcommand("ingest", "Build the passage store and BM25 index");
  add_common(ingest);

  auto* synth = app.add_subcommand("synthesize", "Rank, pack and generate chain-of-thought answers");
  add_common(synth);
  synth->add_option("--limit", o.limit, "Process at most this many tasks");

  auto* assemble = app.add_subcommand("assemble", "Build the training dataset from synthesis output");
  add_common(assemble);
  assemble->add_option("--limit", o.limit, "Process at most this many tasks");
  assemble->add_flag("--no-augment", o.no_augment, "Skip the shuffled copy");
  assemble->add_option("--filter", o.filter, "keep-all | drop-no-answer | drop-unparsed");

  auto* eval = app.add_subcommand("eval", "Score a predictions file");
  add_common(eval);
  eval->add_option("--predictions", o.predictions, "Predictions JSONL");

  auto* sweep = app.add_subcommand("sweep", "EM/F1 across context sizes");
  add_common(sweep);
  sweep->add_option("--limit", o.limit, "Process at most this many tasks");
  sweep->add_option("--sizes", o.sizes, "Context sizes")->delimiter(',');

  std::string script;
  std::string host = "127.0.0.1";
  int port = 8089;
  auto* serve = app.add_subcommand("mock-serve", "Serve a mock script over the chat-completions protocol");
  serve->add_option("--script", script, "Mock script (JSON)")->required()->check(CLI::ExistingFile);
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  if (*ingest) return run_stage(cp::Stage::ingest, o, [](const auto& c) { return cp::cmd_ingest(c); });
  if (*synth) return run_stage(cp::Stage::synthesize, o, [](const auto& c) { return cp::cmd_synthesize(c); });
  if (*assemble) return run_stage(cp::Stage::assemble, o, [](const auto& c) { return cp::cmd_assemble(c); });
  if (*eval) return run_stage(cp::Stage::eval, o, [](const auto& c) { return cp::cmd_eval(c); });
  if (*sweep) return run_stage(cp::Stage::sweep, o, [](const auto& c) { return cp::cmd_sweep(c); });
  if (*serve) {
    try {
      auto backend = std::make_shared<ctxsynth::llm::MockBackend>(ctxsynth::llm::MockScript::load(script));
      ctxsynth::llm::ChatServer server(backend);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      spdlog::info("mock backend listening on {}:{}", host, port);
      server.run(host, port);
      return 0;
    } catch (const std::exception& e) {
      spdlog::error("mock-serve failed: {}", e.what());
      return 1;
    }
  }
  return 1;
}
