#pragma once

// Synthetic corpora, task files, mock scripts and configs for pipeline-level tests.

#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "support.hpp"

namespace fixture {

using nlohmann::json;
namespace fs = std::filesystem;

inline const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> words = [] {
    std::vector<std::string> w = {"the", "is", "of", "a", "and", "in", "to", "was", "item", "secret", "code",
                                  "what", "river", "stone", "north", "market", "winter", "garden", "signal"};
    for (int i = 0; i < 150; ++i) w.push_back("lex" + std::to_string(i));
    return w;
  }();
  return words;
}

inline std::string filler(std::mt19937_64& rng, std::size_t words) {
  std::string out;
  const auto& v = vocabulary();
  for (std::size_t i = 0; i < words; ++i) {
    if (i) out.push_back(' ');
    out += v[rng() % v.size()];
  }
  return out;
}

inline std::string question(std::size_t t) { return "What is the secret code of item " + std::to_string(t) + "?"; }
inline std::string code(std::size_t t) { return "zq" + std::to_string(t * 7 + 3); }
inline std::string answer_sentence(std::size_t t) {
  return "The secret code of item " + std::to_string(t) + " is " + code(t) + ".";
}

/// Ranker rules grading a passage a) when it holds the task's answer sentence.
inline json grader_rules(std::size_t tasks) {
  json rules = json::array();
  for (std::size_t t = 0; t < tasks; ++t) {
    rules.push_back({{"contains", {"decide if the given question", question(t), answer_sentence(t)}},
                     {"response", "The passage states the code directly.\nAnswer: a)"}});
  }
  rules.push_back({{"contains", "decide if the given question"},
                   {"response", "The passage does not mention the code.\nAnswer: e)"}});
  return rules;
}

/// Generator rules answering when the answer sentence is the first passage.
inline json generator_rules(std::size_t tasks, bool anywhere = false) {
  json rules = json::array();
  for (std::size_t t = 0; t < tasks; ++t) {
    const std::string needle = anywhere ? answer_sentence(t) : "Passage 1:\n" + answer_sentence(t);
    rules.push_back({{"contains", {question(t), needle}},
                     {"response", "Passage 1 says: " + answer_sentence(t) + "\nAnswer: " + code(t)}});
  }
  return rules;
}

inline json mock_script(std::size_t tasks, bool generator_anywhere = false) {
  // grader rules go first so generator rules never shadow ranker prompts
  json ordered = grader_rules(tasks);
  for (auto& r : generator_rules(tasks, generator_anywhere)) ordered.push_back(r);
  return {{"seed", 5}, {"rules", ordered}, {"default", "I could not find it.\nAnswer: No answer was found."}};
}

struct Paths {
  fs::path corpus;
  fs::path tasks;
  fs::path mock;
  fs::path config;
  fs::path out;
};

struct RagOptions {
  std::size_t tasks = 3;
  std::size_t passages = 120;  // total, including one answer passage per task
  std::uint64_t seed = 42;
  bool augment = true;
  json extra = json::object();  // merged into the config
};

/// BM25 fixture: each task's answer sits in one passage of a shared corpus.
inline Paths write_rag(const fs::path& dir, const RagOptions& o) {
  std::mt19937_64 rng(o.seed);
  Paths p{dir / "corpus.tsv", dir / "tasks.jsonl", dir / "mock.json", dir / "config.json", dir / "out"};
  std::vector<std::string> lines;
  for (std::size_t t = 0; t < o.tasks; ++t) lines.push_back(answer_sentence(t) + " " + filler(rng, 20));
  while (lines.size() < o.passages) lines.push_back(filler(rng, 25 + rng() % 40));
  std::shuffle(lines.begin(), lines.end(), rng);
  std::string corpus;
  for (std::size_t i = 0; i < lines.size(); ++i) corpus += "p" + std::to_string(i) + "\t" + lines[i] + "\tT\n";
  testing::write_text(p.corpus, corpus);

  std::string tasks;
  for (std::size_t t = 0; t < o.tasks; ++t) {
    tasks += json{{"task_id", "task" + std::to_string(t)}, {"question", question(t)}, {"chunk_ids", json::array()},
                  {"answers", {code(t)}}}
                 .dump() +
             "\n";
  }
  testing::write_text(p.tasks, tasks);
  testing::write_text(p.mock, mock_script(o.tasks).dump(2));

  json config = {{"corpus", {"corpus.tsv"}},
                 {"tasks", "tasks.jsonl"},
                 {"mode", "rag"},
                 {"output_dir", "out"},
                 {"seed", o.seed},
                 {"parallel_tasks", 3},
                 {"max_in_flight", 6},
                 {"retrieval", {{"retriever", "bm25"}, {"top_k", 100}}},
                 {"backend", {{"kind", "mock"}, {"script", "mock.json"}, {"base_delay_ms", 0}}},
                 {"augmentation", {{"enabled", o.augment}, {"window", 30}, {"stride", 20}}}};
  config.merge_patch(o.extra);
  testing::write_text(p.config, config.dump(2));
  return p;
}

/// Imported-ranking fixture for the context-size sweep: `candidates` ids per task, with the
/// answer passage at `answer_index` for every task where `planted(t)` holds.
template <typename Planted>
Paths write_sweep(const fs::path& dir, std::size_t tasks, std::size_t candidates, std::size_t answer_index,
                  Planted planted, std::vector<std::size_t> sizes = {5, 10, 20, 50, 100}) {
  std::mt19937_64 rng(9);
  Paths p{dir / "corpus.jsonl", dir / "tasks.jsonl", dir / "mock.json", dir / "config.json", dir / "out"};
  std::string corpus;
  std::string task_lines;
  for (std::size_t t = 0; t < tasks; ++t) {
    json ids = json::array();
    for (std::size_t i = 0; i < candidates; ++i) {
      const std::string id = "t" + std::to_string(t) + "p" + std::to_string(i);
      const bool answer = planted(t) && i == answer_index;
      corpus += json{{"id", id}, {"text", answer ? answer_sentence(t) : filler(rng, 15)}}.dump() + "\n";
      ids.push_back(id);
    }
    task_lines += json{{"task_id", "task" + std::to_string(t)}, {"question", question(t)}, {"chunk_ids", ids},
                       {"answers", {code(t)}}}
                      .dump() +
                  "\n";
  }
  testing::write_text(p.corpus, corpus);
  testing::write_text(p.tasks, task_lines);
  testing::write_text(p.mock, mock_script(tasks, /*generator_anywhere=*/true).dump(2));
  json config = {{"corpus", {"corpus.jsonl"}},
                 {"tasks", "tasks.jsonl"},
                 {"output_dir", "out"},
                 {"retrieval", {{"retriever", "imported"}, {"top_k", candidates}}},
                 {"backend", {{"kind", "mock"}, {"script", "mock.json"}}},
                 {"eval", {{"sweep_sizes", sizes}}}};
  testing::write_text(p.config, config.dump(2));
  return p;
}

}  // namespace fixture
