#include <deque>
#include <doctest.h>

#include <random>
#include <regex>

#include "ctxsynth/ranker.hpp"
#include "support.hpp"

using namespace ctxsynth;
using namespace ctxsynth::ranking;
using nlohmann::json;

namespace {

// Candidate holds views, so the texts are kept alive for the whole test binary.
std::vector<Candidate> candidates_of(const std::vector<std::string>& texts) {
  static std::deque<std::string> storage;
  std::vector<Candidate> out;
  for (std::size_t i = 0; i < texts.size(); ++i) out.push_back({"chunk" + std::to_string(i), storage.emplace_back(texts[i]), i});
  return out;
}

std::vector<std::string> ids(const std::vector<RankedChunk>& ranked) {
  std::vector<std::string> out;
  for (const auto& r : ranked) out.push_back(r.chunk_id);
  return out;
}

}  // namespace

TEST_CASE("grade mapping") {
  CHECK(ordinal(Grade::A) == 4);
  CHECK(ordinal(Grade::E) == 0);
  CHECK(letter(Grade::C) == 'c');
  CHECK(grade_from_letter('B') == Grade::B);
  CHECK_FALSE(grade_from_letter('f').has_value());
}

TEST_CASE("ranker prompt contains the option list and is pure") {
  auto req = build_ranker_prompt("Who wrote Emma?", "Emma is a novel by Jane Austen.");
  REQUIRE(req.messages.size() == 1);
  CHECK(req.messages[0].role == llm::Role::user);
  const auto& body = req.messages[0].content;
  for (const char* opt : {"a) ", "b) ", "c) ", "d) ", "e) "}) CHECK(body.find(opt) != std::string::npos);
  CHECK(body == build_ranker_prompt("Who wrote Emma?", "Emma is a novel by Jane Austen.").messages[0].content);
  CHECK_THROWS(build_ranker_prompt("", "x"));
  CHECK_THROWS(build_ranker_prompt("q", ""));
}

TEST_CASE("ranker prompt round trip recovers inputs") {
  const std::string q = "Where is {the} tower?";
  const std::string t = "It stands in Paris.\nSecond line.";
  const auto body = build_ranker_prompt(q, t).messages[0].content;
  // Turn the template into a regex with capture groups in place of the placeholders.
  std::string pattern;
  const std::string& tmpl = templates::ranker().body();
  std::vector<std::string> order;
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i);
      order.push_back(tmpl.substr(i + 1, close - i - 1));
      pattern += "([\\s\\S]*)";
      i = close + 1;
      continue;
    }
    if (std::string("\\^$.|?*+()[]{}").find(tmpl[i]) != std::string::npos) pattern.push_back('\\');
    pattern.push_back(tmpl[i]);
    ++i;
  }
  std::smatch m;
  REQUIRE(std::regex_match(body, m, std::regex(pattern)));
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (order[k] == "question") CHECK(m[k + 1].str() == q);
    if (order[k] == "passages") CHECK(m[k + 1].str() == t);
  }
}

TEST_CASE("parse_grade") {
  CHECK(parse_grade("The passage names him.\nAnswer: a)") == Grade::A);
  CHECK(parse_grade("Answer: b)\nmore thought\nAnswer: d).") == Grade::D);
  CHECK_FALSE(parse_grade("I cannot decide.").has_value());
  CHECK(parse_grade("answer: C") == Grade::C);
  CHECK(parse_grade("  **Answer:** [e)]  ") == Grade::E);
  CHECK(parse_grade("Answer: (b)") == Grade::B);
  CHECK(parse_grade("ANSWER:a.") == Grade::A);
  CHECK(parse_grade("Answer: a)\nAnswer: maybe") == Grade::A);
  CHECK_FALSE(parse_grade("Answer: f)").has_value());
  CHECK_FALSE(parse_grade("Answer: abc").has_value());
  CHECK_FALSE(parse_grade("").has_value());
}

TEST_CASE("order_by_grade is stable over retrieval rank") {
  std::vector<RankedChunk> v(3);
  const Grade gs[] = {Grade::B, Grade::A, Grade::A};
  for (std::size_t i = 0; i < 3; ++i) {
    v[i].chunk_id = "chunk" + std::to_string(i);
    v[i].retrieval_rank = i;
    v[i].grade.grade = gs[i];
    v[i].graded = true;
  }
  order_by_grade(v);
  CHECK(ids(v) == std::vector<std::string>{"chunk1", "chunk2", "chunk0"});
  for (std::size_t i = 0; i < 3; ++i) CHECK(v[i].final_rank == i);
}

TEST_CASE("rank_chunks: grades B, A, A") {
  auto mock = testing::mock_from({{"rules",
                                   {{{"contains", "text zero"}, {"response", "Answer: b)"}},
                                    {{"contains", "text one"}, {"response", "Answer: a)"}},
                                    {{"contains", "text two"}, {"response", "Answer: a)"}}}}});
  llm::Gateway gw(mock, testing::no_sleep());
  auto cands = candidates_of({"text zero", "text one", "text two"});
  auto ranked = rank_chunks("q?", cands, gw);
  CHECK(ids(ranked) == std::vector<std::string>{"chunk1", "chunk2", "chunk0"});
  CHECK(ranked[2].grade.grade == Grade::B);
  CHECK(ranked[0].grade.raw == "Answer: a)");
  CHECK(mock->calls() == 3);
}

TEST_CASE("rank_chunks: equal grades keep retrieval order") {
  auto mock = testing::mock_from({{"default", "Answer: c)"}});
  llm::Gateway gw(mock, testing::no_sleep());
  auto cands = candidates_of({"p0", "p1", "p2", "p3", "p4"});
  auto ranked = rank_chunks("q?", cands, gw);
  CHECK(ids(ranked) == std::vector<std::string>{"chunk0", "chunk1", "chunk2", "chunk3", "chunk4"});
}

TEST_CASE("rank_chunks: the single A chunk goes first; failures become E") {
  auto mock = testing::mock_from(
      {{"rules",
        {{{"contains", "golden"}, {"response", "It answers.\nAnswer: a)"}},
         {{"contains", "mumble"}, {"response", "no idea"}},
         {{"contains", "broken"}, {"response", "x"}, {"fail", {{"status", 500}}}},
         {{"contains", "decide if"}, {"response", "Answer: d)"}}}}});
  llm::Gateway gw(mock, testing::no_sleep(2));
  auto cands = candidates_of({"mumble", "broken", "plain", "golden", "plain two"});
  auto ranked = rank_chunks("q?", cands, gw);
  CHECK(ids(ranked) == std::vector<std::string>{"chunk3", "chunk2", "chunk4", "chunk0", "chunk1"});
  CHECK(ranked[3].grade.grade == Grade::E);  // unparseable twice
  CHECK(ranked[4].grade.grade == Grade::E);  // LM failure
  // 5 first-pass calls, 1 extra attempt for the 500, 1 parse retry
  CHECK(mock->calls() == 7);
  auto log = mock->request_log();
  CHECK(std::count(log.begin(), log.end(), "rank/chunk0/retry") == 1);
}

TEST_CASE("rank_chunks: grade_limit leaves the tail in retrieval order") {
  auto mock = testing::mock_from({{"rules", {{{"contains", "p1"}, {"response", "Answer: a)"}}}},
                                  {"default", "Answer: e)"}});
  llm::Gateway gw(mock, testing::no_sleep());
  auto cands = candidates_of({"p0", "p1", "p2", "p3"});
  RankerOptions opts;
  opts.grade_limit = 2;
  auto ranked = rank_chunks("q?", cands, gw, opts);
  CHECK(ids(ranked) == std::vector<std::string>{"chunk1", "chunk0", "chunk2", "chunk3"});
  CHECK(mock->calls() == 2);
  CHECK_FALSE(ranked[2].graded);
}

TEST_CASE("rank_chunks properties: permutation, stability, answer-bearing first") {
  std::mt19937_64 rng(21);
  auto mock = testing::mock_from({{"rules", testing::contains_answer_grader("NEEDLE")}});
  llm::Gateway gw(mock, testing::no_sleep());
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng() % 25;
    std::vector<std::string> texts;
    for (std::size_t i = 0; i < n; ++i) {
      texts.push_back("passage " + std::to_string(i) + (rng() % 4 == 0 ? " NEEDLE" : ""));
    }
    auto cands = candidates_of(texts);
    auto ranked = rank_chunks("q?", cands, gw);
    REQUIRE(ranked.size() == n);
    std::vector<std::size_t> seen;
    bool in_tail = false;
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(ranked[i].final_rank == i);
      seen.push_back(ranked[i].retrieval_rank);
      const bool bearing = texts[ranked[i].retrieval_rank].find("NEEDLE") != std::string::npos;
      if (!bearing) in_tail = true;
      if (in_tail) CHECK_FALSE(bearing);
      if (i > 0 && ranked[i].grade.grade == ranked[i - 1].grade.grade) {
        CHECK(ranked[i].retrieval_rank > ranked[i - 1].retrieval_rank);
      }
    }
    std::sort(seen.begin(), seen.end());
    for (std::size_t i = 0; i < n; ++i) CHECK(seen[i] == i);
  }
}

TEST_CASE("rank_chunks rejects empty candidates") {
  auto mock = testing::mock_from(json::object());
  llm::Gateway gw(mock, testing::no_sleep());
  CHECK_THROWS(rank_chunks("q?", std::span<const Candidate>{}, gw));
}
