#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctxsynth/corpus.hpp"
#include "ctxsynth/llm.hpp"
#include "ctxsynth/retrieval.hpp"
#include "ctxsynth/templates.hpp"

namespace ctxsynth::ranking {

/// Options a) through e) of the grading rubric; A is most helpful.
enum class Grade { A, B, C, D, E };

/// a=4 ... e=0.
constexpr int ordinal(Grade g) noexcept { return 4 - static_cast<int>(g); }
constexpr char letter(Grade g) noexcept { return static_cast<char>('a' + static_cast<int>(g)); }
std::optional<Grade> grade_from_letter(char c) noexcept;

struct RelevanceGrade {
  Grade grade = Grade::E;
  std::string raw;  // LM text the grade was parsed from (empty when not graded)
};

struct RankedChunk {
  std::string chunk_id;
  RelevanceGrade grade;
  std::size_t retrieval_rank = 0;
  std::size_t final_rank = 0;
  bool graded = false;  // false when the LM was not consulted or failed
};

/// A candidate to grade. `text` must outlive the ranking call.
struct Candidate {
  std::string chunk_id;
  std::string_view text;
  std::size_t retrieval_rank = 0;
};

struct RankerOptions {
  /// Grade only the first N candidates; the rest keep retrieval order after all graded ones.
  std::optional<std::size_t> grade_limit;
  std::size_t max_in_flight = 8;
  double temperature = 0.0;
  int max_tokens = 512;
};

llm::ChatRequest build_ranker_prompt(std::string_view question, std::string_view chunk_text,
                                     const templates::PromptTemplate& tmpl = templates::ranker());

/// Scans lines from the end for `Answer: <letter>)`, tolerating case, brackets, periods and
/// surrounding whitespace. nullopt means the text could not be parsed.
std::optional<Grade> parse_grade(std::string_view lm_text);

/// Stable sort by (grade best-first, retrieval_rank ascending); assigns final_rank.
void order_by_grade(std::vector<RankedChunk>& chunks);

/// Grades each candidate with one LM call, retries an unparseable reply once, and falls back
/// to grade E (with a warning) on parse or LM failure. Returns chunks in final-rank order.
std::vector<RankedChunk> rank_chunks(std::string_view question, std::span<const Candidate> candidates,
                                     llm::Gateway& gateway, const RankerOptions& options = {},
                                     std::string_view request_prefix = "rank",
                                     const templates::PromptTemplate& tmpl = templates::ranker());

/// Convenience overload resolving chunk text from a store.
std::vector<RankedChunk> rank_chunks(std::string_view question, const retrieval::RetrievalResult& candidates,
                                     const corpus::PassageStore& store, llm::Gateway& gateway,
                                     const RankerOptions& options = {},
                                     const templates::PromptTemplate& tmpl = templates::ranker());

}  // namespace ctxsynth::ranking
