#include "ctxsynth/ranker.hpp"

#include <algorithm>
#include <regex>

#include <spdlog/spdlog.h>

namespace ctxsynth::ranking {

std::optional<Grade> grade_from_letter(char c) noexcept {
  c = text::to_lower(c);
  if (c < 'a' || c > 'e') return std::nullopt;
  return static_cast<Grade>(c - 'a');
}

llm::ChatRequest build_ranker_prompt(std::string_view question, std::string_view chunk_text,
                                     const templates::PromptTemplate& tmpl) {
  if (text::trim(question).empty() || text::trim(chunk_text).empty()) {
    throw Error("ranker prompt needs a nonempty question and passage");
  }
  llm::ChatRequest request;
  request.messages.push_back(
      {llm::Role::user, tmpl.render({{"question", std::string(question)}, {"passages", std::string(chunk_text)}})});
  return request;
}

std::optional<Grade> parse_grade(std::string_view lm_text) {
  // e.g. "Answer: a)", "**Answer:** [B)].", "answer: (c)", "Answer: d."
  static const std::regex kLine(R"(^[\s*_`>#-]*answer[\s*_]*:[\s*_]*[\[\(]?\s*([a-e])\s*(\)|\]|\.|$))",
                                std::regex::icase);
  auto lines = text::split_lines(lm_text);
  for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
    const std::string line(text::trim(*it));
    std::smatch m;
    if (std::regex_search(line, m, kLine)) return grade_from_letter(m.str(1)[0]);
  }
  return std::nullopt;
}

void order_by_grade(std::vector<RankedChunk>& chunks) {
  std::stable_sort(chunks.begin(), chunks.end(), [](const RankedChunk& a, const RankedChunk& b) {
    if (a.graded != b.graded) return a.graded;
    if (ordinal(a.grade.grade) != ordinal(b.grade.grade)) return ordinal(a.grade.grade) > ordinal(b.grade.grade);
    return a.retrieval_rank < b.retrieval_rank;
  });
  for (std::size_t i = 0; i < chunks.size(); ++i) chunks[i].final_rank = i;
}

std::vector<RankedChunk> rank_chunks(std::string_view question, std::span<const Candidate> candidates,
                                     llm::Gateway& gateway, const RankerOptions& options,
                                     std::string_view request_prefix, const templates::PromptTemplate& tmpl) {
  if (candidates.empty()) throw Error("rank_chunks needs at least one candidate");
  const std::size_t n_graded = std::min(candidates.size(), options.grade_limit.value_or(candidates.size()));

  std::vector<RankedChunk> out(candidates.size());
  std::vector<llm::ChatRequest> requests;
  requests.reserve(n_graded);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    out[i].chunk_id = candidates[i].chunk_id;
    out[i].retrieval_rank = candidates[i].retrieval_rank;
    if (i < n_graded) {
      auto req = build_ranker_prompt(question, candidates[i].text, tmpl);
      req.temperature = options.temperature;
      req.max_tokens = options.max_tokens;
      req.request_id = std::string(request_prefix) + "/" + candidates[i].chunk_id;
      requests.push_back(std::move(req));
    }
  }

  auto outcomes = gateway.chat_batch(requests, options.max_in_flight);

  std::vector<std::size_t> retry;
  for (std::size_t i = 0; i < n_graded; ++i) {
    if (!outcomes[i].ok()) {
      spdlog::warn("grading {} failed, assigning grade e: {}", requests[i].request_id, outcomes[i].error);
      continue;
    }
    out[i].grade.raw = outcomes[i].response->content;
    if (auto g = parse_grade(out[i].grade.raw)) {
      out[i].grade.grade = *g;
      out[i].graded = true;
    } else {
      retry.push_back(i);
    }
  }

  if (!retry.empty()) {
    std::vector<llm::ChatRequest> again;
    again.reserve(retry.size());
    for (std::size_t i : retry) {
      again.push_back(requests[i]);
      again.back().request_id += "/retry";
    }
    auto second = gateway.chat_batch(again, options.max_in_flight);
    for (std::size_t k = 0; k < retry.size(); ++k) {
      RankedChunk& rc = out[retry[k]];
      if (second[k].ok()) {
        rc.grade.raw = second[k].response->content;
        if (auto g = parse_grade(rc.grade.raw)) {
          rc.grade.grade = *g;
          rc.graded = true;
          continue;
        }
      }
      spdlog::warn("grade for {} unparseable after retry, assigning grade e", again[k].request_id);
      rc.grade.grade = Grade::E;
      rc.graded = true;
    }
  }

  // Failed LM calls count as graded E so they sort with other E chunks by retrieval rank.
  for (std::size_t i = 0; i < n_graded; ++i) out[i].graded = true;

  order_by_grade(out);
  return out;
}

std::vector<RankedChunk> rank_chunks(std::string_view question, const retrieval::RetrievalResult& candidates,
                                     const corpus::PassageStore& store, llm::Gateway& gateway,
                                     const RankerOptions& options, const templates::PromptTemplate& tmpl) {
  std::vector<Candidate> cands;
  cands.reserve(candidates.ranked.size());
  for (std::size_t i = 0; i < candidates.ranked.size(); ++i) {
    const auto& id = candidates.ranked[i].chunk_id;
    cands.push_back({id, store.at(id).text, i});
  }
  const std::string prefix = "rank/" + candidates.task_id;
  return rank_chunks(question, cands, gateway, options, prefix, tmpl);
}

}  // namespace ctxsynth::ranking
