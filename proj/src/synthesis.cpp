#include "ctxsynth/synthesis.hpp"

#include <cmath>

namespace ctxsynth::synthesis {

using json = nlohmann::json;

TokenEstimator TokenEstimator::word_scaled(double scale) {
  if (!(scale > 0.0)) throw Error("token scale must be positive");
  return TokenEstimator([scale](std::string_view s) {
    return static_cast<std::size_t>(std::ceil(scale * static_cast<double>(text::count_words(s))));
  });
}

TokenEstimator TokenEstimator::custom(Fn fn) {
  if (!fn) throw Error("custom estimator needs a function");
  return TokenEstimator(std::move(fn));
}

std::size_t pack_prefix(std::size_t frame_tokens, std::span<const std::size_t> chunk_tokens, std::size_t budget) {
  if (frame_tokens >= budget) {
    throw PackingError("prompt frame needs " + std::to_string(frame_tokens) + " tokens, budget is " +
                       std::to_string(budget));
  }
  std::size_t used = frame_tokens;
  std::size_t n = 0;
  for (; n < chunk_tokens.size(); ++n) {
    if (chunk_tokens[n] > budget - used) break;
    used += chunk_tokens[n];
  }
  if (n == 0 && !chunk_tokens.empty()) {
    throw PackingError("chunk 0 needs " + std::to_string(chunk_tokens[0]) + " tokens but only " +
                       std::to_string(budget - frame_tokens) + " remain");
  }
  return n;
}

std::string render_passage(std::size_t index, std::string_view body) {
  std::string out = "Passage " + std::to_string(index) + ":\n";
  out.append(body);
  return out;
}

std::string render_passages(std::span<const std::string_view> texts) {
  std::string out;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (i) out.append("\n\n");
    out.append(render_passage(i + 1, texts[i]));
  }
  return out;
}

PackResult pack_context(std::string_view question, std::span<const std::string_view> ranked_texts,
                        std::size_t budget_tokens, const TokenEstimator& estimator,
                        const templates::PromptTemplate& tmpl, std::span<const std::string> chunk_ids) {
  if (ranked_texts.empty()) throw PackingError("no chunks to pack");
  PackResult result;
  result.frame_tokens = estimator(tmpl.render({{"question", std::string(question)}, {"passages", ""}}));
  std::vector<std::size_t> costs;
  costs.reserve(ranked_texts.size());
  // Costs are only needed up to the first overflow.
  std::size_t running = result.frame_tokens;
  for (std::size_t i = 0; i < ranked_texts.size(); ++i) {
    costs.push_back(estimator(render_passage(i + 1, ranked_texts[i])));
    running += costs.back();
    if (running > budget_tokens) break;
  }
  try {
    result.count = pack_prefix(result.frame_tokens, costs, budget_tokens);
  } catch (const PackingError& e) {
    if (result.frame_tokens < budget_tokens && !chunk_ids.empty()) {
      throw PackingError("chunk '" + chunk_ids[0] + "' does not fit: " + e.what());
    }
    throw;
  }
  result.total_tokens = result.frame_tokens;
  for (std::size_t i = 0; i < result.count; ++i) result.total_tokens += costs[i];
  return result;
}

llm::ChatRequest build_generator_prompt(std::string_view question, std::span<const std::string_view> passages,
                                        const templates::PromptTemplate& tmpl) {
  if (passages.empty()) throw Error("generator prompt needs at least one passage");
  llm::ChatRequest request;
  request.messages.push_back(
      {llm::Role::user, tmpl.render({{"question", std::string(question)}, {"passages", render_passages(passages)}})});
  return request;
}

llm::ChatRequest build_document_prompt(std::string_view question, std::string_view document,
                                       const templates::PromptTemplate& tmpl) {
  llm::ChatRequest request;
  request.messages.push_back(
      {llm::Role::user, tmpl.render({{"question", std::string(question)}, {"passages", std::string(document)}})});
  return request;
}

FinalAnswer extract_final_answer(std::string_view cot_text) {
  FinalAnswer result;
  const auto lines = text::split_lines(cot_text);
  for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
    const std::string_view line = text::trim(*it);
    if (!text::istarts_with(line, "answer:")) continue;
    const std::string_view rest = text::trim(line.substr(7));
    if (rest.empty()) continue;
    result.answer = std::string(rest);
    result.no_answer = text::icontains(rest, "no answer was found");
    break;
  }
  return result;
}

json to_json(const SynthesisRecord& r) {
  json j;
  j["task_id"] = r.task_id;
  j["selected_chunk_ids"] = r.selected_chunk_ids;
  j["cot_answer"] = r.cot_answer;
  j["final_answer"] = r.final_answer ? json(*r.final_answer) : json(nullptr);
  j["no_answer_flag"] = r.no_answer_flag;
  return j;
}

SynthesisRecord synthesis_record_from_json(const json& j) {
  SynthesisRecord r;
  r.task_id = j.at("task_id").get<std::string>();
  r.selected_chunk_ids = j.at("selected_chunk_ids").get<std::vector<std::string>>();
  r.cot_answer = j.at("cot_answer").get<std::string>();
  if (auto fa = j.find("final_answer"); fa != j.end() && fa->is_string()) r.final_answer = fa->get<std::string>();
  r.no_answer_flag = j.value("no_answer_flag", false);
  return r;
}

SynthesisRecord synthesize(std::string_view task_id, std::string_view question,
                           std::span<const ranking::RankedChunk> ranked, const ChunkText& chunk_text,
                           llm::Gateway& gateway, const SynthesisOptions& options,
                           const templates::PromptTemplate& tmpl) {
  if (ranked.empty()) throw PackingError("task " + std::string(task_id) + " has no ranked chunks");
  std::vector<std::string_view> texts;
  std::vector<std::string> ids;
  texts.reserve(ranked.size());
  ids.reserve(ranked.size());
  for (const auto& rc : ranked) {
    texts.push_back(chunk_text(rc.chunk_id));
    ids.push_back(rc.chunk_id);
  }
  const PackResult packed = pack_context(question, texts, options.budget_tokens, options.estimator, tmpl, ids);

  SynthesisRecord record;
  record.task_id = std::string(task_id);
  record.selected_chunk_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(packed.count));

  auto request = build_generator_prompt(question, std::span(texts).first(packed.count), tmpl);
  request.temperature = options.temperature;
  request.max_tokens = options.max_tokens;
  request.request_id = "generate/" + record.task_id;
  record.generator_prompt = request.messages.back().content;

  const llm::ChatResponse response = gateway.chat(request);
  record.cot_answer = response.content;
  const FinalAnswer final_answer = extract_final_answer(record.cot_answer);
  record.final_answer = final_answer.answer;
  record.no_answer_flag = final_answer.no_answer;
  return record;
}

}  // namespace ctxsynth::synthesis
