#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxsynth/llm.hpp"
#include "ctxsynth/ranker.hpp"
#include "ctxsynth/templates.hpp"

namespace ctxsynth::synthesis {

/// Token count estimate used to fit prompts into the generator's window.
class TokenEstimator {
 public:
  using Fn = std::function<std::size_t(std::string_view)>;

  /// ceil(scale * whitespace word count).
  static TokenEstimator word_scaled(double scale = 1.35);
  /// Plug in an exact tokenizer. `fn` must be monotone in text length and return 0 for "".
  static TokenEstimator custom(Fn fn);

  std::size_t operator()(std::string_view text) const { return fn_(text); }

 private:
  explicit TokenEstimator(Fn fn) : fn_(std::move(fn)) {}
  Fn fn_;
};

class PackingError : public Error {
 public:
  using Error::Error;
};

/// Longest prefix of `chunk_tokens` with frame + sum <= budget. Throws PackingError when the
/// frame leaves no room or the first chunk alone overflows.
std::size_t pack_prefix(std::size_t frame_tokens, std::span<const std::size_t> chunk_tokens, std::size_t budget);

/// "Passage <index>:\n<text>", index 1-based.
std::string render_passage(std::size_t index, std::string_view text);
/// Passages numbered from 1 in the given order, separated by blank lines.
std::string render_passages(std::span<const std::string_view> texts);

struct PackResult {
  std::size_t count = 0;
  std::size_t frame_tokens = 0;
  std::size_t total_tokens = 0;
};

/// Greedy top-M selection over `ranked_texts` (final-rank order) under `budget_tokens`.
/// Each chunk is costed as its rendered passage block; the frame is the template with the
/// question filled and no passages.
PackResult pack_context(std::string_view question, std::span<const std::string_view> ranked_texts,
                        std::size_t budget_tokens, const TokenEstimator& estimator,
                        const templates::PromptTemplate& tmpl = templates::generator(),
                        std::span<const std::string> chunk_ids = {});

llm::ChatRequest build_generator_prompt(std::string_view question, std::span<const std::string_view> passages,
                                        const templates::PromptTemplate& tmpl = templates::generator());

/// Same prompt with a raw document filling the passages slot.
llm::ChatRequest build_document_prompt(std::string_view question, std::string_view document,
                                       const templates::PromptTemplate& tmpl = templates::generator());

struct FinalAnswer {
  std::optional<std::string> answer;
  bool no_answer = false;

  friend bool operator==(const FinalAnswer&, const FinalAnswer&) = default;
};

/// The last line beginning with "Answer:" (after leading whitespace) supplies the answer.
FinalAnswer extract_final_answer(std::string_view cot_text);

struct SynthesisRecord {
  std::string task_id;
  std::vector<std::string> selected_chunk_ids;
  std::string generator_prompt;  // not serialized; reproducible from the selection
  std::string cot_answer;
  std::optional<std::string> final_answer;
  bool no_answer_flag = false;
};

nlohmann::json to_json(const SynthesisRecord& record);
SynthesisRecord synthesis_record_from_json(const nlohmann::json& j);

struct SynthesisOptions {
  std::size_t budget_tokens = 6000;
  TokenEstimator estimator = TokenEstimator::word_scaled();
  double temperature = 0.0;
  int max_tokens = 1024;
};

/// Text lookup for ranked chunks.
using ChunkText = std::function<std::string_view(const std::string& chunk_id)>;

/// pack_context -> build_generator_prompt -> chat -> extract_final_answer.
/// Throws PackingError or llm::ChatError; the caller decides how to record the failure.
SynthesisRecord synthesize(std::string_view task_id, std::string_view question,
                           std::span<const ranking::RankedChunk> ranked, const ChunkText& chunk_text,
                           llm::Gateway& gateway, const SynthesisOptions& options = {},
                           const templates::PromptTemplate& tmpl = templates::generator());

}  // namespace ctxsynth::synthesis
