#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ctxsynth/corpus.hpp"

namespace ctxsynth::retrieval {

enum class RetrieverKind { bm25, imported };

std::string_view to_string(RetrieverKind kind) noexcept;
RetrieverKind parse_retriever_kind(std::string_view name);

struct ScoredChunk {
  std::string chunk_id;
  double score = 0.0;

  friend bool operator==(const ScoredChunk&, const ScoredChunk&) = default;
};

/// Ranked candidates for one task. Scores are nonincreasing and ids unique.
struct RetrievalResult {
  std::string task_id;
  std::vector<ScoredChunk> ranked;
  RetrieverKind retriever = RetrieverKind::bm25;

  std::vector<std::string> chunk_ids() const;
};

struct Bm25Params {
  double k1 = 0.9;
  double b = 0.4;
};

struct Posting {
  std::uint32_t doc = 0;  // dense document index
  std::uint32_t tf = 0;

  friend bool operator==(const Posting&, const Posting&) = default;
};

/// Lowercases, deletes ASCII punctuation, and splits on whitespace. No stemming or stopwords.
std::vector<std::string> analyze(std::string_view text);

class RetrievalError : public Error {
 public:
  using Error::Error;
};

/// Okapi BM25 inverted index. Immutable after build; concurrent searches are safe.
class Bm25Index {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  /// Throws RetrievalError on an empty store or invalid parameters.
  static Bm25Index build(const corpus::PassageStore& store, Bm25Params params = {});

  /// Okapi BM25 of `query` against one chunk; each query-term occurrence contributes once.
  double score(std::string_view query, std::string_view chunk_id) const;

  /// Top-k chunks with positive score, ordered by (score desc, chunk_id asc).
  RetrievalResult search(std::string_view query, std::size_t k, std::string task_id = {}) const;

  double idf(std::string_view term) const;
  std::size_t document_frequency(std::string_view term) const;
  std::span<const Posting> postings(std::string_view term) const;
  std::size_t doc_length(std::string_view chunk_id) const;
  const std::string& doc_id(std::uint32_t index) const { return doc_ids_.at(index); }

  std::size_t size() const noexcept { return doc_ids_.size(); }
  std::size_t vocabulary_size() const noexcept { return postings_.size(); }
  double average_length() const noexcept { return avg_length_; }
  const Bm25Params& params() const noexcept { return params_; }

  /// Versioned little-endian binary format.
  void save(std::ostream& out) const;
  static Bm25Index load(std::istream& in);

 private:
  double term_weight(double idf, std::uint32_t tf, std::uint32_t doc_len) const;
  std::uint32_t doc_index(std::string_view chunk_id) const;

  Bm25Params params_;
  std::vector<std::string> doc_ids_;
  std::vector<std::uint32_t> doc_lengths_;
  std::unordered_map<std::string, std::uint32_t> index_of_;
  std::unordered_map<std::string, std::vector<Posting>> postings_;
  double avg_length_ = 0.0;
};

/// Reads precomputed rankings as JSON lines {task_id, chunk_ids[], scores[]?}.
/// Missing scores become 1, 1/2, 1/3, ...; every id must exist in `store`.
std::vector<RetrievalResult> import_rankings(std::istream& in, const corpus::PassageStore& store);

}  // namespace ctxsynth::retrieval
