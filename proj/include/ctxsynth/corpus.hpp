#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ctxsynth/text.hpp"

namespace ctxsynth::corpus {

inline constexpr std::size_t kDefaultChunkWords = 100;

/// One retrieval/ranking unit of context text.
struct Chunk {
  std::string chunk_id;
  std::string doc_id;
  std::size_t position = 0;
  std::string text;
  std::size_t word_count = 0;
  std::optional<std::string> title;

  friend bool operator==(const Chunk&, const Chunk&) = default;
};

enum class ContextMode { rag, document };

std::string_view to_string(ContextMode mode) noexcept;
ContextMode parse_context_mode(std::string_view name);

/// A question with its context: an ordered chunk-id list in rag mode, or raw text in document mode.
struct Task {
  std::string task_id;
  std::string question;
  ContextMode mode = ContextMode::rag;
  std::vector<std::string> chunk_ids;
  std::string text;
  std::optional<std::vector<std::string>> gold_answers;

  friend bool operator==(const Task&, const Task&) = default;
};

class IngestError : public Error {
 public:
  using Error::Error;
};

class TaskFormatError : public Error {
 public:
  TaskFormatError(std::size_t line, const std::string& what);
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Chunks keyed by id plus a per-document index. Immutable once ingestion completes.
class PassageStore {
 public:
  /// Throws IngestError on a duplicate chunk id or a non-contiguous position.
  void add(Chunk chunk);

  const Chunk* find(std::string_view chunk_id) const;
  const Chunk& at(std::string_view chunk_id) const;
  bool contains(std::string_view chunk_id) const { return find(chunk_id) != nullptr; }

  /// Chunk ids of a document in position order; empty when unknown.
  std::span<const std::string> doc_chunks(std::string_view doc_id) const;

  /// All chunks in insertion order.
  std::span<const Chunk> chunks() const noexcept { return chunks_; }
  std::size_t size() const noexcept { return chunks_.size(); }
  bool empty() const noexcept { return chunks_.empty(); }

 private:
  std::vector<Chunk> chunks_;
  std::unordered_map<std::string, std::size_t> by_id_;
  std::unordered_map<std::string, std::vector<std::string>> by_doc_;
};

/// Partitions the whitespace-separated words of `text` into groups of `chunk_size_words`.
/// Chunk ids are "<doc_id>#<position>". Throws Error when chunk_size_words is 0.
std::vector<Chunk> chunk_document(std::string_view doc_id, std::string_view text, std::size_t chunk_size_words);

enum class CorpusFormat { autodetect, tsv, jsonl };

struct IngestStats {
  std::size_t lines = 0;
  std::size_t records = 0;
  std::size_t skipped = 0;
  std::vector<std::size_t> skipped_lines;  // 1-based
};

/// Streams a passage corpus: DPR-style `id<TAB>text<TAB>title` with an optional header row,
/// or JSON lines with id/text/title fields. Malformed lines are skipped and tallied;
/// a duplicate id aborts with IngestError.
PassageStore ingest_corpus(std::istream& in, CorpusFormat format = CorpusFormat::autodetect,
                           IngestStats* stats = nullptr);

/// Same as above, appending into an existing store (multi-file corpora).
void ingest_corpus_into(PassageStore& store, std::istream& in, CorpusFormat format = CorpusFormat::autodetect,
                        IngestStats* stats = nullptr);

/// Reads JSON-lines task records (task_id, question, chunk_ids | text, answers).
/// Throws TaskFormatError carrying the 1-based line number on the first bad record.
std::vector<Task> load_tasks(std::istream& in, ContextMode mode);

}  // namespace ctxsynth::corpus
