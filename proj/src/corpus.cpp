#include "ctxsynth/corpus.hpp"

#include <istream>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace ctxsynth::corpus {

using json = nlohmann::json;

std::string_view to_string(ContextMode mode) noexcept {
  return mode == ContextMode::rag ? "rag" : "document";
}

ContextMode parse_context_mode(std::string_view name) {
  if (name == "rag") return ContextMode::rag;
  if (name == "document") return ContextMode::document;
  throw Error("unknown context mode '" + std::string(name) + "' (expected rag or document)");
}

TaskFormatError::TaskFormatError(std::size_t line, const std::string& what)
    : Error("task file line " + std::to_string(line) + ": " + what), line_(line) {}

void PassageStore::add(Chunk chunk) {
  if (by_id_.contains(chunk.chunk_id)) {
    throw IngestError("duplicate chunk id '" + chunk.chunk_id + "'");
  }
  auto& doc = by_doc_[chunk.doc_id];
  if (chunk.position != doc.size()) {
    throw IngestError("chunk '" + chunk.chunk_id + "' has position " + std::to_string(chunk.position) +
                      ", expected " + std::to_string(doc.size()));
  }
  doc.push_back(chunk.chunk_id);
  by_id_.emplace(chunk.chunk_id, chunks_.size());
  chunks_.push_back(std::move(chunk));
}

const Chunk* PassageStore::find(std::string_view chunk_id) const {
  auto it = by_id_.find(std::string(chunk_id));
  return it == by_id_.end() ? nullptr : &chunks_[it->second];
}

const Chunk& PassageStore::at(std::string_view chunk_id) const {
  if (const Chunk* c = find(chunk_id)) return *c;
  throw Error("unknown chunk id '" + std::string(chunk_id) + "'");
}

std::span<const std::string> PassageStore::doc_chunks(std::string_view doc_id) const {
  auto it = by_doc_.find(std::string(doc_id));
  if (it == by_doc_.end()) return {};
  return it->second;
}

std::vector<Chunk> chunk_document(std::string_view doc_id, std::string_view body, std::size_t chunk_size_words) {
  if (chunk_size_words == 0) throw Error("chunk size must be at least one word");
  const auto words = text::split_words(body);
  std::vector<Chunk> chunks;
  chunks.reserve((words.size() + chunk_size_words - 1) / chunk_size_words);
  for (std::size_t start = 0; start < words.size(); start += chunk_size_words) {
    const std::size_t end = std::min(words.size(), start + chunk_size_words);
    Chunk c;
    c.doc_id = std::string(doc_id);
    c.position = chunks.size();
    c.chunk_id = c.doc_id + "#" + std::to_string(c.position);
    c.word_count = end - start;
    for (std::size_t i = start; i < end; ++i) {
      if (i != start) c.text.push_back(' ');
      c.text.append(words[i]);
    }
    chunks.push_back(std::move(c));
  }
  return chunks;
}

namespace {

// DPR dumps quote the text column and double embedded quotes.
std::string unquote_tsv_field(std::string_view field) {
  if (field.size() >= 2 && field.front() == '"' && field.back() == '"') {
    field = field.substr(1, field.size() - 2);
    std::string out;
    out.reserve(field.size());
    for (std::size_t i = 0; i < field.size(); ++i) {
      out.push_back(field[i]);
      if (field[i] == '"' && i + 1 < field.size() && field[i + 1] == '"') ++i;
    }
    return out;
  }
  return std::string(field);
}

std::optional<Chunk> parse_tsv_record(std::string_view line) {
  std::vector<std::string_view> cols;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    cols.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  if (cols.size() < 2 || cols.size() > 3) return std::nullopt;
  Chunk c;
  c.chunk_id = std::string(text::trim(cols[0]));
  if (c.chunk_id.empty()) return std::nullopt;
  c.text = unquote_tsv_field(cols[1]);
  if (cols.size() == 3) c.title = unquote_tsv_field(cols[2]);
  return c;
}

std::optional<std::string> id_field(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) return std::nullopt;
  if (it->is_string()) return it->get<std::string>();
  if (it->is_number_integer()) return std::to_string(it->get<long long>());
  return std::nullopt;
}

std::optional<Chunk> parse_jsonl_record(std::string_view line) {
  json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
  if (!j.is_object()) return std::nullopt;
  auto id = id_field(j, "id");
  auto body = j.find("text");
  if (!id || id->empty() || body == j.end() || !body->is_string()) return std::nullopt;
  Chunk c;
  c.chunk_id = std::move(*id);
  c.text = body->get<std::string>();
  if (auto t = j.find("title"); t != j.end() && t->is_string()) c.title = t->get<std::string>();
  return c;
}

bool is_tsv_header(std::string_view line) {
  return text::istarts_with(line, "id\ttext");
}

}  // namespace

void ingest_corpus_into(PassageStore& store, std::istream& in, CorpusFormat format, IngestStats* stats) {
  IngestStats local;
  IngestStats& st = stats ? *stats : local;
  std::string line;
  std::size_t lineno = 0;
  bool first_content_line = true;
  while (std::getline(in, line)) {
    ++lineno;
    ++st.lines;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (text::trim(line).empty()) continue;
    if (first_content_line) {
      first_content_line = false;
      if (format == CorpusFormat::autodetect) {
        format = text::trim(line).front() == '{' ? CorpusFormat::jsonl : CorpusFormat::tsv;
      }
      if (format == CorpusFormat::tsv && is_tsv_header(line)) continue;
    }
    std::optional<Chunk> chunk =
        format == CorpusFormat::jsonl ? parse_jsonl_record(line) : parse_tsv_record(line);
    if (!chunk) {
      ++st.skipped;
      st.skipped_lines.push_back(lineno);
      continue;
    }
    chunk->doc_id = chunk->chunk_id;
    chunk->position = 0;
    chunk->word_count = text::count_words(chunk->text);
    if (store.contains(chunk->chunk_id)) {
      throw IngestError("line " + std::to_string(lineno) + ": duplicate passage id '" + chunk->chunk_id + "'");
    }
    store.add(std::move(*chunk));
    ++st.records;
  }
}

PassageStore ingest_corpus(std::istream& in, CorpusFormat format, IngestStats* stats) {
  PassageStore store;
  ingest_corpus_into(store, in, format, stats);
  return store;
}

namespace {

std::vector<std::string> string_list(const json& j, std::size_t lineno, const char* field) {
  if (j.is_string()) return {j.get<std::string>()};
  if (!j.is_array()) throw TaskFormatError(lineno, std::string("field '") + field + "' must be a list of strings");
  std::vector<std::string> out;
  out.reserve(j.size());
  for (const auto& v : j) {
    if (v.is_string()) {
      out.push_back(v.get<std::string>());
    } else if (v.is_number_integer()) {
      out.push_back(std::to_string(v.get<long long>()));
    } else {
      throw TaskFormatError(lineno, std::string("field '") + field + "' must contain only strings");
    }
  }
  return out;
}

}  // namespace

std::vector<Task> load_tasks(std::istream& in, ContextMode mode) {
  std::vector<Task> tasks;
  std::unordered_set<std::string> seen_ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (!j.is_object()) throw TaskFormatError(lineno, "not a JSON object");

    Task t;
    t.mode = mode;
    auto id = id_field(j, "task_id");
    if (!id || id->empty()) throw TaskFormatError(lineno, "missing task_id");
    t.task_id = std::move(*id);
    if (!seen_ids.insert(t.task_id).second) throw TaskFormatError(lineno, "duplicate task_id '" + t.task_id + "'");

    auto q = j.find("question");
    if (q == j.end() || !q->is_string() || text::trim(q->get<std::string>()).empty()) {
      throw TaskFormatError(lineno, "missing question");
    }
    t.question = q->get<std::string>();

    if (mode == ContextMode::rag) {
      auto ids = j.find("chunk_ids");
      if (ids == j.end()) throw TaskFormatError(lineno, "missing chunk_ids (required in rag mode)");
      t.chunk_ids = string_list(*ids, lineno, "chunk_ids");
      std::unordered_set<std::string_view> uniq;
      for (const auto& cid : t.chunk_ids) {
        if (!uniq.insert(cid).second) throw TaskFormatError(lineno, "duplicate chunk id '" + cid + "'");
      }
    } else {
      auto body = j.find("text");
      if (body == j.end() || !body->is_string()) throw TaskFormatError(lineno, "missing text (required in document mode)");
      t.text = body->get<std::string>();
    }

    if (auto a = j.find("answers"); a != j.end() && !a->is_null()) {
      auto answers = string_list(*a, lineno, "answers");
      if (answers.empty()) throw TaskFormatError(lineno, "answers must be nonempty when present");
      t.gold_answers = std::move(answers);
    }
    tasks.push_back(std::move(t));
  }
  return tasks;
}

}  // namespace ctxsynth::corpus
