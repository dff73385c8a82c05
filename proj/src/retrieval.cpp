#include "ctxsynth/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace ctxsynth::retrieval {

std::string_view to_string(RetrieverKind kind) noexcept {
  return kind == RetrieverKind::bm25 ? "bm25" : "imported";
}

RetrieverKind parse_retriever_kind(std::string_view name) {
  if (name == "bm25") return RetrieverKind::bm25;
  if (name == "imported") return RetrieverKind::imported;
  throw Error("unknown retriever '" + std::string(name) + "' (expected bm25 or imported)");
}

std::vector<std::string> RetrievalResult::chunk_ids() const {
  std::vector<std::string> ids;
  ids.reserve(ranked.size());
  for (const auto& r : ranked) ids.push_back(r.chunk_id);
  return ids;
}

std::vector<std::string> analyze(std::string_view input) {
  std::vector<std::string> terms;
  std::string current;
  for (char c : input) {
    if (text::is_space(c)) {
      if (!current.empty()) terms.push_back(std::move(current));
      current.clear();
    } else if (!text::is_ascii_punct(c)) {
      current.push_back(text::to_lower(c));
    }
  }
  if (!current.empty()) terms.push_back(std::move(current));
  return terms;
}

Bm25Index Bm25Index::build(const corpus::PassageStore& store, Bm25Params params) {
  if (store.empty()) throw RetrievalError("cannot build a BM25 index over an empty store");
  if (!(params.k1 > 0.0) || !(params.b >= 0.0 && params.b <= 1.0)) {
    throw RetrievalError("BM25 parameters require k1 > 0 and 0 <= b <= 1");
  }
  Bm25Index idx;
  idx.params_ = params;
  idx.doc_ids_.reserve(store.size());
  idx.doc_lengths_.reserve(store.size());
  std::uint64_t total = 0;
  for (const auto& chunk : store.chunks()) {
    const auto doc = static_cast<std::uint32_t>(idx.doc_ids_.size());
    const auto terms = analyze(chunk.text);
    std::map<std::string_view, std::uint32_t> tf;
    for (const auto& t : terms) ++tf[t];
    for (const auto& [term, count] : tf) idx.postings_[std::string(term)].push_back({doc, count});
    idx.doc_ids_.push_back(chunk.chunk_id);
    idx.doc_lengths_.push_back(static_cast<std::uint32_t>(terms.size()));
    idx.index_of_.emplace(chunk.chunk_id, doc);
    total += terms.size();
  }
  idx.avg_length_ = static_cast<double>(total) / static_cast<double>(idx.doc_ids_.size());
  return idx;
}

double Bm25Index::idf(std::string_view term) const {
  const double n = static_cast<double>(doc_ids_.size());
  const double df = static_cast<double>(document_frequency(term));
  return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
}

std::size_t Bm25Index::document_frequency(std::string_view term) const {
  return postings(term).size();
}

std::span<const Posting> Bm25Index::postings(std::string_view term) const {
  auto it = postings_.find(std::string(term));
  if (it == postings_.end()) return {};
  return it->second;
}

std::uint32_t Bm25Index::doc_index(std::string_view chunk_id) const {
  auto it = index_of_.find(std::string(chunk_id));
  if (it == index_of_.end()) throw RetrievalError("chunk '" + std::string(chunk_id) + "' is not in the index");
  return it->second;
}

std::size_t Bm25Index::doc_length(std::string_view chunk_id) const {
  return doc_lengths_[doc_index(chunk_id)];
}

double Bm25Index::term_weight(double term_idf, std::uint32_t tf, std::uint32_t doc_len) const {
  const double k1 = params_.k1;
  const double norm = 1.0 - params_.b + params_.b * static_cast<double>(doc_len) / avg_length_;
  return term_idf * static_cast<double>(tf) * (k1 + 1.0) / (static_cast<double>(tf) + k1 * norm);
}

double Bm25Index::score(std::string_view query, std::string_view chunk_id) const {
  const std::uint32_t doc = doc_index(chunk_id);
  double total = 0.0;
  for (const auto& term : analyze(query)) {
    const auto plist = postings(term);
    auto it = std::lower_bound(plist.begin(), plist.end(), doc,
                               [](const Posting& p, std::uint32_t d) { return p.doc < d; });
    if (it == plist.end() || it->doc != doc) continue;
    total += term_weight(idf(term), it->tf, doc_lengths_[doc]);
  }
  return total;
}

RetrievalResult Bm25Index::search(std::string_view query, std::size_t k, std::string task_id) const {
  RetrievalResult result;
  result.task_id = std::move(task_id);
  result.retriever = RetrieverKind::bm25;
  if (k == 0) throw RetrievalError("search requires k >= 1");

  // Accumulate in query-term order so the sum matches score() exactly.
  std::unordered_map<std::uint32_t, double> acc;
  for (const auto& term : analyze(query)) {
    const auto plist = postings(term);
    if (plist.empty()) continue;
    const double term_idf = idf(term);
    for (const auto& p : plist) acc[p.doc] += term_weight(term_idf, p.tf, doc_lengths_[p.doc]);
  }

  std::vector<std::pair<std::uint32_t, double>> hits;
  hits.reserve(acc.size());
  for (const auto& [doc, s] : acc) {
    if (s > 0.0) hits.emplace_back(doc, s);
  }
  auto better = [this](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return doc_ids_[a.first] < doc_ids_[b.first];
  };
  const std::size_t take = std::min(k, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(take), hits.end(), better);
  result.ranked.reserve(take);
  for (std::size_t i = 0; i < take; ++i) result.ranked.push_back({doc_ids_[hits[i].first], hits[i].second});
  return result;
}

namespace {

constexpr char kMagic[8] = {'C', 'S', 'B', 'M', '2', '5', '\0', '\0'};

static_assert(std::endian::native == std::endian::little, "index serialization assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::ostream& out, std::string_view s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw RetrievalError("truncated index file");
  return v;
}

std::string get_string(std::istream& in) {
  const auto n = get<std::uint32_t>(in);
  std::string s(n, '\0');
  if (n && !in.read(s.data(), n)) throw RetrievalError("truncated index file");
  return s;
}

}  // namespace

void Bm25Index::save(std::ostream& out) const {
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kFormatVersion);
  put<double>(out, params_.k1);
  put<double>(out, params_.b);
  put<std::uint64_t>(out, doc_ids_.size());
  for (std::size_t i = 0; i < doc_ids_.size(); ++i) {
    put_string(out, doc_ids_[i]);
    put<std::uint32_t>(out, doc_lengths_[i]);
  }
  std::vector<const std::string*> terms;
  terms.reserve(postings_.size());
  for (const auto& [term, _] : postings_) terms.push_back(&term);
  std::sort(terms.begin(), terms.end(), [](const auto* a, const auto* b) { return *a < *b; });
  put<std::uint64_t>(out, terms.size());
  for (const auto* term : terms) {
    put_string(out, *term);
    const auto& plist = postings_.at(*term);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(plist.size()));
    for (const auto& p : plist) {
      put<std::uint32_t>(out, p.doc);
      put<std::uint32_t>(out, p.tf);
    }
  }
  if (!out) throw RetrievalError("failed to write index");
}

Bm25Index Bm25Index::load(std::istream& in) {
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || !std::equal(std::begin(magic), std::end(magic), std::begin(kMagic))) {
    throw RetrievalError("not a BM25 index file");
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kFormatVersion) {
    throw RetrievalError("unsupported index format version " + std::to_string(version));
  }
  Bm25Index idx;
  idx.params_.k1 = get<double>(in);
  idx.params_.b = get<double>(in);
  const auto n = get<std::uint64_t>(in);
  std::uint64_t total = 0;
  for (std::uint64_t i = 0; i < n; ++i) {
    idx.doc_ids_.push_back(get_string(in));
    idx.doc_lengths_.push_back(get<std::uint32_t>(in));
    idx.index_of_.emplace(idx.doc_ids_.back(), static_cast<std::uint32_t>(i));
    total += idx.doc_lengths_.back();
  }
  if (n == 0) throw RetrievalError("index file has no documents");
  idx.avg_length_ = static_cast<double>(total) / static_cast<double>(n);
  const auto nterms = get<std::uint64_t>(in);
  for (std::uint64_t t = 0; t < nterms; ++t) {
    auto term = get_string(in);
    const auto count = get<std::uint32_t>(in);
    std::vector<Posting> plist(count);
    for (auto& p : plist) {
      p.doc = get<std::uint32_t>(in);
      p.tf = get<std::uint32_t>(in);
      if (p.doc >= n) throw RetrievalError("index posting references unknown document");
    }
    idx.postings_.emplace(std::move(term), std::move(plist));
  }
  return idx;
}

std::vector<RetrievalResult> import_rankings(std::istream& in, const corpus::PassageStore& store) {
  using nlohmann::json;
  std::vector<RetrievalResult> results;
  std::vector<std::string> offenders;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    throw RetrievalError("rankings line " + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (!j.is_object()) fail("not a JSON object");
    RetrievalResult r;
    r.retriever = RetrieverKind::imported;
    auto tid = j.find("task_id");
    if (tid == j.end()) fail("missing task_id");
    r.task_id = tid->is_string() ? tid->get<std::string>() : tid->dump();
    auto ids = j.find("chunk_ids");
    if (ids == j.end() || !ids->is_array()) fail("missing chunk_ids");
    const json* scores = nullptr;
    if (auto s = j.find("scores"); s != j.end() && !s->is_null()) {
      if (!s->is_array() || s->size() != ids->size()) fail("scores must be a list matching chunk_ids");
      scores = &*s;
    }
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < ids->size(); ++i) {
      const auto& idv = (*ids)[i];
      std::string id = idv.is_string() ? idv.get<std::string>() : idv.dump();
      if (!seen.insert(id).second) fail("duplicate chunk id '" + id + "'");
      if (!store.contains(id)) offenders.push_back(r.task_id + ":" + id);
      double s = 1.0 / static_cast<double>(i + 1);
      if (scores) {
        if (!(*scores)[i].is_number()) fail("scores must be numbers");
        s = (*scores)[i].get<double>();
        if (i > 0 && s > r.ranked.back().score) fail("scores must be nonincreasing");
      }
      r.ranked.push_back({std::move(id), s});
    }
    results.push_back(std::move(r));
  }
  if (!offenders.empty()) {
    std::string msg = "rankings reference " + std::to_string(offenders.size()) + " unknown chunk id(s):";
    for (std::size_t i = 0; i < offenders.size() && i < 20; ++i) msg += " " + offenders[i];
    if (offenders.size() > 20) msg += " ...";
    throw RetrievalError(msg);
  }
  return results;
}

}  // namespace ctxsynth::retrieval
