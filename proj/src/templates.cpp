#include "ctxsynth/templates.hpp"

#include <fstream>
#include <sstream>

#include "ctxsynth/text.hpp"
#include "ctxsynth_templates_data.hpp"

namespace ctxsynth::templates {

namespace {

bool is_ident(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_';
}

// Calls on_text / on_field for each literal run and each well-formed `{identifier}`.
template <typename OnText, typename OnField>
void scan(std::string_view body, OnText on_text, OnField on_field) {
  std::size_t i = 0;
  std::size_t literal = 0;
  while (i < body.size()) {
    if (body[i] == '{') {
      std::size_t j = i + 1;
      while (j < body.size() && is_ident(body[j])) ++j;
      if (j > i + 1 && j < body.size() && body[j] == '}') {
        on_text(body.substr(literal, i - literal));
        on_field(body.substr(i + 1, j - i - 1));
        i = literal = j + 1;
        continue;
      }
    }
    ++i;
  }
  on_text(body.substr(literal));
}

}  // namespace

PromptTemplate::PromptTemplate(std::string name, std::string body) : name_(std::move(name)), body_(std::move(body)) {
  scan(
      body_, [](std::string_view) {},
      [this](std::string_view field) {
        for (const auto& p : placeholders_) {
          if (p == field) return;
        }
        placeholders_.emplace_back(field);
      });
}

PromptTemplate PromptTemplate::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open template " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return PromptTemplate(path.filename().string(), ss.str());
}

std::string PromptTemplate::render(const std::map<std::string, std::string, std::less<>>& values) const {
  std::string out;
  out.reserve(body_.size());
  scan(
      body_, [&](std::string_view lit) { out.append(lit); },
      [&](std::string_view field) {
        auto it = values.find(field);
        if (it == values.end()) throw Error("template " + name_ + ": no value for {" + std::string(field) + "}");
        out.append(it->second);
      });
  return out;
}

const PromptTemplate& ranker() {
  static const PromptTemplate t("ranker_v1", std::string(data::kRankerV1));
  return t;
}

const PromptTemplate& generator() {
  static const PromptTemplate t("generator_v1", std::string(data::kGeneratorV1));
  return t;
}

const PromptTemplate& extractor() {
  static const PromptTemplate t("extractor_v1", std::string(data::kExtractorV1));
  return t;
}

}  // namespace ctxsynth::templates
