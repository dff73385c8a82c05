#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace ctxsynth::templates {

/// A prompt with `{name}` placeholders. Rendering is a single left-to-right pass, so values
/// that themselves contain braces are inserted literally.
class PromptTemplate {
 public:
  PromptTemplate() = default;
  PromptTemplate(std::string name, std::string body);

  static PromptTemplate load(const std::filesystem::path& path);

  /// Throws Error when a placeholder in the template has no value.
  std::string render(const std::map<std::string, std::string, std::less<>>& values) const;

  const std::vector<std::string>& placeholders() const noexcept { return placeholders_; }
  const std::string& body() const noexcept { return body_; }
  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
  std::string body_;
  std::vector<std::string> placeholders_;
};

// Built-in templates compiled from resources/templates/*.txt.
const PromptTemplate& ranker();
const PromptTemplate& generator();
const PromptTemplate& extractor();

}  // namespace ctxsynth::templates
