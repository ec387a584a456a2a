#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace beatframe::prompt {

enum class KeywordSource {
  kSelected,    // kept after the designer study
  kPromptBook,  // listed in the prompt book only
};

struct Keyword {
  std::string text;
  KeywordSource source = KeywordSource::kSelected;
};

struct Category {
  std::string name;
  std::vector<Keyword> keywords;
};

class KeywordTaxonomy {
 public:
  /// Parses the versioned taxonomy JSON; rejects duplicates within a category.
  static KeywordTaxonomy from_json(std::string_view text);

  const std::vector<Category>& categories() const { return categories_; }
  /// Case-insensitive lookups. Return nullptr / npos when absent.
  const Category* find_category(std::string_view name) const;
  const Keyword* find_keyword(std::string_view category, std::string_view keyword) const;
  std::size_t category_index(std::string_view name) const;

  std::size_t count(KeywordSource source) const;

 private:
  std::vector<Category> categories_;
};

/// The built-in six-category catalog (Medium, Technique, Spatial Composition,
/// Shot, Color, Light).
const KeywordTaxonomy& keyword_catalog();

struct KeywordChoice {
  std::string category;
  std::string keyword;
};

struct PromptSpec {
  std::string lyric;
  std::vector<KeywordChoice> keywords;
};

struct Prompt {
  std::string text;
  bool operator==(const Prompt&) const = default;
};

enum class ViolationKind { kUnknownCategory, kUnknownKeyword, kDuplicateCategory, kDuplicateKeyword };

struct Violation {
  ViolationKind kind;
  std::string category;
  std::string keyword;
  std::string message;
};

struct PromptOptions {
  // The editor allows one keyword per category unless this is set.
  bool allow_multiple_per_category = false;
};

/// "Medium=Painting,Light=Warm light" -> choices. Entries are trimmed; an
/// empty string is an empty selection. Throws ValidationError on an entry
/// without a category or keyword.
std::vector<KeywordChoice> parse_keyword_list(std::string_view text);

/// Category names in catalog order, comma separated.
std::string category_names(const KeywordTaxonomy& taxonomy = keyword_catalog());

/// Empty when the selection is valid.
std::vector<Violation> validate_keywords(const std::vector<KeywordChoice>& selection,
                                         const KeywordTaxonomy& taxonomy = keyword_catalog(),
                                         const PromptOptions& options = {});

/// "lyric, kw1, kw2, ..." with keywords in catalog order (category, then
/// position within the category) using catalog spelling.
Prompt assemble_prompt(const PromptSpec& spec, const KeywordTaxonomy& taxonomy = keyword_catalog(),
                       const PromptOptions& options = {});

}  // namespace beatframe::prompt
