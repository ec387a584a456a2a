#include "beatframe/prompt.hpp"

#include <algorithm>
#include <set>

#include "beatframe/error.hpp"
#include "json.hpp"

namespace beatframe::data {
extern const std::string_view kKeywordsJson;
}

namespace beatframe::prompt {

using json = nlohmann::json;

namespace {

std::string fold(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

KeywordTaxonomy KeywordTaxonomy::from_json(std::string_view text) {
  KeywordTaxonomy t;
  try {
    const auto doc = json::parse(text);
    if (doc.at("version").get<int>() != 1) throw FormatError("unsupported keyword taxonomy version");
    for (const auto& c : doc.at("categories")) {
      Category cat;
      cat.name = c.at("name").get<std::string>();
      std::set<std::string> seen;
      for (const auto& k : c.at("keywords")) {
        Keyword kw;
        kw.text = k.at("keyword").get<std::string>();
        const auto source = k.at("source").get<std::string>();
        if (source == "selected") {
          kw.source = KeywordSource::kSelected;
        } else if (source == "prompt-book") {
          kw.source = KeywordSource::kPromptBook;
        } else {
          throw FormatError("keyword '" + kw.text + "' has unknown source '" + source + "'");
        }
        if (!seen.insert(fold(kw.text)).second) {
          throw FormatError("duplicate keyword '" + kw.text + "' in category '" + cat.name + "'");
        }
        cat.keywords.push_back(std::move(kw));
      }
      if (t.find_category(cat.name) != nullptr) throw FormatError("duplicate category '" + cat.name + "'");
      t.categories_.push_back(std::move(cat));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed keyword taxonomy: ") + e.what());
  }
  return t;
}

const Category* KeywordTaxonomy::find_category(std::string_view name) const {
  const auto i = category_index(name);
  return i == std::string::npos ? nullptr : &categories_[i];
}

std::size_t KeywordTaxonomy::category_index(std::string_view name) const {
  const auto key = fold(trim(name));
  for (std::size_t i = 0; i < categories_.size(); ++i) {
    if (fold(categories_[i].name) == key) return i;
  }
  return std::string::npos;
}

const Keyword* KeywordTaxonomy::find_keyword(std::string_view category, std::string_view keyword) const {
  const auto* cat = find_category(category);
  if (cat == nullptr) return nullptr;
  const auto key = fold(trim(keyword));
  for (const auto& k : cat->keywords) {
    if (fold(k.text) == key) return &k;
  }
  return nullptr;
}

std::size_t KeywordTaxonomy::count(KeywordSource source) const {
  std::size_t n = 0;
  for (const auto& c : categories_) {
    n += static_cast<std::size_t>(
        std::count_if(c.keywords.begin(), c.keywords.end(), [&](const Keyword& k) { return k.source == source; }));
  }
  return n;
}

const KeywordTaxonomy& keyword_catalog() {
  static const KeywordTaxonomy catalog = KeywordTaxonomy::from_json(data::kKeywordsJson);
  return catalog;
}

std::vector<KeywordChoice> parse_keyword_list(std::string_view text) {
  std::vector<KeywordChoice> out;
  if (trim(text).empty()) return out;
  std::size_t begin = 0;
  for (;;) {
    const auto end = text.find(',', begin);
    const auto entry = text.substr(begin, end == std::string_view::npos ? std::string_view::npos : end - begin);
    const auto eq = entry.find('=');
    const auto category = eq == std::string_view::npos ? std::string() : trim(entry.substr(0, eq));
    const auto keyword = eq == std::string_view::npos ? std::string() : trim(entry.substr(eq + 1));
    if (category.empty() || keyword.empty()) {
      throw ValidationError("keyword entry '" + trim(entry) + "' is not of the form Category=Keyword");
    }
    out.push_back({category, keyword});
    if (end == std::string_view::npos) break;
    begin = end + 1;
  }
  return out;
}

std::string category_names(const KeywordTaxonomy& taxonomy) {
  std::string out;
  for (const auto& c : taxonomy.categories()) out += (out.empty() ? "" : ", ") + c.name;
  return out;
}

std::vector<Violation> validate_keywords(const std::vector<KeywordChoice>& selection, const KeywordTaxonomy& taxonomy,
                                         const PromptOptions& options) {
  std::vector<Violation> out;
  std::set<std::size_t> used_categories;
  std::set<const Keyword*> used_keywords;
  for (const auto& choice : selection) {
    const auto ci = taxonomy.category_index(choice.category);
    if (ci == std::string::npos) {
      out.push_back({ViolationKind::kUnknownCategory, choice.category, choice.keyword,
                     "unknown category '" + choice.category + "'"});
      continue;
    }
    const auto* kw = taxonomy.find_keyword(choice.category, choice.keyword);
    if (kw == nullptr) {
      out.push_back({ViolationKind::kUnknownKeyword, choice.category, choice.keyword,
                     "unknown keyword '" + choice.keyword + "' in category '" + taxonomy.categories()[ci].name + "'"});
      continue;
    }
    if (!used_keywords.insert(kw).second) {
      out.push_back({ViolationKind::kDuplicateKeyword, choice.category, choice.keyword,
                     "keyword '" + kw->text + "' selected more than once"});
      continue;
    }
    if (!used_categories.insert(ci).second && !options.allow_multiple_per_category) {
      out.push_back({ViolationKind::kDuplicateCategory, choice.category, choice.keyword,
                     "category '" + taxonomy.categories()[ci].name + "' already has a keyword"});
    }
  }
  return out;
}

Prompt assemble_prompt(const PromptSpec& spec, const KeywordTaxonomy& taxonomy, const PromptOptions& options) {
  const auto lyric = trim(spec.lyric);
  if (lyric.empty()) throw ValidationError("prompt lyric is empty");
  const auto violations = validate_keywords(spec.keywords, taxonomy, options);
  if (!violations.empty()) throw ValidationError(violations.front().message);

  std::vector<std::pair<std::pair<std::size_t, std::size_t>, const std::string*>> ordered;
  for (const auto& choice : spec.keywords) {
    const auto ci = taxonomy.category_index(choice.category);
    const auto* kw = taxonomy.find_keyword(choice.category, choice.keyword);
    const auto& list = taxonomy.categories()[ci].keywords;
    const auto ki = static_cast<std::size_t>(kw - list.data());
    ordered.push_back({{ci, ki}, &kw->text});
  }
  std::sort(ordered.begin(), ordered.end());
  Prompt p{lyric};
  for (const auto& [pos, text] : ordered) p.text += ", " + *text;
  return p;
}

}  // namespace beatframe::prompt
