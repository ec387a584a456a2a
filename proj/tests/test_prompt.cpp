#include <algorithm>

#include "beatframe/error.hpp"
#include "beatframe/prompt.hpp"
#include "doctest.h"

using namespace beatframe;
using namespace beatframe::prompt;

namespace {

std::vector<std::string> names(const Category& c) {
  std::vector<std::string> out;
  for (const auto& k : c.keywords) out.push_back(k.text);
  return out;
}

}  // namespace

TEST_CASE("catalog mirrors the keyword table") {
  const auto& cat = keyword_catalog();
  std::vector<std::string> categories;
  for (const auto& c : cat.categories()) categories.push_back(c.name);
  CHECK(categories == std::vector<std::string>{"Medium", "Technique", "Spatial Composition", "Shot", "Color", "Light"});

  CHECK(names(*cat.find_category("Medium")) ==
        std::vector<std::string>{"Painting", "Drawing", "Graphic art", "Photograph", "Illustration"});
  CHECK(names(*cat.find_category("Spatial Composition")) == std::vector<std::string>{"Steelyard", "The tunnel"});
  CHECK(cat.count(KeywordSource::kSelected) == 23);
  CHECK(cat.count(KeywordSource::kPromptBook) == 32);
  CHECK(cat.find_keyword("Medium", "Painting")->source == KeywordSource::kSelected);
  CHECK(cat.find_keyword("Medium", "Photograph")->source == KeywordSource::kPromptBook);
}

TEST_CASE("every catalog keyword validates") {
  const auto& cat = keyword_catalog();
  for (const auto& c : cat.categories()) {
    for (const auto& k : c.keywords) {
      CHECK(validate_keywords({{c.name, k.text}}).empty());
      CHECK(assemble_prompt({"x", {{c.name, k.text}}}).text == "x, " + k.text);
    }
  }
}

TEST_CASE("assemble_prompt canonical format") {
  CHECK(assemble_prompt({"somewhere beyond the sea", {}}).text == "somewhere beyond the sea");
  CHECK(assemble_prompt({"L", {{"Medium", "Painting"}, {"Light", "Warm light"}}}).text == "L, Painting, Warm light");
  CHECK(assemble_prompt({"L", {{"Light", "Warm light"}, {"Medium", "Painting"}}}).text == "L, Painting, Warm light");
  // Lookup is case-insensitive; output uses catalog spelling.
  CHECK(assemble_prompt({"  L ", {{"medium", "painting"}}}).text == "L, Painting");
  CHECK_THROWS_AS(assemble_prompt({"", {}}), ValidationError);
  CHECK_THROWS_WITH_AS(assemble_prompt({"L", {{"Color", "Ultraviolet"}}}),
                       doctest::Contains("'Ultraviolet' in category 'Color'"), ValidationError);
}

TEST_CASE("assemble_prompt is permutation invariant") {
  std::vector<KeywordChoice> picks{{"Medium", "Drawing"}, {"Shot", "Close-up"}, {"Color", "Vivid color"}, {"Light", "Warm light"}};
  for (const auto& k : picks) REQUIRE(keyword_catalog().find_keyword(k.category, k.keyword) != nullptr);
  std::sort(picks.begin(), picks.end(), [](auto& a, auto& b) { return a.category < b.category; });
  const auto expected = assemble_prompt({"lyric", picks}).text;
  CHECK(expected == "lyric, Drawing, Close-up, Vivid color, Warm light");
  int perms = 0;
  do {
    for (std::size_t len = 0; len <= picks.size(); ++len) {
      std::vector<KeywordChoice> sub(picks.begin(), picks.begin() + static_cast<std::ptrdiff_t>(len));
      auto sorted = sub;
      std::sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.category < b.category; });
      CHECK(assemble_prompt({"lyric", sub}) == assemble_prompt({"lyric", sorted}));
    }
    ++perms;
  } while (std::next_permutation(picks.begin(), picks.end(), [](auto& a, auto& b) { return a.category < b.category; }));
  CHECK(perms == 24);
}

TEST_CASE("validate_keywords violations") {
  CHECK(validate_keywords({}).empty());
  const auto dup = validate_keywords({{"Medium", "Painting"}, {"Medium", "Painting"}});
  REQUIRE(dup.size() == 1);
  CHECK(dup[0].kind == ViolationKind::kDuplicateKeyword);
  const auto two = validate_keywords({{"Medium", "Painting"}, {"Medium", "Drawing"}});
  REQUIRE(two.size() == 1);
  CHECK(two[0].kind == ViolationKind::kDuplicateCategory);
  CHECK(validate_keywords({{"Medium", "Painting"}, {"Medium", "Drawing"}}, keyword_catalog(), {true}).empty());
  CHECK(validate_keywords({{"Color", "Ultraviolet"}})[0].kind == ViolationKind::kUnknownKeyword);
  CHECK(validate_keywords({{"Texture", "Rough"}})[0].kind == ViolationKind::kUnknownCategory);

  CHECK(assemble_prompt({"L", {{"Medium", "Drawing"}, {"Medium", "Painting"}}}, keyword_catalog(), {true}).text ==
        "L, Painting, Drawing");
}

TEST_CASE("taxonomy parsing rejects malformed data") {
  CHECK_THROWS_AS(KeywordTaxonomy::from_json("{"), FormatError);
  CHECK_THROWS_AS(KeywordTaxonomy::from_json(R"({"version": 1, "categories": [{"name": "A", "keywords": [
    {"keyword": "x", "source": "selected"}, {"keyword": "X", "source": "selected"}]}]})"),
                  FormatError);
  CHECK_THROWS_AS(KeywordTaxonomy::from_json(R"({"version": 2, "categories": []})"), FormatError);
}
