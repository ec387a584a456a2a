#include "beatframe/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>
#include <unordered_map>

#include "beatframe/error.hpp"
#include "json.hpp"

namespace beatframe::data {
extern const std::string_view kStopwordsText;
}

namespace beatframe::metrics {

using json = nlohmann::json;

namespace {

bool is_word_char(unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80; }

void require_order(std::size_t n) {
  if (n == 0) throw ValidationError("n-gram order must be at least 1");
}

std::unordered_map<std::string, std::size_t> count_ngrams(const std::vector<std::string>& tokens, std::size_t n) {
  std::unordered_map<std::string, std::size_t> counts;
  for (auto& g : ngrams(tokens, n)) ++counts[g];
  return counts;
}

}  // namespace

std::vector<std::string> metric_tokens(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    std::size_t a = i;
    std::size_t b = j;
    while (a < b && !is_word_char(static_cast<unsigned char>(line[a]))) ++a;
    while (b > a && !is_word_char(static_cast<unsigned char>(line[b - 1]))) --b;
    if (b > a) {
      std::string word;
      for (std::size_t k = a; k < b; ++k) {
        const auto c = static_cast<unsigned char>(line[k]);
        if (is_word_char(c) || c == '\'' || c == '-') word += static_cast<char>(std::tolower(c));
      }
      if (!word.empty()) out.push_back(std::move(word));
    }
    i = j;
  }
  return out;
}

StopWords StopWords::parse(std::string_view text) {
  StopWords s;
  std::istringstream in{std::string(text)};
  const std::regex version_re(R"(version\s+(\d+))");
  for (std::string line; std::getline(in, line);) {
    if (const auto hash = line.find('#'); hash != std::string::npos) {
      std::smatch m;
      const std::string comment = line.substr(hash);
      if (s.version_ == 0 && std::regex_search(comment, m, version_re)) s.version_ = std::stoi(m[1]);
      line.resize(hash);
    }
    for (auto& w : metric_tokens(line)) s.words_.insert(std::move(w));
  }
  return s;
}

bool StopWords::contains(std::string_view word) const { return words_.count(std::string(word)) > 0; }

const StopWords& default_stopwords() {
  static const StopWords words = StopWords::parse(data::kStopwordsText);
  return words;
}

std::vector<std::string> content_words(std::string_view line, const StopWords& stopwords) {
  auto tokens = metric_tokens(line);
  std::erase_if(tokens, [&](const std::string& t) { return stopwords.contains(t); });
  return tokens;
}

std::vector<std::string> ngrams(const std::vector<std::string>& tokens, std::size_t n) {
  require_order(n);
  std::vector<std::string> out;
  if (tokens.size() < n) return out;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string g = tokens[i];
    for (std::size_t k = 1; k < n; ++k) g += " " + tokens[i + k];
    out.push_back(std::move(g));
  }
  return out;
}

double bleu_n(const std::vector<std::string>& candidates, const std::vector<std::string>& references,
              std::size_t max_n, double epsilon) {
  require_order(max_n);
  if (candidates.empty()) throw ValidationError("BLEU needs at least one candidate");
  if (candidates.size() != references.size()) throw ShapeError("BLEU needs one reference per candidate");
  if (!(epsilon > 0.0)) throw ValidationError("BLEU smoothing epsilon must be positive");

  std::vector<double> matches(max_n, 0.0);
  std::vector<double> totals(max_n, 0.0);
  double cand_len = 0.0;
  double ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto c = metric_tokens(candidates[i]);
    const auto r = metric_tokens(references[i]);
    cand_len += static_cast<double>(c.size());
    ref_len += static_cast<double>(r.size());
    for (std::size_t m = 1; m <= max_n; ++m) {
      const auto rc = count_ngrams(r, m);
      for (const auto& [g, count] : count_ngrams(c, m)) {
        const auto it = rc.find(g);
        matches[m - 1] += static_cast<double>(std::min(count, it == rc.end() ? 0 : it->second));
        totals[m - 1] += static_cast<double>(count);
      }
    }
  }
  double log_sum = 0.0;
  for (std::size_t m = 0; m < max_n; ++m) log_sum += std::log((matches[m] + epsilon) / (totals[m] + epsilon));
  double bp = 1.0;
  if (cand_len < ref_len) bp = cand_len == 0.0 ? 0.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

double distinct_n(const std::vector<std::string>& candidates, std::size_t n, std::string* warning) {
  require_order(n);
  if (candidates.empty()) throw ValidationError("distinct-n needs at least one line");
  std::unordered_set<std::string> unique;
  std::size_t total = 0;
  for (const auto& line : candidates) {
    for (auto& g : ngrams(metric_tokens(line), n)) {
      unique.insert(std::move(g));
      ++total;
    }
  }
  if (total == 0) {
    if (warning != nullptr) *warning = "distinct-" + std::to_string(n) + ": every line is shorter than n tokens";
    return 0.0;
  }
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

bool FrequencyList::contains(const std::string& ngram) const {
  if (index_.size() != entries.size()) {
    index_.clear();
    for (const auto& e : entries) index_.insert(e.ngram);
  }
  return index_.count(ngram) > 0;
}

std::string FrequencyList::to_json() const {
  json items = json::array();
  for (const auto& e : entries) items.push_back({e.ngram, e.count});
  return json{{"format", "beatframe-frequency-list"},
              {"n", n},
              {"limit", limit},
              {"stopwords_version", stopwords_version},
              {"source_lines", source_lines},
              {"entries", items}}
             .dump(1) +
         "\n";
}

FrequencyList FrequencyList::from_json(std::string_view text) {
  try {
    const auto j = json::parse(text);
    if (j.at("format") != "beatframe-frequency-list") throw FormatError("not a frequency list");
    FrequencyList f;
    f.n = j.at("n");
    f.limit = j.at("limit");
    f.stopwords_version = j.at("stopwords_version");
    f.source_lines = j.at("source_lines");
    for (const auto& e : j.at("entries")) f.entries.push_back({e.at(0).get<std::string>(), e.at(1).get<std::size_t>()});
    return f;
  } catch (const json::exception& e) {
    throw FormatError(std::string("frequency list: ") + e.what());
  }
}

void FrequencyList::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << to_json();
}

FrequencyList FrequencyList::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DecodeError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

FrequencyList build_frequency_list(const std::vector<std::string>& corpus, std::size_t n, std::size_t limit,
                                   const StopWords& stopwords) {
  require_order(n);
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& line : corpus) {
    for (auto& g : ngrams(content_words(line, stopwords), n)) ++counts[g];
  }
  FrequencyList f;
  f.n = n;
  f.limit = limit;
  f.stopwords_version = stopwords.version();
  f.source_lines = corpus.size();
  for (auto& [g, c] : counts) f.entries.push_back({g, c});
  std::sort(f.entries.begin(), f.entries.end(), [](const FrequencyEntry& a, const FrequencyEntry& b) {
    return a.count != b.count ? a.count > b.count : a.ngram < b.ngram;
  });
  if (f.entries.size() > limit) f.entries.resize(limit);
  return f;
}

double novelty_n(const std::vector<std::string>& candidates, const FrequencyList& frequent, std::size_t n,
                 const StopWords& stopwords) {
  require_order(n);
  if (frequent.entries.empty()) throw ValidationError("novelty needs a non-empty frequency list; build it first");
  if (frequent.n != n) {
    throw ValidationError("frequency list holds " + std::to_string(frequent.n) + "-grams, not " + std::to_string(n) +
                          "-grams");
  }
  std::size_t total = 0;
  std::size_t novel = 0;
  for (const auto& line : candidates) {
    for (const auto& g : ngrams(content_words(line, stopwords), n)) {
      ++total;
      if (!frequent.contains(g)) ++novel;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(novel) / static_cast<double>(total);
}

Coherence coherence(const std::vector<std::vector<std::string>>& songs, const StopWords& stopwords,
                    const CoherenceOptions& options) {
  if (songs.empty()) throw ValidationError("coherence needs at least one song");
  Coherence c;
  for (const auto& song : songs) {
    std::size_t tokens = 0;
    std::unordered_set<std::string> types;
    for (const auto& line : song) {
      for (auto& w : options.remove_stopwords ? content_words(line, stopwords) : metric_tokens(line)) {
        ++tokens;
        types.insert(std::move(w));
      }
    }
    if (tokens == 0) continue;
    const auto repeats = static_cast<double>(tokens - types.size());
    c.raw += repeats;
    c.normalized += repeats / static_cast<double>(tokens);
  }
  c.raw /= static_cast<double>(songs.size());
  c.normalized /= static_cast<double>(songs.size());
  return c;
}

double clip_score(const Eigen::VectorXd& image_embedding, const Eigen::VectorXd& text_embedding, double scale) {
  if (image_embedding.size() != text_embedding.size()) throw ShapeError("clip_score: embedding sizes differ");
  if (!(scale > 0.0)) throw ValidationError("clip_score: scale must be positive");
  const double ni = image_embedding.norm();
  const double nt = text_embedding.norm();
  if (ni == 0.0 || nt == 0.0) throw ValidationError("clip_score: zero embedding");
  return scale * std::max(image_embedding.dot(text_embedding) / (ni * nt), 0.0);
}

double cohens_kappa(const std::vector<std::vector<double>>& table) {
  const std::size_t k = table.size();
  if (k == 0) throw ValidationError("kappa needs a non-empty table");
  double n = 0.0;
  double agree = 0.0;
  std::vector<double> rows(k, 0.0);
  std::vector<double> cols(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    if (table[i].size() != k) throw ShapeError("kappa table must be square");
    for (std::size_t j = 0; j < k; ++j) {
      if (table[i][j] < 0.0) throw ValidationError("kappa table has a negative count");
      n += table[i][j];
      rows[i] += table[i][j];
      cols[j] += table[i][j];
    }
    agree += table[i][i];
  }
  if (n == 0.0) throw ValidationError("kappa table is empty");
  const double p_o = agree / n;
  double p_e = 0.0;
  for (std::size_t i = 0; i < k; ++i) p_e += (rows[i] / n) * (cols[i] / n);
  if (p_e == 1.0) return 1.0;
  return (p_o - p_e) / (1.0 - p_e);
}

double cohens_kappa(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  if (a.size() != b.size()) throw ShapeError("kappa needs equal-length label sequences");
  if (a.empty()) throw ValidationError("kappa needs at least one label");
  std::map<std::string, std::size_t> index;
  for (const auto& l : a) index.emplace(l, 0);
  for (const auto& l : b) index.emplace(l, 0);
  std::size_t next = 0;
  for (auto& [label, i] : index) i = next++;
  std::vector<std::vector<double>> table(index.size(), std::vector<double>(index.size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) table[index[a[i]]][index[b[i]]] += 1.0;
  return cohens_kappa(table);
}

double chi_square_sf_1(double x) {
  if (x <= 0.0) return 1.0;
  return std::erfc(std::sqrt(x / 2.0));
}

ChiSquare chi_square_independence(const std::array<std::array<double, 2>, 2>& table) {
  double n = 0.0;
  std::array<double, 2> rows{};
  std::array<double, 2> cols{};
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      if (table[i][j] < 0.0 || !std::isfinite(table[i][j])) throw ValidationError("chi-square: invalid count");
      rows[i] += table[i][j];
      cols[j] += table[i][j];
      n += table[i][j];
    }
  }
  if (rows[0] == 0.0 || rows[1] == 0.0 || cols[0] == 0.0 || cols[1] == 0.0) {
    throw ValidationError("chi-square: a row or column total is zero");
  }
  ChiSquare r;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      const double expected = rows[i] * cols[j] / n;
      const double d = table[i][j] - expected;
      r.statistic += d * d / expected;
    }
  }
  r.p_value = chi_square_sf_1(r.statistic);
  return r;
}

std::string MetricReport::to_json() const {
  return json{{"bleu_2", bleu_2},
              {"bleu_3", bleu_3},
              {"distinct_2", distinct_2},
              {"distinct_3", distinct_3},
              {"novelty_2", novelty_2},
              {"novelty_3", novelty_3},
              {"coherence", coherence},
              {"clip_score", clip_score},
              {"coherence_raw", coherence_raw},
              {"lines", lines},
              {"songs", songs},
              {"warnings", warnings}}
             .dump(2) +
         "\n";
}

}  // namespace beatframe::metrics
