#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace beatframe::metrics {

/// Lowercased whitespace tokens with surrounding punctuation stripped;
/// in-word apostrophes and hyphens are kept. Empty tokens are dropped.
std::vector<std::string> metric_tokens(std::string_view line);

class StopWords {
 public:
  /// One word per line; '#' starts a comment. The first comment may carry
  /// "version N".
  static StopWords parse(std::string_view text);
  bool contains(std::string_view word) const;
  std::size_t size() const { return words_.size(); }
  int version() const { return version_; }

 private:
  std::unordered_set<std::string> words_;
  int version_ = 0;
};

/// The bundled English list.
const StopWords& default_stopwords();

std::vector<std::string> content_words(std::string_view line, const StopWords& stopwords);

/// Space-joined n-grams of consecutive tokens.
std::vector<std::string> ngrams(const std::vector<std::string>& tokens, std::size_t n);

/// Corpus BLEU against one reference per candidate: clipped n-gram precision
/// for orders 1..max_n, uniform weights, brevity penalty. Each precision is
/// (matches + eps) / (total + eps).
double bleu_n(const std::vector<std::string>& candidates, const std::vector<std::string>& references,
              std::size_t max_n, double epsilon = 1e-9);

/// |unique n-grams| / |n-grams| pooled over all lines. No n-grams gives 0
/// and a warning.
double distinct_n(const std::vector<std::string>& candidates, std::size_t n, std::string* warning = nullptr);

struct FrequencyEntry {
  std::string ngram;
  std::size_t count = 0;
  bool operator==(const FrequencyEntry&) const = default;
};

/// The most frequent content-word n-grams of a corpus, sorted by count
/// descending then lexicographically.
struct FrequencyList {
  std::size_t n = 2;
  std::size_t limit = 2000;
  int stopwords_version = 0;
  std::size_t source_lines = 0;
  std::vector<FrequencyEntry> entries;

  bool contains(const std::string& ngram) const;
  std::string to_json() const;
  static FrequencyList from_json(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static FrequencyList load(const std::filesystem::path& path);
  bool operator==(const FrequencyList& o) const {
    return n == o.n && limit == o.limit && stopwords_version == o.stopwords_version &&
           source_lines == o.source_lines && entries == o.entries;
  }

 private:
  mutable std::unordered_set<std::string> index_;
};

FrequencyList build_frequency_list(const std::vector<std::string>& corpus, std::size_t n, std::size_t limit = 2000,
                                   const StopWords& stopwords = default_stopwords());

/// Share of content-word n-grams absent from the frequency list.
double novelty_n(const std::vector<std::string>& candidates, const FrequencyList& frequent, std::size_t n,
                 const StopWords& stopwords = default_stopwords());

struct CoherenceOptions {
  bool remove_stopwords = true;
};

struct Coherence {
  double normalized = 0.0;  // mean over songs of (tokens - types) / tokens
  double raw = 0.0;         // mean over songs of tokens - types
};

Coherence coherence(const std::vector<std::vector<std::string>>& songs, const StopWords& stopwords = default_stopwords(),
                    const CoherenceOptions& options = {});

/// scale * max(cos(image, text), 0)
double clip_score(const Eigen::VectorXd& image_embedding, const Eigen::VectorXd& text_embedding, double scale = 2.5);

/// Cohen's kappa from two label sequences. Constant identical raters give 1.
double cohens_kappa(const std::vector<std::string>& a, const std::vector<std::string>& b);
/// Same from a square confusion table (rows: rater a, columns: rater b).
double cohens_kappa(const std::vector<std::vector<double>>& table);

struct ChiSquare {
  double statistic = 0.0;
  double p_value = 1.0;
  int dof = 1;
};

/// Pearson chi-square test of independence on a 2x2 table, no continuity correction.
ChiSquare chi_square_independence(const std::array<std::array<double, 2>, 2>& table);

/// Upper tail of the chi-square distribution with one degree of freedom.
double chi_square_sf_1(double x);

struct MetricReport {
  double bleu_2 = 0.0;
  double bleu_3 = 0.0;
  double distinct_2 = 0.0;
  double distinct_3 = 0.0;
  double novelty_2 = 0.0;
  double novelty_3 = 0.0;
  double coherence = 0.0;
  double clip_score = 0.0;
  double coherence_raw = 0.0;
  std::size_t lines = 0;
  std::size_t songs = 0;
  std::vector<std::string> warnings;

  std::string to_json() const;
};

}  // namespace beatframe::metrics
