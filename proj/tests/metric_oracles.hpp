#pragma once

// Brute-force reference implementations over pre-tokenized (space separated,
// lowercase) text. They share no code with the library.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "beatframe/random.hpp"

namespace oracle {

using Gram = std::vector<std::string>;

inline std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

inline std::vector<Gram> grams(const std::vector<std::string>& t, std::size_t n) {
  std::vector<Gram> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) out.emplace_back(t.begin() + static_cast<long>(i), t.begin() + static_cast<long>(i + n));
  return out;
}

inline std::size_t occurrences(const std::vector<Gram>& list, const Gram& g) {
  return static_cast<std::size_t>(std::count(list.begin(), list.end(), g));
}

inline double bleu(const std::vector<std::string>& cands, const std::vector<std::string>& refs, std::size_t max_n,
                   double eps = 1e-9) {
  double log_sum = 0.0;
  for (std::size_t m = 1; m <= max_n; ++m) {
    double match = 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const auto cg = grams(split(cands[i]), m);
      const auto rg = grams(split(refs[i]), m);
      std::set<Gram> seen(cg.begin(), cg.end());
      for (const auto& g : seen) {
        match += static_cast<double>(std::min(occurrences(cg, g), occurrences(rg, g)));
      }
      total += static_cast<double>(cg.size());
    }
    log_sum += std::log((match + eps) / (total + eps));
  }
  double c = 0.0;
  double r = 0.0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    c += static_cast<double>(split(cands[i]).size());
    r += static_cast<double>(split(refs[i]).size());
  }
  const double bp = c >= r ? 1.0 : (c == 0.0 ? 0.0 : std::exp(1.0 - r / c));
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

inline double distinct(const std::vector<std::string>& lines, std::size_t n) {
  std::vector<Gram> all;
  for (const auto& l : lines) {
    for (auto& g : grams(split(l), n)) all.push_back(g);
  }
  if (all.empty()) return 0.0;
  std::size_t unique = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    bool first = true;
    for (std::size_t j = 0; j < i; ++j) first = first && all[j] != all[i];
    unique += first ? 1 : 0;
  }
  return static_cast<double>(unique) / static_cast<double>(all.size());
}

inline std::vector<std::string> strip(const std::vector<std::string>& t, const std::set<std::string>& stop) {
  std::vector<std::string> out;
  for (const auto& w : t) {
    if (!stop.count(w)) out.push_back(w);
  }
  return out;
}

inline double novelty(const std::vector<std::string>& lines, const std::set<Gram>& frequent, std::size_t n,
                      const std::set<std::string>& stop) {
  double total = 0.0;
  double novel = 0.0;
  for (const auto& l : lines) {
    for (const auto& g : grams(strip(split(l), stop), n)) {
      total += 1.0;
      novel += frequent.count(g) ? 0.0 : 1.0;
    }
  }
  return total == 0.0 ? 0.0 : novel / total;
}

inline double coherence(const std::vector<std::vector<std::string>>& songs, const std::set<std::string>& stop) {
  double sum = 0.0;
  for (const auto& song : songs) {
    std::vector<std::string> words;
    for (const auto& l : song) {
      for (const auto& w : strip(split(l), stop)) words.push_back(w);
    }
    if (words.empty()) continue;
    // A token is a repeat when the same word occurred earlier.
    double repeats = 0.0;
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (std::find(words.begin(), words.begin() + static_cast<long>(i), words[i]) != words.begin() + static_cast<long>(i)) repeats += 1.0;
    }
    sum += repeats / static_cast<double>(words.size());
  }
  return sum / static_cast<double>(songs.size());
}

inline double kappa(const std::vector<int>& a, const std::vector<int>& b, int k) {
  const double n = static_cast<double>(a.size());
  double agree = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) agree += a[i] == b[i] ? 1.0 : 0.0;
  double pe = 0.0;
  for (int c = 0; c < k; ++c) {
    double ca = 0.0;
    double cb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ca += a[i] == c ? 1.0 : 0.0;
      cb += b[i] == c ? 1.0 : 0.0;
    }
    pe += (ca / n) * (cb / n);
  }
  if (pe == 1.0) return 1.0;
  return (agree / n - pe) / (1.0 - pe);
}

inline double chi2(const std::array<std::array<double, 2>, 2>& t) {
  const double a = t[0][0], b = t[0][1], c = t[1][0], d = t[1][1];
  const double n = a + b + c + d;
  // Shortcut formula for 2x2 tables.
  return n * (a * d - b * c) * (a * d - b * c) / ((a + b) * (c + d) * (a + c) * (b + d));
}

inline std::string random_line(beatframe::Rng& rng, const std::vector<std::string>& vocab, std::size_t max_len) {
  const std::size_t len = rng.below(max_len + 1);
  std::string s;
  for (std::size_t i = 0; i < len; ++i) {
    if (i) s += ' ';
    s += vocab[rng.below(vocab.size())];
  }
  return s;
}

}  // namespace oracle
