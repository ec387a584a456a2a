// One PASS/FAIL line per acceptance criterion; exits 1 if any fails.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>

#include "beatframe/audio.hpp"
#include "beatframe/compositor.hpp"
#include "beatframe/error.hpp"
#include "beatframe/interpolation.hpp"
#include "beatframe/lyric_model.hpp"
#include "beatframe/metrics.hpp"
#include "beatframe/pipeline.hpp"
#include "beatframe/random.hpp"
#include "beatframe/service.hpp"
#include "lyric_fixtures.hpp"
#include "metric_oracles.hpp"
#include "pipeline_fixtures.hpp"
#include "test_support.hpp"
#include "httplib.h"
#include "json.hpp"

using namespace beatframe;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  // Records the first failure only.
  void expect(bool ok, const std::string& what) {
    if (!ok && pass) {
      pass = false;
      detail.str("");
      detail << what;
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

audio::MelSpectrogram mel_of(std::size_t bands, std::size_t frames, std::vector<double> values) {
  audio::MelSpectrogram m;
  m.n_mels = bands;
  m.frames = frames;
  m.values = std::move(values);
  return m;
}

Eigen::VectorXd random_unit(Rng& rng, Eigen::Index dim) {
  Eigen::VectorXd v(dim);
  for (Eigen::Index i = 0; i < dim; ++i) v(i) = rng.normal();
  return v / v.norm();
}

void beat_weights(Outcome& o) {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(2024);
  for (std::size_t n = 1; n <= 64; ++n) {
    for (double amplitude : {1e-6, 1.0, 3.5, 1e6}) {
      const std::size_t bands = 1 + rng.below(16);
      const std::size_t frames = 1 + rng.below(64);
      const auto env = audio::beat_weights(mel_of(bands, frames, std::vector<double>(bands * frames, amplitude)), n);
      for (std::size_t k = 0; k < n; ++k) {
        o.expect(std::abs(env.weights[k] - static_cast<double>(k + 1) / static_cast<double>(n)) <= 1e-9,
                 "constant input, N=" + std::to_string(n));
      }
    }
  }
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t bands = 1 + rng.below(40);
    const std::size_t frames = 1 + rng.below(40);
    std::vector<double> values(bands * frames);
    for (double& v : values) v = -std::log(1.0 - rng.uniform());
    const auto mel = mel_of(bands, frames, values);
    const std::size_t n = 1 + rng.below(64);
    const auto env = audio::beat_weights(mel, n);
    o.expect(env.weights.size() == n && env.weights.back() == 1.0, "w_N != 1");
    for (std::size_t k = 1; k < n; ++k) o.expect(env.weights[k] >= env.weights[k - 1], "not monotone");
    auto scaled = mel;
    const double c = std::exp(rng.uniform() * 13.8 - 6.9);
    for (double& v : scaled.values) v *= c;
    const auto env_scaled = audio::beat_weights(scaled, n);
    for (std::size_t k = 0; k < n; ++k) {
      o.expect(std::abs(env_scaled.weights[k] - env.weights[k]) <= 1e-9, "not scale invariant");
    }
  }
  const double t = seconds_since(start);
  o.expect(t < 5.0, "took " + std::to_string(t) + " s");
  if (o.pass) o.detail << "N=1..64 constant inputs, 1000 random spectrograms, " << t << " s";
}

void interpolation_geometry(Outcome& o) {
  Rng rng(7);
  double worst_norm = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const auto dim = static_cast<Eigen::Index>(2 + rng.below(1024));
    const auto a = random_unit(rng, dim);
    const auto b = random_unit(rng, dim);
    o.expect((interp::slerp(a, b, 0.0) - a).cwiseAbs().maxCoeff() <= 1e-12, "slerp(w=0) != n_i");
    o.expect((interp::slerp(a, b, 1.0) - b).cwiseAbs().maxCoeff() <= 1e-12, "slerp(w=1) != n_j");
    const double w = rng.uniform();
    worst_norm = std::max(worst_norm, std::abs(interp::slerp(a, b, w).norm() - 1.0));

    Eigen::VectorXd u = Eigen::VectorXd::Zero(dim);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
    const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(dim)));
    const auto j = (i + 1 + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(dim - 1)))) % dim;
    u(i) = 1.0;
    v(j) = 1.0;
    o.expect((interp::slerp(u, v, 0.5) - (u + v) / std::sqrt(2.0)).cwiseAbs().maxCoeff() <= 1e-9,
             "orthonormal midpoint");

    const Eigen::VectorXd x = a * 3.0;
    const Eigen::VectorXd y = b * 2.0;
    o.expect(interp::lerp_embeddings(x, y, 0.0) == x && interp::lerp_embeddings(x, y, 1.0) == y, "lerp endpoints");
    o.expect((interp::lerp_embeddings(x, y, 0.5) - 0.5 * (x + y)).cwiseAbs().maxCoeff() <= 1e-12, "lerp midpoint");
    o.expect(((interp::lerp_embeddings(x, y, w) - x) - w * (y - x)).cwiseAbs().maxCoeff() <= 1e-12, "lerp affine");
  }
  o.expect(worst_norm <= 1e-6, "norm drift " + std::to_string(worst_norm));
  if (o.pass) o.detail << "1000 pairs, worst norm drift " << worst_norm;
}

void kl_and_reparameterization(Outcome& o) {
  o.expect(lyrics::kl_divergence(Eigen::VectorXd::Zero(8), Eigen::VectorXd::Ones(8)) == 0.0, "KL(0,1) != 0");
  Rng rng(99);
  Rng draws(2024);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const Eigen::Index dim = 1 + static_cast<Eigen::Index>(rng.below(3));
    Eigen::VectorXd mu(dim), sigma(dim);
    for (Eigen::Index d = 0; d < dim; ++d) {
      mu(d) = (rng.uniform() * 2.0 - 1.0) * 1.5;
      sigma(d) = std::exp(rng.uniform() * 2.0 - 1.0);
    }
    const double analytic = lyrics::kl_divergence(mu, sigma);
    // E_q[log q(z) - log p(z)] with z ~ q.
    double total = 0.0;
    const std::size_t samples = 1000000;
    for (std::size_t s = 0; s < samples; ++s) {
      for (Eigen::Index d = 0; d < dim; ++d) {
        const double eps = draws.normal();
        const double z = mu(d) + sigma(d) * eps;
        total += -0.5 * eps * eps - std::log(sigma(d)) + 0.5 * z * z;
      }
    }
    const double mc = total / static_cast<double>(samples);
    const double rel = std::abs(mc - analytic) / analytic;
    worst = std::max(worst, rel);
    o.expect(rel <= 0.02, "state " + std::to_string(t) + ": closed form " + std::to_string(analytic) +
                              ", Monte Carlo " + std::to_string(mc));
    o.expect(lyrics::sample_latent(mu, sigma, Eigen::VectorXd::Zero(dim)) == mu, "sample_latent(eps=0) != mu");
  }
  if (o.pass) o.detail << "20 states, 1e6 samples, worst relative error " << worst;
}

lyrics::TokenVocab small_vocab() {
  return lyrics::TokenVocab::build(std::vector<std::string>{"hello world", "the night is young", "we sing along",
                                                            "stars fall down", "hold on tight", "dance until dawn"});
}

void gradient_check(Outcome& o) {
  const auto start = std::chrono::steady_clock::now();
  auto cfg = test_support::tiny_model_config(8, 2);
  cfg.decoder.memory_slots = 2;
  lyrics::LyricModel model(cfg, small_vocab());
  Rng rng(3);
  for (auto& [name, p] : model.parameters()) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += rng.normal() * 0.3;
  }
  const lyrics::TrainingExample ex{test_support::random_mel(8, 10, 4), "we sing along", "hello world"};
  Eigen::VectorXd eps(4);
  eps << 0.3, -0.7, 1.1, 0.2;
  const double beta = 0.7;
  model.parameters().zero_grad();
  model.accumulate_gradients(ex, beta, eps);
  const double h = 1e-4;
  double worst = 0.0;
  std::size_t tensors = 0;
  for (auto& [name, p] : model.parameters()) {
    Eigen::VectorXd analytic(p.value.size()), numeric(p.value.size());
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      double& w = p.value.data()[i];
      const double orig = w;
      w = orig + h;
      const double up = model.evaluate_loss(ex, beta, eps).total;
      w = orig - h;
      const double down = model.evaluate_loss(ex, beta, eps).total;
      w = orig;
      numeric(i) = (up - down) / (2 * h);
      analytic(i) = p.grad.data()[i];
    }
    ++tensors;
    // Key biases cancel in the softmax, so both gradients are rounding noise.
    if ((analytic - numeric).cwiseAbs().maxCoeff() <= 1e-9 && analytic.norm() < 1e-12) continue;
    const double rel = (analytic - numeric).norm() / std::max(1e-8, analytic.norm() + numeric.norm());
    worst = std::max(worst, rel);
    o.expect(rel < 1e-3, name + " relative error " + std::to_string(rel));
  }
  const double t = seconds_since(start);
  o.expect(t < 120.0, "took " + std::to_string(t) + " s");
  if (o.pass) o.detail << tensors << " tensors, worst relative error " << worst << ", " << t << " s";
}

void overfit(Outcome& o) {
  const auto start = std::chrono::steady_clock::now();
  const std::vector<std::string> words{"love", "night", "fire", "rain", "heart", "road", "sky", "dream",
                                       "dance", "shine", "fall", "run", "hold", "home", "city", "ocean"};
  Rng rng(5);
  std::vector<std::string> targets;
  for (int i = 0; i < 32; ++i) {
    std::string line;
    for (std::size_t w = 0, len = 2 + rng.below(3); w < len; ++w) line += (w ? " " : "") + words[rng.below(words.size())];
    targets.push_back(line);
  }
  const auto vocab = lyrics::TokenVocab::build(targets);
  const lyrics::ModelConfig cfg = [] {
    lyrics::ModelConfig c;
    c.init_seed = 11;
    return c;
  }();
  std::vector<lyrics::TrainingExample> data;
  for (int i = 0; i < 32; ++i) {
    const auto mel = test_support::random_mel(cfg.encoder.input_mels, 64, 100 + static_cast<std::uint64_t>(i), 80.0);
    data.push_back({mel, i == 0 ? "<START>" : targets[static_cast<std::size_t>(i - 1)], targets[static_cast<std::size_t>(i)]});
  }
  lyrics::LyricModel model(cfg, vocab);
  lyrics::TrainConfig tc;
  tc.epochs = 200;
  tc.batch_size = 8;
  tc.learning_rate = 2e-3;
  tc.seed = 1;
  tc.target_reduction = 0.9;
  double first = 0.0;
  double best = 0.0;
  std::size_t reached = 0;
  lyrics::train(model, data, tc, [&](const lyrics::EpochLoss& e) {
    if (first == 0.0) first = e.reconstruction;
    best = e.reconstruction;
    reached = e.epoch;
  });
  const double reduction = 1.0 - best / first;
  o.expect(reduction >= 0.9, "reconstruction fell by " + std::to_string(100 * reduction) + "%");

  auto tiny = test_support::tiny_model_config(16);
  lyrics::LyricModel single(tiny, small_vocab());
  const auto mel = test_support::random_mel(8, 8, 21);
  const std::vector<lyrics::TrainingExample> one{{mel, "<START>", "hello world"}};
  lyrics::TrainConfig sc;
  sc.epochs = 120;
  sc.batch_size = 1;
  sc.learning_rate = 1e-2;
  sc.seed = 1;
  lyrics::train(single, one, sc);
  const auto decoded = single.decode_line(single.infer_latent(mel, 0).mu, std::vector<int>{lyrics::TokenVocab::kStart},
                                          lyrics::SamplingConfig::greedy());
  o.expect(decoded.text == "hello world", "1-pair greedy decode gave '" + decoded.text + "'");
  const double t = seconds_since(start);
  o.expect(t < 600.0, "took " + std::to_string(t) + " s");
  if (o.pass) {
    o.detail << "32 pairs: -" << 100 * reduction << "% (90% at epoch " << reached << "), 1 pair: '" << decoded.text
             << "', " << t << " s";
  }
}

void beta_schedule(Outcome& o) {
  const lyrics::TrainConfig c;
  const std::array<double, 4> progress{0.25, 0.5, 0.75, 1.0};
  const std::array<double, 4> expected{1e-5, 1e-5, 1e-5 + 0.5 * (1.0 - 1e-5), 1.0};
  for (std::size_t i = 0; i < 4; ++i) {
    const double b = lyrics::beta_schedule(progress[i], c);
    o.expect(std::abs(b - expected[i]) <= 1e-15, "beta(" + std::to_string(progress[i]) + ") = " + std::to_string(b));
    o.detail << (i ? ", " : "") << b;
  }
}

// Sort, prefix-sum and expand ties in long double.
std::vector<double> filter_oracle(const std::vector<double>& logits, std::size_t top_k, double top_p, double temp) {
  const std::size_t n = logits.size();
  std::vector<long double> p(n);
  long double mx = -INFINITY;
  for (double l : logits) mx = std::max(mx, static_cast<long double>(l) / temp);
  long double z = 0;
  for (std::size_t i = 0; i < n; ++i) z += p[i] = std::exp(static_cast<long double>(logits[i]) / temp - mx);
  for (auto& v : p) v /= z;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
  const long double kth = p[idx[std::min(top_k, n) - 1]];
  std::vector<std::size_t> cand;
  long double mass = 0;
  for (auto i : idx) {
    if (p[i] >= kth) {
      cand.push_back(i);
      mass += p[i];
    }
  }
  long double cum = 0;
  long double cut = 0;
  for (auto i : cand) {
    cum += p[i] / mass;
    cut = p[i];
    if (cum >= top_p && top_p < 1.0) break;
  }
  std::vector<double> out(n, 0.0);
  long double kept = 0;
  for (auto i : cand) {
    if (p[i] >= cut) kept += p[i];
  }
  for (auto i : cand) {
    if (p[i] >= cut) out[i] = static_cast<double>(p[i] / kept);
  }
  return out;
}

void sampling_filter(Outcome& o) {
  Rng rng(11);
  std::size_t with_ties = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(50);
    std::vector<double> logits(n);
    for (auto& l : logits) l = rng.normal() * 3.0;
    if (trial % 2 == 0) {
      for (std::size_t i = 0; i < n; ++i) {
        if (rng.uniform() < 0.3) logits[i] = logits[rng.below(n)];
      }
      ++with_ties;
    }
    lyrics::SamplingConfig s;
    s.top_k = 1 + rng.below(n + 5);
    s.top_p = trial % 10 == 0 ? 1.0 : 0.05 + 0.95 * rng.uniform();
    s.temperature = 0.3 + 1.7 * rng.uniform();
    const auto got = lyrics::filter_logits(logits, s);
    const auto want = filter_oracle(logits, s.top_k, s.top_p, s.temperature);
    for (std::size_t i = 0; i < n; ++i) {
      o.expect((got[i] > 0.0) == (want[i] > 0.0), "support differs in trial " + std::to_string(trial));
      worst = std::max(worst, std::abs(got[i] - want[i]));
    }
  }
  // Renormalized probabilities are computed in double against a long double oracle.
  o.expect(worst <= 1e-12, "probability difference " + std::to_string(worst));
  if (o.pass) o.detail << "200 distributions (" << with_ties << " with ties), max difference " << worst;
}

bool close(double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(b)); }

void metrics_oracles(Outcome& o) {
  using namespace metrics;
  const std::vector<std::string> vocab{"love", "night", "the", "fire", "a", "heart", "rain", "and", "road", "you"};
  const auto& stop = default_stopwords();
  std::set<std::string> stop_words;
  for (const auto& w : vocab) {
    if (stop.contains(w)) stop_words.insert(w);
  }
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const std::string tag = " (corpus " + std::to_string(trial) + ")";
    std::vector<std::string> cands;
    std::vector<std::string> refs;
    for (std::size_t i = 0, lines = 1 + rng.below(10); i < lines; ++i) {
      cands.push_back(oracle::random_line(rng, vocab, 8));
      refs.push_back(oracle::random_line(rng, vocab, 8));
    }
    for (std::size_t n : {2u, 3u}) {
      o.expect(close(bleu_n(cands, refs, n), oracle::bleu(cands, refs, n)), "BLEU" + tag);
      o.expect(close(distinct_n(cands, n), oracle::distinct(cands, n)), "Distinct" + tag);
      std::vector<std::string> train;
      for (int i = 0; i < 15; ++i) train.push_back(oracle::random_line(rng, vocab, 6));
      const auto freq = build_frequency_list(train, n, 1 + rng.below(12), stop);
      std::set<oracle::Gram> top;
      for (const auto& e : freq.entries) top.insert(oracle::split(e.ngram));
      if (!freq.entries.empty()) {
        o.expect(close(novelty_n(cands, freq, n, stop), oracle::novelty(cands, top, n, stop_words)), "Novelty" + tag);
      }
    }
    std::vector<std::vector<std::string>> songs;
    for (std::size_t s = 0, count = 1 + rng.below(4); s < count; ++s) {
      songs.emplace_back();
      for (std::size_t i = 0, len = rng.below(5); i < len; ++i) songs.back().push_back(oracle::random_line(rng, vocab, 6));
    }
    o.expect(close(coherence(songs, stop).normalized, oracle::coherence(songs, stop_words)), "coherence" + tag);

    const int k = 2 + static_cast<int>(rng.below(3));
    std::vector<int> la;
    std::vector<int> lb;
    std::vector<std::string> sa;
    std::vector<std::string> sb;
    for (std::size_t i = 0, n = 1 + rng.below(40); i < n; ++i) {
      la.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(k))));
      lb.push_back(rng.uniform() < 0.6 ? la.back() : static_cast<int>(rng.below(static_cast<std::uint64_t>(k))));
      sa.push_back("c" + std::to_string(la.back()));
      sb.push_back("c" + std::to_string(lb.back()));
    }
    o.expect(close(cohens_kappa(sa, sb), oracle::kappa(la, lb, k)), "kappa" + tag);
    std::array<std::array<double, 2>, 2> table{};
    for (auto& row : table) {
      for (auto& v : row) v = static_cast<double>(1 + rng.below(50));
    }
    o.expect(close(chi_square_independence(table).statistic, oracle::chi2(table)), "chi-square" + tag);
  }
  const double d2 = distinct_n({"a b a b"}, 2);
  const double kappa = cohens_kappa({{20, 5}, {5, 20}});
  const double chi2 = chi_square_independence({{{10, 20}, {20, 10}}}).statistic;
  o.expect(std::abs(d2 - 2.0 / 3.0) <= 1e-12, "distinct-2 anchor " + std::to_string(d2));
  o.expect(std::abs(kappa - 0.6) <= 1e-12, "kappa anchor " + std::to_string(kappa));
  o.expect(std::abs(chi2 - 20.0 / 3.0) <= 1e-12, "chi-square anchor " + std::to_string(chi2));
  if (o.pass) o.detail << "20 corpora and tables; distinct-2 " << d2 << ", kappa " << kappa << ", chi2 " << chi2;
}

void timeline_math(Outcome& o) {
  std::vector<compositor::LyricCue> lines;
  for (int i = 0; i < 6; ++i) lines.push_back({5.0 * i, "line " + std::to_string(i)});
  auto t = compositor::build_timeline(lines, 30.0);
  o.expect(t.segments.size() == 6 && t.transition_count() == 5, "segment count");
  for (std::size_t i = 0; i + 1 < t.segments.size(); ++i) {
    o.expect(t.segments[i].transition && t.segments[i].keyframes.size() == 5, "transition " + std::to_string(i));
  }
  o.expect(!t.segments.back().transition && t.segments.back().keyframes.size() == 1, "terminal hold");
  int n = 0;
  for (auto& s : t.segments) {
    for (auto& k : s.keyframes) k.image = Image(16, 16, static_cast<std::uint8_t>(20 + 37 * n++ % 200));
  }
  compositor::VideoSpec spec;
  std::size_t rendered = 0;
  compositor::for_each_frame(t, spec, [&](std::size_t, const Image&) { ++rendered; });
  const double expected = std::round(spec.fps * 30.0);
  o.expect(std::abs(static_cast<double>(rendered) - expected) <= 1.0, "rendered " + std::to_string(rendered));
  if (o.pass) {
    o.detail << t.transition_count() << " transitions x 5 keyframes + hold, " << rendered << " frames at " << spec.fps
             << " fps";
  }
}

void end_to_end(Outcome& o) {
  pipeline_fixtures::Workspace ws;
  const auto start = std::chrono::steady_clock::now();
  const auto result = pipeline::run_pipeline(ws.project(), ws.env);
  const double t = seconds_since(start);
  const auto manifest_text = pipeline_fixtures::read_file(result.project.manifest_path);
  std::string detail;
  o.expect(pipeline_fixtures::matches_golden(compositor::FrameManifest::from_json(manifest_text), &detail),
           "golden mismatch: " + detail);
  o.expect(t < 60.0, "took " + std::to_string(t) + " s");
  const auto again = pipeline::run_pipeline(result.project, ws.env);
  o.expect(again.report.runs() == 0 && again.report.hits() == result.report.runs(),
           "rerun ran " + std::to_string(again.report.runs()) + " steps");
  o.expect(pipeline_fixtures::read_file(again.project.manifest_path) == manifest_text, "rerun manifest differs");
  if (o.pass) {
    o.detail << "golden manifest matched, " << t << " s, rerun " << again.report.hits() << "/" << again.report.hits()
             << " cache hits";
  }
}

void service_flow(Outcome& o) {
  test_support::TempDir dir;
  const auto data = dir / "data";
  backend::StubBackend stub;
  auto model = pipeline::toy_lyric_model();
  service::ServiceConfig config;
  config.port = 0;
  config.data_dir = data;
  std::size_t snapshots = 0;

  // Every acknowledged mutation must survive a crash right after it: reopen a copy of the data directory.
  auto crash_restart = [&](const std::string& id, const std::function<bool(const json&)>& check, const std::string& what) {
    const auto copy = dir / ("crash" + std::to_string(snapshots++));
    fs::copy(data, copy, fs::copy_options::recursive);
    auto c = config;
    c.data_dir = copy;
    service::Service restarted(c, {&stub, &model});
    httplib::Client cli("127.0.0.1", restarted.start());
    const auto r = cli.Get("/projects/" + id);
    o.expect(r && r->status == 200 && check(json::parse(r->body)), "lost after restart: " + what);
    restarted.stop();
  };
  auto wait_done = [&](httplib::Client& cli, const std::string& job) {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(120);
    for (;;) {
      const auto j = json::parse(cli.Get("/jobs/" + job)->body);
      if (j["state"] == "done" || j["state"] == "failed") return j["state"] == "done";
      if (std::chrono::steady_clock::now() > deadline) return false;
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
  };

  service::Service svc(config, {&stub, &model});
  httplib::Client cli("127.0.0.1", svc.start());
  const auto bytes = audio::encode_wav(test_support::fixture_song(15.0));
  httplib::MultipartFormDataItems items = {{"audio", std::string(bytes.begin(), bytes.end()), "song.wav", "audio/wav"}};
  const auto created = cli.Post("/projects", items);
  if (!created || created->status != 201) {
    o.expect(false, "upload failed");
    return;
  }
  const std::string id = json::parse(created->body)["id"];
  const std::string base = "/projects/" + id;
  crash_restart(id, [](const json& p) { return p["duration"] == 15.0; }, "upload");

  const json keywords = {{"keywords", {{{"category", "Medium"}, {"keyword", "Painting"}},
                                       {{"category", "Light"}, {"keyword", "Warm light"}}}}};
  o.expect(cli.Put(base + "/keywords", keywords.dump(), "application/json")->status == 200, "keywords");
  crash_restart(id, [&](const json& p) { return p["keywords"] == keywords["keywords"]; }, "keywords");

  const auto gen = cli.Post(base + "/generate");
  o.expect(gen->status == 202, "generate");
  o.expect(wait_done(cli, json::parse(gen->body)["id"]), "first job");
  const auto video = cli.Get(base + "/video");
  o.expect(video && video->status == 200 && video->body.size() > 1000, "video");
  const auto generated = json::parse(cli.Get(base)->body);
  o.expect(generated["lines"].size() == 3 && generated["segments"].size() == 3, "lyrics and segments");
  crash_restart(id, [](const json& p) { return p["generated"] == true && p["dirty"].empty(); }, "generation");

  o.expect(cli.Put(base + "/order", json{{"order", {0, 2, 1}}}.dump(), "application/json")->status == 200, "reorder");
  crash_restart(id, [](const json& p) { return p["order"] == json({0, 2, 1}); }, "reorder");
  o.expect(cli.Put(base + "/segments/1/choice", json{{"candidate", "s1c2"}}.dump(), "application/json")->status == 200,
           "substitute");
  crash_restart(id, [](const json& p) { return p["segments"][1]["chosen"] == "s1c2" && p["dirty"] == json({"compose"}); },
                "substitute");

  const auto regen = cli.Post(base + "/generate");
  const std::string regen_id = json::parse(regen->body)["id"];
  o.expect(wait_done(cli, regen_id), "regenerate");
  const auto job = json::parse(cli.Get("/jobs/" + regen_id)->body);
  std::size_t ran = 0;
  for (const auto& [stage, counts] : job["stages"].items()) ran += counts["runs"].get<std::size_t>();
  o.expect(ran == 1 && job["stages"]["compose"]["runs"] == 1, "regenerate ran " + std::to_string(ran) + " steps");
  o.expect(cli.Get(base + "/video")->body != video->body, "video unchanged after edits");
  crash_restart(id, [](const json& p) {
    return p["order"] == json({0, 2, 1}) && p["segments"][1]["chosen"] == "s1c2" && p["dirty"].empty();
  }, "regeneration");
  svc.stop();
  if (o.pass) o.detail << "upload, keywords, generate, reorder, substitute, regenerate; " << snapshots << " crash restarts";
}

}  // namespace

int main(int argc, char** argv) {
  // An optional argument runs only the criteria whose name contains it.
  const std::string only = argc > 1 ? argv[1] : "";
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria = {
      {"beat-weight procedure", beat_weights},
      {"interpolation geometry", interpolation_geometry},
      {"KL and reparameterization", kl_and_reparameterization},
      {"gradient check", gradient_check},
      {"overfit oracle", overfit},
      {"beta schedule", beta_schedule},
      {"sampling filter", sampling_filter},
      {"metrics oracle equivalence", metrics_oracles},
      {"timeline math", timeline_math},
      {"end-to-end determinism", end_to_end},
      {"service integration", service_flow},
  };
  int failures = 0;
  std::size_t ran = 0;
  for (const auto& [name, run] : criteria) {
    if (name.find(only) == std::string::npos) continue;
    ++ran;
    Outcome o;
    try {
      run(o);
    } catch (const std::exception& e) {
      o.expect(false, std::string("threw: ") + e.what());
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS  " : "FAIL  ") << name << ": " << o.detail.str() << std::endl;
  }
  std::cout << (ran - static_cast<std::size_t>(failures)) << "/" << ran << " criteria passed"
            << std::endl;
  return failures == 0 ? 0 : 1;
}
