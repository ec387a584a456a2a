#include <signal.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "beatframe/backend.hpp"
#include "beatframe/dataset.hpp"
#include "beatframe/digest.hpp"
#include "beatframe/error.hpp"
#include "beatframe/evaluation.hpp"
#include "beatframe/lyric_model.hpp"
#include "beatframe/pipeline.hpp"
#include "beatframe/prompt.hpp"
#include "beatframe/service.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace beatframe;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

bool use_color() {
  const char* no_color = std::getenv("NO_COLOR");
  return (no_color == nullptr || *no_color == '\0') && ::isatty(STDERR_FILENO) == 1;
}

void diagnose(const std::string& message) {
  if (use_color()) {
    std::cerr << "\033[1;31merror:\033[0m " << message << '\n';
  } else {
    std::cerr << "error: " << message << '\n';
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError("cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw FormatError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

std::unique_ptr<backend::IllustrationBackend> make_backend(const std::string& kind, const std::string& endpoint) {
  if (kind == "remote") {
    auto d = backend::remote_descriptor_from_env();
    if (!endpoint.empty()) d.endpoint = endpoint;
    d.validate();
    return backend::make_backend(d);
  }
  return backend::make_backend({});
}

lyrics::LyricModel load_model(const fs::path& checkpoint) {
  if (checkpoint.empty()) return pipeline::toy_lyric_model();
  return lyrics::LyricModel::load(checkpoint);
}

std::vector<dataset::MusicLyricPair> pairs_for(const std::vector<dataset::MusicLyricPair>& pairs,
                                               const std::vector<std::string>& songs) {
  const std::set<std::string> keep(songs.begin(), songs.end());
  std::vector<dataset::MusicLyricPair> out;
  for (const auto& p : pairs) {
    if (keep.count(p.song_id) != 0) out.push_back(p);
  }
  return out;
}

fs::path default_split_path(const fs::path& manifest) {
  return manifest.parent_path() / (manifest.stem().string() + ".split.json");
}

// --- generate ---------------------------------------------------------------

struct GenerateArgs {
  fs::path music;
  std::string keywords;
  std::uint64_t seed = 0;
  std::string backend = "stub";
  std::string endpoint;
  fs::path out;
  fs::path checkpoint;
  fs::path cache;
  int fps = 12;
  std::size_t alternatives = 3;
  bool burn_subtitles = false;
};

int run_generate(const GenerateArgs& a) {
  const auto selection = prompt::parse_keyword_list(a.keywords);
  if (const auto v = prompt::validate_keywords(selection); !v.empty()) {
    std::string message;
    for (const auto& x : v) message += (message.empty() ? "" : "; ") + x.message;
    if (v.front().kind == prompt::ViolationKind::kUnknownKeyword) {
      const auto* cat = prompt::keyword_catalog().find_category(v.front().category);
      std::string allowed;
      for (const auto& k : cat->keywords) allowed += (allowed.empty() ? "" : ", ") + k.text;
      message += "\n  " + cat->name + " keywords: " + allowed;
    }
    throw ValidationError(message + "\n  categories: " + prompt::category_names());
  }
  if (!fs::exists(a.music)) throw ValidationError("music file '" + a.music.string() + "' does not exist");

  const fs::path out = fs::absolute(a.out);
  const fs::path parent = out.parent_path();
  fs::create_directories(parent);
  const fs::path work = parent / ("." + out.stem().string() + ".beatframe-work");
  const fs::path cache_dir = a.cache.empty() ? parent / ".beatframe-cache" : a.cache;

  pipeline::StageCache cache(cache_dir);
  auto illustrator = make_backend(a.backend, a.endpoint);
  const auto model = load_model(a.checkpoint);
  pipeline::Environment env;
  env.cache = &cache;
  env.backend = illustrator.get();
  env.model = &model;

  pipeline::Project project;
  project.id = out.stem().string();
  project.audio_path = fs::absolute(a.music);
  project.keywords = selection;
  project.seed = a.seed;
  project.output_dir = work;
  project.config.timeline.fps = a.fps;
  project.config.alternatives = a.alternatives;
  project.config.burn_subtitles = a.burn_subtitles;

  const auto result = pipeline::run_pipeline(project, env);
  const auto& p = result.project;
  const fs::path vtt = parent / (out.stem().string() + ".vtt");
  const fs::path manifest = parent / (out.stem().string() + ".frames.json");
  const fs::path project_file = parent / (out.stem().string() + ".project.json");
  fs::rename(p.video_path, out);
  fs::rename(p.subtitles_path, vtt);
  fs::rename(p.manifest_path, manifest);
  auto saved = p;
  saved.video_path = out;
  saved.subtitles_path = vtt;
  saved.manifest_path = manifest;
  saved.output_dir = parent;
  saved.save(project_file);
  fs::remove_all(work);

  for (const auto& l : p.lines) std::cout << compositor::format_vtt_time(l.start) << "  " << l.text << '\n';
  std::cout << out.string() << '\n';
  std::cerr << "stages: " << result.report.runs() << " run, " << result.report.hits() << " cached\n";
  return 0;
}

// --- train ------------------------------------------------------------------

lyrics::TrainConfig train_config_from(const json& j) {
  lyrics::TrainConfig c;
  const auto get = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  get("learning_rate", c.learning_rate);
  get("beta_floor", c.beta_floor);
  get("beta_warm_fraction", c.beta_warm_fraction);
  get("grad_clip", c.grad_clip);
  get("seed", c.seed);
  get("use_kl", c.use_kl);
  get("decoder_only", c.decoder_only);
  get("target_reduction", c.target_reduction);
  c.validate();
  return c;
}

int run_train(const fs::path& manifest, const fs::path& config_path, const fs::path& out, const fs::path& split_path,
              const fs::path& log_path) {
  const auto config = read_json(config_path);
  static const std::set<std::string> kKeys = {"preset", "model", "train", "vocab_min_count"};
  for (const auto& [key, value] : config.items()) {
    if (kKeys.count(key) == 0) throw ValidationError("unknown training config key '" + key + "'");
  }
  lyrics::ModelConfig model_config;
  try {
    const std::string preset = config.value("preset", "default");
    if (preset == "toy") {
      model_config = pipeline::toy_lyric_model().config();
    } else if (preset != "default") {
      throw ValidationError("preset must be 'default' or 'toy'");
    }
    auto merged = json::parse(model_config.to_json());
    if (config.contains("model")) merged.merge_patch(config.at("model"));
    model_config = lyrics::ModelConfig::from_json(merged.dump());
    model_config.validate();
  } catch (const json::exception& e) {
    throw FormatError(std::string("training config: ") + e.what());
  }
  lyrics::TrainConfig train_config;
  try {
    train_config = train_config_from(config.value("train", json::object()));
  } catch (const json::exception& e) {
    throw FormatError(std::string("training config: ") + e.what());
  }

  auto pairs = dataset::read_manifest(manifest);
  const fs::path split_file = split_path.empty() ? default_split_path(manifest) : split_path;
  if (fs::exists(split_file)) {
    pairs = pairs_for(pairs, evaluation::split_from_assignment(evaluation::read_split(split_file)).train);
  } else if (!split_path.empty()) {
    throw ValidationError("split file '" + split_path.string() + "' does not exist");
  }
  if (pairs.empty()) throw ValidationError("no training pairs in '" + manifest.string() + "'");

  std::vector<std::string> corpus;
  for (const auto& p : pairs) corpus.push_back(p.target_line);
  auto vocab = lyrics::TokenVocab::build(corpus, config.value("vocab_min_count", std::size_t{1}));
  lyrics::LyricModel model(model_config, std::move(vocab));
  const auto examples = dataset::load_training_examples(pairs, model_config.mel);

  std::ofstream log_file;
  if (!log_path.empty()) {
    log_file.open(log_path);
    if (!log_file) throw Error("cannot write '" + log_path.string() + "'");
  }
  std::ostream& log = log_path.empty() ? std::cout : log_file;
  lyrics::train(model, examples, train_config, [&](const lyrics::EpochLoss& e) {
    log << json{{"epoch", e.epoch},
                {"reconstruction", e.reconstruction},
                {"kl", e.kl},
                {"beta", e.beta},
                {"total", e.total}}
               .dump()
        << '\n'
        << std::flush;
  });
  if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
  model.save(out);
  std::cerr << "trained on " << examples.size() << " pairs, vocabulary " << model.vocab().size() << ", wrote "
            << out.string() << '\n';
  return 0;
}

// --- evaluate ---------------------------------------------------------------

int run_evaluate(const fs::path& manifest, const fs::path& checkpoint, const fs::path& report_path,
                 const fs::path& split_path, double train_fraction, std::uint64_t seed, const std::string& backend_kind,
                 const std::string& endpoint) {
  const auto pairs = dataset::read_manifest(manifest);
  if (pairs.empty()) throw ValidationError("no pairs in '" + manifest.string() + "'");
  const fs::path split_file = split_path.empty() ? default_split_path(manifest) : split_path;
  evaluation::SongSplit split;
  if (fs::exists(split_file)) {
    split = evaluation::split_from_assignment(evaluation::read_split(split_file));
  } else if (!split_path.empty()) {
    throw ValidationError("split file '" + split_path.string() + "' does not exist");
  } else {
    split = evaluation::split_pairs(pairs, train_fraction, seed);
  }
  const auto model = lyrics::LyricModel::load(checkpoint);
  auto illustrator = make_backend(backend_kind, endpoint);
  evaluation::EvaluationOptions options;
  options.seed = seed;
  const auto result = evaluation::evaluate(model, pairs, split, *illustrator, options);

  if (!report_path.parent_path().empty()) fs::create_directories(report_path.parent_path());
  std::ofstream out(report_path);
  if (!out) throw Error("cannot write '" + report_path.string() + "'");
  out << result.report.to_json();
  const auto& r = result.report;
  std::cout << "songs " << r.songs << ", lines " << r.lines << '\n'
            << "BLEU-2 " << r.bleu_2 << "  BLEU-3 " << r.bleu_3 << '\n'
            << "Distinct-2 " << r.distinct_2 << "  Distinct-3 " << r.distinct_3 << '\n'
            << "Novelty-2 " << r.novelty_2 << "  Novelty-3 " << r.novelty_3 << '\n'
            << "Coherence " << r.coherence << "  CLIPScore " << r.clip_score << '\n';
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
  return 0;
}

// --- keywords / dataset / serve -----------------------------------------------

int run_keywords(bool as_json) {
  const auto& catalog = prompt::keyword_catalog();
  if (as_json) {
    json cats = json::array();
    for (const auto& c : catalog.categories()) {
      json kws = json::array();
      for (const auto& k : c.keywords) kws.push_back(k.text);
      cats.push_back({{"name", c.name}, {"keywords", kws}});
    }
    std::cout << json{{"categories", cats}}.dump(2) << '\n';
    return 0;
  }
  for (const auto& c : catalog.categories()) {
    std::cout << c.name << ":\n";
    for (const auto& k : c.keywords) std::cout << "  " << k.text << '\n';
  }
  return 0;
}

int run_dataset_build(const fs::path& dali, const fs::path& out, const fs::path& split_path, double train_fraction,
                      std::uint64_t seed, double clip_seconds) {
  if (!fs::is_directory(dali)) throw ValidationError("'" + dali.string() + "' is not a directory");
  const auto songs = dataset::load_corpus(dali);
  const auto ingest = dataset::ingest(songs, clip_seconds);
  if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
  dataset::write_manifest(ingest.pairs, out);
  const auto split = dataset::stratified_split(songs, train_fraction, seed);
  const fs::path split_file = split_path.empty() ? default_split_path(out) : split_path;
  dataset::write_split(split, split_file);
  for (const auto& s : ingest.skipped) {
    std::cerr << "warning: skipped " << s.song_id << " line " << s.line_index << ": " << s.reason << '\n';
  }
  for (const auto& w : split.warnings) std::cerr << "warning: " << w << '\n';
  std::cout << songs.size() << " songs, " << ingest.pairs.size() << " pairs (" << split.train.size() << " train / "
            << split.test.size() << " test songs)\n"
            << out.string() << '\n'
            << split_file.string() << '\n';
  return 0;
}

int run_serve(const fs::path& config_path, int port, const fs::path& data_dir) {
  auto config = config_path.empty() ? service::ServiceConfig{} : service::ServiceConfig::load(config_path);
  service::apply_env_overrides(config);
  if (port >= 0) config.port = port;
  if (!data_dir.empty()) config.data_dir = data_dir;

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  service::Service svc(config);
  const int bound = svc.start();
  std::cerr << "listening on http://" << config.host << ":" << bound << '\n';
  int received = 0;
  sigwait(&signals, &received);
  std::cerr << "shutting down\n";
  svc.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"beatframe: music to lyric-illustrated video"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Run the full pipeline on a music file");
  generate->add_option("--music", gen.music, "WAV or MP3 input")->required();
  generate->add_option("--keywords", gen.keywords, "Comma-separated Category=Keyword list");
  generate->add_option("--seed", gen.seed, "Project seed");
  generate->add_option("--backend", gen.backend, "Illustration backend")->check(CLI::IsMember({"stub", "remote"}));
  generate->add_option("--endpoint", gen.endpoint, "Remote backend URL (default BEATFRAME_BACKEND_URL)");
  generate->add_option("--out", gen.out, "Output MP4")->required();
  generate->add_option("--checkpoint", gen.checkpoint, "Lyric model checkpoint (default: built-in toy model)");
  generate->add_option("--cache", gen.cache, "Stage cache directory (default: .beatframe-cache next to --out)");
  generate->add_option("--fps", gen.fps, "Frames per second")->check(CLI::Range(1, 120));
  generate->add_option("--alternatives", gen.alternatives, "Alternative keyframe sets per segment");
  generate->add_flag("--burn-subtitles", gen.burn_subtitles, "Draw lyrics into the frames");

  fs::path train_manifest, train_config, train_out, train_split, train_log;
  auto* train = app.add_subcommand("train", "Train the lyric model");
  train->add_option("--manifest", train_manifest, "Pair manifest (JSONL)")->required();
  train->add_option("--config", train_config, "Training config (JSON)")->required();
  train->add_option("--out", train_out, "Checkpoint to write")->required();
  train->add_option("--split", train_split, "Split file (default: <manifest>.split.json if present)");
  train->add_option("--log", train_log, "JSONL loss log (default: standard output)");

  fs::path eval_manifest, eval_checkpoint, eval_report, eval_split;
  double eval_fraction = 0.8;
  std::uint64_t eval_seed = 0;
  std::string eval_backend = "stub", eval_endpoint;
  auto* evaluate = app.add_subcommand("evaluate", "Generate lyrics for the test split and score them");
  evaluate->add_option("--manifest", eval_manifest, "Pair manifest (JSONL)")->required();
  evaluate->add_option("--checkpoint", eval_checkpoint, "Lyric model checkpoint")->required();
  evaluate->add_option("--report", eval_report, "Metric report to write (JSON)")->required();
  evaluate->add_option("--split", eval_split, "Split file (default: <manifest>.split.json if present)");
  evaluate->add_option("--train-fraction", eval_fraction, "Split fraction when no split file exists")
      ->check(CLI::Range(0.0, 1.0));
  evaluate->add_option("--seed", eval_seed, "Sampling and split seed");
  evaluate->add_option("--backend", eval_backend, "Illustration backend for CLIPScore")
      ->check(CLI::IsMember({"stub", "remote"}));
  evaluate->add_option("--endpoint", eval_endpoint, "Remote backend URL");

  bool keywords_json = false;
  auto* keywords = app.add_subcommand("keywords", "Style keyword catalog");
  keywords->require_subcommand(1);
  auto* keywords_list = keywords->add_subcommand("list", "Print every category and keyword");
  keywords_list->add_flag("--json", keywords_json, "Print JSON");

  fs::path dali, dataset_out, dataset_split;
  double dataset_fraction = 0.8, dataset_clip = 5.0;
  std::uint64_t dataset_seed = 0;
  auto* dataset_cmd = app.add_subcommand("dataset", "Training data");
  dataset_cmd->require_subcommand(1);
  auto* dataset_build = dataset_cmd->add_subcommand("build", "Annotations to pair manifest and split");
  dataset_build->add_option("--dali", dali, "Directory of per-song annotation JSON files")->required();
  dataset_build->add_option("--out", dataset_out, "Manifest to write (JSONL)")->required();
  dataset_build->add_option("--split", dataset_split, "Split file (default: <manifest>.split.json)");
  dataset_build->add_option("--train-fraction", dataset_fraction, "Share of songs per genre in train")
      ->check(CLI::Range(0.0, 1.0));
  dataset_build->add_option("--seed", dataset_seed, "Split shuffle seed");
  dataset_build->add_option("--clip-seconds", dataset_clip, "Clip length")->check(CLI::PositiveNumber);

  fs::path serve_config, serve_data;
  int serve_port = -1;
  auto* serve = app.add_subcommand("serve", "Start the HTTP service");
  serve->add_option("--config", serve_config, "Service config (JSON); BEATFRAME_* variables override it");
  serve->add_option("--port", serve_port, "Port (0 picks a free one)")->check(CLI::Range(0, 65535));
  serve->add_option("--data-dir", serve_data, "Data directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*generate) return run_generate(gen);
    if (*train) return run_train(train_manifest, train_config, train_out, train_split, train_log);
    if (*evaluate) {
      return run_evaluate(eval_manifest, eval_checkpoint, eval_report, eval_split, eval_fraction, eval_seed,
                          eval_backend, eval_endpoint);
    }
    if (*keywords_list) return run_keywords(keywords_json);
    if (*dataset_build) {
      return run_dataset_build(dali, dataset_out, dataset_split, dataset_fraction, dataset_seed, dataset_clip);
    }
    if (*serve) return run_serve(serve_config, serve_port, serve_data);
  } catch (const ValidationError& e) {
    diagnose(e.what());
    return kExitValidation;
  } catch (const FormatError& e) {
    diagnose(e.what());
    return kExitValidation;
  } catch (const DecodeError& e) {
    diagnose(e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    diagnose(e.what());
    return kExitRuntime;
  }
  return kExitRuntime;
}
