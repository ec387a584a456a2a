#include "beatframe/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "beatframe/dataset.hpp"
#include "beatframe/digest.hpp"
#include "beatframe/interpolation.hpp"
#include "beatframe/random.hpp"
#include "json.hpp"

namespace beatframe::pipeline {

using json = nlohmann::json;

namespace {

constexpr int kStageVersion = 1;

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

std::string unique_suffix() {
  std::random_device rd;
  return std::to_string(rd()) + std::to_string(rd());
}

// Copies into place through a temporary name so readers never see a partial file.
void publish_copy(const fs::path& from, const fs::path& to) {
  const fs::path tmp = to.parent_path() / ("." + to.filename().string() + "." + unique_suffix());
  fs::copy_file(from, tmp, fs::copy_options::overwrite_existing);
  fs::rename(tmp, to);
}

std::string key_digest(const std::string& stage, json inputs) {
  inputs["stage"] = stage;
  inputs["stage_version"] = kStageVersion;
  return sha256_hex(inputs.dump());
}

json sampling_json(const lyrics::SamplingConfig& s) {
  return {{"top_k", s.top_k},           {"top_p", s.top_p}, {"temperature", s.temperature},
          {"max_tokens", s.max_tokens}, {"min_tokens", s.min_tokens}, {"seed", s.seed}};
}

lyrics::SamplingConfig sampling_from(const json& j) {
  lyrics::SamplingConfig s;
  s.top_k = j.at("top_k");
  s.top_p = j.at("top_p");
  s.temperature = j.at("temperature");
  s.max_tokens = j.at("max_tokens");
  s.min_tokens = j.at("min_tokens");
  s.seed = j.at("seed");
  return s;
}

json mel_json(const audio::MelSpectrogramParams& m) {
  return {{"n_mels", m.n_mels}, {"window_size", m.window_size}, {"hop_size", m.hop_size}, {"n_fft", m.n_fft},
          {"f_min", m.f_min},   {"f_max", m.f_max},             {"decibel", m.scale == audio::MelScale::kDecibel}};
}

audio::MelSpectrogramParams mel_from(const json& j) {
  audio::MelSpectrogramParams m;
  m.n_mels = j.at("n_mels");
  m.window_size = j.at("window_size");
  m.hop_size = j.at("hop_size");
  m.n_fft = j.at("n_fft");
  m.f_min = j.at("f_min");
  m.f_max = j.at("f_max");
  m.scale = j.at("decibel").get<bool>() ? audio::MelScale::kDecibel : audio::MelScale::kPower;
  return m;
}

json config_json(const PipelineConfig& c) {
  return {{"clip_seconds", c.clip_seconds},
          {"min_clip_seconds", c.min_clip_seconds},
          {"alternatives", c.alternatives},
          {"fps", c.timeline.fps},
          {"keyframes_per_transition", c.timeline.keyframes_per_transition},
          {"sampling", sampling_json(c.sampling)},
          {"hpss", {{"n_fft", c.hpss.n_fft}, {"hop_size", c.hpss.hop_size}, {"kernel", c.hpss.kernel}}},
          {"beat_mel", mel_json(c.beat_mel)},
          {"burn_subtitles", c.burn_subtitles},
          {"couple_lyrics_to_order", c.couple_lyrics_to_order}};
}

PipelineConfig config_from(const json& j) {
  PipelineConfig c;
  c.clip_seconds = j.at("clip_seconds");
  c.min_clip_seconds = j.at("min_clip_seconds");
  c.alternatives = j.at("alternatives");
  c.timeline.fps = j.at("fps");
  c.timeline.keyframes_per_transition = j.at("keyframes_per_transition");
  c.sampling = sampling_from(j.at("sampling"));
  c.hpss.n_fft = j.at("hpss").at("n_fft");
  c.hpss.hop_size = j.at("hpss").at("hop_size");
  c.hpss.kernel = j.at("hpss").at("kernel");
  c.beat_mel = mel_from(j.at("beat_mel"));
  c.burn_subtitles = j.at("burn_subtitles");
  c.couple_lyrics_to_order = j.at("couple_lyrics_to_order");
  return c;
}

json backend_identity(const backend::BackendDescriptor& d) {
  return {{"kind", d.kind == backend::BackendKind::kStub ? "stub" : "remote"},
          {"embedding_dim", d.embedding_dim},
          {"latent_shape", d.latent_shape},
          {"width", d.image_width},
          {"height", d.image_height},
          {"endpoint", d.kind == backend::BackendKind::kStub ? std::string() : d.endpoint}};
}

json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vector_from(const json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

json plan_json(const interp::InterpolationPlan& plan) {
  json steps = json::array();
  for (const auto& s : plan.steps) {
    steps.push_back({{"weight", s.weight},
                     {"embedding", vector_json(s.embedding)},
                     {"noise", vector_json(s.noise.values)},
                     {"noise_shape", s.noise.shape},
                     {"noise_seed", s.noise.seed}});
  }
  return {{"segment", plan.segment},     {"prompt_from", plan.prompt_from}, {"prompt_to", plan.prompt_to},
          {"seed_from", plan.seed_from}, {"seed_to", plan.seed_to},         {"weights", plan.weights},
          {"steps", steps}};
}

interp::InterpolationPlan plan_from(const json& j) {
  interp::InterpolationPlan p;
  p.segment = j.at("segment");
  p.prompt_from = j.at("prompt_from");
  p.prompt_to = j.at("prompt_to");
  p.seed_from = j.at("seed_from");
  p.seed_to = j.at("seed_to");
  p.weights = j.at("weights").get<std::vector<double>>();
  for (const auto& s : j.at("steps")) {
    interp::InterpolationStep step;
    step.weight = s.at("weight");
    step.embedding = vector_from(s.at("embedding"));
    step.noise.values = vector_from(s.at("noise"));
    step.noise.shape = s.at("noise_shape").get<std::vector<std::size_t>>();
    step.noise.seed = s.at("noise_seed");
    p.steps.push_back(std::move(step));
  }
  return p;
}

std::string candidate_id(std::size_t segment, std::size_t a) {
  return "s" + std::to_string(segment) + "c" + std::to_string(a);
}

std::uint64_t candidate_seed(std::uint64_t project_seed, std::size_t prompt_index, std::size_t a) {
  const std::uint64_t base = interp::prompt_seed(project_seed, prompt_index);
  return a == 0 ? base : derive_seed(base, a);
}

std::vector<std::size_t> identity(std::size_t n) {
  std::vector<std::size_t> o(n);
  for (std::size_t i = 0; i < n; ++i) o[i] = i;
  return o;
}

// Spreads `images` evenly over the slot's frame range [first, last].
void lay_keyframes(compositor::SegmentPlan& slot, std::size_t last, int fps, const std::vector<Image>& images) {
  const std::size_t first = slot.keyframes.front().frame;
  std::size_t m = images.size();
  if (m > 1 && last - first < m - 1) m = 1;
  slot.keyframes.clear();
  slot.morph_steps.clear();
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t f =
        m == 1 ? first
               : first + static_cast<std::size_t>(std::llround(static_cast<double>(k * (last - first)) /
                                                               static_cast<double>(m - 1)));
    slot.keyframes.push_back({static_cast<double>(f) / fps, f, {}, images[k]});
    if (k > 0) slot.morph_steps.push_back(f - slot.keyframes[k - 1].frame - 1);
  }
}

class Runner {
 public:
  Runner(Project project, Environment& env) : p_(std::move(project)), env_(env) {}

  PipelineResult run();

 private:
  fs::path stage(const std::string& name, const std::string& digest,
                 const std::function<void(const fs::path&)>& produce) {
    bool hit = false;
    fs::path dir;
    try {
      dir = env_.cache->get_or_create(name, digest, produce, &hit);
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, digest, e.what());
    }
    auto& stats = report_.stages[name];
    ++(hit ? stats.hits : stats.runs);
    ++done_;
    if (env_.on_progress) env_.on_progress({name, std::min(1.0, static_cast<double>(done_) / total_)});
    return dir;
  }

  void lyrics_stage(const audio::AudioBuffer& audio, const std::vector<double>& starts);
  void prompt_stage();
  std::vector<double> beats_stage(const audio::AudioBuffer& audio, std::size_t segment, double start, double end);
  Candidate candidate_stage(std::size_t segment, std::size_t a, const std::string& from, const std::string& to,
                            std::size_t from_index, std::size_t to_index, const std::vector<double>& weights);
  void compose_stage(const audio::AudioBuffer& audio);

  Project p_;
  Environment& env_;
  RunReport report_;
  std::size_t done_ = 0;
  double total_ = 1.0;
  std::string model_digest_;
  json backend_id_;
};

void Runner::lyrics_stage(const audio::AudioBuffer& audio, const std::vector<double>& starts) {
  p_.lines.clear();
  std::string previous = dataset::kStartLine;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    auto sampling = p_.config.sampling;
    sampling.seed = derive_seed(p_.seed, 0x4C59524943ULL + i);
    const std::string digest = key_digest("lyric", {{"audio", p_.audio_digest},
                                                    {"clip_index", i},
                                                    {"clip_start", starts[i]},
                                                    {"clip_seconds", p_.config.clip_seconds},
                                                    {"model", model_digest_},
                                                    {"previous", previous},
                                                    {"sampling", sampling_json(sampling)}});
    const auto dir = stage("lyric", digest, [&](const fs::path& out) {
      const auto clip = dataset::separate_accompaniment(audio::slice_clip(audio, starts[i], p_.config.clip_seconds));
      const auto mel = env_.model->music_features(clip);
      const auto line = env_.model->generate(mel, previous, sampling);
      write_text(out / "lyric.json", json{{"text", line.text}, {"ids", line.ids}}.dump());
    });
    LyricLineRecord rec;
    rec.clip_index = i;
    rec.start = starts[i];
    rec.previous = previous;
    rec.text = json::parse(read_text(dir / "lyric.json")).at("text");
    previous = rec.text;
    p_.lines.push_back(std::move(rec));
  }
}

void Runner::prompt_stage() {
  json keywords = json::array();
  for (const auto& k : p_.keywords) keywords.push_back({k.category, k.keyword});
  for (auto& line : p_.lines) {
    const std::string digest = key_digest("prompt", {{"lyric", line.text}, {"keywords", keywords}});
    const auto dir = stage("prompt", digest, [&](const fs::path& out) {
      write_text(out / "prompt.txt", prompt::assemble_prompt({line.text, p_.keywords}).text);
    });
    line.prompt = read_text(dir / "prompt.txt");
  }
}

std::vector<double> Runner::beats_stage(const audio::AudioBuffer& audio, std::size_t segment, double start,
                                        double end) {
  const std::size_t steps = p_.config.timeline.keyframes_per_transition - 1;
  const std::string digest = key_digest("beats", {{"audio", p_.audio_digest},
                                                  {"start", start},
                                                  {"end", end},
                                                  {"steps", steps},
                                                  {"hpss", config_json(p_.config).at("hpss")},
                                                  {"mel", mel_json(p_.config.beat_mel)}});
  const auto dir = stage("beats", digest, [&](const fs::path& out) {
    const auto slice = audio::slice_clip(audio, start, end - start);
    const auto perc = audio::percussive_component(slice, p_.config.hpss);
    std::vector<double> w;
    try {
      w = audio::beat_weights(audio::mel_spectrogram(perc, p_.config.beat_mel), steps).weights;
    } catch (const ValidationError&) {
      // Shorter than one analysis window: uniform ramp.
      for (std::size_t k = 1; k <= steps; ++k) w.push_back(static_cast<double>(k) / static_cast<double>(steps));
    }
    write_text(out / "weights.json", json{{"segment", segment}, {"weights", w}}.dump());
  });
  return json::parse(read_text(dir / "weights.json")).at("weights").get<std::vector<double>>();
}

Candidate Runner::candidate_stage(std::size_t segment, std::size_t a, const std::string& from, const std::string& to,
                                  std::size_t from_index, std::size_t to_index, const std::vector<double>& weights) {
  Candidate c;
  c.id = candidate_id(segment, a);
  c.seed_from = candidate_seed(p_.seed, from_index, a);
  c.seed_to = from_index == to_index ? c.seed_from : candidate_seed(p_.seed, to_index, a);

  const std::string plan_digest = key_digest("plan", {{"backend", backend_id_},
                                                      {"segment", segment},
                                                      {"prompt_from", from},
                                                      {"prompt_to", to},
                                                      {"weights", weights},
                                                      {"seed_from", c.seed_from},
                                                      {"seed_to", c.seed_to}});
  const auto plan_dir = stage("plan", plan_digest, [&](const fs::path& out) {
    const auto plan = interp::build_plan(segment, from, to, weights, *env_.backend, c.seed_from, c.seed_to);
    write_text(out / "plan.json", plan_json(plan).dump());
  });

  const std::string plan_text = read_text(plan_dir / "plan.json");
  const std::string frames_digest =
      key_digest("keyframes", {{"backend", backend_id_}, {"plan", sha256_hex(plan_text)}});
  c.artifact = stage("keyframes", frames_digest, [&](const fs::path& out) {
    const auto plan = plan_from(json::parse(plan_text));
    json digests = json::array();
    bool nsfw = false;
    for (std::size_t k = 0; k < plan.steps.size(); ++k) {
      backend::GenerationRequest req;
      req.embedding = plan.steps[k].embedding;
      req.noise = plan.steps[k].noise;
      req.prompt = plan.steps[k].weight < 0.5 ? from : to;
      req.provenance.seed = plan.steps[k].noise.seed;
      req.provenance.weight = plan.steps[k].weight;
      const auto frame = env_.backend->generate(req);
      write_png(out / ("keyframe_" + std::to_string(k) + ".png"), frame.pixels);
      digests.push_back(pixel_digest(frame.pixels));
      nsfw = nsfw || frame.nsfw;
    }
    write_text(out / "frames.json", json{{"digests", digests}, {"nsfw", nsfw}}.dump());
  });
  const auto meta = json::parse(read_text(c.artifact / "frames.json"));
  c.digests = meta.at("digests").get<std::vector<std::string>>();
  c.nsfw = meta.at("nsfw");
  return c;
}

void Runner::compose_stage(const audio::AudioBuffer& audio) {
  const auto timeline = assemble_timeline(p_);
  json slots = json::array();
  for (std::size_t j = 0; j < timeline.segments.size(); ++j) {
    const auto& s = timeline.segments[j];
    json frames = json::array();
    for (const auto& k : s.keyframes) frames.push_back({k.frame, k.id});
    slots.push_back({{"lyric", s.lyric}, {"keyframes", frames}});
  }
  const std::string digest = key_digest("compose", {{"audio", p_.audio_digest},
                                                    {"fps", timeline.fps},
                                                    {"duration", timeline.total_duration},
                                                    {"burn_subtitles", p_.config.burn_subtitles},
                                                    {"slots", slots}});
  const auto dir = stage("compose", digest, [&](const fs::path& out) {
    compositor::VideoSpec spec;
    spec.output = out / "video.mp4";
    spec.fps = timeline.fps;
    spec.burn_subtitles = p_.config.burn_subtitles;
    const auto result = compositor::render_video(timeline, audio, spec);
    write_text(out / "frames.json", result.manifest.to_json());
    write_text(out / "subtitles.vtt", compositor::webvtt(timeline));
  });

  fs::create_directories(p_.output_dir);
  p_.video_path = p_.output_dir / "video.mp4";
  p_.subtitles_path = p_.output_dir / "subtitles.vtt";
  p_.manifest_path = p_.output_dir / "frames.json";
  publish_copy(dir / "video.mp4", p_.video_path);
  publish_copy(dir / "subtitles.vtt", p_.subtitles_path);
  publish_copy(dir / "frames.json", p_.manifest_path);
}

PipelineResult Runner::run() {
  if (env_.cache == nullptr || env_.backend == nullptr || env_.model == nullptr) {
    throw ValidationError("pipeline environment needs a cache, a backend and a model");
  }
  p_.config.validate();
  if (p_.output_dir.empty()) throw ValidationError("project has no output directory");
  if (const auto v = prompt::validate_keywords(p_.keywords); !v.empty()) throw ValidationError(v.front().message);

  const auto previous_segments = p_.segments;
  const auto previous_order = p_.order;

  const auto audio = audio::load_audio(p_.audio_path);
  if (audio.empty()) throw ValidationError("audio is empty");
  p_.audio_digest = sha256_file(p_.audio_path);
  p_.duration = audio.duration_seconds();
  model_digest_ = env_.model->digest();
  backend_id_ = backend_identity(env_.backend->descriptor());

  const auto starts = clip_starts(p_.duration, p_.config);
  const std::size_t n = starts.size();
  const std::size_t cand = p_.config.alternatives + 1;
  total_ = static_cast<double>(n + n + (n - 1) + 2 * n * cand + 1);

  lyrics_stage(audio, starts);
  prompt_stage();

  std::vector<compositor::LyricCue> cues;
  for (const auto& l : p_.lines) cues.push_back({l.start, l.text});
  const auto timeline = compositor::build_timeline(cues, p_.duration, p_.config.timeline);

  p_.segments.clear();
  for (std::size_t i = 0; i < timeline.segments.size(); ++i) {
    const auto& ts = timeline.segments[i];
    SegmentState seg;
    seg.start = ts.start;
    seg.end = ts.end;
    seg.transition = ts.transition;
    if (ts.transition) {
      seg.weights = {0.0};
      for (double w : beats_stage(audio, i, ts.start, ts.end)) seg.weights.push_back(w);
    } else {
      seg.weights = {1.0};
    }
    const std::size_t to_index = ts.transition ? i + 1 : i;
    for (std::size_t a = 0; a < cand; ++a) {
      seg.candidates.push_back(candidate_stage(i, a, p_.lines[i].prompt, p_.lines[to_index].prompt, i, to_index,
                                               seg.weights));
    }
    seg.chosen = seg.candidates.front().id;
    p_.segments.push_back(std::move(seg));
  }

  // Keep editor choices that still apply.
  p_.order = identity(p_.segments.size());
  if (previous_segments.size() == p_.segments.size() && permutation_problems(previous_order, p_.segments.size()).empty()) {
    p_.order = previous_order;
    for (std::size_t i = 0; i < p_.segments.size(); ++i) {
      if (p_.segments[i].find(previous_segments[i].chosen) != nullptr) p_.segments[i].chosen = previous_segments[i].chosen;
    }
  }

  compose_stage(audio);
  p_.validate();
  if (env_.on_progress) env_.on_progress({"done", 1.0});
  return {std::move(p_), std::move(report_)};
}

}  // namespace

void PipelineConfig::validate() const {
  if (!(clip_seconds > 0.0)) throw ValidationError("clip_seconds must be positive");
  if (min_clip_seconds < 0.0 || min_clip_seconds > clip_seconds) {
    throw ValidationError("min_clip_seconds must lie in [0, clip_seconds]");
  }
  timeline.validate();
  sampling.validate();
}

fs::path Candidate::keyframe_path(std::size_t k) const { return artifact / ("keyframe_" + std::to_string(k) + ".png"); }

const Candidate* SegmentState::find(const std::string& id) const {
  for (const auto& c : candidates) {
    if (c.id == id) return &c;
  }
  return nullptr;
}

std::vector<std::size_t> permutation_problems(const std::vector<std::size_t>& order, std::size_t n) {
  std::vector<std::size_t> bad;
  std::vector<bool> seen(n, false);
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] >= n || seen[order[i]]) {
      bad.push_back(i);
    } else {
      seen[order[i]] = true;
    }
  }
  for (std::size_t i = order.size(); i < n; ++i) bad.push_back(i);
  return bad;
}

void Project::validate() const {
  if (schema_version != kProjectSchemaVersion) throw FormatError("unsupported project schema version");
  if (!generated()) return;
  if (const auto bad = permutation_problems(order, segments.size()); !bad.empty()) {
    throw EditError("ordering is not a permutation of the segments", bad);
  }
  for (std::size_t i = 0; i < segments.size(); ++i) {
    if (segments[i].find(segments[i].chosen) == nullptr) {
      throw EditError("segment " + std::to_string(i) + " chose unknown candidate '" + segments[i].chosen + "'", {i});
    }
  }
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string expected = i == 0 ? std::string(dataset::kStartLine) : lines[i - 1].text;
    if (lines[i].previous != expected) throw Error("lyric context of line " + std::to_string(i) + " does not chain");
  }
}

std::string Project::to_json() const {
  json kw = json::array();
  for (const auto& k : keywords) kw.push_back({{"category", k.category}, {"keyword", k.keyword}});
  json ls = json::array();
  for (const auto& l : lines) {
    ls.push_back({{"clip_index", l.clip_index},
                  {"start", l.start},
                  {"previous", l.previous},
                  {"text", l.text},
                  {"prompt", l.prompt}});
  }
  json segs = json::array();
  for (const auto& s : segments) {
    json cands = json::array();
    for (const auto& c : s.candidates) {
      cands.push_back({{"id", c.id},
                       {"seed_from", c.seed_from},
                       {"seed_to", c.seed_to},
                       {"artifact", c.artifact.string()},
                       {"digests", c.digests},
                       {"nsfw", c.nsfw}});
    }
    segs.push_back({{"start", s.start},
                    {"end", s.end},
                    {"transition", s.transition},
                    {"weights", s.weights},
                    {"candidates", cands},
                    {"chosen", s.chosen}});
  }
  return json{{"schema_version", schema_version},
              {"id", id},
              {"audio_path", audio_path.string()},
              {"audio_digest", audio_digest},
              {"keywords", kw},
              {"seed", seed},
              {"config", config_json(config)},
              {"duration", duration},
              {"lines", ls},
              {"segments", segs},
              {"order", order},
              {"output_dir", output_dir.string()},
              {"video_path", video_path.string()},
              {"subtitles_path", subtitles_path.string()},
              {"manifest_path", manifest_path.string()}}
             .dump(2) +
         "\n";
}

Project Project::from_json(const std::string& text) {
  try {
    const auto j = json::parse(text);
    Project p;
    p.schema_version = j.at("schema_version");
    if (p.schema_version != kProjectSchemaVersion) {
      throw FormatError("unsupported project schema version " + std::to_string(p.schema_version));
    }
    p.id = j.at("id");
    p.audio_path = j.at("audio_path").get<std::string>();
    p.audio_digest = j.at("audio_digest");
    for (const auto& k : j.at("keywords")) p.keywords.push_back({k.at("category"), k.at("keyword")});
    p.seed = j.at("seed");
    p.config = config_from(j.at("config"));
    p.duration = j.at("duration");
    for (const auto& l : j.at("lines")) {
      p.lines.push_back({l.at("clip_index"), l.at("start"), l.at("previous"), l.at("text"), l.at("prompt")});
    }
    for (const auto& s : j.at("segments")) {
      SegmentState seg;
      seg.start = s.at("start");
      seg.end = s.at("end");
      seg.transition = s.at("transition");
      seg.weights = s.at("weights").get<std::vector<double>>();
      seg.chosen = s.at("chosen");
      for (const auto& c : s.at("candidates")) {
        Candidate cand;
        cand.id = c.at("id");
        cand.seed_from = c.at("seed_from");
        cand.seed_to = c.at("seed_to");
        cand.artifact = c.at("artifact").get<std::string>();
        cand.digests = c.at("digests").get<std::vector<std::string>>();
        cand.nsfw = c.at("nsfw");
        seg.candidates.push_back(std::move(cand));
      }
      p.segments.push_back(std::move(seg));
    }
    p.order = j.at("order").get<std::vector<std::size_t>>();
    p.output_dir = j.at("output_dir").get<std::string>();
    p.video_path = j.at("video_path").get<std::string>();
    p.subtitles_path = j.at("subtitles_path").get<std::string>();
    p.manifest_path = j.at("manifest_path").get<std::string>();
    return p;
  } catch (const json::exception& e) {
    throw FormatError(std::string("project file: ") + e.what());
  }
}

void Project::save(const fs::path& path) const {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.parent_path() / ("." + path.filename().string() + "." + unique_suffix());
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp.string());
    out << to_json();
    out.flush();
    if (!out) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

Project Project::load(const fs::path& path) { return from_json(read_text(path)); }

StageCache::StageCache(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

fs::path StageCache::entry_path(const std::string& stage, const std::string& digest) const {
  return root_ / stage / digest.substr(0, 2) / digest;
}

std::optional<fs::path> StageCache::lookup(const std::string& stage, const std::string& digest) const {
  const auto dir = entry_path(stage, digest);
  if (fs::exists(dir / ".complete")) return dir;
  return std::nullopt;
}

fs::path StageCache::get_or_create(const std::string& stage, const std::string& digest,
                                   const std::function<void(const fs::path&)>& produce, bool* hit) {
  if (auto found = lookup(stage, digest)) {
    if (hit != nullptr) *hit = true;
    return *found;
  }
  if (hit != nullptr) *hit = false;
  const auto dir = entry_path(stage, digest);
  fs::create_directories(dir.parent_path());
  const fs::path tmp = dir.parent_path() / (".tmp-" + digest.substr(0, 12) + "-" + unique_suffix());
  fs::create_directories(tmp);
  try {
    produce(tmp);
    write_text(tmp / ".complete", digest);
    std::error_code ec;
    fs::rename(tmp, dir, ec);
    // Another producer won the race; its entry is identical.
    if (ec) fs::remove_all(tmp);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(tmp, ec);
    throw;
  }
  return dir;
}

std::size_t RunReport::runs() const {
  std::size_t n = 0;
  for (const auto& [_, s] : stages) n += s.runs;
  return n;
}

std::size_t RunReport::hits() const {
  std::size_t n = 0;
  for (const auto& [_, s] : stages) n += s.hits;
  return n;
}

std::string RunReport::to_json() const {
  json j = json::object();
  for (const auto& [name, s] : stages) j[name] = {{"hits", s.hits}, {"runs", s.runs}};
  return json{{"stages", j}, {"hits", hits()}, {"runs", runs()}}.dump();
}

std::vector<double> clip_starts(double duration, const PipelineConfig& config) {
  config.validate();
  if (!(duration > 0.0)) throw ValidationError("audio has no duration");
  auto n = static_cast<std::size_t>(std::ceil(duration / config.clip_seconds - 1e-9));
  n = std::max<std::size_t>(n, 1);
  if (n > 1 && duration - static_cast<double>(n - 1) * config.clip_seconds < config.min_clip_seconds) --n;
  std::vector<double> starts;
  for (std::size_t i = 0; i < n; ++i) starts.push_back(static_cast<double>(i) * config.clip_seconds);
  return starts;
}

PipelineResult run_pipeline(const Project& project, Environment& env) { return Runner(project, env).run(); }

EditOutcome apply_edit(const Project& project, const Edit& edit) {
  if (!project.generated()) throw EditError("the project has no generated segments yet");
  EditOutcome out{project, {}};
  bool changed = false;
  if (const auto* r = std::get_if<Reorder>(&edit)) {
    if (r->order.size() != project.segments.size()) {
      throw EditError("ordering has " + std::to_string(r->order.size()) + " entries, expected " +
                          std::to_string(project.segments.size()),
                      permutation_problems(r->order, project.segments.size()));
    }
    if (const auto bad = permutation_problems(r->order, project.segments.size()); !bad.empty()) {
      throw EditError("ordering is not a permutation", bad);
    }
    changed = r->order != project.order;
    out.project.order = r->order;
  } else {
    const auto& s = std::get<Substitute>(edit);
    if (s.segment >= project.segments.size()) throw EditError("no segment " + std::to_string(s.segment), {s.segment});
    if (project.segments[s.segment].find(s.candidate) == nullptr) {
      throw EditError("segment " + std::to_string(s.segment) + " has no candidate '" + s.candidate + "'", {s.segment});
    }
    changed = project.segments[s.segment].chosen != s.candidate;
    out.project.segments[s.segment].chosen = s.candidate;
  }
  if (changed) out.dirty_stages = {"compose"};
  return out;
}

compositor::Timeline assemble_timeline(const Project& project) {
  if (!project.generated()) throw ValidationError("the project has no generated segments");
  std::vector<compositor::LyricCue> cues;
  for (const auto& l : project.lines) cues.push_back({l.start, l.text});
  auto timeline = compositor::build_timeline(cues, project.duration, project.config.timeline);
  if (timeline.segments.size() != project.segments.size()) throw Error("project segments do not match its lyrics");
  if (const auto bad = permutation_problems(project.order, project.segments.size()); !bad.empty()) {
    throw EditError("ordering is not a permutation", bad);
  }
  const std::size_t total = timeline.frame_count();
  const auto lyrics = timeline.segments;
  for (std::size_t j = 0; j < timeline.segments.size(); ++j) {
    const std::size_t src = project.order[j];
    const auto& seg = project.segments[src];
    const Candidate* c = seg.find(seg.chosen);
    if (c == nullptr) throw EditError("segment " + std::to_string(src) + " has no chosen candidate", {src});
    std::vector<Image> images;
    for (std::size_t k = 0; k < c->digests.size(); ++k) images.push_back(read_png(c->keyframe_path(k)));
    auto& slot = timeline.segments[j];
    const std::size_t last = j + 1 < timeline.segments.size() ? timeline.segments[j + 1].keyframes.front().frame : total;
    lay_keyframes(slot, last, timeline.fps, images);
    for (std::size_t k = 0; k < slot.keyframes.size(); ++k) slot.keyframes[k].id = c->digests[k];
    if (project.config.couple_lyrics_to_order) slot.lyric = lyrics[src].lyric;
  }
  return timeline;
}

lyrics::LyricModel toy_lyric_model(std::uint64_t seed) {
  static const char* kWords[] = {
      "i",      "you",   "we",     "the",    "a",      "my",     "your",   "love",   "night",  "light",
      "fire",   "rain",  "heart",  "road",   "sky",    "dream",  "dance",  "shine",  "fall",   "run",
      "hold",   "home",  "city",   "ocean",  "river",  "stars",  "moon",   "sun",    "gold",   "blue",
      "wild",   "slow",  "alone",  "again",  "tonight", "forever", "down",  "up",     "in",     "on",
      "with",   "and",   "through", "away",  "back",   "close",  "feel",   "know",   "see",    "call",
      "time",   "song",  "voice",  "echo",   "shadow", "summer", "winter", "morning", "storm", "sea"};
  std::vector<std::string> corpus(std::begin(kWords), std::end(kWords));
  auto vocab = lyrics::TokenVocab::build(corpus);

  lyrics::ModelConfig cfg;
  cfg.mel.n_mels = 32;
  cfg.encoder.layers = 1;
  cfg.encoder.heads = 2;
  cfg.encoder.embed_dim = 16;
  cfg.encoder.patch_height = 8;
  cfg.encoder.patch_width = 8;
  cfg.encoder.patch_stride = 8;
  cfg.encoder.latent_dim = 8;
  cfg.encoder.input_mels = 32;
  cfg.encoder.input_frames = 496;
  cfg.encoder.input_scale = 0.02;
  cfg.decoder.layers = 1;
  cfg.decoder.heads = 2;
  cfg.decoder.embed_dim = 16;
  cfg.decoder.max_sequence_length = 24;
  cfg.init_seed = seed;
  return lyrics::LyricModel(cfg, std::move(vocab));
}

}  // namespace beatframe::pipeline
