#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxkit/audio.hpp"
#include "voxkit/core.hpp"
#include "voxkit/degradation.hpp"
#include "voxkit/maskgen.hpp"
#include "voxkit/toymodel.hpp"

namespace voxkit {

struct AudioSection {
  int sample_rate = 16000;
  int window = 1024;
  int hop = 256;
  double exponent = 0.3;
};

struct TokenizerSection {
  int layers = 4;
  int vocab = 64;
  int iterations = 50;
};

struct ModelSection {
  int dim = 128;
  int enc_layers = 2;
  int dec_layers = 3;
  int heads = 4;
  int ff_mult = 4;
  double lr = 1e-4;
  int warmup_steps = 400;
  int total_steps = 5000;
  int batch = 8;
  int seq_frames = 128;
  double p_prompt = 0.5;
  int prompt_frames = -1;
  double x0_temperature = 1.0;  // sampling temperature for the critic's training input
  int checkpoint_every = 500;
  std::string corpus = "patterned";
  int corpus_size = 2000;
};

struct SamplerSection {
  int steps = 16;
  ConfidenceMode mode = ConfidenceMode::SelfCritic;
  double temperature = 1.0;
};

struct EvalSection {
  std::vector<int> steps{4, 8, 16};
  std::vector<ConfidenceMode> modes{ConfidenceMode::Vanilla, ConfidenceMode::SelfCritic};
  int seeds = 5;
  int utterances = 16;
};

struct SeedSection {
  std::uint64_t data = 1;
  std::uint64_t model = 2;
  std::uint64_t sampler = 3;
};

/// The single configuration document shared by every command.
struct RunConfig {
  AudioSection audio;
  ChainPolicy degradation;
  Task task = Task::Enhancement;
  TokenizerSection tokenizer;
  ModelSection model;
  SamplerSection sampler;
  EvalSection eval;
  SeedSection seeds;
  std::uint64_t base_seed = 0;

  std::uint64_t data_seed() const { return mix_seed(base_seed, seeds.data); }
  std::uint64_t model_seed() const { return mix_seed(base_seed, seeds.model); }
  std::uint64_t sampler_seed() const { return mix_seed(base_seed, seeds.sampler); }

  TrainConfig train_config(int input_bins) const {
    TrainConfig c;
    c.model.input_bins = input_bins;
    c.model.dim = model.dim;
    c.model.enc_layers = model.enc_layers;
    c.model.dec_layers = model.dec_layers;
    c.model.heads = model.heads;
    c.model.ff_mult = model.ff_mult;
    c.model.vocab = tokenizer.vocab;
    c.model.rvq_layers = tokenizer.layers;
    c.model.seed = model_seed();
    c.lr = model.lr;
    c.warmup_steps = model.warmup_steps;
    c.total_steps = model.total_steps;
    c.batch = model.batch;
    c.seq_frames = model.seq_frames;
    c.p_prompt = model.p_prompt;
    c.prompt_frames = model.prompt_frames;
    c.x0_temperature = model.x0_temperature;
    c.seed = model_seed();
    c.validate();
    return c;
  }

  void validate() const {
    if (audio.sample_rate <= 0) throw Error(ErrorCode::ConfigError, "audio.sample_rate must be positive");
    if (audio.window < 2 || audio.hop < 1 || audio.hop > audio.window) {
      throw Error(ErrorCode::ConfigError, "audio.window/hop invalid");
    }
    if (!(audio.exponent > 0.0 && audio.exponent <= 1.0)) throw Error(ErrorCode::ConfigError, "audio.exponent not in (0, 1]");
    degradation.validate();
    if (tokenizer.layers < 1 || tokenizer.vocab < 2 || tokenizer.iterations < 1) {
      throw Error(ErrorCode::ConfigError, "tokenizer settings must be positive");
    }
    if (model.checkpoint_every < 1 || model.corpus_size < 1) {
      throw Error(ErrorCode::ConfigError, "model.checkpoint_every and model.corpus_size must be >= 1");
    }
    if (model.corpus != "patterned" && model.corpus != "tokenized-audio") {
      throw Error(ErrorCode::ConfigError, "model.corpus must be patterned or tokenized-audio");
    }
    if (sampler.steps < 1 || sampler.temperature < 0.0) throw Error(ErrorCode::ConfigError, "sampler settings invalid");
    if (eval.steps.empty() || eval.modes.empty() || eval.seeds < 1 || eval.utterances < 1) {
      throw Error(ErrorCode::ConfigError, "eval settings invalid");
    }
    for (int s : eval.steps) {
      if (s < 1) throw Error(ErrorCode::ConfigError, "eval.steps entries must be >= 1");
    }
  }
};

namespace detail {

/// Reads an object's keys with defaults and rejects any key it was not asked
/// about, naming it with its dotted path.
class SectionReader {
 public:
  SectionReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw Error(ErrorCode::ConfigError, "'" + path_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorCode::ConfigError, "bad value for '" + path_ + "." + key + "'");
    }
  }

  void range(const char* key, double& lo, double& hi) {
    std::vector<double> v{lo, hi};
    get(key, v);
    if (v.size() != 2) throw Error(ErrorCode::ConfigError, "'" + path_ + "." + key + "' must be [lo, hi]");
    lo = v[0];
    hi = v[1];
  }

  bool has(const char* key) const { return j_.contains(key); }
  const nlohmann::json& at(const char* key) const { return j_.at(key); }
  void mark(const char* key) { seen_.insert(key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw Error(ErrorCode::ConfigError, "unknown config key '" + path_ + "." + it.key() + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string, std::less<>> seen_;
};

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  if (!j.is_object()) throw Error(ErrorCode::ConfigError, "config root must be an object");
  static const std::set<std::string> sections{"audio", "degradation", "tokenizer", "model", "sampler", "eval", "seeds"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!sections.count(it.key())) throw Error(ErrorCode::ConfigError, "unknown config key '" + it.key() + "'");
  }
  auto section = [&](const char* name) -> const nlohmann::json& {
    static const nlohmann::json empty = nlohmann::json::object();
    return j.contains(name) ? j.at(name) : empty;
  };

  {
    detail::SectionReader r(section("audio"), "audio");
    r.get("sample_rate", c.audio.sample_rate);
    r.get("window", c.audio.window);
    r.get("hop", c.audio.hop);
    r.get("exponent", c.audio.exponent);
    r.finish();
  }
  {
    auto& p = c.degradation;
    detail::SectionReader r(section("degradation"), "degradation");
    std::string task = to_string(c.task);
    r.get("task", task);
    c.task = parse_task(task);
    r.get("p_noise", p.p_noise);
    r.get("p_reverb", p.p_reverb);
    r.get("p_clip", p.p_clip);
    r.get("p_bandwidth", p.p_bandwidth);
    r.get("p_other_voice", p.p_other_voice);
    r.get("p_vocal_effect", p.p_vocal_effect);
    r.range("snr_db", p.snr_db_min, p.snr_db_max);
    r.range("clip_threshold", p.clip_min, p.clip_max);
    r.get("bandwidths_khz", p.bandwidths_khz);
    r.range("voice_snr_db", p.voice_snr_db_min, p.voice_snr_db_max);
    std::vector<int> bells{p.eq_bells_min, p.eq_bells_max};
    r.get("eq_bells", bells);
    if (bells.size() != 2) throw Error(ErrorCode::ConfigError, "'degradation.eq_bells' must be [lo, hi]");
    p.eq_bells_min = bells[0];
    p.eq_bells_max = bells[1];
    r.range("eq_gain_db", p.eq_gain_db_min, p.eq_gain_db_max);
    r.range("eq_center_hz", p.eq_center_hz_min, p.eq_center_hz_max);
    r.range("eq_q", p.eq_q_min, p.eq_q_max);
    r.range("rt60_s", p.rt60_min_s, p.rt60_max_s);
    r.get("utterance_seconds", p.utterance_seconds);
    r.finish();
  }
  {
    detail::SectionReader r(section("tokenizer"), "tokenizer");
    r.get("layers", c.tokenizer.layers);
    r.get("vocab", c.tokenizer.vocab);
    r.get("iterations", c.tokenizer.iterations);
    r.finish();
  }
  {
    auto& m = c.model;
    detail::SectionReader r(section("model"), "model");
    r.get("dim", m.dim);
    r.get("enc_layers", m.enc_layers);
    r.get("dec_layers", m.dec_layers);
    r.get("heads", m.heads);
    r.get("ff_mult", m.ff_mult);
    r.get("lr", m.lr);
    r.get("warmup_steps", m.warmup_steps);
    r.get("total_steps", m.total_steps);
    r.get("batch", m.batch);
    r.get("seq_frames", m.seq_frames);
    r.get("p_prompt", m.p_prompt);
    r.get("prompt_frames", m.prompt_frames);
    r.get("x0_temperature", m.x0_temperature);
    r.get("checkpoint_every", m.checkpoint_every);
    r.get("corpus", m.corpus);
    r.get("corpus_size", m.corpus_size);
    r.finish();
  }
  {
    detail::SectionReader r(section("sampler"), "sampler");
    r.get("steps", c.sampler.steps);
    std::string mode = to_string(c.sampler.mode);
    r.get("mode", mode);
    c.sampler.mode = parse_confidence_mode(mode);
    r.get("temperature", c.sampler.temperature);
    r.finish();
  }
  {
    detail::SectionReader r(section("eval"), "eval");
    r.get("steps", c.eval.steps);
    std::vector<std::string> modes;
    for (auto m : c.eval.modes) modes.push_back(to_string(m));
    r.get("modes", modes);
    c.eval.modes.clear();
    for (const auto& m : modes) c.eval.modes.push_back(parse_confidence_mode(m));
    r.get("seeds", c.eval.seeds);
    r.get("utterances", c.eval.utterances);
    r.finish();
  }
  {
    detail::SectionReader r(section("seeds"), "seeds");
    r.get("data", c.seeds.data);
    r.get("model", c.seeds.model);
    r.get("sampler", c.seeds.sampler);
    r.get("base", c.base_seed);
    r.finish();
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = detail::read_file(path);
  } catch (const Error&) {
    throw Error(ErrorCode::ConfigError, "cannot read config " + path.string());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, "config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& p = c.degradation;
  nlohmann::json modes = nlohmann::json::array();
  for (auto m : c.eval.modes) modes.push_back(to_string(m));
  return {
      {"audio", {{"sample_rate", c.audio.sample_rate}, {"window", c.audio.window}, {"hop", c.audio.hop},
                 {"exponent", c.audio.exponent}}},
      {"degradation",
       {{"task", to_string(c.task)},
        {"p_noise", p.p_noise},
        {"p_reverb", p.p_reverb},
        {"p_clip", p.p_clip},
        {"p_bandwidth", p.p_bandwidth},
        {"p_other_voice", p.p_other_voice},
        {"p_vocal_effect", p.p_vocal_effect},
        {"snr_db", {p.snr_db_min, p.snr_db_max}},
        {"clip_threshold", {p.clip_min, p.clip_max}},
        {"bandwidths_khz", p.bandwidths_khz},
        {"voice_snr_db", {p.voice_snr_db_min, p.voice_snr_db_max}},
        {"eq_bells", {p.eq_bells_min, p.eq_bells_max}},
        {"eq_gain_db", {p.eq_gain_db_min, p.eq_gain_db_max}},
        {"eq_center_hz", {p.eq_center_hz_min, p.eq_center_hz_max}},
        {"eq_q", {p.eq_q_min, p.eq_q_max}},
        {"rt60_s", {p.rt60_min_s, p.rt60_max_s}},
        {"utterance_seconds", p.utterance_seconds}}},
      {"tokenizer", {{"layers", c.tokenizer.layers}, {"vocab", c.tokenizer.vocab}, {"iterations", c.tokenizer.iterations}}},
      {"model",
       {{"dim", c.model.dim},
        {"enc_layers", c.model.enc_layers},
        {"dec_layers", c.model.dec_layers},
        {"heads", c.model.heads},
        {"ff_mult", c.model.ff_mult},
        {"lr", c.model.lr},
        {"warmup_steps", c.model.warmup_steps},
        {"total_steps", c.model.total_steps},
        {"batch", c.model.batch},
        {"seq_frames", c.model.seq_frames},
        {"p_prompt", c.model.p_prompt},
        {"prompt_frames", c.model.prompt_frames},
        {"x0_temperature", c.model.x0_temperature},
        {"checkpoint_every", c.model.checkpoint_every},
        {"corpus", c.model.corpus},
        {"corpus_size", c.model.corpus_size}}},
      {"sampler", {{"steps", c.sampler.steps}, {"mode", to_string(c.sampler.mode)}, {"temperature", c.sampler.temperature}}},
      {"eval", {{"steps", c.eval.steps}, {"modes", modes}, {"seeds", c.eval.seeds}, {"utterances", c.eval.utterances}}},
      {"seeds", {{"data", c.seeds.data}, {"model", c.seeds.model}, {"sampler", c.seeds.sampler}, {"base", c.base_seed}}},
  };
}

}  // namespace voxkit
