// voxkit command-line front end: degrade | train | enhance | eval | sweep.
//
// Exit codes: 0 ok, 1 other failure, 2 configuration or usage error, 3 I/O,
// 4 non-finite training loss, 5 model contract violation.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "voxkit/audio.hpp"
#include "voxkit/config.hpp"
#include "voxkit/corpus.hpp"
#include "voxkit/degradation.hpp"
#include "voxkit/evalkit.hpp"
#include "voxkit/experiments.hpp"
#include "voxkit/log.hpp"
#include "voxkit/maskgen.hpp"
#include "voxkit/pipeline.hpp"
#include "voxkit/tokenizer.hpp"
#include "voxkit/toymodel.hpp"

namespace fs = std::filesystem;
using namespace voxkit;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::vector<std::string> argv;
};

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigError: return 2;
    case ErrorCode::IoFailure:
    case ErrorCode::MalformedWav:
    case ErrorCode::UnsupportedEncoding: return 3;
    case ErrorCode::NonFiniteLoss: return 4;
    case ErrorCode::ContractViolation: return 5;
    default: return 1;
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error(ErrorCode::IoFailure, "cannot create directory " + dir.string());
}

void write_json(const fs::path& path, const nlohmann::json& j) { detail::write_file_atomic(path, j.dump(2) + "\n"); }

/// --config wins; otherwise a run directory's stored config; otherwise defaults.
RunConfig resolve_config(const Globals& g, const fs::path& run_dir = {}) {
  RunConfig c;
  if (!g.config_path.empty()) {
    c = load_run_config(g.config_path);
  } else if (!run_dir.empty() && fs::exists(run_dir / "config.json")) {
    c = load_run_config(run_dir / "config.json");
  } else {
    c = parse_run_config(nlohmann::json::object());
  }
  if (g.seed) c.base_seed = *g.seed;
  return c;
}

/// Every command leaves `<command>_meta.json` next to its outputs: the
/// resolved config, seed and command line, enough to rerun it.
void write_meta(const fs::path& dir, const std::string& command, const Globals& g, const RunConfig& c,
                nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json meta = {{"command", command}, {"argv", g.argv}, {"seed", c.base_seed}, {"jobs", g.jobs},
                         {"config", to_json(c)}};
  meta.update(extra);
  write_json(dir / (command + "_meta.json"), meta);
}

nlohmann::json grid_to_json(const TokenGrid& g) {
  nlohmann::json rows = nlohmann::json::array();
  for (int l = 0; l < g.layers(); ++l) {
    std::vector<Token> row(static_cast<std::size_t>(g.frames()));
    for (int f = 0; f < g.frames(); ++f) row[static_cast<std::size_t>(f)] = g.at(l, f);
    rows.push_back(row);
  }
  return rows;
}

nlohmann::json frames_to_json(const FrameMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<float> row(m.row(r).data(), m.row(r).data() + m.cols());
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// degrade

int cmd_degrade(const Globals& g, const fs::path& in_dir, const fs::path& out_dir, const std::string& task_flag) {
  RunConfig c = resolve_config(g);
  if (!task_flag.empty()) c.task = parse_task(task_flag);
  if (!fs::is_directory(in_dir)) throw Error(ErrorCode::IoFailure, "input directory " + in_dir.string() + " not found");
  std::vector<fs::path> inputs;
  for (const auto& e : fs::directory_iterator(in_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".wav") inputs.push_back(e.path());
  }
  std::sort(inputs.begin(), inputs.end());
  ensure_dir(out_dir / "clean");
  ensure_dir(out_dir / "distorted");

  std::vector<AudioBuffer> clean(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) clean[i] = read_wav(inputs[i]);

  std::vector<std::string> lines(inputs.size());
  std::vector<std::exception_ptr> errors(inputs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < inputs.size(); i = next++) {
      try {
        // interfering speakers come from the other inputs, or synthetic
        // voices when the directory holds a single file
        std::vector<AudioBuffer> pool;
        for (std::size_t k = 0; k < clean.size(); ++k) {
          if (k != i) pool.push_back(clean[k]);
        }
        if (pool.empty()) {
          for (std::uint64_t k = 0; k < 2; ++k) {
            pool.push_back(synth_voice(120.0 + 80.0 * static_cast<double>(k), 2.0, clean[i].sample_rate,
                                       mix_seed(c.data_seed(), 0x706f6f6c + k)));
          }
        }
        const SyntheticAssets assets(std::move(pool));
        const DegradationSpec spec = sample_chain(c.degradation, c.task, mix_seed(c.data_seed(), i));
        const AudioBuffer distorted = apply_chain(clean[i], spec, assets);
        const std::string name = inputs[i].filename().string();
        write_wav(clean[i], out_dir / "clean" / name);
        write_wav(distorted, out_dir / "distorted" / name);
        nlohmann::json line = {{"file", name},
                               {"clean", (fs::path("clean") / name).string()},
                               {"distorted", (fs::path("distorted") / name).string()},
                               {"spec", spec_to_json(spec)}};
        lines[i] = line.dump();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const int jobs = std::max(1, std::min<int>(g.jobs, static_cast<int>(inputs.size())));
    for (int j = 1; j < jobs; ++j) pool.emplace_back(worker);
    worker();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::string manifest;
  for (const auto& l : lines) manifest += l + "\n";
  detail::write_file_atomic(out_dir / "manifest.jsonl", manifest);
  write_meta(out_dir, "degrade", g, c, {{"files", inputs.size()}, {"task", to_string(c.task)}});
  log_info("degraded {} files into {}", inputs.size(), out_dir.string());
  return 0;
}

// ---------------------------------------------------------------------------
// train

std::string log_line(int step, const LossTriple& l, double lr) {
  // 17 significant digits: enough to compare resumed runs exactly
  return fmt::format(R"({{"step":{},"l_mask":{:.17g},"l_repa":{:.17g},"l_critic":{:.17g},"lr":{:.17g}}})", step,
                     l.l_mask, l.l_repa, l.l_critic, lr);
}

std::vector<std::string> read_log_until(const fs::path& path, int step) {
  std::vector<std::string> keep;
  if (!fs::exists(path)) return keep;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("step")) throw Error(ErrorCode::IoFailure, "corrupt training log " + path.string());
    if (j["step"].get<int>() <= step) keep.push_back(line);
  }
  return keep;
}

int cmd_train(const Globals& g, const fs::path& run, int steps_flag, bool resume) {
  RunConfig c = resolve_config(g, resume ? run : fs::path{});
  ensure_dir(run);
  const fs::path ck_path = run / "checkpoint.bin";
  const fs::path log_path = run / "train_log.jsonl";

  std::shared_ptr<const RvqCodebooks> books;
  if (resume && fs::exists(run / "codebooks.vxrq")) books = std::make_shared<const RvqCodebooks>(load_codebooks(run / "codebooks.vxrq"));
  const ToyCorpus corpus = build_corpus(c, kTrainSplit, c.model.corpus_size, books);
  if (corpus.codebooks && !books) save_codebooks(*corpus.codebooks, run / "codebooks.vxrq");

  std::unique_ptr<Trainer> trainer;
  std::vector<std::string> lines;
  if (resume) {
    if (!fs::exists(ck_path)) throw Error(ErrorCode::IoFailure, "no checkpoint to resume in " + run.string());
    trainer = std::make_unique<Trainer>(Trainer::load_checkpoint(ck_path));
    lines = read_log_until(log_path, trainer->step());
  } else {
    trainer = std::make_unique<Trainer>(c.train_config(corpus.input_bins()));
    write_json(run / "config.json", to_json(c));
  }
  const TrainConfig& tc = trainer->config();
  const int stop = std::min(tc.total_steps, steps_flag > 0 ? steps_flag : tc.total_steps);

  auto persist = [&] {
    std::string text;
    for (const auto& l : lines) text += l + "\n";
    detail::write_file_atomic(log_path, text);
    trainer->save_checkpoint(ck_path);
  };
  const auto t0 = std::chrono::steady_clock::now();
  while (trainer->step() < stop) {
    const double lr = lr_at(tc, trainer->step() + 1);
    const LossTriple l = trainer->train_step(corpus.items);
    lines.push_back(log_line(trainer->step(), l, lr));
    if (trainer->step() % c.model.checkpoint_every == 0) persist();
    log_debug("step {} l_mask {:.4f} l_repa {:.4f} l_critic {:.4f}", trainer->step(), l.l_mask, l.l_repa, l.l_critic);
  }
  persist();
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_meta(run, "train", g, c, {{"steps", trainer->step()}, {"resumed", resume}, {"seconds", seconds}});
  log_info("trained to step {} in {:.1f}s", trainer->step(), seconds);
  return 0;
}

// ---------------------------------------------------------------------------
// model loading for enhance / eval

struct LoadedRun {
  RunConfig config;
  std::unique_ptr<Trainer> trainer;
  std::shared_ptr<const RvqCodebooks> books;
};

LoadedRun load_run(const Globals& g, const fs::path& run, bool need_checkpoint) {
  LoadedRun r;
  r.config = resolve_config(g, run);
  if (!run.empty() && fs::exists(run / "codebooks.vxrq")) {
    r.books = std::make_shared<const RvqCodebooks>(load_codebooks(run / "codebooks.vxrq"));
  }
  if (need_checkpoint) {
    if (run.empty()) throw Error(ErrorCode::ConfigError, "--run is required unless --oracle-model is given");
    r.trainer = std::make_unique<Trainer>(Trainer::load_checkpoint(run / "checkpoint.bin"));
  }
  return r;
}

AudioBuffer read_at_rate(const fs::path& path, int rate) {
  AudioBuffer b = read_wav(path);
  return b.sample_rate == rate ? b : resample(b, rate);
}

// ---------------------------------------------------------------------------
// enhance

int cmd_enhance(const Globals& g, const fs::path& run, const fs::path& in_wav, const fs::path& out_dir,
                const fs::path& prompt_wav, const std::string& mode_flag, int steps_flag) {
  LoadedRun r = load_run(g, run, true);
  const RunConfig& c = r.config;
  if (!r.books) throw Error(ErrorCode::ConfigError, "enhance needs a run trained on the tokenized-audio corpus");
  const ModelBundle<float>& model = r.trainer->model();
  const int bins = c.audio.window / 2 + 1;
  if (model.config().input_bins != bins) {
    throw Error(ErrorCode::ConfigError, "checkpoint expects " + std::to_string(model.config().input_bins) +
                                            " bins but audio.window gives " + std::to_string(bins));
  }
  const FrameMatrix distorted = stft_powerlaw(read_at_rate(in_wav, c.audio.sample_rate), c.audio.window, c.audio.hop,
                                              c.audio.exponent).frames;
  TokenGrid prompt;
  FrameMatrix cond_input = distorted;
  if (!prompt_wav.empty()) {
    const FrameMatrix p = stft_powerlaw(read_at_rate(prompt_wav, c.audio.sample_rate), c.audio.window, c.audio.hop,
                                        c.audio.exponent).frames;
    prompt = rvq_encode(p, *r.books);
    // the prompt sits in front of the input; its span of the input is silent
    cond_input = FrameMatrix::Zero(p.rows() + distorted.rows(), bins);
    cond_input.bottomRows(distorted.rows()) = distorted;
  }
  const int frames = static_cast<int>(cond_input.rows());
  SamplerConfig sc;
  sc.steps = steps_flag > 0 ? steps_flag : c.sampler.steps;
  sc.mode = mode_flag.empty() ? c.sampler.mode : parse_confidence_mode(mode_flag);
  sc.temperature = c.sampler.temperature;
  sc.seed = c.sampler_seed();
  const Condition cond = encode_semantic(model, r.trainer->features(), cond_input, c.task, frames);
  const ToyModel<float> toy(model);
  const TokenGrid out = sample(toy, cond, frames, model.config().rvq_layers, sc, prompt.size() ? &prompt : nullptr);
  const FrameMatrix recon = rvq_decode(out, *r.books);

  ensure_dir(out_dir);
  write_json(out_dir / "tokens.json", {{"layers", out.layers()},
                                       {"frames", out.frames()},
                                       {"prompt_frames", prompt.frames()},
                                       {"tokens", grid_to_json(out)}});
  write_json(out_dir / "features.json",
             {{"note", "feature-domain reconstruction (power-law magnitude spectrogram); no waveform is synthesised"},
              {"hop", c.audio.hop},
              {"window", c.audio.window},
              {"exponent", c.audio.exponent},
              {"frames", frames_to_json(recon)}});
  write_meta(out_dir, "enhance", g, c,
             {{"input", in_wav.string()}, {"prompt", prompt_wav.string()}, {"mode", to_string(sc.mode)}, {"steps", sc.steps}});
  return 0;
}

// ---------------------------------------------------------------------------
// eval / sweep

/// Adapts a per-utterance oracle so a whole evaluation set can be swept:
/// each item is evaluated against its own one-hot truth.
std::vector<EvalReport> oracle_sweep(const std::vector<SweepItem>& items, int vocab, const SweepOptions& opt,
                                     const GridRenderer& render) {
  std::vector<EvalReport> merged;
  for (std::size_t u = 0; u < items.size(); ++u) {
    const OracleModel oracle(items[u].truth, vocab);
    const auto reps = step_sweep(oracle, {items[u]}, opt, render);
    if (merged.empty()) {
      merged = reps;
      for (auto& m : merged) {
        m.token_accuracy = 0.0;
        m.lsd_db = 0.0;
        m.utterances.clear();
      }
    }
    for (std::size_t i = 0; i < reps.size(); ++i) {
      merged[i].token_accuracy += reps[i].token_accuracy / static_cast<double>(items.size());
      merged[i].lsd_db += reps[i].lsd_db / static_cast<double>(items.size());
    }
  }
  return merged;
}

struct CriticCase {
  TrainItem item;
  TokenGrid observed;
  int corrupted_from = 0;
};

/// A clean utterance whose second half is buried in noise, plus the tokens
/// read off the noisy observation.
CriticCase critic_case(const RunConfig& c, const std::shared_ptr<const RvqCodebooks>& books) {
  CriticCase k;
  if (c.model.corpus == "patterned") {
    const auto world = patterned_world(c);
    const HalfNoisedCase h = half_noised_case(*world, c.sampler_seed());
    k.item = h.item;
    k.observed = h.observed_tokens;
    k.corrupted_from = h.corrupted_from;
    return k;
  }
  if (!books) throw Error(ErrorCode::ConfigError, "critic map on audio needs the run's codebooks");
  const int rate = c.audio.sample_rate;
  const AudioBuffer clean = synth_voice(150.0, 1.0, rate, c.sampler_seed());
  AudioBuffer noisy = clean;
  const AudioBuffer n = synth_noise(NoiseColor::White, clean.size(), rate, mix_seed(c.sampler_seed(), 1));
  const double gain = rms(clean.samples) / std::max(rms(n.samples), 1e-12) * std::pow(10.0, 5.0 / 20.0);  // -5 dB SNR
  for (std::size_t i = clean.size() / 2; i < clean.size(); ++i) noisy.samples[i] += static_cast<float>(gain * n.samples[i]);
  k.item.clean_spec = stft_powerlaw(clean, c.audio.window, c.audio.hop, c.audio.exponent).frames;
  k.item.distorted = stft_powerlaw(noisy, c.audio.window, c.audio.hop, c.audio.exponent).frames;
  k.item.clean = rvq_encode(k.item.clean_spec, *books);
  k.observed = rvq_encode(k.item.distorted, *books);
  // first frame whose window reaches the noisy half
  const auto half = static_cast<int>(clean.size() / 2);
  k.corrupted_from = std::max(0, (half - c.audio.window) / c.audio.hop + 1);
  return k;
}

void emit_critic_map(const fs::path& path, const RunConfig& c, const LoadedRun& r, bool oracle) {
  const CriticCase k = critic_case(c, r.books);
  PositionScores scores;
  if (oracle) {
    scores = OracleModel(k.item.clean, c.tokenizer.vocab).critic_scores(k.observed, Condition{});
  } else {
    const ModelBundle<float>& model = r.trainer->model();
    const Condition cond = encode_semantic(model, r.trainer->features(), k.item.distorted, k.item.task, k.observed.frames());
    scores = critic_forward(model, k.observed, cond);
  }
  const auto map = critic_frame_map(scores, k.observed);
  std::string csv = "frame,score,noised\n";
  for (std::size_t f = 0; f < map.size(); ++f) {
    csv += fmt::format("{},{:.6f},{}\n", f, map[f], static_cast<int>(f) >= k.corrupted_from ? 1 : 0);
  }
  detail::write_file_atomic(path, csv);
}

int cmd_eval(const Globals& g, const std::string& command, const fs::path& run, const fs::path& out_flag,
             bool oracle, const fs::path& critic_map) {
  LoadedRun r = load_run(g, run, !oracle);
  const RunConfig& c = r.config;
  const ToyCorpus held = build_corpus(c, kHeldOutSplit, c.eval.utterances, r.books);
  if (!r.books && held.codebooks) r.books = held.codebooks;

  SweepOptions opt;
  opt.jobs = g.jobs;
  opt.temperature = c.sampler.temperature;
  opt.seeds.clear();
  for (int s = 0; s < c.eval.seeds; ++s) opt.seeds.push_back(mix_seed(c.sampler_seed(), static_cast<std::uint64_t>(s)));
  if (command == "eval") {
    opt.steps = {c.sampler.steps};
    opt.modes = {c.sampler.mode};
  } else {
    opt.steps = c.eval.steps;
    opt.modes = c.eval.modes;
  }

  GridRenderer render;
  if (held.world) {
    render = [w = held.world](const TokenGrid& grid) { return w->render(grid); };
  } else {
    render = [b = r.books](const TokenGrid& grid) { return rvq_decode(grid, *b); };
  }

  std::vector<SweepItem> items;
  if (oracle) {
    for (const auto& it : held.items) {
      SweepItem s;
      s.cond.semantic = SemanticMatrix::Zero(it.clean.frames(), 1);
      s.cond.task = it.task;
      s.truth = it.clean;
      s.reference_spec = it.clean_spec;
      items.push_back(std::move(s));
    }
  } else {
    items = generation_items(r.trainer->model(), r.trainer->features(), held.items, 0, 0);
  }
  std::vector<EvalReport> reports;
  if (oracle) {
    reports = oracle_sweep(items, c.tokenizer.vocab, opt, render);
  } else {
    const ToyModel<float> toy(r.trainer->model());
    reports = step_sweep(toy, items, opt, render);
  }

  const fs::path out = out_flag.empty() ? (run.empty() ? fs::path(command + ".csv") : run / (command + ".csv")) : out_flag;
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  detail::write_file_atomic(out, sweep_csv(reports));
  if (!critic_map.empty()) {
    if (critic_map.has_parent_path()) ensure_dir(critic_map.parent_path());
    emit_critic_map(critic_map, c, r, oracle);
  }
  const fs::path meta_dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  write_meta(meta_dir, command, g, c, {{"csv", out.string()}, {"oracle_model", oracle}, {"rows", reports.size()}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  init_logging();
  Globals g;
  for (int i = 0; i < argc; ++i) g.argv.emplace_back(argv[i]);

  CLI::App app{"voxkit: degradation, masked token modelling and evaluation"};
  app.require_subcommand(1);
  app.add_option("--config", g.config_path, "JSON run configuration");
  app.add_option("--seed", g.seed, "base seed mixed into every random stream (overrides seeds.base)");
  app.add_option("--jobs", g.jobs, "worker threads")->check(CLI::PositiveNumber);

  std::string in_dir, out_dir, task;
  auto* degrade = app.add_subcommand("degrade", "simulate distorted copies of every WAV in a directory");
  degrade->add_option("--in", in_dir, "directory of clean WAVs")->required();
  degrade->add_option("--out", out_dir, "run directory for WAVs and manifest.jsonl")->required();
  degrade->add_option("--task", task, "enhancement | extraction");

  std::string run;
  int steps = 0;
  bool resume = false;
  auto* train = app.add_subcommand("train", "train the toy model; writes checkpoint.bin and train_log.jsonl");
  train->add_option("--run", run, "run directory")->required();
  train->add_option("--steps", steps, "stop once this step is reached (the schedule keeps total_steps)");
  train->add_flag("--resume", resume, "continue from the run's checkpoint");

  std::string in_wav, prompt_wav, mode;
  auto* enhance = app.add_subcommand("enhance", "generate clean tokens and features for one WAV");
  enhance->add_option("--run", run, "trained run directory")->required();
  enhance->add_option("--in", in_wav, "distorted WAV")->required();
  enhance->add_option("--out", out_dir, "output directory")->required();
  enhance->add_option("--prompt", prompt_wav, "clean prompt WAV");
  enhance->add_option("--mode", mode, "vanilla | self_critic");
  enhance->add_option("--steps", steps, "sampling steps");

  std::string out_csv, critic_map;
  bool oracle = false;
  std::vector<CLI::App*> evals;
  for (const char* name : {"eval", "sweep"}) {
    auto* e = app.add_subcommand(name, std::string(name) == "eval" ? "evaluate the configured sampler"
                                                                    : "sweep modes x steps x seeds");
    e->add_option("--run", run, "trained run directory");
    e->add_option("--out", out_csv, "CSV path (default <run>/<command>.csv)");
    e->add_flag("--oracle-model", oracle, "use a one-hot oracle instead of the checkpoint");
    e->add_option("--emit-critic-map", critic_map, "write per-frame critic scores on a half-noised utterance");
    evals.push_back(e);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (degrade->parsed()) return cmd_degrade(g, in_dir, out_dir, task);
    if (train->parsed()) return cmd_train(g, run, steps, resume);
    if (enhance->parsed()) return cmd_enhance(g, run, in_wav, out_dir, prompt_wav, mode, steps);
    for (auto* e : evals) {
      if (e->parsed()) return cmd_eval(g, e->get_name(), run, out_csv, oracle, critic_map);
    }
  } catch (const Error& e) {
    std::cerr << "voxkit: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "voxkit: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
