#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>

#include "voxkit/audio.hpp"
#include "voxkit/core.hpp"
#include "voxkit/maskgen.hpp"
#include "voxkit/tokens.hpp"

namespace voxkit {

/// 10 log10(sum ref^2 / sum (test - ref)^2); +inf when the residual is zero.
inline double snr_db(const AudioBuffer& reference, const AudioBuffer& test) {
  if (reference.sample_rate != test.sample_rate) throw Error(ErrorCode::RateMismatch, "snr_db sample rates differ");
  if (reference.samples.size() != test.samples.size()) {
    throw Error(ErrorCode::LengthMismatch, "snr_db lengths " + std::to_string(reference.samples.size()) + " vs " +
                                               std::to_string(test.samples.size()));
  }
  double sig = 0.0, res = 0.0;
  for (std::size_t i = 0; i < reference.samples.size(); ++i) {
    const double r = reference.samples[i];
    const double d = static_cast<double>(test.samples[i]) - r;
    sig += r * r;
    res += d * d;
  }
  if (res == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(sig / res);
}

inline constexpr double kLsdFloor = 1e-8;

/// Mean over frames of sqrt(mean over bins of (10 log10(ref/test))^2), with
/// magnitudes floored at 1e-8.
inline double lsd_db(const FrameMatrix& reference, const FrameMatrix& test) {
  if (reference.rows() != test.rows() || reference.cols() != test.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "lsd_db shapes differ");
  }
  if (reference.size() == 0) throw Error(ErrorCode::ShapeMismatch, "lsd_db on empty spectrogram");
  double total = 0.0;
  for (Eigen::Index f = 0; f < reference.rows(); ++f) {
    double acc = 0.0;
    for (Eigen::Index b = 0; b < reference.cols(); ++b) {
      const double r = std::max(static_cast<double>(std::abs(reference(f, b))), kLsdFloor);
      const double t = std::max(static_cast<double>(std::abs(test(f, b))), kLsdFloor);
      const double d = 10.0 * std::log10(r / t);
      acc += d * d;
    }
    total += std::sqrt(acc / static_cast<double>(reference.cols()));
  }
  return total / static_cast<double>(reference.rows());
}

inline double lsd_db(const Spectrogram& reference, const Spectrogram& test) {
  return lsd_db(reference.frames, test.frames);
}

struct AccuracyResult {
  double value = 1.0;
  std::size_t count = 0;
  bool empty_scope = false;
};

/// Fraction of equal entries, over every position or only where `mask` is
/// set. An empty scope is reported as 1.0 with `empty_scope` raised.
inline AccuracyResult token_accuracy(const TokenGrid& pred, const TokenGrid& truth,
                                     const std::vector<std::uint8_t>* mask = nullptr, int from_frame = 0) {
  require_same_shape(pred, truth, "token_accuracy");
  if (pred.has_mask()) throw Error(ErrorCode::MaskedInput, "prediction contains MASK");
  if (mask && mask->size() != pred.size()) throw Error(ErrorCode::ShapeMismatch, "accuracy mask size");
  AccuracyResult r;
  std::size_t hits = 0;
  for (int l = 0; l < pred.layers(); ++l) {
    for (int f = std::max(0, from_frame); f < pred.frames(); ++f) {
      const std::size_t i = pred.index(l, f);
      if (mask && !(*mask)[i]) continue;
      ++r.count;
      hits += pred[i] == truth[i];
    }
  }
  if (r.count == 0) {
    r.empty_scope = true;
    return r;
  }
  r.value = static_cast<double>(hits) / static_cast<double>(r.count);
  return r;
}

/// ROC-AUC as the normalised Mann-Whitney U statistic; tied scores get
/// average ranks, so a tie between classes counts one half.
inline double critic_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size()) throw Error(ErrorCode::ShapeMismatch, "critic_auc sizes differ");
  const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw Error(ErrorCode::SingleClass, "critic_auc needs both classes");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]]) rank_sum += avg;
    }
    i = j + 1;
  }
  const double u = rank_sum - static_cast<double>(pos) * static_cast<double>(pos + 1) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

/// One utterance of an evaluation set. Accuracy is scored on frames at or
/// after `score_from`; a non-empty `prompt` is handed to the sampler.
struct SweepItem {
  Condition cond;
  TokenGrid truth;
  TokenGrid prompt;
  FrameMatrix reference_spec;
  int score_from = 0;
};

/// Maps a token grid to a spectrogram for LSD; empty means no LSD.
using GridRenderer = std::function<FrameMatrix(const TokenGrid&)>;

struct UtteranceResult {
  double token_accuracy = 0.0;
  double lsd_db = std::numeric_limits<double>::quiet_NaN();
  TokenGrid output;
};

struct EvalReport {
  ConfidenceMode mode = ConfidenceMode::SelfCritic;
  int steps = 0;
  std::uint64_t seed = 0;
  double token_accuracy = 0.0;
  double lsd_db = std::numeric_limits<double>::quiet_NaN();
  /// Critic ranking of wrong vs right tokens in the outputs; NaN when every
  /// output token is right (or every one wrong).
  double critic_auc = std::numeric_limits<double>::quiet_NaN();
  std::vector<UtteranceResult> utterances;
};

struct SweepOptions {
  std::vector<int> steps{4, 8, 16};
  std::vector<ConfidenceMode> modes{ConfidenceMode::Vanilla, ConfidenceMode::SelfCritic};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  double temperature = 1.0;
  MaskSchedule schedule{};
  int jobs = 1;
};

/// Runs one (mode, S, seed) cell over every item.
inline EvalReport evaluate_cell(const ModelContract& model, const std::vector<SweepItem>& items, ConfidenceMode mode,
                                int steps, std::uint64_t seed, const SweepOptions& opt, const GridRenderer& render = {}) {
  EvalReport rep;
  rep.mode = mode;
  rep.steps = steps;
  rep.seed = seed;
  if (items.empty()) throw Error(ErrorCode::InsufficientData, "evaluation set is empty");
  std::vector<double> scores;
  std::vector<std::uint8_t> wrong;
  double acc = 0.0, lsd = 0.0;
  for (std::size_t u = 0; u < items.size(); ++u) {
    const SweepItem& it = items[u];
    SamplerConfig cfg;
    cfg.steps = steps;
    cfg.mode = mode;
    cfg.temperature = opt.temperature;
    cfg.schedule = opt.schedule;
    cfg.seed = mix_seed(seed, u);
    UtteranceResult r;
    r.output = sample(model, it.cond, it.truth.frames(), it.truth.layers(), cfg,
                      it.prompt.size() ? &it.prompt : nullptr);
    r.token_accuracy = token_accuracy(r.output, it.truth, nullptr, it.score_from).value;
    if (render && it.reference_spec.size()) r.lsd_db = lsd_db(it.reference_spec, render(r.output));
    const PositionScores s = model.critic_scores(r.output, it.cond);
    for (int l = 0; l < r.output.layers(); ++l) {
      for (int f = it.score_from; f < r.output.frames(); ++f) {
        const std::size_t i = r.output.index(l, f);
        scores.push_back(s[i]);
        wrong.push_back(r.output[i] != it.truth[i]);
      }
    }
    acc += r.token_accuracy;
    lsd += r.lsd_db;
    rep.utterances.push_back(std::move(r));
  }
  rep.token_accuracy = acc / static_cast<double>(items.size());
  rep.lsd_db = lsd / static_cast<double>(items.size());
  try {
    rep.critic_auc = critic_auc(scores, wrong);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::SingleClass) throw;
  }
  return rep;
}

/// Every (mode, S, seed) cell, ordered mode-major then S then seed. Cells run
/// on up to `jobs` threads; results land in fixed slots so output order and
/// values do not depend on scheduling.
inline std::vector<EvalReport> step_sweep(const ModelContract& model, const std::vector<SweepItem>& items,
                                          const SweepOptions& opt, const GridRenderer& render = {}) {
  struct Cell {
    ConfidenceMode mode;
    int steps;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (ConfidenceMode m : opt.modes) {
    for (int s : opt.steps) {
      for (std::uint64_t seed : opt.seeds) cells.push_back({m, s, seed});
    }
  }
  std::vector<EvalReport> out(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        out[i] = evaluate_cell(model, items, cells[i].mode, cells[i].steps, cells[i].seed, opt, render);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(opt.jobs, static_cast<int>(cells.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

inline constexpr const char* kSweepCsvHeader = "mode,steps,seed,token_accuracy,lsd_db,critic_auc";

inline std::string format_metric(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return fmt::format("{:.6f}", v);
}

inline std::string sweep_csv(const std::vector<EvalReport>& reports) {
  std::string out = std::string(kSweepCsvHeader) + "\n";
  for (const auto& r : reports) {
    out += fmt::format("{},{},{},{},{},{}\n", to_string(r.mode), r.steps, r.seed, format_metric(r.token_accuracy),
                       format_metric(r.lsd_db), format_metric(r.critic_auc));
  }
  return out;
}

}  // namespace voxkit
