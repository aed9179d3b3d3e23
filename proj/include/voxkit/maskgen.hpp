#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "voxkit/core.hpp"
#include "voxkit/tokens.hpp"

namespace voxkit {

using SemanticMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// gamma(t) = sin(pi t / 2T) on (0, T].
struct MaskSchedule {
  double horizon = 1.0;

  double gamma(double t) const {
    if (!(t > 0.0 && t <= horizon)) {
      throw Error(ErrorCode::OutOfDomain, "t=" + std::to_string(t) + " outside (0, " + std::to_string(horizon) + "]");
    }
    return std::sin(kPi * t / (2.0 * horizon));
  }
};

inline double gamma(const MaskSchedule& schedule, double t) { return schedule.gamma(t); }

/// X_t with its mask. mask[i] is set exactly where grid[i] is MASK, and never
/// inside the first `prompt_frames` frames.
struct MaskState {
  TokenGrid grid;
  std::vector<std::uint8_t> mask;
  int prompt_frames = 0;

  std::size_t masked_count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
  bool is_prompt(std::size_t index) const {
    return static_cast<int>(index % static_cast<std::size_t>(grid.frames())) < prompt_frames;
  }
};

/// h_semantic and the task it was computed for.
struct Condition {
  SemanticMatrix semantic;
  Task task = Task::Enhancement;

  int frames() const { return static_cast<int>(semantic.rows()); }
};

/// Categorical logits for every (layer, frame) position.
struct Logits {
  int layers = 0;
  int frames = 0;
  int vocab = 0;
  std::vector<float> data;

  Logits() = default;
  Logits(int l, int f, int v) : layers(l), frames(f), vocab(v), data(static_cast<std::size_t>(l) * f * v, 0.0f) {}

  float* row(std::size_t position) { return data.data() + position * static_cast<std::size_t>(vocab); }
  const float* row(std::size_t position) const { return data.data() + position * static_cast<std::size_t>(vocab); }
  float* row(int layer, int frame) { return row(static_cast<std::size_t>(layer) * frames + static_cast<std::size_t>(frame)); }
  const float* row(int layer, int frame) const {
    return row(static_cast<std::size_t>(layer) * frames + static_cast<std::size_t>(frame));
  }
};

/// Per-position reals laid out like TokenGrid (layer-major).
using PositionScores = std::vector<double>;

/// What the sampler needs from a generative model: token logits given a
/// partially masked grid, and per-position "was this generated" scores.
class ModelContract {
 public:
  virtual ~ModelContract() = default;
  virtual Logits predict_logits(const MaskState& state, const Condition& cond) const = 0;
  virtual PositionScores critic_scores(const TokenGrid& x_tilde, const Condition& cond) const = 0;
};

enum class MaskGranularity { Position, Frame };

/// Masks every non-prompt position independently with probability gamma(t).
/// Frame granularity draws one Bernoulli per frame and applies it to all layers.
inline MaskState forward_mask(const TokenGrid& clean, double t, const MaskSchedule& schedule, int prompt_frames,
                              std::uint64_t seed, MaskGranularity granularity = MaskGranularity::Position) {
  const double p = schedule.gamma(t);
  if (prompt_frames < 0 || (clean.frames() > 0 && prompt_frames >= clean.frames())) {
    throw Error(ErrorCode::OutOfDomain, "prompt_frames must be in [0, frames)");
  }
  Rng rng(mix_seed(seed, 0x6d61736b));
  MaskState state{clean, std::vector<std::uint8_t>(clean.size(), 0), prompt_frames};
  if (granularity == MaskGranularity::Frame) {
    for (int f = prompt_frames; f < clean.frames(); ++f) {
      if (!rng.bernoulli(p)) continue;
      for (int l = 0; l < clean.layers(); ++l) {
        state.mask[clean.index(l, f)] = 1;
        state.grid.at(l, f) = kMaskToken;
      }
    }
    return state;
  }
  for (int l = 0; l < clean.layers(); ++l) {
    for (int f = prompt_frames; f < clean.frames(); ++f) {
      if (!rng.bernoulli(p)) continue;
      state.mask[clean.index(l, f)] = 1;
      state.grid.at(l, f) = kMaskToken;
    }
  }
  return state;
}

struct NllResult {
  double loss = 0.0;
  std::size_t count = 0;
  bool no_masked_positions = false;
};

inline void check_logits_shape(const Logits& logits, const TokenGrid& grid) {
  if (logits.layers != grid.layers() || logits.frames != grid.frames() ||
      logits.data.size() != static_cast<std::size_t>(logits.layers) * logits.frames * logits.vocab) {
    throw Error(ErrorCode::ShapeMismatch, "logits do not match grid shape");
  }
}

/// log-sum-exp of a logit row in double precision.
inline double log_sum_exp(const float* row, int vocab, double inv_temperature = 1.0) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int v = 0; v < vocab; ++v) mx = std::max(mx, row[v] * inv_temperature);
  double s = 0.0;
  for (int v = 0; v < vocab; ++v) s += std::exp(row[v] * inv_temperature - mx);
  return mx + std::log(s);
}

/// Mean negative log-likelihood of the target over masked positions only.
/// With no masked positions the loss is 0 and the flag is raised.
inline NllResult masked_nll(const Logits& logits, const MaskState& state, const TokenGrid& target) {
  check_logits_shape(logits, state.grid);
  require_same_shape(state.grid, target, "masked_nll target");
  if (state.mask.size() != target.size()) throw Error(ErrorCode::ShapeMismatch, "mask size");
  NllResult r;
  double acc = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (!state.mask[i]) continue;
    const Token y = target[i];
    if (y < 0 || y >= logits.vocab) throw Error(ErrorCode::OutOfDomain, "target token out of vocabulary");
    const float* row = logits.row(i);
    acc += log_sum_exp(row, logits.vocab) - row[y];
    ++r.count;
  }
  r.no_masked_positions = r.count == 0;
  r.loss = r.count == 0 ? 0.0 : acc / static_cast<double>(r.count);
  return r;
}

/// floor(N * gamma((step - 1) / S * T)), with gamma(0) taken as its limit 0.
/// A 1e-9 guard absorbs rounding when the exact product is an integer.
inline std::size_t remask_count(std::size_t n, int step, int steps, const MaskSchedule& schedule = {}) {
  if (steps < 1 || step < 1 || step > steps) {
    throw Error(ErrorCode::OutOfDomain, "step " + std::to_string(step) + " outside [1, " + std::to_string(steps) + "]");
  }
  if (step == 1 || n == 0) return 0;
  const double g = schedule.gamma(static_cast<double>(step - 1) / steps * schedule.horizon);
  const auto k = static_cast<std::size_t>(std::floor(static_cast<double>(n) * g + 1e-9));
  return std::min(k, n);
}

/// Probability of the sampled token at positions that are masked in `state`,
/// exactly 1 elsewhere (committed and prompt positions).
inline PositionScores vanilla_confidence(const Logits& logits, const TokenGrid& sampled, const MaskState& state,
                                         double temperature = 1.0) {
  check_logits_shape(logits, sampled);
  require_same_shape(sampled, state.grid, "vanilla_confidence");
  const double inv_t = temperature > 0.0 ? 1.0 / temperature : 1.0;
  PositionScores conf(sampled.size(), 1.0);
  for (std::size_t i = 0; i < sampled.size(); ++i) {
    if (!state.mask[i]) continue;
    const Token y = sampled[i];
    if (y < 0 || y >= logits.vocab) throw Error(ErrorCode::OutOfDomain, "sampled token out of vocabulary");
    const float* row = logits.row(i);
    if (temperature > 0.0) {
      conf[i] = std::exp(row[y] * inv_t - log_sum_exp(row, logits.vocab, inv_t));
    } else {
      conf[i] = std::exp(row[y] - log_sum_exp(row, logits.vocab));
    }
  }
  return conf;
}

inline void check_critic_scores(const PositionScores& scores, std::size_t expected) {
  if (scores.size() != expected) throw Error(ErrorCode::ContractViolation, "critic returned wrong number of scores");
  for (double s : scores) {
    if (!std::isfinite(s) || s < 0.0 || s > 1.0) {
      throw Error(ErrorCode::ContractViolation, "critic score " + std::to_string(s) + " outside [0, 1]");
    }
  }
}

/// 1 - critic score at every non-prompt position, committed ones included;
/// +inf at prompt positions so they are never chosen for remasking.
inline PositionScores self_critic_confidence(const ModelContract& model, const TokenGrid& x_tilde,
                                             const Condition& cond, int prompt_frames) {
  if (x_tilde.has_mask()) throw Error(ErrorCode::MaskedInput, "x_tilde must be fully populated");
  const PositionScores scores = model.critic_scores(x_tilde, cond);
  check_critic_scores(scores, x_tilde.size());
  PositionScores conf(x_tilde.size());
  for (int l = 0; l < x_tilde.layers(); ++l) {
    for (int f = 0; f < x_tilde.frames(); ++f) {
      const std::size_t i = x_tilde.index(l, f);
      conf[i] = f < prompt_frames ? std::numeric_limits<double>::infinity() : 1.0 - scores[i];
    }
  }
  return conf;
}

/// sampled where the mask is set, reference elsewhere.
inline TokenGrid compose_x_tilde(const TokenGrid& sampled, const MaskState& state, const TokenGrid& reference) {
  require_same_shape(sampled, state.grid, "compose_x_tilde sampled");
  require_same_shape(reference, state.grid, "compose_x_tilde reference");
  if (state.mask.size() != sampled.size()) throw Error(ErrorCode::ShapeMismatch, "mask size");
  TokenGrid out = reference;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (state.mask[i]) out[i] = sampled[i];
  }
  return out;
}

enum class ConfidenceMode { Vanilla, SelfCritic };

inline std::string to_string(ConfidenceMode m) { return m == ConfidenceMode::Vanilla ? "vanilla" : "self_critic"; }

inline ConfidenceMode parse_confidence_mode(const std::string& s) {
  if (s == "vanilla") return ConfidenceMode::Vanilla;
  if (s == "self_critic" || s == "self-critic") return ConfidenceMode::SelfCritic;
  throw Error(ErrorCode::ConfigError, "unknown confidence mode '" + s + "'");
}

struct SamplerConfig {
  int steps = 16;
  ConfidenceMode mode = ConfidenceMode::SelfCritic;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  MaskSchedule schedule{};
};

struct SampleTraceRecord {
  int step = 0;
  std::size_t masked_count = 0;
  double mean_confidence = 0.0;
  std::uint64_t remasked_positions_hash = 0;
};

namespace detail {

inline void check_logits_finite(const Logits& logits, const MaskState& state) {
  for (std::size_t i = 0; i < state.mask.size(); ++i) {
    if (!state.mask[i]) continue;
    const float* row = logits.row(i);
    for (int v = 0; v < logits.vocab; ++v) {
      if (!std::isfinite(row[v])) throw Error(ErrorCode::ContractViolation, "model returned non-finite logits");
    }
  }
}

/// Draws from softmax(row / temperature); temperature 0 means argmax.
inline Token draw_token(const float* row, int vocab, double temperature, Rng& rng) {
  if (temperature <= 0.0) return static_cast<Token>(std::max_element(row, row + vocab) - row);
  const double inv_t = 1.0 / temperature;
  double mx = -std::numeric_limits<double>::infinity();
  for (int v = 0; v < vocab; ++v) mx = std::max(mx, row[v] * inv_t);
  double total = 0.0;
  for (int v = 0; v < vocab; ++v) total += std::exp(row[v] * inv_t - mx);
  double r = rng.uniform() * total;
  int last_positive = 0;
  for (int v = 0; v < vocab; ++v) {
    const double w = std::exp(row[v] * inv_t - mx);
    if (w <= 0.0) continue;
    last_positive = v;
    r -= w;
    if (r < 0.0) return static_cast<Token>(v);
  }
  return static_cast<Token>(last_positive);
}

inline std::uint64_t fnv1a(const std::vector<std::size_t>& xs) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t x : xs) {
    for (int b = 0; b < 8; ++b) {
      h ^= (x >> (8 * b)) & 0xffu;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace detail

/// Iterative reverse process. Starts from a fully masked grid (after the
/// optional prompt prefix), and at each step t = S..1 samples every masked
/// position, scores confidence, and remasks the remask_count(N, t, S) least
/// confident non-prompt positions. Ties are broken by (frame, layer).
inline TokenGrid sample(const ModelContract& model, const Condition& cond, int frames, int layers,
                        const SamplerConfig& config, const TokenGrid* prompt = nullptr,
                        std::vector<SampleTraceRecord>* trace = nullptr) {
  if (config.steps < 1) throw Error(ErrorCode::OutOfDomain, "steps must be >= 1");
  if (frames <= 0 || layers <= 0) throw Error(ErrorCode::ShapeMismatch, "grid must be non-empty");
  if (cond.frames() != frames) {
    throw Error(ErrorCode::ShapeMismatch, "condition has " + std::to_string(cond.frames()) + " frames, grid " +
                                              std::to_string(frames));
  }
  const int prompt_frames = prompt ? prompt->frames() : 0;
  if (prompt) {
    if (prompt->layers() != layers) throw Error(ErrorCode::ShapeMismatch, "prompt layer count differs");
    if (prompt_frames >= frames) throw Error(ErrorCode::OutOfDomain, "prompt must be shorter than the output");
    if (prompt->has_mask()) throw Error(ErrorCode::MaskedInput, "prompt contains MASK");
  }

  MaskState state{TokenGrid(layers, frames), std::vector<std::uint8_t>(static_cast<std::size_t>(layers) * frames, 1),
                  prompt_frames};
  for (int l = 0; l < layers; ++l) {
    for (int f = 0; f < prompt_frames; ++f) {
      state.grid.at(l, f) = prompt->at(l, f);
      state.mask[state.grid.index(l, f)] = 0;
    }
  }

  std::vector<std::size_t> candidates;  // non-prompt positions in (frame, layer) order
  for (int f = prompt_frames; f < frames; ++f) {
    for (int l = 0; l < layers; ++l) candidates.push_back(state.grid.index(l, f));
  }
  const std::size_t n = candidates.size();
  Rng rng(mix_seed(config.seed, 0x73616d70));

  for (int t = config.steps; t >= 1; --t) {
    const Logits logits = model.predict_logits(state, cond);
    check_logits_shape(logits, state.grid);
    detail::check_logits_finite(logits, state);

    TokenGrid sampled = state.grid;
    for (std::size_t i = 0; i < sampled.size(); ++i) {
      if (state.mask[i]) sampled[i] = detail::draw_token(logits.row(i), logits.vocab, config.temperature, rng);
    }
    TokenGrid x_tilde = compose_x_tilde(sampled, state, state.grid);

    const PositionScores conf = config.mode == ConfidenceMode::Vanilla
                                    ? vanilla_confidence(logits, sampled, state, config.temperature)
                                    : self_critic_confidence(model, x_tilde, cond, prompt_frames);

    const std::size_t k = remask_count(n, t, config.steps, config.schedule);
    std::vector<std::size_t> order = candidates;
    // candidates are already in (frame, layer) order, so a stable sort on
    // confidence alone yields the documented tie-break
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return conf[a] < conf[b]; });
    order.resize(k);

    state.grid = std::move(x_tilde);
    std::fill(state.mask.begin(), state.mask.end(), 0);
    for (std::size_t i : order) {
      state.grid[i] = kMaskToken;
      state.mask[i] = 1;
    }

    if (trace) {
      double mean = 0.0;
      for (std::size_t i : candidates) mean += conf[i];
      std::sort(order.begin(), order.end());
      trace->push_back({t, k, n ? mean / static_cast<double>(n) : 0.0, detail::fnv1a(order)});
    }
  }
  return state.grid;
}

/// Knows the answer: one-hot logits on the target, critic flags any token
/// that differs from it. Useful as a sampler oracle and for CLI smoke runs.
class OracleModel : public ModelContract {
 public:
  OracleModel(TokenGrid target, int vocab) : target_(std::move(target)), vocab_(vocab) {}

  Logits predict_logits(const MaskState& state, const Condition&) const override {
    require_same_shape(state.grid, target_, "oracle");
    Logits out(target_.layers(), target_.frames(), vocab_);
    for (std::size_t i = 0; i < target_.size(); ++i) {
      float* row = out.row(i);
      std::fill(row, row + vocab_, -1e4f);
      row[target_[i]] = 0.0f;
    }
    return out;
  }

  PositionScores critic_scores(const TokenGrid& x_tilde, const Condition&) const override {
    require_same_shape(x_tilde, target_, "oracle critic");
    PositionScores s(x_tilde.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = x_tilde[i] == target_[i] ? 0.0 : 1.0;
    return s;
  }

 private:
  TokenGrid target_;
  int vocab_;
};

}  // namespace voxkit
