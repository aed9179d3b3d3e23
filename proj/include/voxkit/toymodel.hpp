#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "voxkit/audio.hpp"
#include "voxkit/autograd.hpp"
#include "voxkit/core.hpp"
#include "voxkit/maskgen.hpp"
#include "voxkit/tokens.hpp"

namespace voxkit {

struct ModelConfig {
  int input_bins = 513;
  int dim = 128;
  int enc_layers = 2;
  int dec_layers = 3;
  int heads = 4;
  int ff_mult = 4;
  int vocab = 64;
  int rvq_layers = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (input_bins < 1 || dim < 2 || enc_layers < 0 || dec_layers < 1 || heads < 1 || ff_mult < 1 || vocab < 2 ||
        rvq_layers < 1) {
      throw Error(ErrorCode::ConfigError, "model dimensions must be positive");
    }
    if (dim % heads != 0 || (dim / heads) % 2 != 0) {
      throw Error(ErrorCode::ConfigError, "dim must split into heads of even width");
    }
  }
};

struct TrainConfig {
  ModelConfig model{};
  double lr = 1e-4;
  int warmup_steps = 400;
  int total_steps = 5000;
  int batch = 8;
  int seq_frames = 128;
  double p_prompt = 0.5;
  int prompt_frames = -1;  // -1: 3/8 of seq_frames
  double x0_temperature = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  MaskSchedule schedule{};

  int effective_prompt_frames() const { return prompt_frames >= 0 ? prompt_frames : seq_frames * 3 / 8; }

  void validate() const {
    model.validate();
    if (!(lr > 0.0) || warmup_steps < 0 || total_steps < 1 || batch < 1 || seq_frames < 2) {
      throw Error(ErrorCode::ConfigError, "bad optimisation settings");
    }
    if (!(p_prompt >= 0.0 && p_prompt <= 1.0)) throw Error(ErrorCode::ConfigError, "p_prompt must be in [0, 1]");
    if (effective_prompt_frames() >= seq_frames) throw Error(ErrorCode::ConfigError, "prompt_frames >= seq_frames");
    if (!(x0_temperature > 0.0)) throw Error(ErrorCode::ConfigError, "x0_temperature must be positive");
  }
};

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"input_bins", m.input_bins}, {"dim", m.dim},   {"enc_layers", m.enc_layers},
          {"dec_layers", m.dec_layers}, {"heads", m.heads}, {"ff_mult", m.ff_mult},
          {"vocab", m.vocab},           {"rvq_layers", m.rvq_layers}, {"seed", m.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  try {
    m.input_bins = j.at("input_bins").get<int>();
    m.dim = j.at("dim").get<int>();
    m.enc_layers = j.at("enc_layers").get<int>();
    m.dec_layers = j.at("dec_layers").get<int>();
    m.heads = j.at("heads").get<int>();
    m.ff_mult = j.at("ff_mult").get<int>();
    m.vocab = j.at("vocab").get<int>();
    m.rvq_layers = j.at("rvq_layers").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("model config: ") + e.what());
  }
  m.validate();
  return m;
}

/// lr_max * step / warmup up to warmup, then linear decay reaching 0 at
/// total_steps. Steps are counted from 1.
inline double lr_at(const TrainConfig& cfg, int step) {
  if (step <= 0) return 0.0;
  if (step >= cfg.total_steps) return 0.0;
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) return cfg.lr * step / cfg.warmup_steps;
  const int span = cfg.total_steps - cfg.warmup_steps;
  return cfg.lr * static_cast<double>(cfg.total_steps - step) / static_cast<double>(span);
}

/// Linear map that resamples `in_frames` rows onto `out_frames` rows by 1-D
/// linear interpolation with endpoints aligned.
template <typename T>
ad::Mat<T> interpolation_matrix(int out_frames, int in_frames) {
  if (out_frames < 1 || in_frames < 1) throw Error(ErrorCode::ShapeMismatch, "interpolation needs frames >= 1");
  ad::Mat<T> w = ad::Mat<T>::Zero(out_frames, in_frames);
  if (in_frames == 1 || out_frames == 1) {
    if (out_frames == 1) {
      w(0, 0) = T(1);
    } else {
      w.col(0).setOnes();
    }
    return w;
  }
  const double scale = static_cast<double>(in_frames - 1) / static_cast<double>(out_frames - 1);
  for (int i = 0; i < out_frames; ++i) {
    const double pos = i * scale;
    const int lo = std::min(static_cast<int>(std::floor(pos)), in_frames - 2);
    const double frac = pos - lo;
    w(i, lo) += static_cast<T>(1.0 - frac);
    w(i, lo + 1) += static_cast<T>(frac);
  }
  return w;
}

/// Frozen stand-in for a pretrained feature encoder: tanh of a seeded random
/// projection of each frame.
template <typename T>
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(int bins, int dim, std::uint64_t seed) : weight_(bins, dim) {
    Rng rng(mix_seed(seed, 0x6678));
    const double s = 1.0 / std::sqrt(static_cast<double>(bins));
    for (Eigen::Index i = 0; i < weight_.size(); ++i) weight_.data()[i] = static_cast<T>(rng.normal() * s);
  }

  /// Replaces the projection; used by tests that need fx = 0.
  explicit FeatureExtractor(ad::Mat<T> weight) : weight_(std::move(weight)) {}

  ad::Mat<T> operator()(const ad::Mat<T>& frames) const {
    if (frames.cols() != weight_.rows()) {
      throw Error(ErrorCode::ShapeMismatch, "feature extractor expects " + std::to_string(weight_.rows()) + " bins");
    }
    ad::Mat<T> z;
    z.noalias() = frames * weight_;
    return z.array().tanh().matrix();
  }

  int bins() const { return static_cast<int>(weight_.rows()); }
  int dim() const { return static_cast<int>(weight_.cols()); }

 private:
  ad::Mat<T> weight_;
};

template <typename T>
class ModelBundle {
 public:
  struct Linear {
    int w = -1, b = -1;
  };
  struct Norm {
    int g = -1, b = -1;
  };
  struct Block {
    Norm ln1, ln2;
    Linear q, k, v, o, ff1, ff2;
  };

  ModelBundle() = default;

  explicit ModelBundle(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng rng(mix_seed(cfg.seed, 0x696e6974));
    const int d = cfg.dim;
    const int ff = d * cfg.ff_mult;
    enc_in_ = linear("enc.in", cfg.input_bins, d, 1.0, rng);
    enc_task_ = add("enc.task", random(2, d, 0.5, rng));
    for (int i = 0; i < cfg.enc_layers; ++i) enc_blocks_.push_back(block("enc.block" + std::to_string(i), d, ff, cfg.enc_layers, rng));
    enc_out_ = norm("enc.ln_f", d);
    repa_[0] = linear("repa.0", d, d, 1.0, rng);
    repa_[1] = linear("repa.1", d, d, 1.0, rng);
    repa_[2] = linear("repa.2", d, d, 1.0, rng);
    for (int l = 0; l < cfg.rvq_layers; ++l) {
      embed_.push_back(add("dec.embed" + std::to_string(l), random(cfg.vocab + 1, d, 0.5, rng)));
    }
    dec_task_ = add("dec.task", random(2, d, 0.5, rng));
    dec_in_ = linear("dec.in", 2 * d, d, 1.0, rng);
    for (int i = 0; i < cfg.dec_layers; ++i) dec_blocks_.push_back(block("dec.block" + std::to_string(i), d, ff, cfg.dec_layers, rng));
    dec_out_ = norm("dec.ln_f", d);
    for (int l = 0; l < cfg.rvq_layers; ++l) heads_.push_back(linear("head" + std::to_string(l), d, cfg.vocab, 1.0, rng));
    critic_ = linear("critic", d, cfg.rvq_layers, 1.0, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<ad::Parameter<T>>& parameters() { return params_; }
  const std::vector<ad::Parameter<T>>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
    return n;
  }

  ad::Parameter<T>* find(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  bool all_finite() const {
    for (const auto& p : params_) {
      if (!p.value.allFinite()) return false;
    }
    return true;
  }

  template <typename U>
  ModelBundle<U> cast() const {
    ModelBundle<U> out;
    out.cfg_ = cfg_;
    for (const auto& p : params_) out.params_.emplace_back(p.name, p.value.template cast<U>());
    out.enc_in_ = {enc_in_.w, enc_in_.b};
    out.enc_task_ = enc_task_;
    for (const auto& b : enc_blocks_) out.enc_blocks_.push_back(ModelBundle<U>::convert(b));
    out.enc_out_ = {enc_out_.g, enc_out_.b};
    for (int i = 0; i < 3; ++i) out.repa_[i] = {repa_[i].w, repa_[i].b};
    out.embed_ = embed_;
    out.dec_task_ = dec_task_;
    out.dec_in_ = {dec_in_.w, dec_in_.b};
    for (const auto& b : dec_blocks_) out.dec_blocks_.push_back(ModelBundle<U>::convert(b));
    out.dec_out_ = {dec_out_.g, dec_out_.b};
    for (const auto& h : heads_) out.heads_.push_back({h.w, h.b});
    out.critic_ = {critic_.w, critic_.b};
    return out;
  }

  // ---- forward passes (record on the given tape) ----

  ad::Var param(ad::Tape<T>& tape, int idx) const {
    auto& p = const_cast<ad::Parameter<T>&>(params_[static_cast<std::size_t>(idx)]);
    return tape.grad_enabled() ? tape.param(p) : tape.constant(p.value);
  }

  /// Encoder over [task token ; projected frames]; returns the frame rows.
  ad::Var encode(ad::Tape<T>& tape, const ad::Mat<T>& spec, Task task) const {
    if (spec.cols() != cfg_.input_bins) {
      throw Error(ErrorCode::ShapeMismatch, "spectrogram has " + std::to_string(spec.cols()) + " bins, model expects " +
                                                std::to_string(cfg_.input_bins));
    }
    if (spec.rows() < 1) throw Error(ErrorCode::ShapeMismatch, "empty spectrogram");
    ad::Var x = affine(tape, tape.constant(spec), enc_in_);
    ad::Var task_row = tape.slice_rows(param(tape, enc_task_), task_index(task), 1);
    ad::Var h = tape.concat_rows(task_row, x);
    for (const auto& b : enc_blocks_) h = run_block(tape, h, b);
    h = layer_norm(tape, h, enc_out_);
    return tape.slice_rows(h, 1, spec.rows());
  }

  /// MLP with two hidden layers mapping encoder output to feature space.
  ad::Var project(ad::Tape<T>& tape, ad::Var h_enc) const {
    ad::Var x = tape.gelu(affine(tape, h_enc, repa_[0]));
    x = tape.gelu(affine(tape, x, repa_[1]));
    return affine(tape, x, repa_[2]);
  }

  /// Shared decoder trunk: per frame, Linear([semantic | sum of token
  /// embeddings]) followed by the transformer blocks. MASK uses row `vocab`.
  ad::Var trunk(ad::Tape<T>& tape, const TokenGrid& grid, ad::Var semantic, Task task) const {
    if (grid.layers() != cfg_.rvq_layers) {
      throw Error(ErrorCode::ShapeMismatch, "grid has " + std::to_string(grid.layers()) + " layers, model expects " +
                                                std::to_string(cfg_.rvq_layers));
    }
    if (tape.value(semantic).rows() != grid.frames()) {
      throw Error(ErrorCode::ShapeMismatch, "condition frames " + std::to_string(tape.value(semantic).rows()) +
                                                " != grid frames " + std::to_string(grid.frames()));
    }
    std::vector<ad::Var> tables;
    std::vector<std::vector<int>> ids(static_cast<std::size_t>(grid.layers()));
    for (int l = 0; l < grid.layers(); ++l) {
      tables.push_back(param(tape, embed_[static_cast<std::size_t>(l)]));
      auto& row = ids[static_cast<std::size_t>(l)];
      row.resize(static_cast<std::size_t>(grid.frames()));
      for (int f = 0; f < grid.frames(); ++f) {
        const Token tok = grid.at(l, f);
        if (tok != kMaskToken && (tok < 0 || tok >= cfg_.vocab)) throw Error(ErrorCode::OutOfDomain, "token out of vocabulary");
        row[static_cast<std::size_t>(f)] = tok == kMaskToken ? cfg_.vocab : tok;
      }
    }
    ad::Var tokens = tape.embed_sum(tables, ids);
    ad::Var x = affine(tape, tape.concat_cols(semantic, tokens), dec_in_);
    ad::Var task_row = tape.slice_rows(param(tape, dec_task_), task_index(task), 1);
    ad::Var h = tape.concat_rows(task_row, x);
    for (const auto& b : dec_blocks_) h = run_block(tape, h, b);
    h = layer_norm(tape, h, dec_out_);
    return tape.slice_rows(h, 1, grid.frames());
  }

  /// Per-layer logits, each frames x vocab.
  std::vector<ad::Var> heads(ad::Tape<T>& tape, ad::Var h) const {
    std::vector<ad::Var> out;
    for (const auto& lin : heads_) out.push_back(affine(tape, h, lin));
    return out;
  }

  /// Critic logits, frames x rvq_layers (pre-sigmoid).
  ad::Var critic(ad::Tape<T>& tape, ad::Var h) const { return affine(tape, h, critic_); }

 private:
  template <typename U>
  friend class ModelBundle;

  static int task_index(Task t) { return t == Task::Enhancement ? 0 : 1; }

  template <typename B>
  static Block convert(const B& b) {
    Block o;
    o.ln1 = {b.ln1.g, b.ln1.b};
    o.ln2 = {b.ln2.g, b.ln2.b};
    o.q = {b.q.w, b.q.b};
    o.k = {b.k.w, b.k.b};
    o.v = {b.v.w, b.v.b};
    o.o = {b.o.w, b.o.b};
    o.ff1 = {b.ff1.w, b.ff1.b};
    o.ff2 = {b.ff2.w, b.ff2.b};
    return o;
  }

  int add(std::string name, ad::Mat<T> value) {
    params_.emplace_back(std::move(name), std::move(value));
    return static_cast<int>(params_.size()) - 1;
  }

  static ad::Mat<T> random(int rows, int cols, double stddev, Rng& rng) {
    ad::Mat<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * stddev);
    return m;
  }

  Linear linear(const std::string& name, int in, int out, double gain, Rng& rng) {
    Linear l;
    l.w = add(name + ".w", random(in, out, gain / std::sqrt(static_cast<double>(in)), rng));
    l.b = add(name + ".b", ad::Mat<T>::Zero(1, out));
    return l;
  }

  Norm norm(const std::string& name, int d) {
    return {add(name + ".g", ad::Mat<T>::Ones(1, d)), add(name + ".b", ad::Mat<T>::Zero(1, d))};
  }

  Block block(const std::string& name, int d, int ff, int depth, Rng& rng) {
    const double out_gain = 1.0 / std::sqrt(2.0 * depth);
    Block b;
    b.ln1 = norm(name + ".ln1", d);
    b.q = linear(name + ".q", d, d, 1.0, rng);
    b.k = linear(name + ".k", d, d, 1.0, rng);
    b.v = linear(name + ".v", d, d, 1.0, rng);
    b.o = linear(name + ".o", d, d, out_gain, rng);
    b.ln2 = norm(name + ".ln2", d);
    b.ff1 = linear(name + ".ff1", d, ff, 1.0, rng);
    b.ff2 = linear(name + ".ff2", ff, d, out_gain, rng);
    return b;
  }

  ad::Var affine(ad::Tape<T>& tape, ad::Var x, const Linear& l) const {
    return tape.affine(x, param(tape, l.w), param(tape, l.b));
  }

  ad::Var layer_norm(ad::Tape<T>& tape, ad::Var x, const Norm& n) const {
    return tape.layer_norm(x, param(tape, n.g), param(tape, n.b));
  }

  ad::Var run_block(ad::Tape<T>& tape, ad::Var h, const Block& b) const {
    ad::Var x = layer_norm(tape, h, b.ln1);
    ad::Var att = tape.attention(affine(tape, x, b.q), affine(tape, x, b.k), affine(tape, x, b.v), cfg_.heads);
    h = tape.add(h, affine(tape, att, b.o));
    x = layer_norm(tape, h, b.ln2);
    return tape.add(h, affine(tape, tape.gelu(affine(tape, x, b.ff1)), b.ff2));
  }

  ModelConfig cfg_{};
  std::vector<ad::Parameter<T>> params_;
  Linear enc_in_;
  int enc_task_ = -1;
  std::vector<Block> enc_blocks_;
  Norm enc_out_;
  Linear repa_[3];
  std::vector<int> embed_;
  int dec_task_ = -1;
  Linear dec_in_;
  std::vector<Block> dec_blocks_;
  Norm dec_out_;
  std::vector<Linear> heads_;
  Linear critic_;
};

/// h_enc + fx(distorted), resampled along time to `frames` when the
/// spectrogram length differs from the token grid. h_enc is returned through
/// `h_enc_out` (already resampled) for the alignment loss.
template <typename T>
ad::Var semantic_forward(ad::Tape<T>& tape, const ModelBundle<T>& model, const FeatureExtractor<T>& fx,
                         const ad::Mat<T>& distorted, Task task, int frames, ad::Var* h_enc_out = nullptr) {
  if (fx.dim() != model.config().dim) throw Error(ErrorCode::ShapeMismatch, "feature extractor width != model dim");
  ad::Var h_enc = model.encode(tape, distorted, task);
  ad::Mat<T> feats = fx(distorted);
  if (distorted.rows() != frames) {
    const ad::Mat<T> w = interpolation_matrix<T>(frames, static_cast<int>(distorted.rows()));
    h_enc = tape.matmul(tape.constant(w), h_enc);
    feats = w * feats;
  }
  if (h_enc_out) *h_enc_out = h_enc;
  return tape.add(h_enc, tape.constant(std::move(feats)));
}

template <typename T>
Condition encode_semantic(const ModelBundle<T>& model, const FeatureExtractor<T>& fx, const ad::Mat<T>& distorted,
                          Task task, int frames) {
  ad::Tape<T> tape(false);
  const ad::Var s = semantic_forward(tape, model, fx, distorted, task, frames);
  return Condition{tape.value(s).template cast<float>(), task};
}

/// Mean over frames of the per-frame mean squared error between the
/// projected encoder output and the clean features.
template <typename T>
ad::Var repa_loss(ad::Tape<T>& tape, const ModelBundle<T>& model, ad::Var h_enc, const ad::Mat<T>& clean_features) {
  const ad::Var proj = model.project(tape, h_enc);
  if (tape.value(proj).rows() != clean_features.rows() || tape.value(proj).cols() != clean_features.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "clean features do not match encoder output");
  }
  return tape.mse(proj, clean_features);
}

template <typename T>
Logits logits_to_grid(ad::Tape<T>& tape, const std::vector<ad::Var>& per_layer, int frames, int vocab) {
  Logits out(static_cast<int>(per_layer.size()), frames, vocab);
  for (std::size_t l = 0; l < per_layer.size(); ++l) {
    const ad::Mat<T>& z = tape.value(per_layer[l]);
    for (int f = 0; f < frames; ++f) {
      float* row = out.row(static_cast<int>(l), f);
      for (int v = 0; v < vocab; ++v) row[v] = static_cast<float>(z(f, v));
    }
  }
  return out;
}

template <typename T>
Logits decode_logits(const ModelBundle<T>& model, const MaskState& state, const Condition& cond) {
  if (cond.frames() != state.grid.frames()) throw Error(ErrorCode::ShapeMismatch, "condition frames != grid frames");
  ad::Tape<T> tape(false);
  const ad::Var h = model.trunk(tape, state.grid, tape.constant(cond.semantic.template cast<T>()), cond.task);
  return logits_to_grid(tape, model.heads(tape, h), state.grid.frames(), model.config().vocab);
}

template <typename T>
PositionScores critic_forward(const ModelBundle<T>& model, const TokenGrid& x_tilde, const Condition& cond) {
  if (x_tilde.has_mask()) throw Error(ErrorCode::MaskedInput, "critic input contains MASK");
  if (cond.frames() != x_tilde.frames()) throw Error(ErrorCode::ShapeMismatch, "condition frames != grid frames");
  ad::Tape<T> tape(false);
  const ad::Var h = model.trunk(tape, x_tilde, tape.constant(cond.semantic.template cast<T>()), cond.task);
  const ad::Mat<T>& z = tape.value(model.critic(tape, h));
  PositionScores s(x_tilde.size());
  for (int l = 0; l < x_tilde.layers(); ++l) {
    for (int f = 0; f < x_tilde.frames(); ++f) {
      s[x_tilde.index(l, f)] = 1.0 / (1.0 + std::exp(-static_cast<double>(z(f, l))));
    }
  }
  return s;
}

/// Mean binary cross-entropy of probabilities against the mask over
/// non-prompt positions. Probabilities are clamped away from 0 and 1.
inline double critic_loss(const PositionScores& scores, const MaskState& mask_state) {
  if (scores.size() != mask_state.mask.size()) throw Error(ErrorCode::ShapeMismatch, "critic scores vs mask size");
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (mask_state.is_prompt(i)) continue;
    const double p = std::clamp(scores[i], 1e-12, 1.0 - 1e-12);
    total += mask_state.mask[i] ? -std::log(p) : -std::log(1.0 - p);
    ++n;
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

/// Adapter exposing a trained bundle through the sampler contract.
template <typename T>
class ToyModel : public ModelContract {
 public:
  explicit ToyModel(const ModelBundle<T>& model) : model_(model) {}

  Logits predict_logits(const MaskState& state, const Condition& cond) const override {
    return decode_logits(model_, state, cond);
  }
  PositionScores critic_scores(const TokenGrid& x_tilde, const Condition& cond) const override {
    return critic_forward(model_, x_tilde, cond);
  }

 private:
  const ModelBundle<T>& model_;
};

/// One training example: clean tokens, the distorted spectrogram the model
/// is conditioned on, and the clean spectrogram whose features anchor the
/// alignment loss.
struct TrainItem {
  TokenGrid clean;
  FrameMatrix distorted;
  FrameMatrix clean_spec;
  Task task = Task::Enhancement;
};

struct LossTriple {
  double l_mask = 0.0;
  double l_repa = 0.0;
  double l_critic = 0.0;
  double total = 0.0;
};

/// What one sample contributes: the masked state actually used and the
/// recorded loss variables.
template <typename T>
struct SampleLosses {
  ad::Var l_mask, l_repa, l_critic, total;
};

/// Records the three losses for one item on `tape`. `state` is X_t, and
/// `x_tilde` is the critic input; when empty it is built by sampling X̂0
/// from the current logits at `temperature` (no gradient flows through it).
template <typename T>
SampleLosses<T> record_losses(ad::Tape<T>& tape, const ModelBundle<T>& model, const FeatureExtractor<T>& fx,
                              const TrainItem& item, const ad::Mat<T>& distorted, const MaskState& state,
                              TokenGrid x_tilde, double temperature, Rng& rng) {
  const int frames = item.clean.frames();
  const int layers = item.clean.layers();
  ad::Var h_enc;
  const ad::Var semantic = semantic_forward(tape, model, fx, distorted, item.task, frames, &h_enc);

  const ad::Var h = model.trunk(tape, state.grid, semantic, item.task);
  const std::vector<ad::Var> logits = model.heads(tape, h);
  const std::size_t masked = state.masked_count();
  ad::Var l_mask = tape.constant(ad::Mat<T>::Zero(1, 1));
  for (int l = 0; l < layers; ++l) {
    std::vector<int> targets(static_cast<std::size_t>(frames));
    std::vector<T> weights(static_cast<std::size_t>(frames), T(0));
    for (int f = 0; f < frames; ++f) {
      targets[static_cast<std::size_t>(f)] = item.clean.at(l, f);
      weights[static_cast<std::size_t>(f)] = state.mask[item.clean.index(l, f)] ? T(1) : T(0);
    }
    l_mask = tape.add(l_mask, tape.weighted_cross_entropy(logits[static_cast<std::size_t>(l)], targets, weights,
                                                          static_cast<T>(masked)));
  }

  if (x_tilde.size() == 0) {
    TokenGrid sampled = state.grid;
    for (int l = 0; l < layers; ++l) {
      const ad::Mat<T>& z = tape.value(logits[static_cast<std::size_t>(l)]);
      std::vector<float> row(static_cast<std::size_t>(z.cols()));
      for (int f = 0; f < frames; ++f) {
        const std::size_t i = item.clean.index(l, f);
        if (!state.mask[i]) continue;
        for (Eigen::Index v = 0; v < z.cols(); ++v) row[static_cast<std::size_t>(v)] = static_cast<float>(z(f, v));
        sampled[i] = detail::draw_token(row.data(), static_cast<int>(z.cols()), temperature, rng);
      }
    }
    x_tilde = compose_x_tilde(sampled, state, item.clean);
  }
  const ad::Var hc = model.trunk(tape, x_tilde, semantic, item.task);
  const ad::Var critic_logits = model.critic(tape, hc);
  ad::Mat<T> labels(frames, layers), weights(frames, layers);
  T counted = 0;
  for (int f = 0; f < frames; ++f) {
    for (int l = 0; l < layers; ++l) {
      const std::size_t i = item.clean.index(l, f);
      labels(f, l) = state.mask[i] ? T(1) : T(0);
      weights(f, l) = f < state.prompt_frames ? T(0) : T(1);
      counted += weights(f, l);
    }
  }
  const ad::Var l_critic = tape.weighted_bce_logits(critic_logits, labels, weights, counted);

  const ad::Var l_repa = repa_loss(tape, model, h_enc, fx(item.clean_spec.template cast<T>()));
  const ad::Var total = tape.add(tape.add(l_mask, l_repa), l_critic);
  return {l_mask, l_repa, l_critic, total};
}

struct AdamState {
  std::vector<ad::Mat<float>> m, v;
};

/// Training loop state. Every step draws its batch and all randomness from
/// (seed, step), so resuming from a checkpoint continues bit-exactly.
class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg)
      : cfg_(cfg), model_((cfg.validate(), cfg.model)), fx_(cfg.model.input_bins, cfg.model.dim, cfg.model.seed) {
    for (const auto& p : model_.parameters()) {
      adam_.m.push_back(ad::Mat<float>::Zero(p.value.rows(), p.value.cols()));
      adam_.v.push_back(ad::Mat<float>::Zero(p.value.rows(), p.value.cols()));
    }
  }

  const TrainConfig& config() const { return cfg_; }
  ModelBundle<float>& model() { return model_; }
  const ModelBundle<float>& model() const { return model_; }
  const FeatureExtractor<float>& features() const { return fx_; }
  int step() const { return step_; }
  const AdamState& adam() const { return adam_; }

  /// Batch indices used at `step`.
  std::vector<std::size_t> batch_indices(std::size_t corpus_size, int step) const {
    Rng rng(mix_seed(cfg_.seed, 0x62617463ULL + static_cast<std::uint64_t>(step) * 0x100000001ULL));
    std::vector<std::size_t> idx(static_cast<std::size_t>(cfg_.batch));
    for (auto& i : idx) i = static_cast<std::size_t>(rng.below(corpus_size));
    return idx;
  }

  LossTriple train_step(const std::vector<TrainItem>& corpus) {
    if (corpus.empty()) throw Error(ErrorCode::InsufficientData, "empty corpus");
    if (step_ >= cfg_.total_steps) throw Error(ErrorCode::ContractViolation, "step >= total_steps");
    return train_on(corpus, batch_indices(corpus.size(), step_));
  }

  /// One optimisation step on the listed items.
  LossTriple train_on(const std::vector<TrainItem>& corpus, const std::vector<std::size_t>& indices) {
    model_.zero_grad();
    LossTriple sum;
    const double inv_b = 1.0 / static_cast<double>(indices.size());
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const TrainItem& item = corpus[indices[b]];
      Rng rng(mix_seed(mix_seed(cfg_.seed, static_cast<std::uint64_t>(step_)), b));
      const double t = rng.uniform_open_low() * cfg_.schedule.horizon;
      const int prompt = rng.bernoulli(cfg_.p_prompt) ? std::min(cfg_.effective_prompt_frames(), item.clean.frames() - 1) : 0;
      FrameMatrix distorted = item.distorted;
      zero_prompt_frames(distorted, prompt, item.clean.frames());
      const MaskState state = forward_mask(item.clean, t, cfg_.schedule, prompt, rng.next_u64());
      ad::Tape<float> tape(true);
      const auto losses =
          record_losses<float>(tape, model_, fx_, item, distorted, state, TokenGrid{}, cfg_.x0_temperature, rng);
      const double total = tape.scalar(losses.total);
      if (!std::isfinite(total)) {
        throw Error(ErrorCode::NonFiniteLoss, "step " + std::to_string(step_) + " item " + std::to_string(indices[b]) +
                                                  ": l_mask=" + std::to_string(tape.scalar(losses.l_mask)) +
                                                  " l_repa=" + std::to_string(tape.scalar(losses.l_repa)) +
                                                  " l_critic=" + std::to_string(tape.scalar(losses.l_critic)));
      }
      tape.backward(losses.total, static_cast<float>(inv_b));
      sum.l_mask += tape.scalar(losses.l_mask) * inv_b;
      sum.l_repa += tape.scalar(losses.l_repa) * inv_b;
      sum.l_critic += tape.scalar(losses.l_critic) * inv_b;
      sum.total += total * inv_b;
    }
    apply_adam(lr_at(cfg_, step_ + 1), step_ + 1);
    ++step_;
    return sum;
  }

  /// Zeroes the distorted frames covering the prompt, mapping grid frames
  /// onto spectrogram rows when their counts differ.
  static void zero_prompt_frames(FrameMatrix& distorted, int prompt_frames, int grid_frames) {
    if (prompt_frames <= 0) return;
    const auto rows = static_cast<long long>(distorted.rows());
    const long long cut = rows == grid_frames ? prompt_frames
                                              : static_cast<long long>(std::ceil(static_cast<double>(prompt_frames) *
                                                                                 static_cast<double>(rows) / grid_frames));
    distorted.topRows(static_cast<Eigen::Index>(std::min(cut, rows))).setZero();
  }

  void save_checkpoint(const std::filesystem::path& path) const;
  static Trainer load_checkpoint(const std::filesystem::path& path);

 private:
  void apply_adam(double lr, int k) {
    const auto b1 = static_cast<float>(cfg_.adam_beta1);
    const auto b2 = static_cast<float>(cfg_.adam_beta2);
    const double c1 = 1.0 - std::pow(cfg_.adam_beta1, k);
    const double c2 = 1.0 - std::pow(cfg_.adam_beta2, k);
    auto& ps = model_.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& m = adam_.m[i];
      auto& v = adam_.v[i];
      const auto& g = ps[i].grad;
      m = b1 * m + (1.0f - b1) * g;
      v = b2 * v + (1.0f - b2) * g.cwiseProduct(g);
      if (lr == 0.0) continue;
      const auto step = static_cast<float>(lr / c1);
      const auto vs = static_cast<float>(1.0 / c2);
      ps[i].value.array() -= step * m.array() / ((v.array() * vs).sqrt() + static_cast<float>(cfg_.adam_eps));
    }
  }

  TrainConfig cfg_;
  ModelBundle<float> model_;
  FeatureExtractor<float> fx_;
  AdamState adam_;
  int step_ = 0;

  friend struct CheckpointIo;
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"model", to_json(c.model)},
          {"lr", c.lr},
          {"warmup_steps", c.warmup_steps},
          {"total_steps", c.total_steps},
          {"batch", c.batch},
          {"seq_frames", c.seq_frames},
          {"p_prompt", c.p_prompt},
          {"prompt_frames", c.prompt_frames},
          {"x0_temperature", c.x0_temperature},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"seed", c.seed},
          {"schedule_horizon", c.schedule.horizon}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.model = model_config_from_json(j.at("model"));
    c.lr = j.at("lr").get<double>();
    c.warmup_steps = j.at("warmup_steps").get<int>();
    c.total_steps = j.at("total_steps").get<int>();
    c.batch = j.at("batch").get<int>();
    c.seq_frames = j.at("seq_frames").get<int>();
    c.p_prompt = j.at("p_prompt").get<double>();
    c.prompt_frames = j.at("prompt_frames").get<int>();
    c.x0_temperature = j.at("x0_temperature").get<double>();
    c.adam_beta1 = j.at("adam_beta1").get<double>();
    c.adam_beta2 = j.at("adam_beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.schedule.horizon = j.at("schedule_horizon").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// Checkpoint layout (little-endian):
//   "VXCK" u32 version u32 json_len json u64 step u32 blob_count
//   blob: u32 name_len name u32 rows u32 cols float32[rows*cols]
// Blobs are the parameters by name, then "adam.m/<name>" and "adam.v/<name>".
inline constexpr char kCheckpointMagic[4] = {'V', 'X', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointIo {
  static void save(const Trainer& tr, const std::filesystem::path& path) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 4);
    detail::append_le<std::uint32_t>(out, kCheckpointVersion);
    const std::string cfg = to_json(tr.cfg_).dump();
    detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
    out.insert(out.end(), cfg.begin(), cfg.end());
    detail::append_le<std::uint64_t>(out, static_cast<std::uint64_t>(tr.step_));
    const auto& ps = tr.model_.parameters();
    detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(3 * ps.size()));
    for (std::size_t i = 0; i < ps.size(); ++i) blob(out, ps[i].name, ps[i].value);
    for (std::size_t i = 0; i < ps.size(); ++i) blob(out, "adam.m/" + ps[i].name, tr.adam_.m[i]);
    for (std::size_t i = 0; i < ps.size(); ++i) blob(out, "adam.v/" + ps[i].name, tr.adam_.v[i]);
    detail::write_file_atomic(path, out);
  }

  static Trainer load(const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = detail::read_file(path);
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
      if (pos + n > bytes.size()) throw Error(ErrorCode::ConfigError, "truncated checkpoint " + path.string());
    };
    need(8);
    if (!std::equal(kCheckpointMagic, kCheckpointMagic + 4, bytes.begin())) {
      throw Error(ErrorCode::ConfigError, "not a checkpoint: " + path.string());
    }
    pos = 4;
    const auto version = detail::read_le<std::uint32_t>(bytes.data() + pos);
    pos += 4;
    if (version != kCheckpointVersion) throw Error(ErrorCode::ConfigError, "unsupported checkpoint version");
    need(4);
    const auto cfg_len = detail::read_le<std::uint32_t>(bytes.data() + pos);
    pos += 4;
    need(cfg_len);
    nlohmann::json cfg_json;
    try {
      cfg_json = nlohmann::json::parse(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + cfg_len));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ConfigError, std::string("checkpoint config: ") + e.what());
    }
    pos += cfg_len;
    Trainer tr(train_config_from_json(cfg_json));
    need(12);
    tr.step_ = static_cast<int>(detail::read_le<std::uint64_t>(bytes.data() + pos));
    pos += 8;
    const auto count = detail::read_le<std::uint32_t>(bytes.data() + pos);
    pos += 4;
    auto& ps = tr.model_.parameters();
    if (count != 3 * ps.size()) throw Error(ErrorCode::ConfigError, "checkpoint blob count mismatch");
    for (std::uint32_t b = 0; b < count; ++b) {
      need(4);
      const auto name_len = detail::read_le<std::uint32_t>(bytes.data() + pos);
      pos += 4;
      need(name_len + 8);
      const std::string name(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + name_len));
      pos += name_len;
      const auto rows = detail::read_le<std::uint32_t>(bytes.data() + pos);
      const auto cols = detail::read_le<std::uint32_t>(bytes.data() + pos + 4);
      pos += 8;
      const std::size_t i = b % ps.size();
      ad::Mat<float>& dst = b < ps.size() ? ps[i].value : (b < 2 * ps.size() ? tr.adam_.m[i] : tr.adam_.v[i]);
      const std::string expect = b < ps.size() ? ps[i].name : (b < 2 * ps.size() ? "adam.m/" : "adam.v/") + ps[i].name;
      if (name != expect || rows != dst.rows() || cols != dst.cols()) {
        throw Error(ErrorCode::ConfigError, "checkpoint blob '" + name + "' does not match the model");
      }
      need(static_cast<std::size_t>(rows) * cols * 4);
      for (Eigen::Index k = 0; k < dst.size(); ++k) {
        dst.data()[k] = detail::read_le<float>(bytes.data() + pos);
        pos += 4;
      }
    }
    if (!tr.model_.all_finite()) throw Error(ErrorCode::ConfigError, "checkpoint holds non-finite parameters");
    return tr;
  }

 private:
  static void blob(std::vector<std::uint8_t>& out, const std::string& name, const ad::Mat<float>& m) {
    detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index k = 0; k < m.size(); ++k) detail::append_le<float>(out, m.data()[k]);
  }
};

inline void Trainer::save_checkpoint(const std::filesystem::path& path) const { CheckpointIo::save(*this, path); }
inline Trainer Trainer::load_checkpoint(const std::filesystem::path& path) { return CheckpointIo::load(path); }

}  // namespace voxkit
