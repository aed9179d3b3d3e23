#pragma once

#include <cstdint>
#include <vector>

#include "voxkit/corpus.hpp"
#include "voxkit/evalkit.hpp"
#include "voxkit/maskgen.hpp"
#include "voxkit/toymodel.hpp"

namespace voxkit {

// Builders for the evaluation sets used by `voxkit eval|sweep` and the
// acceptance suite.

/// Masked-token accuracy (argmax) on held-out items: each item is masked at
/// a t drawn uniformly from (0, T] with no prompt.
inline double heldout_masked_accuracy(const ModelBundle<float>& model, const FeatureExtractor<float>& fx,
                                      const std::vector<TrainItem>& items, std::uint64_t seed,
                                      const MaskSchedule& schedule = {}) {
  std::size_t hits = 0, count = 0;
  Rng rng(mix_seed(seed, 0x686f));
  for (const TrainItem& it : items) {
    const double t = rng.uniform_open_low() * schedule.horizon;
    const MaskState st = forward_mask(it.clean, t, schedule, 0, rng.next_u64());
    const Condition cond = encode_semantic(model, fx, it.distorted, it.task, it.clean.frames());
    const Logits lg = decode_logits(model, st, cond);
    for (std::size_t p = 0; p < st.mask.size(); ++p) {
      if (!st.mask[p]) continue;
      const float* row = lg.row(p);
      hits += static_cast<Token>(std::max_element(row, row + lg.vocab) - row) == it.clean[p];
      ++count;
    }
  }
  return count ? static_cast<double>(hits) / static_cast<double>(count) : 1.0;
}

/// Sweep items for generation from a fully masked grid. With
/// `prompt_frames` > 0 the clean prefix is handed to the sampler and the
/// matching distorted frames are zeroed, as during training. Accuracy is
/// always scored from `score_from` on so prompt and no-prompt runs compare the
/// same frames.
inline std::vector<SweepItem> generation_items(const ModelBundle<float>& model, const FeatureExtractor<float>& fx,
                                               const std::vector<TrainItem>& items, int prompt_frames, int score_from) {
  std::vector<SweepItem> out;
  for (const TrainItem& it : items) {
    SweepItem s;
    FrameMatrix distorted = it.distorted;
    if (prompt_frames > 0) {
      Trainer::zero_prompt_frames(distorted, prompt_frames, it.clean.frames());
      s.prompt = it.clean.slice_frames(0, prompt_frames);
    }
    s.cond = encode_semantic(model, fx, distorted, it.task, it.clean.frames());
    s.truth = it.clean;
    s.reference_spec = it.clean_spec;
    s.score_from = score_from;
    out.push_back(std::move(s));
  }
  return out;
}

/// Replaces a `fraction` of non-prompt positions with a different random
/// token. Returns the corrupted grid; `replaced` marks the changed positions.
inline TokenGrid replace_tokens(const TokenGrid& clean, double fraction, int vocab, std::uint64_t seed,
                                std::vector<std::uint8_t>& replaced) {
  TokenGrid g = clean;
  replaced.assign(g.size(), 0);
  std::vector<std::size_t> order(g.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 0x7265706c));
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(g.size())));
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t i = order[j];
    Token t = static_cast<Token>(rng.below(static_cast<std::uint64_t>(vocab - 1)));
    if (t >= g[i]) ++t;
    g[i] = t;
    replaced[i] = 1;
  }
  return g;
}

/// A clean patterned utterance whose second half is then buried in heavy
/// noise, paired with the tokens a codec would read off that observation.
struct HalfNoisedCase {
  TrainItem item;
  TokenGrid observed_tokens;
  int style = 0;
  int corrupted_from = 0;
};

inline HalfNoisedCase half_noised_case(const PatternedWorld& world, std::uint64_t seed, double noise = 2.0) {
  const PatternedOptions& o = world.options();
  Rng rng(mix_seed(seed, 0x68616c66));
  HalfNoisedCase c;
  c.style = static_cast<int>(rng.below(static_cast<std::uint64_t>(o.styles)));
  const PatternedContent content = world.random_content(o.frames, rng);
  c.corrupted_from = o.frames / 2;
  std::vector<double> sigma(static_cast<std::size_t>(o.frames), 0.0);
  for (int f = c.corrupted_from; f < o.frames; ++f) sigma[static_cast<std::size_t>(f)] = noise;
  c.item.clean = world.tokens(c.style, content);
  c.item.clean_spec = world.clean_observation(c.style, content);
  c.item.distorted = world.noisy_observation(c.style, content, sigma, rng);
  c.item.task = Task::Enhancement;
  c.observed_tokens = world.tokenize_observation(c.item.distorted, c.style);
  return c;
}

/// Per-frame critic score (mean over layers).
inline std::vector<double> critic_frame_map(const PositionScores& scores, const TokenGrid& grid) {
  std::vector<double> out(static_cast<std::size_t>(grid.frames()), 0.0);
  for (int l = 0; l < grid.layers(); ++l) {
    for (int f = 0; f < grid.frames(); ++f) out[static_cast<std::size_t>(f)] += scores[grid.index(l, f)];
  }
  for (double& v : out) v /= grid.layers();
  return out;
}

}  // namespace voxkit
