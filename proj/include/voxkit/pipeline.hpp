#pragma once

// Corpora as the command-line tool builds them from a RunConfig, so other
// programs can reproduce a run's training and held-out data.

#include <algorithm>
#include <memory>

#include "voxkit/config.hpp"
#include "voxkit/corpus.hpp"

namespace voxkit {

/// Split ids for build_corpus.
inline constexpr int kTrainSplit = 1;
inline constexpr int kHeldOutSplit = 2;

inline PatternedOptions patterned_options(const RunConfig& c) {
  PatternedOptions o;
  o.vocab = c.tokenizer.vocab;
  o.layers = c.tokenizer.layers;
  o.frames = c.model.seq_frames;
  o.symbols = std::max(2, o.vocab / o.styles);
  return o;
}

inline AudioCorpusOptions audio_options(const RunConfig& c) {
  AudioCorpusOptions o;
  o.sample_rate = c.audio.sample_rate;
  o.window = c.audio.window;
  o.hop = c.audio.hop;
  o.exponent = c.audio.exponent;
  o.rvq_layers = c.tokenizer.layers;
  o.vocab = c.tokenizer.vocab;
  o.policy = c.degradation;
  return o;
}

/// The patterned world is fixed by the data seed alone.
inline std::shared_ptr<const PatternedWorld> patterned_world(const RunConfig& c) {
  return std::make_shared<const PatternedWorld>(patterned_options(c), c.data_seed());
}

/// Audio corpora reuse `books` when given, so held-out tokens share the
/// training codec.
inline ToyCorpus build_corpus(const RunConfig& c, int split, int size, std::shared_ptr<const RvqCodebooks> books = nullptr) {
  const std::uint64_t seed = mix_seed(c.data_seed(), static_cast<std::uint64_t>(split));
  if (c.model.corpus == "patterned") return make_patterned_corpus(patterned_world(c), size, seed);
  return make_audio_corpus(size, seed, audio_options(c), std::move(books));
}

}  // namespace voxkit
