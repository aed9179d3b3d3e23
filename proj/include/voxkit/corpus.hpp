#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "voxkit/audio.hpp"
#include "voxkit/core.hpp"
#include "voxkit/degradation.hpp"
#include "voxkit/tokenizer.hpp"
#include "voxkit/tokens.hpp"
#include "voxkit/toymodel.hpp"

namespace voxkit {

// Synthetic training data. The patterned world is a small generative story
// standing in for speech: each utterance has a speaker style, and the RVQ
// layers are split into groups that each carry a stream of content symbols
// held for a few frames. A layer's token depends on (style, its group's
// symbol), and each layer spends the whole vocabulary across the styles, so
// tokens are only readable once the style is known. The observation the
// model conditions on gives each group its own slice of bins showing that
// group's symbol template, plus a weak style cue, noise and occasional
// bursts of heavy noise.

struct PatternedOptions {
  int styles = 4;
  int symbols = 16;
  int vocab = 64;
  int layers = 4;
  int layer_groups = 1;  // layers within a group share a symbol stream
  int frames = 128;
  int bins = 32;
  int min_segment = 3;
  int max_segment = 8;
  double style_gain = 0.35;
  double base_noise = 0.6;
  double burst_noise = 1.5;
  double burst_probability = 0.6;
  double burst_min_fraction = 0.125;
  double burst_max_fraction = 0.33;

  void validate() const {
    if (styles < 1 || symbols < 2 || layers < 1 || frames < 2 || bins < layers || min_segment < 1 ||
        max_segment < min_segment || layer_groups < 1 || layers % layer_groups != 0) {
      throw Error(ErrorCode::ConfigError, "patterned corpus dimensions");
    }
    if (styles * symbols > vocab) throw Error(ErrorCode::ConfigError, "patterned corpus needs styles * symbols <= vocab");
  }
};

/// One symbol stream per layer group: content[g][f].
using PatternedContent = std::vector<std::vector<int>>;

struct PatternedSample {
  TrainItem item;
  int style = 0;
  PatternedContent content;
  std::vector<std::uint8_t> burst;  // per frame, 1 inside a heavy-noise burst
};

class PatternedWorld {
 public:
  PatternedWorld(const PatternedOptions& opt, std::uint64_t seed) : opt_(opt) {
    opt.validate();
    Rng rng(mix_seed(seed, 0x776f726c64));
    table_.assign(static_cast<std::size_t>(opt.styles), std::vector<std::vector<Token>>(static_cast<std::size_t>(opt.layers)));
    for (int l = 0; l < opt.layers; ++l) {
      const std::vector<Token> p = permutation(rng);
      for (int k = 0; k < opt.styles; ++k) {
        const auto from = p.begin() + static_cast<long>(k) * opt.symbols;
        table_[static_cast<std::size_t>(k)][static_cast<std::size_t>(l)].assign(from, from + opt.symbols);
      }
    }
    content_.resize(opt.symbols, opt.bins);
    for (Eigen::Index i = 0; i < content_.size(); ++i) content_.data()[i] = static_cast<float>(std::abs(rng.normal()));
    style_.resize(opt.styles, opt.bins);
    for (Eigen::Index i = 0; i < style_.size(); ++i) {
      style_.data()[i] = static_cast<float>(std::abs(rng.normal()) * opt.style_gain);
    }
  }

  const PatternedOptions& options() const { return opt_; }

  Token token(int style, int layer, int symbol) const {
    return table_[static_cast<std::size_t>(style)][static_cast<std::size_t>(layer)][static_cast<std::size_t>(symbol)];
  }

  int group_of(int layer) const { return layer / (opt_.layers / opt_.layer_groups); }

  /// First bin and width of the band layer l is read from. Bands nest inside
  /// their group's slice.
  std::pair<int, int> band(int layer) const {
    const int lo = layer * opt_.bins / opt_.layers;
    return {lo, (layer + 1) * opt_.bins / opt_.layers - lo};
  }

  std::pair<int, int> group_slice(int group) const {
    const int lo = group * opt_.bins / opt_.layer_groups;
    return {lo, (group + 1) * opt_.bins / opt_.layer_groups - lo};
  }

  TokenGrid tokens(int style, const PatternedContent& content) const {
    const int frames = check_content(content);
    TokenGrid g(opt_.layers, frames);
    for (int l = 0; l < opt_.layers; ++l) {
      const auto& stream = content[static_cast<std::size_t>(group_of(l))];
      for (int f = 0; f < frames; ++f) g.at(l, f) = token(style, l, stream[static_cast<std::size_t>(f)]);
    }
    return g;
  }

  /// Noise-free observation of a content sequence.
  FrameMatrix clean_observation(int style, const PatternedContent& content) const {
    const int frames = check_content(content);
    FrameMatrix out(frames, opt_.bins);
    for (int g = 0; g < opt_.layer_groups; ++g) {
      const auto [lo, width] = group_slice(g);
      for (int f = 0; f < frames; ++f) {
        out.row(f).segment(lo, width) = content_.row(content[static_cast<std::size_t>(g)][static_cast<std::size_t>(f)]).segment(lo, width);
      }
    }
    out.rowwise() += style_.row(style);
    return out;
  }

  /// Adds N(0, sigma_f^2) per frame on top of the clean observation.
  FrameMatrix noisy_observation(int style, const PatternedContent& content, const std::vector<double>& sigma,
                                Rng& rng) const {
    FrameMatrix out = clean_observation(style, content);
    for (Eigen::Index f = 0; f < out.rows(); ++f) {
      for (Eigen::Index b = 0; b < out.cols(); ++b) {
        out(f, b) += static_cast<float>(rng.normal() * sigma[static_cast<std::size_t>(f)]);
      }
    }
    return out;
  }

  /// Independent segment streams, one per layer group.
  PatternedContent random_content(int frames, Rng& rng) const {
    PatternedContent content(static_cast<std::size_t>(opt_.layer_groups));
    for (auto& stream : content) {
      int prev = -1;
      while (static_cast<int>(stream.size()) < frames) {
        int sym = static_cast<int>(rng.below(static_cast<std::uint64_t>(opt_.symbols - 1)));
        if (prev >= 0 && sym >= prev) ++sym;
        const int len = rng.range(opt_.min_segment, opt_.max_segment);
        for (int i = 0; i < len && static_cast<int>(stream.size()) < frames; ++i) stream.push_back(sym);
        prev = sym;
      }
    }
    return content;
  }

  PatternedSample sample(std::uint64_t seed) const {
    Rng rng(mix_seed(seed, 0x6974656d));
    PatternedSample s;
    s.style = static_cast<int>(rng.below(static_cast<std::uint64_t>(opt_.styles)));
    s.content = random_content(opt_.frames, rng);
    s.burst.assign(static_cast<std::size_t>(opt_.frames), 0);
    if (rng.bernoulli(opt_.burst_probability)) {
      const int lo = std::max(1, static_cast<int>(opt_.burst_min_fraction * opt_.frames));
      const int hi = std::max(lo, static_cast<int>(opt_.burst_max_fraction * opt_.frames));
      const int len = rng.range(lo, hi);
      const int start = rng.range(0, opt_.frames - len);
      std::fill(s.burst.begin() + start, s.burst.begin() + start + len, std::uint8_t{1});
    }
    std::vector<double> sigma(static_cast<std::size_t>(opt_.frames));
    for (std::size_t f = 0; f < sigma.size(); ++f) {
      sigma[f] = s.burst[f] ? std::hypot(opt_.base_noise, opt_.burst_noise) : opt_.base_noise;
    }
    s.item.clean = tokens(s.style, s.content);
    s.item.clean_spec = clean_observation(s.style, s.content);
    s.item.distorted = noisy_observation(s.style, s.content, sigma, rng);
    s.item.task = Task::Enhancement;
    return s;
  }

  /// What an idealised codec reads off an observation under a known style:
  /// layer l takes the nearest content template over its own band of bins.
  /// Clean frames read the same symbol in every band of a group; heavy noise
  /// makes the bands disagree, giving tuples no clean frame has.
  TokenGrid tokenize_observation(const FrameMatrix& obs, int style) const {
    if (obs.cols() != opt_.bins) throw Error(ErrorCode::ShapeMismatch, "observation bin count");
    TokenGrid g(opt_.layers, static_cast<int>(obs.rows()));
    for (int l = 0; l < opt_.layers; ++l) {
      const auto [lo, width] = band(l);
      const auto templates = content_.middleCols(lo, width);
      for (Eigen::Index f = 0; f < obs.rows(); ++f) {
        const Eigen::RowVectorXf x = obs.row(f).segment(lo, width) - style_.row(style).segment(lo, width);
        Eigen::Index best = 0;
        (templates.rowwise() - x).rowwise().squaredNorm().minCoeff(&best);
        g.at(l, static_cast<int>(f)) = token(style, l, static_cast<int>(best));
      }
    }
    return g;
  }

  /// Clean observation of the (style, symbol) pair that agrees with the most
  /// layers of each group and frame; ties resolve to the lowest style, then
  /// symbol. Style is chosen once per grid by total agreement.
  FrameMatrix render(const TokenGrid& grid) const {
    if (grid.layers() != opt_.layers) throw Error(ErrorCode::ShapeMismatch, "render: layer count");
    const int per_group = opt_.layers / opt_.layer_groups;
    int best_style = 0;
    long best_total = -1;
    PatternedContent best_content;
    for (int k = 0; k < opt_.styles; ++k) {
      long total = 0;
      PatternedContent content(static_cast<std::size_t>(opt_.layer_groups), std::vector<int>(static_cast<std::size_t>(grid.frames())));
      for (int g = 0; g < opt_.layer_groups; ++g) {
        for (int f = 0; f < grid.frames(); ++f) {
          int best_c = 0, best_hits = -1;
          for (int c = 0; c < opt_.symbols; ++c) {
            int hits = 0;
            for (int l = g * per_group; l < (g + 1) * per_group; ++l) hits += grid.at(l, f) == token(k, l, c);
            if (hits > best_hits) {
              best_hits = hits;
              best_c = c;
            }
          }
          content[static_cast<std::size_t>(g)][static_cast<std::size_t>(f)] = best_c;
          total += best_hits;
        }
      }
      if (total > best_total) {
        best_total = total;
        best_style = k;
        best_content = std::move(content);
      }
    }
    return clean_observation(best_style, best_content);
  }

 private:
  int check_content(const PatternedContent& content) const {
    if (static_cast<int>(content.size()) != opt_.layer_groups || content.front().empty()) {
      throw Error(ErrorCode::ShapeMismatch, "patterned content needs one non-empty stream per layer group");
    }
    for (const auto& stream : content) {
      if (stream.size() != content.front().size()) throw Error(ErrorCode::ShapeMismatch, "patterned content stream lengths");
    }
    return static_cast<int>(content.front().size());
  }

  std::vector<Token> permutation(Rng& rng) const {
    std::vector<Token> p(static_cast<std::size_t>(opt_.vocab));
    std::iota(p.begin(), p.end(), Token{0});
    for (std::size_t i = p.size() - 1; i > 0; --i) std::swap(p[i], p[rng.below(i + 1)]);
    return p;
  }

  PatternedOptions opt_;
  std::vector<std::vector<std::vector<Token>>> table_;  // [style][layer][symbol]
  FrameMatrix content_;
  FrameMatrix style_;
};

struct AudioCorpusOptions {
  int sample_rate = 16000;
  double seconds = 1.0;
  int window = 512;
  int hop = 128;
  double exponent = 0.3;
  int rvq_layers = 4;
  int vocab = 64;
  ChainPolicy policy{};
};

enum class CorpusKind { Patterned, TokenizedAudio };

inline std::string to_string(CorpusKind k) { return k == CorpusKind::Patterned ? "patterned" : "tokenized-audio"; }

inline CorpusKind parse_corpus_kind(const std::string& s) {
  if (s == "patterned") return CorpusKind::Patterned;
  if (s == "tokenized-audio") return CorpusKind::TokenizedAudio;
  throw Error(ErrorCode::ConfigError, "unknown corpus kind '" + s + "'");
}

struct ToyCorpus {
  CorpusKind kind = CorpusKind::Patterned;
  std::vector<TrainItem> items;
  std::vector<PatternedSample> patterned;  // patterned only, parallel to items
  std::vector<DegradationSpec> chains;     // tokenized-audio only
  std::shared_ptr<const PatternedWorld> world;
  std::shared_ptr<const RvqCodebooks> codebooks;

  int input_bins() const { return items.empty() ? 0 : static_cast<int>(items.front().distorted.cols()); }
};

/// `size` patterned utterances drawn from `world`; item i uses seed
/// mix(seed, i), so two corpora with different seeds are disjoint draws.
inline ToyCorpus make_patterned_corpus(std::shared_ptr<const PatternedWorld> world, int size, std::uint64_t seed) {
  if (size < 1) throw Error(ErrorCode::ConfigError, "corpus size must be >= 1");
  ToyCorpus c;
  c.kind = CorpusKind::Patterned;
  c.world = std::move(world);
  for (int i = 0; i < size; ++i) {
    PatternedSample s = c.world->sample(mix_seed(seed, static_cast<std::uint64_t>(i)));
    c.items.push_back(s.item);
    c.patterned.push_back(std::move(s));
  }
  return c;
}

/// Synthetic harmonic voices degraded by sampled enhancement chains. Both
/// sides are turned into power-law spectrograms; the clean side is RVQ
/// encoded with `codebooks`, or with books trained on this corpus when null.
inline ToyCorpus make_audio_corpus(int size, std::uint64_t seed, const AudioCorpusOptions& opt = {},
                                   std::shared_ptr<const RvqCodebooks> codebooks = nullptr) {
  if (size < 1) throw Error(ErrorCode::ConfigError, "corpus size must be >= 1");
  opt.policy.validate();
  ToyCorpus c;
  c.kind = CorpusKind::TokenizedAudio;
  std::vector<AudioBuffer> voices;
  for (int i = 0; i < 4; ++i) {
    Rng r(mix_seed(seed, 0x766f6963ULL + static_cast<std::uint64_t>(i)));
    voices.push_back(synth_voice(r.uniform(90.0, 260.0), opt.seconds, opt.sample_rate, r.next_u64()));
  }
  const SyntheticAssets assets(voices);
  std::vector<FrameMatrix> clean_specs;
  for (int i = 0; i < size; ++i) {
    Rng r(mix_seed(seed, static_cast<std::uint64_t>(i)));
    const AudioBuffer clean = synth_voice(r.uniform(90.0, 260.0), opt.seconds, opt.sample_rate, r.next_u64());
    const DegradationSpec spec = sample_chain(opt.policy, Task::Enhancement, r.next_u64());
    const AudioBuffer distorted = apply_chain(clean, spec, assets);
    TrainItem item;
    item.clean_spec = stft_powerlaw(clean, opt.window, opt.hop, opt.exponent).frames;
    item.distorted = stft_powerlaw(distorted, opt.window, opt.hop, opt.exponent).frames;
    item.task = Task::Enhancement;
    clean_specs.push_back(item.clean_spec);
    c.items.push_back(std::move(item));
    c.chains.push_back(spec);
  }
  if (!codebooks) {
    Eigen::Index rows = 0;
    for (const auto& s : clean_specs) rows += s.rows();
    FrameMatrix all(rows, clean_specs.front().cols());
    Eigen::Index at = 0;
    for (const auto& s : clean_specs) {
      all.middleRows(at, s.rows()) = s;
      at += s.rows();
    }
    codebooks = std::make_shared<const RvqCodebooks>(train_rvq(all, opt.rvq_layers, opt.vocab, mix_seed(seed, 0x7271)));
  }
  c.codebooks = codebooks;
  for (auto& item : c.items) item.clean = rvq_encode(item.clean_spec, *codebooks);
  return c;
}

inline ToyCorpus make_toy_corpus(CorpusKind kind, int size, std::uint64_t seed) {
  if (kind == CorpusKind::Patterned) {
    return make_patterned_corpus(std::make_shared<const PatternedWorld>(PatternedOptions{}, seed), size,
                                 mix_seed(seed, 1));
  }
  return make_audio_corpus(size, seed);
}

}  // namespace voxkit
