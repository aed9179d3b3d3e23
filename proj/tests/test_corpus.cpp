#include <gtest/gtest.h>

#include <set>

#include "voxkit/experiments.hpp"

using namespace voxkit;

namespace {

template <typename F>
ErrorCode code_of(F&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::ConfigError;
}

const PatternedWorld& world() {
  static const PatternedWorld w(PatternedOptions{}, 3);
  return w;
}

const PatternedWorld& paired() {
  static const PatternedWorld w([] {
    PatternedOptions o;
    o.layer_groups = 2;
    return o;
  }(), 3);
  return w;
}

}  // namespace

TEST(Patterned, EachLayerSpendsTheWholeVocabulary) {
  const auto& o = world().options();
  ASSERT_EQ(o.styles * o.symbols, o.vocab);
  for (int l = 0; l < o.layers; ++l) {
    std::set<Token> seen;
    for (int s = 0; s < o.styles; ++s) {
      for (int c = 0; c < o.symbols; ++c) seen.insert(world().token(s, l, c));
    }
    EXPECT_EQ(static_cast<int>(seen.size()), o.vocab) << l;
  }
  // tables differ between layers
  int same = 0;
  for (int c = 0; c < o.symbols; ++c) same += world().token(0, 0, c) == world().token(0, 1, c);
  EXPECT_LT(same, o.symbols);
}

TEST(Patterned, ContentSegments) {
  const auto& o = world().options();
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const PatternedContent content = paired().random_content(o.frames, rng);
    ASSERT_EQ(content.size(), 2u);
    for (const std::vector<int>& c : content) {
      ASSERT_EQ(static_cast<int>(c.size()), o.frames);
      std::size_t start = 0;
      while (start < c.size()) {
        std::size_t end = start;
        while (end < c.size() && c[end] == c[start]) ++end;
        const auto len = static_cast<int>(end - start);
        EXPECT_LE(len, o.max_segment);
        if (end < c.size()) {
          EXPECT_GE(len, o.min_segment);
        }
        EXPECT_GE(c[start], 0);
        EXPECT_LT(c[start], o.symbols);
        start = end;
      }
    }
    EXPECT_NE(content[0], content[1]);
  }
}

TEST(Patterned, GroupsShareSymbolsAndOwnTheirBins) {
  const auto& o = paired().options();
  const PatternedSample s = paired().sample(21);
  for (int f = 0; f < o.frames; ++f) {
    for (int l = 0; l < o.layers; ++l) {
      const int g = paired().group_of(l);
      EXPECT_EQ(s.item.clean.at(l, f), paired().token(s.style, l, s.content[static_cast<std::size_t>(g)][static_cast<std::size_t>(f)]));
    }
  }
  EXPECT_EQ(paired().group_of(1), 0);
  EXPECT_EQ(paired().group_of(2), 1);
  EXPECT_EQ(world().group_of(3), 0);
  // changing group 1's symbol in one frame moves only group 1's bins there
  PatternedContent c = s.content;
  c[1][5] = (c[1][5] + 1) % o.symbols;
  const FrameMatrix before = paired().clean_observation(s.style, s.content);
  const FrameMatrix after = paired().clean_observation(s.style, c);
  const auto [lo, width] = paired().group_slice(1);
  EXPECT_EQ(before.row(5).head(lo), after.row(5).head(lo));
  EXPECT_NE(before.row(5).segment(lo, width), after.row(5).segment(lo, width));
  EXPECT_EQ(before.topRows(5), after.topRows(5));
  EXPECT_EQ(code_of([&] { paired().tokens(0, PatternedContent(1, std::vector<int>(4, 0))); }), ErrorCode::ShapeMismatch);
}

TEST(Patterned, SampleIsDeterministicAndConsistent) {
  const PatternedSample a = world().sample(9);
  const PatternedSample b = world().sample(9);
  EXPECT_EQ(a.item.clean, b.item.clean);
  EXPECT_EQ(a.item.distorted, b.item.distorted);
  EXPECT_EQ(a.item.clean, world().tokens(a.style, a.content));
  EXPECT_EQ(a.item.clean_spec, world().clean_observation(a.style, a.content));
  EXPECT_EQ(world().tokenize_observation(a.item.clean_spec, a.style), a.item.clean);
  EXPECT_EQ(world().render(a.item.clean), a.item.clean_spec);
  EXPECT_NE(world().sample(10).item.distorted, a.item.distorted);
}

TEST(Patterned, NoiseLevelsMatchOptions) {
  const auto& o = world().options();
  double in_sq = 0, out_sq = 0;
  std::size_t in_n = 0, out_n = 0, with_burst = 0;
  const int trials = 400;
  for (int i = 0; i < trials; ++i) {
    const PatternedSample s = world().sample(static_cast<std::uint64_t>(1000 + i));
    const FrameMatrix d = s.item.distorted - s.item.clean_spec;
    const int burst = static_cast<int>(std::count(s.burst.begin(), s.burst.end(), std::uint8_t{1}));
    if (burst) {
      ++with_burst;
      EXPECT_GE(burst, static_cast<int>(o.burst_min_fraction * o.frames));
      EXPECT_LE(burst, static_cast<int>(o.burst_max_fraction * o.frames));
    }
    for (int f = 0; f < o.frames; ++f) {
      const double e = d.row(f).squaredNorm();
      if (s.burst[static_cast<std::size_t>(f)]) {
        in_sq += e;
        in_n += static_cast<std::size_t>(o.bins);
      } else {
        out_sq += e;
        out_n += static_cast<std::size_t>(o.bins);
      }
    }
  }
  EXPECT_NEAR(static_cast<double>(with_burst) / trials, o.burst_probability, 0.07);
  EXPECT_NEAR(std::sqrt(out_sq / static_cast<double>(out_n)), o.base_noise, 0.02 * o.base_noise);
  EXPECT_NEAR(std::sqrt(in_sq / static_cast<double>(in_n)), std::hypot(o.base_noise, o.burst_noise),
              0.02 * std::hypot(o.base_noise, o.burst_noise));
}

TEST(Patterned, RenderUsesLayerMajority) {
  const PatternedSample s = world().sample(11);
  TokenGrid g = s.item.clean;
  const auto& o = world().options();
  // one deep layer scrambled: the remaining three still identify each frame
  for (int f = 0; f < g.frames(); ++f) g.at(2, f) = static_cast<Token>((g.at(2, f) + 1) % o.vocab);
  EXPECT_EQ(world().render(g), s.item.clean_spec);
  EXPECT_EQ(paired().render(paired().sample(12).item.clean), paired().sample(12).item.clean_spec);
  EXPECT_EQ(code_of([&] { world().render(TokenGrid(2, 4, 0)); }), ErrorCode::ShapeMismatch);
}

TEST(Patterned, OptionValidation) {
  PatternedOptions o;
  o.symbols = 17;  // 4 styles x 17 > 64
  EXPECT_EQ(code_of([&] { PatternedWorld w(o, 1); }), ErrorCode::ConfigError);
  o = {};
  o.layer_groups = 3;  // 4 layers do not split into 3 groups
  EXPECT_EQ(code_of([&] { PatternedWorld w(o, 1); }), ErrorCode::ConfigError);
  o = {};
  o.max_segment = 2;
  EXPECT_EQ(code_of([&] { PatternedWorld w(o, 1); }), ErrorCode::ConfigError);
}

TEST(Corpus, PatternedCorpusDraws) {
  auto w = std::make_shared<const PatternedWorld>(PatternedOptions{}, 5);
  const ToyCorpus a = make_patterned_corpus(w, 6, 1);
  const ToyCorpus b = make_patterned_corpus(w, 6, 2);
  ASSERT_EQ(a.items.size(), 6u);
  EXPECT_EQ(a.patterned.size(), 6u);
  EXPECT_EQ(a.input_bins(), 32);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(a.items[i].clean.layers(), 4);
    EXPECT_EQ(a.items[i].clean.frames(), 128);
    EXPECT_NE(a.items[i].distorted, b.items[i].distorted);
  }
  EXPECT_EQ(make_patterned_corpus(w, 6, 1).items[3].distorted, a.items[3].distorted);
  EXPECT_EQ(code_of([&] { make_patterned_corpus(w, 0, 1); }), ErrorCode::ConfigError);
  EXPECT_EQ(parse_corpus_kind("patterned"), CorpusKind::Patterned);
  EXPECT_EQ(parse_corpus_kind(to_string(CorpusKind::TokenizedAudio)), CorpusKind::TokenizedAudio);
  EXPECT_EQ(code_of([] { parse_corpus_kind("wav"); }), ErrorCode::ConfigError);
}

TEST(Corpus, AudioCorpusIsTokenized) {
  AudioCorpusOptions opt;
  opt.seconds = 0.5;
  opt.vocab = 16;
  opt.rvq_layers = 2;
  const ToyCorpus c = make_audio_corpus(4, 7, opt);
  ASSERT_EQ(c.items.size(), 4u);
  ASSERT_EQ(c.chains.size(), 4u);
  ASSERT_TRUE(c.codebooks);
  EXPECT_EQ(c.input_bins(), opt.window / 2 + 1);
  for (const auto& it : c.items) {
    EXPECT_EQ(it.clean.frames(), it.clean_spec.rows());
    EXPECT_EQ(it.distorted.rows(), it.clean_spec.rows());
    EXPECT_EQ(it.clean.layers(), 2);
    EXPECT_EQ(it.clean, rvq_encode(it.clean_spec, *c.codebooks));
  }
  // reusing the books keeps the token space fixed across corpora
  const ToyCorpus d = make_audio_corpus(2, 8, opt, c.codebooks);
  EXPECT_EQ(d.codebooks, c.codebooks);
}

TEST(Experiments, ReplaceTokens) {
  const TokenGrid g = world().sample(12).item.clean;
  std::vector<std::uint8_t> rep;
  const TokenGrid r = replace_tokens(g, 0.25, 64, 3, rep);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_EQ(r[i] != g[i], rep[i] == 1);
    changed += rep[i];
    EXPECT_GE(r[i], 0);
    EXPECT_LT(r[i], 64);
  }
  EXPECT_EQ(changed, static_cast<std::size_t>(std::llround(0.25 * static_cast<double>(g.size()))));
  std::vector<std::uint8_t> rep2;
  EXPECT_EQ(replace_tokens(g, 0.25, 64, 3, rep2), r);
}

TEST(Experiments, HalfNoisedCase) {
  std::size_t clean_agree = 0, noisy_agree = 0, noisy_incoherent = 0;
  const auto& o = world().options();
  for (int i = 0; i < 10; ++i) {
    const HalfNoisedCase c = half_noised_case(world(), static_cast<std::uint64_t>(i));
    EXPECT_EQ(c.corrupted_from, 64);
    EXPECT_EQ(c.item.distorted.topRows(64), c.item.clean_spec.topRows(64));
    for (int f = 0; f < 128; ++f) {
      bool all = true;
      for (int l = 0; l < o.layers; ++l) all = all && c.observed_tokens.at(l, f) == c.item.clean.at(l, f);
      (f < 64 ? clean_agree : noisy_agree) += all;
      if (f >= 64) {
        // does some single symbol explain every layer?
        bool coherent = false;
        for (int s = 0; s < o.symbols && !coherent; ++s) {
          bool ok = true;
          for (int l = 0; l < o.layers; ++l) ok = ok && c.observed_tokens.at(l, f) == world().token(c.style, l, s);
          coherent = ok;
        }
        noisy_incoherent += !coherent;
      }
    }
  }
  EXPECT_EQ(clean_agree, 640u);
  EXPECT_LT(noisy_agree, 320u);
  EXPECT_GT(noisy_incoherent, 320u);
}

TEST(Experiments, TokenizeObservationBands) {
  const PatternedSample s = world().sample(14);
  EXPECT_EQ(world().tokenize_observation(s.item.clean_spec, s.style), s.item.clean);
  // corrupting only the first band changes only layer 0
  FrameMatrix obs = s.item.clean_spec;
  obs.leftCols(8).setConstant(50.0f);
  const TokenGrid g = world().tokenize_observation(obs, s.style);
  for (int f = 0; f < g.frames(); ++f) {
    for (int l = 1; l < 4; ++l) EXPECT_EQ(g.at(l, f), s.item.clean.at(l, f));
  }
  EXPECT_EQ(code_of([&] { world().tokenize_observation(FrameMatrix::Zero(3, 5), 0); }), ErrorCode::ShapeMismatch);
}

TEST(Experiments, CriticFrameMap) {
  TokenGrid g(2, 3, 0);
  const PositionScores s = {0.1, 0.2, 0.3, 0.5, 0.6, 0.9};  // layer-major
  const auto m = critic_frame_map(s, g);
  ASSERT_EQ(m.size(), 3u);
  EXPECT_NEAR(m[0], 0.3, 1e-12);
  EXPECT_NEAR(m[1], 0.4, 1e-12);
  EXPECT_NEAR(m[2], 0.6, 1e-12);
}

TEST(Experiments, GenerationItemsZeroPromptFrames) {
  ModelConfig mc;
  mc.input_bins = 32;
  mc.dim = 8;
  mc.heads = 2;
  mc.enc_layers = 1;
  mc.dec_layers = 1;
  mc.ff_mult = 1;
  const ModelBundle<float> model(mc);
  const FeatureExtractor<float> fx(32, 8, 1);
  std::vector<TrainItem> items = {world().sample(13).item};
  const auto plain = generation_items(model, fx, items, 0, 10);
  const auto prompted = generation_items(model, fx, items, 10, 10);
  EXPECT_EQ(plain[0].prompt.size(), 0u);
  EXPECT_EQ(prompted[0].prompt, items[0].clean.slice_frames(0, 10));
  EXPECT_EQ(prompted[0].score_from, 10);
  FrameMatrix zeroed = items[0].distorted;
  zeroed.topRows(10).setZero();
  const Condition expect = encode_semantic(model, fx, zeroed, Task::Enhancement, 128);
  EXPECT_EQ(prompted[0].cond.semantic, expect.semantic);
  EXPECT_NE(plain[0].cond.semantic, expect.semantic);
}
