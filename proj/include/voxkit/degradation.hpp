#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>
#include <unsupported/Eigen/FFT>

#include "voxkit/audio.hpp"
#include "voxkit/core.hpp"
#include "voxkit/log.hpp"

namespace voxkit {

enum class DistortionKind { Noise, Reverb, Clip, Bandwidth, OtherVoice, VocalEffect, Eq };

inline std::string to_string(DistortionKind k) {
  switch (k) {
    case DistortionKind::Noise: return "noise";
    case DistortionKind::Reverb: return "reverb";
    case DistortionKind::Clip: return "clip";
    case DistortionKind::Bandwidth: return "bandwidth";
    case DistortionKind::OtherVoice: return "other_voice";
    case DistortionKind::VocalEffect: return "vocal_effect";
    case DistortionKind::Eq: return "eq";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Elementary operators

/// Adds `noise` (looped or trimmed to the clean length) scaled so that the
/// clean-to-noise power ratio equals `snr_db`.
inline AudioBuffer mix_at_snr(const AudioBuffer& clean, const AudioBuffer& noise, double snr_db) {
  if (clean.sample_rate != noise.sample_rate) {
    throw Error(ErrorCode::RateMismatch, std::to_string(clean.sample_rate) + " vs " + std::to_string(noise.sample_rate));
  }
  if (noise.empty() || rms(noise.samples) == 0.0) throw Error(ErrorCode::DegenerateNoise, "noise has zero energy");

  std::vector<double> fitted(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) fitted[i] = noise.samples[i % noise.size()];
  double clean_pow = 0.0, noise_pow = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    clean_pow += static_cast<double>(clean.samples[i]) * clean.samples[i];
    noise_pow += fitted[i] * fitted[i];
  }
  AudioBuffer out = clean;
  if (clean.empty()) return out;
  if (noise_pow == 0.0) throw Error(ErrorCode::DegenerateNoise, "noise segment has zero energy");
  const double alpha = std::sqrt(clean_pow / noise_pow) / std::pow(10.0, snr_db / 20.0);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    out.samples[i] = static_cast<float>(clean.samples[i] + alpha * fitted[i]);
  }
  return out;
}

/// Linear convolution of `x` with `h`, first `x.size()` outputs, via FFT.
inline std::vector<double> fft_convolve_head(std::span<const float> x, std::span<const float> h) {
  const std::size_t n = x.size();
  if (n == 0 || h.empty()) return std::vector<double>(n, 0.0);
  const std::size_t full = n + h.size() - 1;
  std::size_t nfft = 1;
  while (nfft < full) nfft <<= 1;
  std::vector<double> a(nfft, 0.0), b(nfft, 0.0);
  std::copy(x.begin(), x.end(), a.begin());
  std::copy(h.begin(), h.end(), b.begin());
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> fa, fb;
  fft.fwd(fa, a);
  fft.fwd(fb, b);
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] *= fb[i];
  std::vector<double> y;
  fft.inv(y, fa);
  y.resize(n);
  return y;
}

/// Reverberation: convolution truncated to the input length, then rescaled
/// so the output peak equals the input peak.
inline AudioBuffer convolve_rir(const AudioBuffer& clean, const AudioBuffer& rir) {
  if (clean.sample_rate != rir.sample_rate) {
    throw Error(ErrorCode::RateMismatch, std::to_string(clean.sample_rate) + " vs " + std::to_string(rir.sample_rate));
  }
  if (rir.empty()) throw Error(ErrorCode::OutOfDomain, "empty impulse response");
  const auto y = fft_convolve_head(clean.samples, rir.samples);
  double out_peak = 0.0;
  for (double v : y) out_peak = std::max(out_peak, std::abs(v));
  const double in_peak = peak(clean.samples);
  const double gain = out_peak > 0.0 ? in_peak / out_peak : 1.0;
  AudioBuffer out = clean;
  for (std::size_t i = 0; i < y.size(); ++i) out.samples[i] = static_cast<float>(y[i] * gain);
  return out;
}

inline constexpr double kMinClipThreshold = 0.06;
inline constexpr double kMaxClipThreshold = 0.9;

inline AudioBuffer clip(const AudioBuffer& clean, double threshold, bool strict = true) {
  if (!(threshold > 0.0) || (strict && (threshold < kMinClipThreshold || threshold > kMaxClipThreshold))) {
    throw Error(ErrorCode::BadThreshold, "clip threshold " + std::to_string(threshold) + " outside [0.06, 0.9]");
  }
  AudioBuffer out = clean;
  const float g = static_cast<float>(threshold);
  for (float& s : out.samples) s = std::max(std::min(s, g), -g);
  return out;
}

inline constexpr std::array<int, 6> kBandwidthChoicesKhz = {2, 4, 8, 16, 24, 32};

/// Resamples down to `freq_khz` and back. Rates above the buffer's own rate
/// are skipped, since there is no band left to remove.
inline AudioBuffer bandwidth_limit(const AudioBuffer& clean, int freq_khz) {
  const int target = freq_khz * 1000;
  if (target <= 0) throw Error(ErrorCode::OutOfDomain, "bandwidth must be positive");
  if (target > clean.sample_rate) {
    log_warn("bandwidth {} kHz exceeds sample rate {} Hz; skipping", freq_khz, clean.sample_rate);
    return clean;
  }
  if (target == clean.sample_rate) return clean;
  AudioBuffer out = resample(resample(clean, target), clean.sample_rate);
  out.samples.resize(clean.size(), 0.0f);
  return out;
}

struct Bell {
  double center_hz = 1000.0;
  double gain_db = 0.0;
  double q = 1.0;
};

/// Peaking-EQ biquad (RBJ cookbook form), transposed direct form II.
class PeakingBiquad {
 public:
  PeakingBiquad(const Bell& bell, int sample_rate) {
    const double a = std::pow(10.0, bell.gain_db / 40.0);
    const double w0 = 2.0 * kPi * bell.center_hz / sample_rate;
    const double alpha = std::sin(w0) / (2.0 * bell.q);
    const double cw = std::cos(w0);
    const double a0 = 1.0 + alpha / a;
    b0_ = (1.0 + alpha * a) / a0;
    b1_ = -2.0 * cw / a0;
    b2_ = (1.0 - alpha * a) / a0;
    a1_ = -2.0 * cw / a0;
    a2_ = (1.0 - alpha / a) / a0;
  }

  double process(double x) {
    const double y = b0_ * x + z1_;
    z1_ = b1_ * x - a1_ * y + z2_;
    z2_ = b2_ * x - a2_ * y;
    return y;
  }

  /// |H(e^{jw})| at `hz`.
  double magnitude(double hz, int sample_rate) const {
    const std::complex<double> z = std::polar(1.0, -2.0 * kPi * hz / sample_rate);
    const std::complex<double> num = b0_ + b1_ * z + b2_ * z * z;
    const std::complex<double> den = 1.0 + a1_ * z + a2_ * z * z;
    return std::abs(num / den);
  }

 private:
  double b0_, b1_, b2_, a1_, a2_;
  double z1_ = 0.0, z2_ = 0.0;
};

inline constexpr double kEqWindowSeconds = 1.0;
inline constexpr double kEqFadeSeconds = 0.05;

inline void validate_bells(const std::vector<Bell>& bells, int sample_rate) {
  if (bells.empty() || bells.size() > 3) {
    throw Error(ErrorCode::BadBellParams, "expected 1-3 bells, got " + std::to_string(bells.size()));
  }
  for (const Bell& b : bells) {
    if (b.gain_db < -5.0 || b.gain_db > 5.0) throw Error(ErrorCode::BadBellParams, "gain outside [-5, 5] dB");
    if (b.center_hz < 10.0 || b.center_hz > 12000.0 || b.center_hz >= 0.5 * sample_rate) {
      throw Error(ErrorCode::BadBellParams, "center " + std::to_string(b.center_hz) + " Hz out of range");
    }
    if (!(b.q > 0.0)) throw Error(ErrorCode::BadBellParams, "q must be positive");
  }
}

/// Gain of the EQ blend at sample `i`: 0 outside the window, raised-cosine
/// fades of kEqFadeSeconds at both inner edges, 1 in between.
inline double eq_window_weight(std::size_t i, std::size_t start, std::size_t len, std::size_t fade) {
  if (i < start || i >= start + len) return 0.0;
  const std::size_t off = i - start;
  const std::size_t from_end = start + len - 1 - off;
  const std::size_t edge = std::min(off, from_end);
  if (fade == 0 || edge >= fade) return 1.0;
  return 0.5 - 0.5 * std::cos(kPi * static_cast<double>(edge) / static_cast<double>(fade));
}

/// Cascaded peaking filters applied inside a 1-second window beginning at
/// `window_start_s`; the rest of the signal passes through untouched.
inline AudioBuffer apply_eq(const AudioBuffer& clean, const std::vector<Bell>& bells, double window_start_s = 0.0) {
  validate_bells(bells, clean.sample_rate);
  std::vector<PeakingBiquad> cascade;
  cascade.reserve(bells.size());
  for (const Bell& b : bells) cascade.emplace_back(b, clean.sample_rate);

  const std::size_t n = clean.size();
  const auto len = std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(kEqWindowSeconds * clean.sample_rate)));
  auto start = static_cast<std::size_t>(std::llround(std::max(0.0, window_start_s) * clean.sample_rate));
  start = std::min(start, n - len);
  const auto fade = static_cast<std::size_t>(std::llround(kEqFadeSeconds * clean.sample_rate));

  AudioBuffer out = clean;
  for (std::size_t i = 0; i < n; ++i) {
    double y = clean.samples[i];
    for (auto& f : cascade) y = f.process(y);
    const double w = eq_window_weight(i, start, len, fade);
    out.samples[i] = static_cast<float>((1.0 - w) * clean.samples[i] + w * y);
  }
  return out;
}

inline AudioBuffer vocal_effect(const AudioBuffer& clean, const AudioBuffer& rir, const std::vector<Bell>& bells,
                                double window_start_s = 0.0) {
  return convolve_rir(apply_eq(clean, bells, window_start_s), rir);
}

// ---------------------------------------------------------------------------
// Synthetic assets

/// Amplitude envelope of a synthetic RIR: reaches 1/1000 (-60 dB) at rt60.
inline double rir_envelope(double t, double rt60_s) { return std::exp(-t * std::log(1000.0) / rt60_s); }

inline AudioBuffer synth_rir(double rt60_s, double length_s, int rate, std::uint64_t seed) {
  if (!(rt60_s > 0.0)) throw Error(ErrorCode::OutOfDomain, "rt60 must be positive");
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(length_s * rate)));
  Rng rng(mix_seed(seed, 0x5152));
  AudioBuffer out;
  out.sample_rate = rate;
  out.samples.resize(n);
  double pk = 0.0;
  std::vector<double> tmp(n);
  for (std::size_t i = 0; i < n; ++i) {
    tmp[i] = rir_envelope(static_cast<double>(i) / rate, rt60_s) * rng.normal();
    pk = std::max(pk, std::abs(tmp[i]));
  }
  for (std::size_t i = 0; i < n; ++i) out.samples[i] = static_cast<float>(pk > 0.0 ? tmp[i] / pk : 0.0);
  return out;
}

enum class NoiseColor { White, Pink };

inline AudioBuffer synth_noise(NoiseColor color, std::size_t length, int rate, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x4e4f));
  AudioBuffer out;
  out.sample_rate = rate;
  out.samples.resize(length);
  // Paul Kellet's economy pink filter
  double b0 = 0, b1 = 0, b2 = 0;
  for (std::size_t i = 0; i < length; ++i) {
    const double w = rng.normal();
    double v = w;
    if (color == NoiseColor::Pink) {
      b0 = 0.99765 * b0 + w * 0.0990460;
      b1 = 0.96300 * b1 + w * 0.2965164;
      b2 = 0.57000 * b2 + w * 1.0526913;
      v = (b0 + b1 + b2 + w * 0.1848) * 0.25;
    }
    out.samples[i] = static_cast<float>(0.1 * v);
  }
  return out;
}

/// A vowel-like harmonic tone with vibrato and a syllabic envelope. Used to
/// fabricate clean "voices" for corpora and tests.
inline AudioBuffer synth_voice(double f0_hz, double seconds, int rate, std::uint64_t seed, int harmonics = 12) {
  Rng rng(mix_seed(seed, 0x564f));
  const auto n = static_cast<std::size_t>(std::llround(seconds * rate));
  std::vector<double> amps(static_cast<std::size_t>(harmonics));
  for (int h = 0; h < harmonics; ++h) amps[static_cast<std::size_t>(h)] = rng.uniform(0.3, 1.0) / (1.0 + h);
  const double vib_rate = rng.uniform(4.0, 6.5), vib_depth = rng.uniform(0.005, 0.02);
  const double syl_rate = rng.uniform(2.0, 5.0), syl_phase = rng.uniform(0.0, 2.0 * kPi);
  AudioBuffer out;
  out.sample_rate = rate;
  out.samples.resize(n);
  double phase = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / rate;
    const double f = f0_hz * (1.0 + vib_depth * std::sin(2.0 * kPi * vib_rate * t));
    phase += 2.0 * kPi * f / rate;
    double v = 0.0;
    for (int h = 0; h < harmonics; ++h) {
      if (f * (h + 1) >= 0.5 * rate) break;
      v += amps[static_cast<std::size_t>(h)] * std::sin((h + 1) * phase);
    }
    const double env = 0.55 + 0.45 * std::sin(2.0 * kPi * syl_rate * t + syl_phase);
    out.samples[i] = static_cast<float>(0.25 * env * v);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Chain description

struct NoiseStep {
  double snr_db = 10.0;
  NoiseColor color = NoiseColor::White;
  std::uint64_t asset_seed = 0;
};
struct ReverbStep {
  double rt60_s = 0.5;
  std::uint64_t asset_seed = 0;
};
struct ClipStep {
  double threshold = 0.5;
};
struct BandwidthStep {
  int freq_khz = 8;
};
struct OtherVoiceStep {
  double snr_db = 5.0;
  std::uint64_t asset_seed = 0;
};
struct EqStep {
  std::vector<Bell> bells;
  double window_start_s = 0.0;
};
struct VocalEffectStep {
  EqStep eq;
  ReverbStep reverb;
};

using StepParams = std::variant<NoiseStep, ReverbStep, ClipStep, BandwidthStep, OtherVoiceStep, VocalEffectStep, EqStep>;

inline DistortionKind kind_of(const StepParams& p) {
  return std::visit(
      [](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, NoiseStep>) return DistortionKind::Noise;
        else if constexpr (std::is_same_v<S, ReverbStep>) return DistortionKind::Reverb;
        else if constexpr (std::is_same_v<S, ClipStep>) return DistortionKind::Clip;
        else if constexpr (std::is_same_v<S, BandwidthStep>) return DistortionKind::Bandwidth;
        else if constexpr (std::is_same_v<S, OtherVoiceStep>) return DistortionKind::OtherVoice;
        else if constexpr (std::is_same_v<S, VocalEffectStep>) return DistortionKind::VocalEffect;
        else return DistortionKind::Eq;
      },
      p);
}

/// Steps are stored innermost-first: steps[0] touches the clean signal.
struct DegradationSpec {
  std::vector<StepParams> steps;
  Task task = Task::Enhancement;
  std::uint64_t seed = 0;

  std::vector<DistortionKind> kinds() const {
    std::vector<DistortionKind> out;
    for (const auto& s : steps) out.push_back(kind_of(s));
    return out;
  }
  bool contains(DistortionKind k) const {
    for (const auto& s : steps) {
      if (kind_of(s) == k) return true;
    }
    return false;
  }
};

inline const std::vector<DistortionKind>& canonical_order(Task task) {
  static const std::vector<DistortionKind> enhancement = {DistortionKind::VocalEffect, DistortionKind::Noise,
                                                          DistortionKind::Reverb, DistortionKind::Clip,
                                                          DistortionKind::Bandwidth};
  static const std::vector<DistortionKind> extraction = {DistortionKind::VocalEffect, DistortionKind::OtherVoice,
                                                         DistortionKind::Noise, DistortionKind::Reverb,
                                                         DistortionKind::Clip, DistortionKind::Bandwidth};
  return task == Task::Enhancement ? enhancement : extraction;
}

/// True when `kinds` is a subsequence of the task's canonical chain.
inline bool follows_canonical_order(const std::vector<DistortionKind>& kinds, Task task) {
  const auto& order = canonical_order(task);
  std::size_t j = 0;
  for (DistortionKind k : kinds) {
    while (j < order.size() && order[j] != k) ++j;
    if (j == order.size()) return false;
    ++j;
  }
  return true;
}

struct ChainPolicy {
  double p_noise = 0.9;
  double p_reverb = 0.5;
  double p_clip = 0.25;
  double p_bandwidth = 0.5;
  double p_other_voice = 0.5;
  double p_vocal_effect = 0.5;

  double snr_db_min = -5.0, snr_db_max = 20.0;
  double clip_min = kMinClipThreshold, clip_max = kMaxClipThreshold;
  std::vector<int> bandwidths_khz{kBandwidthChoicesKhz.begin(), kBandwidthChoicesKhz.end()};
  double voice_snr_db_min = 0.0, voice_snr_db_max = 10.0;
  int eq_bells_min = 1, eq_bells_max = 3;
  double eq_gain_db_min = -5.0, eq_gain_db_max = 5.0;
  double eq_center_hz_min = 10.0, eq_center_hz_max = 12000.0;
  double eq_q_min = 0.5, eq_q_max = 2.0;
  double rt60_min_s = 0.2, rt60_max_s = 1.0;
  /// Utterance length used to place the EQ window.
  double utterance_seconds = 4.0;

  void validate() const {
    auto prob = [](double p, const char* name) {
      if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::ConfigError, std::string(name) + " must lie in [0, 1]");
    };
    prob(p_noise, "p_noise");
    prob(p_reverb, "p_reverb");
    prob(p_clip, "p_clip");
    prob(p_bandwidth, "p_bandwidth");
    prob(p_other_voice, "p_other_voice");
    prob(p_vocal_effect, "p_vocal_effect");
    auto within = [](double lo, double hi, double min, double max, const char* name) {
      if (lo > hi || lo < min || hi > max) {
        throw Error(ErrorCode::ConfigError, std::string(name) + " range outside [" + std::to_string(min) + ", " +
                                                std::to_string(max) + "]");
      }
    };
    within(snr_db_min, snr_db_max, -5.0, 20.0, "snr_db");
    within(clip_min, clip_max, kMinClipThreshold, kMaxClipThreshold, "clip_threshold");
    within(voice_snr_db_min, voice_snr_db_max, 0.0, 10.0, "voice_snr_db");
    within(eq_gain_db_min, eq_gain_db_max, -5.0, 5.0, "eq_gain_db");
    within(eq_center_hz_min, eq_center_hz_max, 10.0, 12000.0, "eq_center_hz");
    if (eq_bells_min < 1 || eq_bells_max > 3 || eq_bells_min > eq_bells_max) {
      throw Error(ErrorCode::ConfigError, "eq_bells range outside [1, 3]");
    }
    if (!(eq_q_min > 0.0) || eq_q_min > eq_q_max) throw Error(ErrorCode::ConfigError, "eq_q range invalid");
    if (!(rt60_min_s > 0.0) || rt60_min_s > rt60_max_s) throw Error(ErrorCode::ConfigError, "rt60 range invalid");
    if (bandwidths_khz.empty()) throw Error(ErrorCode::ConfigError, "bandwidths_khz is empty");
    for (int b : bandwidths_khz) {
      if (std::find(kBandwidthChoicesKhz.begin(), kBandwidthChoicesKhz.end(), b) == kBandwidthChoicesKhz.end()) {
        throw Error(ErrorCode::ConfigError, "bandwidth " + std::to_string(b) + " kHz not in {2,4,8,16,24,32}");
      }
    }
    if (!(utterance_seconds > 0.0)) throw Error(ErrorCode::ConfigError, "utterance_seconds must be positive");
  }
};

namespace detail {

inline EqStep draw_eq(const ChainPolicy& p, Rng& rng) {
  EqStep eq;
  const int count = rng.range(p.eq_bells_min, p.eq_bells_max);
  for (int i = 0; i < count; ++i) {
    Bell b;
    b.center_hz = rng.uniform(p.eq_center_hz_min, p.eq_center_hz_max);
    b.gain_db = rng.uniform(p.eq_gain_db_min, p.eq_gain_db_max);
    b.q = rng.uniform(p.eq_q_min, p.eq_q_max);
    eq.bells.push_back(b);
  }
  eq.window_start_s = rng.uniform(0.0, std::max(0.0, p.utterance_seconds - kEqWindowSeconds));
  return eq;
}

inline ReverbStep draw_reverb(const ChainPolicy& p, Rng& rng) {
  return ReverbStep{rng.uniform(p.rt60_min_s, p.rt60_max_s), rng.next_u64()};
}

}  // namespace detail

/// Draws a chain instance. Every distortion is rolled independently with its
/// own probability; Extraction always carries OtherVoice.
inline DegradationSpec sample_chain(const ChainPolicy& policy, Task task, std::uint64_t seed) {
  policy.validate();
  Rng rng(mix_seed(seed, 0xc4a1));
  DegradationSpec spec;
  spec.task = task;
  spec.seed = seed;

  // Roll in the canonical order; parameters are drawn whether or not the
  // step is kept, so inclusion of one step never shifts another's draws.
  const bool use_vocal = rng.bernoulli(policy.p_vocal_effect);
  VocalEffectStep vocal{detail::draw_eq(policy, rng), detail::draw_reverb(policy, rng)};
  const bool use_noise = rng.bernoulli(policy.p_noise);
  NoiseStep noise{rng.uniform(policy.snr_db_min, policy.snr_db_max),
                  rng.bernoulli(0.5) ? NoiseColor::Pink : NoiseColor::White, rng.next_u64()};
  const bool use_reverb = rng.bernoulli(policy.p_reverb);
  ReverbStep reverb = detail::draw_reverb(policy, rng);
  const bool use_clip = rng.bernoulli(policy.p_clip);
  ClipStep clip_step{rng.uniform(policy.clip_min, policy.clip_max)};
  const bool use_bw = rng.bernoulli(policy.p_bandwidth);
  BandwidthStep bw{policy.bandwidths_khz[rng.below(policy.bandwidths_khz.size())]};
  OtherVoiceStep voice{rng.uniform(policy.voice_snr_db_min, policy.voice_snr_db_max), rng.next_u64()};

  if (use_vocal) spec.steps.emplace_back(vocal);
  if (task == Task::Extraction) spec.steps.emplace_back(voice);
  if (use_noise) spec.steps.emplace_back(noise);
  if (use_reverb) spec.steps.emplace_back(reverb);
  if (use_clip) spec.steps.emplace_back(clip_step);
  if (use_bw) spec.steps.emplace_back(bw);
  return spec;
}

/// Mixed-task draw for training data: Extraction with probability
/// p_other_voice, otherwise Enhancement.
inline DegradationSpec sample_mixed_chain(const ChainPolicy& policy, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x7a5c));
  const Task task = rng.bernoulli(policy.p_other_voice) ? Task::Extraction : Task::Enhancement;
  return sample_chain(policy, task, seed);
}

// ---------------------------------------------------------------------------
// Assets and chain application

/// Supplies the external signals a chain needs. Implementations must be safe
/// for concurrent const calls.
class AssetProvider {
 public:
  virtual ~AssetProvider() = default;
  virtual AudioBuffer noise(const NoiseStep& step, std::size_t length, int rate) const = 0;
  virtual AudioBuffer rir(const ReverbStep& step, int rate) const = 0;
  virtual AudioBuffer interferer(const OtherVoiceStep& step, std::size_t length, int rate) const = 0;
};

/// Built-in generators: coloured noise, exponential-decay RIRs, and a pool of
/// clean utterances to draw interfering speakers from.
class SyntheticAssets : public AssetProvider {
 public:
  SyntheticAssets() = default;
  explicit SyntheticAssets(std::vector<AudioBuffer> voices) : voices_(std::move(voices)) {}

  AudioBuffer noise(const NoiseStep& step, std::size_t length, int rate) const override {
    return synth_noise(step.color, std::max<std::size_t>(length, 1), rate, step.asset_seed);
  }

  AudioBuffer rir(const ReverbStep& step, int rate) const override {
    const double length_s = std::min(1.5, step.rt60_s + 0.1);
    return synth_rir(step.rt60_s, length_s, rate, step.asset_seed);
  }

  AudioBuffer interferer(const OtherVoiceStep& step, std::size_t length, int rate) const override {
    if (voices_.empty()) throw Error(ErrorCode::MissingAsset, "no interfering voices available");
    AudioBuffer v = voices_[step.asset_seed % voices_.size()];
    if (v.sample_rate != rate) v = resample(v, rate);
    if (v.empty()) throw Error(ErrorCode::MissingAsset, "interfering voice is empty");
    AudioBuffer out;
    out.sample_rate = rate;
    out.samples.resize(length);
    const std::size_t offset = (step.asset_seed >> 8) % v.size();
    for (std::size_t i = 0; i < length; ++i) out.samples[i] = v.samples[(offset + i) % v.size()];
    return out;
  }

 private:
  std::vector<AudioBuffer> voices_;
};

/// Keeps only the bells centred below 0.45 x `rate` (a margin under Nyquist).
inline std::vector<Bell> bells_for_rate(const std::vector<Bell>& bells, int rate) {
  std::vector<Bell> kept;
  for (const Bell& b : bells) {
    if (b.center_hz < 0.45 * rate) kept.push_back(b);
    else log_warn("EQ bell at {:.0f} Hz too close to Nyquist at {} Hz; skipping", b.center_hz, rate);
  }
  return kept;
}

inline AudioBuffer apply_step(const AudioBuffer& x, const StepParams& step, const AssetProvider& assets) {
  return std::visit(
      [&](const auto& s) -> AudioBuffer {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, NoiseStep>) {
          return mix_at_snr(x, assets.noise(s, x.size(), x.sample_rate), s.snr_db);
        } else if constexpr (std::is_same_v<S, ReverbStep>) {
          return convolve_rir(x, assets.rir(s, x.sample_rate));
        } else if constexpr (std::is_same_v<S, ClipStep>) {
          return clip(x, s.threshold);
        } else if constexpr (std::is_same_v<S, BandwidthStep>) {
          return bandwidth_limit(x, s.freq_khz);
        } else if constexpr (std::is_same_v<S, OtherVoiceStep>) {
          return mix_at_snr(x, assets.interferer(s, x.size(), x.sample_rate), s.snr_db);
        } else if constexpr (std::is_same_v<S, EqStep>) {
          const auto bells = bells_for_rate(s.bells, x.sample_rate);
          return bells.empty() ? x : apply_eq(x, bells, s.window_start_s);
        } else {
          const auto bells = bells_for_rate(s.eq.bells, x.sample_rate);
          const AudioBuffer eqd = bells.empty() ? x : apply_eq(x, bells, s.eq.window_start_s);
          return convolve_rir(eqd, assets.rir(s.reverb, x.sample_rate));
        }
      },
      step);
}

/// Applies the chain innermost-first. Pure in (clean, spec, asset contents).
inline AudioBuffer apply_chain(const AudioBuffer& clean, const DegradationSpec& spec, const AssetProvider& assets) {
  AudioBuffer y = clean;
  for (const auto& step : spec.steps) y = apply_step(y, step, assets);
  return y;
}

// ---------------------------------------------------------------------------
// JSON form used by dataset manifests

inline nlohmann::json bell_to_json(const Bell& b) {
  return {{"center_hz", b.center_hz}, {"gain_db", b.gain_db}, {"q", b.q}};
}

inline nlohmann::json eq_to_json(const EqStep& e) {
  nlohmann::json bells = nlohmann::json::array();
  for (const auto& b : e.bells) bells.push_back(bell_to_json(b));
  return {{"bells", bells}, {"window_start_s", e.window_start_s}};
}

inline nlohmann::json step_to_json(const StepParams& step) {
  nlohmann::json j = std::visit(
      [](const auto& s) -> nlohmann::json {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, NoiseStep>) {
          return {{"snr_db", s.snr_db}, {"color", s.color == NoiseColor::Pink ? "pink" : "white"},
                  {"asset_seed", s.asset_seed}};
        } else if constexpr (std::is_same_v<S, ReverbStep>) {
          return {{"rt60_s", s.rt60_s}, {"asset_seed", s.asset_seed}};
        } else if constexpr (std::is_same_v<S, ClipStep>) {
          return {{"threshold", s.threshold}};
        } else if constexpr (std::is_same_v<S, BandwidthStep>) {
          return {{"freq_khz", s.freq_khz}};
        } else if constexpr (std::is_same_v<S, OtherVoiceStep>) {
          return {{"snr_db", s.snr_db}, {"asset_seed", s.asset_seed}};
        } else if constexpr (std::is_same_v<S, EqStep>) {
          return eq_to_json(s);
        } else {
          return {{"eq", eq_to_json(s.eq)}, {"reverb", {{"rt60_s", s.reverb.rt60_s}, {"asset_seed", s.reverb.asset_seed}}}};
        }
      },
      step);
  j["kind"] = to_string(kind_of(step));
  return j;
}

inline nlohmann::json spec_to_json(const DegradationSpec& spec) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : spec.steps) steps.push_back(step_to_json(s));
  return {{"task", to_string(spec.task)}, {"seed", spec.seed}, {"steps", steps}};
}

namespace detail {

inline EqStep eq_from_json(const nlohmann::json& j) {
  EqStep e;
  for (const auto& b : j.at("bells")) {
    e.bells.push_back(Bell{b.at("center_hz").get<double>(), b.at("gain_db").get<double>(), b.at("q").get<double>()});
  }
  e.window_start_s = j.at("window_start_s").get<double>();
  return e;
}

}  // namespace detail

inline DegradationSpec spec_from_json(const nlohmann::json& j) {
  try {
    DegradationSpec spec;
    spec.task = parse_task(j.at("task").get<std::string>());
    spec.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("steps")) {
      const auto kind = s.at("kind").get<std::string>();
      if (kind == "noise") {
        spec.steps.emplace_back(NoiseStep{s.at("snr_db").get<double>(),
                                          s.at("color").get<std::string>() == "pink" ? NoiseColor::Pink : NoiseColor::White,
                                          s.at("asset_seed").get<std::uint64_t>()});
      } else if (kind == "reverb") {
        spec.steps.emplace_back(ReverbStep{s.at("rt60_s").get<double>(), s.at("asset_seed").get<std::uint64_t>()});
      } else if (kind == "clip") {
        spec.steps.emplace_back(ClipStep{s.at("threshold").get<double>()});
      } else if (kind == "bandwidth") {
        spec.steps.emplace_back(BandwidthStep{s.at("freq_khz").get<int>()});
      } else if (kind == "other_voice") {
        spec.steps.emplace_back(OtherVoiceStep{s.at("snr_db").get<double>(), s.at("asset_seed").get<std::uint64_t>()});
      } else if (kind == "eq") {
        spec.steps.emplace_back(detail::eq_from_json(s));
      } else if (kind == "vocal_effect") {
        const auto& r = s.at("reverb");
        spec.steps.emplace_back(VocalEffectStep{detail::eq_from_json(s.at("eq")),
                                                ReverbStep{r.at("rt60_s").get<double>(), r.at("asset_seed").get<std::uint64_t>()}});
      } else {
        throw Error(ErrorCode::ConfigError, "unknown distortion kind '" + kind + "'");
      }
    }
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("malformed degradation spec: ") + e.what());
  }
}

}  // namespace voxkit
