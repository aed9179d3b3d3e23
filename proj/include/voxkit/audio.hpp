#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include "voxkit/core.hpp"

namespace voxkit {

using FrameMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct AudioBuffer {
  std::vector<float> samples;
  int sample_rate = 16000;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

/// Compressed magnitude spectrogram, one row per frame.
struct Spectrogram {
  FrameMatrix frames;
  int hop = 256;
  int window = 1024;
  double power_exponent = 0.3;

  int num_frames() const { return static_cast<int>(frames.rows()); }
  int num_bins() const { return static_cast<int>(frames.cols()); }
};

enum class WavEncoding { Pcm16, Float32 };

namespace detail {

template <typename T>
T read_le(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  out.insert(out.end(), bytes, bytes + sizeof(T));
}

inline void append_tag(std::vector<std::uint8_t>& out, const char* tag) {
  out.insert(out.end(), tag, tag + 4);
}

/// Writes through a sibling temp file and renames it into place so readers
/// never observe a partially written artifact.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(ErrorCode::IoFailure, "cannot rename into " + path.string());
  }
}

inline void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                        text.size()));
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace detail

/// Parses an in-memory RIFF/WAVE image. PCM16 and IEEE float32 are accepted;
/// multichannel input is averaged down to mono.
inline AudioBuffer decode_wav(std::span<const std::uint8_t> bytes) {
  using detail::read_le;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw Error(ErrorCode::MalformedWav, "missing RIFF/WAVE header");
  }
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::span<const std::uint8_t> data;
  bool have_data = false;

  while (pos + 8 <= bytes.size()) {
    const std::uint8_t* chunk = bytes.data() + pos;
    const std::uint32_t chunk_size = read_le<std::uint32_t>(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + chunk_size > bytes.size()) throw Error(ErrorCode::MalformedWav, "chunk runs past end of file");
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (chunk_size < 16) throw Error(ErrorCode::MalformedWav, "fmt chunk too short");
      format = read_le<std::uint16_t>(bytes.data() + body);
      channels = read_le<std::uint16_t>(bytes.data() + body + 2);
      rate = read_le<std::uint32_t>(bytes.data() + body + 4);
      bits = read_le<std::uint16_t>(bytes.data() + body + 14);
      if (format == 0xFFFE) {
        if (chunk_size < 40) throw Error(ErrorCode::MalformedWav, "extensible fmt chunk too short");
        format = read_le<std::uint16_t>(bytes.data() + body + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.subspan(body, chunk_size);
      have_data = true;
    }
    pos = body + chunk_size + (chunk_size & 1u);
  }

  if (!have_fmt || !have_data) throw Error(ErrorCode::MalformedWav, "missing fmt or data chunk");
  if (channels == 0 || rate == 0) throw Error(ErrorCode::MalformedWav, "zero channels or sample rate");
  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32) {
    throw Error(ErrorCode::UnsupportedEncoding,
                "format " + std::to_string(format) + " with " + std::to_string(bits) + " bits");
  }

  const std::size_t frame_bytes = static_cast<std::size_t>(channels) * (bits / 8);
  const std::size_t n = data.size() / frame_bytes;
  AudioBuffer out;
  out.sample_rate = static_cast<int>(rate);
  out.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* frame = data.data() + i * frame_bytes;
    if (channels == 1) {
      out.samples[i] = pcm16 ? static_cast<float>(read_le<std::int16_t>(frame)) / 32768.0f
                             : read_le<float>(frame);
      continue;
    }
    double acc = 0.0;
    for (std::uint16_t c = 0; c < channels; ++c) {
      acc += pcm16 ? read_le<std::int16_t>(frame + 2 * c) / 32768.0 : read_le<float>(frame + 4 * c);
    }
    out.samples[i] = static_cast<float>(acc / channels);
  }
  for (float& s : out.samples) {
    if (!std::isfinite(s)) throw Error(ErrorCode::MalformedWav, "non-finite sample");
    s = std::clamp(s, -1.0f, 1.0f);
  }
  return out;
}

inline std::vector<std::uint8_t> encode_wav(const AudioBuffer& buffer, WavEncoding encoding = WavEncoding::Float32) {
  using detail::append_le;
  using detail::append_tag;
  for (float s : buffer.samples) {
    if (!std::isfinite(s)) throw Error(ErrorCode::IoFailure, "refusing to write non-finite samples");
  }
  const std::uint16_t bits = encoding == WavEncoding::Pcm16 ? 16 : 32;
  const std::uint16_t format = encoding == WavEncoding::Pcm16 ? 1 : 3;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(buffer.samples.size() * (bits / 8));

  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  append_tag(out, "RIFF");
  append_le<std::uint32_t>(out, 36 + data_bytes);
  append_tag(out, "WAVE");
  append_tag(out, "fmt ");
  append_le<std::uint32_t>(out, 16);
  append_le<std::uint16_t>(out, format);
  append_le<std::uint16_t>(out, 1);
  append_le<std::uint32_t>(out, static_cast<std::uint32_t>(buffer.sample_rate));
  append_le<std::uint32_t>(out, static_cast<std::uint32_t>(buffer.sample_rate) * (bits / 8));
  append_le<std::uint16_t>(out, bits / 8);
  append_le<std::uint16_t>(out, bits);
  append_tag(out, "data");
  append_le<std::uint32_t>(out, data_bytes);
  for (float s : buffer.samples) {
    if (encoding == WavEncoding::Float32) {
      append_le<float>(out, s);
    } else {
      const double q = std::round(static_cast<double>(s) * 32768.0);
      append_le<std::int16_t>(out, static_cast<std::int16_t>(std::clamp(q, -32768.0, 32767.0)));
    }
  }
  return out;
}

inline AudioBuffer read_wav(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = detail::read_file(path);
  } catch (const Error&) {
    throw Error(ErrorCode::MalformedWav, "cannot read " + path.string());
  }
  return decode_wav(bytes);
}

inline void write_wav(const AudioBuffer& buffer, const std::filesystem::path& path,
                      WavEncoding encoding = WavEncoding::Float32) {
  const auto bytes = encode_wav(buffer, encoding);
  detail::write_file_atomic(path, bytes);
}

struct ResampleOptions {
  int zero_crossings = 64;  // per side, counted at the lower of the two rates
  double rolloff = 0.92;    // cutoff as a fraction of the lower Nyquist
  double kaiser_beta = 9.0;
};

/// Band-limited resampling with a Kaiser-windowed sinc. Kernels are cached per
/// fractional phase, so rational rate pairs cost one kernel evaluation each.
inline AudioBuffer resample(const AudioBuffer& in, int target_rate, const ResampleOptions& opt = {}) {
  if (target_rate <= 0) throw Error(ErrorCode::OutOfDomain, "target rate must be positive");
  if (target_rate == in.sample_rate || in.empty()) {
    AudioBuffer out = in;
    if (in.empty()) out.sample_rate = target_rate;
    return out;
  }
  const std::int64_t src = in.sample_rate;
  const std::int64_t dst = target_rate;
  const std::int64_t g = std::gcd(src, dst);
  const std::int64_t phases = dst / g;
  const double ratio = static_cast<double>(dst) / static_cast<double>(src);
  const double fc = 0.5 * std::min(1.0, ratio) * opt.rolloff;  // cycles per input sample
  const double half_width = opt.zero_crossings / (2.0 * 0.5 * std::min(1.0, ratio));
  const int reach = static_cast<int>(std::ceil(half_width));
  const double i0_beta = std::cyl_bessel_i(0.0, opt.kaiser_beta);

  auto kernel_for = [&](double frac) {
    // taps for input offsets -reach+1 .. reach relative to floor(x)
    std::vector<double> taps(static_cast<std::size_t>(2 * reach));
    for (int k = -reach + 1; k <= reach; ++k) {
      const double tau = static_cast<double>(k) - frac;
      const double u = tau / half_width;
      double w = 0.0;
      if (std::abs(u) < 1.0) {
        const double arg = 2.0 * fc * tau;
        const double sinc = std::abs(arg) < 1e-12 ? 1.0 : std::sin(kPi * arg) / (kPi * arg);
        w = 2.0 * fc * sinc * std::cyl_bessel_i(0.0, opt.kaiser_beta * std::sqrt(1.0 - u * u)) / i0_beta;
      }
      taps[static_cast<std::size_t>(k + reach - 1)] = w;
    }
    return taps;
  };

  const auto n_in = static_cast<std::int64_t>(in.size());
  const auto n_out = static_cast<std::int64_t>(std::llround(static_cast<double>(n_in) * ratio));
  AudioBuffer out;
  out.sample_rate = target_rate;
  out.samples.resize(static_cast<std::size_t>(n_out));
  std::map<std::int64_t, std::vector<double>> cache;
  for (std::int64_t n = 0; n < n_out; ++n) {
    const std::int64_t num = n * src;  // x = num / dst
    const std::int64_t base = num / dst;
    const std::int64_t rem = num % dst;
    const std::int64_t phase = rem / g;
    auto it = cache.find(phase);
    if (it == cache.end()) {
      it = cache.emplace(phase, kernel_for(static_cast<double>(phase) / static_cast<double>(phases))).first;
    }
    const auto& taps = it->second;
    double acc = 0.0;
    const std::int64_t first = base - reach + 1;
    const std::int64_t lo = std::max<std::int64_t>(0, first);
    const std::int64_t hi = std::min<std::int64_t>(n_in - 1, base + reach);
    for (std::int64_t i = lo; i <= hi; ++i) {
      acc += taps[static_cast<std::size_t>(i - first)] * in.samples[static_cast<std::size_t>(i)];
    }
    out.samples[static_cast<std::size_t>(n)] = static_cast<float>(acc);
  }
  return out;
}

/// Periodic Hann window.
inline std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / n);
  return w;
}

inline int stft_frame_count(std::size_t length, int window, int hop) {
  if (length < static_cast<std::size_t>(window)) return 0;
  const auto span = static_cast<std::int64_t>(length) - window;
  return static_cast<int>((span + hop - 1) / hop) + 1;
}

/// Magnitude STFT raised to `exponent`. Frames start at multiples of `hop`
/// with no centering; the final frame is zero-padded past the end.
inline Spectrogram stft_powerlaw(const AudioBuffer& buffer, int window = 1024, int hop = 256, double exponent = 0.3) {
  if (hop <= 0 || window <= 0 || hop > window || static_cast<std::size_t>(window) > buffer.size()) {
    throw Error(ErrorCode::BadFraming, "need 0 < hop <= window <= length (hop=" + std::to_string(hop) +
                                           ", window=" + std::to_string(window) +
                                           ", length=" + std::to_string(buffer.size()) + ")");
  }
  if (!(exponent > 0.0 && exponent <= 1.0)) throw Error(ErrorCode::OutOfDomain, "exponent must lie in (0, 1]");

  const int frames = stft_frame_count(buffer.size(), window, hop);
  const int bins = window / 2 + 1;
  const auto win = hann_window(window);
  Spectrogram spec;
  spec.hop = hop;
  spec.window = window;
  spec.power_exponent = exponent;
  spec.frames.resize(frames, bins);

  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> segment(static_cast<std::size_t>(window));
  std::vector<std::complex<double>> bins_out;
  for (int f = 0; f < frames; ++f) {
    const std::size_t start = static_cast<std::size_t>(f) * hop;
    for (int i = 0; i < window; ++i) {
      const std::size_t idx = start + static_cast<std::size_t>(i);
      segment[static_cast<std::size_t>(i)] =
          idx < buffer.size() ? buffer.samples[idx] * win[static_cast<std::size_t>(i)] : 0.0;
    }
    fft.fwd(bins_out, segment);
    for (int b = 0; b < bins; ++b) {
      const double mag = std::abs(bins_out[static_cast<std::size_t>(b)]);
      spec.frames(f, b) = static_cast<float>(exponent == 1.0 ? mag : std::pow(mag, exponent));
    }
  }
  return spec;
}

inline double rms(std::span<const float> x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (float v : x) acc += static_cast<double>(v) * v;
  return std::sqrt(acc / static_cast<double>(x.size()));
}

inline double peak(std::span<const float> x) {
  double p = 0.0;
  for (float v : x) p = std::max(p, static_cast<double>(std::abs(v)));
  return p;
}

}  // namespace voxkit
