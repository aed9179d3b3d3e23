#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>

namespace voxkit {

enum class ErrorCode {
  MalformedWav,
  UnsupportedEncoding,
  IoFailure,
  BadFraming,
  DegenerateNoise,
  RateMismatch,
  BadThreshold,
  BadBellParams,
  MissingAsset,
  InsufficientData,
  DimMismatch,
  MaskedInput,
  OutOfDomain,
  ShapeMismatch,
  ContractViolation,
  NonFiniteLoss,
  SingleClass,
  LengthMismatch,
  ConfigError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedWav: return "MalformedWav";
    case ErrorCode::UnsupportedEncoding: return "UnsupportedEncoding";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::BadFraming: return "BadFraming";
    case ErrorCode::DegenerateNoise: return "DegenerateNoise";
    case ErrorCode::RateMismatch: return "RateMismatch";
    case ErrorCode::BadThreshold: return "BadThreshold";
    case ErrorCode::BadBellParams: return "BadBellParams";
    case ErrorCode::MissingAsset: return "MissingAsset";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::MaskedInput: return "MaskedInput";
    case ErrorCode::OutOfDomain: return "OutOfDomain";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::ContractViolation: return "ContractViolation";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so the
/// CLI can map it to a stable exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

enum class Task { Enhancement, Extraction };

inline std::string to_string(Task t) { return t == Task::Enhancement ? "enhancement" : "extraction"; }

inline Task parse_task(const std::string& s) {
  if (s == "enhancement") return Task::Enhancement;
  if (s == "extraction") return Task::Extraction;
  throw Error(ErrorCode::ConfigError, "unknown task '" + s + "'");
}

inline constexpr double kPi = std::numbers::pi;

/// SplitMix64 finalizer; used to derive independent stream seeds.
inline constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return mix_seed(a ^ mix_seed(b + 0x632be59bd9b4e019ULL));
}

/// Platform-independent generator. The standard distributions are
/// implementation-defined, so all draws go through these helpers to keep
/// outputs bit-identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform in (0, 1].
  double uniform_open_low() { return 1.0 - uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  int range(int lo, int hi_inclusive) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open_low();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * kPi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * kPi * u2);
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

static_assert(std::endian::native == std::endian::little,
              "binary formats are written in host order and assume little-endian");

}  // namespace voxkit
