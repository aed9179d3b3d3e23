#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <set>
#include <vector>

#include "voxkit/audio.hpp"
#include "voxkit/core.hpp"
#include "voxkit/tokens.hpp"

namespace voxkit {

/// Residual vector quantizer: one [vocab x dim] codebook per layer, applied
/// to features after an affine normalization (identity unless requested).
struct RvqCodebooks {
  std::vector<FrameMatrix> layers;
  Eigen::RowVectorXf mean;
  Eigen::RowVectorXf scale;

  int num_layers() const { return static_cast<int>(layers.size()); }
  int vocab() const { return layers.empty() ? 0 : static_cast<int>(layers.front().rows()); }
  int dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().cols()); }
};

struct RvqTrainOptions {
  int max_iterations = 50;
  bool normalize = false;
};

namespace detail {

/// Index of the nearest row of `book` to `x`; ties go to the lowest index.
inline int nearest_codeword(const FrameMatrix& book, const Eigen::RowVectorXd& x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < book.rows(); ++k) {
    const double d = (book.row(k).cast<double>() - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

inline std::size_t count_distinct_rows(const Eigen::MatrixXd& x) {
  std::set<std::vector<double>> seen;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index c = 0; c < x.cols(); ++c) row[static_cast<std::size_t>(c)] = x(i, c);
    seen.insert(std::move(row));
    if (seen.size() > 1u << 20) break;
  }
  return seen.size();
}

/// Lloyd's k-means with k-means++ seeding on the rows of `x`.
inline Eigen::MatrixXd kmeans(const Eigen::MatrixXd& x, int k, int max_iterations, Rng& rng) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  Eigen::MatrixXd centers(k, d);
  std::vector<double> dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());

  Eigen::Index first = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
  centers.row(0) = x.row(first);
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      dist[static_cast<std::size_t>(i)] =
          std::min(dist[static_cast<std::size_t>(i)], (x.row(i) - centers.row(c - 1)).squaredNorm());
      total += dist[static_cast<std::size_t>(i)];
    }
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      for (pick = 0; pick < n - 1; ++pick) {
        r -= dist[static_cast<std::size_t>(pick)];
        if (r < 0.0) break;
      }
      while (dist[static_cast<std::size_t>(pick)] == 0.0 && pick > 0) --pick;
    }
    centers.row(c) = x.row(pick);
  }

  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  const Eigen::VectorXd x_norm = x.rowwise().squaredNorm();
  for (int iter = 0; iter < max_iterations; ++iter) {
    const Eigen::VectorXd c_norm = centers.rowwise().squaredNorm();
    const Eigen::MatrixXd cross = x * centers.transpose();
    bool changed = false;
    std::vector<double> best_d(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double dd = x_norm(i) - 2.0 * cross(i, c) + c_norm(c);
        if (dd < bd) {
          bd = dd;
          best = c;
        }
      }
      best_d[static_cast<std::size_t>(i)] = bd;
      if (assign[static_cast<std::size_t>(i)] != best) {
        assign[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    if (!changed && iter > 0) break;

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, d);
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += x.row(i);
      ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
        continue;
      }
      // empty cluster: move it to the worst-served point
      const auto worst = std::max_element(best_d.begin(), best_d.end()) - best_d.begin();
      centers.row(c) = x.row(worst);
      best_d[static_cast<std::size_t>(worst)] = 0.0;
    }
  }
  return centers;
}

/// Nudges coincident codewords apart so every layer has distinct entries.
inline void separate_duplicates(Eigen::MatrixXd& centers, double scale, Rng& rng) {
  const double eps = std::max(scale, 1e-6) * 1e-3;
  for (Eigen::Index a = 1; a < centers.rows(); ++a) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      bool dup = false;
      for (Eigen::Index b = 0; b < a; ++b) {
        if ((centers.row(a) - centers.row(b)).squaredNorm() == 0.0) {
          dup = true;
          break;
        }
      }
      if (!dup) break;
      for (Eigen::Index j = 0; j < centers.cols(); ++j) centers(a, j) += eps * rng.normal();
    }
  }
}

}  // namespace detail

/// Trains codebooks layer by layer; layer l clusters the residual left by
/// layers < l. Deterministic for a given seed.
inline RvqCodebooks train_rvq(const FrameMatrix& frames, int layers, int vocab, std::uint64_t seed,
                              const RvqTrainOptions& opt = {}) {
  if (layers <= 0 || vocab <= 0) throw Error(ErrorCode::OutOfDomain, "layers and vocab must be positive");
  Eigen::MatrixXd x = frames.cast<double>();
  RvqCodebooks books;
  books.mean = Eigen::RowVectorXf::Zero(frames.cols());
  books.scale = Eigen::RowVectorXf::Ones(frames.cols());
  if (opt.normalize && x.rows() > 0) {
    const Eigen::RowVectorXd mu = x.colwise().mean();
    Eigen::RowVectorXd sd = ((x.rowwise() - mu).array().square().colwise().mean()).sqrt();
    sd = sd.unaryExpr([](double v) { return v > 1e-8 ? v : 1.0; });
    books.mean = mu.cast<float>();
    books.scale = sd.cast<float>();
  }
  x = (x.rowwise() - books.mean.cast<double>()).array().rowwise() / books.scale.cast<double>().array();

  if (detail::count_distinct_rows(x) < static_cast<std::size_t>(vocab)) {
    throw Error(ErrorCode::InsufficientData, "need at least " + std::to_string(vocab) + " distinct frames");
  }

  Rng rng(mix_seed(seed, 0x52565121));
  Eigen::MatrixXd residual = x;
  for (int l = 0; l < layers; ++l) {
    Eigen::MatrixXd centers;
    if (detail::count_distinct_rows(residual) >= static_cast<std::size_t>(vocab)) {
      centers = detail::kmeans(residual, vocab, opt.max_iterations, rng);
    } else {
      centers = Eigen::MatrixXd::Zero(vocab, residual.cols());
    }
    const double spread = residual.rows() > 0 ? std::sqrt(residual.squaredNorm() / residual.rows()) : 1.0;
    detail::separate_duplicates(centers, spread, rng);
    FrameMatrix book = centers.cast<float>();
    for (Eigen::Index i = 0; i < residual.rows(); ++i) {
      const Eigen::RowVectorXd r = residual.row(i);
      residual.row(i) -= book.row(detail::nearest_codeword(book, r)).cast<double>();
    }
    books.layers.push_back(std::move(book));
  }
  return books;
}

/// Greedy residual quantization of each feature row.
inline TokenGrid rvq_encode(const FrameMatrix& frames, const RvqCodebooks& books) {
  if (frames.cols() != books.dim()) {
    throw Error(ErrorCode::DimMismatch, "feature dim " + std::to_string(frames.cols()) + " vs codebook dim " +
                                            std::to_string(books.dim()));
  }
  TokenGrid grid(books.num_layers(), static_cast<int>(frames.rows()), 0);
  const Eigen::RowVectorXd mu = books.mean.cast<double>();
  const Eigen::RowVectorXd sd = books.scale.cast<double>();
  for (Eigen::Index f = 0; f < frames.rows(); ++f) {
    Eigen::RowVectorXd r = (frames.row(f).cast<double>() - mu).array() / sd.array();
    for (int l = 0; l < books.num_layers(); ++l) {
      const int k = detail::nearest_codeword(books.layers[static_cast<std::size_t>(l)], r);
      grid.at(l, static_cast<int>(f)) = k;
      r -= books.layers[static_cast<std::size_t>(l)].row(k).cast<double>();
    }
  }
  return grid;
}

/// Sums the selected codewords of the first `use_layers` layers (all when
/// negative) and undoes the normalization.
inline FrameMatrix rvq_decode(const TokenGrid& grid, const RvqCodebooks& books, int use_layers = -1) {
  if (grid.layers() != books.num_layers()) throw Error(ErrorCode::DimMismatch, "grid layer count differs from codebooks");
  if (grid.has_mask()) throw Error(ErrorCode::MaskedInput, "cannot decode a grid containing MASK");
  const int n_layers = use_layers < 0 ? grid.layers() : std::min(use_layers, grid.layers());
  FrameMatrix out = FrameMatrix::Zero(grid.frames(), books.dim());
  for (int f = 0; f < grid.frames(); ++f) {
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(books.dim());
    for (int l = 0; l < n_layers; ++l) {
      const Token t = grid.at(l, f);
      if (t < 0 || t >= books.vocab()) throw Error(ErrorCode::OutOfDomain, "token out of vocabulary");
      acc += books.layers[static_cast<std::size_t>(l)].row(t).cast<double>();
    }
    out.row(f) = (acc.array() * books.scale.cast<double>().array() + books.mean.cast<double>().array()).cast<float>();
  }
  return out;
}

inline double min_pairwise_distance(const FrameMatrix& book) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index a = 0; a < book.rows(); ++a) {
    for (Eigen::Index b = a + 1; b < book.rows(); ++b) {
      best = std::min(best, static_cast<double>((book.row(a) - book.row(b)).norm()));
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Codebook file: "VXRQ", u32 version, u32 layers, u32 vocab, u32 dim, then
// row-major float32 codewords layer by layer, then float32 mean[dim] and
// scale[dim]. Little-endian.

inline constexpr char kCodebookMagic[4] = {'V', 'X', 'R', 'Q'};
inline constexpr std::uint32_t kCodebookVersion = 1;

inline std::vector<std::uint8_t> serialize_codebooks(const RvqCodebooks& books) {
  std::vector<std::uint8_t> out(kCodebookMagic, kCodebookMagic + 4);
  detail::append_le<std::uint32_t>(out, kCodebookVersion);
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(books.num_layers()));
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(books.vocab()));
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(books.dim()));
  for (const auto& layer : books.layers) {
    for (Eigen::Index r = 0; r < layer.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.cols(); ++c) detail::append_le<float>(out, layer(r, c));
    }
  }
  for (Eigen::Index c = 0; c < books.mean.size(); ++c) detail::append_le<float>(out, books.mean(c));
  for (Eigen::Index c = 0; c < books.scale.size(); ++c) detail::append_le<float>(out, books.scale(c));
  return out;
}

inline RvqCodebooks deserialize_codebooks(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kCodebookMagic, 4) != 0) {
    throw Error(ErrorCode::IoFailure, "not a codebook file");
  }
  const auto version = detail::read_le<std::uint32_t>(bytes.data() + 4);
  if (version != kCodebookVersion) throw Error(ErrorCode::IoFailure, "unsupported codebook version " + std::to_string(version));
  const auto layers = detail::read_le<std::uint32_t>(bytes.data() + 8);
  const auto vocab = detail::read_le<std::uint32_t>(bytes.data() + 12);
  const auto dim = detail::read_le<std::uint32_t>(bytes.data() + 16);
  const std::size_t floats = static_cast<std::size_t>(layers) * vocab * dim + 2u * dim;
  if (bytes.size() != 20 + 4 * floats) throw Error(ErrorCode::IoFailure, "codebook file size mismatch");
  const std::uint8_t* p = bytes.data() + 20;
  RvqCodebooks books;
  for (std::uint32_t l = 0; l < layers; ++l) {
    FrameMatrix book(vocab, dim);
    for (std::uint32_t r = 0; r < vocab; ++r) {
      for (std::uint32_t c = 0; c < dim; ++c, p += 4) book(r, c) = detail::read_le<float>(p);
    }
    books.layers.push_back(std::move(book));
  }
  books.mean.resize(dim);
  books.scale.resize(dim);
  for (std::uint32_t c = 0; c < dim; ++c, p += 4) books.mean(c) = detail::read_le<float>(p);
  for (std::uint32_t c = 0; c < dim; ++c, p += 4) books.scale(c) = detail::read_le<float>(p);
  return books;
}

inline void save_codebooks(const RvqCodebooks& books, const std::filesystem::path& path) {
  detail::write_file_atomic(path, serialize_codebooks(books));
}

inline RvqCodebooks load_codebooks(const std::filesystem::path& path) {
  return deserialize_codebooks(detail::read_file(path));
}

}  // namespace voxkit
