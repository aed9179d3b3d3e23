#include <gtest/gtest.h>

#include <filesystem>

#include "voxkit/tokenizer.hpp"

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

// Gaussian blobs around a few random centres.
FrameMatrix blobs(int rows, int dim, int centres, double spread, std::uint64_t seed) {
  Rng rng(seed);
  FrameMatrix c(centres, dim);
  for (int i = 0; i < centres; ++i)
    for (int d = 0; d < dim; ++d) c(i, d) = static_cast<float>(3.0 * rng.normal());
  FrameMatrix x(rows, dim);
  for (int r = 0; r < rows; ++r) {
    const auto k = static_cast<int>(rng.below(static_cast<std::uint64_t>(centres)));
    for (int d = 0; d < dim; ++d) x(r, d) = c(k, d) + static_cast<float>(spread * rng.normal());
  }
  return x;
}

double mse(const FrameMatrix& a, const FrameMatrix& b) {
  return static_cast<double>((a - b).squaredNorm()) / static_cast<double>(a.size());
}

}  // namespace

TEST(Rvq, EncodeMatchesBruteForceGreedySearch) {
  const FrameMatrix x = blobs(400, 6, 10, 0.5, 1);
  const RvqCodebooks books = train_rvq(x, 3, 8, 2);
  const TokenGrid g = rvq_encode(x, books);
  for (int f = 0; f < x.rows(); ++f) {
    Eigen::RowVectorXf r = x.row(f);
    for (int l = 0; l < 3; ++l) {
      const FrameMatrix& b = books.layers[static_cast<std::size_t>(l)];
      int best = 0;
      float bd = (r - b.row(0)).squaredNorm();
      for (int k = 1; k < b.rows(); ++k) {
        const float d = (r - b.row(k)).squaredNorm();
        if (d < bd) {
          bd = d;
          best = k;
        }
      }
      ASSERT_EQ(g.at(l, f), best) << "frame " << f << " layer " << l;
      r -= b.row(best);
    }
  }
}

TEST(Rvq, DecodeSumsCodewords) {
  const FrameMatrix x = blobs(200, 4, 6, 0.3, 3);
  const RvqCodebooks books = train_rvq(x, 2, 4, 4);
  const TokenGrid g = rvq_encode(x, books);
  const FrameMatrix y = rvq_decode(g, books);
  for (int f = 0; f < x.rows(); ++f) {
    const Eigen::RowVectorXf expect = books.layers[0].row(g.at(0, f)) + books.layers[1].row(g.at(1, f));
    EXPECT_LT((y.row(f) - expect).norm(), 1e-5f);
  }
  const FrameMatrix y1 = rvq_decode(g, books, 1);
  EXPECT_LT((y1.row(0) - books.layers[0].row(g.at(0, 0))).norm(), 1e-6f);
}

TEST(Rvq, ErrorShrinksWithDepth) {
  const FrameMatrix x = blobs(1000, 8, 40, 1.0, 5);
  const RvqCodebooks books = train_rvq(x, 4, 16, 6);
  const TokenGrid g = rvq_encode(x, books);
  double prev = static_cast<double>(x.squaredNorm()) / static_cast<double>(x.size());
  for (int l = 1; l <= 4; ++l) {
    const double e = mse(rvq_decode(g, books, l), x);
    EXPECT_LT(e, prev) << l;
    prev = e;
  }
}

TEST(Rvq, SingleLayerReencodeIsExact) {
  const FrameMatrix x = blobs(300, 5, 12, 0.8, 7);
  const RvqCodebooks books = train_rvq(x, 1, 16, 8);
  const TokenGrid g = rvq_encode(x, books);
  EXPECT_EQ(rvq_encode(rvq_decode(g, books), books), g);
}

TEST(Rvq, ExactWhenDataHasVocabPoints) {
  FrameMatrix pts = blobs(8, 3, 8, 0.0, 9);
  pts += blobs(8, 3, 8, 1.0, 10);  // eight distinct rows
  FrameMatrix x(64, 3);
  for (int r = 0; r < 64; ++r) x.row(r) = pts.row(r % 8);
  const RvqCodebooks books = train_rvq(x, 1, 8, 11);
  EXPECT_LT(mse(rvq_decode(rvq_encode(x, books), books), x), 1e-10);
}

TEST(Rvq, CodewordsDistinctAndDeterministic) {
  const FrameMatrix x = blobs(500, 6, 20, 0.7, 12);
  const RvqCodebooks a = train_rvq(x, 4, 16, 13);
  const RvqCodebooks b = train_rvq(x, 4, 16, 13);
  for (int l = 0; l < 4; ++l) {
    EXPECT_GT(min_pairwise_distance(a.layers[static_cast<std::size_t>(l)]), 0.0);
    EXPECT_EQ(a.layers[static_cast<std::size_t>(l)], b.layers[static_cast<std::size_t>(l)]);
  }
  EXPECT_EQ(serialize_codebooks(a), serialize_codebooks(b));
}

TEST(Rvq, NormalizedRoundTrip) {
  FrameMatrix x = blobs(400, 4, 10, 0.2, 14);
  x.col(2) = x.col(2) * 100.0f + Eigen::VectorXf::Constant(x.rows(), 50.0f);
  RvqTrainOptions opt;
  opt.normalize = true;
  const RvqCodebooks books = train_rvq(x, 3, 16, 15, opt);
  EXPECT_GT(books.scale(2), 10.0f);
  const FrameMatrix y = rvq_decode(rvq_encode(x, books), books);
  // relative error per column stays small after undoing the scaling
  for (int c = 0; c < 4; ++c) {
    const double var = (x.col(c).array() - x.col(c).mean()).square().mean();
    EXPECT_LT((y.col(c) - x.col(c)).squaredNorm() / x.rows(), 0.1 * var) << c;
  }
}

TEST(Rvq, Errors) {
  const FrameMatrix x = blobs(10, 3, 2, 0.0, 16);  // only two distinct rows
  EXPECT_EQ(code_of([&] { train_rvq(x, 1, 4, 1); }), ErrorCode::InsufficientData);
  EXPECT_EQ(code_of([&] { train_rvq(x, 0, 4, 1); }), ErrorCode::OutOfDomain);
  const FrameMatrix y = blobs(100, 3, 10, 0.5, 17);
  const RvqCodebooks books = train_rvq(y, 2, 4, 1);
  EXPECT_EQ(code_of([&] { rvq_encode(FrameMatrix::Zero(2, 5), books); }), ErrorCode::DimMismatch);
  TokenGrid g(2, 3, 0);
  g.at(1, 2) = kMaskToken;
  EXPECT_EQ(code_of([&] { rvq_decode(g, books); }), ErrorCode::MaskedInput);
  g.at(1, 2) = 4;
  EXPECT_EQ(code_of([&] { rvq_decode(g, books); }), ErrorCode::OutOfDomain);
  EXPECT_EQ(code_of([&] { rvq_decode(TokenGrid(3, 3, 0), books); }), ErrorCode::DimMismatch);
}

TEST(Codebooks, FileRoundTrip) {
  const FrameMatrix x = blobs(200, 5, 10, 0.5, 18);
  RvqTrainOptions opt;
  opt.normalize = true;
  const RvqCodebooks books = train_rvq(x, 3, 8, 19, opt);
  const auto path = std::filesystem::temp_directory_path() / "voxkit_test_books.vxrq";
  save_codebooks(books, path);
  const RvqCodebooks back = load_codebooks(path);
  std::filesystem::remove(path);
  ASSERT_EQ(back.num_layers(), 3);
  for (int l = 0; l < 3; ++l) EXPECT_EQ(back.layers[static_cast<std::size_t>(l)], books.layers[static_cast<std::size_t>(l)]);
  EXPECT_EQ(back.mean, books.mean);
  EXPECT_EQ(back.scale, books.scale);
}

TEST(Codebooks, RejectsCorruptBytes) {
  const RvqCodebooks books = train_rvq(blobs(50, 2, 5, 0.5, 20), 1, 4, 1);
  auto bytes = serialize_codebooks(books);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_EQ(code_of([&] { deserialize_codebooks(truncated); }), ErrorCode::IoFailure);
  auto bad_magic = bytes;
  bad_magic[0] = 'Z';
  EXPECT_EQ(code_of([&] { deserialize_codebooks(bad_magic); }), ErrorCode::IoFailure);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_EQ(code_of([&] { deserialize_codebooks(bad_version); }), ErrorCode::IoFailure);
  EXPECT_EQ(code_of([] { load_codebooks("/nonexistent/books.vxrq"); }), ErrorCode::IoFailure);
}
