#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "voxkit/core.hpp"

// Minimal reverse-mode differentiation over dense row-major matrices. A Tape
// records one forward pass; backward() replays the recorded adjoints in
// reverse and accumulates into the Parameter gradients it touched.

namespace voxkit::ad {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Parameter {
  std::string name;
  Mat<T> value;
  Mat<T> grad;

  Parameter() = default;
  Parameter(std::string n, Mat<T> v) : name(std::move(n)), value(std::move(v)), grad(Mat<T>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

struct Var {
  int id = -1;
};

template <typename T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const Mat<T>& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  T scalar(Var v) const { return value(v)(0, 0); }
  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Mat<T> m) { return push(std::move(m), false); }

  Var param(Parameter<T>& p) {
    Var v = push(p.value, grad_enabled_);
    nodes_.back().param = &p;
    return v;
  }

  Var matmul(Var a, Var b) {
    if (value(a).cols() != value(b).rows()) throw Error(ErrorCode::ShapeMismatch, "matmul inner dimensions");
    Mat<T> out;
    out.noalias() = value(a) * value(b);
    Var r = push(std::move(out), needs(a) || needs(b));
    on_backward(r, [a, b](Tape& t, const Mat<T>& g) {
      if (t.needs(a)) t.grad(a).noalias() += g * t.value(b).transpose();
      if (t.needs(b)) t.grad(b).noalias() += t.value(a).transpose() * g;
    });
    return r;
  }

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    Var r = push(value(a) + value(b), needs(a) || needs(b));
    on_backward(r, [a, b](Tape& t, const Mat<T>& g) {
      if (t.needs(a)) t.grad(a) += g;
      if (t.needs(b)) t.grad(b) += g;
    });
    return r;
  }

  /// a + bias, bias is a single row broadcast over the rows of a.
  Var add_row(Var a, Var bias) {
    if (value(bias).rows() != 1 || value(bias).cols() != value(a).cols()) {
      throw Error(ErrorCode::ShapeMismatch, "add_row bias shape");
    }
    Mat<T> out = value(a).rowwise() + value(bias).row(0);
    Var r = push(std::move(out), needs(a) || needs(bias));
    on_backward(r, [a, bias](Tape& t, const Mat<T>& g) {
      if (t.needs(a)) t.grad(a) += g;
      if (t.needs(bias)) t.grad(bias) += g.colwise().sum();
    });
    return r;
  }

  Var affine(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

  Var scale(Var a, T s) {
    Var r = push(value(a) * s, needs(a));
    on_backward(r, [a, s](Tape& t, const Mat<T>& g) { t.grad(a) += g * s; });
    return r;
  }

  /// Row-wise layer normalization with learned gain and bias rows.
  Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5)) {
    const Mat<T>& xv = value(x);
    const Eigen::Index n = xv.cols();
    Mat<T> xhat(xv.rows(), n);
    Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(xv.rows());
    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
      const T mu = xv.row(i).mean();
      const T var = (xv.row(i).array() - mu).square().mean();
      inv_std(i) = T(1) / std::sqrt(var + eps);
      xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
    }
    Mat<T> out = (xhat.array().rowwise() * value(gain).row(0).array()).rowwise() + value(bias).row(0).array();
    Var r = push(std::move(out), needs(x) || needs(gain) || needs(bias));
    on_backward(r, [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), n](Tape& t, const Mat<T>& g) {
      if (t.needs(gain)) t.grad(gain) += (g.array() * xhat.array()).colwise().sum().matrix();
      if (t.needs(bias)) t.grad(bias) += g.colwise().sum();
      if (!t.needs(x)) return;
      const Mat<T> dxhat = g.array().rowwise() * t.value(gain).row(0).array();
      Mat<T>& gx = t.grad(x);
      for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
        const T m1 = dxhat.row(i).mean();
        const T m2 = (dxhat.row(i).array() * xhat.row(i).array()).mean();
        gx.row(i).array() += inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
      }
      (void)n;
    });
    return r;
  }

  /// GELU, tanh approximation.
  Var gelu(Var x) {
    const Mat<T>& xv = value(x);
    const T c = T(0.7978845608028654);  // sqrt(2/pi)
    Mat<T> th = (c * (xv.array() + T(0.044715) * xv.array().cube())).tanh().matrix();
    Mat<T> out = (T(0.5) * xv.array() * (T(1) + th.array())).matrix();
    Var r = push(std::move(out), needs(x));
    on_backward(r, [x, th = std::move(th), c](Tape& t, const Mat<T>& g) {
      const auto& xv2 = t.value(x).array();
      const auto dinner = c * (T(1) + T(3) * T(0.044715) * xv2.square());
      const auto d = T(0.5) * (T(1) + th.array()) + T(0.5) * xv2 * (T(1) - th.array().square()) * dinner;
      t.grad(x).array() += g.array() * d;
    });
    return r;
  }

  Var tanh(Var x) {
    Mat<T> out = value(x).array().tanh().matrix();
    Var r = push(out, needs(x));
    on_backward(r, [x, out](Tape& t, const Mat<T>& g) { t.grad(x).array() += g.array() * (T(1) - out.array().square()); });
    return r;
  }

  Var concat_cols(Var a, Var b) {
    const Mat<T>& av = value(a);
    const Mat<T>& bv = value(b);
    if (av.rows() != bv.rows()) throw Error(ErrorCode::ShapeMismatch, "concat_cols row mismatch");
    Mat<T> out(av.rows(), av.cols() + bv.cols());
    out << av, bv;
    const Eigen::Index ca = av.cols(), cb = bv.cols();
    Var r = push(std::move(out), needs(a) || needs(b));
    on_backward(r, [a, b, ca, cb](Tape& t, const Mat<T>& g) {
      if (t.needs(a)) t.grad(a) += g.leftCols(ca);
      if (t.needs(b)) t.grad(b) += g.rightCols(cb);
    });
    return r;
  }

  Var concat_rows(Var a, Var b) {
    const Mat<T>& av = value(a);
    const Mat<T>& bv = value(b);
    if (av.cols() != bv.cols()) throw Error(ErrorCode::ShapeMismatch, "concat_rows column mismatch");
    Mat<T> out(av.rows() + bv.rows(), av.cols());
    out << av, bv;
    const Eigen::Index ra = av.rows(), rb = bv.rows();
    Var r = push(std::move(out), needs(a) || needs(b));
    on_backward(r, [a, b, ra, rb](Tape& t, const Mat<T>& g) {
      if (t.needs(a)) t.grad(a) += g.topRows(ra);
      if (t.needs(b)) t.grad(b) += g.bottomRows(rb);
    });
    return r;
  }

  Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > value(a).rows()) throw Error(ErrorCode::ShapeMismatch, "slice_rows");
    Var r = push(value(a).middleRows(start, count), needs(a));
    on_backward(r, [a, start, count](Tape& t, const Mat<T>& g) { t.grad(a).middleRows(start, count) += g; });
    return r;
  }

  /// out[f] = sum over l of tables[l][ids[l][f]]; ids are row indices.
  Var embed_sum(const std::vector<Var>& tables, const std::vector<std::vector<int>>& ids) {
    if (tables.empty() || tables.size() != ids.size()) throw Error(ErrorCode::ShapeMismatch, "embed_sum arity");
    const auto frames = static_cast<Eigen::Index>(ids.front().size());
    const Eigen::Index d = value(tables.front()).cols();
    Mat<T> out = Mat<T>::Zero(frames, d);
    bool any = false;
    for (std::size_t l = 0; l < tables.size(); ++l) {
      const Mat<T>& tab = value(tables[l]);
      if (static_cast<Eigen::Index>(ids[l].size()) != frames || tab.cols() != d) {
        throw Error(ErrorCode::ShapeMismatch, "embed_sum table shape");
      }
      for (Eigen::Index f = 0; f < frames; ++f) {
        const int id = ids[l][static_cast<std::size_t>(f)];
        if (id < 0 || id >= tab.rows()) throw Error(ErrorCode::OutOfDomain, "embedding index out of range");
        out.row(f) += tab.row(id);
      }
      any = any || needs(tables[l]);
    }
    Var r = push(std::move(out), any);
    on_backward(r, [tables, ids](Tape& t, const Mat<T>& g) {
      for (std::size_t l = 0; l < tables.size(); ++l) {
        if (!t.needs(tables[l])) continue;
        Mat<T>& gt = t.grad(tables[l]);
        for (Eigen::Index f = 0; f < g.rows(); ++f) gt.row(ids[l][static_cast<std::size_t>(f)]) += g.row(f);
      }
    });
    return r;
  }

  /// Bidirectional multi-head scaled dot-product attention with rotary
  /// position encoding applied to q and k (position = row index).
  Var attention(Var q, Var k, Var v, int heads, T rope_base = T(10000)) {
    const Mat<T>& qv = value(q);
    const Eigen::Index n = qv.rows();
    const Eigen::Index d = qv.cols();
    if (heads <= 0 || d % heads != 0) throw Error(ErrorCode::ShapeMismatch, "width not divisible by heads");
    const Eigen::Index dh = d / heads;
    if (dh % 2 != 0) throw Error(ErrorCode::ShapeMismatch, "head width must be even for rotary encoding");
    check_same(q, k, "attention q/k");
    check_same(q, v, "attention q/v");

    auto cache = std::make_shared<AttentionCache>();
    cache->cos.resize(n, dh / 2);
    cache->sin.resize(n, dh / 2);
    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index i = 0; i < dh / 2; ++i) {
        const T theta = static_cast<T>(p) * std::pow(rope_base, -T(2) * static_cast<T>(i) / static_cast<T>(dh));
        cache->cos(p, i) = std::cos(theta);
        cache->sin(p, i) = std::sin(theta);
      }
    }
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    Mat<T> out(n, d);
    cache->q.resize(static_cast<std::size_t>(heads));
    cache->k.resize(static_cast<std::size_t>(heads));
    cache->p.resize(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Mat<T> qh = rotate(qv.middleCols(h * dh, dh), *cache, false);
      Mat<T> kh = rotate(value(k).middleCols(h * dh, dh), *cache, false);
      Mat<T> s;
      s.noalias() = qh * kh.transpose();
      s *= inv_sqrt;
      for (Eigen::Index i = 0; i < n; ++i) {
        const T mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp().matrix();
        s.row(i) /= s.row(i).sum();
      }
      out.middleCols(h * dh, dh).noalias() = s * value(v).middleCols(h * dh, dh);
      cache->q[static_cast<std::size_t>(h)] = std::move(qh);
      cache->k[static_cast<std::size_t>(h)] = std::move(kh);
      cache->p[static_cast<std::size_t>(h)] = std::move(s);
    }
    Var r = push(std::move(out), needs(q) || needs(k) || needs(v));
    on_backward(r, [q, k, v, heads, dh, inv_sqrt, cache](Tape& t, const Mat<T>& g) {
      for (int h = 0; h < heads; ++h) {
        const Mat<T>& p = cache->p[static_cast<std::size_t>(h)];
        const auto go = g.middleCols(h * dh, dh);
        if (t.needs(v)) t.grad(v).middleCols(h * dh, dh).noalias() += p.transpose() * go;
        Mat<T> dp;
        dp.noalias() = go * t.value(v).middleCols(h * dh, dh).transpose();
        const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = (dp.array() * p.array()).rowwise().sum();
        Mat<T> ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * inv_sqrt;
        if (t.needs(q)) {
          Mat<T> dq;
          dq.noalias() = ds * cache->k[static_cast<std::size_t>(h)];
          t.grad(q).middleCols(h * dh, dh) += rotate(dq, *cache, true);
        }
        if (t.needs(k)) {
          Mat<T> dk;
          dk.noalias() = ds.transpose() * cache->q[static_cast<std::size_t>(h)];
          t.grad(k).middleCols(h * dh, dh) += rotate(dk, *cache, true);
        }
      }
    });
    return r;
  }

  /// sum_i w_i * (logsumexp(z_i) - z_i[y_i]) / normalizer over rows i.
  Var weighted_cross_entropy(Var logits, const std::vector<int>& targets, const std::vector<T>& weights, T normalizer) {
    const Mat<T>& z = value(logits);
    if (static_cast<Eigen::Index>(targets.size()) != z.rows() || weights.size() != targets.size()) {
      throw Error(ErrorCode::ShapeMismatch, "cross entropy target count");
    }
    Mat<T> probs(z.rows(), z.cols());
    T loss = 0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const T mx = z.row(i).maxCoeff();
      probs.row(i) = (z.row(i).array() - mx).exp().matrix();
      const T s = probs.row(i).sum();
      probs.row(i) /= s;
      const T w = weights[static_cast<std::size_t>(i)];
      if (w == T(0)) continue;
      const int y = targets[static_cast<std::size_t>(i)];
      if (y < 0 || y >= z.cols()) throw Error(ErrorCode::OutOfDomain, "cross entropy target out of range");
      loss += w * (mx + std::log(s) - z(i, y));
    }
    Mat<T> out(1, 1);
    out(0, 0) = normalizer > T(0) ? loss / normalizer : T(0);
    Var r = push(std::move(out), needs(logits));
    on_backward(r, [logits, targets, weights, normalizer, probs = std::move(probs)](Tape& t, const Mat<T>& g) {
      if (!(normalizer > T(0))) return;
      const T scale = g(0, 0) / normalizer;
      Mat<T>& gz = t.grad(logits);
      for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        const T w = weights[static_cast<std::size_t>(i)];
        if (w == T(0)) continue;
        gz.row(i) += (scale * w) * probs.row(i);
        gz(i, targets[static_cast<std::size_t>(i)]) -= scale * w;
      }
    });
    return r;
  }

  /// Binary cross-entropy on logits: sum w * bce(sigmoid(z), y) / normalizer.
  Var weighted_bce_logits(Var logits, const Mat<T>& labels, const Mat<T>& weights, T normalizer) {
    const Mat<T>& z = value(logits);
    if (labels.rows() != z.rows() || labels.cols() != z.cols() || weights.rows() != z.rows() ||
        weights.cols() != z.cols()) {
      throw Error(ErrorCode::ShapeMismatch, "bce shape");
    }
    const auto zl = z.array();
    const T loss = (weights.array() * (zl.max(T(0)) - zl * labels.array() + (T(1) + (-zl.abs()).exp()).log())).sum();
    Mat<T> out(1, 1);
    out(0, 0) = normalizer > T(0) ? loss / normalizer : T(0);
    Var r = push(std::move(out), needs(logits));
    on_backward(r, [logits, labels, weights, normalizer](Tape& t, const Mat<T>& g) {
      if (!(normalizer > T(0))) return;
      const auto sig = (T(1) / (T(1) + (-t.value(logits).array()).exp()));
      t.grad(logits).array() += (g(0, 0) / normalizer) * weights.array() * (sig - labels.array());
    });
    return r;
  }

  /// Mean of squared differences over all entries.
  Var mse(Var a, const Mat<T>& target) {
    const Mat<T>& av = value(a);
    if (av.rows() != target.rows() || av.cols() != target.cols()) throw Error(ErrorCode::ShapeMismatch, "mse shape");
    const T n = static_cast<T>(av.size());
    Mat<T> out(1, 1);
    out(0, 0) = (av - target).squaredNorm() / n;
    Var r = push(std::move(out), needs(a));
    on_backward(r, [a, target, n](Tape& t, const Mat<T>& g) {
      t.grad(a) += (T(2) * g(0, 0) / n) * (t.value(a) - target);
    });
    return r;
  }

  /// Seeds d(loss) = seed_grad and propagates; parameter gradients are
  /// accumulated (not overwritten).
  void backward(Var loss, T seed_grad = T(1)) {
    if (!grad_enabled_) throw Error(ErrorCode::ContractViolation, "backward on a tape recorded without gradients");
    if (value(loss).size() != 1) throw Error(ErrorCode::ShapeMismatch, "backward needs a scalar");
    grad(loss)(0, 0) += seed_grad;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& node = nodes_[static_cast<std::size_t>(i)];
      if (!node.needs_grad || node.grad.size() == 0) continue;
      if (node.backward) node.backward(*this, node.grad);
      if (node.param) node.param->grad += node.grad;
    }
  }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    std::function<void(Tape&, const Mat<T>&)> backward;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
  };

  struct AttentionCache {
    Mat<T> cos, sin;
    std::vector<Mat<T>> q, k, p;
  };

  static Mat<T> rotate(const Mat<T>& x, const AttentionCache& c, bool inverse) {
    Mat<T> out(x.rows(), x.cols());
    const Eigen::Index half = x.cols() / 2;
    for (Eigen::Index p = 0; p < x.rows(); ++p) {
      for (Eigen::Index i = 0; i < half; ++i) {
        const T cs = c.cos(p, i);
        const T sn = inverse ? -c.sin(p, i) : c.sin(p, i);
        const T a = x(p, 2 * i), b = x(p, 2 * i + 1);
        out(p, 2 * i) = a * cs - b * sn;
        out(p, 2 * i + 1) = a * sn + b * cs;
      }
    }
    return out;
  }

  template <typename Derived>
  static Mat<T> rotate(const Eigen::MatrixBase<Derived>& x, const AttentionCache& c, bool inverse) {
    return rotate(Mat<T>(x), c, inverse);
  }

  Var push(Mat<T> value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = grad_enabled_ && needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  template <typename F>
  void on_backward(Var r, F&& f) {
    Node& n = nodes_[static_cast<std::size_t>(r.id)];
    if (n.needs_grad) n.backward = std::forward<F>(f);
  }

  bool needs(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

  Mat<T>& grad(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void check_same(Var a, Var b, const char* what) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw Error(ErrorCode::ShapeMismatch, std::string(what) + " shape mismatch");
    }
  }

  std::deque<Node> nodes_;
  bool grad_enabled_;
};

}  // namespace voxkit::ad
