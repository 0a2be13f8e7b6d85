#pragma once

// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// Layout convention: every value is a matrix whose columns are samples.
// Image batches are stored channel-major per pixel: rows = channels,
// cols = batch * height * width, with pixel p = y * width + x of sample n
// at column n * height * width + p.  Vectors (codes, features, logits)
// are plain (dim x batch) matrices with height = width = 1.

#include <Eigen/Dense>

#include <cassert>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "diffex/errors.hpp"

namespace diffex {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

namespace ad {

template <typename Scalar>
struct Node {
  Mat<Scalar> value;
  Mat<Scalar> grad;
  int height = 1;
  int width = 1;
  bool requires_grad = false;

  Eigen::Index samples() const { return value.cols() / (height * width); }

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (grad.size() == 0) grad = Mat<Scalar>::Zero(value.rows(), value.cols());
    grad += g;
  }
  void zero_grad() { grad.resize(0, 0); }
};

template <typename Scalar>
using Var = std::shared_ptr<Node<Scalar>>;

template <typename Scalar>
Var<Scalar> make_var(Mat<Scalar> value, bool requires_grad = false, int height = 1, int width = 1) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->height = height;
  n->width = width;
  return n;
}

/// Records backward closures for one forward pass.  A non-recording tape
/// evaluates the same graph without retaining anything (inference).
template <typename Scalar>
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<Scalar> constant(Mat<Scalar> value, int height = 1, int width = 1) const {
    return make_var<Scalar>(std::move(value), false, height, width);
  }

  /// Creates the output node of an op; it needs a gradient iff recording and
  /// any input needs one.
  Var<Scalar> result(Mat<Scalar> value, std::initializer_list<const Var<Scalar>*> inputs,
                     int height = 1, int width = 1) const {
    bool rg = false;
    if (record_)
      for (auto* in : inputs) rg = rg || (*in)->requires_grad;
    return make_var<Scalar>(std::move(value), rg, height, width);
  }

  /// Registers the backward step of the op that produced `out`; it runs only
  /// if `out` received a gradient.
  void push(const Var<Scalar>& out, std::function<void()> fn) {
    ops_.push_back({out, std::move(fn)});
  }

  void backward(const Var<Scalar>& loss) {
    if (loss->value.size() != 1) throw std::logic_error("backward: loss must be scalar");
    loss->accumulate(Mat<Scalar>::Ones(1, 1));
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it)
      if (it->out->grad.size() != 0) it->fn();
    ops_.clear();
  }

 private:
  bool record_;
  struct Op {
    Var<Scalar> out;
    std::function<void()> fn;
  };
  std::vector<Op> ops_;
};

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops

template <typename S>
Var<S> detach(Tape<S>& t, const Var<S>& a) {
  return t.constant(a->value, a->height, a->width);
}

template <typename S>
Var<S> add(Tape<S>& t, const Var<S>& a, const Var<S>& b) {
  assert(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols());
  auto y = t.result(a->value + b->value, {&a, &b}, a->height, a->width);
  if (y->requires_grad)
    t.push(y, [a, b, y] {
      if (a->requires_grad) a->accumulate(y->grad);
      if (b->requires_grad) b->accumulate(y->grad);
    });
  return y;
}

template <typename S>
Var<S> sub(Tape<S>& t, const Var<S>& a, const Var<S>& b) {
  assert(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols());
  auto y = t.result(a->value - b->value, {&a, &b}, a->height, a->width);
  if (y->requires_grad)
    t.push(y, [a, b, y] {
      if (a->requires_grad) a->accumulate(y->grad);
      if (b->requires_grad) b->accumulate(-y->grad);
    });
  return y;
}

/// Hadamard product.
template <typename S>
Var<S> mul(Tape<S>& t, const Var<S>& a, const Var<S>& b) {
  auto y = t.result(a->value.cwiseProduct(b->value), {&a, &b}, a->height, a->width);
  if (y->requires_grad)
    t.push(y, [a, b, y] {
      if (a->requires_grad) a->accumulate(y->grad.cwiseProduct(b->value));
      if (b->requires_grad) b->accumulate(y->grad.cwiseProduct(a->value));
    });
  return y;
}

template <typename S>
Var<S> scale(Tape<S>& t, const Var<S>& a, S s) {
  auto y = t.result(a->value * s, {&a}, a->height, a->width);
  if (y->requires_grad) t.push(y, [a, y, s] { a->accumulate(y->grad * s); });
  return y;
}

template <typename S>
Var<S> add_scalar(Tape<S>& t, const Var<S>& a, S s) {
  auto y = t.result((a->value.array() + s).matrix(), {&a}, a->height, a->width);
  if (y->requires_grad) t.push(y, [a, y] { a->accumulate(y->grad); });
  return y;
}

template <typename S>
Var<S> matmul(Tape<S>& t, const Var<S>& a, const Var<S>& b) {
  Mat<S> v(a->value.rows(), b->value.cols());
  v.noalias() = a->value * b->value;
  auto y = t.result(std::move(v), {&a, &b});
  if (y->requires_grad)
    t.push(y, [a, b, y] {
      if (a->requires_grad) a->accumulate(y->grad * b->value.transpose());
      if (b->requires_grad) b->accumulate(a->value.transpose() * y->grad);
    });
  return y;
}

template <typename S>
Var<S> transpose(Tape<S>& t, const Var<S>& a) {
  auto y = t.result(a->value.transpose(), {&a});
  if (y->requires_grad) t.push(y, [a, y] { a->accumulate(y->grad.transpose()); });
  return y;
}

/// x + b with b a column vector broadcast across all columns.
template <typename S>
Var<S> add_bias(Tape<S>& t, const Var<S>& x, const Var<S>& b) {
  assert(b->value.cols() == 1 && b->value.rows() == x->value.rows());
  Mat<S> v = x->value.colwise() + b->value.col(0);
  auto y = t.result(std::move(v), {&x, &b}, x->height, x->width);
  if (y->requires_grad)
    t.push(y, [x, b, y] {
      if (x->requires_grad) x->accumulate(y->grad);
      if (b->requires_grad) b->accumulate(y->grad.rowwise().sum());
    });
  return y;
}

template <typename S>
Var<S> silu(Tape<S>& t, const Var<S>& x) {
  Mat<S> sig = (S(1) / (S(1) + (-x->value.array()).exp())).matrix();
  auto y = t.result(x->value.cwiseProduct(sig), {&x}, x->height, x->width);
  if (y->requires_grad)
    t.push(y, [x, y, sig = std::move(sig)] {
      auto s = sig.array();
      x->accumulate((y->grad.array() * (s * (S(1) + x->value.array() * (S(1) - s)))).matrix());
    });
  return y;
}

template <typename S>
Var<S> tanh(Tape<S>& t, const Var<S>& x) {
  auto y = t.result(x->value.array().tanh().matrix(), {&x}, x->height, x->width);
  if (y->requires_grad)
    t.push(y, [x, y] {
      x->accumulate((y->grad.array() * (S(1) - y->value.array().square())).matrix());
    });
  return y;
}

template <typename S>
Var<S> exp(Tape<S>& t, const Var<S>& x) {
  auto y = t.result(x->value.array().exp().matrix(), {&x}, x->height, x->width);
  if (y->requires_grad)
    t.push(y, [x, y] { x->accumulate(y->grad.cwiseProduct(y->value)); });
  return y;
}

template <typename S>
Var<S> log(Tape<S>& t, const Var<S>& x) {
  auto y = t.result(x->value.array().log().matrix(), {&x}, x->height, x->width);
  if (y->requires_grad)
    t.push(y, [x, y] { x->accumulate((y->grad.array() / x->value.array()).matrix()); });
  return y;
}

template <typename S>
Var<S> square(Tape<S>& t, const Var<S>& x) {
  auto y = t.result(x->value.array().square().matrix(), {&x}, x->height, x->width);
  if (y->requires_grad)
    t.push(y, [x, y] { x->accumulate(S(2) * y->grad.cwiseProduct(x->value)); });
  return y;
}

/// max(x, floor); the gradient passes only where x > floor.
template <typename S>
Var<S> clamp_min(Tape<S>& t, const Var<S>& x, S floor) {
  auto y = t.result(x->value.cwiseMax(floor), {&x}, x->height, x->width);
  if (y->requires_grad)
    t.push(y, [x, y, floor] {
      x->accumulate((x->value.array() > floor).select(y->grad, S(0)).matrix());
    });
  return y;
}

template <typename S>
Var<S> sum(Tape<S>& t, const Var<S>& x) {
  Mat<S> v(1, 1);
  v(0, 0) = x->value.sum();
  auto y = t.result(std::move(v), {&x});
  if (y->requires_grad)
    t.push(y, [x, y] {
      x->accumulate(Mat<S>::Constant(x->value.rows(), x->value.cols(), y->grad(0, 0)));
    });
  return y;
}

template <typename S>
Var<S> mean(Tape<S>& t, const Var<S>& x) {
  return scale(t, sum(t, x), S(1) / static_cast<S>(x->value.size()));
}

/// Sum across columns: (r x c) -> (r x 1).
template <typename S>
Var<S> row_sums(Tape<S>& t, const Var<S>& x) {
  auto y = t.result(x->value.rowwise().sum(), {&x});
  if (y->requires_grad)
    t.push(y, [x, y] { x->accumulate(y->grad.col(0).replicate(1, x->value.cols())); });
  return y;
}

/// Sum down rows: (r x c) -> (1 x c).
template <typename S>
Var<S> col_sums(Tape<S>& t, const Var<S>& x) {
  auto y = t.result(x->value.colwise().sum(), {&x});
  if (y->requires_grad)
    t.push(y, [x, y] { x->accumulate(y->grad.row(0).replicate(x->value.rows(), 1)); });
  return y;
}

/// x minus its per-row mean over columns (batch centering).
template <typename S>
Var<S> center_rows(Tape<S>& t, const Var<S>& x) {
  Mat<S> v = x->value.colwise() - x->value.rowwise().mean();
  auto y = t.result(std::move(v), {&x});
  if (y->requires_grad)
    t.push(y, [x, y] {
      Mat<S> g = y->grad.colwise() - y->grad.rowwise().mean();
      x->accumulate(g);
    });
  return y;
}

template <typename S>
Var<S> concat_rows(Tape<S>& t, const Var<S>& a, const Var<S>& b) {
  assert(a->value.cols() == b->value.cols());
  const auto ra = a->value.rows();
  Mat<S> v(ra + b->value.rows(), a->value.cols());
  v.topRows(ra) = a->value;
  v.bottomRows(b->value.rows()) = b->value;
  auto y = t.result(std::move(v), {&a, &b}, a->height, a->width);
  if (y->requires_grad)
    t.push(y, [a, b, y, ra] {
      if (a->requires_grad) a->accumulate(y->grad.topRows(ra));
      if (b->requires_grad) b->accumulate(y->grad.bottomRows(b->value.rows()));
    });
  return y;
}

template <typename S>
Var<S> slice_rows(Tape<S>& t, const Var<S>& a, Eigen::Index start, Eigen::Index count) {
  auto y = t.result(a->value.middleRows(start, count), {&a}, a->height, a->width);
  if (y->requires_grad)
    t.push(y, [a, y, start, count] {
      Mat<S> g = Mat<S>::Zero(a->value.rows(), a->value.cols());
      g.middleRows(start, count) = y->grad;
      a->accumulate(g);
    });
  return y;
}

template <typename S>
Var<S> concat_cols(Tape<S>& t, const std::vector<Var<S>>& parts) {
  Eigen::Index cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    cols += p->value.cols();
    rg = rg || p->requires_grad;
  }
  Mat<S> v(parts.front()->value.rows(), cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    v.middleCols(c, p->value.cols()) = p->value;
    c += p->value.cols();
  }
  auto y = make_var<S>(std::move(v), rg && t.recording());
  if (y->requires_grad)
    t.push(y, [parts, y] {
      Eigen::Index c = 0;
      for (const auto& p : parts) {
        if (p->requires_grad) p->accumulate(y->grad.middleCols(c, p->value.cols()));
        c += p->value.cols();
      }
    });
  return y;
}

/// Divides each column by max(norm, eps).  Columns with norm <= eps are
/// passed through with the clamped divisor.
template <typename S>
Var<S> normalize_cols(Tape<S>& t, const Var<S>& x, S eps) {
  Eigen::Array<S, 1, Eigen::Dynamic> norms = x->value.colwise().norm().array().max(eps);
  Mat<S> v = x->value.array().rowwise() / norms;
  auto y = t.result(std::move(v), {&x}, x->height, x->width);
  if (y->requires_grad)
    t.push(y, [x, y, norms, eps] {
      Mat<S> g(x->value.rows(), x->value.cols());
      for (Eigen::Index c = 0; c < x->value.cols(); ++c) {
        const S n = norms(c);
        if (x->value.col(c).norm() > eps) {
          const S proj = y->value.col(c).dot(y->grad.col(c));
          g.col(c) = (y->grad.col(c) - y->value.col(c) * proj) / n;
        } else {
          g.col(c) = y->grad.col(c) / n;
        }
      }
      x->accumulate(g);
    });
  return y;
}

/// Column-wise softmax (each column is one sample's logits).
template <typename S>
Mat<S> softmax_cols_value(const Mat<S>& logits) {
  Mat<S> v = logits.rowwise() - logits.colwise().maxCoeff();
  v = v.array().exp().matrix();
  v.array().rowwise() /= v.colwise().sum().array();
  return v;
}

template <typename S>
Var<S> softmax_cols(Tape<S>& t, const Var<S>& x) {
  auto y = t.result(softmax_cols_value<S>(x->value), {&x});
  if (y->requires_grad)
    t.push(y, [x, y] {
      Eigen::Array<S, 1, Eigen::Dynamic> dot =
          y->grad.cwiseProduct(y->value).colwise().sum().array();
      Mat<S> g = (y->value.array() * (y->grad.array().rowwise() - dot)).matrix();
      x->accumulate(g);
    });
  return y;
}

template <typename S>
Var<S> log_softmax_cols(Tape<S>& t, const Var<S>& x) {
  Mat<S> shifted = x->value.rowwise() - x->value.colwise().maxCoeff();
  Eigen::Array<S, 1, Eigen::Dynamic> lse = shifted.array().exp().colwise().sum().log();
  Mat<S> v = shifted.array().rowwise() - lse;
  auto y = t.result(std::move(v), {&x});
  if (y->requires_grad)
    t.push(y, [x, y] {
      Mat<S> p = y->value.array().exp().matrix();
      Eigen::Array<S, 1, Eigen::Dynamic> gs = y->grad.colwise().sum().array();
      Mat<S> g = y->grad - (p.array().rowwise() * gs).matrix();
      x->accumulate(g);
    });
  return y;
}

// ---------------------------------------------------------------------------
// Spatial ops on image batches

namespace detail {

/// Gathers k x k patches of one sample into (channels*k*k, out_h*out_w).
/// Row index = (ky * k + kx) * channels + c.
template <typename S>
void im2col(const S* src, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, Mat<S>& cols) {
  cols.setZero(static_cast<Eigen::Index>(channels) * k * k,
               static_cast<Eigen::Index>(out_h) * out_w);
  for (int oy = 0; oy < out_h; ++oy)
    for (int ox = 0; ox < out_w; ++ox) {
      S* dst = cols.data() + (static_cast<Eigen::Index>(oy) * out_w + ox) * cols.rows();
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= width) continue;
          std::memcpy(dst + (ky * k + kx) * channels,
                      src + (static_cast<Eigen::Index>(iy) * width + ix) * channels,
                      sizeof(S) * channels);
        }
      }
    }
}

template <typename S>
void col2im_add(const Mat<S>& cols, int channels, int height, int width, int k, int stride,
                int pad, int out_h, int out_w, S* dst) {
  for (int oy = 0; oy < out_h; ++oy)
    for (int ox = 0; ox < out_w; ++ox) {
      const S* src = cols.data() + (static_cast<Eigen::Index>(oy) * out_w + ox) * cols.rows();
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= width) continue;
          S* d = dst + (static_cast<Eigen::Index>(iy) * width + ix) * channels;
          const S* s = src + (ky * k + kx) * channels;
          for (int c = 0; c < channels; ++c) d[c] += s[c];
        }
      }
    }
}

}  // namespace detail

/// 2-D convolution with zero padding k/2.  weight is (out_ch, in_ch*k*k)
/// in the im2col row order; bias is (out_ch x 1).  Samples are convolved
/// one at a time so results never depend on batch composition.
template <typename S>
Var<S> conv2d(Tape<S>& t, const Var<S>& x, const Var<S>& weight, const Var<S>& bias, int k,
              int stride) {
  const int cin = static_cast<int>(x->value.rows());
  const int h = x->height, w = x->width;
  const int pad = k / 2;
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (w + 2 * pad - k) / stride + 1;
  const Eigen::Index n = x->samples();
  if (weight->value.cols() != static_cast<Eigen::Index>(cin) * k * k)
    throw InputError("conv2d: weight/input channel mismatch");
  const Eigen::Index cout = weight->value.rows();
  const Eigen::Index in_hw = static_cast<Eigen::Index>(h) * w;
  const Eigen::Index out_hw = static_cast<Eigen::Index>(oh) * ow;

  Mat<S> out(cout, n * out_hw);
  Mat<S> cols;
  for (Eigen::Index s = 0; s < n; ++s) {
    detail::im2col<S>(x->value.data() + s * in_hw * cin, cin, h, w, k, stride, pad, oh, ow, cols);
    out.middleCols(s * out_hw, out_hw).noalias() = weight->value * cols;
  }
  out.colwise() += bias->value.col(0);
  auto y = t.result(std::move(out), {&x, &weight, &bias}, oh, ow);
  if (y->requires_grad)
    t.push(y, [x, weight, bias, y, cin, h, w, k, stride, pad, oh, ow, n, in_hw, out_hw] {
      Mat<S> cols;
      Mat<S> gw;
      if (weight->requires_grad) gw = Mat<S>::Zero(weight->value.rows(), weight->value.cols());
      Mat<S> gx;
      if (x->requires_grad) gx = Mat<S>::Zero(x->value.rows(), x->value.cols());
      Mat<S> dcols;
      for (Eigen::Index s = 0; s < n; ++s) {
        const auto gy = y->grad.middleCols(s * out_hw, out_hw);
        if (weight->requires_grad) {
          detail::im2col<S>(x->value.data() + s * in_hw * cin, cin, h, w, k, stride, pad, oh, ow,
                            cols);
          gw.noalias() += gy * cols.transpose();
        }
        if (x->requires_grad) {
          dcols.noalias() = weight->value.transpose() * gy;
          detail::col2im_add<S>(dcols, cin, h, w, k, stride, pad, oh, ow,
                                gx.data() + s * in_hw * cin);
        }
      }
      if (weight->requires_grad) weight->accumulate(gw);
      if (bias->requires_grad) bias->accumulate(y->grad.rowwise().sum());
      if (x->requires_grad) x->accumulate(gx);
    });
  return y;
}

/// Nearest-neighbour 2x upsampling.
template <typename S>
Var<S> upsample2x(Tape<S>& t, const Var<S>& x) {
  const int h = x->height, w = x->width;
  const Eigen::Index n = x->samples();
  const Eigen::Index c = x->value.rows();
  Mat<S> v(c, n * 4 * h * w);
  for (Eigen::Index s = 0; s < n; ++s)
    for (int yy = 0; yy < 2 * h; ++yy)
      for (int xx = 0; xx < 2 * w; ++xx)
        v.col(s * 4 * h * w + yy * 2 * w + xx) = x->value.col(s * h * w + (yy / 2) * w + xx / 2);
  auto y = t.result(std::move(v), {&x}, 2 * h, 2 * w);
  if (y->requires_grad)
    t.push(y, [x, y, h, w, n, c] {
      Mat<S> g = Mat<S>::Zero(c, x->value.cols());
      for (Eigen::Index s = 0; s < n; ++s)
        for (int yy = 0; yy < 2 * h; ++yy)
          for (int xx = 0; xx < 2 * w; ++xx)
            g.col(s * h * w + (yy / 2) * w + xx / 2) += y->grad.col(s * 4 * h * w + yy * 2 * w + xx);
      x->accumulate(g);
    });
  return y;
}

/// Mean over spatial positions: (c, n*h*w) -> (c, n).
template <typename S>
Var<S> global_avg_pool(Tape<S>& t, const Var<S>& x) {
  const Eigen::Index hw = static_cast<Eigen::Index>(x->height) * x->width;
  const Eigen::Index n = x->samples();
  Mat<S> v(x->value.rows(), n);
  for (Eigen::Index s = 0; s < n; ++s) v.col(s) = x->value.middleCols(s * hw, hw).rowwise().mean();
  auto y = t.result(std::move(v), {&x});
  if (y->requires_grad)
    t.push(y, [x, y, hw, n] {
      Mat<S> g(x->value.rows(), x->value.cols());
      for (Eigen::Index s = 0; s < n; ++s)
        g.middleCols(s * hw, hw) = (y->grad.col(s) / static_cast<S>(hw)).replicate(1, hw);
      x->accumulate(g);
    });
  return y;
}

/// Per-sample affine modulation: y = h * (1 + scale_n) + shift_n, where
/// scale and shift are (channels x samples).
template <typename S>
Var<S> modulate(Tape<S>& t, const Var<S>& h, const Var<S>& scale, const Var<S>& shift) {
  const Eigen::Index hw = static_cast<Eigen::Index>(h->height) * h->width;
  const Eigen::Index n = h->samples();
  Mat<S> v(h->value.rows(), h->value.cols());
  for (Eigen::Index s = 0; s < n; ++s) {
    auto blk = h->value.middleCols(s * hw, hw);
    v.middleCols(s * hw, hw) =
        ((blk.array().colwise() * (S(1) + scale->value.col(s).array())).colwise() +
         shift->value.col(s).array())
            .matrix();
  }
  auto y = t.result(std::move(v), {&h, &scale, &shift}, h->height, h->width);
  if (y->requires_grad)
    t.push(y, [h, scale, shift, y, hw, n] {
      Mat<S> gh, gs, gb;
      if (h->requires_grad) gh.resize(h->value.rows(), h->value.cols());
      if (scale->requires_grad) gs.resize(scale->value.rows(), n);
      if (shift->requires_grad) gb.resize(shift->value.rows(), n);
      for (Eigen::Index s = 0; s < n; ++s) {
        const auto gy = y->grad.middleCols(s * hw, hw);
        if (h->requires_grad)
          gh.middleCols(s * hw, hw) =
              (gy.array().colwise() * (S(1) + scale->value.col(s).array())).matrix();
        if (scale->requires_grad)
          gs.col(s) = gy.cwiseProduct(h->value.middleCols(s * hw, hw)).rowwise().sum();
        if (shift->requires_grad) gb.col(s) = gy.rowwise().sum();
      }
      if (h->requires_grad) h->accumulate(gh);
      if (scale->requires_grad) scale->accumulate(gs);
      if (shift->requires_grad) shift->accumulate(gb);
    });
  return y;
}

/// Multiplies every column of sample n by coeffs[n].
template <typename S>
Var<S> scale_samples(Tape<S>& t, const Var<S>& x, std::vector<S> coeffs) {
  const Eigen::Index hw = static_cast<Eigen::Index>(x->height) * x->width;
  if (static_cast<Eigen::Index>(coeffs.size()) != x->samples())
    throw InputError("scale_samples: one coefficient per sample required");
  Mat<S> v(x->value.rows(), x->value.cols());
  for (Eigen::Index s = 0; s < x->samples(); ++s)
    v.middleCols(s * hw, hw) = x->value.middleCols(s * hw, hw) * coeffs[static_cast<std::size_t>(s)];
  auto y = t.result(std::move(v), {&x}, x->height, x->width);
  if (y->requires_grad)
    t.push(y, [x, y, hw, coeffs = std::move(coeffs)] {
      Mat<S> g(x->value.rows(), x->value.cols());
      for (Eigen::Index s = 0; s < x->samples(); ++s)
        g.middleCols(s * hw, hw) = y->grad.middleCols(s * hw, hw) * coeffs[static_cast<std::size_t>(s)];
      x->accumulate(g);
    });
  return y;
}

/// Concatenates two image batches along channels (same spatial size).
template <typename S>
Var<S> concat_channels(Tape<S>& t, const Var<S>& a, const Var<S>& b) {
  if (a->height != b->height || a->width != b->width)
    throw InputError("concat_channels: spatial size mismatch");
  return concat_rows(t, a, b);
}

}  // namespace ad
}  // namespace diffex
