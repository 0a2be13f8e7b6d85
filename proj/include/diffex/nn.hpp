#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "diffex/autodiff.hpp"
#include "diffex/rng.hpp"

namespace diffex::nn {

using ad::Tape;
using ad::Var;

/// Ordered collection of named trainable tensors.
template <typename S>
class ParamSet {
 public:
  Var<S> add(const std::string& name, Mat<S> init) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
    auto v = ad::make_var<S>(std::move(init), true);
    index_[name] = params_.size();
    params_.push_back({name, v});
    return v;
  }

  const std::vector<std::pair<std::string, Var<S>>>& items() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += static_cast<std::size_t>(v->value.size());
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : params_) v->zero_grad();
  }

  void freeze() {
    for (auto& [_, v] : params_) v->requires_grad = false;
  }

  /// Copies values from `other` by name; throws if the layouts differ.
  template <typename T>
  void assign_from(const std::vector<std::pair<std::string, Mat<T>>>& values) {
    if (values.size() != params_.size())
      throw InputError("parameter count mismatch: expected " + std::to_string(params_.size()) +
                       ", got " + std::to_string(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto& [name, m] = values[i];
      auto& dst = params_[i].second->value;
      if (name != params_[i].first || m.rows() != dst.rows() || m.cols() != dst.cols())
        throw InputError("parameter layout mismatch at " + name);
      dst = m.template cast<S>();
    }
  }

  std::vector<std::pair<std::string, Mat<S>>> snapshot() const {
    std::vector<std::pair<std::string, Mat<S>>> out;
    out.reserve(params_.size());
    for (const auto& [name, v] : params_) out.emplace_back(name, v->value);
    return out;
  }

 private:
  std::vector<std::pair<std::string, Var<S>>> params_;
  std::map<std::string, std::size_t> index_;
};

/// FNV-1a over the raw bytes of every parameter, in registration order.
template <typename S>
std::uint64_t checksum(const ParamSet<S>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, v] : params.items()) {
    for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
    const auto* p = reinterpret_cast<const unsigned char*>(v->value.data());
    const std::size_t bytes = sizeof(S) * static_cast<std::size_t>(v->value.size());
    for (std::size_t i = 0; i < bytes; ++i) h = (h ^ p[i]) * 1099511628211ULL;
  }
  return h;
}

template <typename S>
Mat<S> uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  Mat<S> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<S>(rng.uniform(-bound, bound));
  return m;
}

template <typename S>
struct Linear {
  Var<S> weight;
  Var<S> bias;

  Linear() = default;
  Linear(ParamSet<S>& ps, const std::string& name, int in, int out, Rng& rng,
         double gain = 1.0) {
    const double bound = gain * std::sqrt(3.0 / in);
    weight = ps.add(name + ".weight", uniform_init<S>(out, in, bound, rng));
    bias = ps.add(name + ".bias", Mat<S>::Zero(out, 1));
  }

  Var<S> operator()(Tape<S>& t, const Var<S>& x) const {
    return ad::add_bias(t, ad::matmul(t, weight, x), bias);
  }
  int in_features() const { return static_cast<int>(weight->value.cols()); }
  int out_features() const { return static_cast<int>(weight->value.rows()); }
};

template <typename S>
struct Conv2d {
  Var<S> weight;
  Var<S> bias;
  int kernel = 3;
  int stride = 1;

  Conv2d() = default;
  Conv2d(ParamSet<S>& ps, const std::string& name, int in, int out, Rng& rng, int kernel_size = 3,
         int stride_ = 1, double gain = 1.0)
      : kernel(kernel_size), stride(stride_) {
    const int fan_in = in * kernel * kernel;
    const double bound = gain * std::sqrt(3.0 / fan_in);
    weight = ps.add(name + ".weight", uniform_init<S>(out, fan_in, bound, rng));
    bias = ps.add(name + ".bias", Mat<S>::Zero(out, 1));
  }

  Var<S> operator()(Tape<S>& t, const Var<S>& x) const {
    return ad::conv2d(t, x, weight, bias, kernel, stride);
  }
};

/// Adam with optional global-norm gradient clipping.
template <typename S>
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // 0 disables clipping
  };

  void set_lr(double lr) { opt_.lr = lr; }
  double lr() const { return opt_.lr; }

  Adam(ParamSet<S>& params, Options opt) : params_(&params), opt_(opt) {
    for (const auto& [_, v] : params.items()) {
      m_.push_back(Mat<S>::Zero(v->value.rows(), v->value.cols()));
      v_.push_back(Mat<S>::Zero(v->value.rows(), v->value.cols()));
    }
  }

  /// Applies one update from the accumulated gradients and clears them.
  /// Returns the pre-clipping global gradient norm.
  double step() {
    ++t_;
    double sq = 0.0;
    for (const auto& [_, v] : params_->items())
      if (v->grad.size() != 0) sq += static_cast<double>(v->grad.squaredNorm());
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    const double clip = (opt_.clip_norm > 0.0 && norm > opt_.clip_norm) ? opt_.clip_norm / norm : 1.0;
    const double bc1 = 1.0 - std::pow(opt_.beta1, t_);
    const double bc2 = 1.0 - std::pow(opt_.beta2, t_);
    const S b1 = static_cast<S>(opt_.beta1), b2 = static_cast<S>(opt_.beta2);
    const S step = static_cast<S>(opt_.lr * std::sqrt(bc2) / bc1);
    const S eps = static_cast<S>(opt_.eps * std::sqrt(bc2));
    std::size_t i = 0;
    for (const auto& [_, v] : params_->items()) {
      if (v->grad.size() != 0) {
        const Mat<S> g = v->grad * static_cast<S>(clip);
        m_[i] = b1 * m_[i] + (S(1) - b1) * g;
        v_[i] = b2 * v_[i] + (S(1) - b2) * g.cwiseAbs2();
        v->value.array() -= step * m_[i].array() / (v_[i].array().sqrt() + eps);
      }
      v->zero_grad();
      ++i;
    }
    return norm;
  }

  long steps() const { return t_; }

 private:
  ParamSet<S>* params_;
  Options opt_;
  std::vector<Mat<S>> m_;
  std::vector<Mat<S>> v_;
  long t_ = 0;
};

}  // namespace diffex::nn
