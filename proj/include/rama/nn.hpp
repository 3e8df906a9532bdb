#pragma once

// Layers, parameter bookkeeping and the Adam optimizer built on rama::ad.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rama/autodiff.hpp"
#include "rama/errors.hpp"
#include "rama/rng.hpp"

namespace rama::nn {

using ad::Matrix;
using ad::Var;

/// Ordered, named collection of trainable tensors. Registration order fixes the
/// checkpoint byte layout.
template <class T>
class ParameterStore {
 public:
  Var<T> add(const std::string& name, Matrix<T> init) {
    for (const auto& [n, _] : entries_)
      if (n == name) throw UsageError("duplicate parameter name: " + name);
    Var<T> v = Var<T>::leaf(std::move(init));
    entries_.emplace_back(name, v);
    return v;
  }

  const std::vector<std::pair<std::string, Var<T>>>& entries() const { return entries_; }

  std::vector<Var<T>> vars() const {
    std::vector<Var<T>> out;
    out.reserve(entries_.size());
    for (const auto& [_, v] : entries_) out.push_back(v);
    return out;
  }

  std::vector<Var<T>> vars_with_prefix(const std::string& prefix) const {
    std::vector<Var<T>> out;
    for (const auto& [n, v] : entries_)
      if (n.rfind(prefix, 0) == 0) out.push_back(v);
    return out;
  }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) n += static_cast<std::size_t>(v.value().size());
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : entries_) v.zero_grad();
  }

  void set_requires_grad(bool on) {
    for (auto& [_, v] : entries_) v.set_requires_grad(on);
  }

  /// All parameter values concatenated in registration order (column-major within each).
  Eigen::Matrix<T, Eigen::Dynamic, 1> flatten() const {
    Eigen::Matrix<T, Eigen::Dynamic, 1> out(static_cast<Eigen::Index>(size()));
    Eigen::Index at = 0;
    for (const auto& [_, v] : entries_) {
      out.segment(at, v.value().size()) = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(v.value().data(), v.value().size());
      at += v.value().size();
    }
    return out;
  }

  Eigen::Matrix<T, Eigen::Dynamic, 1> flatten_grad() const {
    Eigen::Matrix<T, Eigen::Dynamic, 1> out(static_cast<Eigen::Index>(size()));
    Eigen::Index at = 0;
    for (const auto& [_, v] : entries_) {
      const Matrix<T> g = v.grad();
      out.segment(at, g.size()) = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(g.data(), g.size());
      at += g.size();
    }
    return out;
  }

  template <class U>
  void assign_flat(const Eigen::Matrix<U, Eigen::Dynamic, 1>& flat) {
    if (static_cast<std::size_t>(flat.size()) != size()) throw UsageError("assign_flat: size mismatch");
    Eigen::Index at = 0;
    for (auto& [_, v] : entries_) {
      auto& m = v.mutable_value();
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(flat(at + i));
      at += m.size();
    }
  }

  /// Copies values from a store with identical names/shapes (possibly another scalar type).
  template <class U>
  void copy_from(const ParameterStore<U>& other) {
    const auto& src = other.entries();
    if (src.size() != entries_.size()) throw UsageError("copy_from: parameter count mismatch");
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i].first != entries_[i].first || src[i].second.rows() != entries_[i].second.rows() ||
          src[i].second.cols() != entries_[i].second.cols())
        throw UsageError("copy_from: layout mismatch at " + entries_[i].first);
      entries_[i].second.mutable_value() = src[i].second.value().template cast<T>();
    }
  }

  /// FNV-1a over the raw parameter bytes.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [_, v] : entries_) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(v.value().data());
      for (std::size_t i = 0; i < static_cast<std::size_t>(v.value().size()) * sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
      }
    }
    return h;
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> entries_;
};

template <class T>
Matrix<T> uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  Matrix<T> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<T>(rng.uniform(-bound, bound));
  return m;
}

/// Re-enables or freezes a set of parameters for the lifetime of the guard.
template <class T>
class FreezeGuard {
 public:
  explicit FreezeGuard(ParameterStore<T>& store) : store_(store) { store_.set_requires_grad(false); }
  ~FreezeGuard() { store_.set_requires_grad(true); }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ParameterStore<T>& store_;
};

// ---------------------------------------------------------------- layers

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, int in, int out, Rng& rng)
      : in_(in), out_(out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight_ = store.add(name + ".w", uniform_init<T>(in, out, bound, rng));
    bias_ = store.add(name + ".b", Matrix<T>::Zero(1, out));
  }

  Var<T> operator()(const Var<T>& x) const { return ad::add(ad::matmul(x, weight_), bias_); }

  int in() const { return in_; }
  int out() const { return out_; }
  const Var<T>& weight() const { return weight_; }
  const Var<T>& bias() const { return bias_; }

 private:
  int in_ = 0, out_ = 0;
  Var<T> weight_, bias_;
};

/// Feedforward stack: ELU after every layer except the last.
template <class T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore<T>& store, const std::string& name, int in, const std::vector<int>& hidden, int out, Rng& rng) {
    int prev = in;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      layers_.emplace_back(store, name + ".l" + std::to_string(i), prev, hidden[i], rng);
      prev = hidden[i];
    }
    layers_.emplace_back(store, name + ".out", prev, out, rng);
  }

  Var<T> operator()(Var<T> x) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      x = layers_[i](x);
      if (i + 1 < layers_.size()) x = ad::elu(x);
    }
    return x;
  }

  int out() const { return layers_.back().out(); }
  const std::vector<Linear<T>>& layers() const { return layers_; }

 private:
  std::vector<Linear<T>> layers_;
};

/// Gated recurrent unit (Cho et al. formulation, reset gate applied to the hidden
/// projection).
template <class T>
class GruCell {
 public:
  GruCell() = default;
  GruCell(ParameterStore<T>& store, const std::string& name, int in, int hidden, Rng& rng)
      : hidden_(hidden) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    wx_ = store.add(name + ".wx", uniform_init<T>(in, 3 * hidden, bound, rng));
    wh_ = store.add(name + ".wh", uniform_init<T>(hidden, 3 * hidden, bound, rng));
    bx_ = store.add(name + ".bx", Matrix<T>::Zero(1, 3 * hidden));
    bh_ = store.add(name + ".bh", Matrix<T>::Zero(1, 3 * hidden));
  }

  Var<T> operator()(const Var<T>& x, const Var<T>& h) const {
    const Var<T> gx = ad::add(ad::matmul(x, wx_), bx_);
    const Var<T> gh = ad::add(ad::matmul(h, wh_), bh_);
    const int n = hidden_;
    const Var<T> r = ad::sigmoid(ad::add(ad::slice_cols(gx, 0, n), ad::slice_cols(gh, 0, n)));
    const Var<T> z = ad::sigmoid(ad::add(ad::slice_cols(gx, n, n), ad::slice_cols(gh, n, n)));
    const Var<T> cand = ad::tanh(ad::add(ad::slice_cols(gx, 2 * n, n), ad::mul(r, ad::slice_cols(gh, 2 * n, n))));
    // h' = (1 - z) * cand + z * h
    return ad::add(cand, ad::mul(z, ad::sub(h, cand)));
  }

  int hidden() const { return hidden_; }

 private:
  int hidden_ = 0;
  Var<T> wx_, wh_, bx_, bh_;
};

/// Two strided convolutions with ELU, flattened.
template <class T>
class ConvEncoder {
 public:
  ConvEncoder() = default;
  ConvEncoder(ParameterStore<T>& store, const std::string& name, int channels, int height, int width,
              std::pair<int, int> depths, Rng& rng) {
    first_ = ad::ConvShape{channels, height, width, depths.first, 4, 2, 1};
    second_ = ad::ConvShape{depths.first, first_.out_height(), first_.out_width(), depths.second, 4, 2, 1};
    if (second_.out_height() < 1 || second_.out_width() < 1) throw ConfigError("image too small for conv encoder");
    const double b1 = 1.0 / std::sqrt(static_cast<double>(first_.patch()));
    const double b2 = 1.0 / std::sqrt(static_cast<double>(second_.patch()));
    w1_ = store.add(name + ".c0.w", uniform_init<T>(first_.out_channels, first_.patch(), b1, rng));
    b1_ = store.add(name + ".c0.b", Matrix<T>::Zero(1, first_.out_channels));
    w2_ = store.add(name + ".c1.w", uniform_init<T>(second_.out_channels, second_.patch(), b2, rng));
    b2_ = store.add(name + ".c1.b", Matrix<T>::Zero(1, second_.out_channels));
  }

  Var<T> operator()(const Var<T>& x) const {
    return ad::elu(ad::conv2d(ad::elu(ad::conv2d(x, w1_, b1_, first_)), w2_, b2_, second_));
  }

  int out() const { return second_.out_size(); }

 private:
  ad::ConvShape first_, second_;
  Var<T> w1_, b1_, w2_, b2_;
};

// ---------------------------------------------------------------- optimizer

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 100.0;  // global gradient-norm clip; <= 0 disables
};

template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Var<T>> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
      m_.push_back(Matrix<T>::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix<T>::Zero(p.rows(), p.cols()));
    }
  }

  /// Applies one update from the accumulated gradients. Returns the pre-clip norm.
  double step() {
    double sq = 0.0;
    for (const auto& p : params_)
      if (p.has_grad()) sq += static_cast<double>(p.node()->grad.squaredNorm());
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    const double clip = (opts_.clip_norm > 0.0 && norm > opts_.clip_norm) ? opts_.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    const T lr = static_cast<T>(opts_.lr);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad()) continue;
      const Matrix<T> g = params_[i].node()->grad * static_cast<T>(clip);
      m_[i] = static_cast<T>(opts_.beta1) * m_[i] + static_cast<T>(1.0 - opts_.beta1) * g;
      v_[i] = static_cast<T>(opts_.beta2) * v_[i] + static_cast<T>(1.0 - opts_.beta2) * g.cwiseProduct(g);
      const auto mhat = m_[i].array() / static_cast<T>(bc1);
      const auto vhat = v_[i].array() / static_cast<T>(bc2);
      params_[i].mutable_value().array() -= lr * mhat / (vhat.sqrt() + static_cast<T>(opts_.eps));
    }
    return norm;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void set_lr(double lr) { opts_.lr = lr; }
  const AdamOptions& options() const { return opts_; }
  std::int64_t steps() const { return t_; }

 private:
  std::vector<Var<T>> params_;
  std::vector<Matrix<T>> m_, v_;
  AdamOptions opts_;
  std::int64_t t_ = 0;
};

}  // namespace rama::nn
