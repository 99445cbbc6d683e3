#pragma once

// Dense building blocks with explicit backward passes. Activations are row
// matrices (one row per query); weights are (out, in) row-major tensors.

#include "unibev/features.hpp"
#include "unibev/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <vector>

namespace unibev {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t) {
  return MatMap<T>(t.ptr(), static_cast<Eigen::Index>(t.shape.at(0)),
                   static_cast<Eigen::Index>(t.size() / std::max<std::size_t>(t.shape.at(0), 1)));
}

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatMap<T>(t.ptr(), static_cast<Eigen::Index>(t.shape.at(0)),
                        static_cast<Eigen::Index>(t.size() / std::max<std::size_t>(t.shape.at(0), 1)));
}

template <typename T>
VecMap<T> as_vector(Tensor<T>& t) {
  return VecMap<T>(t.ptr(), static_cast<Eigen::Index>(t.size()));
}

template <typename T>
ConstVecMap<T> as_vector(const Tensor<T>& t) {
  return ConstVecMap<T>(t.ptr(), static_cast<Eigen::Index>(t.size()));
}

/// Query grids are feature maps (x cells, y cells, C); rows of the matrix view
/// follow the x-major cell order.
template <typename T>
MatMap<T> as_matrix(FeatureMap<T>& m) {
  return MatMap<T>(m.data.data(), static_cast<Eigen::Index>(m.height) * m.width, m.channels);
}

template <typename T>
ConstMatMap<T> as_matrix(const FeatureMap<T>& m) {
  return ConstMatMap<T>(m.data.data(), static_cast<Eigen::Index>(m.height) * m.width, m.channels);
}

template <typename T>
struct Linear {
  Tensor<T> weight;  // (out, in)
  Tensor<T> bias;    // (out)

  static Linear zeros(int in, int out) {
    return {Tensor<T>({static_cast<std::size_t>(out), static_cast<std::size_t>(in)}),
            Tensor<T>({static_cast<std::size_t>(out)})};
  }
};

/// Y = X W^T + b
template <typename T>
RowMat<T> linear_forward(const RowMat<T>& x, const Linear<T>& p) {
  RowMat<T> y = x * as_matrix(p.weight).transpose();
  y.rowwise() += as_vector(p.bias).transpose();
  return y;
}

/// Accumulates dW, db and (if given) dX.
template <typename T>
void linear_backward(const RowMat<T>& x, const Linear<T>& p, const RowMat<T>& dy, Linear<T>& grad, RowMat<T>* dx) {
  as_matrix(grad.weight).noalias() += dy.transpose() * x;
  as_vector(grad.bias) += dy.colwise().sum().transpose();
  if (dx) dx->noalias() += dy * as_matrix(p.weight);
}

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;

  static LayerNormParams zeros(int c) {
    return {Tensor<T>({static_cast<std::size_t>(c)}), Tensor<T>({static_cast<std::size_t>(c)})};
  }
  static LayerNormParams identity(int c) {
    return {Tensor<T>({static_cast<std::size_t>(c)}, T(1)), Tensor<T>({static_cast<std::size_t>(c)})};
  }
};

inline constexpr double kLayerNormEpsilon = 1e-5;

template <typename T>
struct LayerNormCache {
  RowMat<T> xhat;
  std::vector<T> inv_std;
};

template <typename T>
RowMat<T> layer_norm_forward(const RowMat<T>& x, const LayerNormParams<T>& p, LayerNormCache<T>* cache) {
  const Eigen::Index n = x.rows(), c = x.cols();
  RowMat<T> xhat(n, c);
  std::vector<T> inv(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    inv[static_cast<std::size_t>(i)] = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEpsilon));
    xhat.row(i) = (x.row(i).array() - mean) * inv[static_cast<std::size_t>(i)];
  }
  RowMat<T> y = (xhat.array().rowwise() * as_vector(p.gamma).transpose().array()).matrix();
  y.rowwise() += as_vector(p.beta).transpose();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv);
  }
  return y;
}

/// Returns dX; accumulates d(gamma), d(beta).
template <typename T>
RowMat<T> layer_norm_backward(const LayerNormCache<T>& cache, const LayerNormParams<T>& p, const RowMat<T>& dy,
                              LayerNormParams<T>& grad) {
  const Eigen::Index n = dy.rows(), c = dy.cols();
  as_vector(grad.gamma) += (dy.array() * cache.xhat.array()).colwise().sum().transpose().matrix();
  as_vector(grad.beta) += dy.colwise().sum().transpose();
  RowMat<T> dx(n, c);
  const auto g = as_vector(p.gamma).transpose().array();
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVec<T> dxh = (dy.row(i).array() * g).matrix();
    const T m1 = dxh.mean();
    const T m2 = (dxh.array() * cache.xhat.row(i).array()).mean();
    dx.row(i) = ((dxh.array() - m1 - cache.xhat.row(i).array() * m2) * cache.inv_std[static_cast<std::size_t>(i)])
                    .matrix();
  }
  return dx;
}

template <typename T>
void relu_inplace(RowMat<T>& m) {
  m = m.cwiseMax(T(0));
}

/// Zeroes gradient entries where the forward activation was not positive.
template <typename T>
void relu_backward_inplace(const RowMat<T>& activated, RowMat<T>& grad) {
  grad = (activated.array() > T(0)).select(grad, T(0));
}

/// In-place softmax over a span; returns false (and leaves zeros) if empty.
template <typename T>
bool softmax_inplace(std::span<T> logits) {
  if (logits.empty()) return false;
  const T mx = *std::max_element(logits.begin(), logits.end());
  T sum = T(0);
  for (T& v : logits) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (T& v : logits) v /= sum;
  return true;
}

/// uniform(-s, s) with s = 1 / sqrt(fan_in).
template <typename T>
void init_uniform_fan_in(Tensor<T>& t, int fan_in, std::mt19937_64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> d(-s, s);
  for (T& v : t.data) v = static_cast<T>(d(rng));
}

template <typename T>
void init_normal(Tensor<T>& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, stddev);
  for (T& v : t.data) v = static_cast<T>(d(rng));
}

}  // namespace unibev
