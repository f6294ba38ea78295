/* Copyright 2026 The Magneto Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Fully connected embedding network: ReLU hidden layers, L2-normalized
// output, exact reverse-mode gradients, Adam, and the MGNT model file.
//
// Templated on the scalar type. Production code runs in float; gradient
// checks instantiate double.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "magneto/binary_io.hpp"
#include "magneto/error.hpp"

namespace magneto::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

inline constexpr double kNormFloor = 1e-12;

inline std::vector<std::size_t> default_layer_dims() { return {80, 1024, 512, 128, 64, 128}; }

/// Weights are stored input-major: layer l maps a row vector of width
/// dims[l] through W (dims[l] x dims[l+1]) plus bias.
template <typename T>
struct ModelParams {
  std::vector<std::size_t> dims;
  std::vector<Matrix<T>> weights;
  std::vector<RowVector<T>> biases;
  // Bumped when a retraining run completes; persisted by the bundle.
  std::uint32_t version = 0;
  // Bumped by every optimizer step; lets backward() reject stale caches.
  std::uint64_t revision = 0;

  std::size_t num_layers() const { return weights.size(); }
  std::size_t input_dim() const { return dims.front(); }
  std::size_t output_dim() const { return dims.back(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) n += dims[l] * dims[l + 1] + dims[l + 1];
    return n;
  }

  /// Compares shapes and values; version and revision are bookkeeping.
  bool same_parameters(const ModelParams& other) const {
    if (dims != other.dims) return false;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l] != other.weights[l] || biases[l] != other.biases[l]) return false;
    }
    return true;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.dims = dims;
    out.version = version;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.weights.push_back(weights[l].template cast<U>());
      out.biases.push_back(biases[l].template cast<U>());
    }
    return out;
  }
};

template <typename T>
struct Gradients {
  std::vector<Matrix<T>> weights;
  std::vector<RowVector<T>> biases;

  bool all_finite() const {
    for (const auto& w : weights) {
      if (!w.allFinite()) return false;
    }
    for (const auto& b : biases) {
      if (!b.allFinite()) return false;
    }
    return true;
  }
};

/// Glorot-uniform weights, zero biases; deterministic in the seed.
template <typename T = float>
ModelParams<T> init_network(std::uint64_t seed, const std::vector<std::size_t>& dims = default_layer_dims()) {
  require(dims.size() >= 2, "init_network: need at least 2 layer dims");
  for (auto d : dims) require(d >= 1, "init_network: layer dims must be >= 1");
  ModelParams<T> p;
  p.dims = dims;
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const double limit = std::sqrt(6.0 / static_cast<double>(dims[l] + dims[l + 1]));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Matrix<T> w(dims[l], dims[l + 1]);
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = static_cast<T>(dist(rng));
    }
    p.weights.push_back(std::move(w));
    p.biases.push_back(RowVector<T>::Zero(static_cast<Eigen::Index>(dims[l + 1])));
  }
  return p;
}

template <typename T>
struct ForwardCache {
  const ModelParams<T>* params = nullptr;
  std::uint64_t revision = 0;
  // inputs[l] is the input to layer l (inputs[0] is the batch itself).
  std::vector<Matrix<T>> inputs;
  // Pre-activation of every layer; the last one is the pre-normalization output.
  std::vector<Matrix<T>> preacts;
  std::vector<T> norms;
  std::vector<bool> degenerate;
};

template <typename T>
struct ForwardResult {
  Matrix<T> embeddings;
  ForwardCache<T> cache;
};

namespace detail {

template <typename T>
void check_input(const ModelParams<T>& params, Eigen::Index cols) {
  if (static_cast<std::size_t>(cols) != params.input_dim()) {
    fail(ErrorCode::kInvalidArgument, "forward: input width " + std::to_string(cols) + " does not match layer_dims[0] = " +
                                          std::to_string(params.input_dim()));
  }
}

}  // namespace detail

/// Rows are L2-normalized at the output. A row whose pre-normalization norm
/// is below kNormFloor is returned as zeros and flagged degenerate.
template <typename T>
ForwardResult<T> forward(const ModelParams<T>& params, const Matrix<T>& inputs) {
  detail::check_input(params, inputs.cols());
  ForwardResult<T> r;
  auto& c = r.cache;
  c.params = &params;
  c.revision = params.revision;
  const auto L = params.num_layers();
  c.inputs.reserve(L);
  c.preacts.reserve(L);
  Matrix<T> act = inputs;
  for (std::size_t l = 0; l < L; ++l) {
    Matrix<T> z = act * params.weights[l];
    z.rowwise() += params.biases[l];
    c.inputs.push_back(std::move(act));
    if (l + 1 < L) act = z.cwiseMax(T(0));
    c.preacts.push_back(std::move(z));
  }
  const Matrix<T>& out = c.preacts.back();
  r.embeddings.resize(out.rows(), out.cols());
  c.norms.resize(static_cast<std::size_t>(out.rows()));
  c.degenerate.resize(static_cast<std::size_t>(out.rows()));
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const T norm = out.row(i).norm();
    const auto ui = static_cast<std::size_t>(i);
    c.norms[ui] = norm;
    c.degenerate[ui] = !(norm >= T(kNormFloor));
    if (c.degenerate[ui]) {
      r.embeddings.row(i).setZero();
    } else {
      r.embeddings.row(i) = out.row(i) / norm;
    }
  }
  return r;
}

/// Embeddings only, without keeping the activation cache.
template <typename T>
Matrix<T> embed(const ModelParams<T>& params, const Matrix<T>& inputs) {
  detail::check_input(params, inputs.cols());
  Matrix<T> act = inputs;
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    Matrix<T> z = act * params.weights[l];
    z.rowwise() += params.biases[l];
    act = (l + 1 < params.num_layers()) ? Matrix<T>(z.cwiseMax(T(0))) : std::move(z);
  }
  for (Eigen::Index i = 0; i < act.rows(); ++i) {
    const T norm = act.row(i).norm();
    if (norm >= T(kNormFloor)) {
      act.row(i) /= norm;
    } else {
      act.row(i).setZero();
    }
  }
  return act;
}

/// Reverse-mode pass. Through the normalization y = z/|z| the gradient is
/// (g - y (y.g)) / |z|; degenerate rows pass no gradient.
template <typename T>
Gradients<T> backward(const ModelParams<T>& params, const ForwardCache<T>& cache,
                      const std::type_identity_t<Matrix<T>>& grad_embeddings) {
  if (cache.params != &params || cache.revision != params.revision || cache.preacts.size() != params.num_layers()) {
    fail(ErrorCode::kInvalidArgument, "backward: stale or mismatched forward cache");
  }
  const Matrix<T>& out = cache.preacts.back();
  if (grad_embeddings.rows() != out.rows() || grad_embeddings.cols() != out.cols()) {
    fail(ErrorCode::kInvalidArgument, "backward: upstream gradient shape does not match cached batch");
  }
  Matrix<T> delta(out.rows(), out.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const auto ui = static_cast<std::size_t>(i);
    if (cache.degenerate[ui]) {
      delta.row(i).setZero();
      continue;
    }
    const T norm = cache.norms[ui];
    const RowVector<T> y = out.row(i) / norm;
    const T proj = y.dot(grad_embeddings.row(i));
    delta.row(i) = (grad_embeddings.row(i) - proj * y) / norm;
  }

  const auto L = params.num_layers();
  Gradients<T> g;
  g.weights.resize(L);
  g.biases.resize(L);
  for (std::size_t l = L; l-- > 0;) {
    g.weights[l] = cache.inputs[l].transpose() * delta;
    g.biases[l] = delta.colwise().sum();
    if (l == 0) break;
    Matrix<T> upstream = delta * params.weights[l].transpose();
    // ReLU subgradient is 0 at 0.
    delta = upstream.cwiseProduct((cache.preacts[l - 1].array() > T(0)).template cast<T>().matrix());
  }
  return g;
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Matrix<T>> m_w, v_w;
  std::vector<RowVector<T>> m_b, v_b;
  std::uint64_t step = 0;
  AdamConfig config{};

  static AdamState zeros_like(const ModelParams<T>& p, AdamConfig cfg = {}) {
    AdamState s;
    s.config = cfg;
    for (std::size_t l = 0; l < p.num_layers(); ++l) {
      s.m_w.push_back(Matrix<T>::Zero(p.weights[l].rows(), p.weights[l].cols()));
      s.v_w.push_back(Matrix<T>::Zero(p.weights[l].rows(), p.weights[l].cols()));
      s.m_b.push_back(RowVector<T>::Zero(p.biases[l].cols()));
      s.v_b.push_back(RowVector<T>::Zero(p.biases[l].cols()));
    }
    return s;
  }
};

namespace detail {

template <typename Param, typename Moment>
void adam_update(Param& param, const Param& grad, Moment& m, Moment& v, double b1, double b2, double eps,
                 double lr, double bc1, double bc2) {
  using T = typename Param::Scalar;
  m = T(b1) * m + T(1 - b1) * grad;
  v = T(b2) * v + T(1 - b2) * grad.cwiseProduct(grad);
  const T step = T(lr / bc1);
  const T vscale = T(1.0 / bc2);
  param.array() -= step * m.array() / ((v.array() * vscale).sqrt() + T(eps));
}

}  // namespace detail

/// One Adam step. Throws (leaving params and state untouched) if any
/// gradient is non-finite. Does not change params.version.
template <typename T>
void optimizer_step(ModelParams<T>& params, const Gradients<T>& grads, AdamState<T>& state, double lr) {
  require(lr > 0, "optimizer_step: lr must be > 0");
  require(grads.weights.size() == params.num_layers() && grads.biases.size() == params.num_layers() &&
              state.m_w.size() == params.num_layers(),
          "optimizer_step: shape mismatch");
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    require(grads.weights[l].rows() == params.weights[l].rows() && grads.weights[l].cols() == params.weights[l].cols() &&
                grads.biases[l].cols() == params.biases[l].cols(),
            "optimizer_step: gradient shape mismatch at layer " + std::to_string(l));
  }
  if (!grads.all_finite()) fail(ErrorCode::kTraining, "optimizer_step: non-finite gradient");

  const auto& cfg = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    detail::adam_update(params.weights[l], grads.weights[l], state.m_w[l], state.v_w[l], cfg.beta1, cfg.beta2,
                        cfg.epsilon, lr, bc1, bc2);
    detail::adam_update(params.biases[l], grads.biases[l], state.m_b[l], state.v_b[l], cfg.beta1, cfg.beta2,
                        cfg.epsilon, lr, bc1, bc2);
  }
  params.revision += 1;
}

inline constexpr std::uint16_t kModelFormatVersion = 1;

/// MGNT file: "MGNT", u16 format version, u16 layer count L, u32 dims[L+1],
/// then per layer f32 weights (dims[l] x dims[l+1], row-major) and f32
/// biases (dims[l+1]), then CRC32 of everything before it.
inline Bytes serialize(const ModelParams<float>& params) {
  ByteWriter w;
  w.put_magic("MGNT");
  w.put<std::uint16_t>(kModelFormatVersion);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(params.num_layers()));
  for (auto d : params.dims) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    w.put_array<float>(std::span<const float>(params.weights[l].data(), static_cast<std::size_t>(params.weights[l].size())));
    w.put_array<float>(std::span<const float>(params.biases[l].data(), static_cast<std::size_t>(params.biases[l].size())));
  }
  w.put_crc();
  return std::move(w).bytes();
}

inline ModelParams<float> deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "model");
  r.expect_magic("MGNT");
  const auto fmt = r.get<std::uint16_t>();
  if (fmt != kModelFormatVersion) {
    fail(ErrorCode::kFormat, "model: unsupported format version " + std::to_string(fmt));
  }
  const auto layers = r.get<std::uint16_t>();
  if (layers < 1) fail(ErrorCode::kFormat, "model: zero layers");
  ModelParams<float> p;
  std::size_t expected = 4 + 2 + 2 + 4 * (static_cast<std::size_t>(layers) + 1) + 4;
  for (std::size_t i = 0; i <= layers; ++i) {
    const auto d = r.get<std::uint32_t>();
    if (d == 0) fail(ErrorCode::kFormat, "model: zero layer width");
    p.dims.push_back(d);
  }
  expected += 4 * p.parameter_count();
  if (bytes.size() < expected) {
    fail(ErrorCode::kTruncated, "model: truncated, " + std::to_string(bytes.size()) + " of " + std::to_string(expected) + " bytes");
  }
  if (bytes.size() > expected) fail(ErrorCode::kFormat, "model: trailing bytes");
  ByteReader::verify_trailing_crc(bytes, "model");
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix<float> w(p.dims[l], p.dims[l + 1]);
    RowVector<float> b(static_cast<Eigen::Index>(p.dims[l + 1]));
    r.get_array<float>(std::span<float>(w.data(), static_cast<std::size_t>(w.size())));
    r.get_array<float>(std::span<float>(b.data(), static_cast<std::size_t>(b.size())));
    if (!w.allFinite() || !b.allFinite()) fail(ErrorCode::kFormat, "model: non-finite parameter");
    p.weights.push_back(std::move(w));
    p.biases.push_back(std::move(b));
  }
  return p;
}

}  // namespace magneto::nn
