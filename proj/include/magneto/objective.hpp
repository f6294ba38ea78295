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

// Supervised contrastive loss, embedding distillation, and their weighted
// sum. All gradients are with respect to the (already normalized)
// embeddings; the normalization Jacobian is applied in nn::backward.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "magneto/error.hpp"
#include "magneto/tensor_nn.hpp"

namespace magneto::objective {

using nn::Matrix;

inline constexpr double kDefaultTemperature = 0.1;
inline constexpr double kDefaultDistillWeight = 1.0;

template <typename T>
struct LossAndGrad {
  T loss{};
  Matrix<T> grad;
};

template <typename T>
struct LossReport {
  T total{};
  T contrastive{};
  T distillation{};
  Matrix<T> grad_wrt_embeddings;
};

/// Multi-positive supervised contrastive loss. For anchor i with positives
/// P(i) (same label, excluding i):
///   l_i = -1/|P(i)| sum_p log( exp(z_i.z_p/tau) / sum_{a != i} exp(z_i.z_a/tau) )
/// averaged over anchors that have at least one positive.
template <typename T>
LossAndGrad<T> supcon_loss(const Matrix<T>& emb, std::span<const std::uint32_t> labels, T temperature) {
  const auto B = emb.rows();
  if (!(temperature > T(0))) fail(ErrorCode::kInvalidArgument, "supcon_loss: temperature must be > 0");
  require(B >= 2, "supcon_loss: batch needs >= 2 rows");
  require(static_cast<std::size_t>(B) == labels.size(), "supcon_loss: label count does not match batch");

  const Matrix<T> sim = (emb * emb.transpose()) / temperature;
  // coeff(i, j): d loss / d sim(i, j) accumulated per anchor i.
  Matrix<T> coeff = Matrix<T>::Zero(B, B);
  T total = 0;
  Eigen::Index anchors = 0;
  std::vector<T> prob(static_cast<std::size_t>(B));
  for (Eigen::Index i = 0; i < B; ++i) {
    Eigen::Index positives = 0;
    for (Eigen::Index j = 0; j < B; ++j) {
      if (j != i && labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) ++positives;
    }
    if (positives == 0) continue;
    ++anchors;

    T max_sim = -std::numeric_limits<T>::infinity();
    for (Eigen::Index a = 0; a < B; ++a) {
      if (a != i) max_sim = std::max(max_sim, sim(i, a));
    }
    T denom = 0;
    for (Eigen::Index a = 0; a < B; ++a) {
      if (a == i) continue;
      prob[static_cast<std::size_t>(a)] = std::exp(sim(i, a) - max_sim);
      denom += prob[static_cast<std::size_t>(a)];
    }
    const T log_denom = max_sim + std::log(denom);
    const T inv_p = T(1) / static_cast<T>(positives);
    T anchor_loss = 0;
    for (Eigen::Index j = 0; j < B; ++j) {
      if (j == i) continue;
      const bool positive = labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)];
      if (positive) anchor_loss -= inv_p * (sim(i, j) - log_denom);
      coeff(i, j) = prob[static_cast<std::size_t>(j)] / denom - (positive ? inv_p : T(0));
    }
    total += anchor_loss;
  }
  if (anchors == 0) fail(ErrorCode::kInvalidArgument, "supcon_loss: degenerate batch (no anchor has a positive)");

  const T scale = T(1) / (static_cast<T>(anchors) * temperature);
  coeff *= scale;
  // sim(i,j) = z_i.z_j / tau touches both z_i and z_j.
  LossAndGrad<T> out;
  out.loss = total / static_cast<T>(anchors);
  out.grad = coeff * emb + coeff.transpose() * emb;
  return out;
}

/// Mean squared Euclidean distance between paired rows; `teacher` is
/// treated as a constant.
template <typename T>
LossAndGrad<T> distill_loss(const Matrix<T>& student, const Matrix<T>& teacher) {
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols()) {
    fail(ErrorCode::kInvalidArgument, "distill_loss: shape mismatch");
  }
  require(student.rows() >= 1, "distill_loss: empty batch");
  const T B = static_cast<T>(student.rows());
  const Matrix<T> diff = student - teacher;
  LossAndGrad<T> out;
  out.loss = diff.squaredNorm() / B;
  out.grad = (T(2) / B) * diff;
  return out;
}

/// Frozen old-model embeddings for a subset of batch rows.
template <typename T>
struct DistillTarget {
  std::vector<Eigen::Index> rows;
  Matrix<T> embeddings;  // one row per entry of `rows`
};

/// contrastive + weight * distillation. The distillation term only covers
/// rows listed in `target`; with no target (or weight 0) this is pure
/// supervised contrastive.
template <typename T>
LossReport<T> joint_loss(const Matrix<T>& emb, std::span<const std::uint32_t> labels, const DistillTarget<T>* target,
                         T temperature, T distill_weight) {
  require(distill_weight >= T(0), "joint_loss: distillation weight must be >= 0");
  auto con = supcon_loss(emb, labels, temperature);
  LossReport<T> report;
  report.contrastive = con.loss;
  report.grad_wrt_embeddings = std::move(con.grad);
  report.distillation = 0;
  if (target != nullptr && !target->rows.empty()) {
    require(static_cast<std::size_t>(target->embeddings.rows()) == target->rows.size(),
            "joint_loss: distillation target row count mismatch");
    Matrix<T> student(static_cast<Eigen::Index>(target->rows.size()), emb.cols());
    for (std::size_t k = 0; k < target->rows.size(); ++k) {
      const auto r = target->rows[k];
      require(r >= 0 && r < emb.rows(), "joint_loss: distillation row out of range");
      student.row(static_cast<Eigen::Index>(k)) = emb.row(r);
    }
    auto dis = distill_loss(student, target->embeddings);
    report.distillation = dis.loss;
    if (distill_weight > T(0)) {
      for (std::size_t k = 0; k < target->rows.size(); ++k) {
        report.grad_wrt_embeddings.row(target->rows[k]) += distill_weight * dis.grad.row(static_cast<Eigen::Index>(k));
      }
    }
  }
  report.total = report.contrastive + distill_weight * report.distillation;
  return report;
}

}  // namespace magneto::objective
