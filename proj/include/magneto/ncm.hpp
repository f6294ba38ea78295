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

// Nearest-class-mean classification over unit-norm embeddings.

#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "magneto/error.hpp"
#include "magneto/ingest.hpp"
#include "magneto/memory.hpp"
#include "magneto/tensor_nn.hpp"

namespace magneto {

inline constexpr double kDefaultMarginThreshold = 0.05;

struct Prototype {
  ActivityId cls;
  std::vector<float> vector;
  std::size_t support_count = 0;

  bool operator==(const Prototype&) const = default;
};

struct Prediction {
  ActivityId label;
  double score = 0.0;
  double margin = 0.0;
  std::map<ActivityId, double> per_class_scores;

  bool uncertain(double threshold = kDefaultMarginThreshold) const { return margin < threshold; }
};

inline nn::Matrix<float> stack_rows(std::span<const std::vector<float>> rows, std::size_t dim) {
  nn::Matrix<float> m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i].size() == dim, "stack_rows: dimension mismatch");
    for (std::size_t d = 0; d < dim; ++d) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = rows[i][d];
  }
  return m;
}

/// Renormalized mean of the embeddings (rows of `embeddings`).
inline std::vector<float> prototype_of(const nn::Matrix<float>& embeddings) {
  require(embeddings.rows() >= 1, "prototype_of: no embeddings");
  Eigen::Matrix<double, 1, Eigen::Dynamic> mean = embeddings.cast<double>().colwise().mean();
  const double norm = mean.norm();
  std::vector<float> out(static_cast<std::size_t>(mean.cols()), 0.0f);
  if (norm < nn::kNormFloor) return out;
  for (Eigen::Index d = 0; d < mean.cols(); ++d) out[static_cast<std::size_t>(d)] = static_cast<float>(mean(d) / norm);
  return out;
}

/// One prototype per registered class, in ActivityId order.
inline std::vector<Prototype> compute_prototypes(const SupportSet& ss, const nn::ModelParams<float>& params) {
  std::vector<Prototype> out;
  for (const auto id : ss.registry().ids()) {
    const auto& ex = ss.exemplars(id);
    if (ex.empty()) {
      fail(ErrorCode::kInvalidArgument, "compute_prototypes: class '" + ss.registry().name(id) + "' has no support samples");
    }
    const auto emb = nn::embed(params, stack_rows(ex, ss.feature_dim()));
    out.push_back(Prototype{id, prototype_of(emb), ex.size()});
  }
  return out;
}

inline double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

/// Argmax cosine similarity; ties go to the lowest ActivityId. Margin is
/// top-1 minus top-2 score (0 with a single class).
inline Prediction classify(std::span<const float> embedding, std::span<const Prototype> prototypes) {
  if (prototypes.empty()) fail(ErrorCode::kInvalidArgument, "classify: no prototypes");
  Prediction p;
  double best = -std::numeric_limits<double>::infinity();
  double second = -std::numeric_limits<double>::infinity();
  bool have_best = false;
  for (const auto& proto : prototypes) {
    require(proto.vector.size() == embedding.size(), "classify: embedding/prototype dimension mismatch");
    const double s = dot(embedding, proto.vector);
    p.per_class_scores[proto.cls] = s;
  }
  // per_class_scores iterates in id order, so strict > keeps the lowest id on ties.
  for (const auto& [id, s] : p.per_class_scores) {
    if (!have_best || s > best) {
      second = best;
      best = s;
      p.label = id;
      have_best = true;
    } else if (s > second) {
      second = s;
    }
  }
  p.score = best;
  p.margin = p.per_class_scores.size() > 1 ? best - second : 0.0;
  return p;
}

/// Argmin Euclidean distance with the same tie rule; for unit vectors this
/// must agree with classify().
inline ActivityId classify_euclidean(std::span<const float> embedding, std::span<const Prototype> prototypes) {
  if (prototypes.empty()) fail(ErrorCode::kInvalidArgument, "classify: no prototypes");
  std::map<ActivityId, double> dist;
  for (const auto& proto : prototypes) {
    double d = 0.0;
    for (std::size_t i = 0; i < embedding.size(); ++i) {
      const double diff = static_cast<double>(embedding[i]) - static_cast<double>(proto.vector[i]);
      d += diff * diff;
    }
    dist[proto.cls] = d;
  }
  auto best = dist.begin();
  for (auto it = dist.begin(); it != dist.end(); ++it) {
    if (it->second < best->second) best = it;
  }
  return best->first;
}

}  // namespace magneto
