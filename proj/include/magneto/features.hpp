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

// Handcrafted window statistics and frozen z-score normalization.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "magneto/binary_io.hpp"
#include "magneto/error.hpp"
#include "magneto/ingest.hpp"

namespace magneto {

using FeatureVector = std::vector<double>;

/// Per-channel statistics, in this order. The order is part of the on-disk
/// contract: support sets store vectors laid out this way.
enum class Stat : std::size_t { kMean, kStd, kMin, kMax, kMedian, kIqr, kRms, kZeroCrossings };
inline constexpr std::size_t kStatsPerChannel = 8;
inline constexpr double kStdFloor = 1e-6;
inline constexpr std::size_t kDefaultDenoiseKernel = 5;

inline constexpr std::size_t feature_dim(std::size_t channels) { return channels * kStatsPerChannel; }

/// Centered moving average with edge replication, per channel.
inline Window denoise(const Window& window, std::size_t kernel) {
  require(kernel >= 1 && kernel % 2 == 1, "denoise: kernel must be odd and >= 1");
  require(kernel <= window.width, "denoise: kernel larger than window");
  if (kernel == 1) return window;
  Window out = window;
  const auto half = static_cast<std::ptrdiff_t>(kernel / 2);
  const auto w = static_cast<std::ptrdiff_t>(window.width);
  for (std::size_t c = 0; c < window.num_channels; ++c) {
    auto in = window.channel(c);
    auto dst = out.channel(c);
    for (std::ptrdiff_t t = 0; t < w; ++t) {
      double sum = 0.0;
      for (std::ptrdiff_t k = -half; k <= half; ++k) sum += in[static_cast<std::size_t>(std::clamp(t + k, std::ptrdiff_t{0}, w - 1))];
      dst[static_cast<std::size_t>(t)] = sum / static_cast<double>(kernel);
    }
  }
  return out;
}

namespace detail {

// Linear interpolation between closest ranks, position q * (n - 1).
inline double quantile_sorted(std::span<const double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

// Sign changes of x - mean; exact zeros carry the previous sign.
inline double zero_crossings(std::span<const double> x, double mean) {
  int last_sign = 0;
  std::size_t count = 0;
  for (double v : x) {
    const double d = v - mean;
    const int s = d > 0 ? 1 : (d < 0 ? -1 : 0);
    if (s == 0) continue;
    if (last_sign != 0 && s != last_sign) ++count;
    last_sign = s;
  }
  return static_cast<double>(count);
}

}  // namespace detail

inline void channel_statistics(std::span<const double> x, std::span<double> out) {
  const auto n = static_cast<double>(x.size());
  double sum = 0.0, sum_sq = 0.0;
  for (double v : x) {
    sum += v;
    sum_sq += v * v;
  }
  const double mean = sum / n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;

  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());

  out[0] = mean;
  out[1] = std::sqrt(var);
  out[2] = sorted.front();
  out[3] = sorted.back();
  out[4] = detail::quantile_sorted(sorted, 0.5);
  out[5] = detail::quantile_sorted(sorted, 0.75) - detail::quantile_sorted(sorted, 0.25);
  out[6] = std::sqrt(sum_sq / n);
  out[7] = detail::zero_crossings(x, mean);
}

inline FeatureVector extract_features(const Window& window) {
  require(window.width >= 2, "extract_features: window needs >= 2 frames");
  FeatureVector fv(feature_dim(window.num_channels));
  for (std::size_t c = 0; c < window.num_channels; ++c) {
    channel_statistics(window.channel(c), std::span<double>(fv).subspan(c * kStatsPerChannel, kStatsPerChannel));
  }
  return fv;
}

struct Normalizer {
  std::vector<double> mean;
  std::vector<double> std;

  std::size_t dim() const { return mean.size(); }
  bool operator==(const Normalizer&) const = default;
};

/// Per-dimension mean and population std, std floored at kStdFloor.
inline Normalizer fit_normalizer(std::span<const FeatureVector> features) {
  require(!features.empty(), "fit_normalizer: empty feature list");
  const auto dim = features.front().size();
  Normalizer n;
  n.mean.assign(dim, 0.0);
  n.std.assign(dim, 0.0);
  for (const auto& fv : features) {
    require(fv.size() == dim, "fit_normalizer: inconsistent feature dimensions");
    for (std::size_t i = 0; i < dim; ++i) n.mean[i] += fv[i];
  }
  const auto count = static_cast<double>(features.size());
  for (auto& m : n.mean) m /= count;
  for (const auto& fv : features) {
    for (std::size_t i = 0; i < dim; ++i) n.std[i] += (fv[i] - n.mean[i]) * (fv[i] - n.mean[i]);
  }
  for (auto& s : n.std) s = std::max(std::sqrt(s / count), kStdFloor);
  return n;
}

inline FeatureVector normalize(std::span<const double> fv, const Normalizer& n) {
  require(fv.size() == n.dim(), "normalize: dimension mismatch (" + std::to_string(fv.size()) + " vs " +
                                    std::to_string(n.dim()) + ")");
  FeatureVector out(fv.size());
  for (std::size_t i = 0; i < fv.size(); ++i) out[i] = (fv[i] - n.mean[i]) / n.std[i];
  return out;
}

inline FeatureVector denormalize(std::span<const double> z, const Normalizer& n) {
  require(z.size() == n.dim(), "denormalize: dimension mismatch");
  FeatureVector out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] * n.std[i] + n.mean[i];
  return out;
}

/// Denoise, extract, normalize: the full per-window preprocessing.
inline FeatureVector preprocess(const Window& window, std::size_t kernel, const Normalizer& n) {
  return normalize(extract_features(denoise(window, kernel)), n);
}

// Normalizer section: u32 dim, f64 mean[dim], f64 std[dim].
inline Bytes encode_normalizer(const Normalizer& n) {
  ByteWriter w;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(n.dim()));
  w.put_array<double>(n.mean);
  w.put_array<double>(n.std);
  return std::move(w).bytes();
}

inline Normalizer decode_normalizer(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "normalizer");
  const auto dim = r.get<std::uint32_t>();
  Normalizer n;
  n.mean.resize(dim);
  n.std.resize(dim);
  r.get_array<double>(n.mean);
  r.get_array<double>(n.std);
  if (r.remaining() != 0) fail(ErrorCode::kFormat, "normalizer: trailing bytes");
  for (double s : n.std) {
    if (!(s > 0)) fail(ErrorCode::kFormat, "normalizer: non-positive std");
  }
  return n;
}

}  // namespace magneto
