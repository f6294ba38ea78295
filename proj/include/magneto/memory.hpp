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

// Activity registry and the bounded per-class exemplar store ("support
// set"), with herding selection and the MGSS snapshot format.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "magneto/binary_io.hpp"
#include "magneto/error.hpp"
#include "magneto/ingest.hpp"

namespace magneto {

inline constexpr std::size_t kDefaultCapacity = 200;

enum class Origin : std::uint8_t { kPretrained = 0, kUserAdded = 1 };

inline std::string_view to_string(Origin o) { return o == Origin::kPretrained ? "pretrained" : "user_added"; }

struct ActivityInfo {
  std::string name;
  Origin origin = Origin::kPretrained;
  // Logical creation stamp: the model version current at registration.
  std::uint32_t created_at = 0;

  bool operator==(const ActivityInfo&) const = default;
};

class ActivityRegistry {
 public:
  ActivityId add(const std::string& name, Origin origin, std::uint32_t created_at) {
    require(!name.empty(), "activity name must not be empty");
    if (find(name)) fail(ErrorCode::kConflict, "activity '" + name + "' is already registered");
    const ActivityId id{next_id_++};
    entries_.emplace(id, ActivityInfo{name, origin, created_at});
    return id;
  }

  /// Case-insensitive lookup.
  std::optional<ActivityId> find(std::string_view name) const {
    const auto key = fold(name);
    for (const auto& [id, info] : entries_) {
      if (fold(info.name) == key) return id;
    }
    return std::nullopt;
  }

  bool contains(ActivityId id) const { return entries_.contains(id); }

  const ActivityInfo& info(ActivityId id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) fail(ErrorCode::kNotFound, "unknown activity id " + std::to_string(id.value));
    return it->second;
  }
  const std::string& name(ActivityId id) const { return info(id).name; }

  std::vector<ActivityId> ids() const {
    std::vector<ActivityId> out;
    for (const auto& [id, _] : entries_) out.push_back(id);
    return out;
  }

  std::size_t size() const { return entries_.size(); }
  std::uint32_t next_id() const { return next_id_; }
  const std::map<ActivityId, ActivityInfo>& entries() const { return entries_; }

  void restore_entry(ActivityId id, ActivityInfo info) {
    if (find(info.name)) fail(ErrorCode::kFormat, "registry: duplicate name '" + info.name + "'");
    entries_[id] = std::move(info);
  }
  void restore_next_id(std::uint32_t next) { next_id_ = next; }

  bool operator==(const ActivityRegistry&) const = default;

 private:
  static std::string fold(std::string_view s) {
    std::string out(s);
    for (auto& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return out;
  }

  std::map<ActivityId, ActivityInfo> entries_;
  std::uint32_t next_id_ = 0;
};

/// Herding: greedily pick the candidate that keeps the mean of the picked
/// set closest to the mean of all candidates. Returns candidate indices in
/// pick order; ties go to the lowest index. With <= k candidates, returns
/// all indices in order.
template <typename Vec>
std::vector<std::size_t> select_exemplar_indices(std::span<const Vec> candidates, std::size_t k) {
  require(k >= 1, "select_exemplars: k must be >= 1");
  require(!candidates.empty(), "select_exemplars: empty candidate list");
  const auto n = candidates.size();
  std::vector<std::size_t> picked;
  if (n <= k) {
    for (std::size_t i = 0; i < n; ++i) picked.push_back(i);
    return picked;
  }
  const auto dim = candidates.front().size();
  std::vector<double> target(dim, 0.0);
  for (const auto& c : candidates) {
    require(c.size() == dim, "select_exemplars: inconsistent dimensions");
    for (std::size_t d = 0; d < dim; ++d) target[d] += static_cast<double>(c[d]);
  }
  for (auto& t : target) t /= static_cast<double>(n);

  std::vector<double> running(dim, 0.0);
  std::vector<bool> used(n, false);
  picked.reserve(k);
  for (std::size_t step = 1; step <= k; ++step) {
    const double m = static_cast<double>(step);
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_idx = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (used[i]) continue;
      double dist = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double diff = (running[d] + static_cast<double>(candidates[i][d])) / m - target[d];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        best_idx = i;
      }
    }
    used[best_idx] = true;
    picked.push_back(best_idx);
    for (std::size_t d = 0; d < dim; ++d) running[d] += static_cast<double>(candidates[best_idx][d]);
  }
  return picked;
}

template <typename Vec>
std::vector<Vec> select_exemplars(std::span<const Vec> candidates, std::size_t k) {
  std::vector<Vec> out;
  for (auto i : select_exemplar_indices(candidates, k)) out.push_back(candidates[i]);
  return out;
}

using Exemplar = std::vector<float>;

enum class UpdateMode { kMerge, kReplace };

class SupportSet {
 public:
  SupportSet() = default;
  SupportSet(std::size_t capacity, std::size_t feature_dim) : capacity_(capacity), feature_dim_(feature_dim) {
    require(capacity >= 1, "support set capacity must be >= 1");
    require(feature_dim >= 1, "support set feature dim must be >= 1");
  }

  ActivityRegistry& registry() { return registry_; }
  const ActivityRegistry& registry() const { return registry_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t feature_dim() const { return feature_dim_; }

  const std::vector<Exemplar>& exemplars(ActivityId id) const {
    static const std::vector<Exemplar> kEmpty;
    auto it = classes_.find(id);
    return it == classes_.end() ? kEmpty : it->second;
  }
  const std::map<ActivityId, std::vector<Exemplar>>& classes() const { return classes_; }

  std::size_t total_exemplars() const {
    std::size_t n = 0;
    for (const auto& [_, v] : classes_) n += v.size();
    return n;
  }

  /// Bytes taken by the stored vectors alone (f32 each).
  std::size_t payload_bytes() const { return total_exemplars() * feature_dim_ * sizeof(float); }

  /// merge: herding over existing + fresh; replace: herding over fresh only.
  /// Other classes are untouched.
  SupportSet updated(ActivityId id, std::span<const Exemplar> fresh, UpdateMode mode) const {
    if (!registry_.contains(id)) fail(ErrorCode::kNotFound, "update_class: activity id " + std::to_string(id.value) + " is not registered");
    require(!fresh.empty(), "update_class: no fresh exemplars");
    for (const auto& v : fresh) require(v.size() == feature_dim_, "update_class: exemplar dimension mismatch");
    std::vector<Exemplar> pool;
    if (mode == UpdateMode::kMerge) {
      const auto& existing = exemplars(id);
      pool.insert(pool.end(), existing.begin(), existing.end());
    }
    pool.insert(pool.end(), fresh.begin(), fresh.end());
    SupportSet out = *this;
    out.classes_[id] = select_exemplars<Exemplar>(pool, capacity_);
    return out;
  }

  bool operator==(const SupportSet&) const = default;

  friend Bytes snapshot(const SupportSet& ss);
  friend SupportSet restore(std::span<const std::uint8_t> bytes);

 private:
  ActivityRegistry registry_;
  std::size_t capacity_ = kDefaultCapacity;
  std::size_t feature_dim_ = 0;
  std::map<ActivityId, std::vector<Exemplar>> classes_;
};

inline SupportSet update_class(const SupportSet& ss, ActivityId id, std::span<const Exemplar> fresh, UpdateMode mode) {
  return ss.updated(id, fresh, mode);
}

inline constexpr std::uint16_t kSupportFormatVersion = 1;

/// MGSS file: "MGSS", u16 version, u32 capacity, u32 F, u32 next_id,
/// u32 registry count, entries {u32 id, u8 origin, u32 created_at, u16 len +
/// UTF-8 name}, u32 class count, per class {u32 id, u32 count, u32 F,
/// count*F f32}, CRC32.
inline Bytes snapshot(const SupportSet& ss) {
  ByteWriter w;
  w.put_magic("MGSS");
  w.put<std::uint16_t>(kSupportFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ss.capacity_));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ss.feature_dim_));
  w.put<std::uint32_t>(ss.registry_.next_id());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ss.registry_.size()));
  for (const auto& [id, info] : ss.registry_.entries()) {
    w.put<std::uint32_t>(id.value);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(info.origin));
    w.put<std::uint32_t>(info.created_at);
    w.put_string(info.name);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ss.classes_.size()));
  for (const auto& [id, vectors] : ss.classes_) {
    w.put<std::uint32_t>(id.value);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(vectors.size()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ss.feature_dim_));
    for (const auto& v : vectors) w.put_array<float>(v);
  }
  w.put_crc();
  return std::move(w).bytes();
}

inline SupportSet restore(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "support set");
  r.expect_magic("MGSS");
  const auto version = r.get<std::uint16_t>();
  if (version != kSupportFormatVersion) fail(ErrorCode::kFormat, "support set: unsupported version " + std::to_string(version));
  ByteReader::verify_trailing_crc(bytes, "support set");

  SupportSet ss;
  ss.capacity_ = r.get<std::uint32_t>();
  ss.feature_dim_ = r.get<std::uint32_t>();
  if (ss.capacity_ == 0 || ss.feature_dim_ == 0) fail(ErrorCode::kFormat, "support set: zero capacity or dimension");
  const auto next_id = r.get<std::uint32_t>();
  const auto reg_count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < reg_count; ++i) {
    const ActivityId id{r.get<std::uint32_t>()};
    const auto origin = r.get<std::uint8_t>();
    if (origin > 1) fail(ErrorCode::kFormat, "support set: bad origin flag");
    const auto created = r.get<std::uint32_t>();
    auto name = r.get_string();
    if (id.value >= next_id) fail(ErrorCode::kFormat, "support set: registry id beyond next_id");
    ss.registry_.restore_entry(id, ActivityInfo{std::move(name), static_cast<Origin>(origin), created});
  }
  ss.registry_.restore_next_id(next_id);
  const auto class_count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < class_count; ++i) {
    const ActivityId id{r.get<std::uint32_t>()};
    const auto count = r.get<std::uint32_t>();
    const auto dim = r.get<std::uint32_t>();
    if (!ss.registry_.contains(id)) fail(ErrorCode::kFormat, "support set: class " + std::to_string(id.value) + " not in registry");
    if (dim != ss.feature_dim_) fail(ErrorCode::kFormat, "support set: per-class dimension mismatch");
    if (count > ss.capacity_) fail(ErrorCode::kFormat, "support set: class exceeds capacity");
    std::vector<Exemplar> vectors(count, Exemplar(dim));
    for (auto& v : vectors) r.get_array<float>(v);
    ss.classes_[id] = std::move(vectors);
  }
  if (r.remaining() != 4) fail(ErrorCode::kFormat, "support set: trailing bytes");
  return ss;
}

}  // namespace magneto
