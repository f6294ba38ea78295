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

// Lifecycle: offline pretraining, on-device class addition and
// calibration, evaluation, forgetting reports, and the MGBD bundle file.
//
// All operations take bundles by const reference and return new ones, so a
// failure at any point leaves the caller's bundle untouched.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "magneto/binary_io.hpp"
#include "magneto/error.hpp"
#include "magneto/features.hpp"
#include "magneto/ingest.hpp"
#include "magneto/memory.hpp"
#include "magneto/ncm.hpp"
#include "magneto/objective.hpp"
#include "magneto/tensor_nn.hpp"

namespace magneto {

using json = nlohmann::json;

inline constexpr std::size_t kBundleBudgetBytes = 5 * 1024 * 1024;

struct TrainConfig {
  std::size_t pretrain_epochs = 30;
  std::size_t incremental_epochs = 15;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double temperature = objective::kDefaultTemperature;
  double distill_weight = objective::kDefaultDistillWeight;
  std::uint64_t seed = 42;
  std::size_t channels = kDefaultChannels;
  std::size_t window_len = kDefaultWindowLen;
  std::size_t hop = 60;
  std::size_t kernel = kDefaultDenoiseKernel;
  std::size_t capacity = kDefaultCapacity;
  double margin_threshold = kDefaultMarginThreshold;
  std::size_t min_recording_windows = 30;
  // Widths after the input layer; the input width is channels * 8.
  std::vector<std::size_t> hidden_dims = {1024, 512, 128, 64, 128};

  void validate() const {
    require(pretrain_epochs >= 1 && incremental_epochs >= 1, "config: epochs must be >= 1");
    require(batch_size >= 2, "config: batch_size must be >= 2");
    require(lr > 0 && std::isfinite(lr), "config: lr must be > 0");
    require(temperature > 0, "config: temperature must be > 0");
    require(distill_weight >= 0, "config: lambda must be >= 0");
    require(channels >= 1, "config: channels must be >= 1");
    require(window_len >= 2, "config: window_len must be >= 2");
    require(hop >= 1 && hop <= window_len, "config: hop must be in [1, window_len]");
    require(kernel >= 1 && kernel % 2 == 1 && kernel <= window_len, "config: kernel must be odd and <= window_len");
    require(capacity >= 1, "config: K must be >= 1");
    require(margin_threshold >= 0, "config: margin threshold must be >= 0");
    require(!hidden_dims.empty(), "config: hidden_dims must not be empty");
    for (auto d : hidden_dims) require(d >= 1, "config: hidden dims must be >= 1");
  }

  std::size_t feature_dim() const { return magneto::feature_dim(channels); }

  std::vector<std::size_t> layer_dims() const {
    std::vector<std::size_t> dims{feature_dim()};
    dims.insert(dims.end(), hidden_dims.begin(), hidden_dims.end());
    return dims;
  }

  bool operator==(const TrainConfig&) const = default;
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"pretrain_epochs", c.pretrain_epochs},
           {"incremental_epochs", c.incremental_epochs},
           {"batch_size", c.batch_size},
           {"lr", c.lr},
           {"temperature", c.temperature},
           {"lambda", c.distill_weight},
           {"seed", c.seed},
           {"channels", c.channels},
           {"window_len", c.window_len},
           {"hop", c.hop},
           {"kernel", c.kernel},
           {"K", c.capacity},
           {"margin_threshold", c.margin_threshold},
           {"min_recording_windows", c.min_recording_windows},
           {"hidden_dims", c.hidden_dims}};
}

/// Missing keys keep their defaults, so partial config files are valid.
inline void from_json(const json& j, TrainConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("pretrain_epochs", c.pretrain_epochs);
  get("incremental_epochs", c.incremental_epochs);
  get("batch_size", c.batch_size);
  get("lr", c.lr);
  get("temperature", c.temperature);
  get("lambda", c.distill_weight);
  get("seed", c.seed);
  get("channels", c.channels);
  get("window_len", c.window_len);
  get("hop", c.hop);
  get("kernel", c.kernel);
  get("K", c.capacity);
  get("margin_threshold", c.margin_threshold);
  get("min_recording_windows", c.min_recording_windows);
  get("hidden_dims", c.hidden_dims);
}

struct EdgeBundle {
  nn::ModelParams<float> params;
  SupportSet support;
  Normalizer normalizer;
  TrainConfig config;
  std::uint32_t model_version = 0;

  const ActivityRegistry& registry() const { return support.registry(); }
};

struct TrainProgress {
  std::string phase;
  std::size_t epoch = 0;
  std::size_t epochs = 0;
  double loss = 0.0;
};

using ProgressFn = std::function<void(const TrainProgress&)>;

// ---------------------------------------------------------------------------
// Preprocessing helpers

inline std::vector<Exemplar> featurize(std::span<const Window> windows, std::size_t kernel, const Normalizer& n) {
  std::vector<Exemplar> out;
  out.reserve(windows.size());
  for (const auto& w : windows) {
    const auto fv = preprocess(w, kernel, n);
    out.emplace_back(fv.begin(), fv.end());
  }
  return out;
}

inline void check_windows(std::span<const Window> windows, const TrainConfig& cfg) {
  for (const auto& w : windows) {
    if (w.num_channels != cfg.channels || w.width != cfg.window_len) {
      fail(ErrorCode::kInvalidArgument, "window shape " + std::to_string(w.num_channels) + "x" + std::to_string(w.width) +
                                            " does not match configured " + std::to_string(cfg.channels) + "x" +
                                            std::to_string(cfg.window_len));
    }
  }
}

// ---------------------------------------------------------------------------
// Inference

/// Immutable inference view of a bundle: frozen preprocessing, network and
/// cached prototypes.
class Recognizer {
 public:
  explicit Recognizer(std::shared_ptr<const EdgeBundle> bundle)
      : bundle_(std::move(bundle)), prototypes_(compute_prototypes(bundle_->support, bundle_->params)) {}

  const EdgeBundle& bundle() const { return *bundle_; }
  std::shared_ptr<const EdgeBundle> shared_bundle() const { return bundle_; }
  const std::vector<Prototype>& prototypes() const { return prototypes_; }

  Prediction predict_features(std::span<const float> features) const {
    nn::Matrix<float> x(1, static_cast<Eigen::Index>(features.size()));
    for (std::size_t i = 0; i < features.size(); ++i) x(0, static_cast<Eigen::Index>(i)) = features[i];
    const auto emb = nn::embed(bundle_->params, x);
    return classify(std::span<const float>(emb.data(), static_cast<std::size_t>(emb.cols())), prototypes_);
  }

  /// Full pipeline: denoise, extract, normalize, embed, classify.
  Prediction predict(const Window& window) const {
    const auto fv = preprocess(window, bundle_->config.kernel, bundle_->normalizer);
    const std::vector<float> f(fv.begin(), fv.end());
    return predict_features(f);
  }

  std::vector<ActivityId> predict_batch(std::span<const Exemplar> features) const {
    std::vector<ActivityId> out;
    if (features.empty()) return out;
    const auto emb = nn::embed(bundle_->params, stack_rows(features, bundle_->support.feature_dim()));
    out.reserve(features.size());
    for (Eigen::Index i = 0; i < emb.rows(); ++i) {
      out.push_back(classify(std::span<const float>(emb.row(i).data(), static_cast<std::size_t>(emb.cols())), prototypes_).label);
    }
    return out;
  }

 private:
  std::shared_ptr<const EdgeBundle> bundle_;
  std::vector<Prototype> prototypes_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  std::vector<ActivityId> classes;
  std::vector<std::string> names;
  std::vector<std::size_t> counts;
  // Empty for classes without samples.
  std::vector<std::optional<double>> per_class_accuracy;
  double overall_accuracy = 0.0;
  std::size_t count = 0;
  // confusion[true][predicted], indexed like `classes`.
  std::vector<std::vector<std::size_t>> confusion;

  std::optional<double> accuracy_of(ActivityId id) const {
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i] == id) return per_class_accuracy[i];
    }
    return std::nullopt;
  }
};

inline void to_json(json& j, const EvalReport& r) {
  json per_class = json::array();
  for (std::size_t i = 0; i < r.classes.size(); ++i) {
    per_class.push_back({{"id", r.classes[i].value},
                         {"name", r.names[i]},
                         {"count", r.counts[i]},
                         {"accuracy", r.per_class_accuracy[i] ? json(*r.per_class_accuracy[i]) : json(nullptr)}});
  }
  j = json{{"overall_accuracy", r.overall_accuracy}, {"count", r.count}, {"per_class", per_class}, {"confusion", r.confusion}};
}

/// Evaluates already-normalized features keyed by true class.
inline EvalReport evaluate_features(const Recognizer& rec, const std::map<ActivityId, std::vector<Exemplar>>& samples) {
  const auto& reg = rec.bundle().registry();
  EvalReport r;
  r.classes = reg.ids();
  std::map<ActivityId, std::size_t> index;
  for (std::size_t i = 0; i < r.classes.size(); ++i) {
    index[r.classes[i]] = i;
    r.names.push_back(reg.name(r.classes[i]));
  }
  const auto k = r.classes.size();
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  r.counts.assign(k, 0);
  std::size_t correct = 0;
  for (const auto& [truth, feats] : samples) {
    auto it = index.find(truth);
    if (it == index.end()) fail(ErrorCode::kNotFound, "evaluate: label id " + std::to_string(truth.value) + " is not registered");
    const auto preds = rec.predict_batch(feats);
    for (const auto& p : preds) {
      r.confusion[it->second][index.at(p)] += 1;
      if (p == truth) ++correct;
    }
    r.counts[it->second] += feats.size();
    r.count += feats.size();
  }
  if (r.count == 0) fail(ErrorCode::kInvalidArgument, "evaluate: no samples");
  for (std::size_t i = 0; i < k; ++i) {
    if (r.counts[i] == 0) {
      r.per_class_accuracy.emplace_back(std::nullopt);
    } else {
      r.per_class_accuracy.emplace_back(static_cast<double>(r.confusion[i][i]) / static_cast<double>(r.counts[i]));
    }
  }
  r.overall_accuracy = static_cast<double>(correct) / static_cast<double>(r.count);
  return r;
}

/// Windows must carry registered labels.
inline EvalReport evaluate(const Recognizer& rec, std::span<const Window> windows) {
  if (windows.empty()) fail(ErrorCode::kInvalidArgument, "evaluate: no windows");
  const auto& b = rec.bundle();
  check_windows(windows, b.config);
  std::map<ActivityId, std::vector<Exemplar>> samples;
  for (const auto& w : windows) {
    if (!w.label) fail(ErrorCode::kInvalidArgument, "evaluate: unlabeled window");
    if (!b.registry().contains(*w.label)) {
      fail(ErrorCode::kNotFound, "evaluate: label id " + std::to_string(w.label->value) + " is not registered");
    }
    const auto fv = preprocess(w, b.config.kernel, b.normalizer);
    samples[*w.label].emplace_back(fv.begin(), fv.end());
  }
  return evaluate_features(rec, samples);
}

inline EvalReport evaluate(const EdgeBundle& bundle, std::span<const Window> windows) {
  return evaluate(Recognizer(std::make_shared<const EdgeBundle>(bundle)), windows);
}

// ---------------------------------------------------------------------------
// Forgetting

struct ForgettingReport {
  std::vector<ActivityId> old_classes;
  std::vector<std::string> old_names;
  std::vector<double> before;
  std::vector<double> after;
  std::vector<double> drops;
  double max_drop = 0.0;
  ActivityId new_class;
  std::string new_class_name;
  double new_class_accuracy = 0.0;
  std::uint32_t model_version_before = 0;
  std::uint32_t model_version_after = 0;
};

inline void to_json(json& j, const ForgettingReport& r) {
  std::vector<std::uint32_t> ids;
  for (auto id : r.old_classes) ids.push_back(id.value);
  j = json{{"old_classes", ids},
           {"old_names", r.old_names},
           {"before", r.before},
           {"after", r.after},
           {"drops", r.drops},
           {"max_drop", r.max_drop},
           {"new_class", {{"id", r.new_class.value}, {"name", r.new_class_name}, {"accuracy", r.new_class_accuracy}}},
           {"model_version_before", r.model_version_before},
           {"model_version_after", r.model_version_after}};
}

/// Per-class accuracy on `old_probe` before and after an update, plus the
/// updated model's accuracy on the target class. drop = before - after.
inline ForgettingReport forgetting_report(const Recognizer& before, const Recognizer& after,
                                          const std::map<ActivityId, std::vector<Exemplar>>& old_probe,
                                          ActivityId new_class, const std::vector<Exemplar>& new_probe) {
  ForgettingReport r;
  r.model_version_before = before.bundle().model_version;
  r.model_version_after = after.bundle().model_version;
  r.new_class = new_class;
  r.new_class_name = after.bundle().registry().name(new_class);
  r.max_drop = -std::numeric_limits<double>::infinity();
  for (const auto& [id, feats] : old_probe) {
    if (id == new_class || feats.empty()) continue;
    auto accuracy = [&](const Recognizer& rec) {
      const auto preds = rec.predict_batch(feats);
      const auto hits = std::count(preds.begin(), preds.end(), id);
      return static_cast<double>(hits) / static_cast<double>(preds.size());
    };
    r.old_classes.push_back(id);
    r.old_names.push_back(after.bundle().registry().name(id));
    r.before.push_back(accuracy(before));
    r.after.push_back(accuracy(after));
    r.drops.push_back(r.before.back() - r.after.back());
    r.max_drop = std::max(r.max_drop, r.drops.back());
  }
  if (r.old_classes.empty()) r.max_drop = 0.0;
  if (!new_probe.empty()) {
    const auto preds = after.predict_batch(new_probe);
    r.new_class_accuracy = static_cast<double>(std::count(preds.begin(), preds.end(), new_class)) /
                           static_cast<double>(preds.size());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Training

struct TrainingSet {
  nn::Matrix<float> features;
  std::vector<std::uint32_t> labels;
  // Rows with a frozen teacher embedding take part in distillation.
  std::vector<bool> has_teacher;
  nn::Matrix<float> teacher;
};

namespace detail {

/// Draws class-balanced batches: each batch takes near-equal counts per
/// class, cycling through a per-class shuffled order.
class BalancedSampler {
 public:
  BalancedSampler(std::span<const std::uint32_t> labels, std::uint64_t seed) : rng_(seed) {
    std::map<std::uint32_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    for (auto& [_, idx] : by_class) {
      pools_.push_back(Pool{std::move(idx), 0});
      std::shuffle(pools_.back().order.begin(), pools_.back().order.end(), rng_);
    }
  }

  std::vector<std::size_t> next(std::size_t batch_size) {
    const auto k = pools_.size();
    const auto base = batch_size / k;
    const auto extra = batch_size % k;
    std::vector<std::size_t> out;
    out.reserve(batch_size);
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t take = base + (((c + k - offset_ % k) % k) < extra ? 1 : 0);
      for (std::size_t t = 0; t < take; ++t) out.push_back(draw(pools_[c]));
    }
    offset_ += extra;
    return out;
  }

 private:
  struct Pool {
    std::vector<std::size_t> order;
    std::size_t cursor;
  };

  std::size_t draw(Pool& p) {
    if (p.cursor == p.order.size()) {
      std::shuffle(p.order.begin(), p.order.end(), rng_);
      p.cursor = 0;
    }
    return p.order[p.cursor++];
  }

  std::mt19937_64 rng_;
  std::vector<Pool> pools_;
  std::size_t offset_ = 0;
};

}  // namespace detail

/// Optimizes the joint objective with Adam over class-balanced batches.
/// Throws Error(kTraining) on a non-finite loss. The progress callback runs
/// after every epoch; an exception thrown from it aborts training.
inline nn::ModelParams<float> train_embedding(nn::ModelParams<float> params, const TrainingSet& data, std::size_t epochs,
                                              const TrainConfig& cfg, std::uint64_t seed, const std::string& phase,
                                              const ProgressFn& progress) {
  const auto n = static_cast<std::size_t>(data.features.rows());
  require(n >= 2 && data.labels.size() == n, "train: training set needs >= 2 labeled rows");
  detail::BalancedSampler sampler(data.labels, seed);
  auto adam = nn::AdamState<float>::zeros_like(params);
  const std::size_t steps = (n + cfg.batch_size - 1) / cfg.batch_size;
  const auto temperature = static_cast<float>(cfg.temperature);
  const auto weight = static_cast<float>(cfg.distill_weight);
  const auto F = data.features.cols();
  const bool any_teacher = std::any_of(data.has_teacher.begin(), data.has_teacher.end(), [](bool b) { return b; });

  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
      const auto idx = sampler.next(std::min(cfg.batch_size, std::max<std::size_t>(n, 2)));
      const auto B = static_cast<Eigen::Index>(idx.size());
      nn::Matrix<float> x(B, F);
      std::vector<std::uint32_t> labels(idx.size());
      objective::DistillTarget<float> target;
      std::vector<Eigen::Index> teacher_src;
      for (Eigen::Index b = 0; b < B; ++b) {
        const auto i = idx[static_cast<std::size_t>(b)];
        x.row(b) = data.features.row(static_cast<Eigen::Index>(i));
        labels[static_cast<std::size_t>(b)] = data.labels[i];
        if (any_teacher && data.has_teacher[i]) {
          target.rows.push_back(b);
          teacher_src.push_back(static_cast<Eigen::Index>(i));
        }
      }
      if (!target.rows.empty()) {
        target.embeddings.resize(static_cast<Eigen::Index>(target.rows.size()), data.teacher.cols());
        for (std::size_t k = 0; k < teacher_src.size(); ++k) {
          target.embeddings.row(static_cast<Eigen::Index>(k)) = data.teacher.row(teacher_src[k]);
        }
      }
      auto fwd = nn::forward(params, x);
      auto loss = objective::joint_loss<float>(fwd.embeddings, labels, target.rows.empty() ? nullptr : &target,
                                               temperature, weight);
      if (!std::isfinite(loss.total)) {
        std::ostringstream msg;
        msg << phase << ": non-finite loss at epoch " << epoch << " step " << step << " (contrastive=" << loss.contrastive
            << ", distillation=" << loss.distillation << ")";
        fail(ErrorCode::kTraining, msg.str());
      }
      const auto grads = nn::backward(params, fwd.cache, loss.grad_wrt_embeddings);
      nn::optimizer_step(params, grads, adam, cfg.lr);
      epoch_loss += loss.total;
    }
    if (progress) progress(TrainProgress{phase, epoch, epochs, epoch_loss / static_cast<double>(steps)});
  }
  params.revision = 0;
  return params;
}

// ---------------------------------------------------------------------------
// Lifecycle

using ClassWindows = std::map<std::string, std::vector<Window>>;

/// Offline initialization: fit the normalizer, train the embedding network
/// with the contrastive loss only, and fill the support set by herding.
inline EdgeBundle pretrain(const ClassWindows& data, const TrainConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  if (data.size() < 2) fail(ErrorCode::kInvalidArgument, "pretrain: need at least 2 classes, got " + std::to_string(data.size()));
  std::vector<FeatureVector> raw_all;
  std::vector<std::vector<FeatureVector>> raw_by_class;
  for (const auto& [name, windows] : data) {
    if (windows.empty()) fail(ErrorCode::kInvalidArgument, "pretrain: class '" + name + "' has no windows");
    check_windows(windows, cfg);
    auto& bucket = raw_by_class.emplace_back();
    for (const auto& w : windows) {
      bucket.push_back(extract_features(denoise(w, cfg.kernel)));
      raw_all.push_back(bucket.back());
    }
  }

  EdgeBundle b;
  b.config = cfg;
  b.normalizer = fit_normalizer(raw_all);
  b.support = SupportSet(cfg.capacity, cfg.feature_dim());

  TrainingSet ts;
  ts.features.resize(static_cast<Eigen::Index>(raw_all.size()), static_cast<Eigen::Index>(cfg.feature_dim()));
  std::vector<std::vector<Exemplar>> normalized(raw_by_class.size());
  std::vector<ActivityId> ids;
  Eigen::Index row = 0;
  std::size_t c = 0;
  for (const auto& [name, _] : data) {
    const auto id = b.support.registry().add(name, Origin::kPretrained, 0);
    ids.push_back(id);
    for (const auto& raw : raw_by_class[c]) {
      const auto z = normalize(raw, b.normalizer);
      normalized[c].emplace_back(z.begin(), z.end());
      for (std::size_t d = 0; d < z.size(); ++d) ts.features(row, static_cast<Eigen::Index>(d)) = static_cast<float>(z[d]);
      ts.labels.push_back(id.value);
      ++row;
    }
    ++c;
  }
  ts.has_teacher.assign(ts.labels.size(), false);

  auto params = nn::init_network<float>(cfg.seed, cfg.layer_dims());
  b.params = train_embedding(std::move(params), ts, cfg.pretrain_epochs, cfg, cfg.seed + 1, "pretrain", progress);
  for (std::size_t k = 0; k < ids.size(); ++k) b.support = b.support.updated(ids[k], normalized[k], UpdateMode::kMerge);
  b.model_version = 1;
  b.params.version = b.model_version;
  return b;
}

struct UpdateResult {
  EdgeBundle bundle;
  ForgettingReport report;
};

namespace detail {

inline UpdateResult retrain_with(const EdgeBundle& old, ActivityId target, SupportSet next_support,
                                 const std::vector<Exemplar>& fresh, UpdateMode mode, const TrainConfig& cfg,
                                 const std::string& phase, const ProgressFn& progress) {
  // Old-class exemplars keep their teacher embeddings; the target class
  // trains without distillation.
  std::map<ActivityId, std::vector<Exemplar>> old_probe;
  for (const auto& [id, ex] : old.support.classes()) {
    if (id != target) old_probe[id] = ex;
  }
  std::size_t rows = fresh.size();
  for (const auto& [_, ex] : old_probe) rows += ex.size();
  const auto F = static_cast<Eigen::Index>(old.support.feature_dim());

  TrainingSet ts;
  ts.features.resize(static_cast<Eigen::Index>(rows), F);
  Eigen::Index r = 0;
  for (const auto& [id, ex] : old_probe) {
    for (const auto& v : ex) {
      for (Eigen::Index d = 0; d < F; ++d) ts.features(r, d) = v[static_cast<std::size_t>(d)];
      ts.labels.push_back(id.value);
      ts.has_teacher.push_back(true);
      ++r;
    }
  }
  const auto old_rows = r;
  for (const auto& v : fresh) {
    for (Eigen::Index d = 0; d < F; ++d) ts.features(r, d) = v[static_cast<std::size_t>(d)];
    ts.labels.push_back(target.value);
    ts.has_teacher.push_back(false);
    ++r;
  }
  // Frozen teacher: old-model embeddings computed once.
  ts.teacher = nn::Matrix<float>::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(old.params.output_dim()));
  if (old_rows > 0) ts.teacher.topRows(old_rows) = nn::embed(old.params, ts.features.topRows(old_rows).eval());

  const auto seed = cfg.seed ^ (0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(old.model_version) + 1));
  auto params = train_embedding(old.params, ts, cfg.incremental_epochs, cfg, seed, phase, progress);

  EdgeBundle next = old;
  next.support = next_support.updated(target, fresh, mode);
  next.params = std::move(params);
  next.model_version = old.model_version + 1;
  next.params.version = next.model_version;

  const Recognizer before(std::make_shared<const EdgeBundle>(old));
  auto next_ptr = std::make_shared<const EdgeBundle>(next);
  const Recognizer after(next_ptr);
  UpdateResult out{std::move(next), forgetting_report(before, after, old_probe, target, fresh)};
  return out;
}

inline std::vector<Exemplar> recording_features(const EdgeBundle& b, std::span<const Window> recordings, const TrainConfig& cfg) {
  if (recordings.size() < cfg.min_recording_windows) {
    fail(ErrorCode::kInvalidArgument, "too few samples: " + std::to_string(recordings.size()) + " windows, need at least " +
                                          std::to_string(cfg.min_recording_windows));
  }
  check_windows(recordings, b.config);
  return featurize(recordings, b.config.kernel, b.normalizer);
}

}  // namespace detail

/// Registers a new activity and retrains on support set + recordings with
/// contrastive + lambda * distillation. Preprocessing (kernel, normalizer,
/// window shape) always comes from the bundle; `cfg` supplies the training
/// hyperparameters.
inline UpdateResult learn_class(const EdgeBundle& bundle, const std::string& name, std::span<const Window> recordings,
                                const TrainConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  if (bundle.registry().find(name)) fail(ErrorCode::kConflict, "activity '" + name + "' is already registered");
  const auto fresh = detail::recording_features(bundle, recordings, cfg);
  SupportSet next_support = bundle.support;
  const auto id = next_support.registry().add(name, Origin::kUserAdded, bundle.model_version);
  return detail::retrain_with(bundle, id, std::move(next_support), fresh, UpdateMode::kMerge, cfg, "add_class", progress);
}

/// Replaces the class's exemplars with the new recordings and retrains.
inline UpdateResult calibrate_class(const EdgeBundle& bundle, ActivityId id, std::span<const Window> recordings,
                                    const TrainConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  if (!bundle.registry().contains(id)) fail(ErrorCode::kNotFound, "unknown activity id " + std::to_string(id.value));
  const auto fresh = detail::recording_features(bundle, recordings, cfg);
  return detail::retrain_with(bundle, id, bundle.support, fresh, UpdateMode::kReplace, cfg, "calibrate", progress);
}

// ---------------------------------------------------------------------------
// Bundle container

inline constexpr std::uint16_t kBundleFormatVersion = 1;

struct BundleSizes {
  std::size_t model = 0;
  std::size_t support = 0;
  std::size_t normalizer = 0;
  std::size_t metadata = 0;
  std::size_t total = 0;
};

inline json bundle_metadata(const EdgeBundle& b) {
  json registry = json::array();
  for (const auto& [id, info] : b.registry().entries()) {
    registry.push_back({{"id", id.value}, {"name", info.name}, {"origin", to_string(info.origin)}, {"created_at", info.created_at}});
  }
  return json{{"config", b.config}, {"model_version", b.model_version}, {"registry", registry}};
}

/// MGBD file: "MGBD", u16 version, then four sections (model, support,
/// normalizer, metadata JSON), each as u32 length + bytes + u32 CRC32.
inline Bytes encode_bundle(const EdgeBundle& b, BundleSizes* sizes = nullptr) {
  const Bytes sections[4] = {nn::serialize(b.params), snapshot(b.support), encode_normalizer(b.normalizer),
                             [&] {
                               const auto text = bundle_metadata(b).dump();
                               return Bytes(text.begin(), text.end());
                             }()};
  ByteWriter w;
  w.put_magic("MGBD");
  w.put<std::uint16_t>(kBundleFormatVersion);
  for (const auto& s : sections) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    w.put_bytes(s);
    w.put<std::uint32_t>(crc32_of(s));
  }
  if (sizes) {
    *sizes = BundleSizes{sections[0].size(), sections[1].size(), sections[2].size(), sections[3].size(), w.size()};
  }
  return std::move(w).bytes();
}

inline EdgeBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "bundle");
  r.expect_magic("MGBD");
  const auto version = r.get<std::uint16_t>();
  if (version != kBundleFormatVersion) fail(ErrorCode::kFormat, "bundle: unsupported version " + std::to_string(version));
  static constexpr const char* kNames[4] = {"model", "support", "normalizer", "metadata"};
  std::span<const std::uint8_t> sections[4];
  for (int i = 0; i < 4; ++i) {
    const auto len = r.get<std::uint32_t>();
    sections[i] = r.get_bytes(len);
    if (r.get<std::uint32_t>() != crc32_of(sections[i])) {
      fail(ErrorCode::kChecksum, std::string("bundle: checksum mismatch in ") + kNames[i] + " section");
    }
  }
  if (r.remaining() != 0) fail(ErrorCode::kFormat, "bundle: trailing bytes");

  EdgeBundle b;
  b.params = nn::deserialize(sections[0]);
  b.support = restore(sections[1]);
  b.normalizer = decode_normalizer(sections[2]);
  json meta;
  try {
    meta = json::parse(sections[3].begin(), sections[3].end());
    b.config = meta.at("config").get<TrainConfig>();
    b.model_version = meta.at("model_version").get<std::uint32_t>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("bundle: bad metadata: ") + e.what());
  }
  b.params.version = b.model_version;

  // Cross-section consistency.
  if (meta.at("registry").size() != b.registry().size()) fail(ErrorCode::kFormat, "bundle: registry mismatch between sections");
  for (const auto& e : meta.at("registry")) {
    const ActivityId id{e.at("id").get<std::uint32_t>()};
    if (!b.registry().contains(id) || b.registry().name(id) != e.at("name").get<std::string>()) {
      fail(ErrorCode::kFormat, "bundle: registry mismatch between sections");
    }
  }
  if (b.normalizer.dim() != b.support.feature_dim() || b.params.input_dim() != b.support.feature_dim() ||
      b.config.feature_dim() != b.support.feature_dim()) {
    fail(ErrorCode::kFormat, "bundle: feature dimension mismatch between sections");
  }
  return b;
}

inline std::string describe_sizes(const BundleSizes& s) {
  return "model " + std::to_string(s.model) + " B, support " + std::to_string(s.support) + " B, normalizer " +
         std::to_string(s.normalizer) + " B, metadata " + std::to_string(s.metadata) + " B, total " +
         std::to_string(s.total) + " B";
}

/// Writes atomically (temp file + rename). Refuses bundles over 5 MiB.
inline BundleSizes save_bundle(const EdgeBundle& b, const std::filesystem::path& path) {
  BundleSizes sizes;
  const auto bytes = encode_bundle(b, &sizes);
  if (bytes.size() > kBundleBudgetBytes) {
    fail(ErrorCode::kBudget, "bundle exceeds size budget: " + describe_sizes(sizes) + " > " + std::to_string(kBundleBudgetBytes) + " B");
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::kIo, "cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::kIo, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::kIo, "cannot move bundle into place at '" + path.string() + "': " + ec.message());
  return sizes;
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open '" + path.string() + "'");
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline EdgeBundle load_bundle(const std::filesystem::path& path) { return decode_bundle(read_file(path)); }

}  // namespace magneto
