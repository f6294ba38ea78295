// Synthetic dataset shared by the learner, service and acceptance tests.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "magneto/learner.hpp"
#include "magneto/synthetic.hpp"

namespace fixture {

using namespace magneto;

// Five pretrained classes plus one held back for incremental learning.
struct Fixture {
  ClassWindows train;
  std::map<std::string, std::vector<Window>> test;
  std::vector<Window> new_train;
  std::vector<Window> new_test;
  std::string new_name;
};

struct Plan {
  double train_seconds = 50.5;  // 4 sessions -> 400 windows per class at hop 60
  double test_seconds = 25.5;   // 2 sessions -> 100 windows per class
  double new_seconds = 30.0;    // 1 session -> 59 windows
  double jitter = 0.15;
};

inline Fixture make(const Plan& p = {}) {
  const auto classes = synthetic::demo_classes();
  Fixture f;
  for (std::size_t c = 0; c + 1 < classes.size(); ++c) {
    const auto& spec = classes[c];
    f.train[spec.class_name] = synthetic::windows_of(synthetic::record_sessions(spec, {4, p.train_seconds, p.jitter, 1}), 120, 60);
    f.test[spec.class_name] = synthetic::windows_of(synthetic::record_sessions(spec, {2, p.test_seconds, p.jitter, 2}), 120, 60);
  }
  const auto& extra = classes.back();
  f.new_name = extra.class_name;
  f.new_train = synthetic::windows_of(synthetic::record_sessions(extra, {1, p.new_seconds, p.jitter, 3}), 120, 60);
  f.new_test = synthetic::windows_of(synthetic::record_sessions(extra, {2, p.test_seconds, p.jitter, 4}), 120, 60);
  return f;
}

/// Test windows of registered classes with labels attached.
inline std::vector<Window> labeled(const std::map<std::string, std::vector<Window>>& by_name, const ActivityRegistry& reg) {
  std::vector<Window> out;
  for (const auto& [name, ws] : by_name) {
    const auto id = reg.find(name);
    if (!id) continue;
    for (auto w : ws) {
      w.label = *id;
      out.push_back(std::move(w));
    }
  }
  return out;
}

/// Normalized features per class, as consumed by forgetting_report.
inline std::map<ActivityId, std::vector<Exemplar>> probe(const std::map<std::string, std::vector<Window>>& by_name,
                                                         const EdgeBundle& b) {
  std::map<ActivityId, std::vector<Exemplar>> out;
  for (const auto& [name, ws] : by_name) {
    const auto id = b.registry().find(name);
    if (id) out[*id] = featurize(ws, b.config.kernel, b.normalizer);
  }
  return out;
}

// Small network and short schedules for unit tests.
inline TrainConfig quick_config() {
  TrainConfig c;
  c.pretrain_epochs = 6;
  c.incremental_epochs = 4;
  c.hidden_dims = {64, 32};
  c.capacity = 40;
  return c;
}

}  // namespace fixture
