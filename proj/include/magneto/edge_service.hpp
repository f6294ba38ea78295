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

// Local inference and learning service: live ingestion, prediction log,
// recording, background training and status. EdgeEngine holds the state and
// logic; EdgeServer maps it onto HTTP/JSON under /api.

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "magneto/error.hpp"
#include "magneto/ingest.hpp"
#include "magneto/learner.hpp"
// After Eigen: httplib pulls in <resolv.h>, whose _res macro breaks Eigen's headers.
#include "httplib.h"

namespace magneto::service {

using json = nlohmann::json;

inline constexpr int kDefaultPort = 8787;
inline constexpr std::size_t kDefaultLogCapacity = 256;
inline constexpr std::size_t kLatencySamples = 1024;

struct PredictionRecord {
  std::int64_t t = 0;  // end timestamp of the window, exclusive
  ActivityId label;
  std::string label_name;
  double score = 0.0;
  double margin = 0.0;
  bool uncertain = false;
  std::uint32_t model_version = 0;
};

inline void to_json(json& j, const PredictionRecord& p) {
  j = json{{"t", p.t},
           {"label", p.label.value},
           {"label_name", p.label_name},
           {"score", p.score},
           {"margin", p.margin},
           {"uncertain", p.uncertain},
           {"model_version", p.model_version}};
}

struct IngestResult {
  std::size_t windows_emitted = 0;
  std::optional<PredictionRecord> latest_prediction;
};

enum class JobState { kIdle, kRunning, kFailed };

inline std::string_view to_string(JobState s) {
  switch (s) {
    case JobState::kIdle: return "idle";
    case JobState::kRunning: return "running";
    case JobState::kFailed: return "failed";
  }
  return "unknown";
}

enum class TrainMode { kAddClass, kCalibrate };

inline std::optional<TrainMode> parse_mode(std::string_view s) {
  if (s == "add_class") return TrainMode::kAddClass;
  if (s == "calibrate") return TrainMode::kCalibrate;
  return std::nullopt;
}

struct JobStatus {
  JobState state = JobState::kIdle;
  std::uint64_t job_id = 0;  // most recent job, 0 if none yet
  std::string mode;
  std::string label;
  std::string phase;
  std::size_t epoch = 0;
  std::size_t epochs = 0;
  double loss = 0.0;
  std::string reason;
};

inline void to_json(json& j, const JobStatus& s) {
  j = json{{"state", to_string(s.state)}, {"job_id", s.job_id}};
  if (s.job_id == 0) return;
  j["mode"] = s.mode;
  j["label"] = s.label;
  j["phase"] = s.phase;
  j["epoch"] = s.epoch;
  j["epochs"] = s.epochs;
  j["loss"] = s.loss;
  if (s.state == JobState::kFailed) j["reason"] = s.reason;
}

struct LatencyStats {
  std::size_t count = 0;
  double median_ms = 0.0;
  double p99_ms = 0.0;
  double max_ms = 0.0;
};

inline void to_json(json& j, const LatencyStats& s) {
  j = json{{"count", s.count}, {"median_ms", s.median_ms}, {"p99_ms", s.p99_ms}, {"max_ms", s.max_ms}};
}

/// Nearest-rank percentile of an unsorted sample.
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

struct EngineOptions {
  TrainConfig train;  // hyperparameters for on-device updates
  std::size_t log_capacity = kDefaultLogCapacity;
};

class EdgeEngine {
 public:
  EdgeEngine(EdgeBundle bundle, EngineOptions options)
      : options_(std::move(options)),
        windower_(bundle.config.channels, bundle.config.window_len),
        started_(std::chrono::steady_clock::now()) {
    options_.train.validate();
    require(options_.log_capacity >= 1, "service: log capacity must be >= 1");
    install(std::make_shared<const EdgeBundle>(std::move(bundle)));
  }

  explicit EdgeEngine(EdgeBundle bundle) : EdgeEngine(std::move(bundle), EngineOptions{}) {}

  EdgeEngine(const EdgeEngine&) = delete;
  EdgeEngine& operator=(const EdgeEngine&) = delete;

  ~EdgeEngine() {
    cancel_.store(true);
    if (worker_.joinable()) worker_.join();
  }

  /// The recognizer currently serving predictions.
  std::shared_ptr<const Recognizer> recognizer() const {
    std::lock_guard lock(model_mutex_);
    return recognizer_;
  }

  std::shared_ptr<const EdgeBundle> bundle() const { return recognizer()->shared_bundle(); }

  // -- ingestion ------------------------------------------------------------

  /// The whole batch is validated before any frame is consumed.
  IngestResult ingest(const std::vector<SensorFrame>& frames) {
    std::lock_guard stream_lock(stream_mutex_);
    auto last = windower_.last_timestamp();
    for (std::size_t i = 0; i < frames.size(); ++i) {
      const auto& f = frames[i];
      if (f.channels.size() != windower_.channels()) {
        fail(ErrorCode::kConflict, "frame " + std::to_string(i) + ": channel count mismatch: expected " +
                                       std::to_string(windower_.channels()) + ", got " + std::to_string(f.channels.size()));
      }
      for (double v : f.channels) {
        if (!std::isfinite(v)) fail(ErrorCode::kInvalidArgument, "frame " + std::to_string(i) + ": non-finite channel value");
      }
      if (last && f.timestamp_us < *last) {
        fail(ErrorCode::kInvalidArgument, "frame " + std::to_string(i) + ": timestamp regression " +
                                              std::to_string(f.timestamp_us) + " < " + std::to_string(*last));
      }
      last = f.timestamp_us;
    }

    IngestResult out;
    for (const auto& f : frames) {
      if (auto w = windower_.push(f)) {
        out.latest_prediction = classify_window(*w);
        ++out.windows_emitted;
      }
    }
    {
      std::lock_guard lock(record_mutex_);
      if (recording_) recording_->insert(recording_->end(), frames.begin(), frames.end());
    }
    return out;
  }

  /// Newest first.
  std::vector<PredictionRecord> predictions(std::size_t limit) const {
    std::lock_guard lock(log_mutex_);
    const auto n = std::min(limit, log_.size());
    return std::vector<PredictionRecord>(log_.rbegin(), log_.rbegin() + static_cast<std::ptrdiff_t>(n));
  }

  LatencyStats latency() const {
    std::lock_guard lock(log_mutex_);
    std::vector<double> v(latency_ms_.begin(), latency_ms_.end());
    LatencyStats s;
    s.count = total_windows_;
    s.median_ms = percentile(v, 0.5);
    s.p99_ms = percentile(v, 0.99);
    s.max_ms = v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
    return s;
  }

  // -- recording ------------------------------------------------------------

  void start_recording() {
    std::lock_guard lock(record_mutex_);
    if (recording_) fail(ErrorCode::kConflict, "a recording is already active");
    recording_.emplace();
  }

  /// Freezes the buffer into a pending dataset for `label`; returns its
  /// window count.
  std::size_t stop_recording(const std::string& label) {
    if (label.empty()) fail(ErrorCode::kInvalidArgument, "stop requires a label");
    if (!detail::valid_label(label)) fail(ErrorCode::kInvalidArgument, "invalid label '" + label + "'");
    std::lock_guard lock(record_mutex_);
    if (!recording_) fail(ErrorCode::kConflict, "no active recording");
    auto windows = segment(*recording_, windower_.window_len(), options_.train.hop);
    recording_.reset();
    const auto n = windows.size();
    pending_[label] = std::move(windows);
    return n;
  }

  /// Drops the active buffer and the pending dataset for `label`, or every
  /// pending dataset when no label is given.
  void discard(const std::optional<std::string>& label = std::nullopt) {
    std::lock_guard lock(record_mutex_);
    recording_.reset();
    if (label) {
      pending_.erase(*label);
    } else {
      pending_.clear();
    }
  }

  json recording_status() const {
    std::lock_guard lock(record_mutex_);
    json pending = json::object();
    for (const auto& [label, ws] : pending_) pending[label] = ws.size();
    return json{{"active", recording_.has_value()},
                {"frames", recording_ ? recording_->size() : 0},
                {"pending", pending}};
  }

  // -- training -------------------------------------------------------------

  /// Launches a background job and returns its id.
  std::uint64_t start_training(TrainMode mode, const std::string& label) {
    std::lock_guard job_lock(job_mutex_);
    if (job_.state == JobState::kRunning) fail(ErrorCode::kConflict, "a training job is already running");
    const auto base = bundle();
    std::optional<ActivityId> target;
    if (mode == TrainMode::kCalibrate) {
      target = base->registry().find(label);
      if (!target) fail(ErrorCode::kNotFound, "unknown activity '" + label + "'");
    } else if (base->registry().find(label)) {
      fail(ErrorCode::kConflict, "activity '" + label + "' is already registered");
    }
    std::vector<Window> windows;
    {
      std::lock_guard lock(record_mutex_);
      auto it = pending_.find(label);
      if (it == pending_.end()) fail(ErrorCode::kNotFound, "no pending recording for '" + label + "'");
      windows = it->second;
    }
    if (worker_.joinable()) worker_.join();

    job_ = JobStatus{};
    job_.state = JobState::kRunning;
    job_.job_id = ++job_counter_;
    job_.mode = mode == TrainMode::kAddClass ? "add_class" : "calibrate";
    job_.label = label;
    job_.phase = "preparing";
    job_.epochs = options_.train.incremental_epochs;
    worker_ = std::thread([this, mode, label, target, base, windows = std::move(windows)] {
      run_job(mode, label, target, base, windows);
    });
    return job_.job_id;
  }

  JobStatus job() const {
    std::lock_guard lock(job_mutex_);
    return job_;
  }

  /// Blocks until no job is running.
  JobStatus wait_for_job() const {
    std::unique_lock lock(job_mutex_);
    job_done_.wait(lock, [&] { return job_.state != JobState::kRunning; });
    return job_;
  }

  std::optional<ForgettingReport> forgetting_report() const {
    std::lock_guard lock(job_mutex_);
    return report_;
  }

  // -- status ---------------------------------------------------------------

  std::size_t bundle_bytes() const {
    std::lock_guard lock(model_mutex_);
    return bundle_bytes_;
  }

  double uptime_s() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  }

  json status() const {
    const auto b = bundle();
    json activities = json::array();
    for (const auto& [id, info] : b->registry().entries()) {
      activities.push_back({{"id", id.value}, {"name", info.name}, {"origin", to_string(info.origin)}});
    }
    return json{{"model_version", b->model_version},
                {"activities", activities},
                {"job", job()},
                {"bundle_bytes", bundle_bytes()},
                {"uptime_s", uptime_s()},
                {"latency", latency()},
                {"recording", recording_status()}};
  }

 private:
  void install(std::shared_ptr<const EdgeBundle> b) {
    const auto bytes = encode_bundle(*b).size();
    auto rec = std::make_shared<const Recognizer>(std::move(b));
    std::lock_guard lock(model_mutex_);
    recognizer_ = std::move(rec);
    bundle_bytes_ = bytes;
  }

  PredictionRecord classify_window(const Window& w) {
    const auto rec = recognizer();
    const auto t0 = std::chrono::steady_clock::now();
    const auto p = rec->predict(w);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    const auto& b = rec->bundle();
    PredictionRecord r{w.end_us, p.label, b.registry().name(p.label), p.score, p.margin,
                       p.uncertain(b.config.margin_threshold), b.model_version};
    std::lock_guard lock(log_mutex_);
    log_.push_back(r);
    if (log_.size() > options_.log_capacity) log_.pop_front();
    latency_ms_.push_back(ms);
    if (latency_ms_.size() > kLatencySamples) latency_ms_.pop_front();
    ++total_windows_;
    return r;
  }

  void run_job(TrainMode mode, const std::string& label, std::optional<ActivityId> target,
               std::shared_ptr<const EdgeBundle> base, const std::vector<Window>& windows) {
    const auto progress = [&](const TrainProgress& p) {
      if (cancel_.load()) fail(ErrorCode::kTraining, "cancelled");
      std::lock_guard lock(job_mutex_);
      job_.phase = p.phase;
      job_.epoch = p.epoch;
      job_.epochs = p.epochs;
      job_.loss = p.loss;
    };
    try {
      auto result = mode == TrainMode::kAddClass ? learn_class(*base, label, windows, options_.train, progress)
                                                 : calibrate_class(*base, *target, windows, options_.train, progress);
      const auto bytes = encode_bundle(result.bundle).size();
      if (bytes > kBundleBudgetBytes) {
        fail(ErrorCode::kBudget, "updated bundle would be " + std::to_string(bytes) + " B, over the " +
                                     std::to_string(kBundleBudgetBytes) + " B budget");
      }
      install(std::make_shared<const EdgeBundle>(std::move(result.bundle)));
      {
        std::lock_guard lock(record_mutex_);
        pending_.erase(label);
      }
      std::lock_guard lock(job_mutex_);
      report_ = std::move(result.report);
      job_.state = JobState::kIdle;
      job_.phase = "done";
    } catch (const std::exception& e) {
      std::lock_guard lock(job_mutex_);
      job_.state = JobState::kFailed;
      job_.reason = e.what();
    }
    job_done_.notify_all();
  }

  EngineOptions options_;

  mutable std::mutex model_mutex_;
  std::shared_ptr<const Recognizer> recognizer_;
  std::size_t bundle_bytes_ = 0;

  std::mutex stream_mutex_;
  StreamWindower windower_;

  mutable std::mutex log_mutex_;
  std::deque<PredictionRecord> log_;
  std::deque<double> latency_ms_;
  std::size_t total_windows_ = 0;

  mutable std::mutex record_mutex_;
  std::optional<std::vector<SensorFrame>> recording_;
  std::map<std::string, std::vector<Window>> pending_;

  mutable std::mutex job_mutex_;
  mutable std::condition_variable job_done_;
  JobStatus job_;
  std::uint64_t job_counter_ = 0;
  std::optional<ForgettingReport> report_;
  std::atomic<bool> cancel_{false};
  std::thread worker_;

  std::chrono::steady_clock::time_point started_;
};

// ---------------------------------------------------------------------------
// HTTP

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConflict: return 409;
    case ErrorCode::kNotFound: return 404;
    case ErrorCode::kBudget: return 413;
    case ErrorCode::kTraining:
    case ErrorCode::kIo: return 500;
    default: return 400;
  }
}

inline json error_body(std::string_view code, std::string_view message) {
  return json{{"code", code}, {"message", message}};
}

/// Accepts either a bare array of frames or {"frames": [...]}.
inline std::vector<SensorFrame> frames_from_json(const json& body) {
  const json& arr = body.is_object() && body.contains("frames") ? body.at("frames") : body;
  if (!arr.is_array()) fail(ErrorCode::kInvalidArgument, "expected an array of frames");
  std::vector<SensorFrame> out;
  out.reserve(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& f = arr[i];
    if (!f.is_object() || !f.contains("timestamp_us") || !f.contains("channels") || !f.at("timestamp_us").is_number_integer() ||
        !f.at("channels").is_array()) {
      fail(ErrorCode::kInvalidArgument, "frame " + std::to_string(i) + ": expected {timestamp_us: int, channels: [number]}");
    }
    SensorFrame frame;
    frame.timestamp_us = f.at("timestamp_us").get<std::int64_t>();
    for (const auto& v : f.at("channels")) {
      if (!v.is_number()) fail(ErrorCode::kInvalidArgument, "frame " + std::to_string(i) + ": channel values must be numbers");
      frame.channels.push_back(v.get<double>());
    }
    out.push_back(std::move(frame));
  }
  return out;
}

inline json frames_to_json(std::span<const SensorFrame> frames) {
  json arr = json::array();
  for (const auto& f : frames) arr.push_back({{"timestamp_us", f.timestamp_us}, {"channels", f.channels}});
  return json{{"frames", arr}};
}

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = kDefaultPort;  // 0 picks a free port
};

class EdgeServer {
 public:
  EdgeServer(EdgeEngine& engine, ServerOptions options) : engine_(engine), options_(std::move(options)) {
    // httplib defaults to SO_REUSEPORT, which lets a second server share the port.
    server_.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    });
    routes();
  }

  ~EdgeServer() { stop(); }

  /// Binds the socket; throws Error(kIo) if the address is unavailable.
  int bind() {
    if (options_.port == 0) {
      port_ = server_.bind_to_any_port(options_.host);
      if (port_ < 0) fail(ErrorCode::kIo, "cannot bind " + options_.host);
    } else {
      if (!server_.bind_to_port(options_.host, options_.port)) {
        fail(ErrorCode::kIo, "cannot bind " + options_.host + ":" + std::to_string(options_.port) + " (port in use?)");
      }
      port_ = options_.port;
    }
    return port_;
  }

  /// Serves until stop() is called.
  void listen() { server_.listen_after_bind(); }

  void start_background() {
    bind();
    thread_ = std::thread([this] { listen(); });
    server_.wait_until_ready();
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }
  const std::string& host() const { return options_.host; }

 private:
  using Req = httplib::Request;
  using Res = httplib::Response;

  static void send(Res& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  template <typename Fn>
  static httplib::Server::Handler guarded(Fn fn) {
    return [fn](const Req& req, Res& res) {
      try {
        fn(req, res);
      } catch (const Error& e) {
        send(res, http_status(e.code()), error_body(to_string(e.code()), e.what()));
      } catch (const json::exception& e) {
        send(res, 400, error_body("parse", std::string("malformed JSON: ") + e.what()));
      } catch (const std::exception& e) {
        send(res, 500, error_body("internal", e.what()));
      }
    };
  }

  static json body_of(const Req& req) { return json::parse(req.body); }

  void routes() {
    server_.Post("/api/frames", guarded([this](const Req& req, Res& res) {
                   const auto result = engine_.ingest(frames_from_json(body_of(req)));
                   json out{{"windows_emitted", result.windows_emitted}};
                   if (result.latest_prediction) out["latest_prediction"] = *result.latest_prediction;
                   send(res, 200, out);
                 }));
    server_.Get("/api/predictions", guarded([this](const Req& req, Res& res) {
                  std::size_t limit = kDefaultLogCapacity;
                  if (req.has_param("limit")) {
                    if (!detail::parse_number(req.get_param_value("limit"), limit)) {
                      fail(ErrorCode::kInvalidArgument, "limit must be a non-negative integer");
                    }
                  }
                  send(res, 200, json(engine_.predictions(limit)));
                }));
    server_.Post("/api/recordings", guarded([this](const Req& req, Res& res) {
                   const auto body = body_of(req);
                   const auto action = body.value("action", std::string{});
                   const auto label = body.contains("label") && body.at("label").is_string()
                                          ? std::optional<std::string>(body.at("label").get<std::string>())
                                          : std::nullopt;
                   json out;
                   if (action == "start") {
                     engine_.start_recording();
                   } else if (action == "stop") {
                     out["windows"] = engine_.stop_recording(label.value_or(""));
                   } else if (action == "discard") {
                     engine_.discard(label);
                   } else {
                     fail(ErrorCode::kInvalidArgument, "action must be start, stop or discard");
                   }
                   out.update(engine_.recording_status());
                   send(res, 200, out);
                 }));
    server_.Post("/api/train", guarded([this](const Req& req, Res& res) {
                   const auto body = body_of(req);
                   const auto mode = parse_mode(body.value("mode", std::string{}));
                   if (!mode) fail(ErrorCode::kInvalidArgument, "mode must be add_class or calibrate");
                   const auto label = body.value("label", std::string{});
                   if (label.empty()) fail(ErrorCode::kInvalidArgument, "label is required");
                   send(res, 202, json{{"job_id", engine_.start_training(*mode, label)}});
                 }));
    server_.Get("/api/status", guarded([this](const Req&, Res& res) { send(res, 200, engine_.status()); }));
    server_.Get("/api/report/forgetting", guarded([this](const Req&, Res& res) {
                  const auto report = engine_.forgetting_report();
                  if (!report) fail(ErrorCode::kNotFound, "no training has completed yet");
                  send(res, 200, json(*report));
                }));
    server_.set_error_handler([](const Req&, Res& res) {
      if (res.body.empty()) send(res, res.status, error_body("not_found", "no such endpoint"));
    });
  }

  EdgeEngine& engine_;
  ServerOptions options_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

}  // namespace magneto::service
