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

// magneto: command-line driver for synthesis, training, evaluation, the
// local service and trace replay.
//
// Exit codes: 0 success, 1 domain error, 2 usage error, 3 I/O or network error.

#include <pthread.h>
#include <signal.h>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "magneto/edge_service.hpp"
#include "magneto/learner.hpp"
#include "magneto/synthetic.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace magneto;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitDomain = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NetworkError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_code_for(ErrorCode code) { return code == ErrorCode::kIo ? kExitIo : kExitDomain; }

std::string read_text(const fs::path& p) {
  const auto bytes = read_file(p);
  return std::string(bytes.begin(), bytes.end());
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot open '" + p.string() + "' for writing");
  out << text;
  if (!out) fail(ErrorCode::kIo, "write failed for '" + p.string() + "'");
}

Trace load_trace(const fs::path& p, std::size_t channels) {
  try {
    return parse_trace(read_text(p), channels);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kIo) throw;
    fail(e.code(), p.filename().string() + ": " + e.what());
  }
}

/// Trace files of a data directory (or a single file), sorted by name.
std::vector<fs::path> trace_files(const fs::path& p) {
  if (fs::is_regular_file(p)) return {p};
  if (!fs::is_directory(p)) throw UsageError("'" + p.string() + "' is not a file or directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(p)) {
    if (e.is_regular_file() && e.path().extension() == ".trace") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) fail(ErrorCode::kInvalidArgument, "no .trace files in '" + p.string() + "'");
  return out;
}

/// Windows grouped by the label in each trace header.
ClassWindows load_labeled(const fs::path& dir, const TrainConfig& cfg) {
  ClassWindows out;
  for (const auto& p : trace_files(dir)) {
    const auto t = load_trace(p, cfg.channels);
    if (!t.header.label) fail(ErrorCode::kInvalidArgument, p.filename().string() + ": trace has no label");
    auto ws = segment(t.frames, cfg.window_len, cfg.hop);
    auto& bucket = out[*t.header.label];
    bucket.insert(bucket.end(), std::make_move_iterator(ws.begin()), std::make_move_iterator(ws.end()));
  }
  return out;
}

std::vector<Window> load_unlabeled(const fs::path& p, const TrainConfig& cfg) {
  std::vector<Window> out;
  for (const auto& f : trace_files(p)) {
    const auto t = load_trace(f, cfg.channels);
    auto ws = segment(t.frames, cfg.window_len, cfg.hop);
    out.insert(out.end(), std::make_move_iterator(ws.begin()), std::make_move_iterator(ws.end()));
  }
  return out;
}

// Training flags shared by pretrain, add-class and calibrate. Unset flags
// leave the base config alone.
struct TrainFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch;
  std::optional<double> lr;
  std::optional<double> tau;
  std::optional<double> lambda;
  std::optional<std::size_t> k;
  std::optional<std::size_t> hop;
  std::optional<std::size_t> kernel;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "JSON training config; flags override it")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "random seed");
    app->add_option("--epochs", epochs, "training epochs for this command");
    app->add_option("--batch", batch, "batch size");
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--tau", tau, "contrastive temperature");
    app->add_option("--lambda", lambda, "distillation weight");
    app->add_option("--K", k, "exemplars per class");
    app->add_option("--hop", hop, "training window hop in frames");
    app->add_option("--kernel", kernel, "denoise kernel width (odd)");
  }

  TrainConfig apply(TrainConfig base, bool incremental) const {
    if (!config.empty()) {
      try {
        json::parse(read_text(config)).get_to(base);
      } catch (const json::exception& e) {
        fail(ErrorCode::kParse, "config '" + config + "': " + e.what());
      }
    }
    if (seed) base.seed = *seed;
    if (epochs) (incremental ? base.incremental_epochs : base.pretrain_epochs) = *epochs;
    if (batch) base.batch_size = *batch;
    if (lr) base.lr = *lr;
    if (tau) base.temperature = *tau;
    if (lambda) base.distill_weight = *lambda;
    if (k) base.capacity = *k;
    if (hop) base.hop = *hop;
    if (kernel) base.kernel = *kernel;
    base.validate();
    return base;
  }
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

void print_eval(const EvalReport& r) {
  std::cout << "overall accuracy " << fmt(r.overall_accuracy) << " over " << r.count << " windows\n";
  for (std::size_t i = 0; i < r.classes.size(); ++i) {
    std::cout << "  " << r.names[i] << ": ";
    if (r.per_class_accuracy[i]) {
      std::cout << fmt(*r.per_class_accuracy[i]) << " (" << r.counts[i] << ")\n";
    } else {
      std::cout << "n/a\n";
    }
  }
}

void print_forgetting(const ForgettingReport& r) {
  std::cout << "model version " << r.model_version_before << " -> " << r.model_version_after << "\n";
  std::cout << "new class " << r.new_class_name << " accuracy " << fmt(r.new_class_accuracy) << "\n";
  for (std::size_t i = 0; i < r.old_classes.size(); ++i) {
    std::cout << "  " << r.old_names[i] << ": " << fmt(r.before[i]) << " -> " << fmt(r.after[i]) << " (drop "
              << fmt(r.drops[i]) << ")\n";
  }
  std::cout << "max drop " << fmt(r.max_drop) << "\n";
}

void progress_line(const TrainProgress& p) {
  std::cerr << p.phase << " epoch " << p.epoch << "/" << p.epochs << " loss " << fmt(p.loss) << "\n";
}

// -- subcommands --------------------------------------------------------------

int cmd_synth(const std::string& spec_path, const fs::path& out_dir) {
  json spec;
  try {
    spec = json::parse(read_text(spec_path));
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, "spec '" + spec_path + "': " + e.what());
  }
  // Either a list of trace specs, or {"traces": [...], "sessions": {...}}
  // where sessions expands every spec into jittered recordings.
  const json& list = spec.is_array() ? spec : spec.at("traces");
  std::optional<synthetic::SessionPlan> plan;
  if (spec.is_object() && spec.contains("sessions")) {
    const auto& s = spec.at("sessions");
    plan = synthetic::SessionPlan{s.value("count", std::size_t{4}), s.value("seconds", 30.0), s.value("jitter", 0.15),
                                  s.value("seed", std::uint64_t{1})};
  }
  fs::create_directories(out_dir);
  std::map<std::string, int> used;
  std::size_t files = 0;
  for (const auto& entry : list) {
    const auto ts = synthetic::spec_from_json(entry);
    std::vector<Trace> traces;
    if (plan) {
      traces = synthetic::record_sessions(ts, *plan);
    } else {
      traces.push_back(synthesize_trace(ts));
    }
    for (std::size_t s = 0; s < traces.size(); ++s) {
      std::string stem = ts.class_name;
      if (plan) stem += "_s" + std::to_string(s);
      if (used[stem]++ > 0) stem += "_" + std::to_string(used[stem] - 1);
      write_text(out_dir / (stem + ".trace"), format_trace(traces[s]));
      ++files;
    }
  }
  std::cout << "wrote " << files << " trace files to " << out_dir.string() << "\n";
  return kExitOk;
}

int cmd_pretrain(const fs::path& data, const fs::path& out, const TrainFlags& flags, bool quiet) {
  const auto cfg = flags.apply(TrainConfig{}, false);
  const auto windows = load_labeled(data, cfg);
  const auto bundle = pretrain(windows, cfg, quiet ? ProgressFn{} : ProgressFn(progress_line));
  const auto sizes = save_bundle(bundle, out);
  std::cout << "pretrained " << bundle.registry().size() << " activities; bundle " << out.string() << " ("
            << describe_sizes(sizes) << ")\n";
  return kExitOk;
}

int cmd_eval(const fs::path& bundle_path, const fs::path& data, bool as_json) {
  const auto bundle = load_bundle(bundle_path);
  auto by_name = load_labeled(data, bundle.config);
  std::vector<Window> windows;
  for (auto& [name, ws] : by_name) {
    const auto id = bundle.registry().find(name);
    if (!id) {
      std::cerr << "warning: skipping " << ws.size() << " windows of unregistered activity '" << name << "'\n";
      continue;
    }
    for (auto& w : ws) {
      w.label = *id;
      windows.push_back(std::move(w));
    }
  }
  const auto report = evaluate(bundle, windows);
  if (as_json) {
    std::cout << json(report).dump(2) << "\n";
  } else {
    print_eval(report);
  }
  return kExitOk;
}

struct UpdateArgs {
  fs::path bundle;
  std::string label;
  fs::path data;
  fs::path out;
  fs::path probe;
  bool as_json = false;
  bool quiet = false;
  TrainFlags flags;
};

// Re-scores the report on held-out traces when --probe is given.
void apply_probe(UpdateResult& res, const EdgeBundle& before, const UpdateArgs& a) {
  if (a.probe.empty()) return;
  const auto by_name = load_labeled(a.probe, before.config);
  std::map<ActivityId, std::vector<Exemplar>> old_probe;
  std::vector<Exemplar> new_probe;
  const auto target = *res.bundle.registry().find(a.label);
  for (const auto& [name, ws] : by_name) {
    const auto id = res.bundle.registry().find(name);
    if (!id) continue;
    auto feats = featurize(ws, before.config.kernel, before.normalizer);
    if (*id == target) {
      new_probe = std::move(feats);
    } else {
      old_probe[*id] = std::move(feats);
    }
  }
  res.report = forgetting_report(Recognizer(std::make_shared<const EdgeBundle>(before)),
                                 Recognizer(std::make_shared<const EdgeBundle>(res.bundle)), old_probe, target, new_probe);
}

int cmd_update(const UpdateArgs& a, bool calibrate) {
  const auto bundle = load_bundle(a.bundle);
  const auto cfg = a.flags.apply(bundle.config, true);
  const auto windows = load_unlabeled(a.data, bundle.config);
  const auto progress = a.quiet ? ProgressFn{} : ProgressFn(progress_line);
  UpdateResult res;
  if (calibrate) {
    const auto id = bundle.registry().find(a.label);
    if (!id) fail(ErrorCode::kNotFound, "unknown activity '" + a.label + "'");
    res = calibrate_class(bundle, *id, windows, cfg, progress);
  } else {
    if (!detail::valid_label(a.label)) fail(ErrorCode::kInvalidArgument, "invalid label '" + a.label + "'");
    res = learn_class(bundle, a.label, windows, cfg, progress);
  }
  apply_probe(res, bundle, a);
  const auto sizes = save_bundle(res.bundle, a.out);
  if (a.as_json) {
    std::cout << json(res.report).dump(2) << "\n";
  } else {
    print_forgetting(res.report);
    std::cout << "bundle " << a.out.string() << " (" << describe_sizes(sizes) << ")\n";
  }
  return kExitOk;
}

int cmd_serve(const fs::path& bundle_path, const std::string& host, int port, const std::string& autosave,
              const TrainFlags& flags) {
  auto bundle = load_bundle(bundle_path);
  service::EngineOptions opts;
  opts.train = flags.apply(bundle.config, true);

  // Route SIGINT/SIGTERM to a waiter thread instead of an async handler.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  service::EdgeEngine engine(std::move(bundle), opts);
  service::EdgeServer server(engine, {host, port});
  const int bound = server.bind();
  std::cout << "serving on http://" << host << ":" << bound << "/api" << std::endl;
  std::atomic<bool> signalled{false};
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    signalled = true;
    server.stop();
  });
  server.listen();
  // listen() can also return on a socket error; wake the waiter then.
  if (!signalled) pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  if (!autosave.empty()) {
    const auto sizes = save_bundle(*engine.bundle(), autosave);
    std::cout << "saved bundle to " << autosave << " (" << describe_sizes(sizes) << ")\n";
  } else {
    std::cout << "stopped; nothing saved\n";
  }
  return kExitOk;
}

int cmd_replay(const fs::path& trace_path, const std::string& target, double speed, std::size_t chunk) {
  if (!(speed > 0)) throw UsageError("--speed must be > 0");
  if (chunk == 0) throw UsageError("--chunk must be >= 1");
  const auto trace = parse_trace(read_text(trace_path));
  httplib::Client client(target);
  if (!client.is_valid()) throw UsageError("invalid target URL '" + target + "'");
  client.set_connection_timeout(2);

  const auto start = std::chrono::steady_clock::now();
  const auto t0 = trace.frames.empty() ? 0 : trace.frames.front().timestamp_us;
  std::size_t windows = 0;
  for (std::size_t i = 0; i < trace.frames.size(); i += chunk) {
    const auto n = std::min(chunk, trace.frames.size() - i);
    const std::span<const SensorFrame> part(trace.frames.data() + i, n);
    // Send a chunk once its last frame is due.
    const auto due = std::chrono::duration<double, std::micro>(static_cast<double>(part.back().timestamp_us - t0) / speed);
    std::this_thread::sleep_until(start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(due));
    const auto res = client.Post("/api/frames", service::frames_to_json(part).dump(), "application/json");
    if (!res) throw NetworkError("cannot reach " + target + ": " + httplib::to_string(res.error()));
    if (res->status != 200) {
      std::string message = res->body;
      try {
        message = json::parse(res->body).value("message", res->body);
      } catch (const json::exception&) {
      }
      fail(ErrorCode::kInvalidArgument, "service rejected frames (" + std::to_string(res->status) + "): " + message);
    }
    windows += json::parse(res->body).at("windows_emitted").get<std::size_t>();
  }
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << "replayed " << trace.frames.size() << " frames in " << fmt(elapsed) << " s; " << windows
            << " windows emitted\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"magneto: on-device activity recognition with incremental learning"};
  app.require_subcommand(1);

  std::string spec_path;
  fs::path out_dir;
  auto* synth = app.add_subcommand("synth", "generate labeled synthetic trace files");
  synth->add_option("--spec", spec_path, "JSON trace specs")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", out_dir, "output directory")->required();

  fs::path data, out, bundle_path;
  bool quiet = false;
  TrainFlags pre_flags;
  auto* pre = app.add_subcommand("pretrain", "train the initial bundle from labeled traces");
  pre->add_option("--data", data, "directory of labeled .trace files")->required()->check(CLI::ExistingPath);
  pre->add_option("--out", out, "bundle to write")->required();
  pre->add_flag("--quiet", quiet, "no per-epoch progress");
  pre_flags.attach(pre);

  bool as_json = false;
  auto* ev = app.add_subcommand("eval", "evaluate a bundle on labeled traces");
  ev->add_option("--bundle", bundle_path, "bundle file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data, "directory of labeled .trace files")->required()->check(CLI::ExistingPath);
  ev->add_flag("--json", as_json, "machine-readable output");

  UpdateArgs add_args, cal_args;
  auto update_cmd = [](CLI::App& parent, const char* name, const char* help, UpdateArgs& a) {
    auto* c = parent.add_subcommand(name, help);
    c->add_option("--bundle", a.bundle, "input bundle")->required()->check(CLI::ExistingFile);
    c->add_option("--label", a.label, "activity name")->required();
    c->add_option("--data", a.data, "recording trace file or directory")->required()->check(CLI::ExistingPath);
    c->add_option("--out", a.out, "bundle to write")->required();
    c->add_option("--probe", a.probe, "held-out labeled traces for the forgetting report")->check(CLI::ExistingPath);
    c->add_flag("--json", a.as_json, "machine-readable report");
    c->add_flag("--quiet", a.quiet, "no per-epoch progress");
    a.flags.attach(c);
    return c;
  };
  auto* add = update_cmd(app, "add-class", "learn a new activity from a recording", add_args);
  auto* cal = update_cmd(app, "calibrate", "replace an activity's exemplars with a new recording and retrain", cal_args);

  std::string host = "127.0.0.1", autosave;
  int port = service::kDefaultPort;
  TrainFlags serve_flags;
  auto* serve = app.add_subcommand("serve", "run the local HTTP service");
  serve->add_option("--bundle", bundle_path, "bundle file")->required()->check(CLI::ExistingFile);
  serve->add_option("--port", port, "TCP port (0 picks a free one)")->check(CLI::Range(0, 65535));
  serve->add_option("--host", host, "bind address; anything but loopback exposes the service to the network");
  serve->add_option("--autosave", autosave, "write the current bundle here on shutdown");
  serve_flags.attach(serve);

  fs::path trace_path;
  std::string target = "http://127.0.0.1:8787";
  double speed = 1.0;
  std::size_t chunk = 12;
  auto* replay = app.add_subcommand("replay", "stream a trace into a running service");
  replay->add_option("--trace", trace_path, "trace file")->required()->check(CLI::ExistingFile);
  replay->add_option("--target", target, "service base URL");
  replay->add_option("--speed", speed, "playback speed multiplier");
  replay->add_option("--chunk", chunk, "frames per request");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(spec_path, out_dir);
    if (*pre) return cmd_pretrain(data, out, pre_flags, quiet);
    if (*ev) return cmd_eval(bundle_path, data, as_json);
    if (*add) return cmd_update(add_args, false);
    if (*cal) return cmd_update(cal_args, true);
    if (*serve) return cmd_serve(bundle_path, host, port, autosave, serve_flags);
    if (*replay) return cmd_replay(trace_path, target, speed, chunk);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NetworkError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.code()) << "): " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const json::exception& e) {
    std::cerr << "error (parse): " << e.what() << "\n";
    return kExitDomain;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error (io): " << e.what() << "\n";
    return kExitIo;
  }
  return kExitUsage;
}
