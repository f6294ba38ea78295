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

// Synthetic activity traces standing in for recorded sensor data, and the
// JSON form of TraceSpec used by `magneto synth`.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "magneto/error.hpp"
#include "magneto/ingest.hpp"

namespace magneto {

inline void to_json(nlohmann::json& j, const ChannelSpec& c) {
  j = nlohmann::json{{"base", c.base}, {"amplitude", c.amplitude}, {"freq_hz", c.freq_hz}, {"noise_sigma", c.noise_sigma}};
}

inline void from_json(const nlohmann::json& j, ChannelSpec& c) {
  c.base = j.value("base", 0.0);
  c.amplitude = j.value("amplitude", 0.0);
  c.freq_hz = j.value("freq_hz", 0.0);
  c.noise_sigma = j.value("noise_sigma", 0.0);
}

}  // namespace magneto

namespace magneto::synthetic {

using json = nlohmann::json;

inline json spec_to_json(const TraceSpec& s) {
  return json{{"class_name", s.class_name}, {"duration_s", s.duration_s}, {"seed", s.seed},
              {"rate_hz", s.rate_hz}, {"channels", s.channels}};
}

inline TraceSpec spec_from_json(const json& j) {
  TraceSpec s;
  try {
    s.class_name = j.at("class_name").get<std::string>();
    s.duration_s = j.at("duration_s").get<double>();
    s.seed = j.value("seed", std::uint64_t{0});
    s.rate_hz = j.value("rate_hz", kDefaultRateHz);
    s.channels = j.at("channels").get<std::vector<ChannelSpec>>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, std::string("trace spec: ") + e.what());
  }
  if (!detail::valid_label(s.class_name)) fail(ErrorCode::kParse, "trace spec: invalid class name '" + s.class_name + "'");
  return s;
}

// Channel layout: acc x/y/z, gyro x/y/z, mag x/y/z, acc magnitude.
inline ChannelSpec ch(double base, double amplitude, double freq, double sigma) { return {base, amplitude, freq, sigma}; }

/// The five pretrained activities plus "gesture_hi" as a user-added one.
inline std::vector<TraceSpec> demo_classes() {
  return {
      {"drive", 1.0, {ch(0.4, 0.3, 11, 0.35), ch(0.1, 0.3, 11, 0.35), ch(9.8, 0.4, 11, 0.35), ch(0, 0.05, 0.2, 0.05),
                      ch(0, 0.05, 0.2, 0.05), ch(0.05, 0.1, 0.1, 0.05), ch(22, 3, 0.05, 1.5), ch(4, 3, 0.05, 1.5),
                      ch(36, 2, 0.05, 1.5), ch(9.85, 0.4, 11, 0.35)}, 0},
      {"e_scooter", 1.0, {ch(0.2, 0.8, 6, 0.5), ch(0.1, 0.6, 6, 0.5), ch(9.8, 1.0, 6, 0.5), ch(0, 0.15, 0.5, 0.08),
                          ch(0, 0.15, 0.5, 0.08), ch(0, 0.2, 0.3, 0.08), ch(27, 2, 0.1, 1.2), ch(-2, 2, 0.1, 1.2),
                          ch(39, 2, 0.1, 1.2), ch(9.9, 1.0, 6, 0.5)}, 0},
      {"run", 1.0, {ch(0, 4.0, 2.8, 1.0), ch(0.5, 3.0, 2.8, 1.0), ch(9.8, 7.0, 2.8, 1.2), ch(0, 1.8, 2.8, 0.3),
                    ch(0, 1.2, 1.4, 0.3), ch(0, 1.0, 1.4, 0.3), ch(25, 4, 1.4, 1.5), ch(-6, 4, 1.4, 1.5),
                    ch(41, 3, 1.4, 1.5), ch(11.5, 7.0, 2.8, 1.2)}, 0},
      {"still", 1.0, {ch(0, 0, 0, 0.05), ch(0, 0, 0, 0.05), ch(9.81, 0, 0, 0.05), ch(0, 0, 0, 0.01), ch(0, 0, 0, 0.01),
                      ch(0, 0, 0, 0.01), ch(30, 0, 0, 0.8), ch(-10, 0, 0, 0.8), ch(40, 0, 0, 0.8),
                      ch(9.81, 0, 0, 0.05)}, 0},
      {"walk", 1.0, {ch(0, 1.5, 1.9, 0.5), ch(0.3, 1.0, 1.9, 0.5), ch(9.8, 2.5, 1.9, 0.6), ch(0, 0.6, 1.9, 0.15),
                     ch(0, 0.4, 0.95, 0.15), ch(0, 0.3, 0.95, 0.15), ch(26, 2, 0.95, 1.2), ch(-7, 2, 0.95, 1.2),
                     ch(41, 1.5, 0.95, 1.2), ch(10.1, 2.5, 1.9, 0.6)}, 0},
      {"gesture_hi", 1.0, {ch(0, 2.0, 1.5, 0.4), ch(0.2, 0.6, 1.5, 0.3), ch(9.8, 0.8, 1.5, 0.3), ch(0, 0.4, 1.5, 0.1),
                           ch(0, 0.2, 1.5, 0.1), ch(0, 2.5, 1.5, 0.2), ch(29, 1, 0.5, 0.9), ch(-9, 1, 0.5, 0.9),
                           ch(40, 1, 0.5, 0.9), ch(10.0, 1.2, 3.0, 0.3)}, 0},
  };
}

/// Copies `spec` with every amplitude, frequency, base and noise level
/// scaled by an independent factor in [1 - jitter, 1 + jitter]. Used to
/// give each recording session of the same activity its own character.
inline TraceSpec jittered(const TraceSpec& spec, double jitter, std::uint64_t seed) {
  TraceSpec out = spec;
  out.seed = seed;
  std::mt19937_64 rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
  std::uniform_real_distribution<double> u(1.0 - jitter, 1.0 + jitter);
  for (auto& c : out.channels) {
    c.base *= u(rng);
    c.amplitude *= u(rng);
    c.freq_hz *= u(rng);
    c.noise_sigma *= u(rng);
  }
  return out;
}

// FNV-1a; stable across platforms, unlike std::hash.
inline std::uint64_t name_hash(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct SessionPlan {
  std::size_t sessions = 4;
  double seconds_per_session = 30.0;
  double jitter = 0.15;
  std::uint64_t seed = 1;
};

/// Several jittered recording sessions of one activity, each synthesized
/// and returned as its own trace.
inline std::vector<Trace> record_sessions(const TraceSpec& base, const SessionPlan& plan) {
  std::vector<Trace> out;
  for (std::size_t s = 0; s < plan.sessions; ++s) {
    auto spec = jittered(base, plan.jitter, plan.seed * 1000003ULL + s * 7919ULL + name_hash(base.class_name));
    spec.duration_s = plan.seconds_per_session;
    out.push_back(synthesize_trace(spec));
  }
  return out;
}

/// Segments every trace and labels nothing; callers attach labels.
inline std::vector<Window> windows_of(const std::vector<Trace>& traces, std::size_t window_len, std::size_t hop) {
  std::vector<Window> out;
  for (const auto& t : traces) {
    auto w = segment(t.frames, window_len, hop);
    out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  return out;
}

}  // namespace magneto::synthetic
