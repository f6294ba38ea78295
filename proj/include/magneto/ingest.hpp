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

// Sensor traces: parsing, synthesis, and segmentation into fixed-length
// windows (batch and streaming).

#pragma once

#include <charconv>
#include <cmath>
#include <compare>
#include <cstdint>
#include <deque>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "magneto/error.hpp"

namespace magneto {

inline constexpr std::size_t kDefaultChannels = 10;
inline constexpr std::size_t kDefaultWindowLen = 120;
inline constexpr double kDefaultRateHz = 120.0;

struct ActivityId {
  std::uint32_t value = 0;
  auto operator<=>(const ActivityId&) const = default;
};

struct SensorFrame {
  std::int64_t timestamp_us = 0;
  std::vector<double> channels;

  bool operator==(const SensorFrame&) const = default;
};

/// C x W block of samples, stored channel-major so each channel is a
/// contiguous span. end_us is exclusive (last timestamp + 1).
struct Window {
  std::size_t num_channels = 0;
  std::size_t width = 0;
  std::vector<double> values;
  std::int64_t start_us = 0;
  std::int64_t end_us = 0;
  std::optional<ActivityId> label;

  std::span<const double> channel(std::size_t c) const {
    return {values.data() + c * width, width};
  }
  std::span<double> channel(std::size_t c) { return {values.data() + c * width, width}; }
  double at(std::size_t c, std::size_t t) const { return values[c * width + t]; }

  bool operator==(const Window&) const = default;
};

struct TraceHeader {
  std::size_t channels = kDefaultChannels;
  double rate_hz = kDefaultRateHz;
  std::optional<std::string> label;
};

struct Trace {
  TraceHeader header;
  std::vector<SensorFrame> frames;
};

namespace detail {

inline std::string line_error(std::size_t line, const std::string& what) {
  return "line " + std::to_string(line) + ": " + what;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

template <typename T>
bool parse_number(std::string_view text, T& out) {
  if (text.empty()) return false;
  if (text.front() == '+') text.remove_prefix(1);
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline bool valid_label(std::string_view name) {
  if (name.empty() || name == "-") return false;
  for (char ch : name) {
    if (ch == ' ' || ch == '\t' || ch == ',' || ch == '\n' || ch == '\r') return false;
  }
  return true;
}

}  // namespace detail

/// Parses a `#magneto-trace v1` text file. Errors carry the 1-based file
/// line number. `expected_channels`, when given, must match the header.
inline Trace parse_trace(std::string_view text,
                         std::optional<std::size_t> expected_channels = std::nullopt) {
  using detail::line_error;
  Trace trace;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool have_header = false;
  while (pos < text.size()) {
    auto eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;

    if (!have_header) {
      auto tokens = detail::split(line, ' ');
      if (tokens.size() != 5 || tokens[0] != "#magneto-trace" || tokens[1] != "v1") {
        fail(ErrorCode::kParse, line_error(line_no, "malformed header, expected '#magneto-trace v1 channels=<C> rate_hz=<R> label=<name|->'"));
      }
      auto value_of = [&](std::string_view tok, std::string_view key) -> std::string_view {
        if (tok.substr(0, key.size()) != key) {
          fail(ErrorCode::kParse, line_error(line_no, "malformed header, expected '" + std::string(key) + "'"));
        }
        return tok.substr(key.size());
      };
      std::size_t channels = 0;
      if (!detail::parse_number(value_of(tokens[2], "channels="), channels) || channels == 0) {
        fail(ErrorCode::kParse, line_error(line_no, "malformed header, bad channel count"));
      }
      double rate = 0;
      if (!detail::parse_number(value_of(tokens[3], "rate_hz="), rate) || !(rate > 0) || !std::isfinite(rate)) {
        fail(ErrorCode::kParse, line_error(line_no, "malformed header, bad rate_hz"));
      }
      auto label = value_of(tokens[4], "label=");
      if (label.empty()) fail(ErrorCode::kParse, line_error(line_no, "malformed header, empty label"));
      trace.header.channels = channels;
      trace.header.rate_hz = rate;
      if (label != "-") trace.header.label = std::string(label);
      if (expected_channels && *expected_channels != channels) {
        fail(ErrorCode::kParse, line_error(line_no, "wrong channel count: header declares " + std::to_string(channels) +
                                                       ", expected " + std::to_string(*expected_channels)));
      }
      have_header = true;
      continue;
    }

    // A single trailing newline at end of file is allowed; blank lines elsewhere are not.
    if (line.empty()) {
      if (pos >= text.size()) break;
      fail(ErrorCode::kParse, line_error(line_no, "empty data row"));
    }
    auto fields = detail::split(line, ',');
    if (fields.size() != trace.header.channels + 1) {
      fail(ErrorCode::kParse, line_error(line_no, "wrong channel count: expected " + std::to_string(trace.header.channels) +
                                                     ", got " + std::to_string(fields.size() - 1)));
    }
    SensorFrame frame;
    if (!detail::parse_number(fields[0], frame.timestamp_us)) {
      fail(ErrorCode::kParse, line_error(line_no, "bad timestamp '" + std::string(fields[0]) + "'"));
    }
    if (!trace.frames.empty() && frame.timestamp_us < trace.frames.back().timestamp_us) {
      fail(ErrorCode::kParse, line_error(line_no, "non-monotone timestamp " + std::to_string(frame.timestamp_us) +
                                                     " after " + std::to_string(trace.frames.back().timestamp_us)));
    }
    frame.channels.resize(trace.header.channels);
    for (std::size_t c = 0; c < trace.header.channels; ++c) {
      double v = 0;
      if (!detail::parse_number(fields[c + 1], v)) {
        fail(ErrorCode::kParse, line_error(line_no, "bad value '" + std::string(fields[c + 1]) + "' in channel " + std::to_string(c + 1)));
      }
      if (!std::isfinite(v)) {
        fail(ErrorCode::kParse, line_error(line_no, "non-finite value in channel " + std::to_string(c + 1)));
      }
      frame.channels[c] = v;
    }
    trace.frames.push_back(std::move(frame));
  }
  if (!have_header) fail(ErrorCode::kParse, line_error(1, "malformed header, file is empty"));
  return trace;
}

/// Writes frames in the trace format. Values use shortest round-trip
/// formatting, so parse_trace(format_trace(t)) reproduces them bit-exactly.
inline std::string format_trace(const Trace& trace) {
  std::string out = "#magneto-trace v1 channels=" + std::to_string(trace.header.channels) +
                    " rate_hz=" + detail::format_double(trace.header.rate_hz) +
                    " label=" + trace.header.label.value_or("-") + "\n";
  for (const auto& f : trace.frames) {
    require(f.channels.size() == trace.header.channels, "frame channel count does not match header");
    out += std::to_string(f.timestamp_us);
    for (double v : f.channels) {
      out += ',';
      out += detail::format_double(v);
    }
    out += '\n';
  }
  return out;
}

inline Window make_window(std::span<const SensorFrame> frames) {
  require(!frames.empty(), "window needs at least one frame");
  Window w;
  w.num_channels = frames.front().channels.size();
  w.width = frames.size();
  w.values.resize(w.num_channels * w.width);
  for (std::size_t t = 0; t < w.width; ++t) {
    require(frames[t].channels.size() == w.num_channels, "inconsistent channel count within window");
    for (std::size_t c = 0; c < w.num_channels; ++c) w.values[c * w.width + t] = frames[t].channels[c];
  }
  w.start_us = frames.front().timestamp_us;
  w.end_us = frames.back().timestamp_us + 1;
  return w;
}

inline std::size_t window_count(std::size_t n, std::size_t window_len, std::size_t hop) {
  return n < window_len ? 0 : (n - window_len) / hop + 1;
}

/// Consecutive windows starting at 0, hop, 2*hop, ...; a trailing remainder
/// that cannot fill a window is dropped.
inline std::vector<Window> segment(std::span<const SensorFrame> frames, std::size_t window_len, std::size_t hop) {
  require(window_len >= 2, "segment: window_len must be >= 2");
  require(hop >= 1 && hop <= window_len, "segment: hop must be in [1, window_len]");
  std::vector<Window> out;
  const auto count = window_count(frames.size(), window_len, hop);
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_window(frames.subspan(i * hop, window_len)));
  return out;
}

/// Single-owner streaming windower. Emits a window each time the buffer
/// holds window_len frames, then advances by hop.
class StreamWindower {
 public:
  explicit StreamWindower(std::size_t channels = kDefaultChannels, std::size_t window_len = kDefaultWindowLen,
                          std::optional<std::size_t> hop = std::nullopt)
      : channels_(channels), window_len_(window_len), hop_(hop.value_or(window_len)) {
    require(window_len_ >= 2, "StreamWindower: window_len must be >= 2");
    require(hop_ >= 1 && hop_ <= window_len_, "StreamWindower: hop must be in [1, window_len]");
  }

  /// Rejects (and leaves state unchanged) on channel mismatch or timestamp regression.
  std::optional<Window> push(const SensorFrame& frame) {
    if (frame.channels.size() != channels_) {
      fail(ErrorCode::kConflict, "channel count mismatch: expected " + std::to_string(channels_) + ", got " +
                                     std::to_string(frame.channels.size()));
    }
    for (double v : frame.channels) {
      if (!std::isfinite(v)) fail(ErrorCode::kInvalidArgument, "non-finite channel value");
    }
    if (last_ts_ && frame.timestamp_us < *last_ts_) {
      fail(ErrorCode::kInvalidArgument, "timestamp regression: " + std::to_string(frame.timestamp_us) + " < " +
                                            std::to_string(*last_ts_));
    }
    last_ts_ = frame.timestamp_us;
    buffer_.push_back(frame);
    if (buffer_.size() < window_len_) return std::nullopt;
    std::vector<SensorFrame> slice(buffer_.begin(), buffer_.end());
    Window w = make_window(slice);
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(hop_));
    return w;
  }

  void reset() {
    buffer_.clear();
    last_ts_.reset();
  }

  std::size_t buffered() const { return buffer_.size(); }
  std::size_t channels() const { return channels_; }
  std::size_t window_len() const { return window_len_; }
  std::optional<std::int64_t> last_timestamp() const { return last_ts_; }

 private:
  std::size_t channels_;
  std::size_t window_len_;
  std::size_t hop_;
  std::deque<SensorFrame> buffer_;
  std::optional<std::int64_t> last_ts_;
};

struct ChannelSpec {
  double base = 0.0;
  double amplitude = 0.0;
  double freq_hz = 0.0;
  double noise_sigma = 0.0;
};

struct TraceSpec {
  std::string class_name;
  double duration_s = 1.0;
  std::vector<ChannelSpec> channels;
  std::uint64_t seed = 0;
  double rate_hz = kDefaultRateHz;
};

/// value = base + amplitude * sin(2*pi*freq*t) + N(0, sigma), per channel,
/// frame i at t = i / rate. Deterministic in the seed.
inline Trace synthesize_trace(const TraceSpec& spec) {
  require(spec.duration_s > 0, "TraceSpec: duration_s must be > 0");
  require(spec.rate_hz > 0, "TraceSpec: rate_hz must be > 0");
  require(!spec.channels.empty(), "TraceSpec: needs at least one channel");
  for (const auto& ch : spec.channels) require(ch.noise_sigma >= 0, "TraceSpec: noise sigma must be >= 0");

  Trace trace;
  trace.header.channels = spec.channels.size();
  trace.header.rate_hz = spec.rate_hz;
  if (!spec.class_name.empty()) trace.header.label = spec.class_name;

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto n = static_cast<std::size_t>(std::llround(spec.duration_s * spec.rate_hz));
  trace.frames.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& f = trace.frames[i];
    f.timestamp_us = static_cast<std::int64_t>(static_cast<double>(i) * 1e6 / spec.rate_hz);
    f.channels.resize(spec.channels.size());
    const double t = static_cast<double>(i) / spec.rate_hz;
    for (std::size_t c = 0; c < spec.channels.size(); ++c) {
      const auto& ch = spec.channels[c];
      double v = ch.base + ch.amplitude * std::sin(2.0 * std::numbers::pi * ch.freq_hz * t);
      if (ch.noise_sigma > 0) v += ch.noise_sigma * gauss(rng);
      f.channels[c] = v;
    }
  }
  return trace;
}

}  // namespace magneto
