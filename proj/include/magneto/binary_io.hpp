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

// Little-endian byte encoding shared by the model, support-set and bundle
// file formats.

#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "magneto/error.hpp"

namespace magneto {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

using Bytes = std::vector<std::uint8_t>;

inline std::uint32_t crc32_of(std::span<const std::uint8_t> data) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large buffers.
  std::size_t offset = 0;
  while (offset < data.size()) {
    const std::size_t n = std::min<std::size_t>(data.size() - offset, 1u << 30);
    crc = ::crc32(crc, data.data() + offset, static_cast<uInt>(n));
    offset += n;
  }
  return static_cast<std::uint32_t>(crc);
}

class ByteWriter {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put_array(std::span<const T> values) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
    buf_.insert(buf_.end(), p, p + values.size_bytes());
  }

  void put_bytes(std::span<const std::uint8_t> bytes) {
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
  }

  void put_magic(std::string_view magic) {
    buf_.insert(buf_.end(), magic.begin(), magic.end());
  }

  /// u16 length prefix followed by raw UTF-8.
  void put_string(std::string_view s) {
    require(s.size() <= 0xFFFF, "string too long for u16 length prefix");
    put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }

  /// Appends CRC32 of everything written so far.
  void put_crc() { put<std::uint32_t>(crc32_of(buf_)); }

  std::size_t size() const { return buf_.size(); }
  const Bytes& bytes() const& { return buf_; }
  Bytes bytes() && { return std::move(buf_); }

 private:
  Bytes buf_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string context)
      : data_(data), context_(std::move(context)) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void get_array(std::span<T> out) {
    need(out.size_bytes());
    std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }

  std::span<const std::uint8_t> get_bytes(std::size_t n) {
    need(n);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::string get_string() {
    const auto n = get<std::uint16_t>();
    auto raw = get_bytes(n);
    return std::string(raw.begin(), raw.end());
  }

  void expect_magic(std::string_view magic) {
    if (data_.size() - pos_ < magic.size() ||
        std::memcmp(data_.data() + pos_, magic.data(), magic.size()) != 0) {
      fail(ErrorCode::kFormat, context_ + ": bad magic, expected '" + std::string(magic) + "'");
    }
    pos_ += magic.size();
  }

  /// Verifies that the trailing u32 equals CRC32 of all preceding bytes.
  /// Call before decoding so corruption is reported as a checksum error.
  static void verify_trailing_crc(std::span<const std::uint8_t> data, const std::string& context) {
    if (data.size() < 4) fail(ErrorCode::kTruncated, context + ": truncated (no checksum)");
    const auto payload = data.first(data.size() - 4);
    std::uint32_t stored;
    std::memcpy(&stored, data.data() + payload.size(), 4);
    if (stored != crc32_of(payload)) fail(ErrorCode::kChecksum, context + ": checksum mismatch");
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      fail(ErrorCode::kTruncated, context_ + ": truncated at byte " + std::to_string(pos_));
    }
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string context_;
};

}  // namespace magneto
