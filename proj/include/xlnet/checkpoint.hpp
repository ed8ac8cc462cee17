// Copyright 2026 The xlnet-desk Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Named-tensor checkpoint files.
//
//   "XLNT" | u16 version | u32 count | count x record
//   record: u16 name_len | name | u8 rank | rank x u32 dim | u8 dtype | data
//
// dtype 0 is 32-bit float, 1 is 64-bit float. Everything is little-endian.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "xlnet/tensor.hpp"

namespace xlnet {

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

inline DType parse_dtype(const std::string& s) {
  if (s == "f32" || s == "float32") return DType::kF32;
  if (s == "f64" || s == "float64") return DType::kF64;
  throw std::invalid_argument("unknown checkpoint dtype '" + s + "' (expected f32 or f64)");
}

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw std::runtime_error("checkpoint: truncated file");
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const NamedTensors& tensors, DType dtype) {
  std::string out = "XLNT";
  detail::put<std::uint16_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw std::invalid_argument("checkpoint: name too long");
    if (t.rank() > 0xFF) throw std::invalid_argument("checkpoint: rank too large");
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
    for (double x : t.data()) {
      if (dtype == DType::kF32) {
        detail::put<float>(out, static_cast<float>(x));
      } else {
        detail::put<double>(out, x);
      }
    }
  }
  return out;
}

inline NamedTensors decode_checkpoint(std::string bytes) {
  detail::Reader r(std::move(bytes));
  if (r.get_string(4) != "XLNT") throw std::runtime_error("checkpoint: bad magic");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_string(r.get<std::uint16_t>());
    const auto rank = r.get<std::uint8_t>();
    Shape shape;
    for (std::uint8_t k = 0; k < rank; ++k) shape.push_back(r.get<std::uint32_t>());
    const auto tag = r.get<std::uint8_t>();
    Tensor t(shape);
    for (double& x : t.data()) {
      if (tag == 0) {
        x = static_cast<double>(r.get<float>());
      } else if (tag == 1) {
        x = r.get<double>();
      } else {
        throw std::runtime_error("checkpoint: unknown dtype tag " + std::to_string(tag));
      }
    }
    out.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return out;
}

inline void write_checkpoint(const std::string& path, const NamedTensors& tensors, DType dtype) {
  const std::string bytes = encode_checkpoint(tensors, dtype);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot rename " + tmp + " to " + path);
}

inline NamedTensors read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace xlnet
