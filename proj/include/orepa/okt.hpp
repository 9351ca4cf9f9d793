/**
 * Copyright (c) orepa contributors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

// OKT1 tensor container:
//   bytes 0..7      ASCII "OREPAKT1"
//   bytes 8..11     little-endian u32 L, length of the JSON header
//   bytes 12..12+L  UTF-8 JSON {"dtype","groups","layout","shape"}
//   remainder       raw little-endian scalars, row-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "orepa/tensor.hpp"

namespace orepa {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kOktMagic[8] = {'O', 'R', 'E', 'P', 'A', 'K', 'T', '1'};

struct OktHeader {
  DType dtype = DType::f64;
  std::vector<std::size_t> shape;
  std::string layout;  // "OIHW", "CHW" or "BCHW"
  std::size_t groups = 1;

  bool operator==(const OktHeader&) const = default;
};

namespace detail {

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
    std::memcpy(&v, b, sizeof(U));
  }
  return v;
}

template <Scalar T>
void append_scalars(std::vector<std::uint8_t>& out, std::span<const T> data) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  const std::size_t base = out.size();
  out.resize(base + data.size() * sizeof(T));
  for (std::size_t i = 0; i < data.size(); ++i) {
    Bits b = to_little(std::bit_cast<Bits>(data[i]));
    std::memcpy(out.data() + base + i * sizeof(T), &b, sizeof(T));
  }
}

template <Scalar T>
std::vector<T> read_scalars(std::span<const std::uint8_t> bytes, std::size_t count) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::vector<T> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    Bits b;
    std::memcpy(&b, bytes.data() + i * sizeof(T), sizeof(T));
    out[i] = std::bit_cast<T>(to_little(b));
  }
  return out;
}

inline std::vector<std::uint8_t> encode_with_header(const OktHeader& h) {
  nlohmann::json j;
  j["dtype"] = dtype_name(h.dtype);
  j["shape"] = h.shape;
  j["layout"] = h.layout;
  j["groups"] = h.groups;
  const std::string text = j.dump();
  std::vector<std::uint8_t> out(kOktMagic, kOktMagic + 8);
  const std::uint32_t len = to_little(static_cast<std::uint32_t>(text.size()));
  out.resize(12);
  std::memcpy(out.data() + 8, &len, 4);
  out.insert(out.end(), text.begin(), text.end());
  return out;
}

inline std::size_t payload_offset(std::span<const std::uint8_t> bytes) {
  std::uint32_t len;
  std::memcpy(&len, bytes.data() + 8, 4);
  return 12 + to_little(len);
}

}  // namespace detail

/// Parse and validate the header; checks that the payload length matches.
inline OktHeader decode_okt_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kOktMagic, 8) != 0)
    throw FormatError("not an OKT1 file (bad magic)");
  const std::size_t off = detail::payload_offset(bytes);
  if (off > bytes.size()) throw FormatError("OKT1 header length exceeds file size");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + static_cast<std::ptrdiff_t>(off));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("OKT1 header is not valid JSON: ") + e.what());
  }
  OktHeader h;
  try {
    const auto dt = j.at("dtype").get<std::string>();
    if (dt == "f32")
      h.dtype = DType::f32;
    else if (dt == "f64")
      h.dtype = DType::f64;
    else
      throw FormatError("OKT1 dtype must be f32 or f64, got " + dt);
    h.shape = j.at("shape").get<std::vector<std::size_t>>();
    h.layout = j.at("layout").get<std::string>();
    h.groups = j.at("groups").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("OKT1 header missing or mistyped field: ") + e.what());
  }
  const std::size_t want_rank = h.layout == "OIHW" ? 4 : h.layout == "BCHW" ? 4 : h.layout == "CHW" ? 3 : 0;
  if (want_rank == 0) throw FormatError("OKT1 layout must be OIHW, CHW or BCHW, got " + h.layout);
  if (h.shape.size() != want_rank) throw FormatError("OKT1 shape rank does not match layout " + h.layout);
  if (h.groups == 0) throw FormatError("OKT1 groups must be >= 1");
  std::size_t n = 1;
  for (auto e : h.shape) {
    if (e == 0) throw FormatError("OKT1 shape has a zero extent");
    n *= e;
  }
  const std::size_t width = h.dtype == DType::f32 ? 4 : 8;
  if (bytes.size() - off != n * width)
    throw FormatError("OKT1 payload has " + std::to_string(bytes.size() - off) + " bytes, expected " +
                      std::to_string(n * width));
  return h;
}

template <Scalar T>
std::vector<std::uint8_t> encode_okt(const KernelTensor<T>& w) {
  auto out = detail::encode_with_header({dtype_of<T>(), w.shape(), "OIHW", w.groups()});
  detail::append_scalars<T>(out, w.data());
  return out;
}

template <Scalar T>
std::vector<std::uint8_t> encode_okt(const Tensor<T>& x) {
  if (x.rank() != 3 && x.rank() != 4) throw FormatError("OKT1 stores rank-3 (CHW) or rank-4 (BCHW) tensors");
  auto out = detail::encode_with_header({dtype_of<T>(), x.shape(), x.rank() == 3 ? "CHW" : "BCHW", 1});
  detail::append_scalars<T>(out, x.data());
  return out;
}

template <Scalar T>
KernelTensor<T> decode_okt_kernel(std::span<const std::uint8_t> bytes) {
  const OktHeader h = decode_okt_header(bytes);
  if (h.layout != "OIHW") throw FormatError("expected an OIHW kernel, found layout " + h.layout);
  if (h.dtype != dtype_of<T>())
    throw FormatError(std::string("kernel dtype is ") + dtype_name(h.dtype) + ", requested " +
                      dtype_name(dtype_of<T>()));
  const std::size_t off = detail::payload_offset(bytes);
  const std::size_t n = h.shape[0] * h.shape[1] * h.shape[2] * h.shape[3];
  return KernelTensor<T>(h.shape[0], h.shape[1], h.shape[2], h.shape[3], h.groups,
                         detail::read_scalars<T>(bytes.subspan(off), n));
}

template <Scalar T>
Tensor<T> decode_okt_tensor(std::span<const std::uint8_t> bytes) {
  const OktHeader h = decode_okt_header(bytes);
  if (h.layout == "OIHW") throw FormatError("expected a CHW/BCHW tensor, found an OIHW kernel");
  if (h.dtype != dtype_of<T>())
    throw FormatError(std::string("tensor dtype is ") + dtype_name(h.dtype) + ", requested " +
                      dtype_name(dtype_of<T>()));
  const std::size_t off = detail::payload_offset(bytes);
  return Tensor<T>(h.shape, detail::read_scalars<T>(bytes.subspan(off), Tensor<T>::numel_of(h.shape)));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

template <Scalar T>
void save_kernel(const std::filesystem::path& p, const KernelTensor<T>& w) {
  write_file_bytes(p, encode_okt(w));
}

template <Scalar T>
KernelTensor<T> load_kernel(const std::filesystem::path& p) {
  return decode_okt_kernel<T>(read_file_bytes(p));
}

}  // namespace orepa
