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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace orepa {

enum class DType { f32, f64 };

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

template <typename T>
concept Scalar = std::is_same_v<T, float> || std::is_same_v<T, double>;

template <Scalar T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

/// Raised for any shape/extent inconsistency. `axis()` names the offending axis.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::string axis, const std::string& what)
      : std::invalid_argument(axis + ": " + what), axis_(std::move(axis)) {}
  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

namespace detail {
inline std::string shape_str(std::span<const std::size_t> s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}
}  // namespace detail

/// Dense row-major N-D tensor. Extents are all >= 1.
template <Scalar T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, T fill = T(0)) : shape_(std::move(shape)) {
    validate_extents();
    data_.assign(numel_of(shape_), fill);
  }
  Tensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_extents();
    if (numel_of(shape_) != data_.size())
      throw ShapeError("data", "length " + std::to_string(data_.size()) + " does not match shape " +
                                   detail::shape_str(shape_));
  }

  static constexpr DType dtype() { return dtype_of<T>(); }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Element access for rank-3 (C,H,W) tensors.
  T& at(std::size_t c, std::size_t h, std::size_t w) { return data_[(c * shape_[1] + h) * shape_[2] + w]; }
  const T& at(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }
  /// Element access for rank-4 (B,C,H,W) tensors.
  T& at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool operator==(const Tensor&) const = default;

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  void validate_extents() const {
    for (std::size_t i = 0; i < shape_.size(); ++i)
      if (shape_[i] == 0) throw ShapeError("axis " + std::to_string(i), "extent must be >= 1");
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

/// Convolution weight in (Co, Ci/G, kH, kW) order.
template <Scalar T>
class KernelTensor {
 public:
  using value_type = T;

  KernelTensor() = default;
  KernelTensor(std::size_t out_channels, std::size_t in_per_group, std::size_t kh, std::size_t kw,
               std::size_t groups = 1, T fill = T(0))
      : co_(out_channels), cig_(in_per_group), g_(groups), kh_(kh), kw_(kw) {
    validate();
    data_.assign(co_ * cig_ * kh_ * kw_, fill);
  }
  KernelTensor(std::size_t out_channels, std::size_t in_per_group, std::size_t kh, std::size_t kw,
               std::size_t groups, std::vector<T> data)
      : co_(out_channels), cig_(in_per_group), g_(groups), kh_(kh), kw_(kw), data_(std::move(data)) {
    validate();
    if (data_.size() != co_ * cig_ * kh_ * kw_)
      throw ShapeError("data", "length " + std::to_string(data_.size()) + " does not match kernel shape");
  }

  static constexpr DType dtype() { return dtype_of<T>(); }
  std::size_t out_channels() const { return co_; }
  std::size_t in_per_group() const { return cig_; }
  std::size_t in_channels() const { return cig_ * g_; }
  std::size_t groups() const { return g_; }
  std::size_t out_per_group() const { return co_ / g_; }
  std::size_t kh() const { return kh_; }
  std::size_t kw() const { return kw_; }
  std::size_t size() const { return data_.size(); }
  std::vector<std::size_t> shape() const { return {co_, cig_, kh_, kw_}; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t o, std::size_t i, std::size_t h, std::size_t w) {
    return data_[((o * cig_ + i) * kh_ + h) * kw_ + w];
  }
  const T& at(std::size_t o, std::size_t i, std::size_t h, std::size_t w) const {
    return data_[((o * cig_ + i) * kh_ + h) * kw_ + w];
  }

  bool same_geometry(const KernelTensor& o) const {
    return co_ == o.co_ && cig_ == o.cig_ && g_ == o.g_ && kh_ == o.kh_ && kw_ == o.kw_;
  }
  bool operator==(const KernelTensor&) const = default;

 private:
  void validate() const {
    if (co_ == 0) throw ShapeError("out_channels", "must be >= 1");
    if (cig_ == 0) throw ShapeError("in_channels_per_group", "must be >= 1");
    if (g_ == 0) throw ShapeError("groups", "must be >= 1");
    if (kh_ == 0) throw ShapeError("kH", "must be >= 1");
    if (kw_ == 0) throw ShapeError("kW", "must be >= 1");
    if (co_ % g_ != 0)
      throw ShapeError("out_channels", std::to_string(co_) + " not divisible by groups " + std::to_string(g_));
  }

  std::size_t co_ = 0, cig_ = 0, g_ = 1, kh_ = 0, kw_ = 0;
  std::vector<T> data_;
};

/// Stride and explicit zero padding. Dilation is always 1.
struct ConvGeometry {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_top = 0, pad_bottom = 0, pad_left = 0, pad_right = 0;

  static ConvGeometry same(std::size_t kh, std::size_t kw, std::size_t stride = 1) {
    return {stride, stride, (kh - 1) / 2, kh / 2, (kw - 1) / 2, kw / 2};
  }
  static ConvGeometry uniform(std::size_t pad, std::size_t stride = 1) {
    return {stride, stride, pad, pad, pad, pad};
  }
  bool operator==(const ConvGeometry&) const = default;
};

namespace detail {

/// View a rank-3 or rank-4 tensor as (B,C,H,W).
struct Nchw {
  std::size_t b, c, h, w;
  bool batched;
};

template <Scalar T>
Nchw as_nchw(const Tensor<T>& x, const char* what) {
  if (x.rank() == 3) return {1, x.extent(0), x.extent(1), x.extent(2), false};
  if (x.rank() == 4) return {x.extent(0), x.extent(1), x.extent(2), x.extent(3), true};
  throw ShapeError(std::string(what) + ".rank", "expected rank 3 (C,H,W) or 4 (B,C,H,W), got " +
                                                    std::to_string(x.rank()));
}

inline std::vector<std::size_t> make_shape(const Nchw& v, std::size_t c, std::size_t h, std::size_t w) {
  if (v.batched) return {v.b, c, h, w};
  return {c, h, w};
}

}  // namespace detail

/// Direct (pixel-wise) grouped cross-correlation with zero padding.
///
/// out[b,co,oh,ow] = bias[co] + sum over the group's input channels ci and
/// taps (kh,kw) of w[co,ci_local,kh,kw] * x[b,ci, oh*sH - pT + kh, ow*sW - pL + kw].
/// Taps outside the input read zero. Summation order is fixed: ci, kh, kw.
template <Scalar T>
Tensor<T> conv2d_direct(const Tensor<T>& x, const KernelTensor<T>& w, const ConvGeometry& geom = {},
                        std::optional<std::span<const T>> bias = std::nullopt) {
  const auto v = detail::as_nchw(x, "input");
  if (geom.stride_h == 0 || geom.stride_w == 0) throw ShapeError("stride", "must be >= 1");
  if (v.c != w.in_channels())
    throw ShapeError("channel", "input has " + std::to_string(v.c) + " channels, kernel expects " +
                                    std::to_string(w.in_channels()));
  if (bias && bias->size() != w.out_channels())
    throw ShapeError("bias", "length " + std::to_string(bias->size()) + " != out_channels " +
                                 std::to_string(w.out_channels()));
  const std::size_t hp = v.h + geom.pad_top + geom.pad_bottom;
  const std::size_t wp = v.w + geom.pad_left + geom.pad_right;
  if (hp < w.kh()) throw ShapeError("height", "padded input smaller than kernel");
  if (wp < w.kw()) throw ShapeError("width", "padded input smaller than kernel");
  const std::size_t ho = (hp - w.kh()) / geom.stride_h + 1;
  const std::size_t wo = (wp - w.kw()) / geom.stride_w + 1;

  Tensor<T> y(detail::make_shape(v, w.out_channels(), ho, wo));
  const std::size_t cig = w.in_per_group();
  const std::size_t opg = w.out_per_group();
  const auto xs = x.data();
  auto ys = y.data();
  const long pt = static_cast<long>(geom.pad_top), pl = static_cast<long>(geom.pad_left);
  const long ih_max = static_cast<long>(v.h), iw_max = static_cast<long>(v.w);

  for (std::size_t b = 0; b < v.b; ++b) {
    for (std::size_t co = 0; co < w.out_channels(); ++co) {
      const std::size_t g = co / opg;
      const T b0 = bias ? (*bias)[co] : T(0);
      for (std::size_t oh = 0; oh < ho; ++oh) {
        for (std::size_t ow = 0; ow < wo; ++ow) {
          T acc = 0;
          const long ih0 = static_cast<long>(oh * geom.stride_h) - pt;
          const long iw0 = static_cast<long>(ow * geom.stride_w) - pl;
          for (std::size_t cl = 0; cl < cig; ++cl) {
            const std::size_t ci = g * cig + cl;
            const T* xc = xs.data() + (b * v.c + ci) * v.h * v.w;
            const T* wk = w.data().data() + (co * cig + cl) * w.kh() * w.kw();
            for (std::size_t kh = 0; kh < w.kh(); ++kh) {
              const long ih = ih0 + static_cast<long>(kh);
              if (ih < 0 || ih >= ih_max) continue;
              const T* xrow = xc + ih * v.w;
              const T* wrow = wk + kh * w.kw();
              for (std::size_t kw = 0; kw < w.kw(); ++kw) {
                const long iw = iw0 + static_cast<long>(kw);
                if (iw < 0 || iw >= iw_max) continue;
                acc += wrow[kw] * xrow[iw];
              }
            }
          }
          ys[((b * w.out_channels() + co) * ho + oh) * wo + ow] = acc + b0;
        }
      }
    }
  }
  return y;
}

/// Zero-pad the two trailing (spatial) axes.
template <Scalar T>
Tensor<T> pad_spatial(const Tensor<T>& x, std::size_t top, std::size_t bottom, std::size_t left,
                      std::size_t right) {
  const auto v = detail::as_nchw(x, "input");
  const std::size_t h2 = v.h + top + bottom, w2 = v.w + left + right;
  Tensor<T> y(detail::make_shape(v, v.c, h2, w2));
  for (std::size_t p = 0; p < v.b * v.c; ++p)
    for (std::size_t h = 0; h < v.h; ++h)
      std::copy_n(x.data().data() + (p * v.h + h) * v.w, v.w, y.data().data() + (p * h2 + h + top) * w2 + left);
  return y;
}

/// Central spatial crop to (h, w); offsets are (H-h)/2 and (W-w)/2.
template <Scalar T>
Tensor<T> crop_spatial(const Tensor<T>& x, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  const auto v = detail::as_nchw(x, "input");
  if (top + h > v.h) throw ShapeError("height", "crop exceeds extent");
  if (left + w > v.w) throw ShapeError("width", "crop exceeds extent");
  Tensor<T> y(detail::make_shape(v, v.c, h, w));
  for (std::size_t p = 0; p < v.b * v.c; ++p)
    for (std::size_t r = 0; r < h; ++r)
      std::copy_n(x.data().data() + (p * v.h + r + top) * v.w + left, w, y.data().data() + (p * h + r) * w);
  return y;
}

template <Scalar T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("shape", detail::shape_str(a.shape()) + " vs " + detail::shape_str(b.shape()));
  Tensor<T> y = a;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
  return y;
}

/// Multiply channel c of a (C,H,W) or (B,C,H,W) tensor by gamma[c].
template <Scalar T>
Tensor<T> scale_by_channel(const Tensor<T>& x, std::span<const T> gamma) {
  const auto v = detail::as_nchw(x, "input");
  if (gamma.size() != v.c)
    throw ShapeError("channel", "gamma length " + std::to_string(gamma.size()) + " != channels " +
                                    std::to_string(v.c));
  Tensor<T> y = x;
  const std::size_t plane = v.h * v.w;
  for (std::size_t b = 0; b < v.b; ++b)
    for (std::size_t c = 0; c < v.c; ++c) {
      T* p = y.data().data() + (b * v.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] *= gamma[c];
    }
  return y;
}

template <Scalar T>
Tensor<T> sum_over(std::span<const Tensor<T>> xs) {
  if (xs.empty()) throw ShapeError("list", "sum_over needs at least one tensor");
  Tensor<T> acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

/// Keep every stride-th row/column starting at 0.
template <Scalar T>
Tensor<T> subsample(const Tensor<T>& x, std::size_t sh, std::size_t sw) {
  if (sh == 1 && sw == 1) return x;
  const auto v = detail::as_nchw(x, "input");
  const std::size_t ho = (v.h - 1) / sh + 1, wo = (v.w - 1) / sw + 1;
  Tensor<T> y(detail::make_shape(v, v.c, ho, wo));
  for (std::size_t p = 0; p < v.b * v.c; ++p)
    for (std::size_t r = 0; r < ho; ++r)
      for (std::size_t c = 0; c < wo; ++c) y[(p * ho + r) * wo + c] = x[(p * v.h + r * sh) * v.w + c * sw];
  return y;
}

template <Scalar T>
T max_abs_diff(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ShapeError("length", "max_abs_diff on different sizes");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <Scalar To, Scalar From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> d(x.data().begin(), x.data().end());
  return Tensor<To>(x.shape(), std::move(d));
}

template <Scalar To, Scalar From>
KernelTensor<To> cast(const KernelTensor<From>& w) {
  std::vector<To> d(w.data().begin(), w.data().end());
  return KernelTensor<To>(w.out_channels(), w.in_per_group(), w.kh(), w.kw(), w.groups(), std::move(d));
}

}  // namespace orepa
