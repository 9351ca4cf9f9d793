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

// Catalog of training-time linear layers, each expressed as a (possibly
// grouped) convolution kernel with a closed-form or seeded initializer.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "orepa/rng.hpp"
#include "orepa/tensor.hpp"

namespace orepa {

struct ConvLayer {
  std::size_t k = 3;
  std::size_t groups = 1;
  bool operator==(const ConvLayer&) const = default;
};
struct IdentityConv1x1 {
  bool operator==(const IdentityConv1x1&) const = default;
};
struct ScalingLayer {
  bool operator==(const ScalingLayer&) const = default;
};
struct AvgPoolLayer {
  std::size_t k = 3;
  bool operator==(const AvgPoolLayer&) const = default;
};
struct FreqFilterLayer {
  std::size_t k = 3;
  bool operator==(const FreqFilterLayer&) const = default;
};
/// Channel-multiplier depthwise conv: out_ch = in_ch * expansion, groups = in_ch.
struct DepthwiseConvLayer {
  std::size_t k = 3;
  std::size_t expansion = 1;
  bool operator==(const DepthwiseConvLayer&) const = default;
};
struct PointwiseConvLayer {
  bool operator==(const PointwiseConvLayer&) const = default;
};

using LayerKind = std::variant<ConvLayer, IdentityConv1x1, ScalingLayer, AvgPoolLayer, FreqFilterLayer,
                               DepthwiseConvLayer, PointwiseConvLayer>;

/// W ~ U(0, theta / sqrt(fan_in)), or U(-b, b) when symmetric.
struct UniformKaiming {
  double theta = std::numbers::sqrt3;
  bool symmetric = false;
  bool operator==(const UniformKaiming&) const = default;
};
struct IdentityInit {
  bool operator==(const IdentityInit&) const = default;
};
struct ConstantVector {
  double m = 1.0;
  bool operator==(const ConstantVector&) const = default;
};
struct AvgPoolFill {
  bool operator==(const AvgPoolFill&) const = default;
};
struct DctBasis {
  bool operator==(const DctBasis&) const = default;
};

using InitRule = std::variant<UniformKaiming, IdentityInit, ConstantVector, AvgPoolFill, DctBasis>;

class LayerError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string kind_name(const LayerKind& k) {
  struct V {
    std::string operator()(const ConvLayer&) const { return "conv"; }
    std::string operator()(const IdentityConv1x1&) const { return "identity1x1"; }
    std::string operator()(const ScalingLayer&) const { return "scaling"; }
    std::string operator()(const AvgPoolLayer&) const { return "avgpool"; }
    std::string operator()(const FreqFilterLayer&) const { return "freqfilter"; }
    std::string operator()(const DepthwiseConvLayer&) const { return "dwconv"; }
    std::string operator()(const PointwiseConvLayer&) const { return "pwconv"; }
  };
  return std::visit(V{}, k);
}

/// Initializer used when none is given explicitly.
inline InitRule default_init(const LayerKind& k) {
  struct V {
    InitRule operator()(const ConvLayer&) const { return UniformKaiming{}; }
    InitRule operator()(const IdentityConv1x1&) const { return IdentityInit{}; }
    InitRule operator()(const ScalingLayer&) const { return ConstantVector{1.0}; }
    InitRule operator()(const AvgPoolLayer&) const { return AvgPoolFill{}; }
    InitRule operator()(const FreqFilterLayer&) const { return DctBasis{}; }
    InitRule operator()(const DepthwiseConvLayer&) const { return UniformKaiming{}; }
    InitRule operator()(const PointwiseConvLayer&) const { return UniformKaiming{}; }
  };
  return std::visit(V{}, k);
}

/// Conv and identity layers train by default; the closed-form layers are fixed.
inline bool default_trainable(const LayerKind& k) {
  return std::holds_alternative<ConvLayer>(k) || std::holds_alternative<IdentityConv1x1>(k) ||
         std::holds_alternative<DepthwiseConvLayer>(k) || std::holds_alternative<PointwiseConvLayer>(k);
}

struct LayerSpec {
  LayerKind kind;
  std::size_t in_ch = 1;
  std::size_t out_ch = 1;
  bool trainable = true;
  InitRule init;

  static LayerSpec make(LayerKind kind, std::size_t in_ch, std::size_t out_ch) {
    return {kind, in_ch, out_ch, default_trainable(kind), default_init(kind)};
  }
  static LayerSpec make(LayerKind kind, std::size_t in_ch, std::size_t out_ch, InitRule init) {
    return {kind, in_ch, out_ch, default_trainable(kind), init};
  }

  bool operator==(const LayerSpec&) const = default;
};

/// Spatial extent of the layer's kernel.
inline std::size_t kernel_extent(const LayerKind& k) {
  struct V {
    std::size_t operator()(const ConvLayer& c) const { return c.k; }
    std::size_t operator()(const IdentityConv1x1&) const { return 1; }
    std::size_t operator()(const ScalingLayer&) const { return 1; }
    std::size_t operator()(const AvgPoolLayer& c) const { return c.k; }
    std::size_t operator()(const FreqFilterLayer& c) const { return c.k; }
    std::size_t operator()(const DepthwiseConvLayer& c) const { return c.k; }
    std::size_t operator()(const PointwiseConvLayer&) const { return 1; }
  };
  return std::visit(V{}, k);
}

/// Group count of the materialized kernel.
inline std::size_t kernel_groups(const LayerSpec& s) {
  if (const auto* c = std::get_if<ConvLayer>(&s.kind)) return c->groups;
  if (std::holds_alternative<ScalingLayer>(s.kind) || std::holds_alternative<AvgPoolLayer>(s.kind) ||
      std::holds_alternative<FreqFilterLayer>(s.kind) || std::holds_alternative<DepthwiseConvLayer>(s.kind))
    return s.in_ch;
  return 1;
}

/// Throws LayerError if the channel counts do not fit the kind.
inline void validate(const LayerSpec& s) {
  const std::string name = kind_name(s.kind);
  if (s.in_ch == 0 || s.out_ch == 0) throw LayerError(name + ": channel counts must be >= 1");
  if (kernel_extent(s.kind) == 0) throw LayerError(name + ": kernel extent must be >= 1");
  if (const auto* c = std::get_if<ConvLayer>(&s.kind)) {
    if (c->groups == 0 || s.in_ch % c->groups != 0 || s.out_ch % c->groups != 0)
      throw LayerError("conv: groups " + std::to_string(c->groups) + " must divide in_ch " +
                       std::to_string(s.in_ch) + " and out_ch " + std::to_string(s.out_ch));
  } else if (const auto* d = std::get_if<DepthwiseConvLayer>(&s.kind)) {
    if (d->expansion == 0 || s.out_ch != s.in_ch * d->expansion)
      throw LayerError("dwconv: out_ch must equal in_ch * expansion");
  } else if (std::holds_alternative<ScalingLayer>(s.kind) || std::holds_alternative<AvgPoolLayer>(s.kind) ||
             std::holds_alternative<FreqFilterLayer>(s.kind)) {
    if (s.in_ch != s.out_ch) throw LayerError(name + ": acts channel-wise, in_ch must equal out_ch");
  }
  if (const auto* u = std::get_if<UniformKaiming>(&s.init); u && !(u->theta > 0))
    throw LayerError(name + ": theta must be > 0");
  if (const auto* m = std::get_if<ConstantVector>(&s.init); m && !(m->m >= 0.0 && m->m <= 1.0))
    throw LayerError(name + ": constant m must lie in [0,1]");
}

/// Frequency-prior tap: rows of the first half of the channels vary along kh,
/// the second half along kw.
inline double freq_filter_tap(std::size_t c, std::size_t channels, std::size_t kh, std::size_t kw,
                              std::size_t kh_extent, std::size_t kw_extent) {
  const std::size_t half = channels / 2;
  if (c < half)
    return std::cos(static_cast<double>(c + 1) * (static_cast<double>(kh) + 0.5) * std::numbers::pi /
                    static_cast<double>(kh_extent));
  return std::cos(static_cast<double>(c - half + 1) * (static_cast<double>(kw) + 0.5) * std::numbers::pi /
                  static_cast<double>(kw_extent));
}

/// Build the layer's kernel. Seeded initializers draw taps in row-major order.
template <Scalar T>
KernelTensor<T> materialize(const LayerSpec& s, std::uint64_t seed) {
  validate(s);
  const std::size_t k = kernel_extent(s.kind);
  const std::size_t g = kernel_groups(s);
  KernelTensor<T> w(s.out_ch, s.in_ch / g, k, k, g);

  struct Init {
    const LayerSpec& s;
    KernelTensor<T>& w;
    std::uint64_t seed;

    void operator()(const UniformKaiming& u) const {
      const double fan = static_cast<double>(w.in_per_group() * w.kh() * w.kw());
      const double bound = u.theta / std::sqrt(fan);
      Rng rng(seed);
      for (auto& v : w.data()) v = static_cast<T>(u.symmetric ? rng.uniform(-bound, bound) : rng.uniform(0.0, bound));
    }
    void operator()(const IdentityInit&) const {
      // W[co, ci_local] = 1 iff co/Co == ci/Ci, compared exactly as co*Ci == ci*Co.
      const std::size_t co_n = w.out_channels(), ci_n = w.in_channels();
      for (std::size_t co = 0; co < co_n; ++co) {
        const std::size_t grp = co / w.out_per_group();
        for (std::size_t cl = 0; cl < w.in_per_group(); ++cl) {
          const std::size_t ci = grp * w.in_per_group() + cl;
          for (std::size_t h = 0; h < w.kh(); ++h)
            for (std::size_t x = 0; x < w.kw(); ++x)
              w.at(co, cl, h, x) = (co * ci_n == ci * co_n && h == (w.kh() - 1) / 2 && x == (w.kw() - 1) / 2)
                                       ? T(1)
                                       : T(0);
        }
      }
    }
    void operator()(const ConstantVector& c) const {
      for (auto& v : w.data()) v = static_cast<T>(c.m);
    }
    void operator()(const AvgPoolFill&) const {
      for (auto& v : w.data()) v = static_cast<T>(1.0 / static_cast<double>(w.kh() * w.kw()));
    }
    void operator()(const DctBasis&) const {
      if (w.in_per_group() != 1) throw LayerError("DCT basis requires a channel-wise kernel");
      for (std::size_t c = 0; c < w.out_channels(); ++c)
        for (std::size_t h = 0; h < w.kh(); ++h)
          for (std::size_t x = 0; x < w.kw(); ++x)
            w.at(c, 0, h, x) = static_cast<T>(freq_filter_tap(c, w.out_channels(), h, x, w.kh(), w.kw()));
    }
  };
  std::visit(Init{s, w, seed}, s.init);
  return w;
}

/// Scaling layer with an explicit per-channel vector (depthwise 1x1).
template <Scalar T>
KernelTensor<T> scaling_kernel(std::span<const T> gamma) {
  return KernelTensor<T>(gamma.size(), 1, 1, 1, gamma.size(), std::vector<T>(gamma.begin(), gamma.end()));
}

/// Expand a grouped kernel to an equivalent dense (G=1) kernel; off-group taps are zero.
template <Scalar T>
KernelTensor<T> as_dense(const KernelTensor<T>& w) {
  if (w.groups() == 1) return w;
  KernelTensor<T> d(w.out_channels(), w.in_channels(), w.kh(), w.kw(), 1);
  const std::size_t taps = w.kh() * w.kw();
  for (std::size_t co = 0; co < w.out_channels(); ++co) {
    const std::size_t g = co / w.out_per_group();
    for (std::size_t cl = 0; cl < w.in_per_group(); ++cl)
      std::copy_n(&w.at(co, cl, 0, 0), taps, &d.at(co, g * w.in_per_group() + cl, 0, 0));
  }
  return d;
}

/// Adjoint of as_dense: gather the in-group taps of a dense gradient.
template <Scalar T>
KernelTensor<T> as_grouped(const KernelTensor<T>& dense, const KernelTensor<T>& like) {
  if (like.groups() == 1) return dense;
  KernelTensor<T> w(like.out_channels(), like.in_per_group(), like.kh(), like.kw(), like.groups());
  const std::size_t taps = like.kh() * like.kw();
  for (std::size_t co = 0; co < like.out_channels(); ++co) {
    const std::size_t g = co / like.out_per_group();
    for (std::size_t cl = 0; cl < like.in_per_group(); ++cl)
      std::copy_n(&dense.at(co, g * like.in_per_group() + cl, 0, 0), taps, &w.at(co, cl, 0, 0));
  }
  return w;
}

}  // namespace orepa
