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

#include <array>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "orepa/block.hpp"
#include "orepa/rng.hpp"

namespace orepa {

enum class PresetId { Orepa3x3, Orepa1x1, DeepStem, OrepaVgg, DbbLinearized };

inline const char* preset_name(PresetId p) {
  switch (p) {
    case PresetId::Orepa3x3: return "orepa3x3";
    case PresetId::Orepa1x1: return "orepa1x1";
    case PresetId::DeepStem: return "deepstem";
    case PresetId::OrepaVgg: return "orepavgg";
    case PresetId::DbbLinearized: return "dbb-linearized";
  }
  return "orepa3x3";
}

inline std::optional<PresetId> parse_preset(const std::string& s) {
  for (auto p : {PresetId::Orepa3x3, PresetId::Orepa1x1, PresetId::DeepStem, PresetId::OrepaVgg,
                 PresetId::DbbLinearized})
    if (s == preset_name(p)) return p;
  return std::nullopt;
}

inline constexpr std::array<PresetId, 5> kAllPresets = {PresetId::Orepa3x3, PresetId::Orepa1x1, PresetId::DeepStem,
                                                        PresetId::OrepaVgg, PresetId::DbbLinearized};

/// Default branch scaling, in the fixed branch order of the full block.
struct ScalingInit {
  static constexpr std::array<std::pair<BranchKind, double>, 6> kDefaults = {{
      {BranchKind::Conv1x1, 1.0},
      {BranchKind::ConvKxK, 0.25},
      {BranchKind::Conv1x1KxK, 0.5},
      {BranchKind::Conv1x1Pool, 0.5},
      {BranchKind::Conv1x1Filter, 0.0},
      {BranchKind::DwPw, 0.5},
  }};

  /// 1.0 for kinds outside the table.
  static double value(BranchKind k) {
    for (const auto& [kind, v] : kDefaults)
      if (kind == k) return v;
    return 1.0;
  }
};

struct PresetOptions {
  /// Width between the 1x1 and kxk layers of the 1x1-kxk branch (and of the
  /// 1x1-1x1 branch of orepa1x1). Defaults to out_ch.
  std::optional<std::size_t> internal_width;
  /// Depthwise channel multiplier; 0 picks the preset default (1, or 8 for orepavgg).
  std::size_t dw_expansion = 0;
  bool frozen_scaling = false;
  double theta = std::numbers::sqrt3;
  bool symmetric_init = false;
  std::map<BranchKind, double> scaling_overrides;
  Stride stride;

  bool operator==(const PresetOptions&) const = default;
};

class PresetError : public BlockError {
 public:
  using BlockError::BlockError;
};

namespace detail {

template <Scalar T>
struct BranchBuilder {
  std::uint64_t seed;
  std::size_t index;
  const PresetOptions& opt;
  Branch<T> br;

  BranchBuilder& add(LayerKind kind, std::size_t in, std::size_t out) {
    LayerSpec s = LayerSpec::make(kind, in, out);
    if (std::holds_alternative<UniformKaiming>(s.init)) s.init = UniformKaiming{opt.theta, opt.symmetric_init};
    push_layer(br, s, derive_seed(seed, index, br.layers.size()));
    return *this;
  }
  BranchBuilder& identity(std::size_t in, std::size_t out) { return add(IdentityConv1x1{}, in, out); }

  Branch<T> finish(BranchKind kind, std::size_t out_ch) {
    br.kind = kind;
    const auto it = opt.scaling_overrides.find(kind);
    const double g = it != opt.scaling_overrides.end() ? it->second : ScalingInit::value(kind);
    br.scaling = std::vector<T>(out_ch, static_cast<T>(g));
    br.scaling_trainable = !opt.frozen_scaling;
    return std::move(br);
  }
};

template <Scalar T>
void orepa_branches(BlockGraph<T>& b, std::size_t k, std::uint64_t seed, const PresetOptions& opt,
                    std::size_t dw_expansion, std::size_t group) {
  const std::size_t in = b.in_ch, out = b.out_ch, mid = opt.internal_width.value_or(out);
  const std::size_t base = b.branches.size();
  auto mk = [&](std::size_t i) { return BranchBuilder<T>{seed, base + i, opt, {}}; };
  std::vector<Branch<T>> br;
  br.push_back(mk(0).add(ConvLayer{1, 1}, in, out).finish(BranchKind::Conv1x1, out));
  br.push_back(mk(1).add(ConvLayer{k, 1}, in, out).finish(BranchKind::ConvKxK, out));
  br.push_back(mk(2).identity(in, mid).add(ConvLayer{k, 1}, mid, out).finish(BranchKind::Conv1x1KxK, out));
  br.push_back(mk(3).add(ConvLayer{1, 1}, in, out).add(AvgPoolLayer{k}, out, out).finish(BranchKind::Conv1x1Pool, out));
  br.push_back(
      mk(4).add(ConvLayer{1, 1}, in, out).add(FreqFilterLayer{k}, out, out).finish(BranchKind::Conv1x1Filter, out));
  br.push_back(mk(5)
                   .add(DepthwiseConvLayer{k, dw_expansion}, in, in * dw_expansion)
                   .add(PointwiseConvLayer{}, in * dw_expansion, out)
                   .finish(BranchKind::DwPw, out));
  for (auto& x : br) {
    x.merge_group = group;
    b.branches.push_back(std::move(x));
  }
}

inline void check_channels(std::size_t in, std::size_t out) {
  if (in == 0 || out == 0) throw PresetError("channel counts must be >= 1");
}

inline void check_odd(std::size_t k, const char* preset) {
  if (k == 0 || k % 2 == 0) throw PresetError(std::string(preset) + ": k must be odd, got " + std::to_string(k));
}

}  // namespace detail

/// Training-time block before linearization: every layer of the DBB-style
/// branches {1x1, kxk, 1x1-kxk, 1x1-pool} is followed by a norm marker.
template <Scalar T>
BlockGraph<T> dbb_with_norms(std::size_t in, std::size_t out, std::size_t k, std::uint64_t seed,
                             const PresetOptions& opt = {}) {
  detail::check_channels(in, out);
  detail::check_odd(k, "dbb");
  const std::size_t mid = opt.internal_width.value_or(out);
  BlockGraph<T> b{in, out, {}, false, opt.stride};
  auto mk = [&](std::size_t i) { return detail::BranchBuilder<T>{seed, i, opt, {}}; };
  auto tag = [](detail::BranchBuilder<T>&& bb, BranchKind kind) {
    Branch<T> br = std::move(bb.br);
    br.kind = kind;
    br.norm_after.resize(br.layers.size());
    std::iota(br.norm_after.begin(), br.norm_after.end(), std::size_t{0});
    return br;
  };
  b.branches.push_back(tag(std::move(mk(0).add(ConvLayer{1, 1}, in, out)), BranchKind::Conv1x1));
  b.branches.push_back(tag(std::move(mk(1).add(ConvLayer{k, 1}, in, out)), BranchKind::ConvKxK));
  b.branches.push_back(
      tag(std::move(mk(2).identity(in, mid).add(ConvLayer{k, 1}, mid, out)), BranchKind::Conv1x1KxK));
  b.branches.push_back(
      tag(std::move(mk(3).add(ConvLayer{1, 1}, in, out).add(AvgPoolLayer{k}, out, out)), BranchKind::Conv1x1Pool));
  return b;
}

/// Remove norm markers, give every branch a scaling vector (existing vectors
/// are kept) and set the post-addition norm.
template <Scalar T>
BlockGraph<T> linearize(BlockGraph<T> b, bool frozen_scaling = false) {
  for (auto& br : b.branches) {
    br.norm_after.clear();
    if (!br.scaling) {
      br.scaling = std::vector<T>(b.out_ch, static_cast<T>(ScalingInit::value(br.kind)));
      br.scaling_trainable = !frozen_scaling;
    }
  }
  b.post_add_norm = true;
  return b;
}

template <Scalar T>
BlockGraph<T> build_preset(PresetId id, std::size_t in, std::size_t out, std::size_t k, std::uint64_t seed,
                           const PresetOptions& opt = {}) {
  detail::check_channels(in, out);
  BlockGraph<T> b{in, out, {}, true, opt.stride};
  switch (id) {
    case PresetId::Orepa3x3: {
      detail::check_odd(k, "orepa3x3");
      detail::orepa_branches(b, k, seed, opt, opt.dw_expansion ? opt.dw_expansion : 1, 0);
      break;
    }
    case PresetId::Orepa1x1: {
      if (k != 1) throw PresetError("orepa1x1: k must be 1, got " + std::to_string(k));
      const std::size_t mid = opt.internal_width.value_or(out);
      auto mk = [&](std::size_t i) { return detail::BranchBuilder<T>{seed, i, opt, {}}; };
      b.branches.push_back(mk(0).add(ConvLayer{1, 1}, in, out).finish(BranchKind::Conv1x1, out));
      b.branches.push_back(
          mk(1).add(ConvLayer{1, 1}, in, mid).add(ConvLayer{1, 1}, mid, out).finish(BranchKind::Other, out));
      auto& g = *b.branches[1].scaling;
      const auto it = opt.scaling_overrides.find(BranchKind::Other);
      std::fill(g.begin(), g.end(), static_cast<T>(it != opt.scaling_overrides.end() ? it->second : 0.5));
      break;
    }
    case PresetId::DeepStem: {
      if (k < 3 || k % 2 == 0) throw PresetError("deepstem: k must be odd and >= 3, got " + std::to_string(k));
      detail::BranchBuilder<T> bb{seed, 0, opt, {}};
      std::size_t c = in;
      for (std::size_t j = 0; j < (k - 1) / 2; ++j, c = out) bb.add(ConvLayer{3, 1}, c, out);
      b.branches.push_back(bb.finish(BranchKind::Other, out));
      break;
    }
    case PresetId::OrepaVgg: {
      detail::check_odd(k, "orepavgg");
      detail::orepa_branches(b, k, seed, opt, opt.dw_expansion ? opt.dw_expansion : 8, 0);
      if (in == out && opt.stride == Stride{}) {
        detail::BranchBuilder<T> id{seed, b.branches.size(), opt, {}};
        id.identity(in, out);
        id.br.layers.back().spec.trainable = false;
        auto br = id.finish(BranchKind::Identity, out);
        br.merge_group = 1;
        b.branches.push_back(std::move(br));
      }
      auto br = detail::BranchBuilder<T>{seed, b.branches.size(), opt, {}}.add(ConvLayer{1, 1}, in, out).finish(
          BranchKind::Conv1x1, out);
      br.merge_group = 2;
      b.branches.push_back(std::move(br));
      break;
    }
    case PresetId::DbbLinearized: {
      b = linearize(dbb_with_norms<T>(in, out, k, seed, opt), opt.frozen_scaling);
      for (auto& br : b.branches) {
        const auto it = opt.scaling_overrides.find(br.kind);
        if (it != opt.scaling_overrides.end()) std::fill(br.scaling->begin(), br.scaling->end(), static_cast<T>(it->second));
      }
      break;
    }
  }
  validate(b);
  return b;
}

// ---------------------------------------------------------------------------
// Random linear blocks for property tests.

struct RandomBlockLimits {
  std::size_t max_branches = 6;
  std::size_t max_depth = 3;
  std::size_t max_channels = 8;
  std::size_t max_k = 5;
  bool allow_stride = true;
};

template <Scalar T>
BlockGraph<T> random_block(Rng& rng, const RandomBlockLimits& lim = {}) {
  auto pick = [&](std::size_t lo, std::size_t hi) { return static_cast<std::size_t>(rng.integer(lo, hi)); };
  auto odd_k = [&] { return 2 * pick(0, (lim.max_k - 1) / 2) + 1; };

  BlockGraph<T> b;
  b.in_ch = pick(1, lim.max_channels);
  b.out_ch = pick(1, lim.max_channels);
  b.post_add_norm = false;
  if (lim.allow_stride && rng.coin(0.25)) b.stride = {pick(1, 2), pick(1, 2)};
  const std::size_t nb = pick(1, lim.max_branches);
  const std::uint64_t seed = rng.integer(0, 1u << 30);

  for (std::size_t i = 0; i < nb; ++i) {
    Branch<T> br;
    const std::size_t depth = pick(1, lim.max_depth);
    std::size_t c = b.in_ch;
    for (std::size_t j = 0; j < depth; ++j) {
      const bool last = j + 1 == depth;
      std::size_t out = last ? b.out_ch : pick(1, lim.max_channels);
      std::vector<LayerKind> options;
      const std::size_t g = std::gcd(c, out);
      std::vector<std::size_t> divisors;
      for (std::size_t d = 1; d <= g; ++d)
        if (g % d == 0) divisors.push_back(d);
      options.push_back(ConvLayer{odd_k(), divisors[pick(0, divisors.size() - 1)]});
      options.push_back(IdentityConv1x1{});
      options.push_back(PointwiseConvLayer{});
      if (out % c == 0) options.push_back(DepthwiseConvLayer{odd_k(), out / c});
      if (c == out) {
        options.push_back(AvgPoolLayer{odd_k()});
        options.push_back(FreqFilterLayer{odd_k()});
        options.push_back(ScalingLayer{});
      }
      LayerKind kind = options[pick(0, options.size() - 1)];
      LayerSpec s = LayerSpec::make(kind, c, out);
      if (std::holds_alternative<UniformKaiming>(s.init)) s.init = UniformKaiming{std::numbers::sqrt3, true};
      if (std::holds_alternative<ConstantVector>(s.init)) s.init = ConstantVector{rng.unit()};
      s.trainable = s.trainable || rng.coin(0.3);
      push_layer(br, s, derive_seed(seed, i, j));
      c = out;
    }
    if (rng.coin(0.6)) {
      std::vector<T> g(b.out_ch);
      for (auto& v : g) v = static_cast<T>(rng.uniform(-1.0, 1.0));
      br.scaling = std::move(g);
      br.scaling_trainable = rng.coin(0.8);
    }
    b.branches.push_back(std::move(br));
  }
  validate(b);
  return b;
}

}  // namespace orepa
