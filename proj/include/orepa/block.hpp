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

#include <optional>
#include <string>
#include <vector>

#include "orepa/layers.hpp"
#include "orepa/tensor.hpp"

namespace orepa {

/// Structural role of a branch. Drives the default scaling value and labels reports.
enum class BranchKind { Conv1x1, ConvKxK, Conv1x1KxK, Conv1x1Pool, Conv1x1Filter, DwPw, Identity, Other };

inline const char* branch_kind_name(BranchKind k) {
  switch (k) {
    case BranchKind::Conv1x1: return "1x1";
    case BranchKind::ConvKxK: return "kxk";
    case BranchKind::Conv1x1KxK: return "1x1-kxk";
    case BranchKind::Conv1x1Pool: return "1x1-pool";
    case BranchKind::Conv1x1Filter: return "1x1-filter";
    case BranchKind::DwPw: return "dw-pw";
    case BranchKind::Identity: return "identity";
    case BranchKind::Other: return "other";
  }
  return "other";
}

inline std::optional<BranchKind> parse_branch_kind(const std::string& s) {
  for (auto k : {BranchKind::Conv1x1, BranchKind::ConvKxK, BranchKind::Conv1x1KxK, BranchKind::Conv1x1Pool,
                 BranchKind::Conv1x1Filter, BranchKind::DwPw, BranchKind::Identity, BranchKind::Other})
    if (s == branch_kind_name(k)) return k;
  return std::nullopt;
}

template <Scalar T>
struct Layer {
  LayerSpec spec;
  KernelTensor<T> weight;

  bool operator==(const Layer&) const = default;
};

template <Scalar T>
struct Branch {
  std::vector<Layer<T>> layers;
  /// Per-output-channel scaling; present iff the branch has been linearized.
  std::optional<std::vector<T>> scaling;
  bool scaling_trainable = true;
  BranchKind kind = BranchKind::Other;
  /// Indices of layers followed by a (non-linear) norm layer. Must be empty to squeeze.
  std::vector<std::size_t> norm_after;
  /// Branches sharing a group id are merged together during online training.
  std::size_t merge_group = 0;

  std::size_t in_ch() const { return layers.front().spec.in_ch; }
  std::size_t out_ch() const { return layers.back().spec.out_ch; }

  /// 1 + sum(k_j - 1) over the layers.
  std::size_t effective_extent() const {
    std::size_t k = 1;
    for (const auto& l : layers) k += kernel_extent(l.spec.kind) - 1;
    return k;
  }

  bool operator==(const Branch&) const = default;
};

struct Stride {
  std::size_t h = 1, w = 1;
  bool operator==(const Stride&) const = default;
};

template <Scalar T>
struct BlockGraph {
  std::size_t in_ch = 1;
  std::size_t out_ch = 1;
  std::vector<Branch<T>> branches;
  bool post_add_norm = false;
  /// Stride of the block output. All internal layers are stride-1.
  Stride stride;

  /// Largest branch extent; the squeezed kernel is K x K with K = this value.
  std::size_t effective_extent() const {
    std::size_t k = 1;
    for (const auto& b : branches) k = std::max(k, b.effective_extent());
    return k;
  }

  /// Geometry of the single squeezed convolution: stride plus same-padding (K-1)/2.
  ConvGeometry output_geometry() const {
    const std::size_t k = effective_extent();
    return {stride.h, stride.w, (k - 1) / 2, k / 2, (k - 1) / 2, k / 2};
  }

  bool is_linear() const {
    for (const auto& b : branches)
      if (!b.norm_after.empty()) return false;
    return true;
  }

  bool operator==(const BlockGraph&) const = default;
};

class BlockError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Check the structural invariants. Throws BlockError.
template <Scalar T>
void validate(const BlockGraph<T>& b) {
  if (b.branches.empty()) throw BlockError("block has no branches");
  if (b.stride.h == 0 || b.stride.w == 0) throw BlockError("stride must be >= 1");
  for (std::size_t i = 0; i < b.branches.size(); ++i) {
    const auto& br = b.branches[i];
    const std::string where = "branch " + std::to_string(i);
    if (br.layers.empty()) throw BlockError(where + " has no layers");
    if (br.in_ch() != b.in_ch) throw BlockError(where + " consumes " + std::to_string(br.in_ch()) + " channels, block has " + std::to_string(b.in_ch));
    if (br.out_ch() != b.out_ch) throw BlockError(where + " produces " + std::to_string(br.out_ch()) + " channels, block has " + std::to_string(b.out_ch));
    for (std::size_t j = 0; j < br.layers.size(); ++j) {
      const auto& l = br.layers[j];
      try {
        validate(l.spec);
      } catch (const LayerError& e) {
        throw BlockError(where + " layer " + std::to_string(j) + ": " + e.what());
      }
      if (j > 0 && br.layers[j - 1].spec.out_ch != l.spec.in_ch)
        throw BlockError(where + " layer " + std::to_string(j) + " is not channel-compatible with its predecessor");
      const std::size_t k = kernel_extent(l.spec.kind);
      if (l.weight.out_channels() != l.spec.out_ch || l.weight.in_channels() != l.spec.in_ch ||
          l.weight.kh() != k || l.weight.kw() != k || l.weight.groups() != kernel_groups(l.spec))
        throw BlockError(where + " layer " + std::to_string(j) + " weight does not match its spec");
    }
    if (br.scaling && br.scaling->size() != b.out_ch)
      throw BlockError(where + " scaling length " + std::to_string(br.scaling->size()) + " != out_ch");
    for (auto n : br.norm_after)
      if (n >= br.layers.size()) throw BlockError(where + " norm marker out of range");
  }
}

/// Append a layer, materializing its weight from `seed`.
template <Scalar T>
Branch<T>& push_layer(Branch<T>& br, const LayerSpec& spec, std::uint64_t seed) {
  br.layers.push_back({spec, materialize<T>(spec, seed)});
  return br;
}

}  // namespace orepa
