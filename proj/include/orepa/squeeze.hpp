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

// Block squeezing: collapse a linear multi-branch, multi-layer block into one
// end-to-end kernel.
//
// Padding convention. A squeezed K x K kernel is applied with same-padding
// (K-1)/2. The expanded evaluation that it must reproduce pads the input ONCE
// by that amount and then runs every internal layer as a VALID convolution;
// shorter branches are center-cropped before the sum. With this convention the
// two are equal everywhere, including the borders. Per-layer zero padding of
// intermediates would not be (cropping would discard receptive-field mass).

#include <cstdint>
#include <string>
#include <vector>

#include "orepa/block.hpp"
#include "orepa/layers.hpp"
#include "orepa/tensor.hpp"

namespace orepa {

/// Kernel composition: merged * x == w2 * (w1 * x) for VALID convolutions.
///
/// merged[cq,cp,u,v] = sum_{cj,kh,kw} w2[cq,cj,kh,kw] * w1[cj,cp,u-kh,v-kw],
/// iterating over w2's taps; w1 reads zero outside its extent (the zero
/// padding of K2-1 on each side). Both kernels must be dense.
template <Scalar T>
KernelTensor<T> merge_sequential(const KernelTensor<T>& w1, const KernelTensor<T>& w2) {
  if (w1.groups() != 1 || w2.groups() != 1)
    throw ShapeError("groups", "merge_sequential needs dense kernels; densify with as_dense first");
  if (w2.in_channels() != w1.out_channels())
    throw ShapeError("channel", "second kernel consumes " + std::to_string(w2.in_channels()) +
                                    " channels, first produces " + std::to_string(w1.out_channels()));
  const std::size_t kh = w1.kh() + w2.kh() - 1, kw = w1.kw() + w2.kw() - 1;
  const std::size_t cp_n = w1.in_channels(), cj_n = w1.out_channels();
  KernelTensor<T> m(w2.out_channels(), cp_n, kh, kw, 1);
  for (std::size_t cq = 0; cq < w2.out_channels(); ++cq)
    for (std::size_t cj = 0; cj < cj_n; ++cj)
      for (std::size_t a = 0; a < w2.kh(); ++a)
        for (std::size_t b = 0; b < w2.kw(); ++b) {
          const T s = w2.at(cq, cj, a, b);
          for (std::size_t cp = 0; cp < cp_n; ++cp)
            for (std::size_t p = 0; p < w1.kh(); ++p) {
              const T* src = &w1.at(cj, cp, p, 0);
              T* dst = &m.at(cq, cp, p + a, b);
              for (std::size_t q = 0; q < w1.kw(); ++q) dst[q] += s * src[q];
            }
        }
  return m;
}

/// Center-aligned tap-wise sum of kernels with odd extents.
template <Scalar T>
KernelTensor<T> merge_parallel(std::span<const KernelTensor<T>> ks) {
  if (ks.empty()) throw ShapeError("list", "merge_parallel needs at least one kernel");
  std::size_t kh = 0, kw = 0;
  for (const auto& k : ks) {
    if (k.out_channels() != ks[0].out_channels())
      throw ShapeError("out_channels", "branches disagree on output channels");
    if (k.in_per_group() != ks[0].in_per_group() || k.groups() != ks[0].groups())
      throw ShapeError("in_channels", "branches disagree on input channels or groups");
    if (k.kh() % 2 == 0) throw ShapeError("kH", "even kernel extent " + std::to_string(k.kh()) + " has no center");
    if (k.kw() % 2 == 0) throw ShapeError("kW", "even kernel extent " + std::to_string(k.kw()) + " has no center");
    kh = std::max(kh, k.kh());
    kw = std::max(kw, k.kw());
  }
  KernelTensor<T> m(ks[0].out_channels(), ks[0].in_per_group(), kh, kw, ks[0].groups());
  for (const auto& k : ks) {
    const std::size_t oh = (kh - k.kh()) / 2, ow = (kw - k.kw()) / 2;
    for (std::size_t o = 0; o < k.out_channels(); ++o)
      for (std::size_t i = 0; i < k.in_per_group(); ++i)
        for (std::size_t h = 0; h < k.kh(); ++h)
          for (std::size_t w = 0; w < k.kw(); ++w) m.at(o, i, h + oh, w + ow) += k.at(o, i, h, w);
  }
  return m;
}

template <Scalar T>
KernelTensor<T> merge_parallel(std::initializer_list<KernelTensor<T>> ks) {
  return merge_parallel(std::span<const KernelTensor<T>>(ks.begin(), ks.size()));
}

/// Multiply output channel c of w by gamma[c].
template <Scalar T>
KernelTensor<T> apply_branch_scaling(const KernelTensor<T>& w, std::span<const T> gamma) {
  if (gamma.size() != w.out_channels())
    throw ShapeError("channel", "gamma length " + std::to_string(gamma.size()) + " != out_channels " +
                                    std::to_string(w.out_channels()));
  KernelTensor<T> s = w;
  const std::size_t per = w.in_per_group() * w.kh() * w.kw();
  for (std::size_t o = 0; o < w.out_channels(); ++o)
    for (std::size_t i = 0; i < per; ++i) s[o * per + i] *= gamma[o];
  return s;
}

struct TraceStep {
  std::size_t step = 0;
  std::string op;  // "densify", "merge_sequential", "scale", "merge_parallel"
  long branch = -1;
  std::vector<std::vector<std::size_t>> inputs;
  std::vector<std::size_t> output;
  std::uint64_t mults = 0;
  std::uint64_t output_elems = 0;
};

template <Scalar T>
struct SqueezeResult {
  KernelTensor<T> kernel;
  std::size_t kh = 1, kw = 1;
  std::vector<TraceStep> trace;
};

class MergeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::uint64_t numel(const std::vector<std::size_t>& s) {
  std::uint64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

template <Scalar T>
void record(std::vector<TraceStep>* trace, std::string op, long branch,
            std::vector<std::vector<std::size_t>> inputs, const KernelTensor<T>& out, std::uint64_t mults) {
  if (!trace) return;
  TraceStep s;
  s.step = trace->size();
  s.op = std::move(op);
  s.branch = branch;
  s.inputs = std::move(inputs);
  s.output = out.shape();
  s.mults = mults;
  s.output_elems = out.size();
  trace->push_back(std::move(s));
}

}  // namespace detail

/// Fold one branch: densify, left-fold merge_sequential, then apply its scaling.
template <Scalar T>
KernelTensor<T> squeeze_branch(const Branch<T>& br, std::vector<TraceStep>* trace = nullptr, long index = -1) {
  auto dense = [&](const KernelTensor<T>& w) {
    if (w.groups() == 1) return w;
    auto d = as_dense(w);
    detail::record(trace, "densify", index, {w.shape()}, d, 0);
    return d;
  };
  KernelTensor<T> cur = dense(br.layers.front().weight);
  for (std::size_t j = 1; j < br.layers.size(); ++j) {
    const KernelTensor<T> next = dense(br.layers[j].weight);
    const std::uint64_t mults = static_cast<std::uint64_t>(next.out_channels()) * next.in_channels() *
                                next.kh() * next.kw() * cur.in_channels() * cur.kh() * cur.kw();
    auto merged = merge_sequential(cur, next);
    detail::record(trace, "merge_sequential", index, {cur.shape(), next.shape()}, merged, mults);
    cur = std::move(merged);
  }
  if (br.scaling) {
    auto scaled = apply_branch_scaling(cur, std::span<const T>(*br.scaling));
    detail::record(trace, "scale", index, {cur.shape(), {br.scaling->size()}}, scaled, cur.size());
    cur = std::move(scaled);
  }
  return cur;
}

/// Squeeze a linear block into its end-to-end kernel W_e.
template <Scalar T>
SqueezeResult<T> squeeze_block(const BlockGraph<T>& block) {
  validate(block);
  if (!block.is_linear()) throw MergeError("block still holds norm layers; linearize it before squeezing");
  SqueezeResult<T> r;
  std::vector<KernelTensor<T>> per_branch;
  per_branch.reserve(block.branches.size());
  for (std::size_t i = 0; i < block.branches.size(); ++i)
    per_branch.push_back(squeeze_branch(block.branches[i], &r.trace, static_cast<long>(i)));
  if (per_branch.size() == 1) {
    r.kernel = std::move(per_branch.front());
  } else {
    std::vector<std::vector<std::size_t>> shapes;
    for (const auto& k : per_branch) shapes.push_back(k.shape());
    r.kernel = merge_parallel(std::span<const KernelTensor<T>>(per_branch));
    detail::record(&r.trace, "merge_parallel", -1, std::move(shapes), r.kernel, 0);
  }
  r.kh = r.kernel.kh();
  r.kw = r.kernel.kw();
  return r;
}

/// Squeeze each merge group separately (branches kept apart during training).
template <Scalar T>
std::vector<std::pair<std::size_t, SqueezeResult<T>>> squeeze_by_group(const BlockGraph<T>& block) {
  validate(block);
  std::vector<std::size_t> ids;
  for (const auto& b : block.branches)
    if (std::find(ids.begin(), ids.end(), b.merge_group) == ids.end()) ids.push_back(b.merge_group);
  std::vector<std::pair<std::size_t, SqueezeResult<T>>> out;
  for (auto id : ids) {
    BlockGraph<T> sub = block;
    sub.branches.clear();
    for (const auto& b : block.branches)
      if (b.merge_group == id) sub.branches.push_back(b);
    out.emplace_back(id, squeeze_block(sub));
  }
  return out;
}

/// Center offset of a branch of extent kb inside the block extent k.
inline std::size_t branch_offset(std::size_t k, std::size_t kb, const char* axis) {
  if (kb == k) return 0;
  if ((k - kb) % 2 != 0 || kb % 2 == 0)
    throw ShapeError(axis, "branch extent " + std::to_string(kb) + " cannot be center-aligned in " + std::to_string(k));
  return (k - kb) / 2;
}

/// Expanded (layer-by-layer) evaluation of a linear block under the
/// single-outer-padding convention. The post-addition norm is not applied.
template <Scalar T>
Tensor<T> expanded_forward(const BlockGraph<T>& block, const Tensor<T>& x) {
  validate(block);
  if (!block.is_linear()) throw BlockError("block still holds norm layers; linearize it before evaluating");
  const ConvGeometry g = block.output_geometry();
  const std::size_t k = block.effective_extent();
  const Tensor<T> xp = pad_spatial(x, g.pad_top, g.pad_bottom, g.pad_left, g.pad_right);
  const auto v = detail::as_nchw(x, "input");
  std::optional<Tensor<T>> acc;
  for (const auto& br : block.branches) {
    Tensor<T> h = xp;
    for (const auto& l : br.layers) h = conv2d_direct(h, l.weight);
    if (br.scaling) h = scale_by_channel(h, std::span<const T>(*br.scaling));
    const std::size_t off = branch_offset(k, br.effective_extent(), "kH");
    h = crop_spatial(h, off, off, v.h, v.w);
    acc = acc ? add(*acc, h) : std::move(h);
  }
  return subsample(*acc, block.stride.h, block.stride.w);
}

struct CostCounts {
  std::uint64_t buffer_elems = 0;
  std::uint64_t mults = 0;
};

struct CostReport {
  CostCounts offline;
  CostCounts online;
  double buffer_ratio() const {
    return offline.buffer_elems == 0 ? 0.0
                                     : static_cast<double>(online.buffer_elems) / static_cast<double>(offline.buffer_elems);
  }
};

/// Analytic training-cost accounting for one block at feature size (H, W), batch B.
///
/// Offline: every feature map the expanded block materializes except the block
/// output (B*C*H*W elements each) and every layer's convolution multiplies.
/// Online: every kernel produced by a squeeze step plus the merge multiplies
/// and one convolution with W_e.
template <Scalar T>
CostReport cost_report(const BlockGraph<T>& block, std::size_t h, std::size_t w, std::size_t batch) {
  const auto sq = squeeze_block(block);
  CostReport r;
  const std::uint64_t plane = static_cast<std::uint64_t>(batch) * h * w;
  std::uint64_t maps = 0;
  for (const auto& br : block.branches) {
    for (const auto& l : br.layers) {
      const std::uint64_t taps = kernel_extent(l.spec.kind) * kernel_extent(l.spec.kind);
      r.offline.mults += plane * l.spec.out_ch * l.weight.in_per_group() * taps;
      r.offline.buffer_elems += plane * l.spec.out_ch;
      ++maps;
    }
    if (br.scaling) {
      r.offline.mults += plane * block.out_ch;
      r.offline.buffer_elems += plane * block.out_ch;
      ++maps;
    }
  }
  // With a single branch its last map is the block output; otherwise the sum is.
  if (block.branches.size() == 1 && maps > 0) r.offline.buffer_elems -= plane * block.out_ch;

  for (const auto& s : sq.trace) {
    r.online.buffer_elems += s.output_elems;
    r.online.mults += s.mults;
  }
  const std::uint64_t ho = (h - 1) / block.stride.h + 1, wo = (w - 1) / block.stride.w + 1;
  r.online.mults += static_cast<std::uint64_t>(batch) * ho * wo * sq.kernel.out_channels() *
                    sq.kernel.in_per_group() * sq.kh * sq.kw;
  return r;
}

}  // namespace orepa
