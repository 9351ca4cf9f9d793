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

// Reverse-mode gradients for the operator set used by BlockGraph. Two routes
// compute dL/dparams for L = <g, block(x)>:
//   online  - backprop through conv(x, W_e) and then through the squeeze
//             (parallel merge, scaling, sequential merges, densify);
//   offline - backprop through the expanded layer-by-layer evaluation.
// Both differentiate the same function, so they agree to rounding.

#include <vector>

#include "orepa/block.hpp"
#include "orepa/squeeze.hpp"
#include "orepa/tensor.hpp"

namespace orepa {

template <Scalar T>
struct BranchGradient {
  std::vector<KernelTensor<T>> layers;
  std::vector<T> scaling;  // empty when the branch has no scaling
};

template <Scalar T>
struct BlockGradient {
  std::vector<BranchGradient<T>> branches;
};

/// dL/dW for y = conv(x, w, geom), given dy. Same group structure as `like`.
template <Scalar T>
KernelTensor<T> conv2d_backward_weight(const Tensor<T>& x, const Tensor<T>& dy, const KernelTensor<T>& like,
                                       const ConvGeometry& geom = {}) {
  const auto v = detail::as_nchw(x, "input");
  const auto o = detail::as_nchw(dy, "grad");
  if (o.c != like.out_channels()) throw ShapeError("channel", "gradient channels do not match kernel");
  KernelTensor<T> dw(like.out_channels(), like.in_per_group(), like.kh(), like.kw(), like.groups());
  const std::size_t cig = like.in_per_group(), opg = like.out_per_group();
  for (std::size_t b = 0; b < v.b; ++b)
    for (std::size_t co = 0; co < o.c; ++co) {
      const std::size_t g = co / opg;
      for (std::size_t oh = 0; oh < o.h; ++oh)
        for (std::size_t ow = 0; ow < o.w; ++ow) {
          const T d = dy.data()[((b * o.c + co) * o.h + oh) * o.w + ow];
          const long ih0 = static_cast<long>(oh * geom.stride_h) - static_cast<long>(geom.pad_top);
          const long iw0 = static_cast<long>(ow * geom.stride_w) - static_cast<long>(geom.pad_left);
          for (std::size_t cl = 0; cl < cig; ++cl) {
            const T* xc = x.data().data() + (b * v.c + g * cig + cl) * v.h * v.w;
            for (std::size_t kh = 0; kh < like.kh(); ++kh) {
              const long ih = ih0 + static_cast<long>(kh);
              if (ih < 0 || ih >= static_cast<long>(v.h)) continue;
              T* dwrow = &dw.at(co, cl, kh, 0);
              for (std::size_t kw = 0; kw < like.kw(); ++kw) {
                const long iw = iw0 + static_cast<long>(kw);
                if (iw < 0 || iw >= static_cast<long>(v.w)) continue;
                dwrow[kw] += d * xc[ih * static_cast<long>(v.w) + iw];
              }
            }
          }
        }
    }
  return dw;
}

/// dL/dx for y = conv(x, w, geom), given dy and the input shape.
template <Scalar T>
Tensor<T> conv2d_backward_input(const Tensor<T>& dy, const KernelTensor<T>& w, const std::vector<std::size_t>& x_shape,
                                const ConvGeometry& geom = {}) {
  Tensor<T> dx(x_shape);
  const auto v = detail::as_nchw(dx, "input");
  const auto o = detail::as_nchw(dy, "grad");
  const std::size_t cig = w.in_per_group(), opg = w.out_per_group();
  for (std::size_t b = 0; b < v.b; ++b)
    for (std::size_t co = 0; co < o.c; ++co) {
      const std::size_t g = co / opg;
      for (std::size_t oh = 0; oh < o.h; ++oh)
        for (std::size_t ow = 0; ow < o.w; ++ow) {
          const T d = dy.data()[((b * o.c + co) * o.h + oh) * o.w + ow];
          const long ih0 = static_cast<long>(oh * geom.stride_h) - static_cast<long>(geom.pad_top);
          const long iw0 = static_cast<long>(ow * geom.stride_w) - static_cast<long>(geom.pad_left);
          for (std::size_t cl = 0; cl < cig; ++cl) {
            T* xc = dx.data().data() + (b * v.c + g * cig + cl) * v.h * v.w;
            for (std::size_t kh = 0; kh < w.kh(); ++kh) {
              const long ih = ih0 + static_cast<long>(kh);
              if (ih < 0 || ih >= static_cast<long>(v.h)) continue;
              const T* wrow = &w.at(co, cl, kh, 0);
              for (std::size_t kw = 0; kw < w.kw(); ++kw) {
                const long iw = iw0 + static_cast<long>(kw);
                if (iw < 0 || iw >= static_cast<long>(v.w)) continue;
                xc[ih * static_cast<long>(v.w) + iw] += d * wrow[kw];
              }
            }
          }
        }
    }
  return dx;
}

/// Adjoint of merge_sequential: returns (dL/dw1, dL/dw2) given dL/dmerged.
template <Scalar T>
std::pair<KernelTensor<T>, KernelTensor<T>> merge_sequential_backward(const KernelTensor<T>& w1,
                                                                      const KernelTensor<T>& w2,
                                                                      const KernelTensor<T>& dm) {
  KernelTensor<T> d1(w1.out_channels(), w1.in_per_group(), w1.kh(), w1.kw(), 1);
  KernelTensor<T> d2(w2.out_channels(), w2.in_per_group(), w2.kh(), w2.kw(), 1);
  const std::size_t cp_n = w1.in_channels(), cj_n = w1.out_channels();
  for (std::size_t cq = 0; cq < w2.out_channels(); ++cq)
    for (std::size_t cj = 0; cj < cj_n; ++cj)
      for (std::size_t a = 0; a < w2.kh(); ++a)
        for (std::size_t b = 0; b < w2.kw(); ++b) {
          const T s = w2.at(cq, cj, a, b);
          T acc = 0;
          for (std::size_t cp = 0; cp < cp_n; ++cp)
            for (std::size_t p = 0; p < w1.kh(); ++p) {
              const T* src = &w1.at(cj, cp, p, 0);
              const T* g = &dm.at(cq, cp, p + a, b);
              T* dst = &d1.at(cj, cp, p, 0);
              for (std::size_t q = 0; q < w1.kw(); ++q) {
                acc += g[q] * src[q];
                dst[q] += g[q] * s;
              }
            }
          d2.at(cq, cj, a, b) = acc;
        }
  return {std::move(d1), std::move(d2)};
}

/// Center crop of a merged-kernel gradient back to one branch's extent.
template <Scalar T>
KernelTensor<T> merge_parallel_backward(const KernelTensor<T>& dm, const KernelTensor<T>& like) {
  KernelTensor<T> d(like.out_channels(), like.in_per_group(), like.kh(), like.kw(), like.groups());
  const std::size_t oh = (dm.kh() - like.kh()) / 2, ow = (dm.kw() - like.kw()) / 2;
  for (std::size_t o = 0; o < like.out_channels(); ++o)
    for (std::size_t i = 0; i < like.in_per_group(); ++i)
      for (std::size_t h = 0; h < like.kh(); ++h)
        for (std::size_t w = 0; w < like.kw(); ++w) d.at(o, i, h, w) = dm.at(o, i, h + oh, w + ow);
  return d;
}

namespace detail {

template <Scalar T>
BranchGradient<T> branch_backward_kernel_space(const Branch<T>& br, const KernelTensor<T>& d_branch) {
  const std::size_t n = br.layers.size();
  std::vector<KernelTensor<T>> dense(n), prefix(n);
  for (std::size_t j = 0; j < n; ++j) dense[j] = as_dense(br.layers[j].weight);
  prefix[0] = dense[0];
  for (std::size_t j = 1; j < n; ++j) prefix[j] = merge_sequential(prefix[j - 1], dense[j]);

  BranchGradient<T> out;
  KernelTensor<T> d = d_branch;
  if (br.scaling) {
    const auto& gamma = *br.scaling;
    const auto& m = prefix[n - 1];
    const std::size_t per = m.in_per_group() * m.kh() * m.kw();
    out.scaling.assign(gamma.size(), T(0));
    for (std::size_t c = 0; c < gamma.size(); ++c)
      for (std::size_t i = 0; i < per; ++i) {
        out.scaling[c] += d[c * per + i] * m[c * per + i];
        d[c * per + i] *= gamma[c];
      }
  }
  std::vector<KernelTensor<T>> d_dense(n);
  for (std::size_t j = n - 1; j >= 1; --j) {
    auto [d_prefix, d_layer] = merge_sequential_backward(prefix[j - 1], dense[j], d);
    d_dense[j] = std::move(d_layer);
    d = std::move(d_prefix);
  }
  d_dense[0] = std::move(d);
  out.layers.reserve(n);
  for (std::size_t j = 0; j < n; ++j) out.layers.push_back(as_grouped(d_dense[j], br.layers[j].weight));
  return out;
}

}  // namespace detail

/// Backprop dL/dW_e (for the whole squeezed kernel) through the squeeze.
template <Scalar T>
BlockGradient<T> backward_squeeze_kernel(const BlockGraph<T>& block, const KernelTensor<T>& d_we) {
  validate(block);
  BlockGradient<T> g;
  for (const auto& br : block.branches) {
    const std::size_t kb = br.effective_extent();
    KernelTensor<T> like(block.out_ch, block.in_ch, kb, kb, 1);
    g.branches.push_back(detail::branch_backward_kernel_space(br, merge_parallel_backward(d_we, like)));
  }
  return g;
}

/// Online route: gradients of L = <upstream, conv(x, W_e)> through the squeezed kernel.
template <Scalar T>
BlockGradient<T> backward_through_squeeze(const BlockGraph<T>& block, const Tensor<T>& x, const Tensor<T>& upstream) {
  const auto sq = squeeze_block(block);
  const auto d_we = conv2d_backward_weight(x, upstream, sq.kernel, block.output_geometry());
  return backward_squeeze_kernel(block, d_we);
}

/// Offline route: gradients of L = <upstream, expanded_forward(block, x)> by
/// backprop through every intermediate feature map.
template <Scalar T>
BlockGradient<T> backward_expanded(const BlockGraph<T>& block, const Tensor<T>& x, const Tensor<T>& upstream) {
  validate(block);
  const ConvGeometry geom = block.output_geometry();
  const std::size_t k = block.effective_extent();
  const auto v = detail::as_nchw(x, "input");
  const Tensor<T> xp = pad_spatial(x, geom.pad_top, geom.pad_bottom, geom.pad_left, geom.pad_right);

  // Undo the output subsampling: scatter into a full-resolution gradient.
  Tensor<T> g_full(detail::make_shape(v, block.out_ch, v.h, v.w));
  {
    const auto o = detail::as_nchw(upstream, "grad");
    for (std::size_t p = 0; p < o.b * o.c; ++p)
      for (std::size_t r = 0; r < o.h; ++r)
        for (std::size_t c = 0; c < o.w; ++c)
          g_full[(p * v.h + r * block.stride.h) * v.w + c * block.stride.w] = upstream[(p * o.h + r) * o.w + c];
  }

  BlockGradient<T> out;
  for (const auto& br : block.branches) {
    std::vector<Tensor<T>> acts{xp};
    for (const auto& l : br.layers) acts.push_back(conv2d_direct(acts.back(), l.weight));
    const Tensor<T>& pre = acts.back();
    const auto pv = detail::as_nchw(pre, "act");
    const std::size_t off = branch_offset(k, br.effective_extent(), "kH");
    Tensor<T> d(pre.shape());
    for (std::size_t p = 0; p < pv.b * pv.c; ++p)
      for (std::size_t r = 0; r < v.h; ++r)
        std::copy_n(g_full.data().data() + (p * v.h + r) * v.w, v.w,
                    d.data().data() + (p * pv.h + r + off) * pv.w + off);

    BranchGradient<T> bg;
    if (br.scaling) {
      const auto& gamma = *br.scaling;
      bg.scaling.assign(gamma.size(), T(0));
      const std::size_t plane = pv.h * pv.w;
      for (std::size_t b = 0; b < pv.b; ++b)
        for (std::size_t c = 0; c < pv.c; ++c) {
          const std::size_t base = (b * pv.c + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            bg.scaling[c] += d[base + i] * pre[base + i];
            d[base + i] *= gamma[c];
          }
        }
    }
    bg.layers.resize(br.layers.size());
    for (std::size_t j = br.layers.size(); j-- > 0;) {
      bg.layers[j] = conv2d_backward_weight(acts[j], d, br.layers[j].weight);
      if (j > 0) d = conv2d_backward_input(d, br.layers[j].weight, acts[j].shape());
    }
    out.branches.push_back(std::move(bg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Flat parameter view.

enum class ParamRole { LayerWeight, BranchScaling, NormScale, NormShift };

struct ParamSlot {
  ParamRole role = ParamRole::LayerWeight;
  std::size_t branch = 0, layer = 0;
  std::size_t offset = 0, count = 0;
};

/// Bijection between trainable scalars and positions of a flat vector.
/// Order: per branch, trainable layer weights then trainable scaling.
struct ParamIndex {
  std::vector<ParamSlot> slots;
  std::size_t size = 0;
};

template <Scalar T>
ParamIndex index_params(const BlockGraph<T>& block) {
  ParamIndex idx;
  auto add = [&](ParamRole r, std::size_t b, std::size_t l, std::size_t n) {
    idx.slots.push_back({r, b, l, idx.size, n});
    idx.size += n;
  };
  for (std::size_t b = 0; b < block.branches.size(); ++b) {
    const auto& br = block.branches[b];
    for (std::size_t l = 0; l < br.layers.size(); ++l)
      if (br.layers[l].spec.trainable) add(ParamRole::LayerWeight, b, l, br.layers[l].weight.size());
    if (br.scaling && br.scaling_trainable) add(ParamRole::BranchScaling, b, 0, br.scaling->size());
  }
  return idx;
}

template <Scalar T>
struct ParamSet {
  ParamIndex index;
  std::vector<T> values;
};

template <Scalar T>
std::vector<T> gather_params(const BlockGraph<T>& block, const ParamIndex& idx) {
  std::vector<T> v(idx.size);
  for (const auto& s : idx.slots) {
    std::span<const T> src;
    if (s.role == ParamRole::LayerWeight)
      src = block.branches[s.branch].layers[s.layer].weight.data();
    else if (s.role == ParamRole::BranchScaling)
      src = *block.branches[s.branch].scaling;
    else
      continue;
    std::copy(src.begin(), src.end(), v.begin() + static_cast<std::ptrdiff_t>(s.offset));
  }
  return v;
}

template <Scalar T>
void scatter_params(BlockGraph<T>& block, const ParamIndex& idx, std::span<const T> v) {
  for (const auto& s : idx.slots) {
    std::span<T> dst;
    if (s.role == ParamRole::LayerWeight)
      dst = block.branches[s.branch].layers[s.layer].weight.data();
    else if (s.role == ParamRole::BranchScaling)
      dst = *block.branches[s.branch].scaling;
    else
      continue;
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(s.offset), s.count, dst.begin());
  }
}

template <Scalar T>
std::vector<T> flatten_gradient(const BlockGradient<T>& g, const ParamIndex& idx) {
  std::vector<T> v(idx.size);
  for (const auto& s : idx.slots) {
    std::span<const T> src;
    if (s.role == ParamRole::LayerWeight)
      src = g.branches[s.branch].layers[s.layer].data();
    else if (s.role == ParamRole::BranchScaling)
      src = g.branches[s.branch].scaling;
    else
      continue;
    std::copy(src.begin(), src.end(), v.begin() + static_cast<std::ptrdiff_t>(s.offset));
  }
  return v;
}

/// L = <upstream, conv(x, squeeze(block).kernel)>.
template <Scalar T>
T surrogate_loss(const BlockGraph<T>& block, const Tensor<T>& x, const Tensor<T>& upstream) {
  const auto sq = squeeze_block(block);
  const auto y = conv2d_direct(x, sq.kernel, block.output_geometry());
  T l = 0;
  for (std::size_t i = 0; i < y.size(); ++i) l += upstream[i] * y[i];
  return l;
}

struct GradCheckResult {
  double max_rel_err = 0;     // central differences vs analytic (online)
  double max_route_diff = 0;  // online vs offline analytic gradients
  std::size_t checked = 0;
  std::size_t worst_index = 0;
};

/// Compare the online gradient with central differences (step eps) on every
/// trainable scalar and with the offline route. Relative error is
/// |a - f| / max(1, |a|, |f|).
inline GradCheckResult gradient_check(const BlockGraph<double>& block, const Tensor<double>& x,
                                      const Tensor<double>& upstream, double eps = 1e-6) {
  const ParamIndex idx = index_params(block);
  const auto online = flatten_gradient(backward_through_squeeze(block, x, upstream), idx);
  const auto offline = flatten_gradient(backward_expanded(block, x, upstream), idx);
  GradCheckResult r;
  r.checked = idx.size;
  for (std::size_t i = 0; i < idx.size; ++i) r.max_route_diff = std::max(r.max_route_diff, std::abs(online[i] - offline[i]));

  BlockGraph<double> probe = block;
  auto params = gather_params(probe, idx);
  for (std::size_t i = 0; i < idx.size; ++i) {
    const double saved = params[i];
    params[i] = saved + eps;
    scatter_params(probe, idx, std::span<const double>(params));
    const double lp = surrogate_loss(probe, x, upstream);
    params[i] = saved - eps;
    scatter_params(probe, idx, std::span<const double>(params));
    const double lm = surrogate_loss(probe, x, upstream);
    params[i] = saved;
    scatter_params(probe, idx, std::span<const double>(params));
    const double fd = (lp - lm) / (2 * eps);
    const double rel = std::abs(online[i] - fd) / std::max({1.0, std::abs(online[i]), std::abs(fd)});
    if (rel > r.max_rel_err) {
      r.max_rel_err = rel;
      r.worst_index = i;
    }
  }
  return r;
}

}  // namespace orepa
