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

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "orepa/autodiff.hpp"
#include "orepa/optim.hpp"
#include "orepa/rng.hpp"
#include "orepa/squeeze.hpp"

namespace orepa {

enum class TrainMode { Online, Offline };

inline const char* train_mode_name(TrainMode m) { return m == TrainMode::Online ? "online" : "offline"; }

struct TrainConfig {
  std::size_t steps = 200;
  OptimizerConfig opt{0.05, 0.0, 0.0, MomentumStyle::Geometric};
  TrainMode mode = TrainMode::Online;
  std::size_t batch = 4, height = 16, width = 16;
  std::uint64_t seed = 0;
  bool record_trajectory = false;
  double norm_eps = 1e-5;
};

/// Per-channel batch standardization followed by a trainable affine.
template <Scalar T>
struct PostNorm {
  std::vector<T> alpha, beta;

  explicit PostNorm(std::size_t channels = 0) : alpha(channels, T(1)), beta(channels, T(0)) {}
};

template <Scalar T>
struct TrainResult {
  std::vector<double> loss;  // loss before each step, plus the final loss
  ParamSet<T> final_params;  // block parameters, then norm alpha, beta when present
  std::vector<std::vector<T>> trajectory;
  BlockGraph<T> final_block;
  std::optional<PostNorm<T>> final_norm;
  std::optional<std::size_t> diverged_at;
};

namespace detail {

template <Scalar T>
struct NormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
};

template <Scalar T>
Tensor<T> standardize(const Tensor<T>& y, double eps, NormCache<T>* cache) {
  const auto v = as_nchw(y, "output");
  const std::size_t plane = v.h * v.w;
  const double n = static_cast<double>(v.b * plane);
  Tensor<T> out(y.shape());
  std::vector<T> inv(v.c);
  for (std::size_t c = 0; c < v.c; ++c) {
    double mean = 0;
    for (std::size_t b = 0; b < v.b; ++b)
      for (std::size_t i = 0; i < plane; ++i) mean += y[(b * v.c + c) * plane + i];
    mean /= n;
    double var = 0;
    for (std::size_t b = 0; b < v.b; ++b)
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = y[(b * v.c + c) * plane + i] - mean;
        var += d * d;
      }
    var /= n;
    inv[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
    for (std::size_t b = 0; b < v.b; ++b)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t at = (b * v.c + c) * plane + i;
        out[at] = static_cast<T>((y[at] - mean) * inv[c]);
      }
  }
  if (cache) *cache = {out, inv};
  return out;
}

/// dL/dy from dL/dxhat for the standardization above.
template <Scalar T>
Tensor<T> standardize_backward(const Tensor<T>& dxhat, const NormCache<T>& cache) {
  const auto v = as_nchw(dxhat, "grad");
  const std::size_t plane = v.h * v.w;
  const double n = static_cast<double>(v.b * plane);
  Tensor<T> dy(dxhat.shape());
  for (std::size_t c = 0; c < v.c; ++c) {
    double m1 = 0, m2 = 0;
    for (std::size_t b = 0; b < v.b; ++b)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t at = (b * v.c + c) * plane + i;
        m1 += dxhat[at];
        m2 += dxhat[at] * cache.xhat[at];
      }
    m1 /= n;
    m2 /= n;
    for (std::size_t b = 0; b < v.b; ++b)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t at = (b * v.c + c) * plane + i;
        dy[at] = static_cast<T>(cache.inv_std[c] * (dxhat[at] - m1 - cache.xhat[at] * m2));
      }
  }
  return dy;
}

template <Scalar T>
Tensor<T> block_output(const BlockGraph<T>& block, const Tensor<T>& x, TrainMode mode) {
  if (mode == TrainMode::Offline) return expanded_forward(block, x);
  return conv2d_direct(x, squeeze_block(block).kernel, block.output_geometry());
}

template <Scalar T>
BlockGradient<T> block_backward(const BlockGraph<T>& block, const Tensor<T>& x, const Tensor<T>& dy, TrainMode mode) {
  if (mode == TrainMode::Offline) return backward_expanded(block, x, dy);
  return backward_through_squeeze(block, x, dy);
}

}  // namespace detail

/// The fixed training batch drawn from `seed`: U(-sqrt3, sqrt3) entries.
template <Scalar T>
Tensor<T> toy_batch(std::size_t batch, std::size_t channels, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x7261696eULL, 0));
  Tensor<T> x({batch, channels, h, w});
  const double a = std::sqrt(3.0);
  for (auto& v : x.data()) v = static_cast<T>(rng.uniform(-a, a));
  return x;
}

/// Fit the block's squeezed kernel to `target` by full-batch gradient descent
/// on 1/2 * mean((f(x) - f*(x))^2). With post_add_norm, f and f* both pass
/// through the batch standardization; f also through the trainable affine.
template <Scalar T>
TrainResult<T> train_toy(BlockGraph<T> block, const KernelTensor<T>& target, const TrainConfig& cfg) {
  cfg.opt.validate();
  validate(block);
  const std::size_t k = block.effective_extent();
  if (target.out_channels() != block.out_ch || target.in_channels() != block.in_ch || target.kh() != k ||
      target.kw() != k || target.groups() != 1)
    throw ShapeError("target", "target kernel must be dense " + std::to_string(block.out_ch) + "x" +
                                   std::to_string(block.in_ch) + "x" + std::to_string(k) + "x" + std::to_string(k));

  const Tensor<T> x = toy_batch<T>(cfg.batch, block.in_ch, cfg.height, cfg.width, cfg.seed);
  Tensor<T> y_star = conv2d_direct(x, target, block.output_geometry());
  if (block.post_add_norm) y_star = detail::standardize(y_star, cfg.norm_eps, static_cast<detail::NormCache<T>*>(nullptr));

  const ParamIndex idx = index_params(block);
  std::optional<PostNorm<T>> norm;
  if (block.post_add_norm) norm.emplace(block.out_ch);
  const std::size_t c = block.out_ch;

  auto flat = [&] {
    auto p = gather_params(block, idx);
    if (norm) {
      p.insert(p.end(), norm->alpha.begin(), norm->alpha.end());
      p.insert(p.end(), norm->beta.begin(), norm->beta.end());
    }
    return p;
  };
  auto unflat = [&](const std::vector<T>& p) {
    scatter_params(block, idx, std::span<const T>(p));
    if (norm) {
      std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(idx.size), c, norm->alpha.begin());
      std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(idx.size + c), c, norm->beta.begin());
    }
  };

  TrainResult<T> res;
  SgdState<T> state;
  auto params = flat();
  if (cfg.record_trajectory) res.trajectory.push_back(params);

  for (std::size_t step = 0; step <= cfg.steps; ++step) {
    const Tensor<T> y = detail::block_output(block, x, cfg.mode);
    detail::NormCache<T> cache;
    Tensor<T> z = y;
    if (norm) {
      z = detail::standardize(y, cfg.norm_eps, &cache);
      z = scale_by_channel(z, std::span<const T>(norm->alpha));
      const auto v = detail::as_nchw(z, "output");
      for (std::size_t b = 0; b < v.b; ++b)
        for (std::size_t ch = 0; ch < v.c; ++ch)
          for (std::size_t i = 0; i < v.h * v.w; ++i) z[(b * v.c + ch) * v.h * v.w + i] += norm->beta[ch];
    }
    const double n = static_cast<double>(z.size());
    double loss = 0;
    Tensor<T> dz(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double d = static_cast<double>(z[i]) - static_cast<double>(y_star[i]);
      loss += d * d;
      dz[i] = static_cast<T>(d / n);
    }
    loss *= 0.5 / n;
    res.loss.push_back(loss);
    if (!std::isfinite(loss)) {
      res.diverged_at = step;
      break;
    }
    if (step == cfg.steps) break;

    std::vector<T> grad_norm;
    Tensor<T> dy = dz;
    if (norm) {
      const auto v = detail::as_nchw(dz, "grad");
      const std::size_t plane = v.h * v.w;
      std::vector<T> da(c, T(0)), db(c, T(0));
      Tensor<T> dxhat(dz.shape());
      for (std::size_t b = 0; b < v.b; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t at = (b * c + ch) * plane + i;
            da[ch] += dz[at] * cache.xhat[at];
            db[ch] += dz[at];
            dxhat[at] = dz[at] * norm->alpha[ch];
          }
      dy = detail::standardize_backward(dxhat, cache);
      grad_norm = da;
      grad_norm.insert(grad_norm.end(), db.begin(), db.end());
    }
    auto grads = flatten_gradient(detail::block_backward(block, x, dy, cfg.mode), idx);
    grads.insert(grads.end(), grad_norm.begin(), grad_norm.end());
    params = sgd_step(std::span<const T>(params), std::span<const T>(grads), cfg.opt, state);
    unflat(params);
    if (cfg.record_trajectory) res.trajectory.push_back(params);
  }

  res.final_params.index = idx;
  if (norm) {
    res.final_params.index.slots.push_back({ParamRole::NormScale, 0, 0, idx.size, c});
    res.final_params.index.slots.push_back({ParamRole::NormShift, 0, 0, idx.size + c, c});
    res.final_params.index.size = idx.size + 2 * c;
  }
  res.final_params.values = params;
  res.final_block = std::move(block);
  res.final_norm = std::move(norm);
  return res;
}

/// Largest |a - b| over two aligned trajectories.
template <Scalar T>
double trajectory_discrepancy(const std::vector<std::vector<T>>& a, const std::vector<std::vector<T>>& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    if (a[t].size() != b[t].size()) return std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < a[t].size(); ++i) m = std::max(m, std::abs(double(a[t][i]) - double(b[t][i])));
  }
  return m;
}

}  // namespace orepa
