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

#include <span>
#include <stdexcept>
#include <vector>

#include "orepa/tensor.hpp"

namespace orepa {

enum class MomentumStyle {
  /// W(t+1) = (1 - eta*lambda) W(t) - eta * sum_tau (eta*mu)^(t-tau) g(tau)
  Geometric,
  /// Framework-style: the history decays by mu instead of eta*mu.
  Standard,
};

struct OptimizerConfig {
  double eta = 0.01;
  double weight_decay = 0.0;
  double momentum = 0.0;
  MomentumStyle style = MomentumStyle::Geometric;

  void validate() const {
    if (!(eta > 0)) throw std::invalid_argument("learning rate must be > 0");
    if (!(weight_decay >= 0)) throw std::invalid_argument("weight decay must be >= 0");
    if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("momentum must lie in [0,1)");
  }
};

/// Gradient history summarized as v(t) = rho * v(t-1) + g(t), which equals
/// sum_tau rho^(t-tau) g(tau). rho = eta*mu (Geometric) or mu (Standard).
template <Scalar T>
struct SgdState {
  std::vector<T> history;
  std::size_t steps = 0;
};

template <Scalar T>
std::vector<T> sgd_step(std::span<const T> params, std::span<const T> grads, const OptimizerConfig& cfg,
                        SgdState<T>& state) {
  cfg.validate();
  if (params.size() != grads.size()) throw ShapeError("params", "parameter and gradient lengths differ");
  if (state.history.empty()) state.history.assign(params.size(), T(0));
  if (state.history.size() != params.size()) throw ShapeError("params", "optimizer state size changed");
  const T rho = static_cast<T>(cfg.style == MomentumStyle::Geometric ? cfg.eta * cfg.momentum : cfg.momentum);
  const T decay = static_cast<T>(1.0 - cfg.eta * cfg.weight_decay);
  const T eta = static_cast<T>(cfg.eta);
  std::vector<T> out(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.history[i] = (rho == T(0) ? T(0) : rho * state.history[i]) + grads[i];
    out[i] = decay * params[i] - eta * state.history[i];
  }
  ++state.steps;
  return out;
}

}  // namespace orepa
