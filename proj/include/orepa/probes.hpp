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

// Numeric probes of one-step SGD dynamics for the single-output linear
// systems y = (end-to-end weight) . x with the surrogate loss L = g * y.
//
//   conv-scale      y = gamma * (W . x)
//   shared gamma    y = gamma * (sum_j W_j) . x
//   branch-wise     y = sum_j gamma_j * (W_j . x)
//   deep linear     y = W_N ... W_1 x
//
// Every conv-scale pair (gamma, W) with a given end-to-end weight W_e has a
// first-order update of the form -eta*g*(a*x + b*W_e): it lies in span{x, W_e}
// whatever the factorization or per-layer learning rates. The
// "first_order_diff" reported by the multi-branch probes is the distance of
// the observed first-order update from that span, i.e. the part that no
// single-branch conv-scale system can reproduce. First-order parts are
// isolated by Richardson extrapolation: F = 4*D(eta/2) - D(eta).

#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "orepa/rng.hpp"

namespace orepa {

using Vec = std::vector<double>;

namespace vec {
inline double dot(const Vec& a, const Vec& b) { return std::inner_product(a.begin(), a.end(), b.begin(), 0.0); }
inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }
inline Vec axpy(double s, const Vec& x, Vec y) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * x[i];
  return y;
}
inline Vec scaled(double s, Vec x) {
  for (auto& v : x) v *= s;
  return x;
}
inline Vec sub(const Vec& a, const Vec& b) { return axpy(-1.0, b, a); }
inline Vec richardson(const Vec& full, const Vec& half) { return sub(scaled(4.0, half), full); }

/// Distance of v from span(basis), by twice-applied modified Gram-Schmidt.
inline double distance_from_span(const Vec& v, const std::vector<Vec>& basis) {
  std::vector<Vec> q;
  for (const auto& b : basis) {
    Vec u = b;
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& e : q) u = axpy(-dot(u, e), e, u);
    const double n = norm(u);
    if (n > 1e-12 * std::max(1.0, norm(b))) q.push_back(scaled(1.0 / n, u));
  }
  Vec r = v;
  for (int pass = 0; pass < 2; ++pass)
    for (const auto& e : q) r = axpy(-dot(r, e), e, r);
  return norm(r);
}

inline Vec random_vector(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  Vec v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}
}  // namespace vec

struct StepRecord {
  Vec end_to_end;  // W_e before the step
  Vec observed;    // exact W_e(t+1) - W_e(t)
  Vec predicted;   // first-order prediction
  double residual_norm = 0;
};

struct DynamicsReport {
  std::string probe;
  double eta = 0;
  std::vector<StepRecord> steps;
  std::map<std::string, double> metrics;
  bool asserted = true;
};

// ---------------------------------------------------------------------------
// Conv-scale pair.

struct ConvScaleProbe {
  Vec observed;        // gamma' W' - gamma W
  Vec predicted;       // -eta g (gamma^2 x + (W.x) W)
  Vec predicted_diag;  // -eta g (W*W + gamma^2) * x, elementwise
  Vec residual;        // observed - predicted
  double residual_norm = 0;
};

inline ConvScaleProbe probe_conv_scale_update(const Vec& w, double gamma, const Vec& x, double g, double eta) {
  const double wx = vec::dot(w, x);
  const Vec w_next = vec::axpy(-eta * gamma * g, x, w);
  const double gamma_next = gamma - eta * g * wx;
  ConvScaleProbe p;
  p.observed = vec::sub(vec::scaled(gamma_next, w_next), vec::scaled(gamma, w));
  p.predicted = vec::scaled(-eta * g, vec::axpy(wx, w, vec::scaled(gamma * gamma, x)));
  p.predicted_diag.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) p.predicted_diag[i] = -eta * g * (w[i] * w[i] + gamma * gamma) * x[i];
  p.residual = vec::sub(p.observed, p.predicted);
  p.residual_norm = vec::norm(p.residual);
  return p;
}

/// residual(eta) / residual(eta/2); 4 for an O(eta^2) remainder.
inline double conv_scale_residual_ratio(const Vec& w, double gamma, const Vec& x, double g, double eta) {
  return probe_conv_scale_update(w, gamma, x, g, eta).residual_norm /
         probe_conv_scale_update(w, gamma, x, g, eta / 2).residual_norm;
}

// ---------------------------------------------------------------------------
// Multi-branch conv-scale systems.

struct MultiBranchSystem {
  std::vector<Vec> weights;  // W_j
  Vec gammas;                // one entry when shared, else one per branch
  bool shared = false;

  std::size_t branches() const { return weights.size(); }
  double gamma_of(std::size_t j) const { return shared ? gammas[0] : gammas[j]; }

  Vec end_to_end() const {
    Vec e(weights[0].size(), 0.0);
    for (std::size_t j = 0; j < branches(); ++j) e = vec::axpy(gamma_of(j), weights[j], e);
    return e;
  }

  /// One SGD step on L = g * (W_e . x); `w_lr_scale` multiplies the W learning rate.
  MultiBranchSystem step(const Vec& x, double g, double eta, double w_lr_scale = 1.0) const {
    MultiBranchSystem n = *this;
    if (shared) {
      Vec sum(weights[0].size(), 0.0);
      for (const auto& w : weights) sum = vec::axpy(1.0, w, sum);
      n.gammas[0] = gammas[0] - eta * g * vec::dot(sum, x);
      for (auto& w : n.weights) w = vec::axpy(-eta * w_lr_scale * gammas[0] * g, x, w);
    } else {
      for (std::size_t j = 0; j < branches(); ++j) {
        n.gammas[j] = gammas[j] - eta * g * vec::dot(weights[j], x);
        n.weights[j] = vec::axpy(-eta * w_lr_scale * gammas[j] * g, x, weights[j]);
      }
    }
    return n;
  }

  Vec update(const Vec& x, double g, double eta, double w_lr_scale = 1.0) const {
    return vec::sub(step(x, g, eta, w_lr_scale).end_to_end(), end_to_end());
  }

  /// Condition 1: at least two branches with W_j*W_j + gamma_j^2 != 0.
  std::size_t active_branches() const {
    std::size_t n = 0;
    for (std::size_t j = 0; j < branches(); ++j) {
      const double gj = gamma_of(j);
      bool active = gj != 0.0;
      for (double v : weights[j]) active = active || v != 0.0;
      n += active ? 1 : 0;
    }
    return n;
  }
  /// Condition 2: active branches pairwise distinct.
  bool active_branches_distinct() const {
    for (std::size_t a = 0; a < branches(); ++a)
      for (std::size_t b = a + 1; b < branches(); ++b) {
        const bool a_on = gamma_of(a) != 0.0 || vec::norm(weights[a]) != 0.0;
        const bool b_on = gamma_of(b) != 0.0 || vec::norm(weights[b]) != 0.0;
        if (a_on && b_on && weights[a] == weights[b]) return false;
      }
    return true;
  }
};

/// Single conv-scale reference with the multi-branch system's end-to-end weight.
inline MultiBranchSystem conv_scale_reference(const MultiBranchSystem& s) {
  MultiBranchSystem r;
  r.shared = true;
  if (s.shared) {
    Vec sum(s.weights[0].size(), 0.0);
    for (const auto& w : s.weights) sum = vec::axpy(1.0, w, sum);
    r.weights = {sum};
    r.gammas = {s.gammas[0]};
  } else {
    r.weights = {s.end_to_end()};
    r.gammas = {1.0};
  }
  return r;
}

/// First-order update of the system at (x, g, eta), by Richardson extrapolation.
inline Vec first_order_update(const MultiBranchSystem& s, const Vec& x, double g, double eta, double w_lr_scale = 1.0) {
  return vec::richardson(s.update(x, g, eta, w_lr_scale), s.update(x, g, eta / 2, w_lr_scale));
}

namespace detail {
inline DynamicsReport run_multibranch(std::string name, MultiBranchSystem s, const Vec& x, double g, double eta,
                                      std::size_t steps) {
  DynamicsReport r;
  r.probe = std::move(name);
  r.eta = eta;
  const Vec f = first_order_update(s, x, g, eta);
  const Vec e = s.end_to_end();
  r.metrics["first_order_diff"] = vec::distance_from_span(f, {x, e});
  r.metrics["first_order_norm"] = vec::norm(f);
  r.metrics["branches"] = static_cast<double>(s.branches());
  r.metrics["active_branches"] = static_cast<double>(s.active_branches());
  r.metrics["condition1"] = s.active_branches() >= 2 ? 1.0 : 0.0;
  r.metrics["condition2"] = s.active_branches_distinct() ? 1.0 : 0.0;

  double max_asym = 0;
  for (std::size_t t = 0; t < steps; ++t) {
    StepRecord rec;
    rec.end_to_end = s.end_to_end();
    rec.observed = s.update(x, g, eta);
    rec.predicted = first_order_update(s, x, g, eta);
    rec.residual_norm = vec::norm(vec::sub(rec.observed, rec.predicted));
    r.steps.push_back(std::move(rec));
    s = s.step(x, g, eta);
    for (std::size_t a = 0; a + 1 < s.branches(); ++a)
      for (std::size_t b = a + 1; b < s.branches(); ++b)
        max_asym = std::max(max_asym, vec::norm(vec::sub(s.weights[a], s.weights[b])));
  }
  r.metrics["max_branch_difference"] = max_asym;
  return r;
}
}  // namespace detail

/// Shared gamma over M branches whose weights sum to a conv-scale pair's W.
///
/// Reports first_order_diff (distance from span{x, W_e}; 0 expected), the
/// exact match against the conv-scale pair trained with W learning rate
/// M*eta (`lr_matched_diff`, 0 expected at every order), and the first-order
/// gap to the same pair trained with a common eta (`same_lr_first_order_diff`,
/// equal to (M-1)*eta*gamma^2*|g|*|x|).
inline DynamicsReport probe_shared_gamma(const std::vector<Vec>& parts, double gamma, const Vec& x, double g,
                                         double eta, std::size_t steps = 1) {
  MultiBranchSystem s{parts, {gamma}, true};
  auto r = detail::run_multibranch("shared", s, x, g, eta, steps);
  const MultiBranchSystem ref = conv_scale_reference(s);
  const double m = static_cast<double>(parts.size());
  r.metrics["lr_matched_diff"] = vec::norm(vec::sub(s.update(x, g, eta), ref.update(x, g, eta, m)));
  r.metrics["same_lr_first_order_diff"] =
      vec::norm(vec::sub(first_order_update(s, x, g, eta), first_order_update(ref, x, g, eta)));
  return r;
}

/// Branch-wise gamma_j. first_order_diff > 0 iff Conditions 1-2 hold
/// (generically). Also reports the cross-term magnitude
/// |sum_{i != j} gamma_i gamma_j W_i * W_j| and the spread of per-branch
/// first-order contributions (gamma_j^2 x + (W_j.x) W_j).
inline DynamicsReport probe_branchwise_gamma(const std::vector<Vec>& weights, const Vec& gammas, const Vec& x,
                                             double g, double eta, std::size_t steps = 1) {
  MultiBranchSystem s{weights, gammas, false};
  auto r = detail::run_multibranch("branchwise", s, x, g, eta, steps);
  Vec cross(x.size(), 0.0);
  for (std::size_t i = 0; i < weights.size(); ++i)
    for (std::size_t j = 0; j < weights.size(); ++j)
      if (i != j)
        for (std::size_t k = 0; k < x.size(); ++k) cross[k] += gammas[i] * gammas[j] * weights[i][k] * weights[j][k];
  r.metrics["cross_term_norm"] = vec::norm(cross);
  double spread = 0;
  std::vector<Vec> contrib;
  for (std::size_t j = 0; j < weights.size(); ++j) {
    if (s.gamma_of(j) == 0.0 && vec::norm(weights[j]) == 0.0) continue;
    contrib.push_back(vec::axpy(vec::dot(weights[j], x), weights[j], vec::scaled(gammas[j] * gammas[j], x)));
  }
  for (std::size_t a = 0; a < contrib.size(); ++a)
    for (std::size_t b = a + 1; b < contrib.size(); ++b)
      spread = std::max(spread, vec::norm(vec::sub(contrib[a], contrib[b])));
  r.metrics["branch_gradient_spread"] = spread;
  return r;
}

// ---------------------------------------------------------------------------
// Deep linear (multi-layer) chain.

struct Mat {
  std::size_t rows = 0, cols = 0;
  Vec v;
  double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
  static Mat zeros(std::size_t r, std::size_t c) { return {r, c, Vec(r * c, 0.0)}; }
};

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c = Mat::zeros(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t k = 0; k < a.cols; ++k)
      for (std::size_t j = 0; j < b.cols; ++j) c(i, j) += a(i, k) * b(k, j);
  return c;
}

inline Mat transpose(const Mat& a) {
  Mat t = Mat::zeros(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

/// Product W_N ... W_1 as a 1 x I row.
inline Vec chain_product(const std::vector<Mat>& layers) {
  Mat p = layers[0];
  for (std::size_t j = 1; j < layers.size(); ++j) p = matmul(layers[j], p);
  return p.v;
}

/// Projection of G onto the direction of W; zero when W == 0.
inline Vec project_onto(const Vec& w, const Vec& g) {
  const double n2 = vec::dot(w, w);
  if (n2 == 0.0) return Vec(w.size(), 0.0);
  return vec::scaled(vec::dot(w, g) / n2, w);
}

/// One SGD step on every layer of y = W_N ... W_1 x with L = g*y.
inline std::vector<Mat> chain_step(const std::vector<Mat>& layers, const Vec& x, double g, double eta) {
  const std::size_t n = layers.size();
  // below[i] = W_{i-1} ... W_1 x (column), above[i] = W_N ... W_{i+1} (row).
  std::vector<Mat> below(n), above(n);
  below[0] = {x.size(), 1, x};
  for (std::size_t i = 1; i < n; ++i) below[i] = matmul(layers[i - 1], below[i - 1]);
  above[n - 1] = {1, 1, {1.0}};
  for (std::size_t i = n - 1; i-- > 0;) above[i] = matmul(above[i + 1], layers[i + 1]);
  std::vector<Mat> next = layers;
  for (std::size_t i = 0; i < n; ++i) {
    const Mat grad = matmul(transpose(above[i]), transpose(below[i]));
    for (std::size_t k = 0; k < grad.v.size(); ++k) next[i].v[k] -= eta * g * grad.v[k];
  }
  return next;
}

/// -eta ||W_e||^(2 - 2/N) (G + (N-1) Pr_{W_e}(G)), G = g x.
inline Vec lemma_prediction(const Vec& we, const Vec& x, double g, double eta, std::size_t n) {
  const Vec grad = vec::scaled(g, x);
  const double nrm = vec::norm(we);
  const double exponent = 2.0 - 2.0 / static_cast<double>(n);
  const double scale = exponent == 0.0 ? 1.0 : std::pow(nrm, exponent);
  const Vec inner = vec::axpy(static_cast<double>(n - 1), project_onto(we, grad), grad);
  return vec::scaled(-eta * scale, inner);
}

/// Balanced chain: W_j = s u_j u_{j-1}^T with unit u_0 in R^I, unit u_j in
/// R^{widths[j-1]} and u_N = [1], so W_{j+1}^T W_{j+1} = W_j W_j^T.
inline std::vector<Mat> balanced_chain(Rng& rng, std::size_t input_dim, const std::vector<std::size_t>& widths,
                                       double s) {
  std::vector<Vec> u;
  auto unit = [&](std::size_t n) {
    Vec v = vec::random_vector(rng, n);
    return vec::scaled(1.0 / vec::norm(v), v);
  };
  u.push_back(unit(input_dim));
  for (auto w : widths) u.push_back(unit(w));
  u.push_back({1.0});
  std::vector<Mat> layers;
  for (std::size_t j = 1; j < u.size(); ++j) {
    Mat m = Mat::zeros(u[j].size(), u[j - 1].size());
    for (std::size_t r = 0; r < m.rows; ++r)
      for (std::size_t c = 0; c < m.cols; ++c) m(r, c) = s * u[j][r] * u[j - 1][c];
    layers.push_back(std::move(m));
  }
  return layers;
}

inline std::vector<Mat> random_chain(Rng& rng, std::size_t input_dim, const std::vector<std::size_t>& widths) {
  std::vector<Mat> layers;
  std::size_t prev = input_dim;
  std::vector<std::size_t> outs = widths;
  outs.push_back(1);
  for (auto w : outs) {
    Mat m = Mat::zeros(w, prev);
    m.v = vec::random_vector(rng, w * prev);
    layers.push_back(std::move(m));
    prev = w;
  }
  return layers;
}

/// Observed one-step end-to-end update vs the deep-linear first-order law.
/// `balanced` marks whether the law's premise holds; the caller asserts only then.
inline DynamicsReport probe_multilayer_lemma(const std::vector<Mat>& layers, const Vec& x, double g, double eta,
                                             bool balanced, std::size_t steps = 1) {
  DynamicsReport r;
  r.probe = "lemma";
  r.eta = eta;
  r.asserted = balanced;
  const std::size_t n = layers.size();
  std::vector<Mat> cur = layers;
  for (std::size_t t = 0; t < steps; ++t) {
    StepRecord rec;
    rec.end_to_end = chain_product(cur);
    auto next = chain_step(cur, x, g, eta);
    rec.observed = vec::sub(chain_product(next), rec.end_to_end);
    rec.predicted = lemma_prediction(rec.end_to_end, x, g, eta, n);
    rec.residual_norm = vec::norm(vec::sub(rec.observed, rec.predicted));
    r.steps.push_back(std::move(rec));
    cur = std::move(next);
  }
  const Vec we = chain_product(layers);
  const double res_full = vec::norm(vec::sub(vec::sub(chain_product(chain_step(layers, x, g, eta)), we),
                                             lemma_prediction(we, x, g, eta, n)));
  const double res_half = vec::norm(vec::sub(vec::sub(chain_product(chain_step(layers, x, g, eta / 2)), we),
                                             lemma_prediction(we, x, g, eta / 2, n)));
  r.metrics["layers"] = static_cast<double>(n);
  r.metrics["residual"] = res_full;
  r.metrics["residual_half"] = res_half;
  r.metrics["residual_ratio"] = res_half == 0.0 ? 0.0 : res_full / res_half;
  return r;
}

}  // namespace orepa
