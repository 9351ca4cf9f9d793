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
#include <sstream>
#include <string>
#include <vector>

#include "orepa/squeeze.hpp"

namespace orepa {

/// Zero-embed a dense kernel at the center of a k x k footprint.
template <Scalar T>
KernelTensor<T> embed_centered(const KernelTensor<T>& w, std::size_t k) {
  const std::size_t oh = branch_offset(k, w.kh(), "kH");
  const std::size_t ow = branch_offset(k, w.kw(), "kW");
  KernelTensor<T> out(w.out_channels(), w.in_per_group(), k, k, w.groups());
  for (std::size_t o = 0; o < w.out_channels(); ++o)
    for (std::size_t i = 0; i < w.in_per_group(); ++i)
      for (std::size_t a = 0; a < w.kh(); ++a)
        for (std::size_t b = 0; b < w.kw(); ++b) out.at(o, i, a + oh, b + ow) = w.at(o, i, a, b);
  return out;
}

/// Each branch squeezed on its own and embedded at the block extent.
template <Scalar T>
std::vector<KernelTensor<T>> branch_kernels(const BlockGraph<T>& block) {
  validate(block);
  const std::size_t k = block.effective_extent();
  std::vector<KernelTensor<T>> out;
  for (const auto& br : block.branches) out.push_back(embed_centered(squeeze_branch(br), k));
  return out;
}

struct SimilarityMatrix {
  std::size_t n = 0;
  std::vector<double> cos;  // n x n, row-major
  std::vector<std::size_t> zero_branches;

  double at(std::size_t i, std::size_t j) const { return cos[i * n + j]; }
  double mean_abs_off_diagonal() const {
    if (n < 2) return 0.0;
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += std::abs(at(i, j));
    return s / static_cast<double>(n * (n - 1));
  }
};

/// Cosine similarity between flattened per-branch kernels. A zero-norm branch
/// scores 0 against every other branch and is listed in zero_branches.
template <Scalar T>
SimilarityMatrix branch_similarity(const BlockGraph<T>& block) {
  const auto ks = branch_kernels(block);
  SimilarityMatrix m;
  m.n = ks.size();
  m.cos.assign(m.n * m.n, 0.0);
  std::vector<double> norms(m.n, 0.0);
  for (std::size_t i = 0; i < m.n; ++i) {
    for (T v : ks[i].data()) norms[i] += double(v) * double(v);
    norms[i] = std::sqrt(norms[i]);
    if (norms[i] == 0.0) m.zero_branches.push_back(i);
  }
  for (std::size_t i = 0; i < m.n; ++i) {
    m.cos[i * m.n + i] = 1.0;
    for (std::size_t j = i + 1; j < m.n; ++j) {
      double c = 0;
      if (norms[i] > 0 && norms[j] > 0) {
        const auto a = ks[i].data();
        const auto b = ks[j].data();
        for (std::size_t t = 0; t < a.size(); ++t) c += double(a[t]) * double(b[t]);
        c = std::clamp(c / (norms[i] * norms[j]), -1.0, 1.0);
      }
      m.cos[i * m.n + j] = m.cos[j * m.n + i] = c;
    }
  }
  return m;
}

/// norms[b][c]: Frobenius norm of branch b's output channel c, divided by the
/// sum over branches for that channel (0 where every branch is zero).
struct NormProfile {
  std::size_t branches = 0, channels = 0;
  std::vector<double> norms;

  double at(std::size_t b, std::size_t c) const { return norms[b * channels + c]; }
};

template <Scalar T>
NormProfile channel_norm_profile(const BlockGraph<T>& block) {
  const auto ks = branch_kernels(block);
  NormProfile p;
  p.branches = ks.size();
  p.channels = block.out_ch;
  p.norms.assign(p.branches * p.channels, 0.0);
  for (std::size_t b = 0; b < p.branches; ++b) {
    const auto& w = ks[b];
    const std::size_t per = w.in_per_group() * w.kh() * w.kw();
    for (std::size_t c = 0; c < p.channels; ++c) {
      double s = 0;
      for (std::size_t t = 0; t < per; ++t) s += double(w.data()[c * per + t]) * double(w.data()[c * per + t]);
      p.norms[b * p.channels + c] = std::sqrt(s);
    }
  }
  for (std::size_t c = 0; c < p.channels; ++c) {
    double total = 0;
    for (std::size_t b = 0; b < p.branches; ++b) total += p.norms[b * p.channels + c];
    for (std::size_t b = 0; b < p.branches; ++b) p.norms[b * p.channels + c] = total > 0 ? p.norms[b * p.channels + c] / total : 0.0;
  }
  return p;
}

inline std::string similarity_csv(const SimilarityMatrix& m) {
  std::ostringstream os;
  os.precision(17);
  os << "branch";
  for (std::size_t j = 0; j < m.n; ++j) os << ',' << j;
  os << '\n';
  for (std::size_t i = 0; i < m.n; ++i) {
    os << i;
    for (std::size_t j = 0; j < m.n; ++j) os << ',' << m.at(i, j);
    os << '\n';
  }
  return os.str();
}

inline std::string norm_profile_csv(const NormProfile& p) {
  std::ostringstream os;
  os.precision(17);
  os << "branch";
  for (std::size_t c = 0; c < p.channels; ++c) os << ",ch" << c;
  os << '\n';
  for (std::size_t b = 0; b < p.branches; ++b) {
    os << b;
    for (std::size_t c = 0; c < p.channels; ++c) os << ',' << p.at(b, c);
    os << '\n';
  }
  return os.str();
}

}  // namespace orepa
