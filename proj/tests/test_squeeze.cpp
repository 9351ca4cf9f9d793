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
#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace orepa;

namespace {

Branch<double> conv_branch(std::size_t in, std::size_t out, std::size_t k, std::uint64_t seed) {
  Branch<double> b;
  auto s = LayerSpec::make(ConvLayer{k, 1}, in, out);
  s.init = UniformKaiming{std::numbers::sqrt3, true};
  push_layer(b, s, seed);
  return b;
}

template <class U, class T>
KernelTensor<U> narrow(const KernelTensor<T>& w) {
  std::vector<U> d(w.data().begin(), w.data().end());
  return KernelTensor<U>(w.out_channels(), w.in_per_group(), w.kh(), w.kw(), w.groups(), std::move(d));
}

BlockGraph<float> narrow(const BlockGraph<double>& b) {
  BlockGraph<float> f{b.in_ch, b.out_ch, {}, b.post_add_norm, b.stride};
  for (const auto& br : b.branches) {
    Branch<float> nb;
    for (const auto& l : br.layers) nb.layers.push_back({l.spec, narrow<float>(l.weight)});
    if (br.scaling) nb.scaling = std::vector<float>(br.scaling->begin(), br.scaling->end());
    f.branches.push_back(std::move(nb));
  }
  return f;
}

}  // namespace

TEST(MergeSequential, PointwiseIsMatmul) {
  const auto a = oracle::random_kernel<double>(3, 2, 1, 1, 1, 1);  // A: 3x2
  const auto b = oracle::random_kernel<double>(4, 3, 1, 1, 1, 2);  // B: 4x3
  const auto m = merge_sequential(a, b);
  ASSERT_EQ(m.shape(), (std::vector<std::size_t>{4, 2, 1, 1}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < 3; ++c) s += b.at(i, c, 0, 0) * a.at(c, j, 0, 0);
      EXPECT_NEAR(m.at(i, j, 0, 0), s, 1e-15);
    }
}

TEST(MergeSequential, IdentityAbsorbed) {
  const auto id = materialize<double>(LayerSpec::make(IdentityConv1x1{}, 3, 3), 0);
  const auto k = oracle::random_kernel<double>(2, 3, 3, 3, 1, 3);
  EXPECT_EQ(merge_sequential(id, k), k);
}

TEST(MergeSequential, AllOnesAutocorrelationCounts) {
  KernelTensor<double> ones(1, 1, 3, 3, 1, 1.0);
  const auto two = merge_sequential(ones, ones);
  ASSERT_EQ(two.kh(), 5u);
  EXPECT_EQ(two.at(0, 0, 2, 2), 9.0);
  EXPECT_EQ(two.at(0, 0, 0, 0), 1.0);
  EXPECT_EQ(two, oracle::merge_first_form(ones, ones));

  const auto three = merge_sequential(two, ones);
  ASSERT_EQ(three.kh(), 7u);
  ASSERT_EQ(three.kw(), 7u);
  const auto ref = oracle::merge_first_form(oracle::merge_first_form(ones, ones), ones);
  EXPECT_EQ(three, ref);
  // 1-D counts of three boxcars are 1 3 6 7 6 3 1.
  const double counts[7] = {1, 3, 6, 7, 6, 3, 1};
  for (std::size_t a = 0; a < 7; ++a)
    for (std::size_t b = 0; b < 7; ++b) EXPECT_EQ(three.at(0, 0, a, b), counts[a] * counts[b]);
  EXPECT_EQ(three.at(0, 0, 0, 0), 1.0);
  EXPECT_EQ(three.at(0, 0, 3, 3), 49.0);
}

TEST(MergeSequential, BothFormsAgree) {
  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    const std::size_t ci = rng.integer(1, 3), cm = rng.integer(1, 3), co = rng.integer(1, 3);
    const std::size_t k1h = rng.integer(1, 4), k1w = rng.integer(1, 4), k2h = rng.integer(1, 4), k2w = rng.integer(1, 4);
    const auto w1 = oracle::random_kernel<double>(cm, ci, k1h, k1w, 1, 10 + t);
    const auto w2 = oracle::random_kernel<double>(co, cm, k2h, k2w, 1, 60 + t);
    const auto m = merge_sequential(w1, w2);
    EXPECT_EQ(m.kh(), k1h + k2h - 1);
    EXPECT_EQ(m.kw(), k1w + k2w - 1);
    EXPECT_LE(oracle::max_diff(m, oracle::merge_first_form(w1, w2)), 1e-14);
    EXPECT_LE(oracle::max_diff(m, oracle::merge_second_form(w1, w2)), 1e-14);
  }
}

TEST(MergeSequential, ConvOfConvOnInterior) {
  const auto w1 = oracle::random_kernel<double>(3, 2, 3, 3, 1, 1);
  const auto w2 = oracle::random_kernel<double>(2, 3, 5, 3, 1, 2);
  const auto x = oracle::random_tensor<double>({2, 2, 20, 20}, 3);
  const auto two_step = oracle::conv(oracle::conv(x, w1), w2);
  const auto one_step = oracle::conv(x, merge_sequential(w1, w2));
  EXPECT_LE(oracle::max_diff(two_step, one_step), 1e-12);
}

TEST(MergeSequential, Errors) {
  const auto a = oracle::random_kernel<double>(3, 2, 1, 1, 1, 1);
  const auto b = oracle::random_kernel<double>(4, 2, 1, 1, 1, 2);
  EXPECT_THROW(merge_sequential(a, b), ShapeError);
  const auto g = oracle::random_kernel<double>(4, 1, 3, 3, 4, 3);
  EXPECT_THROW(merge_sequential(g, g), ShapeError);
}

TEST(MergeSequential, Associative) {
  const auto w1 = oracle::random_kernel<double>(3, 2, 3, 3, 1, 1);
  const auto w2 = oracle::random_kernel<double>(4, 3, 1, 3, 1, 2);
  const auto w3 = oracle::random_kernel<double>(2, 4, 5, 3, 1, 3);
  const auto left = merge_sequential(merge_sequential(w1, w2), w3);
  const auto right = merge_sequential(w1, merge_sequential(w2, w3));
  EXPECT_LE(oracle::max_diff(left, right), 1e-12);
}

TEST(MergeParallel, ZeroIsIdentityAndCommutative) {
  const auto k = oracle::random_kernel<double>(2, 3, 3, 3, 1, 1);
  const KernelTensor<double> z(2, 3, 3, 3, 1);
  EXPECT_EQ(merge_parallel({k, z}), k);
  const auto a = oracle::random_kernel<double>(2, 3, 1, 1, 1, 2);
  const auto c = oracle::random_kernel<double>(2, 3, 5, 5, 1, 3);
  EXPECT_EQ(merge_parallel({a, k, c}), merge_parallel({c, a, k}));
  EXPECT_EQ(merge_parallel({a, k}), merge_parallel({k, a}));
}

TEST(MergeParallel, CenterAlignment) {
  const auto k = oracle::random_kernel<double>(1, 1, 3, 3, 1, 4);
  KernelTensor<double> w(1, 1, 1, 1, 1, std::vector<double>{0.75});
  const auto m = merge_parallel({w, k});
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b) EXPECT_EQ(m.at(0, 0, a, b), k.at(0, 0, a, b) + ((a == 1 && b == 1) ? 0.75 : 0.0));

  KernelTensor<double> two(1, 1, 1, 1, 1, std::vector<double>{2});
  KernelTensor<double> center(1, 1, 3, 3, 1);
  center.at(0, 0, 1, 1) = 1;
  const auto s = merge_parallel({two, center});
  EXPECT_EQ(s.at(0, 0, 1, 1), 3.0);
  EXPECT_EQ(s.at(0, 0, 0, 0), 0.0);
}

TEST(MergeParallel, Errors) {
  const auto even = oracle::random_kernel<double>(1, 1, 2, 2, 1, 1);
  const auto odd = oracle::random_kernel<double>(1, 1, 3, 3, 1, 2);
  try {
    merge_parallel({even, odd});
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.axis(), "kH");
  }
  const auto other = oracle::random_kernel<double>(2, 1, 3, 3, 1, 3);
  EXPECT_THROW(merge_parallel({odd, other}), ShapeError);
}

TEST(BranchScaling, Basics) {
  const auto w = oracle::random_kernel<double>(2, 3, 3, 3, 1, 1);
  const std::vector<double> ones{1, 1}, half{0, 1};
  EXPECT_EQ(apply_branch_scaling(w, std::span<const double>(ones)), w);
  const auto z = apply_branch_scaling(w, std::span<const double>(half));
  for (std::size_t i = 0; i < 27; ++i) EXPECT_EQ(z[i], 0.0);
  for (std::size_t i = 27; i < 54; ++i) EXPECT_EQ(z[i], w[i]);
  const std::vector<double> three{1, 2, 3};
  EXPECT_THROW(apply_branch_scaling(w, std::span<const double>(three)), ShapeError);
}

TEST(BranchScaling, EqualsMergeWithScalingKernel) {
  const auto w = oracle::random_kernel<double>(3, 2, 3, 3, 1, 2);
  const std::vector<double> g{0.3, -1.7, 2.5};
  const auto viaSeq = merge_sequential(w, as_dense(scaling_kernel(std::span<const double>(g))));
  EXPECT_EQ(apply_branch_scaling(w, std::span<const double>(g)), viaSeq);
}

TEST(SqueezeBlock, SingleConvBranch) {
  BlockGraph<double> b{2, 3, {conv_branch(2, 3, 3, 1)}, false, {}};
  b.branches[0].scaling = std::vector<double>(3, 1.0);
  const auto sq = squeeze_block(b);
  EXPECT_EQ(sq.kernel, b.branches[0].layers[0].weight);
  EXPECT_EQ(sq.kh, 3u);
}

TEST(SqueezeBlock, RejectsNormMarkers) {
  BlockGraph<double> b{2, 2, {conv_branch(2, 2, 3, 1)}, false, {}};
  b.branches[0].norm_after = {0};
  EXPECT_THROW(squeeze_block(b), MergeError);
}

TEST(SqueezeBlock, EffectiveExtentLaw) {
  Rng rng(21);
  for (int t = 0; t < 50; ++t) {
    const auto b = random_block<double>(rng);
    const auto sq = squeeze_block(b);
    std::size_t k = 1;
    for (const auto& br : b.branches) {
      std::size_t kb = 1;
      for (const auto& l : br.layers) kb += l.weight.kh() - 1;
      k = std::max(k, kb);
      EXPECT_EQ(squeeze_branch(br).kh(), kb);
    }
    EXPECT_EQ(sq.kh, k);
    EXPECT_EQ(sq.kw, k);
  }
}

TEST(SqueezeBlock, Distributive) {
  Rng rng(22);
  for (int t = 0; t < 20; ++t) {
    auto b = random_block<double>(rng);
    if (b.branches.size() < 2) continue;
    BlockGraph<double> a1 = b, a2 = b;
    a1.branches.assign(b.branches.begin(), b.branches.begin() + 1);
    a2.branches.assign(b.branches.begin() + 1, b.branches.end());
    const auto whole = squeeze_block(b).kernel;
    const auto k1 = squeeze_block(a1).kernel, k2 = squeeze_block(a2).kernel;
    EXPECT_LE(oracle::max_diff(whole, merge_parallel({k1, k2})), 1e-14) << "trial " << t;
  }
}

TEST(SqueezeBlock, TraceRecordsEveryStep) {
  const auto b = build_preset<double>(PresetId::Orepa3x3, 2, 3, 3, 1);
  const auto sq = squeeze_block(b);
  std::size_t seq = 0, scale = 0, dens = 0, par = 0;
  for (std::size_t i = 0; i < sq.trace.size(); ++i) {
    EXPECT_EQ(sq.trace[i].step, i);
    seq += sq.trace[i].op == "merge_sequential";
    scale += sq.trace[i].op == "scale";
    dens += sq.trace[i].op == "densify";
    par += sq.trace[i].op == "merge_parallel";
  }
  EXPECT_EQ(seq, 4u);    // 1x1-kxk, 1x1-pool, 1x1-filter, dw-pw
  EXPECT_EQ(scale, 6u);  // one per branch
  EXPECT_EQ(dens, 3u);   // avgpool, freqfilter, dwconv
  EXPECT_EQ(par, 1u);
  EXPECT_EQ(sq.trace.back().op, "merge_parallel");
  EXPECT_EQ(sq.trace.back().output, (std::vector<std::size_t>{3, 2, 3, 3}));
}

TEST(ExpandedForward, IdentityBranchPassesThrough) {
  Branch<double> br;
  push_layer(br, LayerSpec::make(IdentityConv1x1{}, 3, 3), 0);
  BlockGraph<double> b{3, 3, {br}, false, {}};
  const auto x = oracle::random_tensor<double>({2, 3, 5, 4}, 1);
  EXPECT_EQ(expanded_forward(b, x).storage(), x.storage());
}

TEST(ExpandedForward, TwoIdenticalBranchesDouble) {
  const auto br = conv_branch(2, 2, 3, 4);
  BlockGraph<double> one{2, 2, {br}, false, {}}, two{2, 2, {br, br}, false, {}};
  const auto x = oracle::random_tensor<double>({2, 6, 6}, 2);
  const auto y1 = expanded_forward(one, x), y2 = expanded_forward(two, x);
  for (std::size_t i = 0; i < y1.size(); ++i) EXPECT_DOUBLE_EQ(y2[i], 2 * y1[i]);
  EXPECT_LE(oracle::max_diff(y1, oracle::conv(x, br.layers[0].weight, 1, 1, 1, 1, 1, 1)), 1e-14);
}

TEST(ExpandedForward, OrepaPresetMatchesSqueeze) {
  const auto b = build_preset<double>(PresetId::Orepa3x3, 2, 2, 3, 9);
  const auto x = oracle::random_tensor<double>({2, 16, 16}, 3);
  const auto sq = squeeze_block(b);
  const auto y = oracle::conv(x, sq.kernel, 1, 1, 1, 1, 1, 1);
  EXPECT_LE(oracle::max_diff(y, expanded_forward(b, x)), 1e-10);
}

TEST(ExpandedForward, RandomBlocksMatchSqueeze) {
  Rng rng(2024);
  double worst64 = 0, worst32 = 0;
  for (int t = 0; t < 200; ++t) {
    const auto b = random_block<double>(rng);
    const std::size_t batch = rng.integer(1, 2), h = rng.integer(1, 10), w = rng.integer(1, 10);
    const auto x = oracle::random_tensor<double>({batch, b.in_ch, h, w}, 5000 + t);
    const auto sq = squeeze_block(b);
    const auto g = b.output_geometry();
    const auto y = oracle::conv(x, sq.kernel, g.stride_h, g.stride_w, g.pad_top, g.pad_bottom, g.pad_left, g.pad_right);
    worst64 = std::max(worst64, oracle::max_diff(y, expanded_forward(b, x)));
    if (t % 4 == 0) {
      const auto bf = narrow(b);
      const Tensor<float> xf(x.shape(), std::vector<float>(x.data().begin(), x.data().end()));
      worst32 = std::max(worst32, oracle::max_diff(conv2d_direct(xf, squeeze_block(bf).kernel, g), expanded_forward(bf, xf)));
    }
  }
  EXPECT_LE(worst64, 1e-9);
  EXPECT_LE(worst32, 1e-3);
}

TEST(ExpandedForward, StrideAppliedToOutput) {
  auto b = build_preset<double>(PresetId::Orepa3x3, 2, 2, 3, 1);
  b.stride = {2, 2};
  const auto x = oracle::random_tensor<double>({1, 2, 7, 8}, 9);
  const auto y = expanded_forward(b, x);
  EXPECT_EQ(y.shape(), (std::vector<std::size_t>{1, 2, 4, 4}));
  EXPECT_LE(oracle::max_diff(y, oracle::conv(x, squeeze_block(b).kernel, 2, 2, 1, 1, 1, 1)), 1e-12);
}

TEST(SqueezeByGroup, GroupsSumToWhole) {
  const auto b = build_preset<double>(PresetId::OrepaVgg, 3, 3, 3, 2);
  const auto groups = squeeze_by_group(b);
  ASSERT_EQ(groups.size(), 3u);
  std::vector<KernelTensor<double>> ks;
  for (const auto& [id, r] : groups) ks.push_back(r.kernel);
  EXPECT_LE(oracle::max_diff(merge_parallel(std::span<const KernelTensor<double>>(ks)), squeeze_block(b).kernel), 1e-14);
}

TEST(CostReport, SingleConvHasNoIntermediates) {
  BlockGraph<double> b{4, 4, {conv_branch(4, 4, 3, 1)}, false, {}};
  const auto c = cost_report(b, 8, 8, 2);
  EXPECT_EQ(c.offline.buffer_elems, 0u);
  EXPECT_EQ(c.online.buffer_elems, 0u);
  EXPECT_EQ(c.offline.mults, c.online.mults);
  EXPECT_EQ(c.online.mults, 2u * 8 * 8 * 4 * 4 * 9);
}

TEST(CostReport, PointwiseThenKxKCounts) {
  Branch<double> br;
  push_layer(br, LayerSpec::make(ConvLayer{1, 1}, 64, 64), 1);
  push_layer(br, LayerSpec::make(ConvLayer{3, 1}, 64, 64), 2);
  BlockGraph<double> b{64, 64, {br}, false, {}};
  const auto c = cost_report(b, 56, 56, 32);
  EXPECT_EQ(c.offline.buffer_elems, 32ull * 64 * 56 * 56);
  EXPECT_EQ(c.online.buffer_elems, 64ull * 64 * 3 * 3);
  EXPECT_NEAR(double(c.offline.buffer_elems) / double(c.online.buffer_elems), 6422528.0 / 36864.0, 1e-9);
}

TEST(CostReport, OrepaPresetSavesBuffer) {
  const auto b = build_preset<double>(PresetId::Orepa3x3, 64, 64, 3, 1);
  const auto c = cost_report(b, 56, 56, 32);
  EXPECT_LE(c.buffer_ratio(), 0.10);
  EXPECT_GT(c.offline.buffer_elems, 0u);
}
