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

#include <limits>

#include "oracles.hpp"

using namespace orepa;

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor<double>({2, 0, 1}), ShapeError);
  Tensor<float> t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
}

TEST(KernelTensor, OutChannelsDivisibleByGroups) {
  EXPECT_THROW(KernelTensor<double>(3, 1, 1, 1, 2), ShapeError);
  KernelTensor<double> w(4, 1, 3, 3, 2);
  EXPECT_EQ(w.in_channels(), 2u);
  EXPECT_EQ(w.out_per_group(), 2u);
}

TEST(Conv2d, ScalarProduct) {
  Tensor<double> x({1, 1, 1}, std::vector<double>{1});
  KernelTensor<double> w(1, 1, 1, 1, 1, std::vector<double>{2});
  const auto y = conv2d_direct(x, w);
  ASSERT_EQ(y.shape(), (std::vector<std::size_t>{1, 1, 1}));
  EXPECT_EQ(y[0], 2.0);
}

TEST(Conv2d, ZeroPaddingCounts) {
  Tensor<double> x({1, 3, 3}, 1.0);
  KernelTensor<double> w(1, 1, 3, 3, 1, 1.0);
  const auto y = conv2d_direct(x, w, ConvGeometry::uniform(1));
  EXPECT_EQ(y.at(0, 1, 1), 9.0);
  EXPECT_EQ(y.at(0, 0, 0), 4.0);
  EXPECT_EQ(y.at(0, 0, 2), 4.0);
  EXPECT_EQ(y.at(0, 2, 0), 4.0);
  EXPECT_EQ(y.at(0, 2, 2), 4.0);
  EXPECT_EQ(y.at(0, 0, 1), 6.0);
}

TEST(Conv2d, MatchesLoopNestOracle) {
  const auto x = oracle::random_tensor<double>({2, 5, 5}, 1);
  const auto w = oracle::random_kernel<double>(3, 2, 3, 3, 1, 2);
  const auto y = conv2d_direct(x, w, ConvGeometry::uniform(1));
  EXPECT_LE(oracle::max_diff(y, oracle::conv(x, w, 1, 1, 1, 1, 1, 1)), 1e-14);
}

TEST(Conv2d, OracleOverRandomGeometries) {
  Rng rng(7);
  for (int t = 0; t < 60; ++t) {
    const std::size_t g = rng.integer(1, 3), cig = rng.integer(1, 3), cog = rng.integer(1, 3);
    const std::size_t kh = rng.integer(1, 4), kw = rng.integer(1, 4);
    const std::size_t h = rng.integer(kh, 9), w = rng.integer(kw, 9);
    const std::size_t sh = rng.integer(1, 3), sw = rng.integer(1, 3);
    const std::size_t pt = rng.integer(0, 2), pb = rng.integer(0, 2), pl = rng.integer(0, 2), pr = rng.integer(0, 2);
    const auto x = oracle::random_tensor<double>({2, g * cig, h, w}, 100 + t);
    const auto k = oracle::random_kernel<double>(g * cog, cig, kh, kw, g, 200 + t);
    const auto y = conv2d_direct(x, k, ConvGeometry{sh, sw, pt, pb, pl, pr});
    const auto ref = oracle::conv(x, k, sh, sw, pt, pb, pl, pr);
    ASSERT_EQ(y.shape(), ref.shape()) << "trial " << t;
    EXPECT_LE(oracle::max_diff(y, ref), 1e-13) << "trial " << t;
    EXPECT_EQ(y.extent(2), (h + pt + pb - kh) / sh + 1);
  }
}

TEST(Conv2d, ShapeErrorsNameTheAxis) {
  Tensor<double> x({3, 4, 4});
  KernelTensor<double> w(2, 2, 3, 3, 1);
  try {
    conv2d_direct(x, w);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.axis(), "channel");
  }
  Tensor<double> small({2, 2, 2});
  try {
    conv2d_direct(small, w);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.axis(), "height");
  }
}

TEST(Conv2d, Bias) {
  Tensor<double> x({1, 2, 2}, 1.0);
  KernelTensor<double> w(2, 1, 1, 1, 1, std::vector<double>{1, 2});
  const std::vector<double> b{10, 20};
  const auto y = conv2d_direct<double>(x, w, ConvGeometry{}, std::span<const double>(b));
  EXPECT_EQ(y.at(0, 0, 0), 11.0);
  EXPECT_EQ(y.at(1, 1, 1), 22.0);
}

TEST(Conv2d, LinearInInputAndWeight) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const std::size_t c = rng.integer(1, 4), co = rng.integer(1, 4), k = 2 * rng.integer(0, 2) + 1;
    const auto x1 = oracle::random_tensor<double>({2, c, 7, 6}, 10 + t);
    const auto x2 = oracle::random_tensor<double>({2, c, 7, 6}, 50 + t);
    const auto w1 = oracle::random_kernel<double>(co, c, k, k, 1, 90 + t);
    const auto w2 = oracle::random_kernel<double>(co, c, k, k, 1, 130 + t);
    const double a = rng.uniform(-2, 2);
    const auto geom = ConvGeometry::same(k, k);

    Tensor<double> xs(x1.shape());
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = a * x1[i] + x2[i];
    const auto lhs = conv2d_direct(xs, w1, geom);
    const auto y1 = conv2d_direct(x1, w1, geom), y2 = conv2d_direct(x2, w1, geom);
    double scale = 0, diff = 0;
    for (std::size_t i = 0; i < lhs.size(); ++i) {
      diff = std::max(diff, std::abs(lhs[i] - (a * y1[i] + y2[i])));
      scale = std::max(scale, std::abs(lhs[i]) + std::abs(a * y1[i]) + std::abs(y2[i]));
    }
    EXPECT_LE(diff, 4 * std::numeric_limits<double>::epsilon() * scale * c * k * k);

    KernelTensor<double> ws(co, c, k, k, 1);
    for (std::size_t i = 0; i < ws.size(); ++i) ws[i] = a * w1[i] + w2[i];
    const auto lw = conv2d_direct(x1, ws, geom);
    const auto z2 = conv2d_direct(x1, w2, geom);
    diff = scale = 0;
    for (std::size_t i = 0; i < lw.size(); ++i) {
      diff = std::max(diff, std::abs(lw[i] - (a * y1[i] + z2[i])));
      scale = std::max(scale, std::abs(lw[i]) + std::abs(a * y1[i]) + std::abs(z2[i]));
    }
    EXPECT_LE(diff, 4 * std::numeric_limits<double>::epsilon() * scale * c * k * k);
  }
}

TEST(Conv2d, DepthwiseIsPerChannelCorrelation) {
  const auto x = oracle::random_tensor<double>({4, 6, 6}, 5);
  const auto w = oracle::random_kernel<double>(4, 1, 3, 3, 4, 6);
  const auto y = conv2d_direct(x, w, ConvGeometry::uniform(1));
  for (std::size_t c = 0; c < 4; ++c) {
    Tensor<double> xc({1, 6, 6});
    std::copy_n(x.data().begin() + c * 36, 36, xc.data().begin());
    KernelTensor<double> wc(1, 1, 3, 3, 1);
    std::copy_n(w.data().begin() + c * 9, 9, wc.data().begin());
    const auto yc = oracle::conv(xc, wc, 1, 1, 1, 1, 1, 1);
    for (std::size_t i = 0; i < 36; ++i) EXPECT_NEAR(y[c * 36 + i], yc[i], 1e-14);
  }
}

TEST(Conv2d, SinglePrecisionTracksDouble) {
  Rng rng(11);
  for (int t = 0; t < 6; ++t) {
    const std::size_t c = rng.integer(1, 8), co = rng.integer(1, 8), h = rng.integer(3, 32), w = rng.integer(3, 32);
    const auto x = oracle::random_tensor<double>({c, h, w}, 300 + t);
    const auto k = oracle::random_kernel<double>(co, c, 3, 3, 1, 400 + t);
    const auto yd = conv2d_direct(x, k, ConvGeometry::uniform(1));
    const auto yf = conv2d_direct(cast<float>(x), cast<float>(k), ConvGeometry::uniform(1));
    double num = 0, den = 0;
    for (std::size_t i = 0; i < yd.size(); ++i) {
      num = std::max(num, std::abs(yd[i] - double(yf[i])));
      den = std::max(den, std::abs(yd[i]));
    }
    EXPECT_LE(num / den, 1e-4);
  }
}

TEST(PadSpatial, CenterOfZeros) {
  Tensor<double> x({1, 1, 1}, std::vector<double>{5});
  const auto p = pad_spatial(x, 1, 1, 1, 1);
  ASSERT_EQ(p.shape(), (std::vector<std::size_t>{1, 3, 3}));
  for (std::size_t h = 0; h < 3; ++h)
    for (std::size_t w = 0; w < 3; ++w) EXPECT_EQ(p.at(0, h, w), (h == 1 && w == 1) ? 5.0 : 0.0);
}

TEST(PadSpatial, ZeroPadIsIdentity) {
  const auto x = oracle::random_tensor<double>({2, 3, 4}, 1);
  EXPECT_EQ(pad_spatial(x, 0, 0, 0, 0).storage(), x.storage());
}

TEST(PadSpatial, AsymmetricBookkeeping) {
  Tensor<double> x({2, 2, 2}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  const auto p = pad_spatial(x, 1, 0, 0, 1);
  ASSERT_EQ(p.shape(), (std::vector<std::size_t>{2, 3, 3}));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t h = 0; h < 3; ++h)
      for (std::size_t w = 0; w < 3; ++w) {
        const bool inside = h >= 1 && w <= 1;
        EXPECT_EQ(p.at(c, h, w), inside ? x.at(c, h - 1, w) : 0.0);
      }
}

TEST(Elementwise, ScaleByChannel) {
  Tensor<double> x({2, 1, 2}, std::vector<double>{1, 2, 3, 4});
  const std::vector<double> g{0.5, 2};
  const auto y = scale_by_channel(x, std::span<const double>(g));
  EXPECT_EQ(y.storage(), (std::vector<double>{0.5, 1, 6, 8}));
  const std::vector<double> bad{1};
  EXPECT_THROW(scale_by_channel(x, std::span<const double>(bad)), ShapeError);
}

TEST(Elementwise, AddAndSum) {
  const auto x = oracle::random_tensor<double>({2, 3, 3}, 9);
  EXPECT_EQ(add(x, Tensor<double>(x.shape())).storage(), x.storage());
  EXPECT_THROW(add(x, Tensor<double>({2, 3, 4})), ShapeError);
  const std::vector<Tensor<double>> copies(4, x);
  const auto s = sum_over(std::span<const Tensor<double>>(copies));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(s[i], 4 * x[i]);
}

TEST(Elementwise, CropAndSubsample) {
  Tensor<double> x({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) x[i] = double(i);
  const auto c = crop_spatial(x, 1, 1, 2, 2);
  EXPECT_EQ(c.storage(), (std::vector<double>{5, 6, 9, 10}));
  const auto s = subsample(x, 2, 3);
  EXPECT_EQ(s.storage(), (std::vector<double>{0, 3, 8, 11}));
}
