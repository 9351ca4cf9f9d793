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

std::size_t default_k(PresetId id) { return id == PresetId::Orepa1x1 ? 1 : (id == PresetId::DeepStem ? 7 : 3); }

}  // namespace

TEST(ScalingInit, DefaultsInBranchOrder) {
  const std::array<double, 6> expect{1.0, 0.25, 0.5, 0.5, 0.0, 0.5};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(ScalingInit::kDefaults[i].second, expect[i]);
  EXPECT_EQ(ScalingInit::value(BranchKind::Other), 1.0);
  EXPECT_EQ(ScalingInit::value(BranchKind::Identity), 1.0);
  for (const auto& [kind, v] : ScalingInit::kDefaults) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Presets, NamesRoundTrip) {
  for (auto id : kAllPresets) EXPECT_EQ(parse_preset(preset_name(id)), id);
  EXPECT_FALSE(parse_preset("resnet").has_value());
}

TEST(Presets, Orepa3x3Structure) {
  const auto b = build_preset<double>(PresetId::Orepa3x3, 4, 6, 3, 1);
  ASSERT_EQ(b.branches.size(), 6u);
  const std::array<BranchKind, 6> kinds{BranchKind::Conv1x1,     BranchKind::ConvKxK,       BranchKind::Conv1x1KxK,
                                        BranchKind::Conv1x1Pool, BranchKind::Conv1x1Filter, BranchKind::DwPw};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(b.branches[i].kind, kinds[i]);
    ASSERT_TRUE(b.branches[i].scaling.has_value());
    for (double g : *b.branches[i].scaling) EXPECT_EQ(g, ScalingInit::kDefaults[i].second);
  }
  EXPECT_TRUE(b.post_add_norm);
  EXPECT_EQ(kind_name(b.branches[3].layers[1].spec.kind), "avgpool");
  EXPECT_EQ(kind_name(b.branches[4].layers[1].spec.kind), "freqfilter");
  EXPECT_EQ(b.branches[5].layers[0].weight.groups(), 4u);
  EXPECT_EQ(squeeze_block(b).kh, 3u);
}

TEST(Presets, Orepa3x3Extent5) {
  const auto b = build_preset<double>(PresetId::Orepa3x3, 2, 2, 5, 1);
  EXPECT_EQ(squeeze_block(b).kh, 5u);
}

TEST(Presets, Orepa1x1) {
  const auto b = build_preset<double>(PresetId::Orepa1x1, 3, 5, 1, 2);
  ASSERT_EQ(b.branches.size(), 2u);
  EXPECT_EQ(b.branches[1].layers.size(), 2u);
  EXPECT_EQ(squeeze_block(b).kh, 1u);
  EXPECT_THROW(build_preset<double>(PresetId::Orepa1x1, 3, 5, 3, 2), PresetError);
}

TEST(Presets, DeepStemFoldsToSeven) {
  const auto b = build_preset<double>(PresetId::DeepStem, 3, 64, 7, 3);
  ASSERT_EQ(b.branches.size(), 1u);
  ASSERT_EQ(b.branches[0].layers.size(), 3u);
  for (const auto& l : b.branches[0].layers) EXPECT_EQ(l.weight.kh(), 3u);
  const auto sq = squeeze_block(b);
  EXPECT_EQ(sq.kh, 7u);
  EXPECT_EQ(sq.kw, 7u);
  EXPECT_EQ(sq.kernel.out_channels(), 64u);
  EXPECT_EQ(sq.kernel.in_channels(), 3u);
}

TEST(Presets, DeepStemMatchesComposition) {
  auto b = build_preset<double>(PresetId::DeepStem, 2, 3, 7, 4);
  const auto x = oracle::random_tensor<double>({2, 2, 16, 16}, 5);
  // Valid-mode composition on a padded input equals one 7x7 same-padded conv.
  Tensor<double> h = oracle::conv(x, b.branches[0].layers[0].weight, 1, 1, 3, 3, 3, 3);
  h = oracle::conv(h, b.branches[0].layers[1].weight);
  h = oracle::conv(h, b.branches[0].layers[2].weight);
  const auto& g = *b.branches[0].scaling;
  for (std::size_t i = 0; i < h.size(); ++i) h[i] *= g[(i / 256) % 3];
  const auto sq = squeeze_block(b);
  EXPECT_LE(oracle::max_diff(h, oracle::conv(x, sq.kernel, 1, 1, 3, 3, 3, 3)), 1e-12);
  EXPECT_LE(oracle::max_diff(h, expanded_forward(b, x)), 1e-12);
  EXPECT_THROW(build_preset<double>(PresetId::DeepStem, 3, 3, 4, 1), PresetError);
  EXPECT_THROW(build_preset<double>(PresetId::DeepStem, 3, 3, 1, 1), PresetError);
}

TEST(Presets, OrepaVggGroups) {
  const auto b = build_preset<double>(PresetId::OrepaVgg, 4, 4, 3, 5);
  ASSERT_EQ(b.branches.size(), 8u);
  EXPECT_EQ(b.branches[5].layers[0].spec.out_ch, 32u);  // dw expansion 8
  EXPECT_EQ(b.branches[6].kind, BranchKind::Identity);
  EXPECT_FALSE(b.branches[6].layers[0].spec.trainable);
  EXPECT_EQ(b.branches[6].merge_group, 1u);
  EXPECT_EQ(b.branches[7].merge_group, 2u);
  const auto narrow = build_preset<double>(PresetId::OrepaVgg, 4, 6, 3, 5);
  EXPECT_EQ(narrow.branches.size(), 7u);
}

TEST(Presets, EveryPresetSqueezesExactly) {
  for (auto id : kAllPresets)
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const auto b = build_preset<double>(id, 3, 4, default_k(id), seed);
      const auto x = oracle::random_tensor<double>({2, 3, 16, 16}, seed + 10);
      const auto g = b.output_geometry();
      const auto y = oracle::conv(x, squeeze_block(b).kernel, 1, 1, g.pad_top, g.pad_bottom, g.pad_left, g.pad_right);
      EXPECT_LE(oracle::max_diff(y, expanded_forward(b, x)), 1e-9) << preset_name(id);
    }
}

TEST(Presets, InvalidArguments) {
  EXPECT_THROW(build_preset<double>(PresetId::Orepa3x3, 0, 4, 3, 1), PresetError);
  EXPECT_THROW(build_preset<double>(PresetId::Orepa3x3, 4, 4, 4, 1), PresetError);
  EXPECT_THROW(build_preset<double>(PresetId::DbbLinearized, 4, 4, 2, 1), PresetError);
}

TEST(Presets, ZeroScalingsSqueezeToZero) {
  PresetOptions opt;
  for (const auto& [kind, v] : ScalingInit::kDefaults) opt.scaling_overrides[kind] = 0.0;
  const auto b = build_preset<double>(PresetId::Orepa3x3, 3, 3, 3, 7, opt);
  const auto zero = squeeze_block(b);
  for (double v : zero.kernel.data()) EXPECT_EQ(v, 0.0);

  opt.scaling_overrides[BranchKind::ConvKxK] = 1.0;
  const auto only = build_preset<double>(PresetId::Orepa3x3, 3, 3, 3, 7, opt);
  EXPECT_EQ(squeeze_block(only).kernel, only.branches[1].layers[0].weight);
}

TEST(Presets, SeedDeterminism) {
  EXPECT_EQ(build_preset<double>(PresetId::Orepa3x3, 3, 3, 3, 9), build_preset<double>(PresetId::Orepa3x3, 3, 3, 3, 9));
  EXPECT_NE(build_preset<double>(PresetId::Orepa3x3, 3, 3, 3, 9), build_preset<double>(PresetId::Orepa3x3, 3, 3, 3, 10));
}

TEST(Linearize, PlainBlockGetsUnitScaling) {
  Branch<double> br;
  push_layer(br, LayerSpec::make(ConvLayer{3, 1}, 2, 2), 1);
  const BlockGraph<double> b{2, 2, {br}, false, {}};
  const auto l = linearize(b);
  ASSERT_TRUE(l.branches[0].scaling.has_value());
  EXPECT_EQ(*l.branches[0].scaling, (std::vector<double>{1.0, 1.0}));
  EXPECT_TRUE(l.post_add_norm);
}

TEST(Linearize, DbbBecomesPreset) {
  const auto raw = dbb_with_norms<double>(3, 3, 3, 4);
  EXPECT_FALSE(raw.is_linear());
  EXPECT_THROW(squeeze_block(raw), MergeError);
  const auto lin = linearize(raw);
  EXPECT_TRUE(lin.is_linear());
  EXPECT_EQ(lin, build_preset<double>(PresetId::DbbLinearized, 3, 3, 3, 4));
  EXPECT_EQ(lin.branches.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i)
    for (double g : *lin.branches[i].scaling) EXPECT_EQ(g, ScalingInit::kDefaults[i].second);
}

TEST(Linearize, Idempotent) {
  const auto once = linearize(dbb_with_norms<double>(2, 3, 3, 8));
  EXPECT_EQ(linearize(once), once);
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const auto b = linearize(random_block<double>(rng));
    EXPECT_EQ(linearize(b), b);
  }
}

TEST(RandomBlocks, AlwaysValid) {
  Rng rng(12);
  for (int t = 0; t < 100; ++t) {
    const auto b = random_block<double>(rng);
    EXPECT_NO_THROW(validate(b));
    EXPECT_TRUE(b.is_linear());
    EXPECT_GE(b.branches.size(), 1u);
  }
}
