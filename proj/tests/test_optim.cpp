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

#include "orepa/optim.hpp"

using namespace orepa;

namespace {

std::vector<double> step(const std::vector<double>& p, const std::vector<double>& g, const OptimizerConfig& c,
                         SgdState<double>& s) {
  return sgd_step(std::span<const double>(p), std::span<const double>(g), c, s);
}

}  // namespace

TEST(Sgd, PlainStep) {
  SgdState<double> s;
  EXPECT_DOUBLE_EQ(step({1.0}, {1.0}, {0.1, 0, 0}, s)[0], 0.9);
}

TEST(Sgd, DecayOnly) {
  SgdState<double> s;
  const auto out = step({2.0, -4.0}, {0, 0}, {0.1, 0.5, 0}, s);
  EXPECT_DOUBLE_EQ(out[0], 0.95 * 2.0);
  EXPECT_DOUBLE_EQ(out[1], 0.95 * -4.0);
}

TEST(Sgd, GeometricMomentumTwoSteps) {
  SgdState<double> s;
  const OptimizerConfig c{0.1, 0, 0.9, MomentumStyle::Geometric};
  const auto p1 = step({0.0}, {1.0}, c, s);
  EXPECT_DOUBLE_EQ(p1[0], -0.1);
  const auto p2 = step(p1, {1.0}, c, s);
  EXPECT_NEAR(p2[0] - p1[0], -0.1 * (1 + 0.09), 1e-15);
}

TEST(Sgd, StandardMomentumTwoSteps) {
  SgdState<double> s;
  const OptimizerConfig c{0.1, 0, 0.9, MomentumStyle::Standard};
  const auto p1 = step({0.0}, {1.0}, c, s);
  const auto p2 = step(p1, {1.0}, c, s);
  EXPECT_NEAR(p2[0] - p1[0], -0.1 * 1.9, 1e-15);
}

TEST(Sgd, GeometricSumMatchesClosedForm) {
  const OptimizerConfig c{0.2, 0.1, 0.7, MomentumStyle::Geometric};
  const std::vector<double> grads{0.3, -1.2, 0.8, 2.0, -0.5};
  SgdState<double> s;
  std::vector<double> p{1.5};
  double ref = 1.5;
  for (std::size_t t = 0; t < grads.size(); ++t) {
    p = step(p, {grads[t]}, c, s);
    double sum = 0;
    for (std::size_t tau = 0; tau <= t; ++tau) sum += std::pow(c.eta * c.momentum, double(t - tau)) * grads[tau];
    ref = (1 - c.eta * c.weight_decay) * ref - c.eta * sum;
    EXPECT_NEAR(p[0], ref, 1e-14);
  }
}

TEST(Sgd, MemorylessWithoutMomentum) {
  const OptimizerConfig c{0.05, 0.01, 0};
  SgdState<double> fresh, used;
  step({1, 2}, {9, -9}, c, used);
  step({3, 4}, {5, 5}, c, used);
  EXPECT_EQ(step({0.5, -0.5}, {1, 2}, c, fresh), step({0.5, -0.5}, {1, 2}, c, used));
}

TEST(Sgd, InvalidConfig) {
  SgdState<double> s;
  EXPECT_THROW(step({1}, {1}, {0.0, 0, 0}, s), std::invalid_argument);
  EXPECT_THROW(step({1}, {1}, {0.1, -1, 0}, s), std::invalid_argument);
  EXPECT_THROW(step({1}, {1}, {0.1, 0, 1.0}, s), std::invalid_argument);
  EXPECT_THROW(step({1, 2}, {1}, {0.1, 0, 0}, s), ShapeError);
}
