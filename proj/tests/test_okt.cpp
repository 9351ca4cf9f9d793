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

#include <cstring>
#include <filesystem>

#include "oracles.hpp"

using namespace orepa;

namespace {

std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return std::uint32_t(b[at]) | std::uint32_t(b[at + 1]) << 8 | std::uint32_t(b[at + 2]) << 16 |
         std::uint32_t(b[at + 3]) << 24;
}

}  // namespace

TEST(Okt, ByteLayout) {
  KernelTensor<double> w(1, 1, 1, 1, 1, std::vector<double>{1.5});
  const auto bytes = encode_okt(w);
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "OREPAKT1");
  const std::uint32_t len = le32(bytes, 8);
  const std::string header(bytes.begin() + 12, bytes.begin() + 12 + len);
  EXPECT_EQ(header, R"({"dtype":"f64","groups":1,"layout":"OIHW","shape":[1,1,1,1]})");
  ASSERT_EQ(bytes.size(), 12 + len + 8);
  double v;
  std::memcpy(&v, bytes.data() + 12 + len, 8);
  EXPECT_EQ(v, 1.5);
  // 1.5 = 0x3FF8000000000000, little-endian
  EXPECT_EQ(bytes[12 + len + 7], 0x3F);
  EXPECT_EQ(bytes[12 + len + 6], 0xF8);
}

TEST(Okt, RoundTripBitExact) {
  for (std::size_t g : {1u, 2u}) {
    auto w = oracle::random_kernel<float>(4, 3, 3, 5, g, 17);
    w[0] = -0.0f;
    w[1] = std::numeric_limits<float>::denorm_min();
    const auto back = decode_okt_kernel<float>(encode_okt(w));
    EXPECT_TRUE(back.same_geometry(w));
    EXPECT_EQ(std::memcmp(back.data().data(), w.data().data(), w.size() * sizeof(float)), 0);
  }
  const auto wd = oracle::random_kernel<double>(2, 2, 3, 3, 1, 18);
  const auto bd = decode_okt_kernel<double>(encode_okt(wd));
  EXPECT_EQ(std::memcmp(bd.data().data(), wd.data().data(), wd.size() * sizeof(double)), 0);
}

TEST(Okt, TensorLayouts) {
  const auto x3 = oracle::random_tensor<double>({2, 3, 4}, 1);
  const auto x4 = oracle::random_tensor<float>({2, 2, 3, 4}, 2);
  const auto b3 = encode_okt(x3);
  EXPECT_EQ(decode_okt_header(b3).layout, "CHW");
  EXPECT_EQ(decode_okt_tensor<double>(b3).storage(), x3.storage());
  const auto b4 = encode_okt(x4);
  EXPECT_EQ(decode_okt_header(b4).layout, "BCHW");
  EXPECT_EQ(decode_okt_tensor<float>(b4).storage(), x4.storage());
}

TEST(Okt, RejectsMalformed) {
  const auto good = encode_okt(oracle::random_kernel<double>(2, 2, 1, 1, 1, 3));
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_okt_header(bad_magic), FormatError);
  auto truncated = good;
  truncated.pop_back();
  EXPECT_THROW(decode_okt_kernel<double>(truncated), FormatError);
  EXPECT_THROW(decode_okt_kernel<float>(good), FormatError);
  std::vector<std::uint8_t> tiny(good.begin(), good.begin() + 10);
  EXPECT_THROW(decode_okt_header(tiny), FormatError);
}

TEST(Okt, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "orepa_okt_roundtrip.okt";
  const auto w = oracle::random_kernel<double>(3, 1, 3, 3, 3, 4);
  save_kernel(path, w);
  const auto back = load_kernel<double>(path);
  EXPECT_EQ(back.storage(), w.storage());
  EXPECT_EQ(back.groups(), 3u);
  std::filesystem::remove(path);
}
