// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "physformer/tdc.hpp"

using namespace physformer;

namespace {

Conv3dParams same3(const Tensor& w) {
  Conv3dParams p;
  p.weight = Var(w);
  p.padding = same_padding(w.shape());
  return p;
}

}  // namespace

TEST_CASE("conv3d: all-ones 3x3x3 centre voxel is 27") {
  const Var y = conv3d(Var(Tensor({1, 1, 3, 3, 3}, 1.0)), same3(Tensor({1, 1, 3, 3, 3}, 1.0)));
  CHECK(y.value().at({0, 0, 1, 1, 1}) == 27.0);
  CHECK(y.value().at({0, 0, 0, 0, 0}) == 8.0);
}

TEST_CASE("conv3d: identity kernel returns the input") {
  std::mt19937_64 rng(1);
  const Tensor x = Tensor::randn({2, 1, 4, 5, 3}, rng);
  Tensor w({1, 1, 3, 3, 3}, 0.0);
  w[13] = 1.0;
  const Var y = conv3d(Var(x), same3(w));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.value()[i] == x[i]);
}

TEST_CASE("conv3d matches the seven-loop oracle") {
  std::mt19937_64 rng(2);
  const Tensor x = Tensor::randn({1, 2, 5, 5, 5}, rng), w = Tensor::randn({3, 2, 3, 3, 3}, rng);
  const Tensor ref = oracle::conv3d_loops(x, w, 1);
  const Var y = conv3d(Var(x), same3(w));
  REQUIRE(y.shape() == ref.shape());
  for (std::size_t i = 0; i < ref.numel(); ++i) CHECK(std::abs(y.value()[i] - ref[i]) <= 1e-12);
}

TEST_CASE("conv3d output extents follow floor((n + 2p - k) / s) + 1") {
  Conv3dParams p;
  p.weight = Var(Tensor({4, 2, 3, 1, 5}, 0.1));
  p.stride = {2, 1, 3};
  p.padding = {1, 0, 2};
  const Var y = conv3d(Var(Tensor({1, 2, 9, 4, 11})), p);
  CHECK(y.shape() == Shape{1, 4, (9 + 2 - 3) / 2 + 1, 4, (11 + 4 - 5) / 3 + 1});
}

TEST_CASE("conv3d rejects channel mismatch and empty outputs") {
  CHECK_THROWS_AS(conv3d(Var(Tensor({1, 3, 4, 4, 4})), same3(Tensor({2, 2, 3, 3, 3}))), std::invalid_argument);
  Conv3dParams p;
  p.weight = Var(Tensor({1, 1, 5, 1, 1}));
  CHECK_THROWS_AS(conv3d(Var(Tensor({1, 1, 3, 4, 4})), p), std::invalid_argument);
}

TEST_CASE("depthwise conv3d applies each channel's kernel to that channel") {
  std::mt19937_64 rng(3);
  const Tensor x = Tensor::randn({1, 3, 4, 4, 4}, rng), w = Tensor::randn({3, 1, 3, 3, 3}, rng);
  Conv3dParams p = same3(w);
  p.depthwise = true;
  const Var y = conv3d(Var(x), p);
  for (std::size_t c = 0; c < 3; ++c) {
    const Tensor xc({1, 1, 4, 4, 4}, std::vector<double>(x.ptr() + c * 64, x.ptr() + (c + 1) * 64));
    const Tensor wc({1, 1, 3, 3, 3}, std::vector<double>(w.ptr() + c * 27, w.ptr() + (c + 1) * 27));
    const Tensor ref = oracle::conv3d_loops(xc, wc, 1);
    for (std::size_t i = 0; i < 64; ++i) CHECK(std::abs(y.value()[c * 64 + i] - ref[i]) <= 1e-12);
  }
}

TEST_CASE("tdc with theta 0 equals conv3d bitwise") {
  std::mt19937_64 rng(4);
  const Tensor x = Tensor::randn({2, 3, 5, 4, 6}, rng), w = Tensor::randn({2, 3, 3, 3, 3}, rng);
  Conv3dParams c = same3(w);
  c.bias = Var(Tensor::randn({2}, rng));
  const Var a = tdc(Var(x), TdcParams{c, 0.0});
  const Var b = conv3d(Var(x), c);
  for (std::size_t i = 0; i < a.value().numel(); ++i) CHECK(a.value()[i] == b.value()[i]);
}

TEST_CASE("tdc constant input, unit weights, theta 0.7: interior is 14.4") {
  const Var y = tdc(Var(Tensor({1, 1, 5, 5, 5}, 1.0)), TdcParams{same3(Tensor({1, 1, 3, 3, 3}, 1.0)), 0.7});
  CHECK(y.value().at({0, 0, 2, 2, 2}) == doctest::Approx(27.0 - 0.7 * 18.0).epsilon(1e-15));
  CHECK(27.0 - 0.7 * 18.0 == doctest::Approx(14.4));
}

TEST_CASE("tdc constant input, equal weights: response scales by 1 - theta * 18/27") {
  const double theta = 0.35, wv = 0.3;
  const Tensor x({1, 1, 5, 5, 5}, 2.0);
  const Conv3dParams c = same3(Tensor({1, 1, 3, 3, 3}, wv));
  const double vanilla = conv3d(Var(x), c).value().at({0, 0, 2, 2, 2});
  const double td = tdc(Var(x), TdcParams{c, theta}).value().at({0, 0, 2, 2, 2});
  CHECK(td == doctest::Approx((1.0 - theta * 18.0 / 27.0) * vanilla).epsilon(1e-14));
}

TEST_CASE("tdc theta 1 matches the loop oracle") {
  std::mt19937_64 rng(5);
  const Tensor x = Tensor::randn({1, 2, 5, 4, 4}, rng), w = Tensor::randn({2, 2, 3, 3, 3}, rng);
  const Tensor ref = oracle::conv3d_loops(x, w, 1, 1.0);
  const Var y = tdc(Var(x), TdcParams{same3(w), 1.0});
  for (std::size_t i = 0; i < ref.numel(); ++i) CHECK(std::abs(y.value()[i] - ref[i]) <= 1e-12);
}

TEST_CASE("tdc is linear in its input") {
  std::mt19937_64 rng(6);
  const Tensor x = Tensor::randn({1, 2, 4, 4, 4}, rng), z = Tensor::randn({1, 2, 4, 4, 4}, rng);
  const TdcParams p{same3(Tensor::randn({3, 2, 3, 3, 3}, rng)), 0.7};
  const double a = 1.7, b = -0.4;
  Tensor mix = x;
  for (std::size_t i = 0; i < mix.numel(); ++i) mix[i] = a * x[i] + b * z[i];
  const Tensor lhs = tdc(Var(mix), p).value();
  const Tensor tx = tdc(Var(x), p).value(), tz = tdc(Var(z), p).value();
  for (std::size_t i = 0; i < lhs.numel(); ++i) CHECK(std::abs(lhs[i] - (a * tx[i] + b * tz[i])) <= 1e-10);
}

TEST_CASE("tdc validates theta and kernel size") {
  const Tensor x({1, 1, 4, 4, 4});
  CHECK_THROWS_AS(tdc(Var(x), TdcParams{same3(Tensor({1, 1, 3, 3, 3})), 1.5}), std::invalid_argument);
  CHECK_THROWS_AS(tdc(Var(x), TdcParams{same3(Tensor({1, 1, 1, 3, 3})), 0.7}), std::invalid_argument);
}

TEST_CASE("max_pool_spatial on a ramp takes each cell's maximum") {
  Tensor x({1, 1, 2, 4, 4});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<double>(i);
  const Tensor y = max_pool_spatial(Var(x)).value();
  REQUIRE(y.shape() == Shape{1, 1, 2, 2, 2});
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) CHECK(y.at({0, 0, t, i, j}) == x.at({0, 0, t, 2 * i + 1, 2 * j + 1}));
}

TEST_CASE("max_pool_spatial: constant stays constant, random matches a loop oracle") {
  const Tensor c = max_pool_spatial(Var(Tensor({1, 2, 2, 4, 6}, -0.25))).value();
  for (double v : c.data()) CHECK(v == -0.25);

  std::mt19937_64 rng(7);
  const Tensor x = Tensor::randn({1, 3, 4, 8, 8}, rng);
  const Tensor y = max_pool_spatial(Var(x)).value();
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
          double m = -INFINITY;
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b) m = std::max(m, x.at({0, ch, t, 2 * i + a, 2 * j + b}));
          CHECK(y.at({0, ch, t, i, j}) == m);
        }
  CHECK_THROWS_AS(max_pool_spatial(Var(Tensor({1, 1, 2, 3, 4}))), std::invalid_argument);
}

TEST_CASE("upsample_temporal extents and identity behaviour") {
  std::mt19937_64 rng(8);
  const Tensor x = Tensor::randn({1, 2, 5, 2, 2}, rng);
  Tensor w({2, 2, 3, 1, 1}, 0.0);
  w.at({0, 0, 1, 0, 0}) = 1.0;
  w.at({1, 1, 1, 0, 0}) = 1.0;
  Conv3dParams id = same3(w);
  const Tensor y1 = upsample_temporal(Var(x), 1, id).value();
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y1[i] == x[i]);

  const Var y4 = upsample_temporal(Var(Tensor({1, 2, 40, 1, 1})), 4, id);
  CHECK(y4.shape()[2] == 160);
  CHECK_THROWS_AS(upsample_temporal(Var(x), 0, id), std::invalid_argument);
}

TEST_CASE("upsample_temporal: constant input through an averaging kernel stays constant") {
  Conv3dParams avg = same3(Tensor({1, 1, 3, 1, 1}, 1.0 / 3.0));
  const Tensor y = upsample_temporal(Var(Tensor({1, 1, 6, 2, 2}, 1.25)), 2, avg).value();
  // Frames away from the zero-padded ends.
  for (std::size_t t = 1; t + 1 < 12; ++t) CHECK(y.at({0, 0, t, 1, 0}) == doctest::Approx(1.25).epsilon(1e-15));
}

TEST_CASE("avg_pool3d with a unit window is the identity") {
  std::mt19937_64 rng(9);
  const Tensor x = Tensor::randn({1, 2, 3, 4, 5}, rng);
  const Tensor y = avg_pool3d(Var(x), {1, 1, 1}).value();
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  CHECK_THROWS_AS(avg_pool3d(Var(x), {4, 1, 1}), std::invalid_argument);
}
