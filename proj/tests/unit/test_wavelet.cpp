#include <gtest/gtest.h>

#include <cmath>

#include "mambamir/ops.hpp"
#include "mambamir/wavelet.hpp"
#include "test_util.hpp"

namespace mambamir {
namespace {

using testing::max_abs;
using testing::max_abs_diff;
using testing::random_tensor;

double energy(const Tensor& t) {
  double e = 0;
  for (double v : t.data()) e += v * v;
  return e;
}

// Separable oracle: 1D orthonormal Haar along W, then along H.
// Filters: low (1, 1)/√2, high (1, −1)/√2.
std::array<std::vector<double>, 4> separable_haar(const Tensor& x) {
  const std::size_t h = x.dim(2), w = x.dim(3);
  const double r = 1.0 / std::sqrt(2.0);
  std::vector<double> lo(h * w / 2), hi(h * w / 2);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w / 2; ++j) {
      const double a = x.data()[i * w + 2 * j], b = x.data()[i * w + 2 * j + 1];
      lo[i * (w / 2) + j] = r * (a + b);
      hi[i * (w / 2) + j] = r * (a - b);
    }
  std::array<std::vector<double>, 4> out;
  for (auto& o : out) o.resize(h * w / 4);
  for (std::size_t i = 0; i < h / 2; ++i)
    for (std::size_t j = 0; j < w / 2; ++j) {
      const std::size_t t = 2 * i * (w / 2) + j, u = t + w / 2, o = i * (w / 2) + j;
      out[0][o] = r * (lo[t] + lo[u]);  // LL
      out[1][o] = r * (hi[t] + hi[u]);  // HL: high along W
      out[2][o] = r * (lo[t] - lo[u]);  // LH: high along H
      out[3][o] = r * (hi[t] - hi[u]);  // HH
    }
  return out;
}

TEST(Dwt2, MatchesSeparableOracle) {
  Rng rng(1);
  Tensor x = random_tensor({1, 1, 8, 6}, rng);
  auto s = wavelet::dwt2(x);
  auto ref = separable_haar(x);
  const Tensor* bands[] = {&s.ll, &s.hl, &s.lh, &s.hh};
  for (int b = 0; b < 4; ++b)
    for (std::size_t i = 0; i < ref[b].size(); ++i) EXPECT_NEAR(bands[b]->data()[i], ref[b][i], 1e-15);
}

TEST(Dwt2, ConstantImage) {
  auto s = wavelet::dwt2(Tensor({1, 1, 4, 4}, 3.0));
  for (double v : s.ll.data()) EXPECT_NEAR(v, 6.0, 1e-15);
  EXPECT_EQ(max_abs(s.hl) + max_abs(s.lh) + max_abs(s.hh), 0.0);
}

TEST(Dwt2, CheckerboardEnergyInDiagonalBand) {
  auto s = wavelet::dwt2(Tensor({1, 1, 2, 2}, {1, -1, -1, 1}));
  EXPECT_EQ(max_abs(s.ll) + max_abs(s.hl) + max_abs(s.lh), 0.0);
  EXPECT_NEAR(energy(s.hh), 4.0, 1e-15);
}

TEST(Dwt2, RoundTripAndEnergyAllEvenSizes) {
  Rng rng(2);
  for (std::size_t n = 2; n <= 128; n += 2) {
    Tensor x = random_tensor({1, 1, n, n}, rng);
    auto s = wavelet::dwt2(x);
    EXPECT_LT(max_abs_diff(wavelet::idwt2(s), x), 1e-10) << n;
    const double e = energy(s.ll) + energy(s.hl) + energy(s.lh) + energy(s.hh);
    EXPECT_LT(std::abs(e - energy(x)) / energy(x), 1e-10) << n;
  }
}

TEST(Dwt2, OddExtentsArePaddedAndCropped) {
  Rng rng(3);
  Tensor x = random_tensor({2, 3, 9, 7}, rng);
  auto s = wavelet::dwt2(x);
  EXPECT_EQ(s.ll.shape(), (Shape{2, 3, 5, 4}));
  EXPECT_LT(max_abs_diff(wavelet::idwt2(s), x), 1e-12);
}

TEST(Dwt2, Gradients) {
  Rng rng(4);
  Tensor x = random_tensor({1, 2, 5, 6}, rng, -1, 1, true);
  Tensor r = random_tensor({1, 2, 5, 6}, rng);
  auto loss = [&] {
    auto s = wavelet::dwt2(x);
    s.hh = ops::square(s.hh);
    return ops::sum(ops::mul(wavelet::idwt2(s), r));
  };
  EXPECT_LT(testing::gradient_error(loss, {x}), 1e-6);
}

wavelet::WDownParams identity_wdown(std::size_t c) {
  wavelet::WDownParams p;
  p.conv_in = ConvParams::identity(c);
  p.conv_skip = ConvParams::identity(c);
  p.conv_out = ConvParams::identity(c);
  return p;
}

wavelet::WUpParams identity_wup(std::size_t c) {
  wavelet::WUpParams p;
  p.conv_in = ConvParams::identity(c);
  p.conv_skip = ConvParams::identity(c);
  p.conv_out = ConvParams::identity(c);
  return p;
}

TEST(WDown, IdentityConvsGiveTwiceLowBand) {
  Rng rng(5);
  Tensor x = random_tensor({1, 3, 8, 8}, rng);
  auto r = wavelet::wdown(x, identity_wdown(3));
  auto s = wavelet::dwt2(x);
  EXPECT_EQ(r.out.shape(), (Shape{1, 3, 4, 4}));
  EXPECT_LT(max_abs_diff(r.out, ops::scale(s.ll, 2.0)), 1e-14);
  EXPECT_EQ(max_abs_diff(r.high.hl, s.hl), 0.0);
  EXPECT_EQ(max_abs_diff(r.high.lh, s.lh), 0.0);
  EXPECT_EQ(max_abs_diff(r.high.hh, s.hh), 0.0);
}

TEST(WDown, ZeroInputZeroBiasGivesZero) {
  Rng rng(6);
  auto p = wavelet::WDownParams::init(4, 8, rng);
  for (auto* c : {&p.conv_in, &p.conv_skip, &p.conv_out}) c->bias = Tensor::zeros(c->bias.shape());
  auto r = wavelet::wdown(Tensor::zeros({1, 4, 8, 8}), p);
  EXPECT_EQ(r.out.shape(), (Shape{1, 8, 4, 4}));
  EXPECT_EQ(max_abs(r.out) + max_abs(r.high.hh), 0.0);
}

TEST(WUp, ShapeAndZeroCase) {
  Rng rng(7);
  auto p = wavelet::WUpParams::init(8, 4, rng);
  for (auto* c : {&p.conv_in, &p.conv_skip, &p.conv_out}) c->bias = Tensor::zeros(c->bias.shape());
  wavelet::HighFreq zero{Tensor::zeros({1, 4, 4, 4}), Tensor::zeros({1, 4, 4, 4}), Tensor::zeros({1, 4, 4, 4})};
  Tensor y = wavelet::wup(Tensor::zeros({1, 8, 4, 4}), zero, p, 8, 8);
  EXPECT_EQ(y.shape(), (Shape{1, 4, 8, 8}));
  EXPECT_EQ(max_abs(y), 0.0);
  EXPECT_THROW(wavelet::wup(Tensor::zeros({1, 8, 4, 4}), std::nullopt, p, 8, 8), ContractError);
}

TEST(WUp, IdentityReductionReconstructsTwiceTheInput) {
  // Identity convs: both paths return iDWT(LL, H+) = x, so wup(LL, H+) = 2x.
  Rng rng(8);
  Tensor x = random_tensor({1, 3, 8, 6}, rng);
  auto down = wavelet::wdown(x, identity_wdown(3));
  Tensor ll = ops::scale(down.out, 0.5);
  Tensor y = wavelet::wup(ll, down.high, identity_wup(3), down.height, down.width);
  EXPECT_LT(max_abs_diff(y, ops::scale(x, 2.0)), 1e-13);
}

TEST(Decompose, HalvesAndFusesFourBands) {
  Rng rng(9);
  auto p = wavelet::DecomposeParams::init(3, 5, rng);
  EXPECT_EQ(p.fuse.weight.dim(1), 12u);
  Tensor y = wavelet::wavelet_decompose(random_tensor({2, 3, 8, 8}, rng), p);
  EXPECT_EQ(y.shape(), (Shape{2, 5, 4, 4}));
  p.fuse.bias = Tensor::zeros(p.fuse.bias.shape());
  EXPECT_EQ(max_abs(wavelet::wavelet_decompose(Tensor::zeros({1, 3, 8, 8}), p)), 0.0);
}

TEST(Wamss, IdentityBlockAndHighPassthrough) {
  Rng rng(10);
  Tensor x = random_tensor({1, 2, 8, 8}, rng);
  Tensor same = wavelet::wamss_forward(x, [](const Tensor& t) { return t; });
  EXPECT_EQ(same.shape(), x.shape());
  EXPECT_LT(max_abs_diff(same, x), 1e-14);
  Tensor no_low = wavelet::wamss_forward(x, [](const Tensor& t) { return Tensor::zeros(t.shape()); });
  auto a = wavelet::dwt2(x), b = wavelet::dwt2(no_low);
  EXPECT_LT(max_abs_diff(a.hh, b.hh), 1e-14);
  EXPECT_LT(max_abs_diff(a.hl, b.hl), 1e-14);
  EXPECT_LT(max_abs(b.ll), 1e-14);
}

}  // namespace
}  // namespace mambamir
