#include <gtest/gtest.h>

#include <cmath>

#include "mambamir/acquisition.hpp"
#include "mambamir/objectives.hpp"
#include "mambamir/ops.hpp"
#include "test_util.hpp"

namespace mambamir {
namespace {

using testing::random_tensor;

TEST(CharbonnierImg, FloorScalarAndGradient) {
  Rng rng(1);
  Tensor x = random_tensor({1, 1, 4, 4}, rng);
  EXPECT_EQ(obj::charbonnier_img(x, x).item(), 1e-9);
  EXPECT_NEAR(obj::charbonnier_img(Tensor::scalar(0.0), Tensor::scalar(3.0)).item(), 3.0, 1e-15);
  Tensor p = random_tensor({1, 1, 3, 3}, rng, -1, 1, true);
  Tensor near = p.detach();
  near.mutable_data()[0] += 1e-3;
  EXPECT_LT(testing::gradient_error([&] { return obj::charbonnier_img(p, near, 1e-3); }, {p}, 1e-7), 1e-6);
  auto g = testing::analytic_grads([&] { return obj::charbonnier_img(p, p.detach()); }, {p});
  for (double v : g[0]) EXPECT_TRUE(std::isfinite(v));
}

TEST(CharbonnierFreq, FloorAndParseval) {
  Rng rng(2);
  Tensor a = random_tensor({2, 1, 8, 8}, rng), b = random_tensor({2, 1, 8, 8}, rng);
  EXPECT_EQ(obj::charbonnier_freq(a, a).item(), 1e-9);
  const double img = obj::charbonnier_img(a, b, 0.0).item();
  const double freq = obj::charbonnier_freq(a, b, 0.0).item();
  EXPECT_LT(std::abs(img - freq) / img, 1e-8);
  Tensor ca = random_tensor({1, 2, 6, 6}, rng), cb = random_tensor({1, 2, 6, 6}, rng);
  EXPECT_LT(std::abs(obj::charbonnier_img(ca, cb, 0).item() - obj::charbonnier_freq(ca, cb, 0).item()), 1e-12);
  EXPECT_THROW(obj::charbonnier_freq(random_tensor({1, 3, 4, 4}, rng), random_tensor({1, 3, 4, 4}, rng)),
               DimensionError);
}

TEST(CharbonnierFreq, DcShiftConcentratesInDcBin) {
  Rng rng(3);
  Tensor x = random_tensor({1, 1, 8, 8}, rng);
  Tensor shifted = ops::add_scalar(x, 0.25);
  Tensor spec = acq::dft2(acq::to_complex(ops::sub(shifted, x)));
  double dc = std::hypot(spec.data()[0], spec.data()[64]);
  double rest = 0;
  for (std::size_t i = 1; i < 64; ++i) rest += std::hypot(spec.data()[i], spec.data()[64 + i]);
  EXPECT_NEAR(dc, 0.25 * 8, 1e-12);
  EXPECT_LT(rest, 1e-12);
  EXPECT_NEAR(obj::charbonnier_freq(shifted, x, 0.0).item(), dc, 1e-12);
}

TEST(Perceptual, ZeroSymmetricAndMonotone) {
  obj::FeatureExtractor fx(1);
  Rng rng(4);
  Tensor a = random_tensor({1, 1, 16, 16}, rng, 0, 1), b = random_tensor({1, 1, 16, 16}, rng, 0, 1);
  EXPECT_EQ(obj::perceptual_proxy(a, a, fx).item(), 0.0);
  EXPECT_NEAR(obj::perceptual_proxy(a, b, fx).item(), obj::perceptual_proxy(b, a, fx).item(), 1e-15);
  std::vector<double> means;
  for (double sigma : {0.01, 0.05, 0.1}) {
    double total = 0;
    for (std::uint64_t s = 0; s < 32; ++s) {
      Rng noise(s);
      Tensor n(a.shape());
      for (double& v : n.mutable_data()) v = sigma * noise.normal();
      total += obj::perceptual_proxy(ops::add(a, n), a, fx).item();
    }
    means.push_back(total / 32);
  }
  EXPECT_LT(means[0], means[1]);
  EXPECT_LT(means[1], means[2]);
}

TEST(TotalLoss, WeightsAndDefaults) {
  obj::LossWeights d;
  EXPECT_EQ(d.alpha, 15.0);
  EXPECT_EQ(d.beta, 0.1);
  EXPECT_EQ(d.gamma, 0.0025);
  EXPECT_EQ(d.epsilon, 1e-9);
  Rng rng(5);
  Tensor p = random_tensor({1, 1, 12, 12}, rng), t = random_tensor({1, 1, 12, 12}, rng);
  obj::FeatureExtractor fx(1);
  obj::LossWeights only{1, 0, 0, 0, 1e-9};
  EXPECT_NEAR(obj::total_loss(p, t, only, &fx).total.item(), obj::charbonnier_img(p, t).item(), 1e-15);
  auto base = obj::total_loss(p, t, d, &fx);
  obj::LossWeights twice = d;
  twice.beta *= 2;
  auto doubled = obj::total_loss(p, t, twice, &fx);
  EXPECT_NEAR(doubled.total.item() - base.total.item(), d.beta * base.freq, 1e-12);
  EXPECT_THROW(obj::total_loss(p, t, d, nullptr), ContractError);
}

TEST(Psnr, AnalyticCases) {
  Tensor a = Tensor::zeros({4, 4}), b = Tensor::ones({4, 4});
  EXPECT_NEAR(obj::psnr(a, b, 1.0), 0.0, 1e-12);
  EXPECT_EQ(obj::psnr(a, a, 1.0), obj::kPsnrCap);
  Tensor c({2}, {0.0, 0.1});
  EXPECT_NEAR(obj::psnr(c, Tensor::zeros({2}), 1.0), 10 * std::log10(1.0 / 0.005), 1e-12);
  EXPECT_THROW(obj::psnr(a, b, 0.0), ConfigError);
}

TEST(Ssim, IdentityAndOrdering) {
  Rng rng(6);
  Tensor x = random_tensor({16, 16}, rng, 0, 1);
  EXPECT_NEAR(obj::ssim(x, x, 1.0), 1.0, 1e-12);
  EXPECT_LT(obj::ssim(x, ops::scale(x, -1.0), 1.0), obj::ssim(x, ops::add_scalar(x, 0.01), 1.0));
  EXPECT_THROW(obj::ssim(Tensor::zeros({8, 8}), Tensor::zeros({8, 8})), DimensionError);
}

TEST(Ssim, MatchesDirectWindowComputation) {
  // Single 11×11 window: SSIM equals the closed form with Gaussian-weighted moments.
  Rng rng(7);
  Tensor x = random_tensor({11, 11}, rng, 0, 1), y = random_tensor({11, 11}, rng, 0, 1);
  double wsum = 0, w[11][11];
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) wsum += w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5);
  double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      const double wi = w[i][j] / wsum, a = x.data()[i * 11 + j], b = y.data()[i * 11 + j];
      mx += wi * a;
      my += wi * b;
      sxx += wi * a * a;
      syy += wi * b * b;
      sxy += wi * a * b;
    }
  sxx -= mx * mx;
  syy -= my * my;
  sxy -= mx * my;
  const double c1 = 1e-4, c2 = 9e-4;
  const double expect = (2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
  EXPECT_NEAR(obj::ssim(x, y, 1.0), expect, 1e-12);
}

}  // namespace
}  // namespace mambamir
