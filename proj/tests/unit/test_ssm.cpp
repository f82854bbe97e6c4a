#include <gtest/gtest.h>

#include <cmath>

#include "mambamir/ops.hpp"
#include "mambamir/ssm.hpp"
#include "test_util.hpp"

namespace mambamir {
namespace {

using ssm::Discretization;
using testing::max_abs;
using testing::max_abs_diff;
using testing::random_tensor;

// Scalar reference recurrence, one (sequence, channel, state) lane at a time.
Tensor reference_scan(const ssm::ScanTerms& t, Discretization mode) {
  const std::size_t g = t.u.dim(0), l = t.u.dim(1), c = t.u.dim(2), n = t.a.dim(1);
  Tensor y({g, l, c});
  auto out = y.mutable_data();
  for (std::size_t gi = 0; gi < g; ++gi)
    for (std::size_t ci = 0; ci < c; ++ci) {
      std::vector<double> h(n, 0.0);
      for (std::size_t k = 0; k < l; ++k) {
        const std::size_t uc = (gi * l + k) * c + ci, bn = (gi * l + k) * n;
        const double dt = t.delta.data()[uc], u = t.u.data()[uc];
        double acc = 0.0;
        for (std::size_t ni = 0; ni < n; ++ni) {
          const double a = t.a.data()[ci * n + ni];
          const double coef = mode == Discretization::first_order ? dt : std::expm1(dt * a) / a;
          h[ni] = std::exp(dt * a) * h[ni] + coef * t.b.data()[bn + ni] * u;
          acc += t.c.data()[bn + ni] * h[ni];
        }
        out[uc] = acc + t.d.data()[ci] * u;
      }
    }
  return y;
}

ssm::ScanTerms random_terms(std::size_t g, std::size_t l, std::size_t c, std::size_t n, Rng& rng,
                            bool grad = false) {
  ssm::ScanTerms t;
  t.u = random_tensor({g, l, c}, rng, -1, 1, grad);
  t.delta = random_tensor({g, l, c}, rng, 0.01, 0.5, grad);
  t.a = random_tensor({c, n}, rng, -2.0, -0.1, grad);
  t.b = random_tensor({g, l, n}, rng, -1, 1, grad);
  t.c = random_tensor({g, l, n}, rng, -1, 1, grad);
  t.d = random_tensor({c}, rng, -1, 1, grad);
  return t;
}

TEST(Discretize, ZeroMatrixAndZeroStep) {
  std::vector<double> a{0.0, 0.0}, b{1.5, -2.0}, dt{0.7};
  auto r = ssm::discretize(a, b, dt, 1, 2);
  EXPECT_EQ(r.a_bar[0], 1.0);
  EXPECT_EQ(r.a_bar[1], 1.0);
  std::vector<double> a2{-3.0, -1.0}, zero{0.0};
  for (auto mode : {Discretization::first_order, Discretization::zoh}) {
    auto z = ssm::discretize(a2, b, zero, 1, 2, mode);
    EXPECT_EQ(z.a_bar[0], 1.0);
    EXPECT_EQ(z.b_bar[0], 0.0);
    EXPECT_EQ(z.b_bar[1], 0.0);
  }
}

TEST(Discretize, HalvingStep) {
  std::vector<double> a{-1.0}, b{1.0}, dt{std::log(2.0)};
  EXPECT_NEAR(ssm::discretize(a, b, dt, 1, 1).a_bar[0], 0.5, 1e-15);
  // Exact integral (e^{ΔA} − 1)/A · B = 0.5.
  EXPECT_NEAR(ssm::discretize(a, b, dt, 1, 1, Discretization::zoh).b_bar[0], 0.5, 1e-15);
}

TEST(Discretize, RejectsNegativeOrNanStep) {
  std::vector<double> a{-1.0}, b{1.0}, neg{-0.1}, nan{std::nan("")};
  EXPECT_THROW(ssm::discretize(a, b, neg, 1, 1), ContractError);
  EXPECT_THROW(ssm::discretize(a, b, nan, 1, 1), ContractError);
}

TEST(SelectiveScan, SingleStepExpansion) {
  Rng rng(1);
  auto t = random_terms(1, 1, 2, 3, rng);
  Tensor y = ssm::selective_scan(t);
  for (std::size_t c = 0; c < 2; ++c) {
    const double u = t.u.data()[c], dt = t.delta.data()[c];
    double expect = t.d.data()[c] * u;
    for (std::size_t n = 0; n < 3; ++n) expect += t.c.data()[n] * dt * t.b.data()[n] * u;
    EXPECT_NEAR(y.data()[c], expect, 1e-15);
  }
}

TEST(SelectiveScan, ZeroInputAndZeroReadout) {
  Rng rng(2);
  auto t = random_terms(2, 9, 3, 4, rng);
  auto z = t;
  z.u = Tensor::zeros(t.u.shape());
  EXPECT_EQ(max_abs(ssm::selective_scan(z)), 0.0);
  auto cd = t;
  cd.c = Tensor::zeros(t.c.shape());
  cd.d = Tensor::zeros(t.d.shape());
  EXPECT_EQ(max_abs(ssm::selective_scan(cd)), 0.0);
}

TEST(SelectiveScan, MatchesScalarReference) {
  Rng rng(3);
  for (auto mode : {Discretization::first_order, Discretization::zoh}) {
    auto t = random_terms(3, 16, 4, 5, rng);
    Tensor ref = reference_scan(t, mode);
    EXPECT_LT(max_abs_diff(ssm::selective_scan(t, mode), ref), 1e-12 * std::max(1.0, max_abs(ref)));
  }
}

TEST(SelectiveScan, ChunkedMatchesSequentialForEveryPartition) {
  Rng rng(4);
  auto t = random_terms(2, 1024, 3, 4, rng);
  Tensor seq = ssm::selective_scan(t);
  for (std::size_t p : {1, 2, 4, 8}) {
    Tensor par = ssm::selective_scan_chunked(t, p);
    EXPECT_LT(max_abs_diff(par, seq) / max_abs(seq), 1e-10) << "chunks=" << p;
  }
  auto one = random_terms(1, 1, 2, 2, rng);
  EXPECT_LT(max_abs_diff(ssm::selective_scan_chunked(one, 4), ssm::selective_scan(one)), 1e-15);
}

TEST(SelectiveScan, CausalUnderPerturbation) {
  Rng rng(5);
  ssm::SSMParams p = ssm::SSMParams::init(3, 4, rng);
  Tensor x = random_tensor({20, 3}, rng);
  Tensor y0 = ssm::selective_scan_seq(x, p);
  Tensor xp = x.detach();
  xp.mutable_data()[12 * 3] += 1.0;
  Tensor y1 = ssm::selective_scan_seq(xp, p);
  for (std::size_t i = 0; i < 12 * 3; ++i) EXPECT_EQ(y0.data()[i], y1.data()[i]);
  EXPECT_NE(y0.data()[12 * 3], y1.data()[12 * 3]);
}

TEST(SelectiveScan, NanInputNamesTheStep) {
  Rng rng(6);
  auto t = random_terms(1, 6, 2, 2, rng);
  t.u.mutable_data()[4 * 2 + 1] = std::nan("");
  try {
    ssm::selective_scan(t);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 4"), std::string::npos);
  }
}

TEST(SelectiveScan, GradientEveryTerm) {
  Rng rng(7);
  for (auto mode : {Discretization::first_order, Discretization::zoh}) {
    auto t = random_terms(2, 5, 2, 3, rng, true);
    Tensor r = random_tensor({2, 5, 2}, rng);
    auto loss = [&] { return ops::sum(ops::mul(ssm::selective_scan(t, mode), r)); };
    EXPECT_LT(testing::gradient_error(loss, {t.u, t.delta, t.a, t.b, t.c, t.d}), 1e-6);
  }
}

TEST(SelectiveScan, ParameterGradientThroughRealize) {
  Rng rng(8);
  ssm::SSMParams p = ssm::SSMParams::init(3, 4, rng);
  Tensor x = random_tensor({2, 7, 3}, rng, -1, 1, true);
  Tensor r = random_tensor({2, 7, 3}, rng);
  auto loss = [&] { return ops::sum(ops::mul(ssm::selective_scan_seq(x, p), r)); };
  EXPECT_LT(testing::gradient_error(loss, {x, p.a_log, p.d, p.w_b, p.w_c, p.w_delta, p.b_delta}), 1e-6);
}

TEST(SSMParams, InitRanges) {
  Rng rng(9);
  ssm::SSMParams p = ssm::SSMParams::init(4, 5, rng);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t n = 0; n < 5; ++n) EXPECT_NEAR(-std::exp(p.a_log.at({c, n})), -(double(n) + 1), 1e-12);
  for (double b : p.b_delta.data()) {
    const double dt = std::log1p(std::exp(b));
    EXPECT_GE(dt, 1e-3 - 1e-12);
    EXPECT_LE(dt, 1e-1 + 1e-12);
  }
}

}  // namespace
}  // namespace mambamir
