#include <gtest/gtest.h>

#include <array>

#include "mambamir/ops.hpp"
#include "mambamir/scan.hpp"
#include "test_util.hpp"

namespace mambamir {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

std::vector<double> scan_values(const scan::ScanSet& s, std::size_t b, std::size_t dir, std::size_t c) {
  const std::size_t channels = s.scans.dim(2), length = s.scans.dim(3);
  auto data = s.scans.data();
  const std::size_t base = ((b * scan::kDirections + dir) * channels + c) * length;
  return {data.begin() + base, data.begin() + base + length};
}

// A seed whose first mask draw is `index`.
std::uint64_t seed_drawing(std::size_t index) {
  for (std::uint64_t s = 0;; ++s) {
    Rng rng(s);
    if (scan::draw_mask_index(rng) == index) return s;
  }
}

TEST(ScanExpand, TwoByTwoTraversals) {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  auto s = scan::scan_expand(x);
  EXPECT_EQ(scan_values(s, 0, 0, 0), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(scan_values(s, 0, 1, 0), (std::vector<double>{1, 3, 2, 4}));
  EXPECT_EQ(scan_values(s, 0, 2, 0), (std::vector<double>{4, 3, 2, 1}));
  EXPECT_EQ(scan_values(s, 0, 3, 0), (std::vector<double>{4, 2, 3, 1}));
}

TEST(ScanExpand, DegenerateGeometries) {
  auto one = scan::scan_expand(Tensor({1, 1, 1, 1}, {7.0}));
  for (std::size_t d = 0; d < 4; ++d) EXPECT_EQ(scan_values(one, 0, d, 0), std::vector<double>{7.0});
  Rng rng(1);
  auto row = scan::scan_expand(random_tensor({1, 2, 1, 6}, rng));
  EXPECT_EQ(scan_values(row, 0, 0, 1), scan_values(row, 0, 1, 1));
}

TEST(ScanMerge, InversePermutationRecoversEachScan) {
  Rng rng(2);
  Tensor x = random_tensor({1, 1, 3, 5}, rng);
  auto s = scan::scan_expand(x);
  for (std::size_t d = 0; d < 4; ++d) {
    auto seq = scan_values(s, 0, d, 0);
    auto order = scan::traversal(3, 5, d);
    for (std::size_t k = 0; k < seq.size(); ++k) EXPECT_EQ(seq[k], x.data()[order[k]]);
  }
}

TEST(ScanMerge, UnmaskedIsFourTimesMaskedIsThreeTimes) {
  Rng rng(3);
  Tensor x = random_tensor({2, 3, 4, 5}, rng);
  auto s = scan::scan_expand(x);
  EXPECT_EQ(max_abs_diff(scan::scan_merge(s), ops::scale(x, 4.0)), 0.0);
  for (std::size_t m = 0; m < 4; ++m)
    EXPECT_LT(max_abs_diff(scan::scan_merge(scan::asm_mask(s, m)), ops::scale(x, 3.0)), 1e-15);
}

TEST(AsmMask, KnownDrawZeroesOnlyThatScan) {
  Rng rng(4);
  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  auto s = scan::scan_expand(x);
  Rng pick(seed_drawing(2));
  auto m = scan::asm_mask(s, pick);
  ASSERT_EQ(m.masked_index, std::optional<std::size_t>(2));
  std::size_t zeros = 0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t d = 0; d < 4; ++d)
      for (std::size_t c = 0; c < 3; ++c) {
        auto got = scan_values(m, b, d, c);
        auto orig = scan_values(s, b, d, c);
        for (std::size_t k = 0; k < got.size(); ++k) {
          if (d == 2) {
            EXPECT_EQ(got[k], 0.0);
          } else {
            EXPECT_EQ(got[k], orig[k]);
          }
          zeros += got[k] == 0.0;
        }
      }
  EXPECT_EQ(zeros * 4, m.scans.size());
  EXPECT_THROW(scan::asm_mask(m, 0), ContractError);
}

TEST(AsmMask, DrawFrequencies) {
  Rng rng(5);
  std::array<int, 4> hits{};
  for (int i = 0; i < 10000; ++i) ++hits[scan::draw_mask_index(rng)];
  for (int h : hits) {
    EXPECT_GE(h / 10000.0, 0.23);
    EXPECT_LE(h / 10000.0, 0.27);
  }
}

TEST(Ams6, DeterministicModeIsRepeatable) {
  Rng rng(6);
  std::array<ssm::SSMParams, 4> p;
  for (auto& e : p) e = ssm::SSMParams::init(3, 4, rng);
  Tensor x = random_tensor({1, 3, 4, 4}, rng);
  Tensor a = scan::ams6_forward(x, p, scan::Mode::deterministic, nullptr);
  Tensor b = scan::ams6_forward(x, p, scan::Mode::deterministic, nullptr);
  EXPECT_EQ(max_abs_diff(a, b), 0.0);
}

TEST(Ams6, DifferentMasksGiveDifferentOutputs) {
  Rng rng(7);
  std::array<ssm::SSMParams, 4> p;
  for (auto& e : p) e = ssm::SSMParams::init(3, 4, rng);
  Tensor x = random_tensor({1, 3, 4, 4}, rng);
  Rng r0(seed_drawing(0)), r1(seed_drawing(1));
  EXPECT_GT(max_abs_diff(scan::ams6_forward(x, p, scan::Mode::mc, &r0), scan::ams6_forward(x, p, scan::Mode::mc, &r1)),
            1e-6);
  EXPECT_THROW(scan::ams6_forward(x, p, scan::Mode::train, nullptr), ContractError);
}

TEST(Ams6, MaskExpectationEqualsDeterministicForLinearS6) {
  Rng rng(8);
  const std::size_t b = 2, c = 3, h = 4, w = 5, l = h * w, n = 4;
  // Input-independent B, C, Δ: each direction is a fixed linear operator.
  std::array<ssm::ScanTerms, 4> fixed;
  for (auto& t : fixed) {
    t.delta = random_tensor({b * c, l, 1}, rng, 0.05, 0.5);
    t.a = random_tensor({1, n}, rng, -2.0, -0.2);
    t.b = random_tensor({b * c, l, n}, rng);
    t.c = random_tensor({b * c, l, n}, rng);
    t.d = random_tensor({1}, rng);
  }
  auto linear_s6 = [&](const Tensor& seq, std::size_t dir) {
    ssm::ScanTerms t = fixed[dir];
    t.u = ops::reshape(seq, {b * c, l, 1});
    return ops::reshape(ssm::selective_scan(t), {b, c, l});
  };
  Tensor x = random_tensor({b, c, h, w}, rng);
  Tensor det = scan::ams6_forward(x, linear_s6, scan::Mode::deterministic, nullptr);
  Tensor avg = Tensor::zeros(x.shape());
  for (std::size_t m = 0; m < 4; ++m) {
    Rng pick(seed_drawing(m));
    avg = ops::add(avg, scan::ams6_forward(x, linear_s6, scan::Mode::train, &pick));
  }
  avg = ops::scale(avg, 0.25);
  EXPECT_LT(max_abs_diff(avg, det) / testing::max_abs(det), 1e-8);
}

TEST(Ams6, MaskingOffSumsAllBranches) {
  Rng rng(9);
  Tensor x = random_tensor({1, 2, 3, 3}, rng);
  auto identity = [](const Tensor& seq, std::size_t) { return seq; };
  Rng r(1);
  EXPECT_EQ(max_abs_diff(scan::ams6_forward(x, identity, scan::Mode::train, &r, false), ops::scale(x, 4.0)), 0.0);
}

}  // namespace
}  // namespace mambamir
