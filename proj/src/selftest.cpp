#include "mambamir/selftest.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include <unistd.h>

#include "mambamir/config.hpp"
#include "mambamir/dataset.hpp"
#include "mambamir/io.hpp"
#include "mambamir/ops.hpp"
#include "mambamir/scan.hpp"
#include "mambamir/ssm.hpp"
#include "mambamir/uncertainty.hpp"
#include "mambamir/wavelet.hpp"

namespace mambamir {

namespace fs = std::filesystem;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool grad = false) {
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.uniform(-1.0, 1.0);
  t.set_requires_grad(grad);
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

std::string fail(const char* fmt, double value) {
  char buf[160];
  std::snprintf(buf, sizeof buf, fmt, value);
  return buf;
}

std::string wavelet_round_trip() {
  Rng rng(11);
  for (std::size_t n = 2; n <= 32; n += 2) {
    Tensor x = random_tensor({1, 2, n, n}, rng);
    const double err = max_abs_diff(wavelet::idwt2(wavelet::dwt2(x)), x);
    if (err >= 1e-10) return fail("round-trip error %.3g", err);
  }
  Tensor odd = random_tensor({1, 1, 7, 5}, rng);
  if (wavelet::idwt2(wavelet::dwt2(odd)).shape() != odd.shape()) return "odd extents not cropped back";
  return {};
}

std::string scan_equivalence() {
  Rng rng(12);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t len = 1 + rng.below(40), c = 1 + rng.below(4), n = 1 + rng.below(6);
    ssm::SSMParams p = ssm::SSMParams::init(c, n, rng);
    Tensor x = random_tensor({2, len, c}, rng);
    Tensor seq = ssm::selective_scan_seq(x, p);
    Tensor par = ssm::selective_scan_par(x, p, 1 + rng.below(5));
    const double rel = max_abs_diff(seq, par) / std::max(max_abs(seq), 1e-300);
    if (rel >= 1e-10) return fail("par/seq relative error %.3g", rel);
  }
  return {};
}

std::string scan_causality() {
  Rng rng(13);
  const std::size_t len = 24, c = 3;
  ssm::SSMParams p = ssm::SSMParams::init(c, 4, rng);
  Tensor x = random_tensor({len, c}, rng);
  Tensor y0 = ssm::selective_scan_seq(x, p);
  const std::size_t k = 10;
  Tensor xp = x.detach();
  xp.mutable_data()[k * c + 1] += 0.5;
  Tensor y1 = ssm::selective_scan_seq(xp, p);
  for (std::size_t i = 0; i < k * c; ++i)
    if (y0.data()[i] != y1.data()[i]) return "output before the perturbed step changed";
  double later = 0.0;
  for (std::size_t i = k * c; i < len * c; ++i) later += std::abs(y0.data()[i] - y1.data()[i]);
  if (later == 0.0) return "perturbation did not propagate forward";
  return {};
}

std::string cross_scan_algebra() {
  Rng rng(14);
  Tensor x = random_tensor({2, 3, 4, 5}, rng);
  scan::ScanSet s = scan::scan_expand(x);
  if (max_abs_diff(scan::scan_merge(s), ops::scale(x, 4.0)) != 0.0) return "unmasked merge != 4x";
  for (std::size_t m = 0; m < scan::kDirections; ++m) {
    if (max_abs_diff(scan::scan_merge(scan::asm_mask(s, m)), ops::scale(x, 3.0)) > 1e-15) {
      return "masked merge != 3x";
    }
  }
  auto identity = [](const Tensor& seq, std::size_t) { return seq; };
  Tensor det = scan::ams6_forward(x, identity, scan::Mode::deterministic, nullptr);
  if (max_abs_diff(det, ops::scale(x, 3.0)) > 1e-15) return "deterministic rescaling != 3x";
  return {};
}

std::string asm_frequency() {
  Rng rng(15);
  std::array<int, scan::kDirections> hits{};
  const int draws = 8000;
  for (int i = 0; i < draws; ++i) ++hits[scan::draw_mask_index(rng)];
  for (int h : hits) {
    const double f = static_cast<double>(h) / draws;
    if (std::abs(f - 0.25) > 0.02) return fail("mask frequency %.4f", f);
  }
  Tensor ones = Tensor::ones({20000});
  Tensor kept = net::dropout(ones, 0.2, rng);
  double keep = 0.0;
  for (double v : kept.data()) keep += v != 0.0;
  keep /= static_cast<double>(kept.size());
  if (std::abs(keep - 0.8) > 0.01) return fail("dropout keep rate %.4f", keep);
  return {};
}

std::string mc_moments() {
  Rng rng(16);
  std::vector<Tensor> samples;
  for (int i = 0; i < 5; ++i) samples.push_back(random_tensor({3, 4}, rng));
  unc::UncertaintyResult batch = unc::moments(samples);
  unc::UncertaintyResult stream = unc::mc_estimate([&](std::size_t i) { return samples[i]; }, samples.size());
  if (max_abs_diff(batch.mean, stream.mean) > 1e-14) return "streaming mean differs from batch mean";
  if (max_abs_diff(batch.variance, stream.variance) > 1e-14) return "streaming variance differs";
  unc::UncertaintyResult one = unc::mc_estimate([&](std::size_t) { return samples[0]; }, 1);
  if (max_abs(one.variance) != 0.0) return "N=1 variance is not zero";
  return {};
}

std::string op_gradients() {
  Rng rng(17);
  Tensor a = random_tensor({3, 4}, rng, true);
  Tensor w = random_tensor({4, 2}, rng, true);
  auto f = [&]() { return ops::sum(ops::square(ops::silu(ops::matmul(ops::softplus(a), w)))); };
  {
    Tape tape;
    TapeScope scope(tape);
    a.zero_grad();
    w.zero_grad();
    backward(f());
  }
  const double h = 1e-6;
  for (Tensor* t : {&a, &w}) {
    auto values = t->mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double keep = values[i];
      values[i] = keep + h;
      const double up = f().item();
      values[i] = keep - h;
      const double down = f().item();
      values[i] = keep;
      const double fd = (up - down) / (2 * h), an = t->grad()[i];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
      if (rel >= 1e-6) return fail("gradient mismatch, rel %.3g", rel);
    }
  }
  return {};
}

std::string model_identity() {
  net::MambaMIR m(net::ModelConfig::toy(2), 7);
  m.set_identity_init();
  Rng rng(18);
  Tensor x = random_tensor({1, 2, 12, 12}, rng);
  NoGradScope no_grad;
  if (max_abs_diff(m.forward(x, scan::Mode::deterministic), x) != 0.0) return "identity-initialized model is not x";
  Rng r2(19);
  if (m.forward(x, scan::Mode::mc, &r2).shape() != x.shape()) return "output shape differs from input";
  return {};
}

std::string config_round_trip() {
  for (auto task : {acq::Task::mri, acq::Task::ct, acq::Task::pet}) {
    for (const auto& c : {ExperimentConfig::toy(task), ExperimentConfig::paper(task)}) {
      if (!(ExperimentConfig::parse(c.serialize()) == c)) return "parse(serialize(c)) != c";
    }
  }
  const auto paper = ExperimentConfig::paper(acq::Task::mri);
  if (learning_rate(paper.train, 70001) != 1e-4) return "paper schedule lr(70001) != 1e-4";
  return {};
}

std::string dataset_determinism() {
  const fs::path root = fs::temp_directory_path() / ("mambamir_selftest_" + std::to_string(::getpid()));
  ExperimentConfig c = ExperimentConfig::toy(acq::Task::mri);
  c.data = {16, 2, 1, 1};
  c.train.crop = 16;
  c.seed = 99;
  std::string result;
  try {
    data::generate(c, root / "a", true);
    data::generate(c, root / "b", true);
    for (const char* f : {"manifest.txt", "train/sample_00000.bin", "val/sample_00000.bin", "test/sample_00000.bin"}) {
      if (io::fnv1a_file(root / "a" / f) != io::fnv1a_file(root / "b" / f)) {
        result = std::string("regenerated ") + f + " differs";
        break;
      }
    }
    if (result.empty()) {
      bool refused = false;
      try {
        data::generate(c, root / "a", false);
      } catch (const DataError&) {
        refused = true;
      }
      if (!refused) result = "overwrote a non-empty directory without force";
    }
  } catch (const std::exception& e) {
    result = e.what();
  }
  fs::remove_all(root);
  return result;
}

}  // namespace

std::vector<SelfCheck> selftest_suite() {
  return {
      {"wavelet_round_trip", wavelet_round_trip},   {"scan_equivalence", scan_equivalence},
      {"scan_causality", scan_causality},           {"cross_scan_algebra", cross_scan_algebra},
      {"mask_statistics", asm_frequency},           {"mc_moments", mc_moments},
      {"op_gradients", op_gradients},               {"model_identity", model_identity},
      {"config_round_trip", config_round_trip},     {"dataset_determinism", dataset_determinism},
  };
}

int run_selftest(std::ostream& out) {
  int failures = 0;
  for (const auto& check : selftest_suite()) {
    std::string detail;
    try {
      detail = check.run();
    } catch (const std::exception& e) {
      detail = std::string("threw: ") + e.what();
    }
    if (detail.empty()) {
      out << "PASS " << check.name << "\n";
    } else {
      out << "FAIL " << check.name << ": " << detail << "\n";
      ++failures;
    }
  }
  return failures;
}

}  // namespace mambamir
