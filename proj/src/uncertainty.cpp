#include "mambamir/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mambamir/acquisition.hpp"
#include "mambamir/ops.hpp"

namespace mambamir::unc {

void MomentAccumulator::add(const Tensor& sample) {
  if (count_ == 0) {
    shape_ = sample.shape();
    mean_.assign(sample.size(), 0.0);
    m2_.assign(sample.size(), 0.0);
  } else if (sample.shape() != shape_) {
    throw DimensionError("MomentAccumulator: sample " + to_string(sample.shape()) +
                         " differs from " + to_string(shape_));
  }
  ++count_;
  const double n = static_cast<double>(count_);
  auto d = sample.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double delta = d[i] - mean_[i];
    mean_[i] += delta / n;
    m2_[i] += delta * (d[i] - mean_[i]);
  }
}

Tensor MomentAccumulator::mean() const {
  if (count_ == 0) throw ContractError("MomentAccumulator: no samples");
  return Tensor(shape_, mean_);
}

Tensor MomentAccumulator::variance() const {
  if (count_ == 0) throw ContractError("MomentAccumulator: no samples");
  Buffer v(m2_.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(0.0, m2_[i] / static_cast<double>(count_));
  return Tensor(shape_, std::move(v));
}

UncertaintyResult moments(const std::vector<Tensor>& samples) {
  if (samples.empty()) throw ContractError("moments: no samples");
  const std::size_t n = samples.size(), size = samples[0].size();
  Buffer mean(size, 0.0), var(size, 0.0);
  for (const auto& s : samples) {
    if (s.shape() != samples[0].shape()) throw DimensionError("moments: sample shapes differ");
    auto d = s.data();
    for (std::size_t i = 0; i < size; ++i) mean[i] += d[i];
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  for (const auto& s : samples) {
    auto d = s.data();
    for (std::size_t i = 0; i < size; ++i) var[i] += (d[i] - mean[i]) * (d[i] - mean[i]);
  }
  for (auto& v : var) v /= static_cast<double>(n);
  return {Tensor(samples[0].shape(), std::move(mean)), Tensor(samples[0].shape(), std::move(var)),
          n, samples};
}

UncertaintyResult mc_estimate(const std::function<Tensor(std::size_t)>& sample, std::size_t n,
                              const McOptions& options) {
  if (n == 0) throw ContractError("mc_estimate: N must be >= 1");
  MomentAccumulator acc;
  UncertaintyResult r;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor y = sample(i).detach();
    if (options.magnitude) y = acq::magnitude(y);
    acc.add(y);
    if (options.retain_samples) r.samples.push_back(y);
  }
  r.mean = acc.mean();
  r.variance = acc.variance();
  r.n_samples = n;
  return r;
}

net::MambaMIR mc_dropout_wrap(const net::MambaMIR& model, double p) {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("dropout rate must lie in (0, 1)");
  net::MambaMIR wrapped = model;
  wrapped.asm_enabled = false;
  wrapped.dropout_p = p;
  return wrapped;
}

UncertaintyResult mc_estimate(const net::MambaMIR& model, const Tensor& x_u, std::size_t n,
                              std::uint64_t seed, const Mechanism& mechanism,
                              const McOptions& options) {
  if (n == 0) throw ContractError("mc_estimate: N must be >= 1");
  const net::MambaMIR* run = &model;
  net::MambaMIR wrapped = model;
  if (const auto* d = std::get_if<DropoutMechanism>(&mechanism)) {
    wrapped = mc_dropout_wrap(model, d->p);
    run = &wrapped;
  }
  NoGradScope no_grad;
  return mc_estimate(
      [&](std::size_t i) {
        Rng rng(derive_seed(seed, i));
        return run->forward(x_u, scan::Mode::mc, &rng);
      },
      n, options);
}

namespace {

Buffer average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  Buffer ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

Correlation error_uncertainty_corr(const Tensor& uncertainty, const Tensor& error) {
  if (uncertainty.shape() != error.shape()) {
    throw DimensionError("error_uncertainty_corr: shape mismatch " + to_string(uncertainty.shape()) +
                         " vs " + to_string(error.shape()));
  }
  constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
  auto u = uncertainty.data(), e = error.data();
  for (std::size_t i = 0; i < u.size(); ++i)
    if (std::isnan(u[i]) || std::isnan(e[i])) return {kNaN, "map contains NaN"};
  if (u.size() < 2) return {kNaN, "fewer than two pixels"};
  const auto ru = average_ranks(u), re = average_ranks(e);
  const double mean = (static_cast<double>(u.size()) + 1.0) / 2.0;
  double num = 0.0, su = 0.0, se = 0.0;
  for (std::size_t i = 0; i < ru.size(); ++i) {
    num += (ru[i] - mean) * (re[i] - mean);
    su += (ru[i] - mean) * (ru[i] - mean);
    se += (re[i] - mean) * (re[i] - mean);
  }
  if (su == 0.0) return {kNaN, "uncertainty map is constant"};
  if (se == 0.0) return {kNaN, "error map is constant"};
  return {num / std::sqrt(su * se), {}};
}

Tensor erf_map(const std::function<Tensor(const Tensor&)>& model, const Tensor& x,
               std::size_t center_row, std::size_t center_col) {
  if (x.rank() != 4 || x.dim(0) != 1) throw DimensionError("erf_map: expected [1,C,H,W]");
  const std::size_t c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (center_row >= h || center_col >= w) throw DimensionError("erf_map: center outside the image");
  Tensor input = x.detach();
  input.set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = model(input);
    Tensor pick = ops::slice(ops::slice(y, 2, center_row, 1), 3, center_col, 1);
    backward(ops::sum(pick));
  }
  Tensor map({h, w});
  auto m = map.mutable_data();
  if (input.has_grad()) {
    auto g = input.grad();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h * w; ++i) m[i] += std::abs(g[ch * h * w + i]);
  }
  const double peak = *std::max_element(m.begin(), m.end());
  if (peak > 0)
    for (auto& v : m) v /= peak;
  return map;
}

double mass_beyond_radius(const Tensor& map, std::size_t center_row, std::size_t center_col,
                          double radius) {
  if (map.rank() != 2) throw DimensionError("mass_beyond_radius: expected [H,W]");
  const std::size_t h = map.dim(0), w = map.dim(1);
  auto m = map.data();
  double total = 0.0, beyond = 0.0;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double dist = static_cast<double>(std::max(r > center_row ? r - center_row : center_row - r,
                                                       c > center_col ? c - center_col : center_col - c));
      total += m[r * w + c];
      if (dist > radius) beyond += m[r * w + c];
    }
  return total > 0 ? beyond / total : 0.0;
}

}  // namespace mambamir::unc
