#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mambamir/rng.hpp"
#include "mambamir/tensor.hpp"

namespace mambamir::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = false) {
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  t.set_requires_grad(grad);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

/// Analytic gradients of a scalar loss with respect to `inputs`.
inline std::vector<std::vector<double>> analytic_grads(const std::function<Tensor()>& loss,
                                                       const std::vector<Tensor>& inputs) {
  Tape tape;
  TapeScope scope(tape);
  for (auto t : inputs) t.zero_grad();
  backward(loss());
  std::vector<std::vector<double>> out;
  for (auto t : inputs) {
    auto g = t.has_grad() ? t.grad() : std::span<const double>{};
    std::vector<double> v(t.size(), 0.0);
    std::copy(g.begin(), g.end(), v.begin());
    out.push_back(v);
  }
  return out;
}

/// Central difference of `loss` along input element (t, i).
inline double central_difference(const std::function<Tensor()>& loss, Tensor t, std::size_t i, double h) {
  auto values = t.mutable_data();
  const double keep = values[i];
  values[i] = keep + h;
  const double up = loss().item();
  values[i] = keep - h;
  const double down = loss().item();
  values[i] = keep;
  return (up - down) / (2.0 * h);
}

/// Largest over inputs of ‖g_fd − g_an‖ / max(‖g_fd‖, ‖g_an‖, floor).
inline double gradient_error(const std::function<Tensor()>& loss, const std::vector<Tensor>& inputs,
                             double h = 1e-5, double floor = 1e-12) {
  const auto an = analytic_grads(loss, inputs);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    double diff = 0.0, nf = 0.0, na = 0.0;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double fd = central_difference(loss, inputs[k], i, h);
      diff += (fd - an[k][i]) * (fd - an[k][i]);
      nf += fd * fd;
      na += an[k][i] * an[k][i];
    }
    worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(nf), std::sqrt(na), floor}));
  }
  return worst;
}

}  // namespace mambamir::testing
