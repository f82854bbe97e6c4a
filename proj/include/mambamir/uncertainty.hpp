#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <variant>
#include <vector>

#include "mambamir/network.hpp"
#include "mambamir/tensor.hpp"

// Monte-Carlo predictive mean/variance and uncertainty analytics.
namespace mambamir::unc {

/// Single-pass elementwise mean and population (1/N) variance (Welford).
class MomentAccumulator {
 public:
  void add(const Tensor& sample);
  std::size_t count() const { return count_; }
  Tensor mean() const;
  Tensor variance() const;

 private:
  Shape shape_;
  std::size_t count_ = 0;
  Buffer mean_;
  Buffer m2_;
};

struct UncertaintyResult {
  Tensor mean;
  Tensor variance;  // population variance, >= 0
  std::size_t n_samples = 0;
  std::vector<Tensor> samples;  // only when retention was requested
};

/// Stochastic scan masking. Takes no tuning parameters.
struct AsmMechanism {};
/// Elementwise Bernoulli dropout after each AMSS block, rate p in (0, 1).
struct DropoutMechanism {
  double p = 0.0;
};
using Mechanism = std::variant<AsmMechanism, DropoutMechanism>;

struct McOptions {
  bool retain_samples = false;
  /// Accumulate moments of |z| for complex (2-channel) outputs.
  bool magnitude = false;
};

/// Batch formulas over explicit samples.
UncertaintyResult moments(const std::vector<Tensor>& samples);

/// Runs N passes of `sample(i)` and accumulates their moments in pass order.
UncertaintyResult mc_estimate(const std::function<Tensor(std::size_t)>& sample, std::size_t n,
                              const McOptions& options = {});

/// N stochastic passes of `model`; pass i draws from derive_seed(seed, i).
UncertaintyResult mc_estimate(const net::MambaMIR& model, const Tensor& x_u, std::size_t n,
                              std::uint64_t seed, const Mechanism& mechanism,
                              const McOptions& options = {});

/// Copy sharing the weights, with scan masking off and dropout at rate p.
net::MambaMIR mc_dropout_wrap(const net::MambaMIR& model, double p);

struct Correlation {
  double rho = 0.0;    // NaN when undefined
  std::string reason;  // why rho is undefined; empty otherwise
  bool defined() const { return reason.empty(); }
};

/// Spearman rank correlation (average ranks for ties).
Correlation error_uncertainty_corr(const Tensor& uncertainty, const Tensor& error);

/// |∂ y[center] / ∂ x| summed over input and output channels, normalized to max 1.
/// `x` is [1,C,H,W]; returns [H,W].
Tensor erf_map(const std::function<Tensor(const Tensor&)>& model, const Tensor& x,
               std::size_t center_row, std::size_t center_col);

/// Fraction of the map's total mass at Chebyshev distance > radius from the center.
double mass_beyond_radius(const Tensor& map, std::size_t center_row, std::size_t center_col,
                          double radius);

}  // namespace mambamir::unc
