#pragma once

#include <cstdint>
#include <vector>

#include "mambamir/layers.hpp"
#include "mambamir/tensor.hpp"

// Training losses and image-quality metrics.
namespace mambamir::obj {

struct LossWeights {
  double alpha = 15.0;   // image-domain Charbonnier
  double beta = 0.1;     // frequency-domain Charbonnier
  double gamma = 0.0025; // perceptual proxy
  double eta = 0.1;      // adversarial weight; reserved, no adversarial term is trained
  double epsilon = 1e-9;

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

/// sqrt(‖pred − target‖² + ε²) over all elements.
Tensor charbonnier_img(const Tensor& pred, const Tensor& target, double epsilon = 1e-9);

/// Charbonnier distance between unitary spectra. Inputs are [B,C,H,W] with
/// C = 1 (real images) or C = 2 (complex images as real/imag channels).
Tensor charbonnier_freq(const Tensor& pred, const Tensor& target, double epsilon = 1e-9);

/// Fixed, seed-pinned, randomly initialized 4-layer conv feature stack used in
/// place of a pretrained perceptual network. Weights are never trained.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(std::size_t in_channels, std::uint64_t seed = 0x5eed);
  std::vector<Tensor> features(const Tensor& x) const;
  std::size_t in_channels() const { return in_channels_; }

 private:
  std::size_t in_channels_;
  std::vector<ConvParams> layers_;
  std::vector<std::size_t> strides_;
};

/// Sum over layers of the mean absolute feature difference.
Tensor perceptual_proxy(const Tensor& pred, const Tensor& target, const FeatureExtractor& fx);

struct LossTerms {
  Tensor total;
  double img = 0.0;
  double freq = 0.0;
  double perc = 0.0;
};

/// α·img + β·freq + γ·perceptual. `fx` may be null only when γ = 0.
LossTerms total_loss(const Tensor& pred, const Tensor& target, const LossWeights& w,
                     const FeatureExtractor* fx);

inline constexpr double kPsnrCap = 200.0;

/// 10·log10(range²/MSE), capped at kPsnrCap for identical inputs.
double psnr(const Tensor& pred, const Tensor& target, double data_range);

/// Mean SSIM over the valid region with an 11×11 Gaussian window (σ = 1.5),
/// K1 = 0.01, K2 = 0.03. Leading axes are treated as independent planes.
double ssim(const Tensor& pred, const Tensor& target, double data_range = 1.0);

}  // namespace mambamir::obj
