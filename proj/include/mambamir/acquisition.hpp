#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mambamir/rng.hpp"
#include "mambamir/tensor.hpp"

// Forward operators and synthetic data for the three reconstruction tasks.
// Complex images are real tensors whose third-from-last axis has size 2
// (real, imaginary), e.g. [2,H,W] or [B,2,H,W].
namespace mambamir::acq {

enum class Task { mri, ct, pet };
std::string task_name(Task t);
Task parse_task(const std::string& s);

/// Unitary 2D DFT over the last two axes of a complex tensor. Differentiable;
/// the backward of each transform is the other one.
Tensor dft2(const Tensor& x);
Tensor idft2(const Tensor& x);
/// Lifts a real [...,1,H,W] tensor to complex [...,2,H,W] with zero imaginary part.
Tensor to_complex(const Tensor& real);
/// Pixelwise modulus of a complex tensor: [...,2,H,W] -> [...,1,H,W].
Tensor magnitude(const Tensor& z);

/// 1D Cartesian sampling over k-space columns.
struct KSpaceMask {
  std::vector<std::uint8_t> columns;
  double acceleration = 1.0;
  double center_fraction = 0.0;

  std::size_t width() const { return columns.size(); }
  std::size_t sampled() const;
};

/// A centered band of ceil(center_frac·width) columns is always sampled; every
/// other column is kept independently so the expected total is width/AF.
/// Throws ConfigError when AF < 1 or the center band alone exceeds the budget.
KSpaceMask make_cartesian_mask(std::size_t width, double acceleration, double center_fraction,
                               Rng& rng);

/// y = mask ⊙ dft2(x), optionally plus complex Gaussian noise on sampled entries.
Tensor mri_forward(const Tensor& x, const KSpaceMask& mask, double noise_sigma = 0.0,
                   Rng* rng = nullptr);
/// x_u = idft2(y).
Tensor zero_filled(const Tensor& y, const KSpaceMask& mask);

/// Parallel-beam geometry with unit detector spacing and views uniform over [0, π).
struct CTGeometry {
  std::size_t n_views = 60;
  std::size_t n_detectors = 0;  // 0 selects the smallest odd count covering the diagonal
  std::size_t image_size = 64;

  std::size_t detectors() const;
  double angle(std::size_t view) const;
};

/// Line integrals sampled with bilinear interpolation: [N,N] -> [views, detectors].
Tensor radon(const Tensor& image, const CTGeometry& geom);
/// Ram-Lak filtered backprojection: [views, detectors] -> [N,N].
Tensor fbp(const Tensor& sinogram, const CTGeometry& geom);

/// Poisson thinning: counts ~ Poisson(x·scale/drf), returned as counts·drf/scale.
Tensor pet_lowdose(const Tensor& activity, double drf, Rng& rng, double scale = 1000.0);

/// Modified Shepp-Logan head phantom with values in [0, 1].
Tensor shepp_logan(std::size_t size);
/// Random ellipse phantom with values in [0, 1].
Tensor random_ellipse_phantom(std::size_t size, Rng& rng);

struct AcquisitionParams {
  Task task = Task::mri;
  double acceleration = 4.0;
  double center_fraction = 0.08;
  double mri_noise_sigma = 0.0;
  std::size_t n_views = 60;
  std::size_t n_detectors = 0;
  double drf = 4.0;
  double pet_scale = 1000.0;

  bool operator==(const AcquisitionParams&) const = default;
};

/// One training/evaluation example. Shapes are [C,H,W] with C = 2 for MRI and
/// 1 for CT/PET; `y` holds the raw measurement (k-space, sinogram or counts).
struct PhantomPair {
  Tensor x;
  Tensor y;
  Tensor x_u;
  Task task = Task::mri;
  AcquisitionParams params;
  std::uint64_t seed = 0;
};

/// Degrades a real [H,W] ground-truth image; a deterministic function of
/// (image, params, seed).
PhantomPair make_pair(const Tensor& image, const AcquisitionParams& params, std::uint64_t seed);

}  // namespace mambamir::acq
