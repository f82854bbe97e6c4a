#pragma once

#include <cstddef>
#include <string>

#include "mambamir/optim.hpp"
#include "mambamir/rng.hpp"
#include "mambamir/tensor.hpp"

// Parameter bundles for the standard layers the network is built from.
namespace mambamir {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng, bool trainable = true);
Tensor filled_tensor(Shape shape, double value, bool trainable = true);

struct LinearParams {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out], may be undefined

  static LinearParams init(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Same-padded convolution (pad = k/2).
struct ConvParams {
  Tensor weight;  // [out, in/groups, k, k]
  Tensor bias;    // [out], may be undefined
  std::size_t groups = 1;

  static ConvParams init(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng,
                         std::size_t groups = 1);
  /// 1x1 convolution with unit diagonal weight and zero bias.
  static ConvParams identity(std::size_t channels, bool trainable = false);
  Tensor operator()(const Tensor& x) const;
  std::size_t out_channels() const { return weight.dim(0); }
  void collect(ParamList& out, const std::string& prefix) const;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
  double eps = 1e-5;

  static LayerNormParams init(std::size_t channels);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct GroupNormParams {
  Tensor gain;
  Tensor bias;
  std::size_t groups = 1;
  double eps = 1e-5;

  /// Uses the largest group count <= 8 that divides `channels`.
  static GroupNormParams init(std::size_t channels);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

}  // namespace mambamir
