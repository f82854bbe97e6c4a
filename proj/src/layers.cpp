#include "mambamir/layers.hpp"

#include <cmath>

#include "mambamir/ops.hpp"

namespace mambamir {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng, bool trainable) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(-bound, bound);
  t.set_requires_grad(trainable);
  return t;
}

Tensor filled_tensor(Shape shape, double value, bool trainable) {
  Tensor t(std::move(shape), value);
  t.set_requires_grad(trainable);
  return t;
}

LinearParams LinearParams::init(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
  LinearParams p;
  p.weight = uniform_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  if (with_bias) p.bias = filled_tensor({out}, 0.0);
  return p;
}

Tensor LinearParams::operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }

void LinearParams::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + "weight", weight);
  if (bias.defined()) out.emplace_back(prefix + "bias", bias);
}

ConvParams ConvParams::init(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng,
                            std::size_t groups) {
  ConvParams p;
  const std::size_t fan_in = in / groups * kernel * kernel;
  p.weight = uniform_tensor({out, in / groups, kernel, kernel},
                            1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
  p.bias = filled_tensor({out}, 0.0);
  p.groups = groups;
  return p;
}

ConvParams ConvParams::identity(std::size_t channels, bool trainable) {
  ConvParams p;
  p.weight = filled_tensor({channels, channels, 1, 1}, 0.0, trainable);
  auto w = p.weight.mutable_data();
  for (std::size_t c = 0; c < channels; ++c) w[c * channels + c] = 1.0;
  p.bias = filled_tensor({channels}, 0.0, trainable);
  return p;
}

Tensor ConvParams::operator()(const Tensor& x) const {
  return ops::conv2d(x, weight, bias, 1, weight.dim(2) / 2, groups);
}

void ConvParams::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + "weight", weight);
  if (bias.defined()) out.emplace_back(prefix + "bias", bias);
}

LayerNormParams LayerNormParams::init(std::size_t channels) {
  return {filled_tensor({channels}, 1.0), filled_tensor({channels}, 0.0)};
}

Tensor LayerNormParams::operator()(const Tensor& x) const {
  return ops::layer_norm(x, gain, bias, eps);
}

void LayerNormParams::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + "gain", gain);
  out.emplace_back(prefix + "bias", bias);
}

GroupNormParams GroupNormParams::init(std::size_t channels) {
  std::size_t groups = 1;
  for (std::size_t g = 8; g >= 1; --g) {
    if (channels % g == 0) {
      groups = g;
      break;
    }
  }
  return {filled_tensor({channels}, 1.0), filled_tensor({channels}, 0.0), groups};
}

Tensor GroupNormParams::operator()(const Tensor& x) const {
  return ops::group_norm(x, groups, gain, bias, eps);
}

void GroupNormParams::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + "gain", gain);
  out.emplace_back(prefix + "bias", bias);
}

}  // namespace mambamir
