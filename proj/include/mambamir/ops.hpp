#pragma once

#include <cstddef>
#include <vector>

#include "mambamir/tensor.hpp"

// Differentiable operations. Every function records itself on the active
// tape when any input requires a gradient.
namespace mambamir::ops {

// Elementwise (identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Broadcast a [C] vector along the last axis.
Tensor add_lastdim(const Tensor& x, const Tensor& bias);
// Broadcast a [C] vector along axis 1 of [B,C,...].
Tensor add_channel(const Tensor& x, const Tensor& bias);

// Reductions to a [1] scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched [G,m,k] x [G,k,n] -> [G,m,n]; with transpose_b, b is [G,n,k].
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
/// x[..., in] · weight[in, out] (+ bias[out]).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

/// Cross-correlation. weight [Cout, Cin/groups, kh, kw]; kh, kw odd.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias = {},
              std::size_t stride = 1, std::size_t pad = 0, std::size_t groups = 1);

/// Normalizes each vector along the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
/// Normalizes each (batch, group) block of a [B,C,H,W] tensor.
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gain,
                  const Tensor& bias, double eps);

Tensor softmax_lastdim(const Tensor& x);

// Shape manipulation. All copy.
/// out[i] = x[index[i]]; the backward pass scatter-adds.
Tensor gather(const Tensor& x, Shape shape, std::vector<std::size_t> index);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// Reflect-pads the two trailing axes at the bottom/right edge.
Tensor pad_reflect(const Tensor& x, std::size_t pad_bottom, std::size_t pad_right);
/// [B,C,H,W] -> [B,C*p*p,H/p,W/p].
Tensor pixel_unshuffle(const Tensor& x, std::size_t p);
/// [B,C*p*p,H,W] -> [B,C,H*p,W*p].
Tensor pixel_shuffle(const Tensor& x, std::size_t p);

/// [B,C,H,W] <-> [B,H,W,C].
inline Tensor to_channels_last(const Tensor& x) { return permute(x, {0, 2, 3, 1}); }
inline Tensor to_channels_first(const Tensor& x) { return permute(x, {0, 3, 1, 2}); }

}  // namespace mambamir::ops
