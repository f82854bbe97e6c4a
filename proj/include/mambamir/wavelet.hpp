#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>

#include "mambamir/layers.hpp"
#include "mambamir/tensor.hpp"

namespace mambamir::wavelet {

enum class Family { haar };

/// One level of a 2D orthonormal wavelet decomposition. HL holds horizontal
/// high-pass (vertical edges), LH vertical high-pass, HH diagonal.
/// Inputs with odd extents are reflect-padded; `height`/`width` record the
/// original extents so synthesis can crop.
struct Subbands {
  Tensor ll, hl, lh, hh;  // each [B, C, ceil(H/2), ceil(W/2)]
  std::size_t height = 0;
  std::size_t width = 0;
};

/// The three high-frequency subbands carried from WDown to WUp.
struct HighFreq {
  Tensor hl, lh, hh;
};

Subbands dwt2(const Tensor& x, Family family = Family::haar);
Tensor idwt2(const Subbands& s, Family family = Family::haar);
inline HighFreq highs(const Subbands& s) { return {s.hl, s.lh, s.hh}; }

struct WDownParams {
  std::optional<GroupNormParams> norm_in;
  ConvParams conv_in;    // C -> C', main path before DWT
  ConvParams conv_skip;  // C -> C_out, skip path before DWT
  std::optional<GroupNormParams> norm_mid;
  ConvParams conv_out;   // C' -> C_out, applied to LL'

  static WDownParams init(std::size_t in_channels, std::size_t out_channels, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

struct WDownResult {
  Tensor out;     // [B, C_out, H/2, W/2]
  HighFreq high;  // H+ of the main path, [B, C', H/2, W/2]
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Skip: LL of DWT(Conv(x)). Main: Conv(GN(x)) → DWT → Conv(GN(LL')).
/// Output = main + skip; H+ of the main path is returned for WUp.
WDownResult wdown(const Tensor& x, const WDownParams& p);

struct WUpParams {
  std::optional<GroupNormParams> norm_in;
  ConvParams conv_in;    // C_in -> C', must match the H+ channels
  ConvParams conv_skip;  // C_in -> C'
  std::optional<GroupNormParams> norm_mid;
  ConvParams conv_out;   // C' -> C'

  static WUpParams init(std::size_t in_channels, std::size_t out_channels, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Skip: iDWT({Conv(x), H+}). Main: iDWT({Conv(GN(x)), H+}) → Conv(GN(·)).
/// `height`/`width` are the extents recorded by the paired wdown.
Tensor wup(const Tensor& x, const std::optional<HighFreq>& high, const WUpParams& p,
           std::size_t height, std::size_t width);

struct DecomposeParams {
  ConvParams fuse;  // 4C -> C_out

  static DecomposeParams init(std::size_t in_channels, std::size_t out_channels, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

/// DWT, subbands concatenated on channels in (LL, HL, LH, HH) order, fused
/// by a convolution.
Tensor wavelet_decompose(const Tensor& x, const DecomposeParams& p);

/// DWT → block on LL → iDWT with the untouched highs.
Tensor wamss_forward(const Tensor& x, const std::function<Tensor(const Tensor&)>& block);

}  // namespace mambamir::wavelet
