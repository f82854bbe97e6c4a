#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mambamir/layers.hpp"
#include "mambamir/rng.hpp"
#include "mambamir/scan.hpp"
#include "mambamir/ssm.hpp"
#include "mambamir/tensor.hpp"
#include "mambamir/wavelet.hpp"

namespace mambamir::net {

/// Architecture hyperparameters.
struct ModelConfig {
  std::size_t in_channels = 2;  // 2 = complex MRI as (real, imag); 1 for CT/PET
  std::size_t embed_dim = 32;
  std::size_t depth = 2;  // AMSS blocks per residual block
  std::vector<std::size_t> multipliers{1, 2};
  std::size_t state_dim = 16;  // S6 latent channels N
  std::size_t patch_size = 2;
  double mlp_ratio = 2.0;
  bool use_mlp = true;
  bool use_attn = true;
  std::size_t heads = 4;

  /// Desk-scale default used by tests and CI.
  static ModelConfig toy(std::size_t in_channels);
  /// Full-size published configuration. Documented, not exercised in CI.
  static ModelConfig paper(std::size_t in_channels);

  void validate() const;
  std::size_t stages() const { return multipliers.size(); }
  /// Channels of encoder stage i; index stages() is the bottleneck.
  std::size_t stage_channels(std::size_t i) const;
  /// H and W are padded to a multiple of this.
  std::size_t alignment() const { return patch_size << stages(); }

  bool operator==(const ModelConfig&) const = default;
};

/// Runtime behavior of one forward pass.
struct ForwardContext {
  scan::Mode mode = scan::Mode::deterministic;
  Rng* rng = nullptr;
  bool asm_enabled = true;
  double dropout_p = 0.0;  // elementwise dropout after each AMSS block
};

/// Inverted dropout: keep with probability 1-p and scale kept entries by 1/(1-p).
Tensor dropout(const Tensor& x, double p, Rng& rng);

struct AmssParams {
  LayerNormParams norm_in;
  LinearParams in_proj;
  ConvParams dwconv;  // depthwise 3x3
  std::array<ssm::SSMParams, scan::kDirections> ssm;
  LayerNormParams norm_out;
  LinearParams gate_proj;
  LinearParams out_proj;
  bool use_mlp = false;
  LayerNormParams norm_mlp;
  LinearParams fc1;
  LinearParams fc2;

  static AmssParams init(std::size_t channels, std::size_t state, double mlp_ratio, bool use_mlp,
                         Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

/// X' = LN(x); path = LN(AMS6(SiLU(DWConv(Linear(X'))))); gate = SiLU(Linear(x));
/// out = Linear(gate ⊙ path) + x, followed by an optional LN → MLP residual.
Tensor amss_block(const Tensor& x, const AmssParams& p, const ForwardContext& ctx);

struct AttentionParams {
  LayerNormParams norm;
  LinearParams qkv;
  LinearParams proj;
  std::size_t heads = 1;

  static AttentionParams init(std::size_t channels, std::size_t heads, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

struct AttentionOutput {
  Tensor out;      // [B, C, h, w]
  Tensor weights;  // [B*heads, T, T], row-stochastic
};

/// Pre-norm multi-head self-attention over the h*w tokens, with residual.
/// No positional encoding.
AttentionOutput attention_block(const Tensor& x, const AttentionParams& p);

/// Non-overlapping p×p patch projection: [B,Cin,H,W] -> [B,D,H/p,W/p].
Tensor patch_embed(const Tensor& x, const LinearParams& proj, std::size_t patch);
/// Inverse-shaped projection: [B,D,h,w] -> [B,Cout,h*p,w*p].
Tensor patch_unembed(const Tensor& x, const LinearParams& proj, std::size_t patch);

/// U-shaped reconstruction network with a global input residual.
class MambaMIR {
 public:
  MambaMIR(ModelConfig config, std::uint64_t seed);

  Tensor forward(const Tensor& x, scan::Mode mode, Rng* rng = nullptr) const;

  const ModelConfig& config() const { return config_; }
  ParamList parameters() const;
  std::size_t parameter_count() const;

  /// Zeroes the unembedding so forward(x) == x exactly.
  void set_identity_init();

  bool asm_enabled = true;
  double dropout_p = 0.0;

 private:
  Tensor run_amss(const Tensor& x, const AmssParams& p, const ForwardContext& ctx) const;

  ModelConfig config_;
  LinearParams embed_;
  LinearParams unembed_;
  std::vector<std::optional<wavelet::DecomposeParams>> side_;
  std::vector<std::vector<AmssParams>> encoder_;
  std::vector<wavelet::WDownParams> down_;
  std::array<AmssParams, 2> bottleneck_;
  AttentionParams attention_;
  std::vector<wavelet::WUpParams> up_;
  std::vector<ConvParams> fuse_;
  std::vector<std::vector<AmssParams>> decoder_;
};

/// Three 3×3 convolutions with SiLU and a global residual; a local-receptive-field
/// reference model.
class ConvBaseline {
 public:
  ConvBaseline(std::size_t in_channels, std::size_t width, std::uint64_t seed);

  Tensor forward(const Tensor& x) const;
  ParamList parameters() const;

 private:
  ConvParams c1_, c2_, c3_;
};

}  // namespace mambamir::net
