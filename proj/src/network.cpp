#include "mambamir/network.hpp"

#include <cmath>

#include "mambamir/ops.hpp"

namespace mambamir::net {

ModelConfig ModelConfig::toy(std::size_t in_channels) {
  ModelConfig c;
  c.in_channels = in_channels;
  return c;
}

ModelConfig ModelConfig::paper(std::size_t in_channels) {
  ModelConfig c;
  c.in_channels = in_channels;
  c.embed_dim = 180;
  c.depth = 2;
  c.multipliers = {1, 2, 2, 2};
  c.state_dim = 128;
  c.patch_size = 1;
  c.heads = 6;
  return c;
}

void ModelConfig::validate() const {
  if (in_channels == 0) throw ConfigError("in_channels must be positive");
  if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
  if (depth == 0) throw ConfigError("depth must be positive");
  if (multipliers.empty()) throw ConfigError("multipliers must name at least one stage");
  for (std::size_t m : multipliers)
    if (m == 0) throw ConfigError("channel multipliers must be positive");
  if (state_dim == 0) throw ConfigError("state_dim must be positive");
  if (patch_size != 1 && patch_size != 2) {
    throw ConfigError("patch_size must be 1 or 2, got " + std::to_string(patch_size));
  }
  if (!(mlp_ratio > 0.0)) throw ConfigError("mlp_ratio must be positive");
  if (use_attn && (heads == 0 || stage_channels(stages()) % heads != 0)) {
    throw ConfigError("attention heads (" + std::to_string(heads) +
                      ") must divide the bottleneck channels (" +
                      std::to_string(stage_channels(stages())) + ")");
  }
}

std::size_t ModelConfig::stage_channels(std::size_t i) const {
  const std::size_t idx = i < multipliers.size() ? i : multipliers.size() - 1;
  return embed_dim * multipliers[idx];
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  Tensor mask(x.shape());
  const double keep = 1.0 / (1.0 - p);
  for (auto& v : mask.mutable_data()) v = rng.bernoulli(1.0 - p) ? keep : 0.0;
  return ops::mul(x, mask);
}

AmssParams AmssParams::init(std::size_t channels, std::size_t state, double mlp_ratio,
                            bool use_mlp, Rng& rng) {
  AmssParams p;
  p.norm_in = LayerNormParams::init(channels);
  p.in_proj = LinearParams::init(channels, channels, rng);
  p.dwconv = ConvParams::init(channels, channels, 3, rng, channels);
  for (auto& s : p.ssm) s = ssm::SSMParams::init(channels, state, rng);
  p.norm_out = LayerNormParams::init(channels);
  p.gate_proj = LinearParams::init(channels, channels, rng);
  p.out_proj = LinearParams::init(channels, channels, rng);
  p.use_mlp = use_mlp;
  if (use_mlp) {
    const auto hidden =
        static_cast<std::size_t>(std::max(1.0, std::round(mlp_ratio * static_cast<double>(channels))));
    p.norm_mlp = LayerNormParams::init(channels);
    p.fc1 = LinearParams::init(channels, hidden, rng);
    p.fc2 = LinearParams::init(hidden, channels, rng);
  }
  return p;
}

void AmssParams::collect(ParamList& out, const std::string& prefix) const {
  norm_in.collect(out, prefix + "norm_in.");
  in_proj.collect(out, prefix + "in_proj.");
  dwconv.collect(out, prefix + "dwconv.");
  for (std::size_t d = 0; d < ssm.size(); ++d)
    ssm[d].collect(out, prefix + "ssm" + std::to_string(d) + ".");
  norm_out.collect(out, prefix + "norm_out.");
  gate_proj.collect(out, prefix + "gate_proj.");
  out_proj.collect(out, prefix + "out_proj.");
  if (use_mlp) {
    norm_mlp.collect(out, prefix + "norm_mlp.");
    fc1.collect(out, prefix + "fc1.");
    fc2.collect(out, prefix + "fc2.");
  }
}

Tensor amss_block(const Tensor& x, const AmssParams& p, const ForwardContext& ctx) {
  if (x.rank() != 4 || x.dim(1) != p.norm_in.gain.size()) {
    throw DimensionError("amss_block: input " + to_string(x.shape()) + " does not have " +
                         std::to_string(p.norm_in.gain.size()) + " channels");
  }
  Tensor xt = ops::to_channels_last(x);
  Tensor inner = ops::to_channels_first(p.in_proj(p.norm_in(xt)));
  inner = ops::silu(p.dwconv(inner));
  Tensor scanned = scan::ams6_forward(inner, p.ssm, ctx.mode, ctx.rng, ctx.asm_enabled);
  Tensor path = p.norm_out(ops::to_channels_last(scanned));
  Tensor gate = ops::silu(p.gate_proj(xt));
  Tensor yt = ops::add(xt, p.out_proj(ops::mul(gate, path)));
  if (p.use_mlp) yt = ops::add(yt, p.fc2(ops::silu(p.fc1(p.norm_mlp(yt)))));
  return ops::to_channels_first(yt);
}

AttentionParams AttentionParams::init(std::size_t channels, std::size_t heads, Rng& rng) {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide " +
                      std::to_string(channels) + " channels");
  }
  AttentionParams p;
  p.norm = LayerNormParams::init(channels);
  p.qkv = LinearParams::init(channels, 3 * channels, rng);
  p.proj = LinearParams::init(channels, channels, rng);
  p.heads = heads;
  return p;
}

void AttentionParams::collect(ParamList& out, const std::string& prefix) const {
  norm.collect(out, prefix + "norm.");
  qkv.collect(out, prefix + "qkv.");
  proj.collect(out, prefix + "proj.");
}

AttentionOutput attention_block(const Tensor& x, const AttentionParams& p) {
  if (x.rank() != 4) throw DimensionError("attention_block: expected [B,C,h,w]");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), t = h * w;
  if (p.heads == 0 || c % p.heads != 0) {
    throw ConfigError("attention: " + std::to_string(p.heads) + " heads do not divide " +
                      std::to_string(c) + " channels");
  }
  const std::size_t nh = p.heads, dh = c / nh;
  Tensor tokens = ops::reshape(ops::to_channels_last(x), {b, t, c});
  Tensor qkv = ops::reshape(p.qkv(p.norm(tokens)), {b, t, 3, nh, dh});
  qkv = ops::permute(qkv, {2, 0, 3, 1, 4});  // [3, B, heads, T, dh]
  auto part = [&](std::size_t i) {
    return ops::reshape(ops::slice(qkv, 0, i, 1), {b * nh, t, dh});
  };
  Tensor q = part(0), k = part(1), v = part(2);
  Tensor scores = ops::scale(ops::bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor weights = ops::softmax_lastdim(scores);
  Tensor ctx = ops::reshape(ops::bmm(weights, v), {b, nh, t, dh});
  ctx = ops::reshape(ops::permute(ctx, {0, 2, 1, 3}), {b, t, c});
  Tensor out = ops::add(tokens, p.proj(ctx));
  out = ops::to_channels_first(ops::reshape(out, {b, h, w, c}));
  return {out, weights};
}

Tensor patch_embed(const Tensor& x, const LinearParams& proj, std::size_t patch) {
  if (x.rank() != 4) throw DimensionError("patch_embed: expected [B,C,H,W]");
  if (x.dim(2) % patch != 0 || x.dim(3) % patch != 0) {
    throw DimensionError("patch_embed: " + to_string(x.shape()) + " not divisible by patch " +
                         std::to_string(patch));
  }
  Tensor folded = patch == 1 ? x : ops::pixel_unshuffle(x, patch);
  return ops::to_channels_first(proj(ops::to_channels_last(folded)));
}

Tensor patch_unembed(const Tensor& x, const LinearParams& proj, std::size_t patch) {
  if (x.rank() != 4) throw DimensionError("patch_unembed: expected [B,D,h,w]");
  Tensor folded = ops::to_channels_first(proj(ops::to_channels_last(x)));
  return patch == 1 ? folded : ops::pixel_shuffle(folded, patch);
}

namespace {

std::size_t log2_exact(std::size_t v) {
  std::size_t l = 0;
  while ((std::size_t{1} << l) < v) ++l;
  return l;
}

}  // namespace

MambaMIR::MambaMIR(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  const std::size_t m = config_.stages(), p = config_.patch_size, cin = config_.in_channels;
  const std::size_t patch_levels = log2_exact(p);

  embed_ = LinearParams::init(cin * p * p, config_.embed_dim, rng);

  // The side path starts from the raw input and is decomposed once per
  // halving, so stage i sits at decomposition level log2(p) + i.
  std::size_t side_channels = cin;
  for (std::size_t i = 0; i < m; ++i) {
    if (patch_levels + i == 0) {
      side_.emplace_back(std::nullopt);
      continue;
    }
    side_.emplace_back(
        wavelet::DecomposeParams::init(side_channels, config_.stage_channels(i), rng));
    side_channels = config_.stage_channels(i);
  }

  for (std::size_t i = 0; i < m; ++i) {
    std::vector<AmssParams> blocks;
    for (std::size_t d = 0; d < config_.depth; ++d) {
      blocks.push_back(AmssParams::init(config_.stage_channels(i), config_.state_dim,
                                        config_.mlp_ratio, config_.use_mlp, rng));
    }
    encoder_.push_back(std::move(blocks));
    down_.push_back(
        wavelet::WDownParams::init(config_.stage_channels(i), config_.stage_channels(i + 1), rng));
  }

  const std::size_t cb = config_.stage_channels(m);
  for (auto& b : bottleneck_)
    b = AmssParams::init(cb, config_.state_dim, config_.mlp_ratio, config_.use_mlp, rng);
  if (config_.use_attn) attention_ = AttentionParams::init(cb, config_.heads, rng);

  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t ci = config_.stage_channels(i);
    up_.push_back(wavelet::WUpParams::init(config_.stage_channels(i + 1), ci, rng));
    fuse_.push_back(ConvParams::init(2 * ci, ci, 1, rng));
    std::vector<AmssParams> blocks;
    for (std::size_t d = 0; d < config_.depth; ++d) {
      blocks.push_back(
          AmssParams::init(ci, config_.state_dim, config_.mlp_ratio, config_.use_mlp, rng));
    }
    decoder_.push_back(std::move(blocks));
  }

  unembed_ = LinearParams::init(config_.embed_dim, cin * p * p, rng);
}

Tensor MambaMIR::run_amss(const Tensor& x, const AmssParams& p, const ForwardContext& ctx) const {
  Tensor y = amss_block(x, p, ctx);
  if (ctx.dropout_p > 0.0 && ctx.mode != scan::Mode::deterministic) {
    if (!ctx.rng) throw ContractError("dropout requires an rng outside deterministic mode");
    y = dropout(y, ctx.dropout_p, *ctx.rng);
  }
  return y;
}

Tensor MambaMIR::forward(const Tensor& x, scan::Mode mode, Rng* rng) const {
  if (x.rank() != 4 || x.dim(1) != config_.in_channels) {
    throw DimensionError("forward: expected [B," + std::to_string(config_.in_channels) +
                         ",H,W], got " + to_string(x.shape()));
  }
  const bool stochastic = mode != scan::Mode::deterministic && (asm_enabled || dropout_p > 0.0);
  if (stochastic && !rng) throw ContractError("forward: train/mc mode requires an rng");
  ForwardContext ctx{mode, rng, asm_enabled, dropout_p};

  // Padding policy: reflect-pad H,W up to the next multiple of patch·2^M and
  // crop the output back.
  const std::size_t align = config_.alignment(), h = x.dim(2), w = x.dim(3);
  const std::size_t ph = (align - h % align) % align, pw = (align - w % align) % align;
  Tensor input = (ph || pw) ? ops::pad_reflect(x, ph, pw) : x;

  const std::size_t m = config_.stages();
  Tensor feats = patch_embed(input, embed_, config_.patch_size);
  Tensor side = input;
  std::vector<Tensor> skips(m);
  std::vector<wavelet::WDownResult> downs;
  for (std::size_t i = 0; i < m; ++i) {
    if (side_[i]) {
      side = wavelet::wavelet_decompose(side, *side_[i]);
      if (side.shape() != feats.shape()) {
        throw DimensionError("stage " + std::to_string(i) + ": side path " +
                             to_string(side.shape()) + " vs features " + to_string(feats.shape()));
      }
      feats = ops::add(feats, side);
    }
    for (const auto& blk : encoder_[i]) feats = run_amss(feats, blk, ctx);
    skips[i] = feats;
    downs.push_back(wavelet::wdown(feats, down_[i]));
    feats = downs.back().out;
  }

  auto bottleneck_block = [&](const AmssParams& p) {
    return [&, pp = &p](const Tensor& t) { return run_amss(t, *pp, ctx); };
  };
  feats = wavelet::wamss_forward(feats, bottleneck_block(bottleneck_[0]));
  if (config_.use_attn) feats = attention_block(feats, attention_).out;
  feats = wavelet::wamss_forward(feats, bottleneck_block(bottleneck_[1]));

  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t i = m - 1 - k;
    const auto& d = downs[i];
    feats = wavelet::wup(feats, d.high, up_[i], d.height, d.width);
    if (feats.shape() != skips[i].shape()) {
      throw DimensionError("decoder stage " + std::to_string(i) + ": " + to_string(feats.shape()) +
                           " vs skip " + to_string(skips[i].shape()));
    }
    feats = fuse_[i](ops::concat({feats, skips[i]}, 1));
    for (const auto& blk : decoder_[i]) feats = run_amss(feats, blk, ctx);
  }

  Tensor out = ops::add(input, patch_unembed(feats, unembed_, config_.patch_size));
  if (ph) out = ops::slice(out, 2, 0, h);
  if (pw) out = ops::slice(out, 3, 0, w);
  return out;
}

ParamList MambaMIR::parameters() const {
  ParamList out;
  embed_.collect(out, "embed.");
  for (std::size_t i = 0; i < side_.size(); ++i)
    if (side_[i]) side_[i]->collect(out, "side" + std::to_string(i) + ".");
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    for (std::size_t d = 0; d < encoder_[i].size(); ++d)
      encoder_[i][d].collect(out, "enc" + std::to_string(i) + ".blk" + std::to_string(d) + ".");
    down_[i].collect(out, "down" + std::to_string(i) + ".");
  }
  bottleneck_[0].collect(out, "mid.wamss0.");
  if (config_.use_attn) attention_.collect(out, "mid.attn.");
  bottleneck_[1].collect(out, "mid.wamss1.");
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    up_[i].collect(out, "up" + std::to_string(i) + ".");
    fuse_[i].collect(out, "fuse" + std::to_string(i) + ".");
    for (std::size_t d = 0; d < decoder_[i].size(); ++d)
      decoder_[i][d].collect(out, "dec" + std::to_string(i) + ".blk" + std::to_string(d) + ".");
  }
  unembed_.collect(out, "unembed.");
  return out;
}

std::size_t MambaMIR::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.size();
  return n;
}

void MambaMIR::set_identity_init() {
  for (auto& v : unembed_.weight.mutable_data()) v = 0.0;
  if (unembed_.bias.defined())
    for (auto& v : unembed_.bias.mutable_data()) v = 0.0;
}

ConvBaseline::ConvBaseline(std::size_t in_channels, std::size_t width, std::uint64_t seed) {
  Rng rng(seed);
  c1_ = ConvParams::init(in_channels, width, 3, rng);
  c2_ = ConvParams::init(width, width, 3, rng);
  c3_ = ConvParams::init(width, in_channels, 3, rng);
}

Tensor ConvBaseline::forward(const Tensor& x) const {
  return ops::add(x, c3_(ops::silu(c2_(ops::silu(c1_(x))))));
}

ParamList ConvBaseline::parameters() const {
  ParamList out;
  c1_.collect(out, "conv1.");
  c2_.collect(out, "conv2.");
  c3_.collect(out, "conv3.");
  return out;
}

}  // namespace mambamir::net
