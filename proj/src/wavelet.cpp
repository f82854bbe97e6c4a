#include "mambamir/wavelet.hpp"

#include "mambamir/ops.hpp"

namespace mambamir::wavelet {

namespace {

// The orthonormal Haar block transform is symmetric and involutory, so the
// same kernel performs analysis ([B,C,H,W] -> [4,B,C,H/2,W/2]) and, read the
// other way round, synthesis.
void haar_analysis(const double* x, std::size_t planes, std::size_t h, std::size_t w, double* out) {
  const std::size_t oh = h / 2, ow = w / 2, band = planes * oh * ow;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const double* top = x + (p * h + 2 * i) * w + 2 * j;
        const double a = top[0], b = top[1], c = top[w], d = top[w + 1];
        const std::size_t o = (p * oh + i) * ow + j;
        out[o] = 0.5 * (a + b + c + d);
        out[band + o] = 0.5 * (a - b + c - d);
        out[2 * band + o] = 0.5 * (a + b - c - d);
        out[3 * band + o] = 0.5 * (a - b - c + d);
      }
}

void haar_synthesis(const double* in, std::size_t planes, std::size_t h, std::size_t w, double* x) {
  const std::size_t oh = h / 2, ow = w / 2, band = planes * oh * ow;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t o = (p * oh + i) * ow + j;
        const double ll = in[o], hl = in[band + o], lh = in[2 * band + o], hh = in[3 * band + o];
        double* top = x + (p * h + 2 * i) * w + 2 * j;
        top[0] = 0.5 * (ll + hl + lh + hh);
        top[1] = 0.5 * (ll - hl + lh - hh);
        top[w] = 0.5 * (ll + hl - lh - hh);
        top[w + 1] = 0.5 * (ll - hl - lh + hh);
      }
}

// [B,C,H,W] (even) -> [4,B,C,H/2,W/2]
Tensor analysis_op(const Tensor& x) {
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const bool track = detail::should_record({&x});
  Buffer out(x.size());
  haar_analysis(x.data().data(), b * c, h, w, out.data());
  Tensor y = detail::make_result({4, b, c, h / 2, w / 2}, std::move(out), track);
  if (track) {
    detail::record("haar_analysis", y, [x, b, c, h, w, yi = y.impl()] {
      auto gx = detail::grad_of(x);
      Buffer tmp(gx.size());
      haar_synthesis(yi->grad.data(), b * c, h, w, tmp.data());
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += tmp[i];
    });
  }
  return y;
}

// [4,B,C,h,w] -> [B,C,2h,2w]
Tensor synthesis_op(const Tensor& s) {
  const std::size_t b = s.dim(1), c = s.dim(2), h = 2 * s.dim(3), w = 2 * s.dim(4);
  const bool track = detail::should_record({&s});
  Buffer out(s.size());
  haar_synthesis(s.data().data(), b * c, h, w, out.data());
  Tensor y = detail::make_result({b, c, h, w}, std::move(out), track);
  if (track) {
    detail::record("haar_synthesis", y, [s, b, c, h, w, yi = y.impl()] {
      auto gs = detail::grad_of(s);
      Buffer tmp(gs.size());
      haar_analysis(yi->grad.data(), b * c, h, w, tmp.data());
      for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += tmp[i];
    });
  }
  return y;
}

void require_same(const Tensor& ref, const Tensor& t, const char* what) {
  if (t.shape() != ref.shape()) {
    throw DimensionError(std::string("subband ") + what + " has shape " + to_string(t.shape()) +
                         ", expected " + to_string(ref.shape()));
  }
}

}  // namespace

Subbands dwt2(const Tensor& x, Family) {
  if (x.rank() != 4) throw DimensionError("dwt2: expected [B,C,H,W], got " + to_string(x.shape()));
  const std::size_t h = x.dim(2), w = x.dim(3);
  Tensor padded = ops::pad_reflect(x, h % 2, w % 2);
  Tensor stacked = analysis_op(padded);
  const Shape band{x.dim(0), x.dim(1), (h + 1) / 2, (w + 1) / 2};
  auto take = [&](std::size_t i) { return ops::reshape(ops::slice(stacked, 0, i, 1), band); };
  return Subbands{take(0), take(1), take(2), take(3), h, w};
}

Tensor idwt2(const Subbands& s, Family) {
  require_same(s.ll, s.hl, "HL");
  require_same(s.ll, s.lh, "LH");
  require_same(s.ll, s.hh, "HH");
  Shape one = s.ll.shape();
  one.insert(one.begin(), 1);
  Tensor stacked = ops::concat({ops::reshape(s.ll, one), ops::reshape(s.hl, one),
                                ops::reshape(s.lh, one), ops::reshape(s.hh, one)},
                               0);
  Tensor full = synthesis_op(stacked);
  const std::size_t h = s.height ? s.height : full.dim(2);
  const std::size_t w = s.width ? s.width : full.dim(3);
  if (h > full.dim(2) || w > full.dim(3) || h + 1 < full.dim(2) || w + 1 < full.dim(3)) {
    throw DimensionError("idwt2: recorded extent " + std::to_string(h) + "x" + std::to_string(w) +
                         " inconsistent with subbands " + to_string(s.ll.shape()));
  }
  if (h != full.dim(2)) full = ops::slice(full, 2, 0, h);
  if (w != full.dim(3)) full = ops::slice(full, 3, 0, w);
  return full;
}

WDownParams WDownParams::init(std::size_t in_channels, std::size_t out_channels, Rng& rng) {
  WDownParams p;
  p.norm_in = GroupNormParams::init(in_channels);
  p.conv_in = ConvParams::init(in_channels, in_channels, 3, rng);
  p.conv_skip = ConvParams::init(in_channels, out_channels, 1, rng);
  p.norm_mid = GroupNormParams::init(in_channels);
  p.conv_out = ConvParams::init(in_channels, out_channels, 3, rng);
  return p;
}

void WDownParams::collect(ParamList& out, const std::string& prefix) const {
  if (norm_in) norm_in->collect(out, prefix + "norm_in.");
  conv_in.collect(out, prefix + "conv_in.");
  conv_skip.collect(out, prefix + "conv_skip.");
  if (norm_mid) norm_mid->collect(out, prefix + "norm_mid.");
  conv_out.collect(out, prefix + "conv_out.");
}

WDownResult wdown(const Tensor& x, const WDownParams& p) {
  if (x.rank() != 4 || x.dim(1) != p.conv_in.weight.dim(1) * p.conv_in.groups ||
      x.dim(1) != p.conv_skip.weight.dim(1) * p.conv_skip.groups) {
    throw ConfigError("wdown: input " + to_string(x.shape()) +
                      " does not match the configured input channels");
  }
  if (p.conv_out.out_channels() != p.conv_skip.out_channels()) {
    throw ConfigError("wdown: main and skip paths produce different channel counts");
  }
  Tensor main_in = p.norm_in ? (*p.norm_in)(x) : x;
  Subbands main = dwt2(p.conv_in(main_in));
  Tensor ll = p.norm_mid ? (*p.norm_mid)(main.ll) : main.ll;
  Tensor main_out = p.conv_out(ll);
  Tensor skip = dwt2(p.conv_skip(x)).ll;
  return WDownResult{ops::add(main_out, skip), highs(main), main.height, main.width};
}

WUpParams WUpParams::init(std::size_t in_channels, std::size_t out_channels, Rng& rng) {
  WUpParams p;
  p.norm_in = GroupNormParams::init(in_channels);
  p.conv_in = ConvParams::init(in_channels, out_channels, 3, rng);
  p.conv_skip = ConvParams::init(in_channels, out_channels, 1, rng);
  p.norm_mid = GroupNormParams::init(out_channels);
  p.conv_out = ConvParams::init(out_channels, out_channels, 3, rng);
  return p;
}

void WUpParams::collect(ParamList& out, const std::string& prefix) const {
  if (norm_in) norm_in->collect(out, prefix + "norm_in.");
  conv_in.collect(out, prefix + "conv_in.");
  conv_skip.collect(out, prefix + "conv_skip.");
  if (norm_mid) norm_mid->collect(out, prefix + "norm_mid.");
  conv_out.collect(out, prefix + "conv_out.");
}

Tensor wup(const Tensor& x, const std::optional<HighFreq>& high, const WUpParams& p,
           std::size_t height, std::size_t width) {
  if (!high) throw ContractError("wup: missing high-frequency subbands from the paired wdown");
  Tensor main_in = p.norm_in ? (*p.norm_in)(x) : x;
  Tensor low = p.conv_in(main_in);
  require_same(high->hl, low, "LL (main path)");
  Tensor up = idwt2(Subbands{low, high->hl, high->lh, high->hh, height, width});
  Tensor main_out = p.conv_out(p.norm_mid ? (*p.norm_mid)(up) : up);
  Tensor skip_low = p.conv_skip(x);
  require_same(high->hl, skip_low, "LL (skip path)");
  Tensor skip = idwt2(Subbands{skip_low, high->hl, high->lh, high->hh, height, width});
  return ops::add(main_out, skip);
}

DecomposeParams DecomposeParams::init(std::size_t in_channels, std::size_t out_channels, Rng& rng) {
  return {ConvParams::init(4 * in_channels, out_channels, 3, rng)};
}

void DecomposeParams::collect(ParamList& out, const std::string& prefix) const {
  fuse.collect(out, prefix + "fuse.");
}

Tensor wavelet_decompose(const Tensor& x, const DecomposeParams& p) {
  Subbands s = dwt2(x);
  return p.fuse(ops::concat({s.ll, s.hl, s.lh, s.hh}, 1));
}

Tensor wamss_forward(const Tensor& x, const std::function<Tensor(const Tensor&)>& block) {
  Subbands s = dwt2(x);
  s.ll = block(s.ll);
  return idwt2(s);
}

}  // namespace mambamir::wavelet
