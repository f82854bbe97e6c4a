#include "mambamir/objectives.hpp"

#include <cmath>

#include "mambamir/acquisition.hpp"
#include "mambamir/ops.hpp"

namespace mambamir::obj {

void LossWeights::validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0 || eta < 0) throw ConfigError("loss weights must be >= 0");
  if (!(epsilon > 0)) throw ConfigError("Charbonnier epsilon must be > 0");
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

Tensor charbonnier(const Tensor& diff, double epsilon) {
  return ops::sqrt(ops::add_scalar(ops::sum(ops::square(diff)), epsilon * epsilon));
}

Tensor as_complex(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("charbonnier_freq: expected [B,C,H,W]");
  if (x.dim(1) == 2) return x;
  if (x.dim(1) == 1) return acq::to_complex(x);
  throw DimensionError("charbonnier_freq: expected 1 or 2 channels, got " + std::to_string(x.dim(1)));
}

}  // namespace

Tensor charbonnier_img(const Tensor& pred, const Tensor& target, double epsilon) {
  require_same_shape(pred, target, "charbonnier_img");
  return charbonnier(ops::sub(target, pred), epsilon);
}

Tensor charbonnier_freq(const Tensor& pred, const Tensor& target, double epsilon) {
  require_same_shape(pred, target, "charbonnier_freq");
  // The DFT is linear, so transforming the difference equals differencing spectra.
  return charbonnier(acq::dft2(as_complex(ops::sub(target, pred))), epsilon);
}

FeatureExtractor::FeatureExtractor(std::size_t in_channels, std::uint64_t seed)
    : in_channels_(in_channels) {
  Rng rng(seed);
  const std::size_t widths[] = {8, 16, 16, 32};
  std::size_t in = in_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    ConvParams p = ConvParams::init(in, widths[i], 3, rng);
    p.weight.set_requires_grad(false);
    p.bias.set_requires_grad(false);
    layers_.push_back(p);
    strides_.push_back(i % 2 ? 2 : 1);
    in = widths[i];
  }
}

std::vector<Tensor> FeatureExtractor::features(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != in_channels_) {
    throw DimensionError("perceptual_proxy: expected [B," + std::to_string(in_channels_) +
                         ",H,W], got " + to_string(x.shape()));
  }
  std::vector<Tensor> out;
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = ops::silu(ops::conv2d(h, layers_[i].weight, layers_[i].bias, strides_[i], 1));
    out.push_back(h);
  }
  return out;
}

Tensor perceptual_proxy(const Tensor& pred, const Tensor& target, const FeatureExtractor& fx) {
  require_same_shape(pred, target, "perceptual_proxy");
  auto fp = fx.features(pred);
  auto ft = fx.features(target);
  Tensor total = ops::mean(ops::abs(ops::sub(fp[0], ft[0])));
  for (std::size_t i = 1; i < fp.size(); ++i)
    total = ops::add(total, ops::mean(ops::abs(ops::sub(fp[i], ft[i]))));
  return total;
}

LossTerms total_loss(const Tensor& pred, const Tensor& target, const LossWeights& w,
                     const FeatureExtractor* fx) {
  w.validate();
  LossTerms t;
  Tensor img = charbonnier_img(pred, target, w.epsilon);
  t.img = img.item();
  t.total = ops::scale(img, w.alpha);
  if (w.beta > 0) {
    Tensor freq = charbonnier_freq(pred, target, w.epsilon);
    t.freq = freq.item();
    t.total = ops::add(t.total, ops::scale(freq, w.beta));
  }
  if (w.gamma > 0) {
    if (!fx) throw ContractError("total_loss: perceptual weight set without a feature extractor");
    Tensor perc = perceptual_proxy(pred, target, *fx);
    t.perc = perc.item();
    t.total = ops::add(t.total, ops::scale(perc, w.gamma));
  }
  return t;
}

double psnr(const Tensor& pred, const Tensor& target, double data_range) {
  if (!(data_range > 0)) throw ConfigError("psnr: data range must be positive");
  require_same_shape(pred, target, "psnr");
  auto a = pred.data(), b = target.data();
  double sse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sse += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = sse / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / mse));
}

double ssim(const Tensor& pred, const Tensor& target, double data_range) {
  if (!(data_range > 0)) throw ConfigError("ssim: data range must be positive");
  require_same_shape(pred, target, "ssim");
  constexpr std::size_t kWin = 11;
  constexpr double kSigma = 1.5;
  if (pred.rank() < 2) throw DimensionError("ssim: expected [...,H,W]");
  const std::size_t h = pred.dim(pred.rank() - 2), w = pred.dim(pred.rank() - 1);
  if (h < kWin || w < kWin) throw DimensionError("ssim: images must be at least 11x11");

  double win[kWin];
  double wsum = 0.0;
  for (std::size_t i = 0; i < kWin; ++i) {
    const double d = static_cast<double>(i) - 5.0;
    win[i] = std::exp(-d * d / (2 * kSigma * kSigma));
    wsum += win[i];
  }
  for (double& v : win) v /= wsum;

  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);
  const std::size_t oh = h - kWin + 1, ow = w - kWin + 1, planes = pred.size() / (h * w);

  // Separable filtering: rows then columns, valid region only.
  auto filter = [&](const Buffer& img) {
    Buffer tmp(h * ow), out(oh * ow);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < ow; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < kWin; ++k) s += win[k] * img[r * w + c + k];
        tmp[r * ow + c] = s;
      }
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t c = 0; c < ow; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < kWin; ++k) s += win[k] * tmp[(r + k) * ow + c];
        out[r * ow + c] = s;
      }
    return out;
  };

  auto pa = pred.data(), pb = target.data();
  double total = 0.0;
  for (std::size_t p = 0; p < planes; ++p) {
    Buffer x(pa.begin() + p * h * w, pa.begin() + (p + 1) * h * w);
    Buffer y(pb.begin() + p * h * w, pb.begin() + (p + 1) * h * w);
    Buffer xx(h * w), yy(h * w), xy(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    auto mx = filter(x), my = filter(y), sxx = filter(xx), syy = filter(yy), sxy = filter(xy);
    double acc = 0.0;
    for (std::size_t i = 0; i < oh * ow; ++i) {
      const double vx = sxx[i] - mx[i] * mx[i];
      const double vy = syy[i] - my[i] * my[i];
      const double cov = sxy[i] - mx[i] * my[i];
      acc += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += acc / static_cast<double>(oh * ow);
  }
  return total / static_cast<double>(planes);
}

}  // namespace mambamir::obj
