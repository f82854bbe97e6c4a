#include "mambamir/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace mambamir::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                         " vs " + to_string(b.shape()));
  }
}

// Unary elementwise op with derivative expressed through input x and output y.
template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
  const bool track = detail::should_record({&x});
  auto in = x.data();
  Buffer out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  Tensor y = detail::make_result(x.shape(), std::move(out), track);
  if (track) {
    detail::record(name, y, [x, yi = y.impl(), deriv] {
      auto gx = detail::grad_of(x);
      auto xv = x.data();
      const auto& gy = yi->grad;
      const auto& yv = yi->data;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(xv[i], yv[i]);
    });
  }
  return y;
}

double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

double softplus_scalar(double v) {
  return v > 30.0 ? v : std::log1p(std::exp(v));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool track = detail::should_record({&a, &b});
  Buffer out(a.size());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  Tensor y = detail::make_result(a.shape(), std::move(out), track);
  if (track) {
    detail::record("add", y, [a, b, yi = y.impl()] {
      const auto& gy = yi->grad;
      auto ga = detail::grad_of(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
      auto gb = detail::grad_of(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i];
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const bool track = detail::should_record({&a, &b});
  Buffer out(a.size());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  Tensor y = detail::make_result(a.shape(), std::move(out), track);
  if (track) {
    detail::record("sub", y, [a, b, yi = y.impl()] {
      const auto& gy = yi->grad;
      auto ga = detail::grad_of(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
      auto gb = detail::grad_of(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const bool track = detail::should_record({&a, &b});
  Buffer out(a.size());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Tensor y = detail::make_result(a.shape(), std::move(out), track);
  if (track) {
    detail::record("mul", y, [a, b, yi = y.impl()] {
      const auto& gy = yi->grad;
      auto av = a.data();
      auto bv = b.data();
      auto ga = detail::grad_of(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bv[i];
      auto gb = detail::grad_of(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * av[i];
    });
  }
  return y;
}

Tensor scale(const Tensor& x, double s) {
  return unary("scale", x, [s](double v) { return v * s; },
               [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary("add_scalar", x, [s](double v) { return v + s; },
               [](double, double) { return 1.0; });
}

Tensor square(const Tensor& x) {
  return unary("square", x, [](double v) { return v * v; },
               [](double v, double) { return 2.0 * v; });
}

Tensor sqrt(const Tensor& x) {
  return unary("sqrt", x, [](double v) { return std::sqrt(v); },
               [](double, double y) { return 0.5 / y; });
}

Tensor abs(const Tensor& x) {
  return unary("abs", x, [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(v); },
               [](double, double y) { return y; });
}

Tensor silu(const Tensor& x) {
  return unary("silu", x, [](double v) { return v * sigmoid_scalar(v); },
               [](double v, double) {
                 const double s = sigmoid_scalar(v);
                 return s * (1.0 + v * (1.0 - s));
               });
}

Tensor softplus(const Tensor& x) {
  return unary("softplus", x, softplus_scalar,
               [](double v, double) { return sigmoid_scalar(v); });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, sigmoid_scalar,
               [](double, double y) { return y * (1.0 - y); });
}

Tensor add_lastdim(const Tensor& x, const Tensor& bias) {
  const std::size_t c = bias.size();
  if (x.rank() == 0 || x.shape().back() != c) {
    throw DimensionError("add_lastdim: bias " + to_string(bias.shape()) +
                         " does not match " + to_string(x.shape()));
  }
  const bool track = detail::should_record({&x, &bias});
  Buffer out(x.data().begin(), x.data().end());
  auto bv = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % c];
  Tensor y = detail::make_result(x.shape(), std::move(out), track);
  if (track) {
    detail::record("add_lastdim", y, [x, bias, c, yi = y.impl()] {
      const auto& gy = yi->grad;
      auto gx = detail::grad_of(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
      auto gb = detail::grad_of(bias);
      if (!gb.empty()) {
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i % c] += gy[i];
      }
    });
  }
  return y;
}

Tensor add_channel(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 2 || x.dim(1) != bias.size()) {
    throw DimensionError("add_channel: bias " + to_string(bias.shape()) +
                         " does not match " + to_string(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t c = x.dim(1);
  const std::size_t inner = x.size() / (batch * c);
  const bool track = detail::should_record({&x, &bias});
  Buffer out(x.data().begin(), x.data().end());
  auto bv = bias.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = out.data() + (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += bv[ch];
    }
  Tensor y = detail::make_result(x.shape(), std::move(out), track);
  if (track) {
    detail::record("add_channel", y, [x, bias, batch, c, inner, yi = y.impl()] {
      const auto& gy = yi->grad;
      auto gx = detail::grad_of(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
      auto gb = detail::grad_of(bias);
      if (gb.empty()) return;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double* p = gy.data() + (b * c + ch) * inner;
          double s = 0;
          for (std::size_t i = 0; i < inner; ++i) s += p[i];
          gb[ch] += s;
        }
    });
  }
  return y;
}

Tensor sum(const Tensor& x) {
  const bool track = detail::should_record({&x});
  double s = 0;
  for (double v : x.data()) s += v;
  Tensor y = detail::make_result(Shape{1}, {s}, track);
  if (track) {
    detail::record("sum", y, [x, yi = y.impl()] {
      const double g = yi->grad[0];
      for (auto& v : detail::grad_of(x)) v += g;
    });
  }
  return y;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool track = detail::should_record({&a, &b});
  Buffer out(m * n);
  MapMat(out.data(), m, n).noalias() =
      ConstMapMat(a.data().data(), m, k) * ConstMapMat(b.data().data(), k, n);
  Tensor y = detail::make_result(Shape{m, n}, std::move(out), track);
  if (track) {
    detail::record("matmul", y, [a, b, m, k, n, yi = y.impl()] {
      ConstMapMat gy(yi->grad.data(), m, n);
      auto ga = detail::grad_of(a);
      if (!ga.empty()) {
        MapMat(ga.data(), m, k).noalias() += gy * ConstMapMat(b.data().data(), k, n).transpose();
      }
      auto gb = detail::grad_of(b);
      if (!gb.empty()) {
        MapMat(gb.data(), k, n).noalias() += ConstMapMat(a.data().data(), m, k).transpose() * gy;
      }
    });
  }
  return y;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw DimensionError("bmm: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if ((transpose_b ? b.dim(2) : b.dim(1)) != k) {
    throw DimensionError("bmm: inner dimensions differ for " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const bool track = detail::should_record({&a, &b});
  Buffer out(g * m * n);
  for (std::size_t i = 0; i < g; ++i) {
    ConstMapMat am(a.data().data() + i * m * k, m, k);
    MapMat ym(out.data() + i * m * n, m, n);
    if (transpose_b) {
      ym.noalias() = am * ConstMapMat(b.data().data() + i * n * k, n, k).transpose();
    } else {
      ym.noalias() = am * ConstMapMat(b.data().data() + i * k * n, k, n);
    }
  }
  Tensor y = detail::make_result(Shape{g, m, n}, std::move(out), track);
  if (track) {
    detail::record("bmm", y, [a, b, g, m, k, n, transpose_b, yi = y.impl()] {
      auto ga = detail::grad_of(a);
      auto gb = detail::grad_of(b);
      for (std::size_t i = 0; i < g; ++i) {
        ConstMapMat gy(yi->grad.data() + i * m * n, m, n);
        ConstMapMat am(a.data().data() + i * m * k, m, k);
        if (transpose_b) {
          ConstMapMat bm(b.data().data() + i * n * k, n, k);
          if (!ga.empty()) MapMat(ga.data() + i * m * k, m, k).noalias() += gy * bm;
          if (!gb.empty()) MapMat(gb.data() + i * n * k, n, k).noalias() += gy.transpose() * am;
        } else {
          ConstMapMat bm(b.data().data() + i * k * n, k, n);
          if (!ga.empty()) MapMat(ga.data() + i * m * k, m, k).noalias() += gy * bm.transpose();
          if (!gb.empty()) MapMat(gb.data() + i * k * n, k, n).noalias() += am.transpose() * gy;
        }
      }
    });
  }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.rank() == 0 || x.shape().back() != weight.dim(0)) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(weight.shape()));
  }
  if (bias.defined() && bias.size() != weight.dim(1)) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " incompatible with weight " +
                         to_string(weight.shape()));
  }
  const std::size_t in = weight.dim(0), out_f = weight.dim(1);
  const std::size_t rows = x.size() / in;
  const bool track = detail::should_record({&x, &weight, &bias});
  Buffer out(rows * out_f);
  MapMat ym(out.data(), rows, out_f);
  ym.noalias() = ConstMapMat(x.data().data(), rows, in) * ConstMapMat(weight.data().data(), in, out_f);
  if (bias.defined()) {
    ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), out_f);
  }
  Shape shape = x.shape();
  shape.back() = out_f;
  Tensor y = detail::make_result(std::move(shape), std::move(out), track);
  if (track) {
    detail::record("linear", y, [x, weight, bias, rows, in, out_f, yi = y.impl()] {
      ConstMapMat gy(yi->grad.data(), rows, out_f);
      auto gx = detail::grad_of(x);
      if (!gx.empty()) {
        MapMat(gx.data(), rows, in).noalias() +=
            gy * ConstMapMat(weight.data().data(), in, out_f).transpose();
      }
      auto gw = detail::grad_of(weight);
      if (!gw.empty()) {
        MapMat(gw.data(), in, out_f).noalias() +=
            ConstMapMat(x.data().data(), rows, in).transpose() * gy;
      }
      auto gb = detail::grad_of(bias);
      if (!gb.empty()) {
        Eigen::Map<Eigen::RowVectorXd>(gb.data(), out_f) += gy.colwise().sum();
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, groups, oh, ow;
  std::size_t cin_g() const { return cin / groups; }
  std::size_t cout_g() const { return cout / groups; }
};

// Fills cols [cin_g*kh*kw, oh*ow] for one group of one image.
void im2col(const double* img, const ConvGeom& g, double* cols) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin_g(); ++c) {
    const double* src = img + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* dst = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            dst[oy * g.ow + ox] =
                (iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w))
                    ? src[iy * g.w + ix]
                    : 0.0;
          }
        }
      }
  }
}

void col2im(const double* cols, const ConvGeom& g, double* img) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin_g(); ++c) {
    double* dst = img + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* src = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            dst[iy * g.w + ix] += src[oy * g.ow + ox];
          }
        }
      }
  }
}

bool is_pointwise(const ConvGeom& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
}

// Depthwise (groups == cin == cout) direct kernels.
void depthwise_forward(const ConvGeom& g, const double* x, const double* w, double* y) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t c = 0; c < g.cin; ++c) {
      const double* src = x + (b * g.cin + c) * g.h * g.w;
      const double* kern = w + c * g.kh * g.kw;
      double* dst = y + (b * g.cout + c) * g.oh * g.ow;
      for (std::size_t oy = 0; oy < g.oh; ++oy)
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
          double acc = 0;
          for (std::size_t ki = 0; ki < g.kh; ++ki) {
            const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
              const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
              acc += kern[ki * g.kw + kj] * src[iy * g.w + ix];
            }
          }
          dst[oy * g.ow + ox] = acc;
        }
    }
}

void depthwise_backward(const ConvGeom& g, const double* x, const double* w, const double* gy,
                        double* gx, double* gw) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t c = 0; c < g.cin; ++c) {
      const double* src = x + (b * g.cin + c) * g.h * g.w;
      const double* kern = w + c * g.kh * g.kw;
      const double* gout = gy + (b * g.cout + c) * g.oh * g.ow;
      double* gsrc = gx ? gx + (b * g.cin + c) * g.h * g.w : nullptr;
      double* gkern = gw ? gw + c * g.kh * g.kw : nullptr;
      for (std::size_t oy = 0; oy < g.oh; ++oy)
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
          const double go = gout[oy * g.ow + ox];
          for (std::size_t ki = 0; ki < g.kh; ++ki) {
            const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
              const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
              if (gsrc) gsrc[iy * g.w + ix] += go * kern[ki * g.kw + kj];
              if (gkern) gkern[ki * g.kw + kj] += go * src[iy * g.w + ix];
            }
          }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t pad, std::size_t groups) {
  if (x.rank() != 4 || weight.rank() != 4) {
    throw DimensionError("conv2d: expected 4-D input and weight, got " + to_string(x.shape()) +
                         " and " + to_string(weight.shape()));
  }
  if (groups == 0 || stride == 0) throw ConfigError("conv2d: groups and stride must be positive");
  ConvGeom g{};
  g.batch = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = stride;
  g.pad = pad;
  g.groups = groups;
  if (g.cin % groups != 0 || g.cout % groups != 0 || weight.dim(1) * groups != g.cin) {
    throw DimensionError("conv2d: channel mismatch, input " + to_string(x.shape()) +
                         " weight " + to_string(weight.shape()) + " groups " +
                         std::to_string(groups));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) {
    throw ConfigError("conv2d: kernel extents must be odd, got " + to_string(weight.shape()));
  }
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  if (bias.defined() && bias.size() != g.cout) {
    throw DimensionError("conv2d: bias " + to_string(bias.shape()) + " does not match " +
                         std::to_string(g.cout) + " output channels");
  }
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;

  const bool track = detail::should_record({&x, &weight, &bias});
  const bool depthwise = groups == g.cin && groups == g.cout;
  const std::size_t plane = g.oh * g.ow;
  const std::size_t krows = g.cin_g() * g.kh * g.kw;
  Buffer out(g.batch * g.cout * plane);

  if (depthwise) {
    depthwise_forward(g, x.data().data(), weight.data().data(), out.data());
  } else {
    Buffer cols(is_pointwise(g) ? 0 : krows * plane);
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t gr = 0; gr < groups; ++gr) {
        const double* img = x.data().data() + (b * g.cin + gr * g.cin_g()) * g.h * g.w;
        const double* colp = img;
        if (!is_pointwise(g)) {
          im2col(img, g, cols.data());
          colp = cols.data();
        }
        MapMat(out.data() + (b * g.cout + gr * g.cout_g()) * plane, g.cout_g(), plane).noalias() =
            ConstMapMat(weight.data().data() + gr * g.cout_g() * krows, g.cout_g(), krows) *
            ConstMapMat(colp, krows, plane);
      }
  }
  if (bias.defined()) {
    auto bv = bias.data();
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t c = 0; c < g.cout; ++c) {
        double* p = out.data() + (b * g.cout + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += bv[c];
      }
  }

  Tensor y = detail::make_result(Shape{g.batch, g.cout, g.oh, g.ow}, std::move(out), track);
  if (track) {
    detail::record("conv2d", y, [x, weight, bias, g, depthwise, yi = y.impl()] {
      const double* gy = yi->grad.data();
      const std::size_t plane = g.oh * g.ow;
      const std::size_t krows = g.cin_g() * g.kh * g.kw;
      auto gx = detail::grad_of(x);
      auto gw = detail::grad_of(weight);
      auto gb = detail::grad_of(bias);
      if (!gb.empty()) {
        for (std::size_t b = 0; b < g.batch; ++b)
          for (std::size_t c = 0; c < g.cout; ++c) {
            const double* p = gy + (b * g.cout + c) * plane;
            double s = 0;
            for (std::size_t i = 0; i < plane; ++i) s += p[i];
            gb[c] += s;
          }
      }
      if (depthwise) {
        depthwise_backward(g, x.data().data(), weight.data().data(), gy,
                           gx.empty() ? nullptr : gx.data(), gw.empty() ? nullptr : gw.data());
        return;
      }
      const bool pw = is_pointwise(g);
      Buffer cols(pw ? 0 : krows * plane);
      Buffer gcols(gx.empty() || pw ? 0 : krows * plane);
      for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t gr = 0; gr < g.groups; ++gr) {
          const double* img = x.data().data() + (b * g.cin + gr * g.cin_g()) * g.h * g.w;
          ConstMapMat gym(gy + (b * g.cout + gr * g.cout_g()) * plane, g.cout_g(), plane);
          ConstMapMat wm(weight.data().data() + gr * g.cout_g() * krows, g.cout_g(), krows);
          if (!gw.empty()) {
            const double* colp = img;
            if (!pw) {
              im2col(img, g, cols.data());
              colp = cols.data();
            }
            MapMat(gw.data() + gr * g.cout_g() * krows, g.cout_g(), krows).noalias() +=
                gym * ConstMapMat(colp, krows, plane).transpose();
          }
          if (!gx.empty()) {
            double* gimg = gx.data() + (b * g.cin + gr * g.cin_g()) * g.h * g.w;
            if (pw) {
              MapMat(gimg, krows, plane).noalias() += wm.transpose() * gym;
            } else {
              MapMat(gcols.data(), krows, plane).noalias() = wm.transpose() * gym;
              col2im(gcols.data(), g, gimg);
            }
          }
        }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Normalization

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t c = x.shape().back();
  if (gain.size() != c || bias.size() != c) {
    throw DimensionError("layer_norm: affine parameters do not match last axis of " +
                         to_string(x.shape()));
  }
  const std::size_t rows = x.size() / c;
  const bool track = detail::should_record({&x, &gain, &bias});
  Buffer out(x.size());
  Buffer xhat(x.size());
  Buffer rstd(rows);
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = xv.data() + r * c;
    double mu = 0;
    for (std::size_t i = 0; i < c; ++i) mu += p[i];
    mu /= static_cast<double>(c);
    double var = 0;
    for (std::size_t i = 0; i < c; ++i) var += (p[i] - mu) * (p[i] - mu);
    var /= static_cast<double>(c);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < c; ++i) {
      const double h = (p[i] - mu) * rstd[r];
      xhat[r * c + i] = h;
      out[r * c + i] = h * gv[i] + bv[i];
    }
  }
  Tensor y = detail::make_result(x.shape(), std::move(out), track);
  if (track) {
    detail::record("layer_norm", y,
                   [x, gain, bias, rows, c, xhat = std::move(xhat), rstd = std::move(rstd),
                    yi = y.impl()] {
                     const auto& gy = yi->grad;
                     auto gx = detail::grad_of(x);
                     auto gg = detail::grad_of(gain);
                     auto gb = detail::grad_of(bias);
                     auto gv = gain.data();
                     Buffer dxhat(c);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double m1 = 0, m2 = 0;
                       for (std::size_t i = 0; i < c; ++i) {
                         const double g = gy[r * c + i];
                         const double h = xhat[r * c + i];
                         if (!gg.empty()) gg[i] += g * h;
                         if (!gb.empty()) gb[i] += g;
                         dxhat[i] = g * gv[i];
                         m1 += dxhat[i];
                         m2 += dxhat[i] * h;
                       }
                       if (gx.empty()) continue;
                       m1 /= static_cast<double>(c);
                       m2 /= static_cast<double>(c);
                       for (std::size_t i = 0; i < c; ++i) {
                         gx[r * c + i] += rstd[r] * (dxhat[i] - m1 - xhat[r * c + i] * m2);
                       }
                     }
                   });
  }
  return y;
}

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gain, const Tensor& bias,
                  double eps) {
  if (x.rank() != 4) throw DimensionError("group_norm: expected [B,C,H,W], got " + to_string(x.shape()));
  const std::size_t batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (groups == 0 || c % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  if (gain.size() != c || bias.size() != c) {
    throw DimensionError("group_norm: affine parameters must have " + std::to_string(c) + " entries");
  }
  if (!(eps > 0)) throw ConfigError("group_norm: eps must be positive");
  const std::size_t cg = c / groups;
  const std::size_t block = cg * plane;
  const bool track = detail::should_record({&x, &gain, &bias});
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  Buffer out(x.size()), xhat(x.size()), rstd(batch * groups);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gr = 0; gr < groups; ++gr) {
      const std::size_t base = (b * c + gr * cg) * plane;
      double mu = 0;
      for (std::size_t i = 0; i < block; ++i) mu += xv[base + i];
      mu /= static_cast<double>(block);
      double var = 0;
      for (std::size_t i = 0; i < block; ++i) var += (xv[base + i] - mu) * (xv[base + i] - mu);
      var /= static_cast<double>(block);
      const double rs = 1.0 / std::sqrt(var + eps);
      rstd[b * groups + gr] = rs;
      for (std::size_t i = 0; i < block; ++i) {
        const std::size_t ch = gr * cg + i / plane;
        const double h = (xv[base + i] - mu) * rs;
        xhat[base + i] = h;
        out[base + i] = h * gv[ch] + bv[ch];
      }
    }
  Tensor y = detail::make_result(x.shape(), std::move(out), track);
  if (track) {
    detail::record("group_norm", y,
                   [x, gain, bias, batch, c, groups, cg, plane, block, xhat = std::move(xhat),
                    rstd = std::move(rstd), yi = y.impl()] {
                     const auto& gy = yi->grad;
                     auto gx = detail::grad_of(x);
                     auto gg = detail::grad_of(gain);
                     auto gb = detail::grad_of(bias);
                     auto gv = gain.data();
                     Buffer dxhat(block);
                     for (std::size_t b = 0; b < batch; ++b)
                       for (std::size_t gr = 0; gr < groups; ++gr) {
                         const std::size_t base = (b * c + gr * cg) * plane;
                         double m1 = 0, m2 = 0;
                         for (std::size_t i = 0; i < block; ++i) {
                           const std::size_t ch = gr * cg + i / plane;
                           const double g = gy[base + i];
                           const double h = xhat[base + i];
                           if (!gg.empty()) gg[ch] += g * h;
                           if (!gb.empty()) gb[ch] += g;
                           dxhat[i] = g * gv[ch];
                           m1 += dxhat[i];
                           m2 += dxhat[i] * h;
                         }
                         if (gx.empty()) continue;
                         m1 /= static_cast<double>(block);
                         m2 /= static_cast<double>(block);
                         const double rs = rstd[b * groups + gr];
                         for (std::size_t i = 0; i < block; ++i) {
                           gx[base + i] += rs * (dxhat[i] - m1 - xhat[base + i] * m2);
                         }
                       }
                   });
  }
  return y;
}

Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  const bool track = detail::should_record({&x});
  auto xv = x.data();
  Buffer out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = xv.data() + r * c;
    double* q = out.data() + r * c;
    const double mx = *std::max_element(p, p + c);
    double s = 0;
    for (std::size_t i = 0; i < c; ++i) {
      q[i] = std::exp(p[i] - mx);
      s += q[i];
    }
    for (std::size_t i = 0; i < c; ++i) q[i] /= s;
  }
  Tensor y = detail::make_result(x.shape(), std::move(out), track);
  if (track) {
    detail::record("softmax", y, [x, rows, c, yi = y.impl()] {
      const auto& gy = yi->grad;
      const auto& yv = yi->data;
      auto gx = detail::grad_of(x);
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0;
        for (std::size_t i = 0; i < c; ++i) dot += gy[r * c + i] * yv[r * c + i];
        for (std::size_t i = 0; i < c; ++i) {
          gx[r * c + i] += yv[r * c + i] * (gy[r * c + i] - dot);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Shape manipulation

namespace {

Tensor gather_named(const char* name, const Tensor& x, Shape shape,
                    std::vector<std::size_t> index) {
  const bool track = detail::should_record({&x});
  auto xv = x.data();
  Buffer out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = xv[index[i]];
  Tensor y = detail::make_result(std::move(shape), std::move(out), track);
  if (track) {
    detail::record(name, y, [x, index = std::move(index), yi = y.impl()] {
      const auto& gy = yi->grad;
      auto gx = detail::grad_of(x);
      for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += gy[i];
    });
  }
  return y;
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace

Tensor gather(const Tensor& x, Shape shape, std::vector<std::size_t> index) {
  if (numel(shape) != index.size()) {
    throw DimensionError("gather: index count does not match " + to_string(shape));
  }
  for (auto i : index) {
    if (i >= x.size()) throw DimensionError("gather: index out of range for " + to_string(x.shape()));
  }
  return gather_named("gather", x, std::move(shape), std::move(index));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  const bool track = detail::should_record({&x});
  Tensor y = detail::make_result(std::move(shape),
                                 Buffer(x.data().begin(), x.data().end()), track);
  if (track) {
    detail::record("reshape", y, [x, yi = y.impl()] {
      const auto& gy = yi->grad;
      auto gx = detail::grad_of(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    });
  }
  return y;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const Shape& in = x.shape();
  if (order.size() != in.size()) throw DimensionError("permute: order rank mismatch");
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < order.size(); ++i) out_shape[i] = in.at(order[i]);
  const auto in_strides = strides_of(in);
  std::vector<std::size_t> src_stride(in.size());
  for (std::size_t i = 0; i < order.size(); ++i) src_stride[i] = in_strides[order[i]];
  std::vector<std::size_t> index(x.size());
  std::vector<std::size_t> counter(in.size(), 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    index[i] = offset;
    for (std::size_t ax = out_shape.size(); ax-- > 0;) {
      ++counter[ax];
      offset += src_stride[ax];
      if (counter[ax] < out_shape[ax]) break;
      offset -= src_stride[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  return gather_named("permute", x, std::move(out_shape), std::move(index));
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw DimensionError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != shape[i]) {
        throw DimensionError("concat: shape mismatch " + to_string(s) + " vs " + to_string(shape));
      }
    }
    total += s[axis];
  }
  shape[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const bool track = detail::should_record(std::span<const Tensor>(parts));
  Buffer out(numel(shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis) * inner;
    auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * len, len, out.data() + o * total * inner + offset);
    }
    offset += len;
  }
  Tensor y = detail::make_result(std::move(shape), std::move(out), track);
  if (track) {
    detail::record("concat", y, [parts, outer, inner, total, axis, yi = y.impl()] {
      const auto& gy = yi->grad;
      std::size_t offset = 0;
      for (const auto& p : parts) {
        const std::size_t len = p.dim(axis) * inner;
        auto gp = detail::grad_of(p);
        if (!gp.empty()) {
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < len; ++i) gp[o * len + i] += gy[o * total * inner + offset + i];
        }
        offset += len;
      }
    });
  }
  return y;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  Shape shape = x.shape();
  if (axis >= shape.size() || start + length > shape[axis]) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") out of bounds for " + to_string(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t full = shape[axis];
  shape[axis] = length;
  const bool track = detail::should_record({&x});
  Buffer out(outer * length * inner);
  auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.data() + (o * full + start) * inner, length * inner,
                out.data() + o * length * inner);
  }
  Tensor y = detail::make_result(std::move(shape), std::move(out), track);
  if (track) {
    detail::record("slice", y, [x, outer, inner, full, start, length, yi = y.impl()] {
      const auto& gy = yi->grad;
      auto gx = detail::grad_of(x);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < length * inner; ++i) {
          gx[(o * full + start) * inner + i] += gy[o * length * inner + i];
        }
    });
  }
  return y;
}

Tensor pad_reflect(const Tensor& x, std::size_t pad_bottom, std::size_t pad_right) {
  if (x.rank() < 2) throw DimensionError("pad_reflect: needs at least 2 axes");
  const std::size_t h = x.shape()[x.rank() - 2], w = x.shape().back();
  if (pad_bottom == 0 && pad_right == 0) return x;
  auto reflect = [](std::size_t i, std::size_t n) -> std::size_t {
    if (i < n) return i;
    const std::size_t over = i - n + 2;  // mirror without repeating the edge
    return over <= n ? n - over : 0;
  };
  Shape shape = x.shape();
  shape[shape.size() - 2] = h + pad_bottom;
  shape.back() = w + pad_right;
  const std::size_t planes = x.size() / (h * w);
  const std::size_t nh = h + pad_bottom, nw = w + pad_right;
  std::vector<std::size_t> index(planes * nh * nw);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < nh; ++i)
      for (std::size_t j = 0; j < nw; ++j) {
        index[(p * nh + i) * nw + j] = (p * h + reflect(i, h)) * w + reflect(j, w);
      }
  return gather_named("pad_reflect", x, std::move(shape), std::move(index));
}

Tensor pixel_unshuffle(const Tensor& x, std::size_t p) {
  if (x.rank() != 4 || p == 0 || x.dim(2) % p || x.dim(3) % p) {
    throw DimensionError("pixel_unshuffle: " + to_string(x.shape()) + " not divisible by " +
                         std::to_string(p));
  }
  if (p == 1) return x;
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / p, ow = w / p;
  std::vector<std::size_t> index(x.size());
  std::size_t o = 0;
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) {
              index[o++] = ((bi * c + ci) * h + y * p + dy) * w + xx * p + dx;
            }
  return gather_named("pixel_unshuffle", x, Shape{b, c * p * p, oh, ow}, std::move(index));
}

Tensor pixel_shuffle(const Tensor& x, std::size_t p) {
  if (x.rank() != 4 || p == 0 || x.dim(1) % (p * p)) {
    throw DimensionError("pixel_shuffle: channels of " + to_string(x.shape()) +
                         " not divisible by " + std::to_string(p * p));
  }
  if (p == 1) return x;
  const std::size_t b = x.dim(0), c = x.dim(1) / (p * p), h = x.dim(2), w = x.dim(3);
  std::vector<std::size_t> index(x.size());
  std::size_t o = 0;
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t y = 0; y < h * p; ++y)
        for (std::size_t xx = 0; xx < w * p; ++xx) {
          const std::size_t sub = (y % p) * p + (xx % p);
          index[o++] = ((bi * c * p * p + ci * p * p + sub) * h + y / p) * w + xx / p;
        }
  return gather_named("pixel_shuffle", x, Shape{b, c, h * p, w * p}, std::move(index));
}

}  // namespace mambamir::ops
