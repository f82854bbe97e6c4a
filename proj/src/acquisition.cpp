#include "mambamir/acquisition.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <tuple>

#include "mambamir/ops.hpp"

namespace mambamir::acq {

std::string task_name(Task t) {
  switch (t) {
    case Task::mri: return "mri";
    case Task::ct: return "ct";
    case Task::pet: return "pet";
  }
  return "?";
}

Task parse_task(const std::string& s) {
  if (s == "mri") return Task::mri;
  if (s == "ct") return Task::ct;
  if (s == "pet") return Task::pet;
  throw ConfigError("unknown task '" + s + "' (expected mri, ct or pet)");
}

namespace {

// Plans are cached per (h, w, direction) and executed through the new-array
// interface, which is safe to call concurrently. Planning itself is not.
class PlanCache {
 public:
  ~PlanCache() {
    for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
  }

  fftw_plan get(std::size_t h, std::size_t w, int sign) {
    std::lock_guard lock(mutex_);
    auto key = std::make_tuple(h, w, sign);
    auto it = plans_.find(key);
    if (it != plans_.end()) return it->second;
    auto* buf = fftw_alloc_complex(h * w);
    fftw_plan plan = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w), buf, buf, sign,
                                      FFTW_ESTIMATE);
    fftw_free(buf);
    plans_.emplace(key, plan);
    return plan;
  }

 private:
  std::mutex mutex_;
  std::map<std::tuple<std::size_t, std::size_t, int>, fftw_plan> plans_;
};

PlanCache& plan_cache() {
  static PlanCache cache;
  return cache;
}

// Unitary transform of `count` planar complex images (real plane, then imaginary).
void transform(const double* in, double* out, std::size_t count, std::size_t h, std::size_t w,
               int sign) {
  const std::size_t hw = h * w;
  fftw_plan plan = plan_cache().get(h, w, sign);
  fftw_complex* buf = fftw_alloc_complex(hw);
  const double norm = 1.0 / std::sqrt(static_cast<double>(hw));
  for (std::size_t i = 0; i < count; ++i) {
    const double* re = in + 2 * i * hw;
    const double* im = re + hw;
    for (std::size_t k = 0; k < hw; ++k) {
      buf[k][0] = re[k];
      buf[k][1] = im[k];
    }
    fftw_execute_dft(plan, buf, buf);
    double* ore = out + 2 * i * hw;
    double* oim = ore + hw;
    for (std::size_t k = 0; k < hw; ++k) {
      ore[k] = buf[k][0] * norm;
      oim[k] = buf[k][1] * norm;
    }
  }
  fftw_free(buf);
}

void require_complex(const Tensor& x, const char* op) {
  if (x.rank() < 3 || x.dim(x.rank() - 3) != 2) {
    throw DimensionError(std::string(op) + ": expected [...,2,H,W], got " + to_string(x.shape()));
  }
}

Tensor dft_op(const Tensor& x, int sign, const char* name) {
  require_complex(x, name);
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const std::size_t count = x.size() / (2 * h * w);
  const bool track = detail::should_record({&x});
  Buffer out(x.size());
  transform(x.data().data(), out.data(), count, h, w, sign);
  Tensor y = detail::make_result(x.shape(), std::move(out), track);
  if (track) {
    detail::record(name, y, [x, h, w, count, sign, yi = y.impl()] {
      auto gx = detail::grad_of(x);
      Buffer tmp(gx.size());
      transform(yi->grad.data(), tmp.data(), count, h, w, -sign);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += tmp[i];
    });
  }
  return y;
}

}  // namespace

Tensor dft2(const Tensor& x) { return dft_op(x, FFTW_FORWARD, "dft2"); }
Tensor idft2(const Tensor& x) { return dft_op(x, FFTW_BACKWARD, "idft2"); }

Tensor to_complex(const Tensor& real) {
  if (real.rank() < 3 || real.dim(real.rank() - 3) != 1) {
    throw DimensionError("to_complex: expected [...,1,H,W], got " + to_string(real.shape()));
  }
  return ops::concat({real, Tensor::zeros(real.shape())}, real.rank() - 3);
}

Tensor magnitude(const Tensor& z) {
  require_complex(z, "magnitude");
  Shape shape = z.shape();
  shape[shape.size() - 3] = 1;
  const std::size_t hw = shape[shape.size() - 2] * shape.back();
  const std::size_t count = z.size() / (2 * hw);
  auto d = z.data();
  const bool track = detail::should_record({&z});
  Buffer o(count * hw);
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t k = 0; k < hw; ++k) o[i * hw + k] = std::hypot(d[2 * i * hw + k], d[(2 * i + 1) * hw + k]);
  Tensor out = detail::make_result(shape, std::move(o), track);
  if (track) {
    detail::record("magnitude", out, [z, count, hw, oi = out.impl()] {
      auto gz = detail::grad_of(z);
      auto d = z.data();
      for (std::size_t i = 0; i < count; ++i)
        for (std::size_t k = 0; k < hw; ++k) {
          const double m = oi->data[i * hw + k];
          if (m == 0.0) continue;  // subgradient 0 at the origin
          const double g = oi->grad[i * hw + k] / m;
          gz[2 * i * hw + k] += g * d[2 * i * hw + k];
          gz[(2 * i + 1) * hw + k] += g * d[(2 * i + 1) * hw + k];
        }
    });
  }
  return out;
}

std::size_t KSpaceMask::sampled() const {
  return static_cast<std::size_t>(std::count(columns.begin(), columns.end(), std::uint8_t{1}));
}

KSpaceMask make_cartesian_mask(std::size_t width, double acceleration, double center_fraction,
                               Rng& rng) {
  if (width == 0) throw ConfigError("mask width must be positive");
  if (!(acceleration >= 1.0)) throw ConfigError("acceleration factor must be >= 1");
  if (!(center_fraction >= 0.0 && center_fraction <= 1.0)) {
    throw ConfigError("center fraction must lie in [0, 1]");
  }
  const double budget = static_cast<double>(width) / acceleration;
  const auto center =
      static_cast<std::size_t>(std::ceil(center_fraction * static_cast<double>(width) - 1e-12));
  if (static_cast<double>(center) > budget + 1e-9) {
    throw ConfigError("center band of " + std::to_string(center) +
                      " columns exceeds the sampling budget of " + std::to_string(budget));
  }
  KSpaceMask m;
  m.columns.assign(width, 0);
  m.acceleration = acceleration;
  m.center_fraction = center_fraction;
  const std::size_t start = width / 2 - center / 2;
  for (std::size_t j = start; j < start + center; ++j) m.columns[j] = 1;
  const double p = center == width ? 0.0
                                   : (budget - static_cast<double>(center)) /
                                         static_cast<double>(width - center);
  for (std::size_t j = 0; j < width; ++j)
    if (!m.columns[j] && rng.uniform() < p) m.columns[j] = 1;
  return m;
}

namespace {

// Mask columns are stored in centered order (DC in the middle); the DFT keeps
// DC at index 0.
std::vector<std::uint8_t> unshifted_columns(const KSpaceMask& mask) {
  const std::size_t w = mask.width();
  std::vector<std::uint8_t> cols(w);
  for (std::size_t j = 0; j < w; ++j) cols[(j + w - w / 2) % w] = mask.columns[j];
  return cols;
}

void check_mask(const Tensor& x, const KSpaceMask& mask, const char* op) {
  require_complex(x, op);
  if (x.dim(x.rank() - 1) != mask.width()) {
    throw DimensionError(std::string(op) + ": mask width " + std::to_string(mask.width()) +
                         " does not match image width " + std::to_string(x.dim(x.rank() - 1)));
  }
}

}  // namespace

Tensor mri_forward(const Tensor& x, const KSpaceMask& mask, double noise_sigma, Rng* rng) {
  check_mask(x, mask, "mri_forward");
  if (noise_sigma > 0.0 && !rng) throw ContractError("mri_forward: noise requires an rng");
  Tensor k = dft2(x).detach();
  const auto cols = unshifted_columns(mask);
  const std::size_t w = mask.width();
  auto d = k.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!cols[i % w]) {
      d[i] = 0.0;
    } else if (noise_sigma > 0.0) {
      d[i] += noise_sigma * rng->normal();
    }
  }
  return k;
}

Tensor zero_filled(const Tensor& y, const KSpaceMask& mask) {
  check_mask(y, mask, "zero_filled");
  return idft2(y).detach();
}

std::size_t CTGeometry::detectors() const {
  if (n_detectors) return n_detectors;
  auto d = static_cast<std::size_t>(std::ceil(std::sqrt(2.0) * static_cast<double>(image_size)));
  return d % 2 ? d : d + 1;
}

double CTGeometry::angle(std::size_t view) const {
  return std::numbers::pi * static_cast<double>(view) / static_cast<double>(n_views);
}

namespace {

void check_geometry(const CTGeometry& g) {
  if (g.n_views == 0) throw ConfigError("CT geometry needs at least one view");
  if (g.image_size == 0) throw ConfigError("CT image size must be positive");
}

double bilinear(const double* img, std::size_t n, double row, double col) {
  const double fr = std::floor(row), fc = std::floor(col);
  const auto r0 = static_cast<long>(fr), c0 = static_cast<long>(fc);
  const double wr = row - fr, wc = col - fc;
  const long ln = static_cast<long>(n);
  auto px = [&](long r, long c) {
    return (r < 0 || c < 0 || r >= ln || c >= ln) ? 0.0 : img[r * ln + c];
  };
  return (1 - wr) * ((1 - wc) * px(r0, c0) + wc * px(r0, c0 + 1)) +
         wr * ((1 - wc) * px(r0 + 1, c0) + wc * px(r0 + 1, c0 + 1));
}

}  // namespace

Tensor radon(const Tensor& image, const CTGeometry& geom) {
  check_geometry(geom);
  const std::size_t n = geom.image_size;
  if (image.rank() != 2 || image.dim(0) != n || image.dim(1) != n) {
    throw DimensionError("radon: expected a square " + std::to_string(n) + "x" +
                         std::to_string(n) + " image, got " + to_string(image.shape()));
  }
  const std::size_t nd = geom.detectors();
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  const double t0 = (static_cast<double>(nd) - 1.0) / 2.0;
  const double reach = std::sqrt(2.0) * static_cast<double>(n) / 2.0 + 1.0;
  const auto steps = static_cast<long>(std::ceil(reach));
  const double* img = image.data().data();
  Tensor sino({geom.n_views, nd});
  auto out = sino.mutable_data();
  for (std::size_t v = 0; v < geom.n_views; ++v) {
    const double th = geom.angle(v), ct = std::cos(th), st = std::sin(th);
    for (std::size_t k = 0; k < nd; ++k) {
      const double t = static_cast<double>(k) - t0;
      double acc = 0.0;
      for (long s = -steps; s <= steps; ++s) {
        const double x = t * ct - static_cast<double>(s) * st;
        const double y = t * st + static_cast<double>(s) * ct;
        acc += bilinear(img, n, c - y, x + c);
      }
      out[v * nd + k] = acc;
    }
  }
  return sino;
}

Tensor fbp(const Tensor& sinogram, const CTGeometry& geom) {
  check_geometry(geom);
  const std::size_t nv = geom.n_views, nd = geom.detectors(), n = geom.image_size;
  if (sinogram.rank() != 2 || sinogram.dim(0) != nv || sinogram.dim(1) != nd) {
    throw DimensionError("fbp: sinogram " + to_string(sinogram.shape()) + " does not match " +
                         std::to_string(nv) + " views x " + std::to_string(nd) + " detectors");
  }
  // Spatial Ram-Lak kernel for unit detector spacing.
  const auto ln = static_cast<long>(nd);
  Buffer kernel(2 * nd - 1);
  for (long m = -(ln - 1); m <= ln - 1; ++m) {
    double h = 0.0;
    if (m == 0)
      h = 0.25;
    else if (m % 2)
      h = -1.0 / (std::numbers::pi * std::numbers::pi * static_cast<double>(m * m));
    kernel[static_cast<std::size_t>(m + ln - 1)] = h;
  }
  auto p = sinogram.data();
  Buffer q(nv * nd, 0.0);
  for (std::size_t v = 0; v < nv; ++v)
    for (long i = 0; i < ln; ++i) {
      double acc = 0.0;
      for (long j = 0; j < ln; ++j)
        acc += kernel[static_cast<std::size_t>(i - j + ln - 1)] * p[v * nd + static_cast<std::size_t>(j)];
      q[v * nd + static_cast<std::size_t>(i)] = acc;
    }

  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  const double t0 = (static_cast<double>(nd) - 1.0) / 2.0;
  Tensor img({n, n});
  auto out = img.mutable_data();
  for (std::size_t v = 0; v < nv; ++v) {
    const double th = geom.angle(v), ct = std::cos(th), st = std::sin(th);
    const double* qv = q.data() + v * nd;
    for (std::size_t r = 0; r < n; ++r) {
      const double y = c - static_cast<double>(r);
      for (std::size_t col = 0; col < n; ++col) {
        const double x = static_cast<double>(col) - c;
        const double pos = x * ct + y * st + t0;
        const double fl = std::floor(pos);
        const auto i0 = static_cast<long>(fl);
        const double wt = pos - fl;
        double val = 0.0;
        if (i0 >= 0 && i0 < ln) val += (1 - wt) * qv[i0];
        if (i0 + 1 >= 0 && i0 + 1 < ln) val += wt * qv[i0 + 1];
        out[r * n + col] += val;
      }
    }
  }
  const double scale = std::numbers::pi / static_cast<double>(nv);
  for (auto& v : out) v *= scale;
  return img;
}

Tensor pet_lowdose(const Tensor& activity, double drf, Rng& rng, double scale) {
  if (!(drf >= 1.0)) throw ConfigError("dose reduction factor must be >= 1");
  if (!(scale > 0.0)) throw ConfigError("count scale must be positive");
  Tensor out(activity.shape());
  auto in = activity.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] < 0.0 || std::isnan(in[i])) {
      throw ContractError("pet_lowdose: negative or NaN activity at index " + std::to_string(i));
    }
    const double counts = static_cast<double>(rng.poisson(in[i] * scale / drf));
    o[i] = counts * drf / scale;
  }
  return out;
}

namespace {

struct Ellipse {
  double value, a, b, x0, y0, phi_deg;
};

void draw_ellipses(const std::vector<Ellipse>& es, std::size_t size, std::span<double> out) {
  const double n = static_cast<double>(size);
  for (const auto& e : es) {
    const double phi = e.phi_deg * std::numbers::pi / 180.0;
    const double cp = std::cos(phi), sp = std::sin(phi);
    for (std::size_t r = 0; r < size; ++r) {
      const double y = 1.0 - (2.0 * static_cast<double>(r) + 1.0) / n;
      for (std::size_t c = 0; c < size; ++c) {
        const double x = (2.0 * static_cast<double>(c) + 1.0) / n - 1.0;
        const double xr = (x - e.x0) * cp + (y - e.y0) * sp;
        const double yr = -(x - e.x0) * sp + (y - e.y0) * cp;
        if ((xr * xr) / (e.a * e.a) + (yr * yr) / (e.b * e.b) <= 1.0) out[r * size + c] += e.value;
      }
    }
  }
  for (auto& v : out) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace

Tensor shepp_logan(std::size_t size) {
  if (size < 16) throw ConfigError("phantom size must be >= 16");
  static const std::vector<Ellipse> kEllipses = {
      {1.0, 0.69, 0.92, 0.0, 0.0, 0.0},        {-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0},
      {-0.2, 0.11, 0.31, 0.22, 0.0, -18.0},    {-0.2, 0.16, 0.41, -0.22, 0.0, 18.0},
      {0.1, 0.21, 0.25, 0.0, 0.35, 0.0},       {0.1, 0.046, 0.046, 0.0, 0.1, 0.0},
      {0.1, 0.046, 0.046, 0.0, -0.1, 0.0},     {0.1, 0.046, 0.023, -0.08, -0.605, 0.0},
      {0.1, 0.023, 0.023, 0.0, -0.606, 0.0},   {0.1, 0.023, 0.046, 0.06, -0.605, 0.0},
  };
  Tensor img({size, size});
  draw_ellipses(kEllipses, size, img.mutable_data());
  return img;
}

Tensor random_ellipse_phantom(std::size_t size, Rng& rng) {
  if (size < 16) throw ConfigError("phantom size must be >= 16");
  std::vector<Ellipse> es;
  // Body outline, then interior structures of mixed contrast and scale.
  const double ba = rng.uniform(0.6, 0.9), bb = rng.uniform(0.6, 0.9);
  es.push_back({rng.uniform(0.3, 0.6), ba, bb, rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                rng.uniform(0.0, 180.0)});
  const auto inner = 4 + rng.below(7);
  for (std::uint64_t i = 0; i < inner; ++i) {
    const double rad = std::sqrt(rng.uniform()) * 0.6;
    const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
    es.push_back({sign * rng.uniform(0.1, 0.4), rng.uniform(0.03, 0.3), rng.uniform(0.03, 0.3),
                  rad * ba * std::cos(ang), rad * bb * std::sin(ang), rng.uniform(0.0, 180.0)});
  }
  Tensor img({size, size});
  draw_ellipses(es, size, img.mutable_data());
  return img;
}

PhantomPair make_pair(const Tensor& image, const AcquisitionParams& params, std::uint64_t seed) {
  if (image.rank() != 2) throw DimensionError("make_pair: expected [H,W], got " + to_string(image.shape()));
  const std::size_t h = image.dim(0), w = image.dim(1);
  PhantomPair p;
  p.task = params.task;
  p.params = params;
  p.seed = seed;
  Rng rng(derive_seed(seed, 1));
  Tensor x1 = ops::reshape(image.detach(), {1, h, w});
  switch (params.task) {
    case Task::mri: {
      p.x = to_complex(x1).detach();
      KSpaceMask mask = make_cartesian_mask(w, params.acceleration, params.center_fraction, rng);
      Rng noise(derive_seed(seed, 2));
      p.y = mri_forward(p.x, mask, params.mri_noise_sigma, &noise);
      p.x_u = zero_filled(p.y, mask);
      break;
    }
    case Task::ct: {
      if (h != w) throw DimensionError("make_pair: CT needs a square image");
      CTGeometry g{params.n_views, params.n_detectors, h};
      Tensor sino = radon(image, g);
      p.x = x1;
      p.y = ops::reshape(sino, {1, sino.dim(0), sino.dim(1)});
      p.x_u = ops::reshape(fbp(sino, g), {1, h, w});
      break;
    }
    case Task::pet: {
      p.x = x1;
      p.x_u = pet_lowdose(x1, params.drf, rng, params.pet_scale);
      p.y = p.x_u;
      break;
    }
  }
  return p;
}

}  // namespace mambamir::acq
