#include "mambamir/ssm.hpp"

#include <cmath>
#include <thread>

#include <Eigen/Core>

#include "mambamir/ops.hpp"

namespace mambamir::ssm {

namespace {

// Input coefficient of the recurrence: b̄ = coef(Δ, A)·B.
struct Coef {
  double value;
  double d_delta;  // ∂coef/∂Δ
  double d_a;      // ∂coef/∂A
};

inline Coef input_coef(double delta, double a, double a_bar, Discretization mode) {
  if (mode == Discretization::first_order) return {delta, 1.0, 0.0};
  if (std::abs(a) < 1e-12) return {delta, 1.0, 0.5 * delta * delta};
  const double em1 = std::expm1(delta * a);
  return {em1 / a, a_bar, (delta * a_bar * a - em1) / (a * a)};
}

struct Dims {
  std::size_t groups, length, channels, state;
};

Dims check_terms(const ScanTerms& t) {
  if (t.u.rank() != 3) throw DimensionError("selective_scan: u must be [G,L,C], got " + to_string(t.u.shape()));
  Dims d{t.u.dim(0), t.u.dim(1), t.u.dim(2), 0};
  if (t.a.rank() != 2 || t.a.dim(0) != d.channels) {
    throw DimensionError("selective_scan: A must be [C,N], got " + to_string(t.a.shape()));
  }
  d.state = t.a.dim(1);
  const Shape gln{d.groups, d.length, d.state};
  if (t.delta.shape() != t.u.shape() || t.b.shape() != gln || t.c.shape() != gln ||
      t.d.size() != d.channels) {
    throw DimensionError("selective_scan: inconsistent term shapes u=" + to_string(t.u.shape()) +
                         " delta=" + to_string(t.delta.shape()) + " B=" + to_string(t.b.shape()) +
                         " C=" + to_string(t.c.shape()) + " D=" + to_string(t.d.shape()));
  }
  if (d.length == 0) throw DimensionError("selective_scan: empty sequence");
  return d;
}

void check_finite_input(const ScanTerms& t, const Dims& d) {
  auto u = t.u.data();
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (std::isnan(u[i])) {
      const std::size_t step = (i / d.channels) % d.length;
      throw NumericError("selective_scan: NaN input at step " + std::to_string(step) +
                         " (sequence " + std::to_string(i / (d.channels * d.length)) +
                         ", channel " + std::to_string(i % d.channels) + ")");
    }
  }
}

}  // namespace

Discretized discretize(std::span<const double> a, std::span<const double> b,
                       std::span<const double> delta, std::size_t channels, std::size_t state,
                       Discretization mode) {
  if (a.size() != channels * state || b.size() != state || delta.size() != channels) {
    throw DimensionError("discretize: expected A [C,N], B [N], delta [C]");
  }
  Discretized out{Buffer(channels * state), Buffer(channels * state)};
  for (std::size_t c = 0; c < channels; ++c) {
    if (!(delta[c] >= 0.0)) {
      throw ContractError("discretize: step size must be positive, got " + std::to_string(delta[c]) +
                          " at channel " + std::to_string(c));
    }
    for (std::size_t n = 0; n < state; ++n) {
      const double an = a[c * state + n];
      const double abar = std::exp(delta[c] * an);
      out.a_bar[c * state + n] = abar;
      out.b_bar[c * state + n] = input_coef(delta[c], an, abar, mode).value * b[n];
    }
  }
  return out;
}

SSMParams SSMParams::init(std::size_t channels, std::size_t state, Rng& rng) {
  SSMParams p;
  Buffer a_log(channels * state), d(channels, 1.0);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t n = 0; n < state; ++n) a_log[c * state + n] = std::log(static_cast<double>(n + 1));
  const double r = 1.0 / std::sqrt(static_cast<double>(channels));
  auto uniform = [&](std::size_t count, double bound) {
    Buffer v(count);
    for (auto& e : v) e = rng.uniform(-bound, bound);
    return v;
  };
  Buffer b_delta(channels);
  for (auto& e : b_delta) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    e = dt + std::log(-std::expm1(-dt));  // softplus⁻¹
  }
  p.a_log = Tensor({channels, state}, std::move(a_log));
  p.d = Tensor({channels}, std::move(d));
  p.w_b = Tensor({channels, state}, uniform(channels * state, r));
  p.w_c = Tensor({channels, state}, uniform(channels * state, r));
  p.w_delta = Tensor({channels, channels}, uniform(channels * channels, r));
  p.b_delta = Tensor({channels}, std::move(b_delta));
  for (Tensor* t : {&p.a_log, &p.d, &p.w_b, &p.w_c, &p.w_delta, &p.b_delta}) t->set_requires_grad(true);
  return p;
}

void SSMParams::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + "a_log", a_log);
  out.emplace_back(prefix + "d", d);
  out.emplace_back(prefix + "w_b", w_b);
  out.emplace_back(prefix + "w_c", w_c);
  out.emplace_back(prefix + "w_delta", w_delta);
  out.emplace_back(prefix + "b_delta", b_delta);
}

ScanTerms realize(const Tensor& x, const SSMParams& params) {
  Tensor seq = x.rank() == 2 ? ops::reshape(x, {1, x.dim(0), x.dim(1)}) : x;
  if (seq.rank() != 3 || seq.dim(2) != params.channels()) {
    throw DimensionError("selective scan input " + to_string(x.shape()) + " does not have " +
                         std::to_string(params.channels()) + " channels");
  }
  ScanTerms t;
  t.u = seq;
  t.b = ops::linear(seq, params.w_b);
  t.c = ops::linear(seq, params.w_c);
  t.delta = ops::softplus(ops::linear(seq, params.w_delta, params.b_delta));
  t.a = ops::scale(ops::exp(params.a_log), -1.0);
  t.d = params.d;
  return t;
}

namespace {

// One time step's [C, N] state block, row-major.
using Block = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BlockMap = Eigen::Map<Block>;
using ConstBlockMap = Eigen::Map<const Block>;
using Col = Eigen::Array<double, Eigen::Dynamic, 1>;
using ConstColMap = Eigen::Map<const Col>;
using Row = Eigen::Array<double, 1, Eigen::Dynamic>;
using ConstRowMap = Eigen::Map<const Row>;
using RowMap = Eigen::Map<Row>;

// Input coefficients and their partials for one step, given Ā = exp(ΔA).
void input_coefs(const ConstColMap& delta, const ConstBlockMap& a, const Block& a_bar,
                 Discretization mode, Block& value, Block& d_delta, Block& d_a) {
  if (mode == Discretization::first_order) {
    value = Block::Zero(a.rows(), a.cols()).colwise() + delta;
    d_delta.setOnes(a.rows(), a.cols());
    d_a.setZero(a.rows(), a.cols());
    return;
  }
  value.resize(a.rows(), a.cols());
  d_delta.resize(a.rows(), a.cols());
  d_a.resize(a.rows(), a.cols());
  for (Eigen::Index c = 0; c < a.rows(); ++c)
    for (Eigen::Index n = 0; n < a.cols(); ++n) {
      const Coef cf = input_coef(delta[c], a(c, n), a_bar(c, n), mode);
      value(c, n) = cf.value;
      d_delta(c, n) = cf.d_delta;
      d_a(c, n) = cf.d_a;
    }
}

}  // namespace

Tensor selective_scan(const ScanTerms& t, Discretization mode) {
  const Dims dm = check_terms(t);
  check_finite_input(t, dm);
  const auto [G, L, C, N] = dm;
  const auto ci = static_cast<Eigen::Index>(C), ni = static_cast<Eigen::Index>(N);
  const bool track = detail::should_record({&t.u, &t.delta, &t.a, &t.b, &t.c, &t.d});
  auto u = t.u.data();
  auto dl = t.delta.data();
  auto bm = t.b.data();
  auto cm = t.c.data();
  const ConstBlockMap a(t.a.data().data(), ci, ni);
  const ConstColMap dv(t.d.data().data(), ci);

  Buffer y(G * L * C);
  Block h(ci, ni), abar(ci, ni), coef(ci, ni), unused1, unused2;
  for (std::size_t g = 0; g < G; ++g) {
    h.setZero();
    for (std::size_t k = 0; k < L; ++k) {
      const std::size_t row = g * L + k;
      const ConstColMap delta(dl.data() + row * C, ci);
      const ConstColMap uk(u.data() + row * C, ci);
      const ConstRowMap bk(bm.data() + row * N, ni);
      const ConstRowMap ck(cm.data() + row * N, ni);
      abar = (a.colwise() * delta).exp();
      input_coefs(delta, a, abar, mode, coef, unused1, unused2);
      h = abar * h + coef * (uk.matrix() * bk.matrix()).array();
      Eigen::Map<Col>(y.data() + row * C, ci) =
          (h.matrix() * ck.matrix().transpose()).array() + dv * uk;
    }
  }

  Tensor out = detail::make_result(Shape{G, L, C}, std::move(y), track);
  if (track) {
    detail::record("selective_scan", out, [t, dm, mode, yi = out.impl()] {
      const auto [G, L, C, N] = dm;
      const auto ci = static_cast<Eigen::Index>(C), ni = static_cast<Eigen::Index>(N);
      const auto& gy = yi->grad;
      auto u = t.u.data();
      auto dl = t.delta.data();
      auto bm = t.b.data();
      auto cm = t.c.data();
      const ConstBlockMap a(t.a.data().data(), ci, ni);
      const ConstColMap dv(t.d.data().data(), ci);
      auto gu = detail::grad_of(t.u);
      auto gdl = detail::grad_of(t.delta);
      auto ga = detail::grad_of(t.a);
      auto gb = detail::grad_of(t.b);
      auto gc = detail::grad_of(t.c);
      auto gd = detail::grad_of(t.d);

      // Recompute states and transitions per sequence, then run the adjoint
      // recurrence backwards in time.
      const std::size_t blk = C * N;
      Buffer hs(L * blk), abars(L * blk);
      Block dh(ci, ni), coef, cdd, cda, bu(ci, ni), prev(ci, ni), abar(ci, ni);
      for (std::size_t g = 0; g < G; ++g) {
        for (std::size_t k = 0; k < L; ++k) {
          const std::size_t row = g * L + k;
          const ConstColMap delta(dl.data() + row * C, ci);
          const ConstColMap uk(u.data() + row * C, ci);
          const ConstRowMap bk(bm.data() + row * N, ni);
          BlockMap ab(abars.data() + k * blk, ci, ni);
          BlockMap hk(hs.data() + k * blk, ci, ni);
          abar = (a.colwise() * delta).exp();
          ab = abar;
          input_coefs(delta, a, abar, mode, coef, cdd, cda);
          if (k)
            hk = abar * BlockMap(hs.data() + (k - 1) * blk, ci, ni) +
                 coef * (uk.matrix() * bk.matrix()).array();
          else
            hk = coef * (uk.matrix() * bk.matrix()).array();
        }
        dh.setZero();
        for (std::size_t k = L; k-- > 0;) {
          const std::size_t row = g * L + k;
          const ConstColMap delta(dl.data() + row * C, ci);
          const ConstColMap uk(u.data() + row * C, ci);
          const ConstColMap gyk(gy.data() + row * C, ci);
          const ConstRowMap bk(bm.data() + row * N, ni);
          const ConstRowMap ck(cm.data() + row * N, ni);
          const ConstBlockMap hk(hs.data() + k * blk, ci, ni);
          abar = ConstBlockMap(abars.data() + k * blk, ci, ni);
          if (k)
            prev = ConstBlockMap(hs.data() + (k - 1) * blk, ci, ni);
          else
            prev.setZero();
          if (!gd.empty()) Eigen::Map<Col>(gd.data(), ci) += gyk * uk;
          if (!gc.empty())
            RowMap(gc.data() + row * N, ni) += (gyk.matrix().transpose() * hk.matrix()).array();
          dh += (gyk.matrix() * ck.matrix()).array();
          input_coefs(delta, a, abar, mode, coef, cdd, cda);
          bu = (uk.matrix() * bk.matrix()).array();
          if (!gdl.empty())
            Eigen::Map<Col>(gdl.data() + row * C, ci) +=
                (dh * (a * abar * prev + cdd * bu)).rowwise().sum();
          if (!ga.empty())
            BlockMap(ga.data(), ci, ni) += dh * ((abar * prev).colwise() * delta + cda * bu);
          if (!gb.empty())
            RowMap(gb.data() + row * N, ni) += ((dh * coef).colwise() * uk).colwise().sum();
          if (!gu.empty())
            Eigen::Map<Col>(gu.data() + row * C, ci) +=
                gyk * dv + ((dh * coef).rowwise() * bk).rowwise().sum();
          dh *= abar;
        }
      }
    });
  }
  return out;
}

Tensor selective_scan_chunked(const ScanTerms& t, std::size_t chunks, Discretization mode) {
  const Dims dm = check_terms(t);
  check_finite_input(t, dm);
  const auto [G, L, C, N] = dm;
  if (chunks == 0) throw ConfigError("selective_scan_chunked: chunk count must be positive");
  chunks = std::min(chunks, L);
  auto u = t.u.data();
  auto dl = t.delta.data();
  auto a = t.a.data();
  auto bm = t.b.data();
  auto cm = t.c.data();
  auto dv = t.d.data();

  // elems[(g,c)][k][n] holds the per-step affine map, later its prefix.
  const std::size_t seqs = G * C;
  std::vector<Affine> elems(seqs * L * N);
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t k = 0; k < L; ++k) {
        const std::size_t ik = (g * L + k) * C + c;
        for (std::size_t n = 0; n < N; ++n) {
          const double an = a[c * N + n];
          const double abar = std::exp(dl[ik] * an);
          elems[((g * C + c) * L + k) * N + n] = {
              abar, input_coef(dl[ik], an, abar, mode).value * bm[(g * L + k) * N + n] * u[ik]};
        }
      }

  std::vector<std::size_t> bounds(chunks + 1);
  for (std::size_t p = 0; p <= chunks; ++p) bounds[p] = p * L / chunks;

  auto run_chunks = [&](auto&& body) {
    std::vector<std::thread> workers;
    workers.reserve(chunks);
    for (std::size_t p = 0; p < chunks; ++p) workers.emplace_back(body, p);
    for (auto& w : workers) w.join();
  };

  // Local inclusive scans inside each partition.
  run_chunks([&](std::size_t p) {
    for (std::size_t s = 0; s < seqs; ++s)
      for (std::size_t k = bounds[p] + 1; k < bounds[p + 1]; ++k)
        for (std::size_t n = 0; n < N; ++n) {
          Affine& cur = elems[(s * L + k) * N + n];
          cur = compose(elems[(s * L + k - 1) * N + n], cur);
        }
  });

  // Exclusive prefix of partition aggregates, in a fixed order.
  std::vector<Affine> carry(chunks * seqs * N);
  for (std::size_t s = 0; s < seqs; ++s)
    for (std::size_t n = 0; n < N; ++n) {
      Affine running;
      for (std::size_t p = 0; p < chunks; ++p) {
        carry[(p * seqs + s) * N + n] = running;
        running = compose(running, elems[(s * L + bounds[p + 1] - 1) * N + n]);
      }
    }

  run_chunks([&](std::size_t p) {
    if (p == 0) return;
    for (std::size_t s = 0; s < seqs; ++s)
      for (std::size_t k = bounds[p]; k < bounds[p + 1]; ++k)
        for (std::size_t n = 0; n < N; ++n) {
          Affine& cur = elems[(s * L + k) * N + n];
          cur = compose(carry[(p * seqs + s) * N + n], cur);
        }
  });

  Buffer y(G * L * C);
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t k = 0; k < L; ++k) {
        const std::size_t ik = (g * L + k) * C + c;
        double acc = dv[c] * u[ik];
        for (std::size_t n = 0; n < N; ++n) {
          acc += cm[(g * L + k) * N + n] * elems[(((g * C + c) * L) + k) * N + n].b;
        }
        y[ik] = acc;
      }
  return Tensor(Shape{G, L, C}, std::move(y));
}

namespace {
Tensor restore_rank(const Tensor& y, const Tensor& x) {
  return x.rank() == 2 ? ops::reshape(y, x.shape()) : y;
}
}  // namespace

Tensor selective_scan_seq(const Tensor& x, const SSMParams& params, Discretization mode) {
  return restore_rank(selective_scan(realize(x, params), mode), x);
}

Tensor selective_scan_par(const Tensor& x, const SSMParams& params, std::size_t chunks,
                          Discretization mode) {
  NoGradScope no_grad;
  return restore_rank(selective_scan_chunked(realize(x, params), chunks, mode), x);
}

}  // namespace mambamir::ssm
