#include "mambamir/optim.hpp"

#include <cmath>

namespace mambamir {

void zero_grads(const ParamList& params) {
  for (const auto& [name, t] : params) {
    Tensor copy = t;
    copy.zero_grad();
  }
}

AdamState make_adam_state(const ParamList& params) {
  AdamState s;
  for (const auto& [name, t] : params) {
    s.m.emplace_back(t.size(), 0.0);
    s.v.emplace_back(t.size(), 0.0);
  }
  return s;
}

void adam_step(const ParamList& params, AdamState& state, const AdamConfig& cfg) {
  if (!(cfg.lr > 0)) throw ConfigError("adam: learning rate must be positive");
  if (state.m.size() != params.size()) {
    throw DimensionError("adam: optimizer state holds " + std::to_string(state.m.size()) +
                         " slots for " + std::to_string(params.size()) + " parameters");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    if (state.m[i].size() != p.size()) {
      throw DimensionError("adam: state shape mismatch for " + params[i].first);
    }
    const bool has = p.has_grad();
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has ? g[j] : 0.0;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double step_decay_lr(double base, long step, long decay_start, long decay_every, double factor) {
  if (decay_every <= 0 || step <= decay_start) return base;
  const long periods = (step - decay_start) / decay_every;
  return base * std::pow(factor, static_cast<double>(periods));
}

}  // namespace mambamir
