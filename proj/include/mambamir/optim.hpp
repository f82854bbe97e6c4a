#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mambamir/tensor.hpp"

namespace mambamir {

/// Named trainable tensors in a stable order.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

void zero_grads(const ParamList& params);

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long step = 0;
};

AdamState make_adam_state(const ParamList& params);

/// One bias-corrected Adam update using each parameter's accumulated grad.
/// Parameters without a grad buffer are treated as having zero gradient.
void adam_step(const ParamList& params, AdamState& state, const AdamConfig& cfg);

/// Step-decay schedule: `base` until `decay_start`, then multiplied by
/// `factor` once per completed `decay_every` steps past it. Steps are 1-based.
double step_decay_lr(double base, long step, long decay_start, long decay_every, double factor);

}  // namespace mambamir
