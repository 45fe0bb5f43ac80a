// Adam and the plateau-halving learning-rate schedule.
#pragma once

#include "codecsep/tensor.hpp"

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace codecsep {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t t = 0;
};

AdamState adam_init(std::span<const Tensor> params);

/// Bias-corrected Adam update using each parameter's accumulated grad.
/// Throws NumericError (leaving params and state untouched) on a non-finite grad.
void adam_step(std::span<Tensor> params, AdamState& state, double lr, const AdamOptions& opts = {});

struct SchedulerState {
  double lr0 = 0.0;
  double current_lr = 0.0;
  double best_valid_loss = std::numeric_limits<double>::infinity();
  int epochs_since_improvement = 0;
  int epoch = 0;  // completed epochs
  int halvings = 0;
};

SchedulerState scheduler_init(double lr0);

/// End-of-epoch update. A strict decrease of the best validation loss resets
/// the patience counter; once past `start_epoch`, `patience` stalled epochs
/// halve the rate and reset the counter.
SchedulerState scheduler_step(SchedulerState state, double valid_loss, int patience = 2, int start_epoch = 5);

}  // namespace codecsep
