#include "codecsep/optim.hpp"

#include <cmath>
#include <string>

namespace codecsep {

AdamState adam_init(std::span<const Tensor> params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

void adam_step(std::span<Tensor> params, AdamState& state, double lr, const AdamOptions& opts) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("adam_step: state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].numel() != state.m[i].size()) throw ShapeError("adam_step: state shape mismatch");
    if (!params[i].has_grad()) continue;
    for (double g : params[i].grad())
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in parameter " + std::to_string(i));
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(opts.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(opts.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    auto values = params[i].mutable_data();
    if (!params[i].has_grad()) {
      for (std::size_t j = 0; j < m.size(); ++j) {
        m[j] *= opts.beta1;
        v[j] *= opts.beta2;
        values[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + opts.eps);
      }
      continue;
    }
    const auto g = params[i].grad();
    for (std::size_t j = 0; j < m.size(); ++j) {
      m[j] = opts.beta1 * m[j] + (1.0 - opts.beta1) * g[j];
      v[j] = opts.beta2 * v[j] + (1.0 - opts.beta2) * g[j] * g[j];
      values[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + opts.eps);
    }
    if (current_precision() == Precision::f32)
      for (auto& x : values) x = static_cast<double>(static_cast<float>(x));
  }
}

SchedulerState scheduler_init(double lr0) {
  if (!(lr0 > 0.0)) throw std::invalid_argument("learning rate must be positive");
  SchedulerState s;
  s.lr0 = lr0;
  s.current_lr = lr0;
  return s;
}

SchedulerState scheduler_step(SchedulerState s, double valid_loss, int patience, int start_epoch) {
  if (patience < 1) throw std::invalid_argument("patience must be >= 1");
  s.epoch += 1;
  if (valid_loss < s.best_valid_loss) {
    s.best_valid_loss = valid_loss;
    s.epochs_since_improvement = 0;
  } else {
    s.epochs_since_improvement += 1;
  }
  if (s.epoch > start_epoch && s.epochs_since_improvement >= patience) {
    s.halvings += 1;
    s.current_lr = std::ldexp(s.lr0, -s.halvings);
    s.epochs_since_improvement = 0;
  }
  return s;
}

}  // namespace codecsep
