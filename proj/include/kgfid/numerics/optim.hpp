#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "kgfid/error.hpp"
#include "kgfid/numerics/parameters.hpp"

namespace kgfid {

/// Linear warmup to the peak rate, then linear decay to zero at total_steps.
struct LinearSchedule {
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;

  double at(std::size_t step) const {
    if (warmup_steps > 0 && step < warmup_steps) {
      return peak_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    if (step >= total_steps) return 0.0;
    const double span = static_cast<double>(total_steps - warmup_steps);
    return peak_lr * static_cast<double>(total_steps - step) / std::max(span, 1.0);
  }
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double max_grad_norm = 1.0;  // <= 0 disables clipping
};

/// Adam with decoupled weight decay. Decay applies to matrices only;
/// vectors (biases, norm gains, scorer vectors) are not decayed.
class AdamW {
 public:
  AdamW(ParameterSet& params, AdamWConfig cfg = {}) : params_(&params), cfg_(cfg) {
    for (const auto& [name, t] : params.items()) {
      state_[name] = {std::vector<double>(t.size(), 0.0), std::vector<double>(t.size(), 0.0)};
    }
  }

  /// Global L2 norm of all present gradients.
  double grad_norm() const {
    double s = 0.0;
    for (const auto& [_, t] : params_->items()) {
      if (!t.has_grad()) continue;
      for (double g : t.grad()) s += g * g;
    }
    return std::sqrt(s);
  }

  /// One update at learning rate `lr`; parameters without gradients are
  /// left untouched. Gradients are cleared afterwards.
  void step(double lr) {
    ++t_;
    const double norm = grad_norm();
    if (!std::isfinite(norm)) throw NumericError("AdamW: non-finite gradient norm");
    const double clip = (cfg_.max_grad_norm > 0.0 && norm > cfg_.max_grad_norm)
                            ? cfg_.max_grad_norm / norm
                            : 1.0;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, tc] : params_->items()) {
      Tensor t = tc;
      if (!t.has_grad()) continue;
      auto& [m, v] = state_.at(name);
      auto w = t.mutable_data();
      auto g = t.grad();
      const bool decay = t.rank() >= 2 && cfg_.weight_decay > 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] * clip;
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        if (decay) w[i] -= lr * cfg_.weight_decay * w[i];
        w[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
      t.zero_grad();
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  ParameterSet* params_;
  AdamWConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> state_;
};

}  // namespace kgfid
