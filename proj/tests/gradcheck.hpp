#pragma once

// Central finite-difference oracle for the autodiff tape. Test-only: it
// only evaluates forward passes and never reads the backward rules it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "kgfid/numerics/rng.hpp"
#include "kgfid/numerics/tensor.hpp"

namespace kgfid::testing {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_input;
};

/// Relative error per input tensor is ||analytic - numeric|| / max(||analytic||,
/// ||numeric||, 1e-8); the result keeps the worst input. The floor keeps
/// gradients that are zero up to roundoff from reading as errors.
inline GradCheckResult gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                 std::vector<Tensor> inputs, double h = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor loss = f(inputs);
  loss.backward();
  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& x = inputs[k];
    std::vector<double> analytic(x.size(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    std::vector<double> numeric(x.size());
    NoGradGuard no_grad;
    auto data = x.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = f(inputs).item();
      data[i] = orig - h;
      const double fm = f(inputs).item();
      data[i] = orig;
      numeric[i] = (fp - fm) / (2.0 * h);
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double rel = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
    if (rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_input = "input " + std::to_string(k);
    }
  }
  return result;
}

inline Tensor random_tensor(CounterRng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace kgfid::testing
