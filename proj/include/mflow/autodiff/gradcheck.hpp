#pragma once

#include "mflow/autodiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace mflow::ad {

struct GradCheckResult {
  double max_abs_error = 0.0;
  double max_reference = 0.0;
  double relative_error = 0.0;  // max_abs_error / max(max_reference, floor)
};

/// Compares reverse-mode gradients of sum(w * fn()) for a fixed random
/// weighting w against central differences with step `h`. `leaves` are
/// trainable tensors that `fn` reads; they are perturbed in place and restored.
template <typename Scalar>
GradCheckResult gradient_check_leaves(const std::function<Tensor<Scalar>()>& fn, std::vector<Tensor<Scalar>> leaves,
                                      std::uint64_t seed = 0, Scalar h = Scalar(1e-6), double floor = 1e-6) {
  std::vector<Scalar> weights;
  {
    const auto probe = fn();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    weights.resize(probe.numel());
    for (auto& w : weights) w = static_cast<Scalar>(u(rng));
  }
  auto objective = [&] {
    const auto out = fn();
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += static_cast<double>(weights[i]) * out.data()[i];
    return s;
  };

  for (auto& t : leaves) t.zero_grad();
  Tape<Scalar> tape;
  {
    TapeScope<Scalar> scope(tape);
    const auto out = fn();
    tape.backward(sum(mul(out, Tensor<Scalar>(out.shape(), weights))));
  }

  GradCheckResult r;
  for (auto& t : leaves) {
    const auto analytic = t.grad();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const Scalar saved = t.data()[i];
      t.mutable_data()[i] = saved + h;
      const double up = objective();
      t.mutable_data()[i] = saved - h;
      const double down = objective();
      t.mutable_data()[i] = saved;
      const double numeric = (up - down) / (2.0 * static_cast<double>(h));
      r.max_abs_error = std::max(r.max_abs_error, std::abs(numeric - static_cast<double>(analytic[i])));
      r.max_reference = std::max(r.max_reference, std::abs(numeric));
    }
    t.zero_grad();
  }
  r.relative_error = r.max_abs_error / std::max(r.max_reference, floor);
  return r;
}

/// Same check for a function of fresh input tensors.
template <typename Scalar>
GradCheckResult gradient_check(const std::function<Tensor<Scalar>(const std::vector<Tensor<Scalar>>&)>& fn,
                               const std::vector<Tensor<Scalar>>& inputs, std::uint64_t seed = 0, Scalar h = Scalar(1e-6),
                               double floor = 1e-6) {
  std::vector<Tensor<Scalar>> leaves;
  for (const auto& t : inputs) leaves.emplace_back(t.shape(), t.data(), true);
  return gradient_check_leaves<Scalar>([&] { return fn(leaves); }, leaves, seed, h, floor);
}

}  // namespace mflow::ad
