#pragma once

// Training objectives built on the diffusion kernels. A model is any callable
// (const Tensor& n_t, const std::vector<int>& steps) -> Tensor eps_hat.

#include "mflow/autodiff/ops.hpp"
#include "mflow/diffusion.hpp"

#include <random>
#include <stdexcept>
#include <vector>

namespace mflow {

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar, typename Rng>
std::vector<Scalar> standard_normal(std::size_t n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Scalar> v(n);
  for (auto& x : v) x = static_cast<Scalar>(normal(rng));
  return v;
}

/// Per-sample diffused batch for given steps and noise.
template <typename Scalar>
ad::Tensor<Scalar> diffuse_batch(const ad::Tensor<Scalar>& n0, const std::vector<int>& steps, const std::vector<Scalar>& eps,
                                 const DiffusionSchedule& sched) {
  const std::size_t batch = static_cast<std::size_t>(n0.dim(0));
  if (steps.size() != batch || eps.size() != n0.numel()) throw std::invalid_argument("diffuse_batch: shape mismatch");
  const std::size_t per = n0.numel() / batch;
  std::vector<Scalar> nt(n0.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    Eigen::Map<const ArrayX<Scalar>> x0(n0.data().data() + b * per, static_cast<Eigen::Index>(per));
    Eigen::Map<const ArrayX<Scalar>> e(eps.data() + b * per, static_cast<Eigen::Index>(per));
    Eigen::Map<ArrayX<Scalar>>(nt.data() + b * per, static_cast<Eigen::Index>(per)) = forward_sample(x0, steps[b], e, sched);
  }
  return ad::Tensor<Scalar>(n0.shape(), std::move(nt));
}

/// Simplified objective: t ~ U{1..T}, eps ~ N(0, I), mean |eps - eps_theta(n_t, t)|^2 per coordinate.
template <typename Scalar, typename Model, typename Rng>
ad::Tensor<Scalar> simple_loss(const ad::Tensor<Scalar>& n0, const DiffusionSchedule& sched, const Model& model, Rng& rng) {
  if (n0.numel() == 0 || n0.rank() < 1 || n0.dim(0) < 1) throw std::invalid_argument("simple_loss: empty batch");
  std::uniform_int_distribution<int> step(1, sched.T);
  std::vector<int> steps(static_cast<std::size_t>(n0.dim(0)));
  for (auto& t : steps) t = step(rng);
  const auto eps = standard_normal<Scalar>(n0.numel(), rng);
  const auto nt = diffuse_batch(n0, steps, eps, sched);
  const ad::Tensor<Scalar> target(n0.shape(), eps);
  return ad::mse(model(nt, steps), target);
}

struct ElboTerms {
  std::vector<int> steps;          // steps t >= 2 that were evaluated
  std::vector<double> kl;          // KL(q(n_{t-1}|n_t,n_0) || p_theta(n_{t-1}|n_t)), summed over the batch
  std::vector<double> eps_sq;      // |eps - eps_hat|^2 behind each KL, summed over the batch
  double reconstruction = 0.0;     // log p_theta(n_0 | n_1), summed over the batch
};

/// Closed-form ELBO pieces with shared variance sigma_t^2 = beta_t. `steps`
/// lists the t >= 2 to evaluate (all of 2..T when empty).
template <typename Scalar, typename Model, typename Rng>
ElboTerms elbo_terms(const ad::Tensor<Scalar>& n0, const DiffusionSchedule& sched, const Model& model, Rng& rng,
                     std::vector<int> steps = {}) {
  if (n0.numel() == 0) throw std::invalid_argument("elbo_terms: empty batch");
  if (steps.empty()) {
    for (int t = 2; t <= sched.T; ++t) steps.push_back(t);
  }
  const std::size_t batch = static_cast<std::size_t>(n0.dim(0));
  const std::size_t per = n0.numel() / batch;
  ElboTerms out;
  auto eval_at = [&](int t, const std::vector<Scalar>& eps) {
    const std::vector<int> ts(batch, t);
    const auto nt = diffuse_batch(n0, ts, eps, sched);
    const auto eps_hat = model(nt, ts);
    return std::pair{nt, eps_hat};
  };
  for (int t : steps) {
    if (t < 2 || t > sched.T) throw std::invalid_argument("elbo_terms: KL steps must lie in [2, T]");
    const auto eps = standard_normal<Scalar>(n0.numel(), rng);
    const auto [nt, eps_hat] = eval_at(t, eps);
    double kl = 0.0;
    double sq = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const auto off = static_cast<Eigen::Index>(b * per);
      const auto len = static_cast<Eigen::Index>(per);
      Eigen::Map<const ArrayX<Scalar>> x(nt.data().data() + off, len);
      Eigen::Map<const ArrayX<Scalar>> e(eps.data() + off, len);
      Eigen::Map<const ArrayX<Scalar>> eh(eps_hat.data().data() + off, len);
      const auto mu_true = posterior_mean(x, e, t, sched);
      const auto mu_model = posterior_mean(x, eh, t, sched);
      kl += gaussian_kl_shared_variance(mu_true, mu_model, sched.sigma2_at(t));
      sq += (e - eh).template cast<double>().square().sum();
    }
    out.steps.push_back(t);
    out.kl.push_back(kl);
    out.eps_sq.push_back(sq);
  }
  const auto eps = standard_normal<Scalar>(n0.numel(), rng);
  const auto [n1, eps_hat] = eval_at(1, eps);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto off = static_cast<Eigen::Index>(b * per);
    const auto len = static_cast<Eigen::Index>(per);
    Eigen::Map<const ArrayX<Scalar>> x(n1.data().data() + off, len);
    Eigen::Map<const ArrayX<Scalar>> eh(eps_hat.data().data() + off, len);
    Eigen::Map<const ArrayX<Scalar>> x0(n0.data().data() + off, len);
    out.reconstruction += gaussian_log_likelihood(x0, posterior_mean(x, eh, 1, sched), sched.sigma2_at(1));
  }
  return out;
}

}  // namespace mflow
