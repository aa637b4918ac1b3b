#pragma once

// DDPM noise schedule, forward kernels, posterior and reverse transitions.
// Steps are 1-based: t in [1, T]; array index t - 1.

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace mflow {

enum class ScheduleKind { linear };

struct DiffusionSchedule {
  int T = 0;
  std::vector<double> beta;       // beta_t = 1 - alpha_t
  std::vector<double> alpha;      // alpha_t
  std::vector<double> alpha_bar;  // prod_{i<=t} alpha_i
  std::vector<double> sigma2;     // reverse-process variance, fixed to beta_t

  double beta_at(int t) const { return beta[index(t)]; }
  double alpha_at(int t) const { return alpha[index(t)]; }
  double alpha_bar_at(int t) const { return alpha_bar[index(t)]; }
  double sigma2_at(int t) const { return sigma2[index(t)]; }

  std::size_t index(int t) const {
    if (t < 1 || t > T) throw std::out_of_range("DiffusionSchedule: step " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    return static_cast<std::size_t>(t - 1);
  }
};

inline DiffusionSchedule make_schedule(int T, double beta_start, double beta_end, ScheduleKind kind = ScheduleKind::linear) {
  if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  DiffusionSchedule s;
  s.T = T;
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    double b = beta_start;
    if (kind == ScheduleKind::linear && T > 1) b = beta_start + (beta_end - beta_start) * i / (T - 1);
    const double a = 1.0 - b;
    prod *= a;
    s.beta.push_back(b);
    s.alpha.push_back(a);
    s.alpha_bar.push_back(prod);
    s.sigma2.push_back(b);
  }
  return s;
}

/// n_t = sqrt(abar_t) n0 + sqrt(1 - abar_t) eps
template <typename A, typename B>
auto forward_sample(const Eigen::ArrayBase<A>& n0, int t, const Eigen::ArrayBase<B>& eps, const DiffusionSchedule& s) {
  if (n0.size() != eps.size()) throw std::invalid_argument("forward_sample: shape mismatch");
  using Scalar = typename A::Scalar;
  const double ab = s.alpha_bar_at(t);
  return (static_cast<Scalar>(std::sqrt(ab)) * n0 + static_cast<Scalar>(std::sqrt(1.0 - ab)) * eps).eval();
}

/// One forward kernel q(n_t | n_{t-1}): sqrt(alpha_t) n_{t-1} + sqrt(beta_t) eps
template <typename A, typename B>
auto forward_step(const Eigen::ArrayBase<A>& prev, int t, const Eigen::ArrayBase<B>& eps, const DiffusionSchedule& s) {
  if (prev.size() != eps.size()) throw std::invalid_argument("forward_step: shape mismatch");
  using Scalar = typename A::Scalar;
  return (static_cast<Scalar>(std::sqrt(s.alpha_at(t))) * prev + static_cast<Scalar>(std::sqrt(s.beta_at(t))) * eps).eval();
}

/// mu = (1 / sqrt(alpha_t)) (n_t - beta_t / sqrt(1 - abar_t) eps)
template <typename A, typename B>
auto posterior_mean(const Eigen::ArrayBase<A>& nt, const Eigen::ArrayBase<B>& eps, int t, const DiffusionSchedule& s) {
  if (t == 0) throw std::invalid_argument("posterior_mean: t = 0 has no reverse transition");
  if (nt.size() != eps.size()) throw std::invalid_argument("posterior_mean: shape mismatch");
  using Scalar = typename A::Scalar;
  const double coef = s.beta_at(t) / std::sqrt(1.0 - s.alpha_bar_at(t));
  return ((nt - static_cast<Scalar>(coef) * eps) * static_cast<Scalar>(1.0 / std::sqrt(s.alpha_at(t)))).eval();
}

/// n_{t-1} = mu_theta(n_t, eps_hat) + sqrt(beta_t) noise; noise ignored at t = 1.
template <typename A, typename B, typename C>
auto reverse_step(const Eigen::ArrayBase<A>& nt, const Eigen::ArrayBase<B>& eps_hat, int t, const DiffusionSchedule& s,
                  const Eigen::ArrayBase<C>& noise) {
  if (nt.size() != noise.size()) throw std::invalid_argument("reverse_step: shape mismatch");
  using Scalar = typename A::Scalar;
  auto mu = posterior_mean(nt, eps_hat, t, s);
  if (t == 1) return mu;
  return (mu + static_cast<Scalar>(std::sqrt(s.sigma2_at(t))) * noise).eval();
}

/// KL(N(mu_true, s2 I) || N(mu_model, s2 I)) = |mu_true - mu_model|^2 / (2 s2)
template <typename A, typename B>
double gaussian_kl_shared_variance(const Eigen::ArrayBase<A>& mu_true, const Eigen::ArrayBase<B>& mu_model, double s2) {
  if (mu_true.size() != mu_model.size()) throw std::invalid_argument("gaussian_kl: shape mismatch");
  return (mu_true - mu_model).template cast<double>().square().sum() / (2.0 * s2);
}

/// log N(x; mu, s2 I)
template <typename A, typename B>
double gaussian_log_likelihood(const Eigen::ArrayBase<A>& x, const Eigen::ArrayBase<B>& mu, double s2) {
  constexpr double two_pi = 6.283185307179586476925286766559;
  const double n = static_cast<double>(x.size());
  return -0.5 * ((x - mu).template cast<double>().square().sum() / s2 + n * std::log(two_pi * s2));
}

/// Weight w_t with KL_t = w_t |eps - eps_hat|^2: beta_t / (2 alpha_t (1 - abar_t)).
inline double kl_epsilon_weight(int t, const DiffusionSchedule& s) {
  return s.beta_at(t) / (2.0 * s.alpha_at(t) * (1.0 - s.alpha_bar_at(t)));
}

}  // namespace mflow
