#include "mflow/diffusion.hpp"
#include "mflow/objectives.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace mflow;

namespace {

using Arr = Eigen::ArrayXd;
using T = ad::Tensor<double>;

Arr randn(Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Arr a(n);
  for (auto& v : a) v = g(rng);
  return a;
}

}  // namespace

TEST(Schedule, TwoStepConstantBeta) {
  const auto s = make_schedule(2, 0.1, 0.1);
  EXPECT_DOUBLE_EQ(s.alpha_at(1), 0.9);
  EXPECT_DOUBLE_EQ(s.alpha_at(2), 0.9);
  EXPECT_DOUBLE_EQ(s.alpha_bar_at(1), 0.9);
  EXPECT_DOUBLE_EQ(s.alpha_bar_at(2), 0.81);
}

TEST(Schedule, RejectsDegenerateRanges) {
  EXPECT_THROW(make_schedule(10, 0.0, 0.0), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, 0.02, 0.01), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, 0.01, 1.0), std::invalid_argument);
  EXPECT_THROW(make_schedule(0, 0.01, 0.02), std::invalid_argument);
  const auto s = make_schedule(5, 0.01, 0.02);
  EXPECT_THROW(s.beta_at(0), std::out_of_range);
  EXPECT_THROW(s.beta_at(6), std::out_of_range);
}

TEST(Schedule, NearTotalNoisingAtThousandSteps) {
  const auto s = make_schedule(1000, 1e-4, 0.02);
  double prod = 1.0;
  for (int i = 0; i < 1000; ++i) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 999.0);
  EXPECT_NEAR(s.alpha_bar_at(1000), prod, 1e-15);
  EXPECT_LT(s.alpha_bar_at(1000), 1e-4);
}

TEST(ScheduleProperty, InvariantsHold) {
  for (int T : {1, 2, 7, 200, 1000}) {
    for (auto [b0, b1] : {std::pair{1e-4, 0.02}, std::pair{0.05, 0.05}, std::pair{1e-3, 0.5}}) {
      const auto s = make_schedule(T, b0, b1);
      double prev = 1.0;
      EXPECT_DOUBLE_EQ(s.beta_at(1), b0);
      EXPECT_NEAR(s.beta_at(T), T > 1 ? b1 : b0, 1e-15);
      for (int t = 1; t <= T; ++t) {
        EXPECT_GT(s.beta_at(t), 0.0);
        EXPECT_LT(s.beta_at(t), 1.0);
        EXPECT_EQ(s.alpha_at(t), 1.0 - s.beta_at(t));
        EXPECT_NEAR(s.alpha_bar_at(t), prev * s.alpha_at(t), 1e-15);
        EXPECT_LT(s.alpha_bar_at(t), prev);
        EXPECT_EQ(s.sigma2_at(t), s.beta_at(t));
        prev = s.alpha_bar_at(t);
      }
    }
  }
}

TEST(ForwardSample, Examples) {
  std::mt19937_64 rng(1);
  const auto s = make_schedule(50, 1e-4, 0.02);
  const Arr n0 = randn(6, rng), eps = randn(6, rng);
  const Arr a = forward_sample(n0, 20, Arr::Zero(6), s);
  EXPECT_TRUE((a - std::sqrt(s.alpha_bar_at(20)) * n0).abs().maxCoeff() < 1e-15);
  const Arr b = forward_sample(Arr::Zero(6), 20, eps, s);
  EXPECT_TRUE((b - std::sqrt(1 - s.alpha_bar_at(20)) * eps).abs().maxCoeff() < 1e-15);
  EXPECT_THROW(forward_sample(n0, 20, Arr::Zero(5), s), std::invalid_argument);
}

TEST(ForwardSampleProperty, MonteCarloMarginal) {
  std::mt19937_64 rng(2);
  const auto s = make_schedule(200, 1e-4, 0.02);
  const int n = 10000;
  const double x0 = 0.7;
  for (int t : {1, 50, 200}) {
    const Arr samples = forward_sample(Arr::Constant(n, x0), t, randn(n, rng), s);
    const double mean = samples.mean();
    const double sd = std::sqrt((samples - mean).square().sum() / (n - 1));
    const double true_sd = std::sqrt(1 - s.alpha_bar_at(t));
    EXPECT_LE(std::abs(mean - std::sqrt(s.alpha_bar_at(t)) * x0), 4 * true_sd / std::sqrt(n));
    // standard error of the sample standard deviation ~ sd / sqrt(2n)
    EXPECT_LE(std::abs(sd - true_sd), 4 * true_sd / std::sqrt(2.0 * n));
  }
}

TEST(ForwardSampleProperty, TwoSingleStepsMatchClosedForm) {
  std::mt19937_64 rng(3);
  const auto s = make_schedule(100, 1e-3, 0.05);
  const int n = 10000;
  const double x0 = -0.4;
  for (int t : {2, 40, 100}) {
    const Arr prev = forward_sample(Arr::Constant(n, x0), t - 1, randn(n, rng), s);
    const Arr cur = forward_step(prev, t, randn(n, rng), s);
    const double mean = cur.mean();
    const double var = (cur - mean).square().sum() / (n - 1);
    const double true_var = 1 - s.alpha_bar_at(t);
    EXPECT_LE(std::abs(mean - std::sqrt(s.alpha_bar_at(t)) * x0), 4 * std::sqrt(true_var / n));
    EXPECT_LE(std::abs(var - true_var), 4 * true_var * std::sqrt(2.0 / (n - 1)));
  }
}

TEST(PosteriorMean, Examples) {
  std::mt19937_64 rng(4);
  const auto s = make_schedule(30, 1e-3, 0.03);
  const Arr nt = randn(5, rng), e1 = randn(5, rng), e2 = randn(5, rng);
  EXPECT_LE((posterior_mean(nt, Arr::Zero(5), 7, s) - nt / std::sqrt(s.alpha_at(7))).abs().maxCoeff(), 1e-15);
  const Arr n0 = randn(5, rng);
  const Arr n1 = forward_sample(n0, 1, e1, s);
  EXPECT_LE((posterior_mean(n1, e1, 1, s) - n0).abs().maxCoeff(), 1e-12);
  // affine in eps: mu(a e1 + (1-a) e2) = a mu(e1) + (1-a) mu(e2)
  const double a = 0.3;
  const Arr lhs = posterior_mean(nt, Arr(a * e1 + (1 - a) * e2), 9, s);
  const Arr rhs = a * posterior_mean(nt, e1, 9, s) + (1 - a) * posterior_mean(nt, e2, 9, s);
  EXPECT_LE((lhs - rhs).abs().maxCoeff(), 1e-12);
  EXPECT_THROW(posterior_mean(nt, e1, 0, s), std::invalid_argument);
}

TEST(PosteriorMean, EqualsTruePosteriorMeanWithTrueNoise) {
  // q(n_{t-1} | n_t, n_0) mean: sqrt(abar_{t-1}) beta_t / (1 - abar_t) n0 + sqrt(alpha_t)(1 - abar_{t-1}) / (1 - abar_t) n_t
  std::mt19937_64 rng(5);
  const auto s = make_schedule(40, 1e-3, 0.04);
  for (int t : {2, 10, 40}) {
    const Arr n0 = randn(4, rng), eps = randn(4, rng);
    const Arr nt = forward_sample(n0, t, eps, s);
    const double abar = s.alpha_bar_at(t), abar_prev = s.alpha_bar_at(t - 1);
    const Arr ref = std::sqrt(abar_prev) * s.beta_at(t) / (1 - abar) * n0 + std::sqrt(s.alpha_at(t)) * (1 - abar_prev) / (1 - abar) * nt;
    EXPECT_LE((posterior_mean(nt, eps, t, s) - ref).abs().maxCoeff(), 1e-12);
  }
}

TEST(ReverseStep, Examples) {
  std::mt19937_64 rng(6);
  const auto s = make_schedule(30, 1e-3, 0.03);
  const Arr nt = randn(5, rng);
  EXPECT_LE((reverse_step(nt, Arr::Zero(5), 12, s, Arr::Zero(5)) - nt / std::sqrt(s.alpha_at(12))).abs().maxCoeff(), 1e-15);
  const Arr n0 = randn(5, rng), eps = randn(5, rng), noise = randn(5, rng);
  const Arr n1 = forward_sample(n0, 1, eps, s);
  EXPECT_LE((reverse_step(n1, eps, 1, s, noise) - n0).abs().maxCoeff(), 1e-12);
  const Arr out = reverse_step(nt, eps, 12, s, noise);
  EXPECT_LE((out - posterior_mean(nt, eps, 12, s) - std::sqrt(s.beta_at(12)) * noise).abs().maxCoeff(), 1e-14);
  EXPECT_THROW(reverse_step(nt, eps, 12, s, Arr::Zero(4)), std::invalid_argument);
}

TEST(ReverseStepProperty, GaussianOptimalSamplerPreservesVariance) {
  std::mt19937_64 rng(7);
  const auto s = make_schedule(1000, 1e-4, 0.02);
  const double s2 = 0.25;
  const int runs = 10000;
  Arr x = randn(runs, rng);
  for (int t = s.T; t >= 1; --t) {
    const double ab = s.alpha_bar_at(t);
    const Arr eps_star = std::sqrt(1 - ab) * x / (ab * s2 + 1 - ab);
    x = reverse_step(x, eps_star, t, s, randn(runs, rng));
  }
  const double mean = x.mean();
  const double var = (x - mean).square().sum() / (runs - 1);
  EXPECT_LE(std::abs(var - s2) / s2, 0.05);
  EXPECT_LE(std::abs(mean), 4 * std::sqrt(s2 / runs));
}

TEST(SimpleLoss, PerfectPredictorGivesZero) {
  std::mt19937_64 rng(8), data_rng(9);
  const auto s = make_schedule(100, 1e-4, 0.02);
  const T n0({4, 1, 3, 3}, standard_normal<double>(36, data_rng));
  // Recover eps from n_t given the known clean batch.
  auto oracle = [&](const T& nt, const std::vector<int>& steps) {
    std::vector<double> e(nt.numel());
    for (std::size_t b = 0; b < steps.size(); ++b) {
      const double ab = s.alpha_bar_at(steps[b]);
      for (std::size_t i = 0; i < 9; ++i) {
        const std::size_t k = b * 9 + i;
        e[k] = (nt.data()[k] - std::sqrt(ab) * n0.data()[k]) / std::sqrt(1 - ab);
      }
    }
    return T(nt.shape(), e);
  };
  EXPECT_NEAR(simple_loss(n0, s, oracle, rng).item(), 0.0, 1e-18);
}

TEST(SimpleLoss, ZeroPredictorHasUnitExpectation) {
  std::mt19937_64 rng(10);
  const auto s = make_schedule(100, 1e-4, 0.02);
  const T n0 = T::zeros({64, 1, 16, 16});
  auto zero = [](const T& nt, const std::vector<int>&) { return T::zeros(nt.shape()); };
  const double loss = simple_loss(n0, s, zero, rng).item();
  // mean of 16384 chi-square(1) draws: sd = sqrt(2 / 16384)
  EXPECT_NEAR(loss, 1.0, 4 * std::sqrt(2.0 / 16384));
  EXPECT_GE(loss, 0.0);
  EXPECT_THROW(simple_loss(T::zeros({0}), s, zero, rng), std::invalid_argument);
}

TEST(Kl, Examples) {
  Arr one(1), zero(1);
  one << 1.0;
  zero << 0.0;
  EXPECT_DOUBLE_EQ(gaussian_kl_shared_variance(one, zero, 0.5), 1.0);
  EXPECT_EQ(gaussian_kl_shared_variance(one, one, 0.5), 0.0);
}

TEST(KlProperty, NonnegativeAndZeroOnlyAtEqualMeans) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    const Arr a = randn(5, rng), b = randn(5, rng);
    EXPECT_GT(gaussian_kl_shared_variance(a, b, 0.1 + i * 0.01), 0.0);
    EXPECT_EQ(gaussian_kl_shared_variance(a, a, 0.1 + i * 0.01), 0.0);
  }
}

TEST(ElboTerms, KlIsReweightedEpsilonError) {
  std::mt19937_64 rng(12);
  const auto s = make_schedule(20, 1e-3, 0.05);
  const T n0({3, 1, 2, 2}, standard_normal<double>(12, rng));
  auto model = [](const T& nt, const std::vector<int>&) {
    std::vector<double> v(nt.data().begin(), nt.data().end());
    for (auto& x : v) x = 0.5 * std::tanh(x);
    return T(nt.shape(), v);
  };
  const auto terms = elbo_terms(n0, s, model, rng);
  ASSERT_EQ(terms.steps.size(), 19u);
  for (std::size_t i = 0; i < terms.steps.size(); ++i) {
    const int t = terms.steps[i];
    // |mu_true - mu_model|^2 / (2 beta) with mu difference beta / (sqrt(alpha) sqrt(1 - abar)) (eps - eps_hat)
    const double w = s.beta_at(t) * s.beta_at(t) / (s.alpha_at(t) * (1 - s.alpha_bar_at(t))) / (2 * s.beta_at(t));
    EXPECT_NEAR(terms.kl[i], w * terms.eps_sq[i], 1e-10 * std::max(1.0, terms.kl[i]));
    EXPECT_NEAR(kl_epsilon_weight(t, s), w, 1e-15);
    EXPECT_GE(terms.kl[i], 0.0);
  }
  EXPECT_TRUE(std::isfinite(terms.reconstruction));
}

TEST(ElboTerms, PerfectModelHasZeroKl) {
  std::mt19937_64 rng(13), copy(13);
  const auto s = make_schedule(10, 1e-3, 0.05);
  const T n0({2, 1, 2, 2}, standard_normal<double>(8, rng));
  auto oracle = [&](const T& nt, const std::vector<int>& steps) {
    std::vector<double> e(nt.numel());
    for (std::size_t b = 0; b < steps.size(); ++b) {
      const double ab = s.alpha_bar_at(steps[b]);
      for (std::size_t i = 0; i < 4; ++i) e[b * 4 + i] = (nt.data()[b * 4 + i] - std::sqrt(ab) * n0.data()[b * 4 + i]) / std::sqrt(1 - ab);
    }
    return T(nt.shape(), e);
  };
  const auto terms = elbo_terms(n0, s, oracle, rng, {2, 5, 10});
  for (double kl : terms.kl) EXPECT_NEAR(kl, 0.0, 1e-20);
  // reconstruction: n0 is the exact mean, so log N(n0; n0, beta_1 I)
  const double expected = -0.5 * 8 * std::log(2 * M_PI * s.beta_at(1));
  EXPECT_NEAR(terms.reconstruction, expected, 1e-9);
  EXPECT_THROW(elbo_terms(n0, s, oracle, rng, {1}), std::invalid_argument);
}
