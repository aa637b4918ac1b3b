#include "mflow/autodiff/gradcheck.hpp"
#include "mflow/autodiff/ops.hpp"
#include "mflow/autodiff/optim.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

using namespace mflow;
using namespace mflow::ad;

namespace {

using T = Tensor<double>;

T random_tensor(Shape shape, std::mt19937_64& rng, bool grad = true, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return T(std::move(shape), std::move(v), grad);
}

// Reverse-mode gradient of sum(w * f()) for every leaf.
std::vector<Buffer<double>> reverse_gradients(const std::function<T()>& f, const std::vector<T>& leaves,
                                                   const std::vector<double>& w) {
  for (auto t : leaves) t.zero_grad();
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    const T out = f();
    tape.backward(sum(mul(out, T(out.shape(), w))));
  }
  std::vector<Buffer<double>> g;
  for (const auto& t : leaves) g.push_back(t.grad());
  return g;
}

// Central differences of sum(w * f()) written independently of the library helper.
double fd_relative_error(const std::function<T()>& f, std::vector<T> leaves, std::mt19937_64& rng, double h = 1e-6) {
  const T probe = f();
  std::vector<double> w(probe.numel());
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto& x : w) x = u(rng);
  const auto analytic = reverse_gradients(f, leaves, w);
  auto objective = [&] {
    const T out = f();
    double s = 0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += w[i] * out.data()[i];
    return s;
  };
  double err = 0, ref = 0;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto& data = leaves[l].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = objective();
      data[i] = saved - h;
      const double down = objective();
      data[i] = saved;
      const double num = (up - down) / (2 * h);
      err = std::max(err, std::abs(num - analytic[l][i]));
      ref = std::max(ref, std::abs(num));
    }
  }
  return err / std::max(ref, 1e-6);
}

// Smallest gap between the best and runner-up candidate of any windowed scan
// output; finite differences are only meaningful when this exceeds the step.
double window_margin(const T& x, const T& costs, int r) {
  const int side = 2 * r + 1, c = x.dim(1), h = x.dim(2), w = x.dim(3);
  double margin = INFINITY;
  for (int n = 0; n < x.dim(0); ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          for (int sign : {1, -1}) {
            std::vector<double> cand;
            for (int o = 0; o < side * side; ++o) {
              const int sy = ((y + o / side - r) % h + h) % h, sx = ((xx + o % side - r) % w + w) % w;
              const double v = x.data()[static_cast<std::size_t>(((n * c + ch) * h + sy) * w + sx)];
              cand.push_back(sign * v + costs.data()[static_cast<std::size_t>(ch * side * side + o)]);
            }
            std::sort(cand.begin(), cand.end());
            margin = std::min(margin, cand[1] - cand[0]);
          }
  return margin;
}

}  // namespace

TEST(Ops, AddZeroIsIdentity) {
  std::mt19937_64 rng(1);
  const T x = random_tensor({2, 3}, rng, false);
  EXPECT_EQ(add(x, T::zeros({2, 3})).data(), x.data());
}

TEST(Ops, SoftmaxOfZerosIsUniform) {
  const auto s = softmax(T::zeros({4}));
  for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Ops, WindowMinValuesAndArgmin) {
  const T x({1, 1, 1, 3}, {3, 1, 2});
  // 3x3 window on a single-row grid: only the middle row of offsets is distinct,
  // but wrap makes rows equivalent; zero costs everywhere.
  const T costs = T::zeros({1, 9});
  const auto scan = window_min_indexed(x, costs, 1);
  for (double v : scan.values.data()) EXPECT_EQ(v, 1.0);
  // Brute-force oracle: first row-major offset (dy, dx) whose source holds the minimum.
  for (int p = 0; p < 3; ++p) {
    int expected = -1;
    for (int o = 0; o < 9 && expected < 0; ++o) {
      const int dx = o % 3 - 1;
      if (x.data()[static_cast<std::size_t>(((p + dx) % 3 + 3) % 3)] == 1.0) expected = o;
    }
    EXPECT_EQ(scan.arg[static_cast<std::size_t>(p)], expected);
  }
  // source pixel of every winner is index 1
  for (int p = 0; p < 3; ++p) EXPECT_EQ(((p + scan.arg[static_cast<std::size_t>(p)] % 3 - 1) % 3 + 3) % 3, 1);
}

TEST(Ops, WindowMaxUsesNegatedCosts) {
  std::mt19937_64 rng(2);
  const T x = random_tensor({2, 3, 5, 4}, rng, false);
  const T c = random_tensor({3, 9}, rng, false, 0, 1);
  Buffer<double> neg(x.data());
  for (auto& v : neg) v = -v;
  const auto mx = window_max(x, c, 1);
  const auto mn = window_min(T(x.shape(), neg), c, 1);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(mx.data()[i], -mn.data()[i]);
}

TEST(Ops, ShapeErrors) {
  EXPECT_THROW(add(T::zeros({2}), T::zeros({3})), std::invalid_argument);
  EXPECT_THROW(matmul(T::zeros({2, 3}), T::zeros({2, 3})), std::invalid_argument);
  EXPECT_THROW(window_min(T::zeros({1, 2, 4, 4}), T::zeros({2, 8}), 1), std::invalid_argument);
  EXPECT_THROW(T({2, 2}, {1, 2, 3}), std::invalid_argument);
}

TEST(Backward, SquareAtThree) {
  T x = T::scalar(3.0, true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(mul(x, x));
  }
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, DetachedTensorGetsZeroGradient) {
  T x = T::scalar(2.0, true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    const T y = mul(x, x).detach();
    tape.backward(mul(y, x));
  }
  EXPECT_EQ(x.grad()[0], 4.0);
  T unused = T::scalar(1.0, true);
  EXPECT_EQ(unused.grad()[0], 0.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tape<double> tape;
  EXPECT_THROW(tape.backward(T::zeros({2})), std::invalid_argument);
}

TEST(Backward, NothingRecordedWithoutActiveTape) {
  T x = T::scalar(3.0, true);
  Tape<double> tape;
  const T y = mul(x, x);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}

TEST(GradientProperty, ElementwiseOps) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const T a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 3, 4}, rng);
    EXPECT_LE(fd_relative_error([&] { return add(a, b); }, {a, b}, rng), 1e-4);
    EXPECT_LE(fd_relative_error([&] { return mul(a, b); }, {a, b}, rng), 1e-4);
    EXPECT_LE(fd_relative_error([&] { return silu(a); }, {a}, rng), 1e-4);
    EXPECT_LE(fd_relative_error([&] { return softplus(a); }, {a}, rng), 1e-4);
    EXPECT_LE(fd_relative_error([&] { return mse(a, b); }, {a, b}, rng), 1e-4);
    EXPECT_LE(fd_relative_error([&] { return mean(a); }, {a}, rng), 1e-4);
    EXPECT_LE(fd_relative_error([&] { return reshape(a, {6, 4}); }, {a}, rng), 1e-4);
  }
}

TEST(GradientProperty, LinearAlgebraOps) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const T a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
    EXPECT_LE(fd_relative_error([&] { return matmul(a, b); }, {a, b}, rng), 1e-3);
    const T x = random_tensor({2, 4}, rng), w = random_tensor({3, 4}, rng), bias = random_tensor({3}, rng);
    EXPECT_LE(fd_relative_error([&] { return linear(x, w, bias); }, {x, w, bias}, rng), 1e-3);
    const T p = random_tensor({2, 3, 4}, rng), q = random_tensor({2, 5, 4}, rng);
    EXPECT_LE(fd_relative_error([&] { return bmm(p, q, false, true); }, {p, q}, rng), 1e-3);
    const T s = random_tensor({3, 6}, rng, true, -3, 3);
    EXPECT_LE(fd_relative_error([&] { return softmax(s); }, {s}, rng), 1e-3);
  }
}

TEST(GradientProperty, ConvolutionNormAndResampling) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const T x = random_tensor({2, 3, 6, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
    const auto pad = trial % 2 ? Padding::periodic : Padding::zero;
    const int stride = 1 + trial % 3 / 2;
    EXPECT_LE(fd_relative_error([&] { return conv2d(x, w, b, stride, pad); }, {x, w, b}, rng), 1e-3);
    const T g = random_tensor({4}, rng), be = random_tensor({4}, rng), y = random_tensor({2, 4, 3, 3}, rng);
    EXPECT_LE(fd_relative_error([&] { return group_norm(y, 2, g, be); }, {y, g, be}, rng), 1e-3);
    const T v = random_tensor({3, 2}, rng, true, -2, 2);
    EXPECT_LE(fd_relative_error([&] { return bilinear_shift(x, v, 0.7); }, {x, v}, rng), 1e-3);
    const T lo = random_tensor({2, 2, 3, 3}, rng);
    EXPECT_LE(fd_relative_error([&] { return concat_channels(upsample_nearest2x(lo), x.detach()); }, {lo}, rng), 1e-4);
  }
}

TEST(GradientProperty, WindowScansWithStructuringCosts) {
  std::mt19937_64 rng(6);
  const std::vector<double> base = {0.5, 0.25, 0.5, 0.25, 0.0, 0.25, 0.5, 0.25, 0.5};
  for (int trial = 0; trial < 20; ++trial) {
    T x = random_tensor({2, 3, 5, 5}, rng), scales = random_tensor({3}, rng, true, 0.5, 2.0);
    while (window_margin(x, structuring_costs(scales, base, 2.0), 1) < 1e-3) {
      x = random_tensor({2, 3, 5, 5}, rng);
      scales = random_tensor({3}, rng, true, 0.5, 2.0);
    }
    EXPECT_LE(fd_relative_error([&] { return window_min(x, structuring_costs(scales, base, 2.0), 1); }, {x, scales}, rng, 1e-4),
              1e-4);
    EXPECT_LE(fd_relative_error([&] { return window_max(x, structuring_costs(scales, base, 2.0), 1); }, {x, scales}, rng, 1e-4),
              1e-4);
  }
}

TEST(GradientProperty, LibraryCheckerAgrees) {
  std::mt19937_64 rng(7);
  const T a = random_tensor({3, 3}, rng, false), b = random_tensor({3, 3}, rng, false);
  const auto r = gradient_check<double>([](const std::vector<T>& in) { return silu(matmul(in[0], in[1])); }, {a, b}, 1);
  EXPECT_LE(r.relative_error, 1e-6);
}

TEST(GradientProperty, BackwardIsLinear) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    T x = random_tensor({4, 3}, rng);
    const T w = random_tensor({3, 3}, rng, false);
    const double a = 1.7, b = -0.6;
    auto grad_of = [&](const std::function<T()>& f) {
      x.zero_grad();
      Tape<double> tape;
      TapeScope<double> scope(tape);
      tape.backward(f());
      return x.grad();
    };
    auto f = [&] { return sum(silu(matmul(x, w))); };
    auto g = [&] { return mean(mul(x, x)); };
    const auto gf = grad_of(f), gg = grad_of(g);
    const auto gc = grad_of([&] { return add(scale(f(), a), scale(g(), b)); });
    for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], a * gf[i] + b * gg[i], 1e-10);
  }
}

TEST(Adam, ZeroGradientLeavesParametersAndDecaysMoments) {
  ParameterSet<double> ps;
  auto p = ps.add("p", {2}, {1.0, -2.0});
  auto st = AdamState<double>::for_parameters(ps);
  st.m[0] = {0.5, 0.5};
  st.v[0] = {0.25, 0.25};
  p.node()->ensure_grad();
  AdamConfig cfg;
  adam_step(ps, st, cfg);
  EXPECT_EQ(st.m[0][0], 0.9 * 0.5);
  EXPECT_EQ(st.v[0][0], 0.99 * 0.25);
  // m_hat, v_hat nonzero here, so only a truly zero history keeps p fixed
  ParameterSet<double> fresh;
  auto q = fresh.add("q", {2}, {1.0, -2.0});
  auto st2 = AdamState<double>::for_parameters(fresh);
  adam_step(fresh, st2, cfg);
  EXPECT_EQ(q.data()[0], 1.0);
  EXPECT_EQ(q.data()[1], -2.0);
}

TEST(Adam, FirstStepIsBiasCorrectedUnitStep) {
  ParameterSet<double> ps;
  auto p = ps.add("p", {1}, {0.0});
  auto st = AdamState<double>::for_parameters(ps);
  p.node()->ensure_grad()[0] = 1.0;
  AdamConfig cfg;
  cfg.lr = 0.1;
  adam_step(ps, st, cfg);
  EXPECT_NEAR(p.data()[0], -0.1, 1e-8);
  EXPECT_NEAR(p.data()[0], -0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, MomentsDecayAfterGradientStops) {
  ParameterSet<double> ps;
  auto p = ps.add("p", {1}, {0.0});
  auto st = AdamState<double>::for_parameters(ps);
  AdamConfig cfg;
  p.node()->ensure_grad()[0] = 1.0;
  adam_step(ps, st, cfg);
  p.node()->grad[0] = 0.0;
  adam_step(ps, st, cfg);
  adam_step(ps, st, cfg);
  EXPECT_NEAR(st.m[0][0], 0.1 * 0.9 * 0.9, 1e-15);
  EXPECT_NEAR(st.v[0][0], 0.01 * 0.99 * 0.99, 1e-15);
  EXPECT_EQ(st.step, 3);
}

TEST(Adam, NonFiniteGradientAbortsWithoutUpdate) {
  ParameterSet<double> ps;
  auto p = ps.add("layer.weight", {2}, {1.0, 2.0});
  auto st = AdamState<double>::for_parameters(ps);
  p.node()->ensure_grad() = {0.5, NAN};
  try {
    adam_step(ps, st, AdamConfig{});
    FAIL() << "expected an exception";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("layer.weight"), std::string::npos);
  }
  EXPECT_EQ(p.data()[0], 1.0);
  EXPECT_EQ(st.step, 0);
}

TEST(Ema, Examples) {
  ParameterSet<double> ps;
  ps.add("p", {2}, {1.0, 1.0});
  std::vector<std::vector<double>> shadow = {{0.0, 0.0}};
  ema_update(shadow, ps, 1.0);
  EXPECT_EQ(shadow[0][0], 0.0);
  ema_update(shadow, ps, 0.995);
  EXPECT_NEAR(shadow[0][0], 0.005, 1e-15);
  ema_update(shadow, ps, 0.0);
  EXPECT_EQ(shadow[0][1], 1.0);
  std::vector<std::vector<double>> wrong = {{0.0}};
  EXPECT_THROW(ema_update(wrong, ps, 0.5), std::invalid_argument);
}

TEST(Determinism, IdenticalSeedsGiveIdenticalTrajectories) {
  auto run = [] {
    std::mt19937_64 rng(42);
    ParameterSet<double> ps;
    auto w = ps.add("w", {3, 3}, std::vector<double>(9, 0.1));
    auto st = AdamState<double>::for_parameters(ps);
    for (int step = 0; step < 20; ++step) {
      const T x = random_tensor({4, 3}, rng, false);
      ps.zero_grad();
      Tape<double> tape;
      {
        TapeScope<double> scope(tape);
        tape.backward(mean(square(silu(matmul(x, w)))));
      }
      adam_step(ps, st, AdamConfig{1e-2});
    }
    return w.data();
  };
  EXPECT_EQ(run(), run());
}
