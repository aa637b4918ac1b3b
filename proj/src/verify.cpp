#include "mflow/verify.hpp"

#include "mflow/autodiff/gradcheck.hpp"
#include "mflow/data_io.hpp"
#include "mflow/diffusion.hpp"
#include "mflow/geometry.hpp"
#include "mflow/gmcunet.hpp"
#include "mflow/morphology.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace mflow {

namespace {

using Rng = std::mt19937_64;
using Vec = Vector<double>;
using Mat = Matrix<double>;
using Grid = GridFunction<double>;

CheckResult make_check(const std::string& suite, const std::string& name, double error, double tolerance,
                       std::string detail = {}) {
  return {suite, name, error, tolerance, std::isfinite(error) && error <= tolerance, std::move(detail)};
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Vec random_vector(int n, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = normal(rng);
  return v;
}

Vec random_ball_point(int n, Rng& rng, double max_radius = 0.95) {
  Vec v = random_vector(n, rng);
  return v.normalized() * max_radius * std::sqrt(uniform(rng, 0.0, 1.0));
}

Mat random_orthogonal(int n, Rng& rng) {
  Mat g(n, n);
  for (int j = 0; j < n; ++j) g.col(j) = random_vector(n, rng);
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ() * Mat::Identity(n, n);
  return q;
}

Mat random_signed_permutation(int n, Rng& rng, bool signs) {
  std::vector<int> sigma(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) sigma[static_cast<std::size_t>(i)] = i;
  std::shuffle(sigma.begin(), sigma.end(), rng);
  Mat p = EuclideanTransform<double>::permutation(sigma).linear();
  if (signs) {
    for (int i = 0; i < n; ++i) {
      if (uniform_int(rng, 0, 1)) p.row(i) *= -1.0;
    }
  }
  return p;
}

Grid random_grid(int c, int h, int w, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Grid g(c, h, w);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.values()[i] = uniform(rng, lo, hi);
  return g;
}

/// Sum of a few random periodic sinusoids with the given amplitude.
Grid smooth_field(int side, Rng& rng, double amplitude) {
  constexpr double two_pi = 6.283185307179586;
  Grid g(1, side, side);
  for (int term = 0; term < 3; ++term) {
    const int fx = uniform_int(rng, 0, 2);
    const int fy = uniform_int(rng, fx == 0 ? 1 : 0, 2);
    const double phase = uniform(rng, 0.0, two_pi);
    const double a = amplitude * uniform(rng, 0.3, 1.0);
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) g(0, y, x) += a * std::sin(two_pi * (fx * x + fy * y) / side + phase);
    }
  }
  return g;
}

/// exp(-|x - centre|^2 / (2 * 0.15^2)) on [0, 1]^2 sampled at `side` points per axis.
Grid bump_field(int side) {
  Grid g(1, side, side);
  const double h = 1.0 / (side - 1);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double dx = x * h - 0.5;
      const double dy = y * h - 0.5;
      g(0, y, x) = std::exp(-(dx * dx + dy * dy) / (2.0 * 0.15 * 0.15));
    }
  }
  return g;
}

double linf(const Grid& a, const Grid& b) { return max_abs_difference(a, b); }

double relative_linf(const Grid& a, const Grid& b) {
  const double scale = std::max(b.values().abs().maxCoeff(), 1e-12);
  return max_abs_difference(a, b) / scale;
}

/// Random element of the lattice test group on an n x n grid with `channels` channels.
LatticeAction<double> random_lattice_action(int channels, int side, Rng& rng, bool rotations, bool permute_channels) {
  LatticeAction<double> h;
  Vec shift(2);
  shift << uniform_int(rng, -side, side), uniform_int(rng, -side, side);
  h.spatial = EuclideanTransform<double>::translation(shift);
  if (rotations) {
    auto r = EuclideanTransform<double>::quarter_turn(uniform_int(rng, 0, 3));
    if (uniform_int(rng, 0, 1)) r = EuclideanTransform<double>::reflection(2, uniform_int(rng, 0, 1)) * r;
    h.spatial = h.spatial * r;
  }
  if (permute_channels && channels > 1) {
    h.channel_perm.resize(static_cast<std::size_t>(channels));
    for (int c = 0; c < channels; ++c) h.channel_perm[static_cast<std::size_t>(c)] = c;
    std::shuffle(h.channel_perm.begin(), h.channel_perm.end(), rng);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Morphology with an optional sign flip of c_k (mutation rehearsal)

struct MorphologyUnderTest {
  bool flip = false;

  std::vector<WindowOffset<double>> table(const StructuringSpec<double>& spec, const GridGeometry<double>& geom) const {
    auto t = structuring_table(spec, geom);
    if (flip) {
      for (auto& o : t) o.cost = -o.cost;
    }
    return t;
  }
  Grid erode(const Grid& f, const StructuringSpec<double>& spec, const GridGeometry<double>& geom) const {
    return detail::window_scan<true>(f, table(spec, geom), geom.boundary);
  }
  Grid dilate(const Grid& f, const StructuringSpec<double>& spec, const GridGeometry<double>& geom) const {
    return detail::window_scan<false>(f, table(spec, geom), geom.boundary);
  }
};

// ---------------------------------------------------------------------------
// Channel permutation of CDE block parameters

ad::Buffer<double> permute_rows(const ad::Buffer<double>& v, const std::vector<int>& perm, std::size_t row) {
  ad::Buffer<double> out(v.size());
  for (std::size_t c = 0; c < perm.size(); ++c) {
    std::copy(v.begin() + static_cast<std::ptrdiff_t>(c * row), v.begin() + static_cast<std::ptrdiff_t>((c + 1) * row),
              out.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(perm[c]) * row));
  }
  return out;
}

ad::Buffer<double> permute_square(const ad::Buffer<double>& w, const std::vector<int>& perm) {
  const std::size_t n = perm.size();
  ad::Buffer<double> out(n * n);
  for (std::size_t o = 0; o < n; ++o) {
    for (std::size_t i = 0; i < n; ++i) {
      out[static_cast<std::size_t>(perm[o]) * n + static_cast<std::size_t>(perm[i])] = w[o * n + i];
    }
  }
  return out;
}

void randomize(ad::ParameterSet<double>& ps, Rng& rng, double scale) {
  for (auto& [name, t] : ps) {
    for (auto& v : t.mutable_data()) v += uniform(rng, -scale, scale);
  }
}

ad::Tensor<double> grid_batch(const std::vector<Grid>& grids) {
  const auto& g0 = grids.at(0);
  std::vector<double> v;
  for (const auto& g : grids) v.insert(v.end(), g.values().data(), g.values().data() + g.size());
  return ad::Tensor<double>({static_cast<int>(grids.size()), g0.channels(), g0.height(), g0.width()}, std::move(v));
}

Grid batch_item(const ad::Tensor<double>& t, int b) {
  const int c = t.dim(1), h = t.dim(2), w = t.dim(3);
  const Eigen::Index per = static_cast<Eigen::Index>(c) * h * w;
  return Grid(c, h, w, Eigen::Map<const Eigen::ArrayXd>(t.data().data() + b * per, per).eval());
}

ad::Tensor<double> random_tensor(const ad::Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(ad::shape_numel(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return ad::Tensor<double>(shape, std::move(v));
}

/// Input and scales for a windowed scan whose winner beats the runner-up by at
/// least 1e-3 everywhere (for both min and max), so central differences never
/// straddle a tie.
std::vector<ad::Tensor<double>> generic_window_inputs(Rng& rng, int c, int r, const std::vector<double>& base, double k) {
  const int side = 2 * r + 1;
  for (;;) {
    auto x = random_tensor({uniform_int(rng, 1, 2), c, 5, 5}, rng, -2, 2);
    auto scales = random_tensor({c}, rng, 0.3, 2.0);
    const auto costs = ad::structuring_costs(scales, base, k);
    double margin = std::numeric_limits<double>::infinity();
    for (int n = 0; n < x.dim(0); ++n)
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 5; ++y)
          for (int xx = 0; xx < 5; ++xx)
            for (const double sign : {1.0, -1.0}) {
              std::vector<double> cand;
              for (int o = 0; o < side * side; ++o) {
                const int sy = wrap_index(y + o / side - r, 5), sx = wrap_index(xx + o % side - r, 5);
                cand.push_back(sign * x.data()[static_cast<std::size_t>(((n * c + ch) * 5 + sy) * 5 + sx)] +
                               costs.data()[static_cast<std::size_t>(ch * side * side + o)]);
              }
              std::partial_sort(cand.begin(), cand.begin() + 2, cand.end());
              margin = std::min(margin, cand[1] - cand[0]);
            }
    if (margin >= 1e-3) return {x, scales};
  }
}


}  // namespace

// ---------------------------------------------------------------------------

std::vector<CheckResult> verify_geometry(const VerifyOptions& options) {
  const std::string suite = "geometry";
  Rng rng(options.seed);
  std::vector<CheckResult> out;

  {
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const int n = uniform_int(rng, 2, 3);
      const Vec x = random_ball_point(n, rng);
      const Vec y = random_ball_point(n, rng);
      Mat r;
      switch (uniform_int(rng, 0, 2)) {
        case 0: r = random_orthogonal(n, rng); break;
        case 1: r = random_signed_permutation(n, rng, false); break;
        default: r = random_signed_permutation(n, rng, true); break;
      }
      const EuclideanTransform<double> h(r, Vec::Zero(n));
      const double before = hyperbolic_distance<double>(x, y);
      const double after = hyperbolic_distance<double>(apply_transform(h, x), apply_transform(h, y));
      worst = std::max(worst, std::abs(after - before));
    }
    out.push_back(make_check(suite, "isometry_invariance", worst, 1e-12, "1000 pairs, n in {2,3}"));
  }

  {
    double asym = 0.0, self = 0.0, triangle = 0.0, min_separated = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 1000; ++i) {
      const int n = uniform_int(rng, 2, 3);
      const Vec x = random_ball_point(n, rng), y = random_ball_point(n, rng), z = random_ball_point(n, rng);
      const double dxy = hyperbolic_distance<double>(x, y);
      asym = std::max(asym, std::abs(dxy - hyperbolic_distance<double>(y, x)));
      self = std::max(self, hyperbolic_distance<double>(x, x));
      triangle = std::max(triangle, dxy - hyperbolic_distance<double>(x, z) - hyperbolic_distance<double>(z, y));
      if ((x - y).norm() > 1e-6) min_separated = std::min(min_separated, dxy);
    }
    out.push_back(make_check(suite, "metric_symmetry", asym, 0.0));
    out.push_back(make_check(suite, "metric_zero_on_diagonal", self, 0.0));
    out.push_back(make_check(suite, "triangle_inequality", std::max(0.0, triangle), 1e-12));
    out.push_back(make_check(suite, "metric_positive_off_diagonal", min_separated > 0.0 ? 0.0 : 1.0, 0.0));
  }

  {
    double s_phi = 0.0, phi_s = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const int n = uniform_int(rng, 2, 3);
      Vec x = random_vector(n, rng);
      x *= uniform(rng, 0.0, 10.0) / std::max(x.norm(), 1e-12);
      s_phi = std::max(s_phi, (unembed(embed(x)) - x).cwiseAbs().maxCoeff());
      const Vec p = random_ball_point(n, rng, 0.99);
      phi_s = std::max(phi_s, (embed(unembed(HyperbolicPoint<double>(p))).coords() - p).cwiseAbs().maxCoeff());
    }
    out.push_back(make_check(suite, "unembed_after_embed", s_phi, 1e-12, "|x| <= 10"));
    out.push_back(make_check(suite, "embed_after_unembed", phi_s, 1e-12, "|p| <= 0.99"));
  }

  {
    double worst = 0.0, min_det = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 1000; ++i) {
      const int n = uniform_int(rng, 2, 3);
      const Vec x = random_vector(n, rng, 2.0);
      const Mat j = embed_jacobian(x);
      Mat fd(n, n);
      const double h = 1e-6;
      for (int c = 0; c < n; ++c) {
        Vec up = x, down = x;
        up(c) += h;
        down(c) -= h;
        fd.col(c) = (embed(up).coords() - embed(down).coords()) / (2.0 * h);
      }
      worst = std::max(worst, (j - fd).cwiseAbs().maxCoeff() / std::max(fd.cwiseAbs().maxCoeff(), 1e-12));
      min_det = std::min(min_det, std::abs(j.determinant()));
    }
    out.push_back(make_check(suite, "embed_jacobian_vs_fd", worst, 1e-6, "relative"));
    std::ostringstream d;
    d << "min |det J| = " << min_det;
    out.push_back(make_check(suite, "embed_jacobian_nonsingular", min_det > 0.0 ? 0.0 : 1.0, 0.0, d.str()));
  }

  {
    double group_err = 0.0;
    double homo = 0.0;
    for (int i = 0; i < 200; ++i) {
      const auto a = random_lattice_action(3, 6, rng, true, true);
      const auto b = random_lattice_action(3, 6, rng, true, true);
      const auto c = random_lattice_action(3, 6, rng, true, true);
      const Vec x = random_vector(2, rng, 3.0).array().round().matrix();
      const Vec lhs = apply_transform(a.spatial, apply_transform(b.spatial, x));
      const Vec rhs = apply_transform(a.spatial * b.spatial, x);
      group_err = std::max(group_err, (lhs - rhs).cwiseAbs().maxCoeff());
      group_err = std::max(group_err, (apply_transform(a.spatial.inverse() * a.spatial, x) - x).cwiseAbs().maxCoeff());
      const auto ab_c = (a.spatial * b.spatial) * c.spatial;
      const auto a_bc = a.spatial * (b.spatial * c.spatial);
      group_err = std::max(group_err, (ab_c.linear() - a_bc.linear()).cwiseAbs().maxCoeff());
      group_err = std::max(group_err, (ab_c.shift() - a_bc.shift()).cwiseAbs().maxCoeff());

      const Grid f = random_grid(3, 6, 6, rng);
      const Grid lhs_f = left_regular_action(a, left_regular_action(b, f));
      const Grid rhs_f = left_regular_action(a * b, f);
      homo = std::max(homo, linf(lhs_f, rhs_f));
    }
    out.push_back(make_check(suite, "group_laws_discrete", group_err, 0.0));
    out.push_back(make_check(suite, "left_regular_action_homomorphism", homo, 0.0, "bit-exact"));
  }
  return out;
}

std::vector<CheckResult> verify_morphology(const VerifyOptions& options) {
  const std::string suite = "morphology";
  Rng rng(options.seed + 1);
  const MorphologyUnderTest morph{options.flip_structuring_sign};
  std::vector<CheckResult> out;

  {
    const StructuringSpec<double> spec(2.0, 1.0);
    out.push_back(make_check(suite, "structuring_c2_quarter", std::abs(structuring_value(spec, 1.0) - 0.25), 1e-15));
  }

  {
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      const int side = uniform_int(rng, 4, 12);
      const Grid f = random_grid(uniform_int(rng, 1, 3), side, side, rng, -3.0, 3.0);
      const DistanceMode mode = uniform_int(rng, 0, 1) ? DistanceMode::euclidean : DistanceMode::hyperbolic_embedded;
      const StructuringSpec<double> spec(uniform(rng, 1.2, 4.0), uniform(rng, 0.2, 3.0), uniform_int(rng, 1, 3), mode,
                                         uniform(rng, 0.1, 1.0));
      const GridGeometry<double> geom(side, side);
      const Grid lhs = morph.dilate(f, spec, geom);
      const Grid rhs = -morph.erode(-f, spec, geom);
      for (Eigen::Index j = 0; j < lhs.size(); ++j) {
        if (lhs.values()[j] != rhs.values()[j]) worst = std::max(worst, std::abs(lhs.values()[j] - rhs.values()[j]) + 1e-300);
      }
    }
    out.push_back(make_check(suite, "duality_bit_exact", worst, 0.0, "100 grids"));
  }

  {
    long violations = 0;
    for (int i = 0; i < 100; ++i) {
      const int r = uniform_int(rng, 1, 2);
      const Grid f1 = random_grid(1, 8, 8, rng);
      Grid f2 = flat_dilate(f1, r);
      for (Eigen::Index j = 0; j < f2.size(); ++j) f2.values()[j] += uniform(rng, 0.0, 0.5);
      if (i % 2 == 1) f2.values()[uniform_int(rng, 0, 63)] -= 2.0;
      const bool lhs = (flat_dilate(f1, r).values() <= f2.values()).all();
      const bool rhs = (f1.values() <= flat_erode(f2, r).values()).all();
      if (lhs != rhs) ++violations;
      if (!(flat_erode(flat_dilate(f1, r), r).values() >= f1.values()).all()) ++violations;
      if (!(flat_dilate(flat_erode(f1, r), r).values() <= f1.values()).all()) ++violations;
    }
    out.push_back(make_check(suite, "adjunction_8x8", static_cast<double>(violations), 0.0, "violations over 100 trials"));
  }

  {
    long violations = 0;
    for (int i = 0; i < 100; ++i) {
      const int side = 8;
      const Grid f1 = random_grid(1, side, side, rng);
      Grid f2 = f1;
      for (Eigen::Index j = 0; j < f2.size(); ++j) f2.values()[j] -= uniform(rng, 0.0, 0.5);
      const StructuringSpec<double> spec(uniform(rng, 1.2, 4.0), uniform(rng, 0.2, 3.0), uniform_int(rng, 1, 3));
      const GridGeometry<double> geom(side, side);
      violations += (morph.erode(f1, spec, geom).values() < morph.erode(f2, spec, geom).values()).count();
      violations += (morph.dilate(f1, spec, geom).values() < morph.dilate(f2, spec, geom).values()).count();
    }
    out.push_back(make_check(suite, "monotonicity", static_cast<double>(violations), 0.0, "violations over 100 trials"));
  }

  {
    double worst = 0.0;
    for (int i = 0; i < 3; ++i) {
      const Grid f = smooth_field(32, rng, 1.0);
      const GridGeometry<double> geom(32, 32, 1.0 / 31.0, HyperbolicPoint<double>::origin(2), Boundary::open);
      const StructuringSpec<double> half(2.0, 0.5, 31);
      const Grid twice = morph.erode(morph.erode(f, half, geom), half, geom);
      const Grid once = morph.erode(f, half.with_t(1.0), geom);
      worst = std::max(worst, relative_linf(twice, once));
    }
    out.push_back(make_check(suite, "semigroup_k2", worst, 0.02, "32x32 on [0,1]^2, s = tau = 0.5 vs t = 1"));
  }

  {
    const int side = 64;
    const double h = 1.0 / (side - 1);
    MorphPDEProblem<double> p;
    p.initial = bump_field(side);
    p.k = 2.0;
    p.lp_norm = LpNorm::l2;
    p.sign = MorphSign::erosion;
    p.horizon = 0.25;
    p.grid_spacing = h;
    const Grid hl = hopf_lax_solve(p);
    const GridGeometry<double> geom(side, side, h, HyperbolicPoint<double>::origin(2), Boundary::open);
    const Grid ex = morph.erode(p.initial, StructuringSpec<double>(2.0, 0.25, side - 1), geom);
    out.push_back(make_check(suite, "hopf_lax_vs_exhaustive_erode", linf(hl, ex), 1e-12, "64x64 bump, k=2, p=2, t=0.25"));
    const Grid fd = fd_hj_solve(p);
    out.push_back(make_check(suite, "hopf_lax_vs_fd_oracle", linf(hl, fd), 0.05, "64x64 bump, k=2, p=2, t=0.25"));
    out.push_back(make_check(suite, "exhaustive_erode_vs_fd_oracle", linf(ex, fd), 0.05, "64x64 bump, k=2, p=2, t=0.25"));

    p.sign = MorphSign::dilation;
    p.initial = -bump_field(side);
    out.push_back(make_check(suite, "hopf_lax_vs_fd_oracle_dilation", linf(hopf_lax_solve(p), fd_hj_solve(p)), 0.05));
  }

  {
    double worst = 0.0;
    for (int i = 0; i < 10; ++i) {
      const Grid f = smooth_field(16, rng, 2.0);
      const GridGeometry<double> geom(16, 16);
      const StructuringSpec<double> spec(uniform(rng, 1.5, 3.0), 1e-6, 2);
      worst = std::max(worst, linf(morph.erode(f, spec, geom), f));
      worst = std::max(worst, linf(morph.dilate(f, spec, geom), f));
    }
    out.push_back(make_check(suite, "initial_condition_t_small", worst, 1e-3, "t = 1e-6"));
  }

  {
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
      const Grid f = random_grid(2, 7, 9, rng);
      ConvectionSpec<double> spec;
      const int sx = uniform_int(rng, -4, 4), sy = uniform_int(rng, -4, 4);
      spec.velocity = {Eigen::Vector2d(sx, sy), Eigen::Vector2d(-sy, sx)};
      spec.time = 1.0;
      const Grid u = convect(f, spec);
      for (int y = 0; y < 7; ++y) {
        for (int x = 0; x < 9; ++x) {
          worst = std::max(worst, std::abs(u(0, y, x) - f(0, wrap_index(y - sy, 7), wrap_index(x - sx, 9))));
          worst = std::max(worst, std::abs(u(1, y, x) - f(1, wrap_index(y - sx, 7), wrap_index(x + sy, 9))));
        }
      }
    }
    out.push_back(make_check(suite, "convect_integer_shift_exact", worst, 0.0));
  }
  return out;
}

std::vector<CheckResult> verify_equivariance(const VerifyOptions& options) {
  const std::string suite = "equivariance";
  Rng rng(options.seed + 2);
  std::vector<CheckResult> out;
  constexpr int kTrials = 50;

  for (const bool erosion : {true, false}) {
    double worst = 0.0;
    for (int i = 0; i < kTrials; ++i) {
      const int side = uniform_int(rng, 5, 10);
      const Grid f = random_grid(3, side, side, rng);
      const DistanceMode mode = uniform_int(rng, 0, 1) ? DistanceMode::euclidean : DistanceMode::hyperbolic_embedded;
      const StructuringSpec<double> spec(uniform(rng, 1.2, 4.0), uniform(rng, 0.2, 3.0), uniform_int(rng, 1, 3), mode);
      const GridGeometry<double> geom(side, side);
      const auto h = random_lattice_action(3, side, rng, true, true);
      auto op = [&](const Grid& g) { return erosion ? erode(g, spec, geom) : dilate(g, spec, geom); };
      worst = std::max(worst, relative_linf(op(left_regular_action(h, f)), left_regular_action(h, op(f))));
    }
    out.push_back(make_check(suite, erosion ? "erode" : "dilate", worst, 1e-5, "translations, rotations, flips, channels"));
  }

  {
    double worst = 0.0;
    for (int i = 0; i < kTrials; ++i) {
      const int side = uniform_int(rng, 5, 10);
      const Grid f = random_grid(3, side, side, rng);
      ConvectionSpec<double> spec;
      for (int c = 0; c < 3; ++c) spec.velocity.emplace_back(uniform(rng, -2.0, 2.0), uniform(rng, -2.0, 2.0));
      spec.time = uniform(rng, 0.1, 1.5);
      auto h = random_lattice_action(3, side, rng, false, true);
      // permuting channels carries each channel's velocity along
      ConvectionSpec<double> moved = spec;
      for (int c = 0; c < 3; ++c) moved.velocity[static_cast<std::size_t>(h.channel_perm[static_cast<std::size_t>(c)])] = spec.velocity[static_cast<std::size_t>(c)];
      worst = std::max(worst, relative_linf(convect(left_regular_action(h, f), moved), left_regular_action(h, convect(f, spec))));
    }
    out.push_back(make_check(suite, "convect", worst, 1e-5, "integer translations, channels"));
  }

  UNetConfig mid;
  mid.base_channels = 8;
  mid.stages = 0;
  mid.channel_mult = {};
  mid.middle_attention = false;
  mid.middle_blocks = 2;
  mid.norm_groups = 1;
  mid.padding = ad::Padding::periodic;
  mid.image_side = 8;

  auto block_check = [&](const std::string& name, bool rotations, bool velocities, DistanceMode mode) {
    double worst = 0.0;
    for (int i = 0; i < kTrials; ++i) {
      UNetConfig cfg = mid;
      cfg.distance_mode = mode;
      ad::ParameterSet<double> ps;
      nn::Rng init(options.seed + static_cast<std::uint64_t>(i));
      nn::CdeBlock<double> block(ps, "cde", 8, 16, cfg, init);
      randomize(ps, rng, 0.3);
      if (!velocities) std::fill(block.velocity.mutable_data().begin(), block.velocity.mutable_data().end(), 0.0);
      const int side = uniform_int(rng, 5, 9);
      const Grid f = random_grid(8, side, side, rng);
      const auto emb = random_tensor({1, 16}, rng);
      const auto h = random_lattice_action(8, side, rng, rotations, false);
      const Grid lhs = batch_item(block(grid_batch({left_regular_action(h, f)}), emb), 0);
      const Grid rhs = left_regular_action(h, batch_item(block(grid_batch({f}), emb), 0));
      worst = std::max(worst, relative_linf(lhs, rhs));
    }
    out.push_back(make_check(suite, name, worst, 1e-5));
  };
  block_check("cde_block_rotations_flips", true, false, DistanceMode::euclidean);
  block_check("cde_block_rotations_flips_hyperbolic", true, false, DistanceMode::hyperbolic_embedded);
  block_check("cde_block_translations_learned_velocity", false, true, DistanceMode::euclidean);

  {
    double worst = 0.0;
    for (int i = 0; i < kTrials; ++i) {
      const int channels = 6;
      UNetConfig cfg = mid;
      ad::ParameterSet<double> pa, pb;
      nn::Rng ia(options.seed + 100 + static_cast<std::uint64_t>(i));
      nn::Rng ib(options.seed + 100 + static_cast<std::uint64_t>(i));
      nn::CdeBlock<double> a(pa, "cde", channels, 4, cfg, ia);
      nn::CdeBlock<double> b(pb, "cde", channels, 4, cfg, ib);
      randomize(pa, rng, 0.3);
      std::vector<int> perm(channels);
      for (int c = 0; c < channels; ++c) perm[static_cast<std::size_t>(c)] = c;
      std::shuffle(perm.begin(), perm.end(), rng);
      for (std::size_t j = 0; j < pa.size(); ++j) {
        const auto& src = pa.tensor(j);
        const auto& name = pa.name(j);
        auto& dst = pb.tensor(j).mutable_data();
        if (name.find("w_in.weight") != std::string::npos || name.find("w_out.weight") != std::string::npos) {
          dst = permute_square(src.data(), perm);
        } else {
          dst = permute_rows(src.data(), perm, src.numel() / static_cast<std::size_t>(channels));
        }
      }
      const Grid f = random_grid(channels, 6, 6, rng);
      const auto emb = random_tensor({1, 4}, rng);
      LatticeAction<double> h;
      h.channel_perm = perm;
      const Grid lhs = batch_item(b(grid_batch({left_regular_action(h, f)}), emb), 0);
      const Grid rhs = left_regular_action(h, batch_item(a(grid_batch({f}), emb), 0));
      worst = std::max(worst, relative_linf(lhs, rhs));
    }
    out.push_back(make_check(suite, "cde_block_channel_permutation", worst, 1e-12, "parameters permuted with channels"));
  }

  {
    double worst = 0.0;
    for (int i = 0; i < kTrials; ++i) {
      UNetConfig cfg = mid;
      cfg.middle_attention = true;
      cfg.image_side = 8;
      GmcUnet<double> net(cfg, options.seed + static_cast<std::uint64_t>(i));
      randomize(net.parameters(), rng, 0.2);
      const Grid f = random_grid(1, 8, 8, rng);
      const auto h = random_lattice_action(1, 8, rng, false, false);
      const int step = uniform_int(rng, 1, 200);
      const Grid lhs = batch_item(net.forward(grid_batch({left_regular_action(h, f)}), step), 0);
      const Grid rhs = left_regular_action(h, batch_item(net.forward(grid_batch({f}), step), 0));
      worst = std::max(worst, relative_linf(lhs, rhs));
    }
    out.push_back(make_check(suite, "gmcunet_stages0_translations", worst, 1e-5, "periodic padding, attention on"));
  }
  return out;
}

std::vector<CheckResult> verify_gradients(const VerifyOptions& options) {
  const std::string suite = "gradients";
  Rng rng(options.seed + 3);
  std::vector<CheckResult> out;
  using T = ad::Tensor<double>;
  using Fn = std::function<T(const std::vector<T>&)>;
  constexpr int kConfigs = 20;

  auto run = [&](const std::string& name, double tol, const std::function<std::pair<Fn, std::vector<T>>(int)>& make) {
    double worst = 0.0;
    for (int i = 0; i < kConfigs; ++i) {
      auto [fn, inputs] = make(i);
      worst = std::max(worst, ad::gradient_check<double>(fn, inputs, options.seed + static_cast<std::uint64_t>(i)).relative_error);
    }
    out.push_back(make_check(suite, name, worst, tol, std::to_string(kConfigs) + " configurations"));
  };
  auto shape4 = [&] { return ad::Shape{uniform_int(rng, 1, 2), uniform_int(rng, 1, 3), uniform_int(rng, 3, 5), uniform_int(rng, 3, 5)}; };

  run("add", 1e-4, [&](int) { const auto s = shape4(); return std::pair{Fn([](const std::vector<T>& v) { return ad::add(v[0], v[1]); }), std::vector<T>{random_tensor(s, rng), random_tensor(s, rng)}}; });
  run("mul", 1e-4, [&](int) { const auto s = shape4(); return std::pair{Fn([](const std::vector<T>& v) { return ad::mul(v[0], v[1]); }), std::vector<T>{random_tensor(s, rng), random_tensor(s, rng)}}; });
  run("silu", 1e-4, [&](int) { return std::pair{Fn([](const std::vector<T>& v) { return ad::silu(v[0]); }), std::vector<T>{random_tensor(shape4(), rng, -3, 3)}}; });
  run("softplus", 1e-4, [&](int) { return std::pair{Fn([](const std::vector<T>& v) { return ad::softplus(v[0]); }), std::vector<T>{random_tensor(shape4(), rng, -3, 3)}}; });
  run("mean_mse", 1e-4, [&](int) { const auto s = shape4(); return std::pair{Fn([](const std::vector<T>& v) { return ad::mse(v[0], v[1]); }), std::vector<T>{random_tensor(s, rng), random_tensor(s, rng)}}; });
  run("matmul", 1e-3, [&](int) {
    const int m = uniform_int(rng, 1, 4), k = uniform_int(rng, 1, 4), n = uniform_int(rng, 1, 4);
    return std::pair{Fn([](const std::vector<T>& v) { return ad::matmul(v[0], v[1]); }), std::vector<T>{random_tensor({m, k}, rng), random_tensor({k, n}, rng)}};
  });
  run("bmm_transposed", 1e-3, [&](int) {
    const int b = uniform_int(rng, 1, 3), m = uniform_int(rng, 1, 4), k = uniform_int(rng, 1, 4), n = uniform_int(rng, 1, 4);
    return std::pair{Fn([](const std::vector<T>& v) { return ad::bmm(v[0], v[1], true, true); }), std::vector<T>{random_tensor({b, k, m}, rng), random_tensor({b, n, k}, rng)}};
  });
  run("linear", 1e-3, [&](int) {
    const int b = uniform_int(rng, 1, 3), in = uniform_int(rng, 1, 5), o = uniform_int(rng, 1, 5);
    return std::pair{Fn([](const std::vector<T>& v) { return ad::linear(v[0], v[1], v[2]); }), std::vector<T>{random_tensor({b, in}, rng), random_tensor({o, in}, rng), random_tensor({o}, rng)}};
  });
  run("conv2d", 1e-3, [&](int i) {
    const int cin = uniform_int(rng, 1, 3), cout = uniform_int(rng, 1, 3), k = uniform_int(rng, 0, 1) ? 3 : 1;
    const int stride = uniform_int(rng, 1, 2);
    const ad::Padding pad = i % 2 ? ad::Padding::periodic : ad::Padding::zero;
    return std::pair{Fn([=](const std::vector<T>& v) { return ad::conv2d(v[0], v[1], v[2], stride, pad); }),
                     std::vector<T>{random_tensor({uniform_int(rng, 1, 2), cin, 4, 6}, rng), random_tensor({cout, cin, k, k}, rng), random_tensor({cout}, rng)}};
  });
  run("upsample_concat", 1e-4, [&](int) {
    const int b = uniform_int(rng, 1, 2);
    return std::pair{Fn([](const std::vector<T>& v) { return ad::concat_channels(ad::upsample_nearest2x(v[0]), v[1]); }),
                     std::vector<T>{random_tensor({b, 2, 2, 3}, rng), random_tensor({b, 1, 4, 6}, rng)}};
  });
  run("group_norm", 1e-3, [&](int) {
    const int c = 2 * uniform_int(rng, 1, 2);
    const int groups = uniform_int(rng, 1, 2);
    return std::pair{Fn([=](const std::vector<T>& v) { return ad::group_norm(v[0], groups, v[1], v[2]); }),
                     std::vector<T>{random_tensor({uniform_int(rng, 1, 2), c, 3, 3}, rng), random_tensor({c}, rng, 0.5, 1.5), random_tensor({c}, rng)}};
  });
  run("softmax", 1e-3, [&](int) { return std::pair{Fn([](const std::vector<T>& v) { return ad::softmax(v[0]); }), std::vector<T>{random_tensor({uniform_int(rng, 1, 3), uniform_int(rng, 2, 6)}, rng, -2, 2)}}; });
  run("bilinear_shift", 1e-3, [&](int) {
    const int c = uniform_int(rng, 1, 3);
    const double time = uniform(rng, 0.3, 1.5);
    return std::pair{Fn([=](const std::vector<T>& v) { return ad::bilinear_shift(v[0], v[1], time); }),
                     std::vector<T>{random_tensor({uniform_int(rng, 1, 2), c, 4, 5}, rng), random_tensor({c, 2}, rng, -2, 2)}};
  });
  for (const bool minimum : {true, false}) {
    run(minimum ? "window_min_structuring" : "window_max_structuring", 1e-4, [&](int) {
      const int c = uniform_int(rng, 1, 3), r = uniform_int(rng, 1, 2);
      const double k = uniform(rng, 1.5, 3.0);
      const StructuringSpec<double> spec(k, 1.0, r);
      std::vector<double> base;
      for (const auto& o : structuring_table(spec, GridGeometry<double>(1, 1))) base.push_back(o.cost);
      return std::pair{Fn([=](const std::vector<T>& v) {
                         const auto costs = ad::structuring_costs(v[1], base, k);
                         return minimum ? ad::window_min(v[0], costs, r) : ad::window_max(v[0], costs, r);
                       }),
                       generic_window_inputs(rng, c, r, base, k)};
    });
  }
  run("attention_block", 1e-3, [&](int i) {
    auto ps = std::make_shared<ad::ParameterSet<double>>();
    nn::Rng init(options.seed + static_cast<std::uint64_t>(i));
    auto block = std::make_shared<nn::AttentionBlock<double>>(*ps, "attn", 4, uniform_int(rng, 1, 2), init);
    std::vector<T> inputs{random_tensor({uniform_int(rng, 1, 2), 4, 2, 3}, rng)};
    return std::pair{Fn([ps, block](const std::vector<T>& v) { return (*block)(v[0]); }), inputs};
  });

  {
    double worst = 0.0;
    for (int i = 0; i < kConfigs; ++i) {
      UNetConfig cfg;
      cfg.norm_groups = 2;
      cfg.window_radius = uniform_int(rng, 1, 2);
      cfg.k = uniform(rng, 1.5, 3.0);
      cfg.distance_mode = i % 2 ? DistanceMode::hyperbolic_embedded : DistanceMode::euclidean;
      cfg.padding = i % 3 ? ad::Padding::periodic : ad::Padding::zero;
      ad::ParameterSet<double> ps;
      nn::Rng init(options.seed + static_cast<std::uint64_t>(i));
      nn::CdeBlock<double> block(ps, "cde", 4, 6, cfg, init);
      randomize(ps, rng, 0.3);
      for (auto& v : block.velocity.mutable_data()) v = uniform(rng, -1.5, 1.5);
      const int batch = uniform_int(rng, 1, 2);
      T input(ad::Shape{batch, 4, 5, 5}, random_tensor({batch, 4, 5, 5}, rng).data(), true);
      T emb(ad::Shape{batch, 6}, random_tensor({batch, 6}, rng).data(), true);
      std::vector<T> leaves{input, emb};
      for (auto& [name, t] : ps) leaves.push_back(t);
      worst = std::max(worst, ad::gradient_check_leaves<double>([&] { return block(input, emb); }, leaves,
                                                              options.seed + static_cast<std::uint64_t>(i)).relative_error);
    }
    out.push_back(make_check(suite, "cde_block_end_to_end", worst, 1e-3, "input, time embedding and all parameters"));
  }
  return out;
}

std::vector<CheckResult> verify_diffusion(const VerifyOptions& options) {
  const std::string suite = "diffusion";
  Rng rng(options.seed + 4);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<CheckResult> out;
  const DiffusionSchedule s = make_schedule(200, 1e-4, 0.02);
  constexpr int kSamples = 10000;

  auto gaussian_array = [&](Eigen::Index n) {
    Eigen::ArrayXd a(n);
    for (Eigen::Index i = 0; i < n; ++i) a[i] = normal(rng);
    return a;
  };
  auto moment_errors = [](const Eigen::ArrayXd& x, double mean, double var) {
    const double n = static_cast<double>(x.size());
    const double m = x.mean();
    const double v = (x - m).square().sum() / (n - 1.0);
    const double se_mean = std::sqrt(var / n);
    const double se_var = var * std::sqrt(2.0 / (n - 1.0));
    return std::max(std::abs(m - mean) / se_mean, std::abs(v - var) / se_var);
  };

  {
    double worst = 0.0;
    for (const int t : {1, 50, 200}) {
      const Eigen::ArrayXd n0 = Eigen::ArrayXd::Constant(kSamples, 0.7);
      const Eigen::ArrayXd nt = forward_sample(n0, t, gaussian_array(kSamples), s);
      worst = std::max(worst, moment_errors(nt, std::sqrt(s.alpha_bar_at(t)) * 0.7, 1.0 - s.alpha_bar_at(t)));
    }
    out.push_back(make_check(suite, "forward_marginal_monte_carlo", worst, 4.0, "standard errors, 1e4 samples"));
  }

  {
    const Eigen::ArrayXd n0 = Eigen::ArrayXd::Constant(kSamples, -0.4);
    const Eigen::ArrayXd n1 = forward_step(n0, 1, gaussian_array(kSamples), s);
    const Eigen::ArrayXd n2 = forward_step(n1, 2, gaussian_array(kSamples), s);
    const double err = moment_errors(n2, std::sqrt(s.alpha_bar_at(2)) * -0.4, 1.0 - s.alpha_bar_at(2));
    out.push_back(make_check(suite, "two_step_kernel_composition", err, 4.0, "standard errors, 1e4 samples"));
  }

  {
    const Eigen::ArrayXd n0 = Eigen::ArrayXd::Random(256);
    const Eigen::ArrayXd eps = gaussian_array(256);
    const Eigen::ArrayXd n1 = forward_sample(n0, 1, eps, s);
    const double err = (posterior_mean(n1, eps, 1, s) - n0).abs().maxCoeff();
    const double err2 = (reverse_step(n1, eps, 1, s, gaussian_array(256)) - n0).abs().maxCoeff();
    out.push_back(make_check(suite, "t1_exact_epsilon_reconstruction", std::max(err, err2), 1e-6));
  }

  {
    const Eigen::ArrayXd mu = Eigen::ArrayXd::Random(64);
    double zero = 0.0;
    double min_positive = std::numeric_limits<double>::infinity();
    for (int t = 2; t <= s.T; t += 9) {
      zero = std::max(zero, gaussian_kl_shared_variance(mu, mu, s.sigma2_at(t)));
      Eigen::ArrayXd other = mu;
      other[t % 64] += 1e-3;
      min_positive = std::min(min_positive, gaussian_kl_shared_variance(mu, other, s.sigma2_at(t)));
    }
    out.push_back(make_check(suite, "kl_zero_iff_means_equal", zero + (min_positive > 0.0 ? 0.0 : 1.0), 0.0));
  }

  {
    const double s2 = 0.25;
    const DiffusionSchedule big = make_schedule(1000, 1e-4, 0.02);
    Eigen::ArrayXd x = gaussian_array(kSamples);
    for (int t = big.T; t >= 1; --t) {
      const double ab = big.alpha_bar_at(t);
      const Eigen::ArrayXd eps_hat = std::sqrt(1.0 - ab) * x / (ab * s2 + 1.0 - ab);
      x = reverse_step(x, eps_hat, t, big, gaussian_array(kSamples));
    }
    const double var = (x - x.mean()).square().sum() / (kSamples - 1.0);
    std::ostringstream d;
    d << "sample variance " << var << " vs " << s2 << ", mean " << x.mean();
    out.push_back(make_check(suite, "gaussian_optimal_sampler_variance", std::abs(var - s2) / s2, 0.05, d.str()));
  }
  return out;
}

const std::vector<std::string>& verify_suites() {
  static const std::vector<std::string> names{"geometry", "morphology", "equivariance", "gradients", "diffusion"};
  return names;
}

std::vector<CheckResult> run_verification(const std::string& suite, const VerifyOptions& options) {
  if (suite == "all") {
    std::vector<CheckResult> all;
    for (const auto& name : verify_suites()) {
      auto part = run_verification(name, options);
      all.insert(all.end(), part.begin(), part.end());
    }
    return all;
  }
  if (suite == "geometry") return verify_geometry(options);
  if (suite == "morphology") return verify_morphology(options);
  if (suite == "equivariance") return verify_equivariance(options);
  if (suite == "gradients") return verify_gradients(options);
  if (suite == "diffusion") return verify_diffusion(options);
  throw std::invalid_argument("unknown verification suite '" + suite + "'");
}

void write_verification_csv(const std::vector<CheckResult>& results, const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : results) {
    std::ostringstream e, t;
    e << std::setprecision(6) << r.error;
    t << std::setprecision(6) << r.tolerance;
    rows.push_back({r.suite, r.name, e.str(), t.str(), r.passed ? "true" : "false", r.detail});
  }
  emit_csv({"suite", "check", "error", "tolerance", "passed", "detail"}, rows, path);
}

void print_verification(const std::vector<CheckResult>& results, std::ostream& out) {
  for (const auto& r : results) {
    out << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(14) << r.suite << std::setw(42) << r.name << std::right
        << " error " << std::setprecision(3) << std::scientific << r.error << " tol " << r.tolerance << std::defaultfloat;
    if (!r.detail.empty()) out << "  (" << r.detail << ')';
    out << '\n';
  }
}

}  // namespace mflow
