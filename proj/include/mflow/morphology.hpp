#pragma once

// Multiscale morphology as group morphological convolutions on the lattice,
// Hopf-Lax and upwind finite-difference solvers for u_t +/- |grad u|_p^k = 0,
// and translation-group convection.

#include "mflow/geometry.hpp"
#include "mflow/grid.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace mflow {

enum class DistanceMode { euclidean, hyperbolic_embedded };

/// Parameters of the structuring family b_t^k(d) = c_k d^{k/(k-1)} / t^{1/(k-1)}.
template <typename Scalar>
class StructuringSpec {
 public:
  StructuringSpec(Scalar k, Scalar t, int window_radius = 3, DistanceMode mode = DistanceMode::euclidean,
                  Scalar metric_scale = Scalar(1))
      : k_(k), t_(t), window_radius_(window_radius), mode_(mode), metric_scale_(metric_scale) {
    if (!(k > Scalar(1))) throw std::invalid_argument("StructuringSpec: k must be > 1");
    if (!(t > Scalar(0))) throw std::invalid_argument("StructuringSpec: t must be > 0");
    if (window_radius < 1) throw std::invalid_argument("StructuringSpec: window_radius must be >= 1");
    if (!(metric_scale > Scalar(0))) throw std::invalid_argument("StructuringSpec: metric_scale must be > 0");
  }

  Scalar k() const { return k_; }
  Scalar t() const { return t_; }
  int window_radius() const { return window_radius_; }
  DistanceMode distance_mode() const { return mode_; }
  Scalar metric_scale() const { return metric_scale_; }

  /// c_k = (k - 1) / k^{k/(k-1)}
  Scalar c_k() const { return (k_ - Scalar(1)) / std::pow(k_, exponent()); }
  /// k / (k - 1)
  Scalar exponent() const { return k_ / (k_ - Scalar(1)); }

  StructuringSpec with_t(Scalar t) const { return {k_, t, window_radius_, mode_, metric_scale_}; }
  StructuringSpec with_radius(int r) const { return {k_, t_, r, mode_, metric_scale_}; }

 private:
  Scalar k_;
  Scalar t_;
  int window_radius_;
  DistanceMode mode_;
  Scalar metric_scale_;
};

template <typename Scalar>
Scalar structuring_value(const StructuringSpec<Scalar>& spec, Scalar dist) {
  if (!(dist >= Scalar(0))) throw std::invalid_argument("structuring_value: distance must be >= 0");
  if (dist == Scalar(0)) return Scalar(0);
  return spec.c_k() * std::pow(dist, spec.exponent()) / std::pow(spec.t(), Scalar(1) / (spec.k() - Scalar(1)));
}

/// Distance attached to a pixel offset (dx, dy): the offset is scaled into R^2
/// and, in hyperbolic mode, embedded into B^2 around the base point.
template <typename Scalar>
Scalar offset_distance(const StructuringSpec<Scalar>& spec, const GridGeometry<Scalar>& geom, int dx, int dy) {
  const Scalar scale = spec.metric_scale() * geom.pixel_scale;
  if (spec.distance_mode() == DistanceMode::euclidean) {
    return scale * std::sqrt(Scalar(dx) * Scalar(dx) + Scalar(dy) * Scalar(dy));
  }
  if (dx == 0 && dy == 0) return Scalar(0);
  Vector<Scalar> v = unembed(geom.base_point);
  v(0) += scale * Scalar(dx);
  v(1) += scale * Scalar(dy);
  return hyperbolic_distance(embed(v), geom.base_point);
}

/// One entry of a structuring table: lattice offset and its cost.
template <typename Scalar>
struct WindowOffset {
  int dy;
  int dx;
  Scalar cost;
};

/// Offsets of the (2r+1)^2 window in row-major order with costs b_t^k(d(offset)).
template <typename Scalar>
std::vector<WindowOffset<Scalar>> structuring_table(const StructuringSpec<Scalar>& spec,
                                                    const GridGeometry<Scalar>& geom) {
  const int r = spec.window_radius();
  std::vector<WindowOffset<Scalar>> table;
  table.reserve(static_cast<std::size_t>((2 * r + 1) * (2 * r + 1)));
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      table.push_back({dy, dx, structuring_value(spec, offset_distance(spec, geom, dx, dy))});
    }
  }
  return table;
}

/// Zero-cost square window of radius r.
template <typename Scalar>
std::vector<WindowOffset<Scalar>> flat_table(int radius) {
  if (radius < 1) throw std::invalid_argument("flat morphology: radius must be >= 1");
  std::vector<WindowOffset<Scalar>> table;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) table.push_back({dy, dx, Scalar(0)});
  }
  return table;
}

namespace detail {

// Scans every output pixel over the offset table. Erosion: min of f(y) + cost;
// dilation: max of f(y) - cost. Ties keep the first offset in table order.
template <bool Erosion, typename Scalar>
GridFunction<Scalar> window_scan(const GridFunction<Scalar>& f, const std::vector<WindowOffset<Scalar>>& table,
                                 Boundary boundary) {
  if (f.empty()) throw std::invalid_argument("morphology: empty grid");
  const int h = f.height();
  const int w = f.width();
  GridFunction<Scalar> out(f.channels(), h, w);
  constexpr Scalar worst = Erosion ? std::numeric_limits<Scalar>::infinity() : -std::numeric_limits<Scalar>::infinity();
  for (int c = 0; c < f.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        Scalar best = worst;
        for (const auto& o : table) {
          int sy = y + o.dy;
          int sx = x + o.dx;
          if (boundary == Boundary::periodic) {
            sy = wrap_index(sy, h);
            sx = wrap_index(sx, w);
          } else if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
            continue;
          }
          if constexpr (Erosion) {
            const Scalar v = f(c, sy, sx) + o.cost;
            if (v < best) best = v;
          } else {
            const Scalar v = f(c, sy, sx) - o.cost;
            if (v > best) best = v;
          }
        }
        out(c, y, x) = best;
      }
    }
  }
  return out;
}

}  // namespace detail

/// out(x) = min over window offsets o of f(x + o) + b_t^k(d(o)), per channel.
template <typename Scalar>
GridFunction<Scalar> erode(const GridFunction<Scalar>& f, const StructuringSpec<Scalar>& spec,
                           const GridGeometry<Scalar>& geom) {
  return detail::window_scan<true>(f, structuring_table(spec, geom), geom.boundary);
}

/// out(x) = max over window offsets o of f(x + o) - b_t^k(d(o)), per channel.
template <typename Scalar>
GridFunction<Scalar> dilate(const GridFunction<Scalar>& f, const StructuringSpec<Scalar>& spec,
                            const GridGeometry<Scalar>& geom) {
  return detail::window_scan<false>(f, structuring_table(spec, geom), geom.boundary);
}

template <typename Scalar>
GridFunction<Scalar> flat_erode(const GridFunction<Scalar>& f, int radius, Boundary boundary = Boundary::periodic) {
  return detail::window_scan<true>(f, flat_table<Scalar>(radius), boundary);
}

template <typename Scalar>
GridFunction<Scalar> flat_dilate(const GridFunction<Scalar>& f, int radius, Boundary boundary = Boundary::periodic) {
  return detail::window_scan<false>(f, flat_table<Scalar>(radius), boundary);
}

enum class LpNorm { l1, l2, linf };
enum class MorphSign { erosion, dilation };

/// Cauchy problem u_t +/- |grad u|_p^k = 0, u(., 0) = initial.
template <typename Scalar>
struct MorphPDEProblem {
  GridFunction<Scalar> initial;
  Scalar k = Scalar(2);
  LpNorm lp_norm = LpNorm::l2;
  MorphSign sign = MorphSign::erosion;
  Scalar horizon = Scalar(1);
  Scalar grid_spacing = Scalar(1);

  void validate() const {
    if (initial.empty()) throw std::invalid_argument("MorphPDEProblem: empty initial condition");
    if (!(k > Scalar(1))) throw std::invalid_argument("MorphPDEProblem: k must be > 1");
    if (!(horizon > Scalar(0))) throw std::invalid_argument("MorphPDEProblem: horizon must be > 0");
    if (!(grid_spacing > Scalar(0))) throw std::invalid_argument("MorphPDEProblem: grid_spacing must be > 0");
  }
};

/// Norm dual to l_p, which the Legendre transform of |q|_p^k is expressed in.
inline LpNorm dual_norm(LpNorm p) {
  switch (p) {
    case LpNorm::l1: return LpNorm::linf;
    case LpNorm::linf: return LpNorm::l1;
    case LpNorm::l2: break;
  }
  return LpNorm::l2;
}

template <typename Scalar>
Scalar lp_length(LpNorm p, Scalar a, Scalar b) {
  a = std::abs(a);
  b = std::abs(b);
  switch (p) {
    case LpNorm::l1: return a + b;
    case LpNorm::linf: return std::max(a, b);
    case LpNorm::l2: break;
  }
  return std::sqrt(a * a + b * b);
}

/// u(x, t) = inf_y { f(y) + t L((x - y) / t) } over all grid points, where
/// L(v) = c_k |v|_{p*}^{k/(k-1)} is the Legendre transform of |q|_p^k.
/// Dilation uses the sup with the opposite sign.
template <typename Scalar>
GridFunction<Scalar> hopf_lax_solve(const MorphPDEProblem<Scalar>& problem) {
  problem.validate();
  const auto& f = problem.initial;
  const int h = f.height();
  const int w = f.width();
  const StructuringSpec<Scalar> spec(problem.k, problem.horizon, 1);
  const LpNorm dual = dual_norm(problem.lp_norm);

  // Lagrangian cost for every lattice displacement (dy, dx) in [-(h-1), h-1] x [-(w-1), w-1].
  const int ch = 2 * h - 1;
  const int cw = 2 * w - 1;
  std::vector<Scalar> cost(static_cast<std::size_t>(ch) * static_cast<std::size_t>(cw));
  for (int dy = -(h - 1); dy <= h - 1; ++dy) {
    for (int dx = -(w - 1); dx <= w - 1; ++dx) {
      const Scalar d = lp_length(dual, problem.grid_spacing * Scalar(dx), problem.grid_spacing * Scalar(dy));
      cost[static_cast<std::size_t>((dy + h - 1) * cw + (dx + w - 1))] = structuring_value(spec, d);
    }
  }

  const bool erosion = problem.sign == MorphSign::erosion;
  GridFunction<Scalar> out(f.channels(), h, w);
  for (int c = 0; c < f.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        Scalar best = erosion ? std::numeric_limits<Scalar>::infinity() : -std::numeric_limits<Scalar>::infinity();
        for (int sy = 0; sy < h; ++sy) {
          const Scalar* row = &cost[static_cast<std::size_t>((sy - y + h - 1) * cw + (w - 1 - x))];
          for (int sx = 0; sx < w; ++sx) {
            if (erosion) {
              const Scalar v = f(c, sy, sx) + row[sx];
              if (v < best) best = v;
            } else {
              const Scalar v = f(c, sy, sx) - row[sx];
              if (v > best) best = v;
            }
          }
        }
        out(c, y, x) = best;
      }
    }
  }
  return out;
}

/// Explicit first-order upwind (Rouy-Tourin) time stepping of
/// u_t + |grad u|_p^k = 0 (erosion) or u_t - |grad u|_p^k = 0 (dilation)
/// with replicated edges. Used as an independent viscosity-solution oracle.
template <typename Scalar>
GridFunction<Scalar> fd_hj_solve(const MorphPDEProblem<Scalar>& problem, Scalar cfl = Scalar(0.5)) {
  problem.validate();
  if (!(cfl > Scalar(0) && cfl <= Scalar(1))) throw std::invalid_argument("fd_hj_solve: cfl must lie in (0, 1]");
  const Scalar hstep = problem.grid_spacing;
  const Scalar k = problem.k;
  const bool erosion = problem.sign == MorphSign::erosion;
  GridFunction<Scalar> u = problem.initial;
  GridFunction<Scalar> hamiltonian(u.channels(), u.height(), u.width());
  const int height = u.height();
  const int width = u.width();

  auto at = [&](int c, int y, int x) {
    y = std::clamp(y, 0, height - 1);
    x = std::clamp(x, 0, width - 1);
    return u(c, y, x);
  };

  Scalar time = Scalar(0);
  long step = 0;
  while (time < problem.horizon) {
    Scalar max_grad = Scalar(0);
    for (int c = 0; c < u.channels(); ++c) {
      for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
          const Scalar centre = u(c, y, x);
          const Scalar dxm = (centre - at(c, y, x - 1)) / hstep;
          const Scalar dxp = (at(c, y, x + 1) - centre) / hstep;
          const Scalar dym = (centre - at(c, y - 1, x)) / hstep;
          const Scalar dyp = (at(c, y + 1, x) - centre) / hstep;
          Scalar gx;
          Scalar gy;
          if (erosion) {
            gx = std::max({dxm, -dxp, Scalar(0)});
            gy = std::max({dym, -dyp, Scalar(0)});
          } else {
            gx = std::max({-dxm, dxp, Scalar(0)});
            gy = std::max({-dym, dyp, Scalar(0)});
          }
          const Scalar g = lp_length(problem.lp_norm, gx, gy);
          max_grad = std::max(max_grad, g);
          hamiltonian(c, y, x) = std::exp(k * std::log(std::max(g, Scalar(1e-300))));
        }
      }
    }
    const Scalar speed = k * std::pow(max_grad, k - Scalar(1)) + Scalar(1e-8);
    const Scalar dt = std::min(cfl * hstep / speed, problem.horizon - time);
    if (erosion) {
      u.values() -= dt * hamiltonian.values();
    } else {
      u.values() += dt * hamiltonian.values();
    }
    time += dt;
    ++step;
    if (!u.values().allFinite()) {
      std::ostringstream msg;
      msg << "fd_hj_solve: non-finite state at step " << step << ", t = " << time << " (dt = " << dt << ")";
      throw std::runtime_error(msg.str());
    }
  }
  return u;
}

/// Per-channel transport along a constant velocity field.
template <typename Scalar>
struct ConvectionSpec {
  std::vector<Eigen::Matrix<Scalar, 2, 1>> velocity;  // (x, y) in pixels per unit time, one per channel
  Scalar time = Scalar(1);

  void validate(int channels) const {
    if (static_cast<int>(velocity.size()) != channels) {
      throw std::invalid_argument("ConvectionSpec: one velocity per channel required");
    }
    if (!(time >= Scalar(0)) || !std::isfinite(time)) throw std::invalid_argument("ConvectionSpec: bad time");
    for (const auto& v : velocity) {
      if (!v.allFinite()) throw std::invalid_argument("ConvectionSpec: non-finite velocity");
    }
  }
};

/// Bilinear sample of channel c at real position (px, py) with periodic wrap.
template <typename Scalar>
Scalar bilinear_periodic(const GridFunction<Scalar>& f, int c, Scalar px, Scalar py) {
  const Scalar fx = std::floor(px);
  const Scalar fy = std::floor(py);
  const Scalar ax = px - fx;
  const Scalar ay = py - fy;
  const int x0 = wrap_index(static_cast<int>(fx), f.width());
  const int y0 = wrap_index(static_cast<int>(fy), f.height());
  const int x1 = wrap_index(x0 + 1, f.width());
  const int y1 = wrap_index(y0 + 1, f.height());
  return (Scalar(1) - ay) * ((Scalar(1) - ax) * f(c, y0, x0) + ax * f(c, y0, x1)) +
         ay * ((Scalar(1) - ax) * f(c, y1, x0) + ax * f(c, y1, x1));
}

/// u(x, t) = f(x - t c): characteristics of the translation group.
template <typename Scalar>
GridFunction<Scalar> convect(const GridFunction<Scalar>& f, const ConvectionSpec<Scalar>& spec) {
  spec.validate(f.channels());
  GridFunction<Scalar> out(f.channels(), f.height(), f.width());
  for (int c = 0; c < f.channels(); ++c) {
    const Scalar sx = spec.time * spec.velocity[static_cast<std::size_t>(c)](0);
    const Scalar sy = spec.time * spec.velocity[static_cast<std::size_t>(c)](1);
    for (int y = 0; y < f.height(); ++y) {
      for (int x = 0; x < f.width(); ++x) out(c, y, x) = bilinear_periodic(f, c, Scalar(x) - sx, Scalar(y) - sy);
    }
  }
  return out;
}

}  // namespace mflow
