#pragma once

// Poincare ball geometry, Euclidean group actions on points and lattice
// functions, and the R^n <-> B^n embedding.

#include "mflow/grid.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mflow {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

namespace detail {

/// 1 - |x|^2 evaluated as (1 - |x|)(1 + |x|), clamped below at 1e-15.
template <typename Scalar>
Scalar ball_conformal_gap(const Vector<Scalar>& x) {
  const Scalar r = x.norm();
  return std::max((Scalar(1) - r) * (Scalar(1) + r), Scalar(1e-15));
}

/// arccosh(z) = log(z + sqrt(z^2 - 1)) with z clamped to >= 1.
template <typename Scalar>
Scalar arccosh_clamped(Scalar z) {
  z = std::max(z, Scalar(1));
  return std::log(z + std::sqrt((z - Scalar(1)) * (z + Scalar(1))));
}

}  // namespace detail

/// A point of the open unit ball B^n.
template <typename Scalar>
class HyperbolicPoint {
 public:
  explicit HyperbolicPoint(Vector<Scalar> coords) : coords_(std::move(coords)) {
    if (!(coords_.squaredNorm() < Scalar(1))) {
      throw std::domain_error("HyperbolicPoint: squared norm must be < 1");
    }
  }

  static HyperbolicPoint origin(int dim) { return HyperbolicPoint(Vector<Scalar>::Zero(dim)); }

  const Vector<Scalar>& coords() const { return coords_; }
  int dim() const { return static_cast<int>(coords_.size()); }

 private:
  Vector<Scalar> coords_;
};

/// Hyperbolic distance on B^n:
///   cosh d = 1 + 2|x - y|^2 / ((1 - |x|^2)(1 - |y|^2)).
template <typename Scalar>
Scalar hyperbolic_distance(const Vector<Scalar>& x, const Vector<Scalar>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("hyperbolic_distance: dimension mismatch");
  if (!(x.squaredNorm() < Scalar(1)) || !(y.squaredNorm() < Scalar(1))) {
    throw std::domain_error("hyperbolic_distance: point outside the unit ball");
  }
  const Scalar num = Scalar(2) * (x - y).squaredNorm();
  const Scalar den = detail::ball_conformal_gap(x) * detail::ball_conformal_gap(y);
  return detail::arccosh_clamped(Scalar(1) + num / den);
}

template <typename Scalar>
Scalar hyperbolic_distance(const HyperbolicPoint<Scalar>& x, const HyperbolicPoint<Scalar>& y) {
  return hyperbolic_distance<Scalar>(x.coords(), y.coords());
}

/// Element of E(n): x -> linear * x + shift with orthogonal `linear`.
template <typename Scalar>
class EuclideanTransform {
 public:
  EuclideanTransform(Matrix<Scalar> linear, Vector<Scalar> shift)
      : linear_(std::move(linear)), shift_(std::move(shift)) {
    const auto n = linear_.rows();
    if (linear_.cols() != n || shift_.size() != n) {
      throw std::invalid_argument("EuclideanTransform: dimension mismatch");
    }
    const Scalar defect = (linear_.transpose() * linear_ - Matrix<Scalar>::Identity(n, n)).cwiseAbs().maxCoeff();
    if (!(defect <= Scalar(1e-12) * std::max<Scalar>(Scalar(1), Scalar(n)))) {
      throw std::invalid_argument("EuclideanTransform: linear part is not orthogonal");
    }
  }

  static EuclideanTransform identity(int n) {
    return EuclideanTransform(Matrix<Scalar>::Identity(n, n), Vector<Scalar>::Zero(n));
  }

  static EuclideanTransform translation(Vector<Scalar> shift) {
    const auto n = shift.size();
    return EuclideanTransform(Matrix<Scalar>::Identity(n, n), std::move(shift));
  }

  /// Planar rotation by `angle` radians (counter-clockwise in (x, y)).
  static EuclideanTransform rotation2d(Scalar angle) {
    Matrix<Scalar> r(2, 2);
    r << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
    return EuclideanTransform(std::move(r), Vector<Scalar>::Zero(2));
  }

  /// Exact quarter turns: entries in {-1, 0, 1}.
  static EuclideanTransform quarter_turn(int quarters) {
    quarters = wrap_index(quarters, 4);
    static constexpr int c[4] = {1, 0, -1, 0};
    static constexpr int s[4] = {0, 1, 0, -1};
    Matrix<Scalar> r(2, 2);
    r << Scalar(c[quarters]), Scalar(-s[quarters]), Scalar(s[quarters]), Scalar(c[quarters]);
    return EuclideanTransform(std::move(r), Vector<Scalar>::Zero(2));
  }

  /// Coordinate permutation: output[i] = x[sigma[i]].
  static EuclideanTransform permutation(std::span<const int> sigma) {
    const auto n = static_cast<Eigen::Index>(sigma.size());
    Matrix<Scalar> p = Matrix<Scalar>::Zero(n, n);
    std::vector<bool> seen(sigma.size(), false);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int j = sigma[static_cast<std::size_t>(i)];
      if (j < 0 || j >= n || seen[static_cast<std::size_t>(j)]) {
        throw std::invalid_argument("EuclideanTransform::permutation: not a permutation");
      }
      seen[static_cast<std::size_t>(j)] = true;
      p(i, j) = Scalar(1);
    }
    return EuclideanTransform(std::move(p), Vector<Scalar>::Zero(n));
  }

  /// Reflection flipping the sign of coordinate `axis`.
  static EuclideanTransform reflection(int n, int axis) {
    if (axis < 0 || axis >= n) throw std::invalid_argument("EuclideanTransform::reflection: bad axis");
    Matrix<Scalar> m = Matrix<Scalar>::Identity(n, n);
    m(axis, axis) = Scalar(-1);
    return EuclideanTransform(std::move(m), Vector<Scalar>::Zero(n));
  }

  const Matrix<Scalar>& linear() const { return linear_; }
  const Vector<Scalar>& shift() const { return shift_; }
  int dim() const { return static_cast<int>(shift_.size()); }

  /// (this o other)(x) = this(other(x)).
  EuclideanTransform operator*(const EuclideanTransform& other) const {
    if (other.dim() != dim()) throw std::invalid_argument("EuclideanTransform: dimension mismatch");
    return EuclideanTransform(linear_ * other.linear_, linear_ * other.shift_ + shift_);
  }

  EuclideanTransform inverse() const {
    Matrix<Scalar> lt = linear_.transpose();
    Vector<Scalar> s = -(lt * shift_);
    return EuclideanTransform(std::move(lt), std::move(s));
  }

 private:
  Matrix<Scalar> linear_;
  Vector<Scalar> shift_;
};

template <typename Scalar>
Vector<Scalar> apply_transform(const EuclideanTransform<Scalar>& h, const Vector<Scalar>& x) {
  if (x.size() != h.dim()) throw std::invalid_argument("apply_transform: dimension mismatch");
  return h.linear() * x + h.shift();
}

enum class Boundary { periodic, open };

/// Lattice geometry of a grid function; `base_point` is the reference x0 in B^2.
template <typename Scalar>
struct GridGeometry {
  int height = 1;
  int width = 1;
  Scalar pixel_scale = Scalar(1);
  HyperbolicPoint<Scalar> base_point = HyperbolicPoint<Scalar>::origin(2);
  Boundary boundary = Boundary::periodic;

  GridGeometry() = default;
  GridGeometry(int h, int w, Scalar scale = Scalar(1),
               HyperbolicPoint<Scalar> x0 = HyperbolicPoint<Scalar>::origin(2),
               Boundary b = Boundary::periodic)
      : height(h), width(w), pixel_scale(scale), base_point(std::move(x0)), boundary(b) {
    validate();
  }

  void validate() const {
    if (height <= 0 || width <= 0) throw std::invalid_argument("GridGeometry: empty grid");
    if (!(pixel_scale > Scalar(0))) throw std::invalid_argument("GridGeometry: pixel_scale must be > 0");
    if (base_point.dim() != 2) throw std::invalid_argument("GridGeometry: base point must lie in B^2");
  }
};

/// Group element acting on lattice functions: a spatial transform in (x = column,
/// y = row) coordinates plus a channel permutation. `channel_perm[c]` is the
/// output channel that input channel c is sent to.
template <typename Scalar>
struct LatticeAction {
  EuclideanTransform<Scalar> spatial = EuclideanTransform<Scalar>::identity(2);
  std::vector<int> channel_perm;  // empty = identity

  LatticeAction operator*(const LatticeAction& other) const {
    LatticeAction out{spatial * other.spatial, {}};
    if (channel_perm.empty()) {
      out.channel_perm = other.channel_perm;
    } else if (other.channel_perm.empty()) {
      out.channel_perm = channel_perm;
    } else {
      if (channel_perm.size() != other.channel_perm.size()) {
        throw std::invalid_argument("LatticeAction: channel permutation size mismatch");
      }
      out.channel_perm.resize(channel_perm.size());
      for (std::size_t c = 0; c < channel_perm.size(); ++c) {
        out.channel_perm[c] = channel_perm[static_cast<std::size_t>(other.channel_perm[c])];
      }
    }
    return out;
  }
};

namespace detail {

template <typename Scalar>
int exact_integer(Scalar v, const char* what) {
  const Scalar r = std::round(v);
  if (std::abs(v - r) > Scalar(1e-9)) {
    throw std::invalid_argument(std::string("left_regular_action: ") + what + " does not map the lattice to itself");
  }
  return static_cast<int>(r);
}

}  // namespace detail

/// (L_h f)(c, p) = f(pi^-1(c), h^-1 p) with periodic lattice indexing.
/// Only transforms that map the lattice onto itself are accepted.
template <typename Scalar, typename Value>
GridFunction<Value> left_regular_action(const LatticeAction<Scalar>& h, const GridFunction<Value>& f) {
  if (h.spatial.dim() != 2) throw std::invalid_argument("left_regular_action: spatial part must be 2-D");
  const auto inv = h.spatial.inverse();
  int m[2][2];
  int s[2];
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) m[i][j] = detail::exact_integer(inv.linear()(i, j), "linear part");
    s[i] = detail::exact_integer(inv.shift()(i), "shift");
  }
  const int height = f.height();
  const int width = f.width();
  if ((m[0][1] != 0 || m[1][0] != 0) && height != width) {
    throw std::invalid_argument("left_regular_action: axis-swapping transform needs a square grid");
  }
  std::vector<int> source_channel(static_cast<std::size_t>(f.channels()));
  for (int c = 0; c < f.channels(); ++c) source_channel[static_cast<std::size_t>(c)] = c;
  if (!h.channel_perm.empty()) {
    if (static_cast<int>(h.channel_perm.size()) != f.channels()) {
      throw std::invalid_argument("left_regular_action: channel permutation size mismatch");
    }
    for (int c = 0; c < f.channels(); ++c) {
      const int to = h.channel_perm[static_cast<std::size_t>(c)];
      if (to < 0 || to >= f.channels()) throw std::invalid_argument("left_regular_action: bad channel permutation");
      source_channel[static_cast<std::size_t>(to)] = c;
    }
  }

  GridFunction<Value> out(f.channels(), height, width);
  for (int c = 0; c < f.channels(); ++c) {
    const int src_c = source_channel[static_cast<std::size_t>(c)];
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const int sx = wrap_index(m[0][0] * x + m[0][1] * y + s[0], width);
        const int sy = wrap_index(m[1][0] * x + m[1][1] * y + s[1], height);
        out(c, y, x) = f(src_c, sy, sx);
      }
    }
  }
  return out;
}

template <typename Scalar, typename Value>
GridFunction<Value> left_regular_action(const EuclideanTransform<Scalar>& h, const GridFunction<Value>& f) {
  return left_regular_action(LatticeAction<Scalar>{h, {}}, f);
}

/// Phi(x) = x / sqrt(1 + |x|^2), an embedding of R^n into B^n.
template <typename Scalar>
HyperbolicPoint<Scalar> embed(const Vector<Scalar>& x) {
  return HyperbolicPoint<Scalar>(x / std::sqrt(Scalar(1) + x.squaredNorm()));
}

/// S(p) = p / sqrt(1 - |p|^2), inverse of embed.
template <typename Scalar>
Vector<Scalar> unembed(const HyperbolicPoint<Scalar>& p) {
  const Scalar r = p.coords().norm();
  const Scalar gap = (Scalar(1) - r) * (Scalar(1) + r);
  if (!(gap > Scalar(0))) throw std::domain_error("unembed: point on or outside the unit sphere");
  return p.coords() / std::sqrt(gap);
}

/// J_Phi(x) = (1 / sqrt(1 + |x|^2)) (I - x x^T / (1 + |x|^2)).
template <typename Scalar>
Matrix<Scalar> embed_jacobian(const Vector<Scalar>& x) {
  const auto n = x.size();
  const Scalar q = Scalar(1) + x.squaredNorm();
  return (Matrix<Scalar>::Identity(n, n) - x * x.transpose() / q) / std::sqrt(q);
}

}  // namespace mflow
