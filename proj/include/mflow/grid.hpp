#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>

namespace mflow {

/// Multi-channel real function sampled on a regular H x W lattice.
/// Storage is channel-major, then row-major: index = (c * H + y) * W + x.
template <typename Scalar>
class GridFunction {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  GridFunction() = default;

  GridFunction(int channels, int height, int width, Scalar fill = Scalar(0))
      : channels_(channels), height_(height), width_(width) {
    if (channels <= 0 || height <= 0 || width <= 0) {
      throw std::invalid_argument("GridFunction: empty grid");
    }
    values_ = Storage::Constant(static_cast<Eigen::Index>(channels) * height * width, fill);
  }

  GridFunction(int channels, int height, int width, Storage values)
      : channels_(channels), height_(height), width_(width), values_(std::move(values)) {
    if (channels <= 0 || height <= 0 || width <= 0) {
      throw std::invalid_argument("GridFunction: empty grid");
    }
    if (values_.size() != static_cast<Eigen::Index>(channels) * height * width) {
      throw std::invalid_argument("GridFunction: value count does not match shape");
    }
  }

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  Eigen::Index size() const { return values_.size(); }
  bool empty() const { return values_.size() == 0; }

  Scalar& operator()(int c, int y, int x) { return values_[index(c, y, x)]; }
  Scalar operator()(int c, int y, int x) const { return values_[index(c, y, x)]; }

  Eigen::Index index(int c, int y, int x) const {
    return (static_cast<Eigen::Index>(c) * height_ + y) * width_ + x;
  }

  Storage& values() { return values_; }
  const Storage& values() const { return values_; }

  bool same_shape(const GridFunction& other) const {
    return channels_ == other.channels_ && height_ == other.height_ && width_ == other.width_;
  }

  GridFunction operator-() const { return GridFunction(channels_, height_, width_, Storage(-values_)); }

  template <typename Other>
  GridFunction<Other> cast() const {
    return GridFunction<Other>(channels_, height_, width_, values_.template cast<Other>().eval());
  }

 private:
  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  Storage values_;
};

/// Periodic index wrap into [0, n).
inline int wrap_index(int i, int n) {
  int r = i % n;
  return r < 0 ? r + n : r;
}

template <typename Scalar>
Scalar max_abs_difference(const GridFunction<Scalar>& a, const GridFunction<Scalar>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_difference: shape mismatch");
  return (a.values() - b.values()).abs().maxCoeff();
}

}  // namespace mflow
