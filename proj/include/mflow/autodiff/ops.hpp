#pragma once

// Differentiable tensor operations. Image tensors are (B, C, H, W) row-major.

#include "mflow/autodiff/tensor.hpp"
#include "mflow/grid.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace mflow::ad {

namespace detail {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMatrix<Scalar>>;
template <typename Scalar>
using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
template <typename Scalar>
using ConstArrayMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

template <typename Scalar, typename Alloc>
ConstArrayMap<Scalar> as_array(const std::vector<Scalar, Alloc>& v) {
  return ConstArrayMap<Scalar>(v.data(), static_cast<Eigen::Index>(v.size()));
}
template <typename Scalar, typename Alloc>
ArrayMap<Scalar> as_array(std::vector<Scalar, Alloc>& v) {
  return ArrayMap<Scalar>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()));
}

template <typename Scalar>
void require_rank(const Tensor<Scalar>& a, std::size_t rank, const char* op) {
  require(a.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_string(a.shape()));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return x >= Scalar(0) ? Scalar(1) / (Scalar(1) + std::exp(-x)) : std::exp(x) / (Scalar(1) + std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  Buffer<Scalar> v(a.numel());
  detail::as_array(v) = detail::as_array(a.data()) + detail::as_array(b.data());
  return detail::make_result<Scalar>(a.shape(), std::move(v), [a, b](Node<Scalar>* out) {
    return [a, b, out] {
      if (detail::wants_grad(a)) detail::as_array(a.node()->ensure_grad()) += detail::as_array(out->grad);
      if (detail::wants_grad(b)) detail::as_array(b.node()->ensure_grad()) += detail::as_array(out->grad);
    };
  }, a, b);
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  Buffer<Scalar> v(a.numel());
  detail::as_array(v) = detail::as_array(a.data()) - detail::as_array(b.data());
  return detail::make_result<Scalar>(a.shape(), std::move(v), [a, b](Node<Scalar>* out) {
    return [a, b, out] {
      if (detail::wants_grad(a)) detail::as_array(a.node()->ensure_grad()) += detail::as_array(out->grad);
      if (detail::wants_grad(b)) detail::as_array(b.node()->ensure_grad()) -= detail::as_array(out->grad);
    };
  }, a, b);
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer<Scalar> v(a.numel());
  detail::as_array(v) = detail::as_array(a.data()) * detail::as_array(b.data());
  return detail::make_result<Scalar>(a.shape(), std::move(v), [a, b](Node<Scalar>* out) {
    return [a, b, out] {
      const auto g = detail::as_array(out->grad);
      if (detail::wants_grad(a)) detail::as_array(a.node()->ensure_grad()) += g * detail::as_array(b.data());
      if (detail::wants_grad(b)) detail::as_array(b.node()->ensure_grad()) += g * detail::as_array(a.data());
    };
  }, a, b);
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s) {
  Buffer<Scalar> v(a.numel());
  detail::as_array(v) = detail::as_array(a.data()) * s;
  return detail::make_result<Scalar>(a.shape(), std::move(v), [a, s](Node<Scalar>* out) {
    return [a, s, out] { detail::as_array(a.node()->ensure_grad()) += s * detail::as_array(out->grad); };
  }, a);
}

template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& a) {
  return mul(a, a);
}

template <typename Scalar>
Tensor<Scalar> silu(const Tensor<Scalar>& a) {
  Buffer<Scalar> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * detail::sigmoid(a.data()[i]);
  return detail::make_result<Scalar>(a.shape(), std::move(v), [a](Node<Scalar>* out) {
    return [a, out] {
      auto& ga = a.node()->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) {
        const Scalar x = a.data()[i];
        const Scalar s = detail::sigmoid(x);
        ga[i] += out->grad[i] * (s + x * s * (Scalar(1) - s));
      }
    };
  }, a);
}

/// log(1 + e^x), used to keep scales strictly positive.
template <typename Scalar>
Tensor<Scalar> softplus(const Tensor<Scalar>& a) {
  Buffer<Scalar> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const Scalar x = a.data()[i];
    v[i] = x > Scalar(20) ? x : std::log1p(std::exp(x));
  }
  return detail::make_result<Scalar>(a.shape(), std::move(v), [a](Node<Scalar>* out) {
    return [a, out] {
      auto& ga = a.node()->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += out->grad[i] * detail::sigmoid(a.data()[i]);
    };
  }, a);
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  const Scalar s = detail::as_array(a.data()).sum();
  return detail::make_result<Scalar>({1}, {s}, [a](Node<Scalar>* out) {
    return [a, out] { detail::as_array(a.node()->ensure_grad()) += out->grad[0]; };
  }, a);
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.numel()));
}

/// mean((a - b)^2)
template <typename Scalar>
Tensor<Scalar> mse(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return mean(square(sub(a, b)));
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, Shape shape) {
  detail::require(shape_numel(shape) == a.numel(),
                  "reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  return detail::make_result<Scalar>(std::move(shape), a.data(), [a](Node<Scalar>* out) {
    return [a, out] { detail::as_array(a.node()->ensure_grad()) += detail::as_array(out->grad); };
  }, a);
}

/// Concatenate (B, Ca, ...) and (B, Cb, ...) along dimension 1.
template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require(a.rank() >= 2 && a.rank() == b.rank() && a.dim(0) == b.dim(0), "concat: incompatible shapes");
  for (std::size_t i = 2; i < a.rank(); ++i) detail::require(a.dim(i) == b.dim(i), "concat: incompatible shapes");
  const std::size_t batch = static_cast<std::size_t>(a.dim(0));
  const std::size_t na = a.numel() / batch;
  const std::size_t nb = b.numel() / batch;
  Shape shape = a.shape();
  shape[1] += b.dim(1);
  Buffer<Scalar> v(a.numel() + b.numel());
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(n * na), na, v.begin() + static_cast<std::ptrdiff_t>(n * (na + nb)));
    std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(n * nb), nb,
                v.begin() + static_cast<std::ptrdiff_t>(n * (na + nb) + na));
  }
  return detail::make_result<Scalar>(std::move(shape), std::move(v), [a, b, batch, na, nb](Node<Scalar>* out) {
    return [a, b, batch, na, nb, out] {
      if (detail::wants_grad(a)) {
        auto& ga = a.node()->ensure_grad();
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < na; ++i) ga[n * na + i] += out->grad[n * (na + nb) + i];
      }
      if (detail::wants_grad(b)) {
        auto& gb = b.node()->ensure_grad();
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < nb; ++i) gb[n * nb + i] += out->grad[n * (na + nb) + na + i];
      }
    };
  }, a, b);
}

// ---------------------------------------------------------------------------
// Per-channel broadcasting

/// x (B, C, ...) + bias (C)
template <typename Scalar>
Tensor<Scalar> add_channel_bias(const Tensor<Scalar>& x, const Tensor<Scalar>& bias) {
  detail::require(x.rank() >= 2 && bias.numel() == static_cast<std::size_t>(x.dim(1)), "add_channel_bias: shape mismatch");
  const std::size_t batch = static_cast<std::size_t>(x.dim(0));
  const std::size_t channels = static_cast<std::size_t>(x.dim(1));
  const std::size_t inner = x.numel() / (batch * channels);
  Buffer<Scalar> v = x.data();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) v[(n * channels + c) * inner + i] += bias.data()[c];
  return detail::make_result<Scalar>(x.shape(), std::move(v), [x, bias, batch, channels, inner](Node<Scalar>* out) {
    return [x, bias, batch, channels, inner, out] {
      if (detail::wants_grad(x)) detail::as_array(x.node()->ensure_grad()) += detail::as_array(out->grad);
      if (detail::wants_grad(bias)) {
        auto& gb = bias.node()->ensure_grad();
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < inner; ++i) gb[c] += out->grad[(n * channels + c) * inner + i];
      }
    };
  }, x, bias);
}

/// x (B, C, ...) * w (C)
template <typename Scalar>
Tensor<Scalar> mul_channels(const Tensor<Scalar>& x, const Tensor<Scalar>& w) {
  detail::require(x.rank() >= 2 && w.numel() == static_cast<std::size_t>(x.dim(1)), "mul_channels: shape mismatch");
  const std::size_t batch = static_cast<std::size_t>(x.dim(0));
  const std::size_t channels = static_cast<std::size_t>(x.dim(1));
  const std::size_t inner = x.numel() / (batch * channels);
  Buffer<Scalar> v(x.numel());
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t j = (n * channels + c) * inner + i;
        v[j] = x.data()[j] * w.data()[c];
      }
  return detail::make_result<Scalar>(x.shape(), std::move(v), [x, w, batch, channels, inner](Node<Scalar>* out) {
    return [x, w, batch, channels, inner, out] {
      const bool gx = detail::wants_grad(x);
      const bool gw = detail::wants_grad(w);
      Buffer<Scalar>* dx = gx ? &x.node()->ensure_grad() : nullptr;
      Buffer<Scalar>* dw = gw ? &w.node()->ensure_grad() : nullptr;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t c = 0; c < channels; ++c)
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t j = (n * channels + c) * inner + i;
            if (gx) (*dx)[j] += out->grad[j] * w.data()[c];
            if (gw) (*dw)[c] += out->grad[j] * x.data()[j];
          }
    };
  }, x, w);
}

/// x (B, C, H, W) + b (B, C), constant over space.
template <typename Scalar>
Tensor<Scalar> add_sample_channel_bias(const Tensor<Scalar>& x, const Tensor<Scalar>& b) {
  detail::require(x.rank() >= 2 && b.rank() == 2 && b.dim(0) == x.dim(0) && b.dim(1) == x.dim(1),
                  "add_sample_channel_bias: shape mismatch");
  const std::size_t rows = static_cast<std::size_t>(x.dim(0) * x.dim(1));
  const std::size_t inner = x.numel() / rows;
  Buffer<Scalar> v = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < inner; ++i) v[r * inner + i] += b.data()[r];
  return detail::make_result<Scalar>(x.shape(), std::move(v), [x, b, rows, inner](Node<Scalar>* out) {
    return [x, b, rows, inner, out] {
      if (detail::wants_grad(x)) detail::as_array(x.node()->ensure_grad()) += detail::as_array(out->grad);
      if (detail::wants_grad(b)) {
        auto& gb = b.node()->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < inner; ++i) gb[r] += out->grad[r * inner + i];
      }
    };
  }, x, b);
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched product op(a) op(b) over the leading dimension; a, b rank 3.
template <typename Scalar>
Tensor<Scalar> bmm(const Tensor<Scalar>& a, const Tensor<Scalar>& b, bool trans_a = false, bool trans_b = false) {
  detail::require_rank(a, 3, "bmm");
  detail::require_rank(b, 3, "bmm");
  detail::require(a.dim(0) == b.dim(0), "bmm: batch mismatch");
  const int groups = a.dim(0);
  const int m = trans_a ? a.dim(2) : a.dim(1);
  const int k = trans_a ? a.dim(1) : a.dim(2);
  const int kb = trans_b ? b.dim(2) : b.dim(1);
  const int n = trans_b ? b.dim(1) : b.dim(2);
  detail::require(k == kb, "bmm: inner dimension mismatch " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Buffer<Scalar> v(static_cast<std::size_t>(groups) * m * n);
  const std::size_t sa = static_cast<std::size_t>(a.dim(1)) * a.dim(2);
  const std::size_t sb = static_cast<std::size_t>(b.dim(1)) * b.dim(2);
  const std::size_t sc = static_cast<std::size_t>(m) * n;
  for (int g = 0; g < groups; ++g) {
    detail::ConstMatMap<Scalar> am(a.data().data() + g * sa, a.dim(1), a.dim(2));
    detail::ConstMatMap<Scalar> bm(b.data().data() + g * sb, b.dim(1), b.dim(2));
    detail::MatMap<Scalar> cm(v.data() + g * sc, m, n);
    if (!trans_a && !trans_b) cm.noalias() = am * bm;
    else if (trans_a && !trans_b) cm.noalias() = am.transpose() * bm;
    else if (!trans_a && trans_b) cm.noalias() = am * bm.transpose();
    else cm.noalias() = am.transpose() * bm.transpose();
  }
  return detail::make_result<Scalar>({groups, m, n}, std::move(v),
                                     [a, b, trans_a, trans_b, groups, m, n, sa, sb, sc](Node<Scalar>* out) {
    return [a, b, trans_a, trans_b, groups, m, n, sa, sb, sc, out] {
      for (int g = 0; g < groups; ++g) {
        detail::ConstMatMap<Scalar> am(a.data().data() + g * sa, a.dim(1), a.dim(2));
        detail::ConstMatMap<Scalar> bm(b.data().data() + g * sb, b.dim(1), b.dim(2));
        detail::ConstMatMap<Scalar> gc(out->grad.data() + g * sc, m, n);
        if (detail::wants_grad(a)) {
          detail::MatMap<Scalar> ga(a.node()->ensure_grad().data() + g * sa, a.dim(1), a.dim(2));
          // d op(A) = dC op(B)^T
          if (!trans_a && !trans_b) ga.noalias() += gc * bm.transpose();
          else if (!trans_a && trans_b) ga.noalias() += gc * bm;
          else if (trans_a && !trans_b) ga.noalias() += bm * gc.transpose();
          else ga.noalias() += bm.transpose() * gc.transpose();
        }
        if (detail::wants_grad(b)) {
          detail::MatMap<Scalar> gb(b.node()->ensure_grad().data() + g * sb, b.dim(1), b.dim(2));
          // d op(B) = op(A)^T dC
          if (!trans_a && !trans_b) gb.noalias() += am.transpose() * gc;
          else if (trans_a && !trans_b) gb.noalias() += am * gc;
          else if (!trans_a && trans_b) gb.noalias() += gc.transpose() * am;
          else gb.noalias() += gc.transpose() * am.transpose();
        }
      }
    };
  }, a, b);
}

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  auto c = bmm(reshape(a, {1, a.dim(0), a.dim(1)}), reshape(b, {1, b.dim(0), b.dim(1)}));
  return reshape(c, {a.dim(0), b.dim(1)});
}

/// x (B, I) W^T + bias with W (O, I), bias (O) or undefined.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias = {}) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(weight, 2, "linear");
  detail::require(x.dim(1) == weight.dim(1), "linear: input width mismatch");
  const int rows = x.dim(0);
  const int in = x.dim(1);
  const int outw = weight.dim(0);
  if (bias.defined()) detail::require(bias.numel() == static_cast<std::size_t>(outw), "linear: bias size mismatch");
  Buffer<Scalar> v(static_cast<std::size_t>(rows) * outw);
  {
    detail::ConstMatMap<Scalar> xm(x.data().data(), rows, in);
    detail::ConstMatMap<Scalar> wm(weight.data().data(), outw, in);
    detail::MatMap<Scalar> ym(v.data(), rows, outw);
    ym.noalias() = xm * wm.transpose();
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> bm(bias.data().data(), outw);
      ym.rowwise() += bm;
    }
  }
  return detail::make_result<Scalar>({rows, outw}, std::move(v), [x, weight, bias, rows, in, outw](Node<Scalar>* out) {
    return [x, weight, bias, rows, in, outw, out] {
      detail::ConstMatMap<Scalar> gy(out->grad.data(), rows, outw);
      if (detail::wants_grad(x)) {
        detail::MatMap<Scalar> gx(x.node()->ensure_grad().data(), rows, in);
        gx.noalias() += gy * detail::ConstMatMap<Scalar>(weight.data().data(), outw, in);
      }
      if (detail::wants_grad(weight)) {
        detail::MatMap<Scalar> gw(weight.node()->ensure_grad().data(), outw, in);
        gw.noalias() += gy.transpose() * detail::ConstMatMap<Scalar>(x.data().data(), rows, in);
      }
      if (detail::wants_grad(bias)) {
        Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> gb(bias.node()->ensure_grad().data(), outw);
        gb += gy.colwise().sum();
      }
    };
  }, x, weight, bias);
}

/// Softmax over the last dimension.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x) {
  const std::size_t n = static_cast<std::size_t>(x.shape().back());
  const std::size_t rows = x.numel() / n;
  Buffer<Scalar> v(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* in = x.data().data() + r * n;
    Scalar* o = v.data() + r * n;
    const Scalar mx = *std::max_element(in, in + n);
    Scalar total = Scalar(0);
    for (std::size_t i = 0; i < n; ++i) total += (o[i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < n; ++i) o[i] /= total;
  }
  return detail::make_result<Scalar>(x.shape(), std::move(v), [x, rows, n](Node<Scalar>* out) {
    return [x, rows, n, out] {
      auto& gx = x.node()->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const Scalar* y = out->value.data() + r * n;
        const Scalar* gy = out->grad.data() + r * n;
        Scalar dot = Scalar(0);
        for (std::size_t i = 0; i < n; ++i) dot += gy[i] * y[i];
        for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += y[i] * (gy[i] - dot);
      }
    };
  }, x);
}

// ---------------------------------------------------------------------------
// Convolution

enum class Padding { zero, periodic };

namespace detail {

struct ConvGeometry {
  int batch, in_ch, height, width, out_ch, kernel, stride, pad, out_h, out_w;
  Padding padding;
};

/// Source index of (ci, ky, kx) at output (oy, ox), or -1 for zero padding.
inline long conv_source(const ConvGeometry& g, int ci, int ky, int kx, int oy, int ox) {
  int y = oy * g.stride + ky - g.pad;
  int x = ox * g.stride + kx - g.pad;
  if (g.padding == Padding::periodic) {
    y = wrap_index(y, g.height);
    x = wrap_index(x, g.width);
  } else if (y < 0 || y >= g.height || x < 0 || x >= g.width) {
    return -1;
  }
  return (static_cast<long>(ci) * g.height + y) * g.width + x;
}

template <typename Scalar>
void im2col(const ConvGeometry& g, const Scalar* img, Scalar* cols) {
  const int npix = g.out_h * g.out_w;
  for (int ci = 0; ci < g.in_ch; ++ci)
    for (int ky = 0; ky < g.kernel; ++ky)
      for (int kx = 0; kx < g.kernel; ++kx) {
        Scalar* row = cols + static_cast<long>((ci * g.kernel + ky) * g.kernel + kx) * npix;
        for (int oy = 0; oy < g.out_h; ++oy)
          for (int ox = 0; ox < g.out_w; ++ox) {
            const long s = conv_source(g, ci, ky, kx, oy, ox);
            row[oy * g.out_w + ox] = s < 0 ? Scalar(0) : img[s];
          }
      }
}

template <typename Scalar>
void col2im(const ConvGeometry& g, const Scalar* cols, Scalar* img) {
  const int npix = g.out_h * g.out_w;
  for (int ci = 0; ci < g.in_ch; ++ci)
    for (int ky = 0; ky < g.kernel; ++ky)
      for (int kx = 0; kx < g.kernel; ++kx) {
        const Scalar* row = cols + static_cast<long>((ci * g.kernel + ky) * g.kernel + kx) * npix;
        for (int oy = 0; oy < g.out_h; ++oy)
          for (int ox = 0; ox < g.out_w; ++ox) {
            const long s = conv_source(g, ci, ky, kx, oy, ox);
            if (s >= 0) img[s] += row[oy * g.out_w + ox];
          }
      }
}

}  // namespace detail

/// 2-D convolution (cross-correlation) with odd square kernels and "same"
/// padding of kernel/2. x (B, Cin, H, W), weight (Cout, Cin, K, K), bias (Cout).
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias, int stride,
                      Padding padding) {
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(weight, 4, "conv2d");
  detail::require(weight.dim(1) == x.dim(1), "conv2d: input channel mismatch " + shape_string(x.shape()) + " vs weight " +
                                                 shape_string(weight.shape()));
  detail::require(weight.dim(2) == weight.dim(3) && weight.dim(2) % 2 == 1, "conv2d: kernel must be odd and square");
  detail::require(stride >= 1, "conv2d: stride must be >= 1");
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), stride, weight.dim(2) / 2,
                         0, 0, padding};
  g.out_h = (g.height + 2 * g.pad - g.kernel) / stride + 1;
  g.out_w = (g.width + 2 * g.pad - g.kernel) / stride + 1;
  if (bias.defined()) detail::require(bias.numel() == static_cast<std::size_t>(g.out_ch), "conv2d: bias size mismatch");
  const bool pointwise = g.kernel == 1 && stride == 1;
  const int kdim = g.in_ch * g.kernel * g.kernel;
  const int npix = g.out_h * g.out_w;
  const std::size_t in_stride = static_cast<std::size_t>(g.in_ch) * g.height * g.width;
  const std::size_t out_stride = static_cast<std::size_t>(g.out_ch) * npix;

  Buffer<Scalar> v(static_cast<std::size_t>(g.batch) * out_stride);
  Buffer<Scalar> cols(pointwise ? 0 : static_cast<std::size_t>(kdim) * npix);
  detail::ConstMatMap<Scalar> wm(weight.data().data(), g.out_ch, kdim);
  for (int n = 0; n < g.batch; ++n) {
    const Scalar* img = x.data().data() + n * in_stride;
    if (!pointwise) detail::im2col(g, img, cols.data());
    detail::ConstMatMap<Scalar> cm(pointwise ? img : cols.data(), kdim, npix);
    detail::MatMap<Scalar> om(v.data() + n * out_stride, g.out_ch, npix);
    om.noalias() = wm * cm;
    if (bias.defined()) {
      for (int co = 0; co < g.out_ch; ++co) om.row(co).array() += bias.data()[static_cast<std::size_t>(co)];
    }
  }
  return detail::make_result<Scalar>({g.batch, g.out_ch, g.out_h, g.out_w}, std::move(v),
                                     [x, weight, bias, g, pointwise, kdim, npix, in_stride, out_stride](Node<Scalar>* out) {
    return [x, weight, bias, g, pointwise, kdim, npix, in_stride, out_stride, out] {
      Buffer<Scalar> cols(pointwise ? 0 : static_cast<std::size_t>(kdim) * npix);
      Buffer<Scalar> dcols(pointwise ? 0 : static_cast<std::size_t>(kdim) * npix);
      detail::ConstMatMap<Scalar> wm(weight.data().data(), g.out_ch, kdim);
      for (int n = 0; n < g.batch; ++n) {
        detail::ConstMatMap<Scalar> gy(out->grad.data() + n * out_stride, g.out_ch, npix);
        const Scalar* img = x.data().data() + n * in_stride;
        if (detail::wants_grad(weight)) {
          if (!pointwise) detail::im2col(g, img, cols.data());
          detail::ConstMatMap<Scalar> cm(pointwise ? img : cols.data(), kdim, npix);
          detail::MatMap<Scalar> gw(weight.node()->ensure_grad().data(), g.out_ch, kdim);
          gw.noalias() += gy * cm.transpose();
        }
        if (detail::wants_grad(bias)) {
          auto& gb = bias.node()->ensure_grad();
          for (int co = 0; co < g.out_ch; ++co) gb[static_cast<std::size_t>(co)] += gy.row(co).sum();
        }
        if (detail::wants_grad(x)) {
          Scalar* gimg = x.node()->ensure_grad().data() + n * in_stride;
          if (pointwise) {
            detail::MatMap<Scalar> gx(gimg, kdim, npix);
            gx.noalias() += wm.transpose() * gy;
          } else {
            detail::MatMap<Scalar> dc(dcols.data(), kdim, npix);
            dc.noalias() = wm.transpose() * gy;
            detail::col2im(g, dcols.data(), gimg);
          }
        }
      }
    };
  }, x, weight, bias);
}

/// Nearest-neighbour 2x upsampling of (B, C, H, W).
template <typename Scalar>
Tensor<Scalar> upsample_nearest2x(const Tensor<Scalar>& x) {
  detail::require_rank(x, 4, "upsample_nearest2x");
  const int planes = x.dim(0) * x.dim(1);
  const int h = x.dim(2);
  const int w = x.dim(3);
  Buffer<Scalar> v(x.numel() * 4);
  for (int p = 0; p < planes; ++p)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        v[(static_cast<std::size_t>(p) * 2 * h + y) * 2 * w + xx] = x.data()[(static_cast<std::size_t>(p) * h + y / 2) * w + xx / 2];
  return detail::make_result<Scalar>({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(v), [x, planes, h, w](Node<Scalar>* out) {
    return [x, planes, h, w, out] {
      auto& gx = x.node()->ensure_grad();
      for (int p = 0; p < planes; ++p)
        for (int y = 0; y < 2 * h; ++y)
          for (int xx = 0; xx < 2 * w; ++xx)
            gx[(static_cast<std::size_t>(p) * h + y / 2) * w + xx / 2] +=
                out->grad[(static_cast<std::size_t>(p) * 2 * h + y) * 2 * w + xx];
    };
  }, x);
}

// ---------------------------------------------------------------------------
// Normalization

/// Group normalization of (B, C, ...) with per-channel affine gamma, beta.
template <typename Scalar>
Tensor<Scalar> group_norm(const Tensor<Scalar>& x, int groups, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps = Scalar(1e-5)) {
  detail::require(x.rank() >= 2, "group_norm: rank must be >= 2");
  const int batch = x.dim(0);
  const int channels = x.dim(1);
  detail::require(groups >= 1 && channels % groups == 0, "group_norm: channels not divisible by groups");
  detail::require(gamma.numel() == static_cast<std::size_t>(channels) && beta.numel() == static_cast<std::size_t>(channels),
                  "group_norm: affine parameter size mismatch");
  const std::size_t inner = x.numel() / (static_cast<std::size_t>(batch) * channels);
  const int per_group = channels / groups;
  const std::size_t group_size = inner * static_cast<std::size_t>(per_group);

  Buffer<Scalar> v(x.numel());
  Buffer<Scalar> xhat(x.numel());
  Buffer<Scalar> rstd(static_cast<std::size_t>(batch) * groups);
  for (int n = 0; n < batch; ++n) {
    for (int g = 0; g < groups; ++g) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels + static_cast<std::size_t>(g) * per_group) * inner;
      Scalar mu = Scalar(0);
      for (std::size_t i = 0; i < group_size; ++i) mu += x.data()[base + i];
      mu /= static_cast<Scalar>(group_size);
      Scalar var = Scalar(0);
      for (std::size_t i = 0; i < group_size; ++i) {
        const Scalar d = x.data()[base + i] - mu;
        var += d * d;
      }
      var /= static_cast<Scalar>(group_size);
      const Scalar r = Scalar(1) / std::sqrt(var + eps);
      rstd[static_cast<std::size_t>(n) * groups + g] = r;
      for (std::size_t i = 0; i < group_size; ++i) {
        const std::size_t c = static_cast<std::size_t>(g) * per_group + i / inner;
        const Scalar xh = (x.data()[base + i] - mu) * r;
        xhat[base + i] = xh;
        v[base + i] = xh * gamma.data()[c] + beta.data()[c];
      }
    }
  }
  return detail::make_result<Scalar>(x.shape(), std::move(v),
                                     [x, gamma, beta, groups, batch, channels, inner, per_group, group_size, xhat = std::move(xhat),
                                      rstd = std::move(rstd)](Node<Scalar>* out) {
    return [x, gamma, beta, groups, batch, channels, inner, per_group, group_size, xhat, rstd, out] {
      const bool gx = detail::wants_grad(x);
      Buffer<Scalar>* dgamma = detail::wants_grad(gamma) ? &gamma.node()->ensure_grad() : nullptr;
      Buffer<Scalar>* dbeta = detail::wants_grad(beta) ? &beta.node()->ensure_grad() : nullptr;
      Buffer<Scalar>* dx = gx ? &x.node()->ensure_grad() : nullptr;
      for (int n = 0; n < batch; ++n) {
        for (int g = 0; g < groups; ++g) {
          const std::size_t base = (static_cast<std::size_t>(n) * channels + static_cast<std::size_t>(g) * per_group) * inner;
          Scalar sum_dxh = Scalar(0);
          Scalar sum_dxh_xh = Scalar(0);
          for (std::size_t i = 0; i < group_size; ++i) {
            const std::size_t c = static_cast<std::size_t>(g) * per_group + i / inner;
            const Scalar gy = out->grad[base + i];
            if (dgamma) (*dgamma)[c] += gy * xhat[base + i];
            if (dbeta) (*dbeta)[c] += gy;
            const Scalar dxh = gy * gamma.data()[c];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xhat[base + i];
          }
          if (!gx) continue;
          const Scalar r = rstd[static_cast<std::size_t>(n) * groups + g];
          const Scalar m = static_cast<Scalar>(group_size);
          for (std::size_t i = 0; i < group_size; ++i) {
            const std::size_t c = static_cast<std::size_t>(g) * per_group + i / inner;
            const Scalar dxh = out->grad[base + i] * gamma.data()[c];
            (*dx)[base + i] += r / m * (m * dxh - sum_dxh - xhat[base + i] * sum_dxh_xh);
          }
        }
      }
    };
  }, x, gamma, beta);
}

// ---------------------------------------------------------------------------
// Convection and windowed morphology

/// Per-channel periodic bilinear translation: out(c, p) = x(c, p - time * v_c)
/// with velocity (C, 2) holding (v_x, v_y) in pixels per unit time.
template <typename Scalar>
Tensor<Scalar> bilinear_shift(const Tensor<Scalar>& x, const Tensor<Scalar>& velocity, Scalar time) {
  detail::require_rank(x, 4, "bilinear_shift");
  detail::require(velocity.rank() == 2 && velocity.dim(0) == x.dim(1) && velocity.dim(1) == 2,
                  "bilinear_shift: velocity must be (C, 2)");
  const int batch = x.dim(0);
  const int channels = x.dim(1);
  const int h = x.dim(2);
  const int w = x.dim(3);
  for (Scalar v : velocity.data()) detail::require(std::isfinite(v), "bilinear_shift: non-finite velocity");

  struct Stencil {
    int ox, oy;  // integer part of the sampling offset
    Scalar ax, ay;
  };
  std::vector<Stencil> st(static_cast<std::size_t>(channels));
  for (int c = 0; c < channels; ++c) {
    const Scalar px = -time * velocity.data()[static_cast<std::size_t>(2 * c)];
    const Scalar py = -time * velocity.data()[static_cast<std::size_t>(2 * c + 1)];
    const Scalar fx = std::floor(px);
    const Scalar fy = std::floor(py);
    st[static_cast<std::size_t>(c)] = {static_cast<int>(fx), static_cast<int>(fy), px - fx, py - fy};
  }

  Buffer<Scalar> v(x.numel());
  for (int n = 0; n < batch; ++n)
    for (int c = 0; c < channels; ++c) {
      const auto& s = st[static_cast<std::size_t>(c)];
      const Scalar* src = x.data().data() + (static_cast<std::size_t>(n) * channels + c) * h * w;
      Scalar* dst = v.data() + (static_cast<std::size_t>(n) * channels + c) * h * w;
      for (int y = 0; y < h; ++y) {
        const int y0 = wrap_index(y + s.oy, h);
        const int y1 = wrap_index(y0 + 1, h);
        for (int xx = 0; xx < w; ++xx) {
          const int x0 = wrap_index(xx + s.ox, w);
          const int x1 = wrap_index(x0 + 1, w);
          dst[y * w + xx] = (Scalar(1) - s.ay) * ((Scalar(1) - s.ax) * src[y0 * w + x0] + s.ax * src[y0 * w + x1]) +
                            s.ay * ((Scalar(1) - s.ax) * src[y1 * w + x0] + s.ax * src[y1 * w + x1]);
        }
      }
    }
  return detail::make_result<Scalar>(x.shape(), std::move(v), [x, velocity, time, st, batch, channels, h, w](Node<Scalar>* out) {
    return [x, velocity, time, st, batch, channels, h, w, out] {
      Buffer<Scalar>* dx = detail::wants_grad(x) ? &x.node()->ensure_grad() : nullptr;
      Buffer<Scalar>* dv = detail::wants_grad(velocity) ? &velocity.node()->ensure_grad() : nullptr;
      for (int n = 0; n < batch; ++n)
        for (int c = 0; c < channels; ++c) {
          const auto& s = st[static_cast<std::size_t>(c)];
          const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * h * w;
          const Scalar* src = x.data().data() + off;
          const Scalar* gy = out->grad.data() + off;
          Scalar dpx = Scalar(0);
          Scalar dpy = Scalar(0);
          for (int y = 0; y < h; ++y) {
            const int y0 = wrap_index(y + s.oy, h);
            const int y1 = wrap_index(y0 + 1, h);
            for (int xx = 0; xx < w; ++xx) {
              const int x0 = wrap_index(xx + s.ox, w);
              const int x1 = wrap_index(x0 + 1, w);
              const Scalar g = gy[y * w + xx];
              if (dx) {
                Scalar* d = dx->data() + off;
                d[y0 * w + x0] += g * (Scalar(1) - s.ay) * (Scalar(1) - s.ax);
                d[y0 * w + x1] += g * (Scalar(1) - s.ay) * s.ax;
                d[y1 * w + x0] += g * s.ay * (Scalar(1) - s.ax);
                d[y1 * w + x1] += g * s.ay * s.ax;
              }
              if (dv) {
                const Scalar f00 = src[y0 * w + x0], f01 = src[y0 * w + x1];
                const Scalar f10 = src[y1 * w + x0], f11 = src[y1 * w + x1];
                dpx += g * ((Scalar(1) - s.ay) * (f01 - f00) + s.ay * (f11 - f10));
                dpy += g * ((Scalar(1) - s.ax) * (f10 - f00) + s.ax * (f11 - f01));
              }
            }
          }
          if (dv) {
            (*dv)[static_cast<std::size_t>(2 * c)] += -time * dpx;
            (*dv)[static_cast<std::size_t>(2 * c + 1)] += -time * dpy;
          }
        }
    };
  }, x, velocity);
}

/// Structuring costs per channel: out(c, o) = base(o) * scale(c)^(-1/(k-1)),
/// i.e. b_t^k at t = scale(c) given base(o) = b_1^k of window offset o.
template <typename Scalar>
Tensor<Scalar> structuring_costs(const Tensor<Scalar>& scales, const std::vector<Scalar>& base, Scalar k) {
  detail::require(k > Scalar(1), "structuring_costs: k must be > 1");
  const std::size_t channels = scales.numel();
  const std::size_t nw = base.size();
  const Scalar q = Scalar(1) / (k - Scalar(1));
  Buffer<Scalar> v(channels * nw);
  for (std::size_t c = 0; c < channels; ++c) {
    detail::require(scales.data()[c] > Scalar(0), "structuring_costs: scales must be > 0");
    const Scalar f = std::pow(scales.data()[c], -q);
    for (std::size_t o = 0; o < nw; ++o) v[c * nw + o] = base[o] * f;
  }
  return detail::make_result<Scalar>({static_cast<int>(channels), static_cast<int>(nw)}, std::move(v),
                                     [scales, base, q, channels, nw](Node<Scalar>* out) {
    return [scales, base, q, channels, nw, out] {
      auto& gs = scales.node()->ensure_grad();
      for (std::size_t c = 0; c < channels; ++c) {
        const Scalar df = -q * std::pow(scales.data()[c], -q - Scalar(1));
        Scalar acc = Scalar(0);
        for (std::size_t o = 0; o < nw; ++o) acc += out->grad[c * nw + o] * base[o];
        gs[c] += acc * df;
      }
    };
  }, scales);
}

/// Values and winning offsets of a windowed min/max scan.
template <typename Scalar>
struct WindowScan {
  Tensor<Scalar> values;
  std::vector<int> arg;  // offset index in row-major window order, per output element
};

namespace detail {

template <bool Min, typename Scalar>
WindowScan<Scalar> window_extremum(const Tensor<Scalar>& x, const Tensor<Scalar>& costs, int radius) {
  require_rank(x, 4, "window_min/max");
  const int side = 2 * radius + 1;
  const int nw = side * side;
  require(radius >= 1, "window_min/max: radius must be >= 1");
  require(costs.rank() == 2 && costs.dim(0) == x.dim(1) && costs.dim(1) == nw,
          "window_min/max: costs must be (C, (2r+1)^2)");
  const int batch = x.dim(0);
  const int channels = x.dim(1);
  const int h = x.dim(2);
  const int w = x.dim(3);

  // Periodic source index for each (offset, pixel) is the same for every plane.
  std::vector<int> src(static_cast<std::size_t>(nw) * h * w);
  for (int o = 0; o < nw; ++o) {
    const int dy = o / side - radius;
    const int dx = o % side - radius;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        src[(static_cast<std::size_t>(o) * h + y) * w + xx] = wrap_index(y + dy, h) * w + wrap_index(xx + dx, w);
  }

  Buffer<Scalar> v(x.numel());
  std::vector<int> arg(x.numel());
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int n = 0; n < batch; ++n)
    for (int c = 0; c < channels; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * plane;
      const Scalar* in = x.data().data() + off;
      const Scalar* cost = costs.data().data() + static_cast<std::size_t>(c) * nw;
      for (std::size_t p = 0; p < plane; ++p) {
        Scalar best = Min ? std::numeric_limits<Scalar>::infinity() : -std::numeric_limits<Scalar>::infinity();
        int best_o = 0;
        for (int o = 0; o < nw; ++o) {
          const Scalar val = Min ? in[src[static_cast<std::size_t>(o) * plane + p]] + cost[o]
                                 : in[src[static_cast<std::size_t>(o) * plane + p]] - cost[o];
          if (Min ? val < best : val > best) {
            best = val;
            best_o = o;
          }
        }
        v[off + p] = best;
        arg[off + p] = best_o;
      }
    }

  Tensor<Scalar> values = make_result<Scalar>(x.shape(), std::move(v),
                                              [x, costs, arg, src, batch, channels, plane, nw](Node<Scalar>* out) {
    return [x, costs, arg, src, batch, channels, plane, nw, out] {
      Buffer<Scalar>* dx = wants_grad(x) ? &x.node()->ensure_grad() : nullptr;
      Buffer<Scalar>* dc = wants_grad(costs) ? &costs.node()->ensure_grad() : nullptr;
      for (int n = 0; n < batch; ++n)
        for (int c = 0; c < channels; ++c) {
          const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * plane;
          for (std::size_t p = 0; p < plane; ++p) {
            const Scalar g = out->grad[off + p];
            const int o = arg[off + p];
            if (dx) (*dx)[off + static_cast<std::size_t>(src[static_cast<std::size_t>(o) * plane + p])] += g;
            if (dc) (*dc)[static_cast<std::size_t>(c) * nw + static_cast<std::size_t>(o)] += Min ? g : -g;
          }
        }
    };
  }, x, costs);
  return {std::move(values), std::move(arg)};
}

}  // namespace detail

/// out(b, c, p) = min_o x(b, c, p + offset_o) + costs(c, o), periodic; ties go to the first offset.
template <typename Scalar>
WindowScan<Scalar> window_min_indexed(const Tensor<Scalar>& x, const Tensor<Scalar>& costs, int radius) {
  return detail::window_extremum<true>(x, costs, radius);
}

/// out(b, c, p) = max_o x(b, c, p + offset_o) - costs(c, o), periodic; ties go to the first offset.
template <typename Scalar>
WindowScan<Scalar> window_max_indexed(const Tensor<Scalar>& x, const Tensor<Scalar>& costs, int radius) {
  return detail::window_extremum<false>(x, costs, radius);
}

template <typename Scalar>
Tensor<Scalar> window_min(const Tensor<Scalar>& x, const Tensor<Scalar>& costs, int radius) {
  return window_min_indexed(x, costs, radius).values;
}

template <typename Scalar>
Tensor<Scalar> window_max(const Tensor<Scalar>& x, const Tensor<Scalar>& costs, int radius) {
  return window_max_indexed(x, costs, radius).values;
}

}  // namespace mflow::ad
