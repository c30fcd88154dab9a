// SPDX-License-Identifier: Apache-2.0
#pragma once

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <memory>
#include <vector>

#include "fersnet/autodiff.hpp"

namespace fersnet {

enum class Mode { kTrain, kEval };

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

/// Unfold one sample [C,H,W] into [C*kh*kw, Ho*Wo]. Rows follow (c,ky,kx).
template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo,
            T* col) {
  for (int c = 0; c < C; ++c) {
    const T* xc = x + static_cast<long long>(c) * H * W;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* row = col + (static_cast<long long>((c * kh + ky) * kw + kx)) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride - pad + ky;
          T* dst = row + static_cast<long long>(oy) * Wo;
          if (iy < 0 || iy >= H) {
            std::memset(dst, 0, sizeof(T) * static_cast<size_t>(Wo));
            continue;
          }
          const T* src = xc + static_cast<long long>(iy) * W;
          if (stride == 1) {
            // contiguous span: ix = ox - pad + kx for ox in [0, Wo)
            int ox0 = std::max(0, pad - kx);
            int ox1 = std::min(Wo, W + pad - kx);  // exclusive
            if (ox0 > 0) std::memset(dst, 0, sizeof(T) * static_cast<size_t>(ox0));
            if (ox1 > ox0)
              std::memcpy(dst + ox0, src + (ox0 - pad + kx), sizeof(T) * static_cast<size_t>(ox1 - ox0));
            if (ox1 < Wo) std::memset(dst + std::max(ox1, 0), 0, sizeof(T) * static_cast<size_t>(Wo - std::max(ox1, 0)));
          } else {
            for (int ox = 0; ox < Wo; ++ox) {
              int ix = ox * stride - pad + kx;
              dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

/// Fold [C*kh*kw, Ho*Wo] column gradients back onto a sample, accumulating.
template <typename T>
void col2im_accum(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho,
                  int Wo, T* x) {
  for (int c = 0; c < C; ++c) {
    T* xc = x + static_cast<long long>(c) * H * W;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* row = col + (static_cast<long long>((c * kh + ky) * kw + kx)) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          const T* src = row + static_cast<long long>(oy) * Wo;
          T* dst = xc + static_cast<long long>(iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* what) {
  if (!a.value().same_shape(b.value()))
    throw InputError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  long long n = out.numel();
  for (long long i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& nd) {
    const T* g = nd.grad.data();
    long long n = nd.grad.numel();
    for (int k = 0; k < 2; ++k) {
      auto& p = nd.parents[k];
      if (!p->requires_grad) continue;
      T* pg = p->ensure_grad().data();
      for (long long i = 0; i < n; ++i) pg[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  long long n = out.numel();
  for (long long i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& nd) {
    const T* g = nd.grad.data();
    long long n = nd.grad.numel();
    if (nd.parents[0]->requires_grad) {
      T* pg = nd.parents[0]->ensure_grad().data();
      for (long long i = 0; i < n; ++i) pg[i] += g[i];
    }
    if (nd.parents[1]->requires_grad) {
      T* pg = nd.parents[1]->ensure_grad().data();
      for (long long i = 0; i < n; ++i) pg[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  long long n = out.numel();
  for (long long i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& nd) {
    const T* g = nd.grad.data();
    const T* va = nd.parents[0]->value.data();
    const T* vb = nd.parents[1]->value.data();
    long long n = nd.grad.numel();
    if (nd.parents[0]->requires_grad) {
      T* pg = nd.parents[0]->ensure_grad().data();
      for (long long i = 0; i < n; ++i) pg[i] += g[i] * vb[i];
    }
    if (nd.parents[1]->requires_grad) {
      T* pg = nd.parents[1]->ensure_grad().data();
      for (long long i = 0; i < n; ++i) pg[i] += g[i] * va[i];
    }
  });
}

/// Elementwise a*x + b with scalar coefficients.
template <typename T>
Var<T> affine(const Var<T>& x, T a, T b) {
  Tensor<T> out(x.shape());
  const T* px = x.value().data();
  T* po = out.data();
  long long n = out.numel();
  for (long long i = 0; i < n; ++i) po[i] = a * px[i] + b;
  return make_op<T>(std::move(out), {x}, [a](Node<T>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    const T* g = nd.grad.data();
    T* pg = nd.parents[0]->ensure_grad().data();
    long long n = nd.grad.numel();
    for (long long i = 0; i < n; ++i) pg[i] += a * g[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T a) {
  return affine(x, a, T(0));
}

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return add(a, b);
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return mul(x, x);
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const T* px = x.value().data();
  T* po = out.data();
  long long n = out.numel();
  for (long long i = 0; i < n; ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
  return make_op<T>(std::move(out), {x}, [](Node<T>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    const T* g = nd.grad.data();
    const T* y = nd.value.data();
    T* pg = nd.parents[0]->ensure_grad().data();
    long long n = nd.grad.numel();
    for (long long i = 0; i < n; ++i)
      if (y[i] > T(0)) pg[i] += g[i];
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  Tensor<T> out(x.shape());
  const T* px = x.value().data();
  T* po = out.data();
  long long n = out.numel();
  for (long long i = 0; i < n; ++i) po[i] = px[i] > T(0) ? px[i] : slope * px[i];
  return make_op<T>(std::move(out), {x}, [slope](Node<T>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    const T* g = nd.grad.data();
    const T* v = nd.parents[0]->value.data();
    T* pg = nd.parents[0]->ensure_grad().data();
    long long n = nd.grad.numel();
    for (long long i = 0; i < n; ++i) pg[i] += (v[i] > T(0) ? g[i] : slope * g[i]);
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const T* px = x.value().data();
  T* po = out.data();
  long long n = out.numel();
  for (long long i = 0; i < n; ++i) po[i] = T(1) / (T(1) + std::exp(-px[i]));
  return make_op<T>(std::move(out), {x}, [](Node<T>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    const T* g = nd.grad.data();
    const T* y = nd.value.data();
    T* pg = nd.parents[0]->ensure_grad().data();
    long long n = nd.grad.numel();
    for (long long i = 0; i < n; ++i) pg[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const T* px = x.value().data();
  T* po = out.data();
  long long n = out.numel();
  for (long long i = 0; i < n; ++i) po[i] = std::tanh(px[i]);
  return make_op<T>(std::move(out), {x}, [](Node<T>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    const T* g = nd.grad.data();
    const T* y = nd.value.data();
    T* pg = nd.parents[0]->ensure_grad().data();
    long long n = nd.grad.numel();
    for (long long i = 0; i < n; ++i) pg[i] += g[i] * (T(1) - y[i] * y[i]);
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  Shape in_shape = x.shape();
  return make_op<T>(std::move(out), {x}, [in_shape](Node<T>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    const T* g = nd.grad.data();
    T* pg = nd.parents[0]->ensure_grad().data();
    long long n = nd.grad.numel();
    for (long long i = 0; i < n; ++i) pg[i] += g[i];
  });
}

/// [B,C,H,W] -> [B, C*H*W]
template <typename T>
Var<T> flatten(const Var<T>& x) {
  if (x.value().rank() < 2) throw InputError("flatten expects rank >= 2");
  long long rest = x.numel() / x.shape()[0];
  return reshape(x, {x.shape()[0], static_cast<int>(rest)});
}

/// Concatenate along the channel axis of [B,C,H,W] tensors.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw InputError("concat_channels: incompatible shapes " + shape_str(sa) + " vs " +
                     shape_str(sb));
  int B = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
  Tensor<T> out({B, Ca + Cb, H, W});
  long long plane = static_cast<long long>(H) * W;
  for (int n = 0; n < B; ++n) {
    std::memcpy(out.data() + (static_cast<long long>(n) * (Ca + Cb)) * plane,
                a.value().data() + static_cast<long long>(n) * Ca * plane,
                sizeof(T) * static_cast<size_t>(Ca * plane));
    std::memcpy(out.data() + (static_cast<long long>(n) * (Ca + Cb) + Ca) * plane,
                b.value().data() + static_cast<long long>(n) * Cb * plane,
                sizeof(T) * static_cast<size_t>(Cb * plane));
  }
  return make_op<T>(std::move(out), {a, b}, [B, Ca, Cb, plane](Node<T>& nd) {
    const T* g = nd.grad.data();
    if (nd.parents[0]->requires_grad) {
      T* pg = nd.parents[0]->ensure_grad().data();
      for (int n = 0; n < B; ++n) {
        const T* src = g + (static_cast<long long>(n) * (Ca + Cb)) * plane;
        T* dst = pg + static_cast<long long>(n) * Ca * plane;
        for (long long i = 0; i < Ca * plane; ++i) dst[i] += src[i];
      }
    }
    if (nd.parents[1]->requires_grad) {
      T* pg = nd.parents[1]->ensure_grad().data();
      for (int n = 0; n < B; ++n) {
        const T* src = g + (static_cast<long long>(n) * (Ca + Cb) + Ca) * plane;
        T* dst = pg + static_cast<long long>(n) * Cb * plane;
        for (long long i = 0; i < Cb * plane; ++i) dst[i] += src[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  const T* px = x.value().data();
  long long n = x.numel();
  // double accumulator keeps large reductions honest in float mode
  double acc = 0;
  for (long long i = 0; i < n; ++i) acc += static_cast<double>(px[i]);
  return make_op<T>(Tensor<T>::scalar(static_cast<T>(acc)), {x}, [](Node<T>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    T g = nd.grad[0];
    T* pg = nd.parents[0]->ensure_grad().data();
    long long n = nd.parents[0]->value.numel();
    for (long long i = 0; i < n; ++i) pg[i] += g;
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  return scale(sum_all(x), static_cast<T>(1.0 / static_cast<double>(x.numel())));
}

/// Mean over batch and elements of the squared difference.
template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mse");
  return mean_all(square(sub(a, b)));
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// y = x * w^T + bias with x [B,D], w [Dp,D], bias [Dp].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 2 || sw.size() != 2)
    throw ConfigError("linear: expected 2-d input and weight");
  if (sx[1] != sw[1])
    throw ConfigError("linear: input width " + std::to_string(sx[1]) +
                      " does not match weight columns " + std::to_string(sw[1]));
  if (bias.shape() != Shape{sw[0]}) throw ConfigError("linear: bias length mismatch");
  int B = sx[0], D = sx[1], Dp = sw[0];
  Tensor<T> out({B, Dp});
  detail::ConstMatMap<T> X(x.value().data(), B, D), W(w.value().data(), Dp, D);
  detail::MatMap<T> Y(out.data(), B, Dp);
  Y.noalias() = X * W.transpose();
  const T* pb = bias.value().data();
  for (int n = 0; n < B; ++n)
    for (int j = 0; j < Dp; ++j) out[static_cast<long long>(n) * Dp + j] += pb[j];
  return make_op<T>(std::move(out), {x, w, bias}, [B, D, Dp](Node<T>& nd) {
    detail::ConstMatMap<T> G(nd.grad.data(), B, Dp);
    detail::ConstMatMap<T> X(nd.parents[0]->value.data(), B, D);
    detail::ConstMatMap<T> W(nd.parents[1]->value.data(), Dp, D);
    if (nd.parents[0]->requires_grad) {
      detail::MatMap<T> GX(nd.parents[0]->ensure_grad().data(), B, D);
      GX.noalias() += G * W;
    }
    if (nd.parents[1]->requires_grad) {
      detail::MatMap<T> GW(nd.parents[1]->ensure_grad().data(), Dp, D);
      GW.noalias() += G.transpose() * X;
    }
    if (nd.parents[2]->requires_grad) {
      T* gb = nd.parents[2]->ensure_grad().data();
      for (int n = 0; n < B; ++n)
        for (int j = 0; j < Dp; ++j) gb[j] += nd.grad[static_cast<long long>(n) * Dp + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// 2-d convolution. x [B,C,H,W], w [K,C,kh,kw], bias [K].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int pad) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4) throw ConfigError("conv2d: expected 4-d input and weight");
  if (sx[1] != sw[1])
    throw ConfigError("conv2d: input channels " + std::to_string(sx[1]) +
                      " do not match kernel channels " + std::to_string(sw[1]));
  if (bias.shape() != Shape{sw[0]}) throw ConfigError("conv2d: bias length mismatch");
  int B = sx[0], C = sx[1], H = sx[2], W = sx[3];
  int K = sw[0], kh = sw[2], kw = sw[3];
  int Ho = detail::conv_out_extent(H, kh, stride, pad);
  int Wo = detail::conv_out_extent(W, kw, stride, pad);
  if (Ho <= 0 || Wo <= 0) throw InputError("conv2d: input too small for kernel");
  long long ckk = static_cast<long long>(C) * kh * kw;
  long long ospatial = static_cast<long long>(Ho) * Wo;
  bool pointwise = (kh == 1 && kw == 1 && stride == 1 && pad == 0);

  Tensor<T> out({B, K, Ho, Wo});
  {
    detail::ConstMatMap<T> Wm(w.value().data(), K, ckk);
    std::vector<T> col;
    if (!pointwise) col.resize(static_cast<size_t>(ckk * ospatial));
    const T* pb = bias.value().data();
    for (int n = 0; n < B; ++n) {
      const T* xn = x.value().data() + static_cast<long long>(n) * C * H * W;
      T* yn = out.data() + static_cast<long long>(n) * K * ospatial;
      if (pointwise) {
        detail::ConstMatMap<T> Col(xn, ckk, ospatial);
        detail::MatMap<T> Y(yn, K, ospatial);
        Y.noalias() = Wm * Col;
      } else {
        detail::im2col(xn, C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
        detail::ConstMatMap<T> Col(col.data(), ckk, ospatial);
        detail::MatMap<T> Y(yn, K, ospatial);
        Y.noalias() = Wm * Col;
      }
      for (int k = 0; k < K; ++k) {
        T b = pb[k];
        T* row = yn + static_cast<long long>(k) * ospatial;
        for (long long i = 0; i < ospatial; ++i) row[i] += b;
      }
    }
  }

  auto bwd = [B, C, H, W, K, kh, kw, stride, pad, Ho, Wo, ckk, ospatial, pointwise](Node<T>& nd) {
    const Tensor<T>& xv = nd.parents[0]->value;
    const Tensor<T>& wv = nd.parents[1]->value;
    detail::ConstMatMap<T> Wm(wv.data(), K, ckk);
    bool need_dx = nd.parents[0]->requires_grad;
    bool need_dw = nd.parents[1]->requires_grad;
    bool need_db = nd.parents[2]->requires_grad;
    std::vector<T> col, gcol;
    if (!pointwise && (need_dw)) col.resize(static_cast<size_t>(ckk * ospatial));
    if (!pointwise && need_dx) gcol.resize(static_cast<size_t>(ckk * ospatial));
    T* dx = need_dx ? nd.parents[0]->ensure_grad().data() : nullptr;
    T* dw = need_dw ? nd.parents[1]->ensure_grad().data() : nullptr;
    T* db = need_db ? nd.parents[2]->ensure_grad().data() : nullptr;
    for (int n = 0; n < B; ++n) {
      const T* gy = nd.grad.data() + static_cast<long long>(n) * K * ospatial;
      detail::ConstMatMap<T> Gy(gy, K, ospatial);
      const T* xn = xv.data() + static_cast<long long>(n) * C * H * W;
      if (need_dx) {
        if (pointwise) {
          detail::MatMap<T> Gx(dx + static_cast<long long>(n) * C * H * W, ckk, ospatial);
          Gx.noalias() += Wm.transpose() * Gy;
        } else {
          detail::MatMap<T> Gc(gcol.data(), ckk, ospatial);
          Gc.noalias() = Wm.transpose() * Gy;
          detail::col2im_accum(gcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                               dx + static_cast<long long>(n) * C * H * W);
        }
      }
      if (need_dw) {
        detail::MatMap<T> Gw(dw, K, ckk);
        if (pointwise) {
          detail::ConstMatMap<T> Col(xn, ckk, ospatial);
          Gw.noalias() += Gy * Col.transpose();
        } else {
          detail::im2col(xn, C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
          detail::ConstMatMap<T> Col(col.data(), ckk, ospatial);
          Gw.noalias() += Gy * Col.transpose();
        }
      }
      if (need_db) {
        for (int k = 0; k < K; ++k) {
          const T* row = gy + static_cast<long long>(k) * ospatial;
          T acc(0);
          for (long long i = 0; i < ospatial; ++i) acc += row[i];
          db[k] += acc;
        }
      }
    }
  };
  return make_op<T>(std::move(out), {x, w, bias}, std::move(bwd));
}

/// Transposed convolution with kernel == stride (exact upscaling, no overlap).
/// x [B,C,H,W], w [C,K,s,s], bias [K] -> [B,K,s*H,s*W].
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4)
    throw ConfigError("conv_transpose2d: expected 4-d input and weight");
  if (sw[2] != stride || sw[3] != stride)
    throw ConfigError("conv_transpose2d: kernel must equal stride");
  if (sx[1] != sw[0])
    throw ConfigError("conv_transpose2d: input channels " + std::to_string(sx[1]) +
                      " do not match kernel channels " + std::to_string(sw[0]));
  int B = sx[0], C = sx[1], H = sx[2], W = sx[3];
  int K = sw[1], s = stride;
  if (bias.shape() != Shape{K}) throw ConfigError("conv_transpose2d: bias length mismatch");
  int Ho = H * s, Wo = W * s;
  long long spatial = static_cast<long long>(H) * W;
  long long ks = static_cast<long long>(K) * s * s;

  Tensor<T> out({B, K, Ho, Wo});
  {
    detail::ConstMatMap<T> Wm(w.value().data(), C, ks);
    std::vector<T> tmp(static_cast<size_t>(ks * spatial));
    const T* pb = bias.value().data();
    for (int n = 0; n < B; ++n) {
      detail::ConstMatMap<T> Xn(x.value().data() + static_cast<long long>(n) * C * spatial, C,
                                spatial);
      detail::MatMap<T> Tm(tmp.data(), ks, spatial);
      Tm.noalias() = Wm.transpose() * Xn;
      // scatter: rows (k,dy,dx) land on disjoint output cells
      T* yn = out.data() + static_cast<long long>(n) * K * Ho * Wo;
      for (int k = 0; k < K; ++k) {
        for (int dy = 0; dy < s; ++dy) {
          for (int dx = 0; dx < s; ++dx) {
            const T* row = tmp.data() + (static_cast<long long>(k) * s * s + dy * s + dx) * spatial;
            for (int i = 0; i < H; ++i) {
              T* dst = yn + (static_cast<long long>(k) * Ho + (i * s + dy)) * Wo + dx;
              const T* src = row + static_cast<long long>(i) * W;
              for (int j = 0; j < W; ++j) dst[static_cast<long long>(j) * s] = src[j] + pb[k];
            }
          }
        }
      }
    }
  }

  auto bwd = [B, C, H, W, K, s, Ho, Wo, spatial, ks](Node<T>& nd) {
    const Tensor<T>& xv = nd.parents[0]->value;
    const Tensor<T>& wv = nd.parents[1]->value;
    detail::ConstMatMap<T> Wm(wv.data(), C, ks);
    bool need_dx = nd.parents[0]->requires_grad;
    bool need_dw = nd.parents[1]->requires_grad;
    bool need_db = nd.parents[2]->requires_grad;
    std::vector<T> gath(static_cast<size_t>(ks * spatial));
    T* dx = need_dx ? nd.parents[0]->ensure_grad().data() : nullptr;
    T* dw = need_dw ? nd.parents[1]->ensure_grad().data() : nullptr;
    T* db = need_db ? nd.parents[2]->ensure_grad().data() : nullptr;
    for (int n = 0; n < B; ++n) {
      const T* gy = nd.grad.data() + static_cast<long long>(n) * K * Ho * Wo;
      // gather output grads into (k,dy,dx) x (H*W) layout
      for (int k = 0; k < K; ++k) {
        for (int dy = 0; dy < s; ++dy) {
          for (int dx2 = 0; dx2 < s; ++dx2) {
            T* row = gath.data() + (static_cast<long long>(k) * s * s + dy * s + dx2) * spatial;
            for (int i = 0; i < H; ++i) {
              const T* src = gy + (static_cast<long long>(k) * Ho + (i * s + dy)) * Wo + dx2;
              T* dst = row + static_cast<long long>(i) * W;
              for (int j = 0; j < W; ++j) dst[j] = src[static_cast<long long>(j) * s];
            }
          }
        }
      }
      detail::ConstMatMap<T> G(gath.data(), ks, spatial);
      if (need_dx) {
        detail::MatMap<T> Gx(dx + static_cast<long long>(n) * C * spatial, C, spatial);
        Gx.noalias() += Wm * G;
      }
      if (need_dw) {
        detail::ConstMatMap<T> Xn(xv.data() + static_cast<long long>(n) * C * spatial, C, spatial);
        detail::MatMap<T> Gw(dw, C, ks);
        Gw.noalias() += Xn * G.transpose();
      }
      if (need_db) {
        for (int k = 0; k < K; ++k) {
          const T* plane = gy + static_cast<long long>(k) * Ho * Wo;
          T acc(0);
          for (long long i = 0; i < static_cast<long long>(Ho) * Wo; ++i) acc += plane[i];
          db[k] += acc;
        }
      }
    }
  };
  return make_op<T>(std::move(out), {x, w, bias}, std::move(bwd));
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// 2x2 stride-2 max pooling. Requires even spatial extents.
template <typename T>
Var<T> max_pool2d(const Var<T>& x) {
  const auto& sx = x.shape();
  if (sx.size() != 4) throw InputError("max_pool2d: expected 4-d input");
  int B = sx[0], C = sx[1], H = sx[2], W = sx[3];
  if (H < 2 || W < 2 || H % 2 != 0 || W % 2 != 0)
    throw InputError("max_pool2d: spatial extents must be even and >= 2, got " + shape_str(sx));
  int Ho = H / 2, Wo = W / 2;
  Tensor<T> out({B, C, Ho, Wo});
  auto arg = std::make_shared<std::vector<std::uint8_t>>(
      static_cast<size_t>(static_cast<long long>(B) * C * Ho * Wo));
  const T* px = x.value().data();
  T* po = out.data();
  long long oi = 0;
  for (int n = 0; n < B; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* plane = px + (static_cast<long long>(n) * C + c) * H * W;
      for (int i = 0; i < Ho; ++i) {
        const T* r0 = plane + static_cast<long long>(2 * i) * W;
        const T* r1 = r0 + W;
        for (int j = 0; j < Wo; ++j, ++oi) {
          T v0 = r0[2 * j], v1 = r0[2 * j + 1], v2 = r1[2 * j], v3 = r1[2 * j + 1];
          T best = v0;
          std::uint8_t a = 0;
          if (v1 > best) { best = v1; a = 1; }
          if (v2 > best) { best = v2; a = 2; }
          if (v3 > best) { best = v3; a = 3; }
          po[oi] = best;
          (*arg)[static_cast<size_t>(oi)] = a;
        }
      }
    }
  }
  return make_op<T>(std::move(out), {x}, [B, C, H, W, Ho, Wo, arg](Node<T>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    const T* g = nd.grad.data();
    T* pg = nd.parents[0]->ensure_grad().data();
    long long oi = 0;
    for (int n = 0; n < B; ++n) {
      for (int c = 0; c < C; ++c) {
        T* plane = pg + (static_cast<long long>(n) * C + c) * H * W;
        for (int i = 0; i < Ho; ++i) {
          for (int j = 0; j < Wo; ++j, ++oi) {
            std::uint8_t a = (*arg)[static_cast<size_t>(oi)];
            int di = a >> 1, dj = a & 1;
            plane[static_cast<long long>(2 * i + di) * W + (2 * j + dj)] += g[oi];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch norm over [B,C,H,W]. In train mode batch statistics are
/// used and the running buffers are updated in place (unbiased variance, as
/// is conventional); in eval mode the running buffers are used.
template <typename T>
Var<T> batch_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                    Tensor<T>* running_mean, Tensor<T>* running_var, Mode mode, T momentum,
                    T eps, bool freeze_running = false) {
  const auto& sx = x.shape();
  if (sx.size() != 4) throw InputError("batch_norm2d: expected 4-d input");
  int B = sx[0], C = sx[1], H = sx[2], W = sx[3];
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
    throw ConfigError("batch_norm2d: parameter length does not match channels");
  long long plane = static_cast<long long>(H) * W;
  long long n_per_c = static_cast<long long>(B) * plane;
  auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
  auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
  bool train = (mode == Mode::kTrain);

  if (train) {
    for (int c = 0; c < C; ++c) {
      double s = 0, s2 = 0;
      for (int n = 0; n < B; ++n) {
        const T* p = x.value().data() + (static_cast<long long>(n) * C + c) * plane;
        for (long long i = 0; i < plane; ++i) {
          double v = static_cast<double>(p[i]);
          s += v;
          s2 += v * v;
        }
      }
      double mu = s / static_cast<double>(n_per_c);
      double var = s2 / static_cast<double>(n_per_c) - mu * mu;
      if (var < 0) var = 0;
      (*mean)[static_cast<size_t>(c)] = static_cast<T>(mu);
      (*invstd)[static_cast<size_t>(c)] =
          static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      if (!freeze_running) {
        double unbiased = n_per_c > 1 ? var * static_cast<double>(n_per_c) /
                                            static_cast<double>(n_per_c - 1)
                                      : var;
        (*running_mean)[c] = (T(1) - momentum) * (*running_mean)[c] + momentum * static_cast<T>(mu);
        (*running_var)[c] =
            (T(1) - momentum) * (*running_var)[c] + momentum * static_cast<T>(unbiased);
      }
    }
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean)[static_cast<size_t>(c)] = (*running_mean)[c];
      (*invstd)[static_cast<size_t>(c)] =
          static_cast<T>(1.0 / std::sqrt(static_cast<double>((*running_var)[c]) +
                                         static_cast<double>(eps)));
    }
  }

  Tensor<T> out(sx);
  {
    const T* px = x.value().data();
    const T* pg = gamma.value().data();
    const T* pb = beta.value().data();
    T* po = out.data();
    for (int n = 0; n < B; ++n) {
      for (int c = 0; c < C; ++c) {
        T mu = (*mean)[static_cast<size_t>(c)];
        T is = (*invstd)[static_cast<size_t>(c)];
        T gsc = pg[c] * is;
        T b = pb[c] - gsc * mu;
        const T* src = px + (static_cast<long long>(n) * C + c) * plane;
        T* dst = po + (static_cast<long long>(n) * C + c) * plane;
        for (long long i = 0; i < plane; ++i) dst[i] = gsc * src[i] + b;
      }
    }
  }

  auto bwd = [B, C, plane, n_per_c, mean, invstd, train](Node<T>& nd) {
    const Tensor<T>& xv = nd.parents[0]->value;
    const T* pg = nd.parents[1]->value.data();
    bool need_dx = nd.parents[0]->requires_grad;
    bool need_dg = nd.parents[1]->requires_grad;
    bool need_db = nd.parents[2]->requires_grad;
    T* dx = need_dx ? nd.parents[0]->ensure_grad().data() : nullptr;
    T* dg = need_dg ? nd.parents[1]->ensure_grad().data() : nullptr;
    T* db = need_db ? nd.parents[2]->ensure_grad().data() : nullptr;
    for (int c = 0; c < C; ++c) {
      T mu = (*mean)[static_cast<size_t>(c)];
      T is = (*invstd)[static_cast<size_t>(c)];
      double s1 = 0, s2 = 0;  // sum(dy), sum(dy * xhat)
      for (int n = 0; n < B; ++n) {
        const T* gy = nd.grad.data() + (static_cast<long long>(n) * C + c) * plane;
        const T* xr = xv.data() + (static_cast<long long>(n) * C + c) * plane;
        for (long long i = 0; i < plane; ++i) {
          double xhat = static_cast<double>((xr[i] - mu) * is);
          s1 += static_cast<double>(gy[i]);
          s2 += static_cast<double>(gy[i]) * xhat;
        }
      }
      if (need_db) db[c] += static_cast<T>(s1);
      if (need_dg) dg[c] += static_cast<T>(s2);
      if (!need_dx) continue;
      if (train) {
        T inv_n = static_cast<T>(1.0 / static_cast<double>(n_per_c));
        T m1 = static_cast<T>(s1) * inv_n;
        T m2 = static_cast<T>(s2) * inv_n;
        T gsc = pg[c] * is;
        for (int n = 0; n < B; ++n) {
          const T* gy = nd.grad.data() + (static_cast<long long>(n) * C + c) * plane;
          const T* xr = xv.data() + (static_cast<long long>(n) * C + c) * plane;
          T* gx = dx + (static_cast<long long>(n) * C + c) * plane;
          for (long long i = 0; i < plane; ++i) {
            T xhat = (xr[i] - mu) * is;
            gx[i] += gsc * (gy[i] - m1 - xhat * m2);
          }
        }
      } else {
        T gsc = pg[c] * is;
        for (int n = 0; n < B; ++n) {
          const T* gy = nd.grad.data() + (static_cast<long long>(n) * C + c) * plane;
          T* gx = dx + (static_cast<long long>(n) * C + c) * plane;
          for (long long i = 0; i < plane; ++i) gx[i] += gsc * gy[i];
        }
      }
    }
  };
  return make_op<T>(std::move(out), {x, gamma, beta}, std::move(bwd));
}

// ---------------------------------------------------------------------------
// Loss primitives
// ---------------------------------------------------------------------------

/// Mean over the batch of -log softmax(logits)[label]. logits [B,E].
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const auto& s = logits.shape();
  if (s.size() != 2) throw InputError("softmax_cross_entropy: expected [B,E] logits");
  int B = s[0], E = s[1];
  if (static_cast<int>(labels.size()) != B)
    throw InputError("softmax_cross_entropy: label count does not match batch");
  for (int n = 0; n < B; ++n)
    if (labels[n] < 0 || labels[n] >= E)
      throw InputError("softmax_cross_entropy: label " + std::to_string(labels[n]) +
                       " outside [0," + std::to_string(E) + ")");
  auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * E);
  double loss = 0;
  const T* pl = logits.value().data();
  for (int n = 0; n < B; ++n) {
    const T* row = pl + static_cast<long long>(n) * E;
    T mx = row[0];
    for (int j = 1; j < E; ++j) mx = std::max(mx, row[j]);
    double z = 0;
    for (int j = 0; j < E; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    double logz = std::log(z) + static_cast<double>(mx);
    for (int j = 0; j < E; ++j)
      (*probs)[static_cast<size_t>(n) * E + j] =
          static_cast<T>(std::exp(static_cast<double>(row[j]) - logz));
    loss += logz - static_cast<double>(row[labels[n]]);
  }
  loss /= static_cast<double>(B);
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  return make_op<T>(Tensor<T>::scalar(static_cast<T>(loss)), {logits},
                    [B, E, probs, labels_copy](Node<T>& nd) {
                      if (!nd.parents[0]->requires_grad) return;
                      T g = nd.grad[0] / static_cast<T>(B);
                      T* pg = nd.parents[0]->ensure_grad().data();
                      for (int n = 0; n < B; ++n) {
                        for (int j = 0; j < E; ++j) {
                          T p = (*probs)[static_cast<size_t>(n) * E + j];
                          T t = (j == (*labels_copy)[static_cast<size_t>(n)]) ? T(1) : T(0);
                          pg[static_cast<long long>(n) * E + j] += g * (p - t);
                        }
                      }
                    });
}

/// Mean binary cross-entropy against a constant target, on raw logits.
/// Numerically stable: max(x,0) - x*t + log(1 + exp(-|x|)).
template <typename T>
Var<T> bce_with_logits_mean(const Var<T>& logits, T target) {
  const T* px = logits.value().data();
  long long n = logits.numel();
  double loss = 0;
  for (long long i = 0; i < n; ++i) {
    double x = static_cast<double>(px[i]);
    loss += std::max(x, 0.0) - x * static_cast<double>(target) + std::log1p(std::exp(-std::abs(x)));
  }
  loss /= static_cast<double>(n);
  return make_op<T>(Tensor<T>::scalar(static_cast<T>(loss)), {logits}, [target](Node<T>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    const T* px = nd.parents[0]->value.data();
    T* pg = nd.parents[0]->ensure_grad().data();
    long long n = nd.parents[0]->value.numel();
    T g = nd.grad[0] / static_cast<T>(n);
    for (long long i = 0; i < n; ++i) {
      T s = T(1) / (T(1) + std::exp(-px[i]));
      pg[i] += g * (s - target);
    }
  });
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  const T* p = t.data();
  for (long long i = 0; i < t.numel(); ++i)
    if (!std::isfinite(static_cast<double>(p[i]))) return false;
  return true;
}

}  // namespace fersnet
