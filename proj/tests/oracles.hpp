// Test-only reference implementations, kept independent of the library's
// im2col/GEMM path: plain nested loops, no Eigen.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "fersnet/tensor.hpp"

namespace oracle {

using fersnet::Shape;
using fersnet::Tensor;

/// Direct convolution, x [B,C,H,W] * w [K,C,kh,kw] + b.
template <typename T>
Tensor<T> conv2d_ref(const Tensor<T>& x, const Tensor<T>& w, const std::vector<T>& b, int stride,
                     int pad) {
  int B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  int K = w.size(0), kh = w.size(2), kw = w.size(3);
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor<T> y({B, K, Ho, Wo});
  for (int n = 0; n < B; ++n)
    for (int k = 0; k < K; ++k)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double acc = static_cast<double>(b[static_cast<size_t>(k)]);
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                int iy = oy * stride - pad + ky;
                int ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += static_cast<double>(x.at(n, c, iy, ix)) *
                       static_cast<double>(w.at(k, c, ky, kx));
              }
          y.at(n, k, oy, ox) = static_cast<T>(acc);
        }
  return y;
}

/// Transposed convolution by scatter-accumulate, w [C,K,s,s], stride == kernel.
template <typename T>
Tensor<T> conv_transpose2d_ref(const Tensor<T>& x, const Tensor<T>& w, const std::vector<T>& b,
                               int s) {
  int B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  int K = w.size(1);
  Tensor<T> y({B, K, H * s, W * s});
  for (int n = 0; n < B; ++n)
    for (int k = 0; k < K; ++k)
      for (long long i = 0; i < static_cast<long long>(H) * s * W * s; ++i)
        y.data()[((static_cast<long long>(n) * K + k) * H * s * W * s) + i] =
            b[static_cast<size_t>(k)];
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
          for (int k = 0; k < K; ++k)
            for (int dy = 0; dy < s; ++dy)
              for (int dx = 0; dx < s; ++dx)
                y.at(n, k, i * s + dy, j * s + dx) += x.at(n, c, i, j) * w.at(c, k, dy, dx);
  return y;
}

/// Naive matrix multiply for the linear layer: y = x * w^T + b.
template <typename T>
Tensor<T> linear_ref(const Tensor<T>& x, const Tensor<T>& w, const std::vector<T>& b) {
  int B = x.size(0), D = x.size(1), Dp = w.size(0);
  Tensor<T> y({B, Dp});
  for (int n = 0; n < B; ++n)
    for (int j = 0; j < Dp; ++j) {
      double acc = static_cast<double>(b[static_cast<size_t>(j)]);
      for (int d = 0; d < D; ++d)
        acc += static_cast<double>(x[static_cast<long long>(n) * D + d]) *
               static_cast<double>(w[static_cast<long long>(j) * D + d]);
      y[static_cast<long long>(n) * Dp + j] = static_cast<T>(acc);
    }
  return y;
}

template <typename T>
Tensor<T> max_pool2d_ref(const Tensor<T>& x) {
  int B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  Tensor<T> y({B, C, H / 2, W / 2});
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H / 2; ++i)
        for (int j = 0; j < W / 2; ++j)
          y.at(n, c, i, j) = std::max(std::max(x.at(n, c, 2 * i, 2 * j), x.at(n, c, 2 * i, 2 * j + 1)),
                                      std::max(x.at(n, c, 2 * i + 1, 2 * j), x.at(n, c, 2 * i + 1, 2 * j + 1)));
  return y;
}

template <typename T>
double mse_ref(const Tensor<T>& a, const Tensor<T>& b) {
  double acc = 0;
  for (long long i = 0; i < a.numel(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (long long i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <typename T>
void fill_random(Tensor<T>& t, fersnet::RngStream& rng, double lo = -1.0, double hi = 1.0) {
  for (long long i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
}

}  // namespace oracle
