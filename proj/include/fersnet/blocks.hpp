// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <vector>

#include "fersnet/ops.hpp"
#include "fersnet/rng.hpp"

namespace fersnet {

template <typename T>
struct NamedVar {
  std::string name;
  Var<T> var;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

namespace init {

/// Kaiming-uniform with fan-in scaling (ReLU gain).
template <typename T>
void kaiming_uniform(Tensor<T>& w, long long fan_in, RngStream& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (long long i = 0; i < w.numel(); ++i)
    w[i] = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
void small_uniform(Tensor<T>& w, double bound, RngStream& rng) {
  for (long long i = 0; i < w.numel(); ++i)
    w[i] = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace init

template <typename T>
struct Conv2dParams {
  Var<T> w, b;
  int in_ch = 0, out_ch = 0, k = 3, stride = 1, pad = 1;

  void init(int in_channels, int out_channels, int kernel, int stride_, int pad_,
            RngStream& rng) {
    in_ch = in_channels;
    out_ch = out_channels;
    k = kernel;
    stride = stride_;
    pad = pad_;
    Tensor<T> wt({out_ch, in_ch, k, k});
    init::kaiming_uniform(wt, static_cast<long long>(in_ch) * k * k, rng);
    w = Var<T>::param(std::move(wt));
    b = Var<T>::param(Tensor<T>({out_ch}));
  }

  Var<T> forward(const Var<T>& x) const { return conv2d(x, w, b, stride, pad); }

  void collect(const std::string& prefix, std::vector<NamedVar<T>>& out) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

template <typename T>
struct ConvTranspose2dParams {
  Var<T> w, b;
  int in_ch = 0, out_ch = 0, k = 2;

  void init(int in_channels, int out_channels, int kernel, RngStream& rng) {
    in_ch = in_channels;
    out_ch = out_channels;
    k = kernel;
    Tensor<T> wt({in_ch, out_ch, k, k});
    init::kaiming_uniform(wt, static_cast<long long>(in_ch) * k * k, rng);
    w = Var<T>::param(std::move(wt));
    b = Var<T>::param(Tensor<T>({out_ch}));
  }

  Var<T> forward(const Var<T>& x) const { return conv_transpose2d(x, w, b, k); }

  void collect(const std::string& prefix, std::vector<NamedVar<T>>& out) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

template <typename T>
struct LinearParams {
  Var<T> w, b;
  int in_dim = 0, out_dim = 0;

  void init(int in, int out, RngStream& rng) {
    in_dim = in;
    out_dim = out;
    Tensor<T> wt({out, in});
    init::kaiming_uniform(wt, in, rng);
    w = Var<T>::param(std::move(wt));
    b = Var<T>::param(Tensor<T>({out}));
  }

  Var<T> forward(const Var<T>& x) const { return linear(x, w, b); }

  void collect(const std::string& prefix, std::vector<NamedVar<T>>& out) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

template <typename T>
struct BatchNorm2dParams {
  Var<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  int ch = 0;
  T momentum = T(0.1);
  T eps = T(1e-5);
  bool freeze_running = false;  // used by deterministic gradient checks

  void init(int channels) {
    ch = channels;
    gamma = Var<T>::param(Tensor<T>::full({ch}, T(1)));
    beta = Var<T>::param(Tensor<T>({ch}));
    running_mean = Tensor<T>({ch});
    running_var = Tensor<T>::full({ch}, T(1));
  }

  Var<T> forward(const Var<T>& x, Mode mode) {
    return batch_norm2d(x, gamma, beta, &running_mean, &running_var, mode, momentum, eps,
                        freeze_running);
  }

  void collect(const std::string& prefix, std::vector<NamedVar<T>>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out) {
    out.push_back({prefix + ".running_mean", &running_mean});
    out.push_back({prefix + ".running_var", &running_var});
  }
};

/// conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> ReLU -> maxpool2x2. Halves the
/// spatial extent.
template <typename T>
struct ConvBlockParams {
  Conv2dParams<T> c1, c2;
  BatchNorm2dParams<T> n1, n2;

  void init(int in_ch, int out_ch, RngStream& rng) {
    c1.init(in_ch, out_ch, 3, 1, 1, rng);
    n1.init(out_ch);
    c2.init(out_ch, out_ch, 3, 1, 1, rng);
    n2.init(out_ch);
  }

  void collect(const std::string& p, std::vector<NamedVar<T>>& out) const {
    c1.collect(p + ".c1", out);
    n1.collect(p + ".n1", out);
    c2.collect(p + ".c2", out);
    n2.collect(p + ".n2", out);
  }
  void collect_buffers(const std::string& p, std::vector<NamedBuffer<T>>& out) {
    n1.collect_buffers(p + ".n1", out);
    n2.collect_buffers(p + ".n2", out);
  }
};

template <typename T>
Var<T> conv_block_forward(const Var<T>& x, ConvBlockParams<T>& p, Mode mode) {
  const auto& s = x.shape();
  if (s.size() != 4) throw InputError("conv_block_forward: expected [B,C,H,W]");
  if (s[2] < 2 || s[3] < 2 || s[2] % 2 != 0 || s[3] % 2 != 0)
    throw InputError("conv_block_forward: spatial extents must be even and >= 2, got " +
                     shape_str(s));
  auto h = relu(p.n1.forward(p.c1.forward(x), mode));
  h = relu(p.n2.forward(p.c2.forward(h), mode));
  return max_pool2d(h);
}

/// conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> ReLU -> deconv2x2(stride 2).
/// Doubles the spatial extent; the transposed conv fills the resampling slot.
template <typename T>
struct DeconvBlockParams {
  Conv2dParams<T> c1, c2;
  BatchNorm2dParams<T> n1, n2;
  ConvTranspose2dParams<T> up;

  void init(int in_ch, int out_ch, RngStream& rng) {
    c1.init(in_ch, out_ch, 3, 1, 1, rng);
    n1.init(out_ch);
    c2.init(out_ch, out_ch, 3, 1, 1, rng);
    n2.init(out_ch);
    up.init(out_ch, out_ch, 2, rng);
  }

  void collect(const std::string& p, std::vector<NamedVar<T>>& out) const {
    c1.collect(p + ".c1", out);
    n1.collect(p + ".n1", out);
    c2.collect(p + ".c2", out);
    n2.collect(p + ".n2", out);
    up.collect(p + ".up", out);
  }
  void collect_buffers(const std::string& p, std::vector<NamedBuffer<T>>& out) {
    n1.collect_buffers(p + ".n1", out);
    n2.collect_buffers(p + ".n2", out);
  }
};

template <typename T>
Var<T> deconv_block_forward(const Var<T>& x, DeconvBlockParams<T>& p, Mode mode) {
  if (x.value().rank() != 4) throw InputError("deconv_block_forward: expected [B,C,H,W]");
  auto h = relu(p.n1.forward(p.c1.forward(x), mode));
  h = relu(p.n2.forward(p.c2.forward(h), mode));
  return p.up.forward(h);
}

/// x [B,D] -> x W^T + b; the spec's affine map.
template <typename T>
Var<T> linear_forward(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  return linear(x, weight, bias);
}

}  // namespace fersnet
