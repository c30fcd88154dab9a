// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <limits>
#include <string>
#include <vector>

#include "fersnet/blocks.hpp"

namespace fersnet {

/// Trainable kernels of one gating unit. All convolutions are 1x1, stride 1,
/// padding 0. leak (W_r) and mem (W_z) consume the channel concatenation
/// [F_x, F_y]; cross (W) reads the gated other-task features, own (U) reads
/// the unit's own task features.
template <typename T>
struct ConvFluParams {
  Conv2dParams<T> leak;   // 2C -> C
  Conv2dParams<T> mem;    // 2C -> C
  Conv2dParams<T> cross;  // C -> C
  Conv2dParams<T> own;    // C -> C

  /// Gate kernels start near zero (gates open at 0.5, neutral mixing);
  /// the candidate path gets the usual Kaiming init.
  void init(int channels, RngStream& rng) {
    leak.init(2 * channels, channels, 1, 1, 0, rng);
    init::small_uniform(leak.w.value(), 1e-2, rng);
    mem.init(2 * channels, channels, 1, 1, 0, rng);
    init::small_uniform(mem.w.value(), 1e-2, rng);
    cross.init(channels, channels, 1, 1, 0, rng);
    own.init(channels, channels, 1, 1, 0, rng);
  }

  void collect(const std::string& p, std::vector<NamedVar<T>>& out) const {
    leak.collect(p + ".leak", out);
    mem.collect(p + ".mem", out);
    cross.collect(p + ".cross", out);
    own.collect(p + ".own", out);
  }
};

/// Per-call gate activations of one unit.
template <typename T>
struct GateOutputs {
  Var<T> r;          // leaky gate, in (0,1)
  Var<T> z;          // memory gate, in (0,1)
  Var<T> candidate;  // tanh candidate map, in (-1,1)
  Var<T> fused;      // (1-z) * F_x + z * candidate
};

namespace detail {
template <typename T>
void require_gate_operands(const Var<T>& fx, const Var<T>& fy, const char* what) {
  if (!fx.value().same_shape(fy.value()))
    throw InputError(std::string(what) + ": feature maps differ in shape, " +
                     shape_str(fx.shape()) + " vs " + shape_str(fy.shape()));
}
}  // namespace detail

/// r = sigmoid(W_r * [F_x, F_y]); controls leakage from task y into task x.
template <typename T>
Var<T> leaky_gate(const Var<T>& fx, const Var<T>& fy, const ConvFluParams<T>& p) {
  detail::require_gate_operands(fx, fy, "leaky_gate");
  return sigmoid(p.leak.forward(concat_channels(fx, fy)));
}

/// z = sigmoid(W_z * [F_x, F_y]); how much of the candidate replaces F_x.
template <typename T>
Var<T> memory_gate(const Var<T>& fx, const Var<T>& fy, const ConvFluParams<T>& p) {
  detail::require_gate_operands(fx, fy, "memory_gate");
  return sigmoid(p.mem.forward(concat_channels(fx, fy)));
}

/// F~ = tanh(W * (r . F_y) + U * F_x).
template <typename T>
Var<T> candidate_features(const Var<T>& fx, const Var<T>& fy, const Var<T>& r,
                          const ConvFluParams<T>& p) {
  detail::require_gate_operands(fx, fy, "candidate_features");
  detail::require_gate_operands(fx, r, "candidate_features");
  return tanh(add(p.cross.forward(mul(r, fy)), p.own.forward(fx)));
}

/// (1 - z) . F_x_prev + z . candidate. Every output element lies in the
/// closed interval spanned by the two inputs. Rejects z outside [0,1] to
/// guard against non-gate tensors.
template <typename T>
Var<T> fuse(const Var<T>& fx_prev, const Var<T>& candidate, const Var<T>& z) {
  detail::require_gate_operands(fx_prev, candidate, "fuse");
  detail::require_gate_operands(fx_prev, z, "fuse");
  const T* pz = z.value().data();
  for (long long i = 0; i < z.numel(); ++i)
    if (!(pz[i] >= T(0) && pz[i] <= T(1)))
      throw InputError("fuse: gate values must lie in [0,1]");
  return add(mul(affine(z, T(-1), T(1)), fx_prev), mul(z, candidate));
}

/// One directional unit: gates features flowing from task y into task x.
template <typename T>
GateOutputs<T> convflu_forward(const Var<T>& fx, const Var<T>& fy, const ConvFluParams<T>& p) {
  GateOutputs<T> g;
  g.r = leaky_gate(fx, fy, p);
  g.z = memory_gate(fx, fy, p);
  g.candidate = candidate_features(fx, fy, g.r, p);
  g.fused = fuse(fx, g.candidate, g.z);
  return g;
}

/// Two independent units exchanging features in both directions at one
/// network depth. Both directions read the original inputs; there is no
/// sequential dependency between them.
template <typename T>
struct TransferenceBlock {
  ConvFluParams<T> x_from_y;  // task x receives from task y
  ConvFluParams<T> y_from_x;

  void init(int channels, RngStream& rng) {
    x_from_y.init(channels, rng);
    y_from_x.init(channels, rng);
  }

  void collect(const std::string& p, std::vector<NamedVar<T>>& out) const {
    x_from_y.collect(p + ".x_from_y", out);
    y_from_x.collect(p + ".y_from_x", out);
  }
};

template <typename T>
struct TransferenceOutputs {
  Var<T> fx, fy;
  GateOutputs<T> gate_x;  // x <- y direction
  GateOutputs<T> gate_y;  // y <- x direction
};

template <typename T>
TransferenceOutputs<T> transference_block(const Var<T>& fx, const Var<T>& fy,
                                          const TransferenceBlock<T>& blk) {
  detail::require_gate_operands(fx, fy, "transference_block");
  TransferenceOutputs<T> out;
  out.gate_x = convflu_forward(fx, fy, blk.x_from_y);
  out.gate_y = convflu_forward(fy, fx, blk.y_from_x);
  out.fx = out.gate_x.fused;
  out.fy = out.gate_y.fused;
  return out;
}

/// Channel-mean heat maps of one sample's gates, min-max normalized to [0,1]
/// for rendering. Raw extrema are kept for the sidecar export. A constant
/// map normalizes to 0.5.
struct GateHeatMap {
  int height = 0, width = 0;
  std::vector<float> raw;         // [H*W] channel means
  std::vector<float> normalized;  // [H*W] in [0,1]
  float raw_min = 0.f, raw_max = 0.f;
};

template <typename T>
GateHeatMap channel_mean_heat(const Tensor<T>& gate, int sample) {
  const auto& s = gate.shape();
  if (s.size() != 4) throw InputError("channel_mean_heat: expected [B,C,H,W]");
  int C = s[1], H = s[2], W = s[3];
  GateHeatMap m;
  m.height = H;
  m.width = W;
  m.normalized.assign(static_cast<size_t>(H) * W, 0.f);
  std::vector<double> raw(static_cast<size_t>(H) * W, 0.0);
  for (int c = 0; c < C; ++c) {
    const T* plane = gate.data() + (static_cast<long long>(sample) * C + c) *
                                       static_cast<long long>(H) * W;
    for (long long i = 0; i < static_cast<long long>(H) * W; ++i)
      raw[static_cast<size_t>(i)] += static_cast<double>(plane[i]);
  }
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double& v : raw) {
    v /= C;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  m.raw_min = static_cast<float>(lo);
  m.raw_max = static_cast<float>(hi);
  m.raw.resize(raw.size());
  double range = hi - lo;
  for (size_t i = 0; i < raw.size(); ++i) {
    m.raw[i] = static_cast<float>(raw[i]);
    m.normalized[i] = range > 1e-12 ? static_cast<float>((raw[i] - lo) / range) : 0.5f;
  }
  return m;
}

template <typename T>
struct GateMaps {
  GateHeatMap r, z;
};

/// Heat maps of both gates of one unit's forward call (sample 0).
template <typename T>
GateMaps<T> gate_maps(const GateOutputs<T>& g, int sample = 0) {
  GateMaps<T> m;
  m.r = channel_mean_heat(g.r.value(), sample);
  m.z = channel_mean_heat(g.z.value(), sample);
  return m;
}

}  // namespace fersnet
