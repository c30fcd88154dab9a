// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <vector>

#include "fersnet/convflu.hpp"

namespace fersnet {

/// How the two task branches exchange features after each encoder block.
enum class SharingMode {
  kGated,    // transference blocks (the full model)
  kHardSum,  // element-wise summation, no gating parameters
  kNone,     // single recognition branch, no synthesis task
};

inline std::string sharing_mode_name(SharingMode m) {
  switch (m) {
    case SharingMode::kGated: return "gated";
    case SharingMode::kHardSum: return "hardsum";
    case SharingMode::kNone: return "single";
  }
  return "?";
}

inline SharingMode sharing_mode_from(const std::string& s) {
  if (s == "gated") return SharingMode::kGated;
  if (s == "hardsum") return SharingMode::kHardSum;
  if (s == "single") return SharingMode::kNone;
  throw ConfigError("unknown sharing mode '" + s + "'");
}

struct ModelConfig {
  int num_classes = 6;  // E
  int in_channels = 1;
  int image_size = 96;
  std::vector<int> ladder{8, 16, 32, 64};       // encoder widths, 4 blocks
  int label_channels = 0;                        // C_t; 0 -> ladder.back()/4
  int cls_hidden = 128;
  std::vector<int> disc_ladder{16, 32, 64, 64};  // discriminator widths
  SharingMode sharing = SharingMode::kGated;

  int effective_label_channels() const {
    return label_channels > 0 ? label_channels : std::max(1, ladder.back() / 4);
  }
  /// Encoder output extent (image_size / 2^4).
  int code_extent() const { return image_size / 16; }

  void validate() const {
    std::string problems;
    auto bad = [&](const std::string& p) { problems += (problems.empty() ? "" : "; ") + p; };
    if (num_classes < 2) bad("num_classes must be >= 2");
    if (in_channels < 1) bad("in_channels must be >= 1");
    if (ladder.size() != 4) bad("ladder must list 4 widths");
    for (int w : ladder)
      if (w < 1) bad("ladder widths must be positive");
    if (disc_ladder.size() != 4) bad("disc_ladder must list 4 widths");
    if (image_size < 32 || image_size % 32 != 0)
      bad("image_size must be a positive multiple of 32 (encoder halves 4x, label transformer "
          "doubles once)");
    if (cls_hidden < 1) bad("cls_hidden must be >= 1");
    if (!problems.empty()) throw ConfigError("model config invalid: " + problems);
  }
};

/// Patch discriminator: the image is concatenated with E constant label
/// planes, then four stride-2 convolutions and a 3x3 head produce a spatial
/// grid of real/fake logits.
template <typename T>
struct Discriminator {
  std::array<Conv2dParams<T>, 4> convs;
  Conv2dParams<T> head;
  int num_classes = 0;

  void init(const ModelConfig& cfg, RngStream& rng) {
    num_classes = cfg.num_classes;
    int in_ch = cfg.in_channels + cfg.num_classes;
    for (int i = 0; i < 4; ++i) {
      convs[static_cast<size_t>(i)].init(in_ch, cfg.disc_ladder[static_cast<size_t>(i)], 3, 2, 1,
                                         rng);
      in_ch = cfg.disc_ladder[static_cast<size_t>(i)];
    }
    head.init(in_ch, 1, 3, 1, 1, rng);
  }

  Var<T> forward(const Var<T>& image, const Tensor<T>& onehot) const {
    const auto& s = image.shape();
    if (s.size() != 4) throw InputError("discriminate: expected [B,C,H,W] image");
    int B = s[0], H = s[2], W = s[3];
    if (onehot.shape() != Shape{B, num_classes})
      throw InputError("discriminate: label batch must be [B,E]");
    Tensor<T> planes({B, num_classes, H, W});
    for (int n = 0; n < B; ++n)
      for (int e = 0; e < num_classes; ++e) {
        T v = onehot[static_cast<long long>(n) * num_classes + e];
        T* dst = planes.data() + (static_cast<long long>(n) * num_classes + e) *
                                     static_cast<long long>(H) * W;
        for (long long i = 0; i < static_cast<long long>(H) * W; ++i) dst[i] = v;
      }
    auto h = concat_channels(image, Var<T>::constant(std::move(planes)));
    for (const auto& c : convs) h = leaky_relu(c.forward(h), T(0.2));
    return head.forward(h);
  }

  void collect(const std::string& p, std::vector<NamedVar<T>>& out) const {
    for (size_t i = 0; i < convs.size(); ++i)
      convs[i].collect(p + ".conv" + std::to_string(i + 1), out);
    head.collect(p + ".head", out);
  }
};

template <typename T>
struct JointOutputs {
  Var<T> logits;
  Var<T> synth;
  std::vector<GateOutputs<T>> gates;  // 8 entries: per block, x<-y then y<-x
};

namespace detail {
template <typename T>
void require_one_hot(const Tensor<T>& onehot, int batch, int classes, const char* what) {
  if (onehot.shape() != Shape{batch, classes})
    throw InputError(std::string(what) + ": label batch must be [B,E], got " +
                     shape_str(onehot.shape()));
  for (int n = 0; n < batch; ++n) {
    T sum(0);
    for (int e = 0; e < classes; ++e) {
      T v = onehot[static_cast<long long>(n) * classes + e];
      if (v != T(0) && v != T(1))
        throw InputError(std::string(what) + ": label entries must be 0 or 1");
      sum += v;
    }
    if (sum != T(1)) throw InputError(std::string(what) + ": each label row must be one-hot");
  }
}
}  // namespace detail

/// The assembled two-branch network: recognition encoder + classifier,
/// synthesis encoder + label transformer + decoder, four transference
/// blocks, and the conditional patch discriminator.
template <typename T>
struct FersnetModel {
  ModelConfig cfg;
  std::array<ConvBlockParams<T>, 4> fer_enc;
  std::array<ConvBlockParams<T>, 4> fes_enc;   // absent in kNone
  std::array<TransferenceBlock<T>, 4> flu;     // present only in kGated
  LinearParams<T> cls_fc1, cls_fc2;
  LinearParams<T> tra_fc;                      // E -> C_t * (s/2)^2
  DeconvBlockParams<T> tra_up;                 // C_t -> C_t, doubles to s
  std::array<DeconvBlockParams<T>, 4> dec;
  Conv2dParams<T> synth_head;                  // 3x3 + tanh to image channels
  Discriminator<T> disc;

  void init(const ModelConfig& config, std::uint64_t seed) {
    cfg = config;
    cfg.validate();
    RngStream rng = RngStream::derive(seed, "model-init");
    int in_ch = cfg.in_channels;
    for (int i = 0; i < 4; ++i) {
      fer_enc[static_cast<size_t>(i)].init(in_ch, cfg.ladder[static_cast<size_t>(i)], rng);
      in_ch = cfg.ladder[static_cast<size_t>(i)];
    }
    int code = cfg.code_extent();
    int flat = cfg.ladder.back() * code * code;
    cls_fc1.init(flat, cfg.cls_hidden, rng);
    cls_fc2.init(cfg.cls_hidden, cfg.num_classes, rng);
    if (cfg.sharing == SharingMode::kNone) return;

    in_ch = cfg.in_channels;
    for (int i = 0; i < 4; ++i) {
      fes_enc[static_cast<size_t>(i)].init(in_ch, cfg.ladder[static_cast<size_t>(i)], rng);
      in_ch = cfg.ladder[static_cast<size_t>(i)];
    }
    if (cfg.sharing == SharingMode::kGated)
      for (int i = 0; i < 4; ++i)
        flu[static_cast<size_t>(i)].init(cfg.ladder[static_cast<size_t>(i)], rng);
    int ct = cfg.effective_label_channels();
    tra_fc.init(cfg.num_classes, ct * (code / 2) * (code / 2), rng);
    tra_up.init(ct, ct, rng);
    int dch = cfg.ladder.back() + ct;
    for (int i = 0; i < 4; ++i) {
      // decoder widths mirror the encoder ladder
      int out_ch = cfg.ladder[static_cast<size_t>(3 - i)];
      dec[static_cast<size_t>(i)].init(dch, out_ch, rng);
      dch = out_ch;
    }
    synth_head.init(dch, cfg.in_channels, 3, 1, 1, rng);
    disc.init(cfg, rng);
  }

  /// Label transformer: one-hot [B,E] -> feature map matching the encoder
  /// output extent.
  Var<T> transformer_forward(const Tensor<T>& onehot, Mode mode) {
    if (cfg.sharing == SharingMode::kNone)
      throw ConfigError("transformer_forward: single-branch model has no synthesis path");
    if (onehot.rank() != 2) throw InputError("transformer_forward: label batch must be [B,E]");
    int B = onehot.size(0);
    detail::require_one_hot(onehot, B, cfg.num_classes, "transformer_forward");
    int half = cfg.code_extent() / 2;
    int ct = cfg.effective_label_channels();
    auto h = tra_fc.forward(Var<T>::constant(onehot));
    h = reshape(h, {B, ct, half, half});
    return deconv_block_forward(h, tra_up, mode);
  }

  struct EncodeResult {
    Var<T> fer;                        // recognition features after block 4
    Var<T> fes;                        // synthesis features after block 4
    std::vector<GateOutputs<T>> gates;
  };

  /// Run both encoders interleaved with the configured sharing blocks.
  EncodeResult encode(const Var<T>& image, Mode mode, bool capture_gates) {
    const auto& s = image.shape();
    if (s.size() != 4) throw InputError("encode: expected [B,C,H,W] image");
    if (s[1] != cfg.in_channels)
      throw InputError("encode: expected " + std::to_string(cfg.in_channels) +
                       " image channels, got " + std::to_string(s[1]));
    if (s[2] % 16 != 0 || s[3] % 16 != 0)
      throw InputError("encode: spatial extent must be divisible by 16, got " + shape_str(s));
    if (s[2] != cfg.image_size || s[3] != cfg.image_size)
      throw InputError("encode: model is configured for " + std::to_string(cfg.image_size) +
                       "x" + std::to_string(cfg.image_size) + " inputs, got " + shape_str(s));
    EncodeResult r;
    if (cfg.sharing == SharingMode::kNone) {
      Var<T> fx = image;
      for (int i = 0; i < 4; ++i) fx = conv_block_forward(fx, fer_enc[static_cast<size_t>(i)], mode);
      r.fer = fx;
      return r;
    }
    Var<T> fx = image, fy = image;
    for (int i = 0; i < 4; ++i) {
      fx = conv_block_forward(fx, fer_enc[static_cast<size_t>(i)], mode);
      fy = conv_block_forward(fy, fes_enc[static_cast<size_t>(i)], mode);
      if (cfg.sharing == SharingMode::kGated) {
        auto t = transference_block(fx, fy, flu[static_cast<size_t>(i)]);
        fx = t.fx;
        fy = t.fy;
        if (capture_gates) {
          r.gates.push_back(t.gate_x);
          r.gates.push_back(t.gate_y);
        }
      } else {  // kHardSum: both branches continue from the summed features
        Var<T> sum = add(fx, fy);
        fx = sum;
        fy = sum;
      }
    }
    r.fer = fx;
    r.fes = fy;
    return r;
  }

  Var<T> classify(const Var<T>& fer_features) {
    return cls_fc2.forward(relu(cls_fc1.forward(flatten(fer_features))));
  }

  Var<T> decode(const Var<T>& fes_features, const Tensor<T>& onehot, Mode mode) {
    auto lab = transformer_forward(onehot, mode);
    auto h = concat_channels(fes_features, lab);
    for (int i = 0; i < 4; ++i) h = deconv_block_forward(h, dec[static_cast<size_t>(i)], mode);
    return tanh(synth_head.forward(h));
  }

  /// Full two-branch pass: logits, synthetic image, and all 8 gate outputs.
  JointOutputs<T> joint_forward(const Var<T>& image, const Tensor<T>& onehot, Mode mode,
                                bool capture_gates = true) {
    if (cfg.sharing == SharingMode::kNone)
      throw ConfigError("joint_forward: single-branch model has no synthesis path");
    detail::require_one_hot(onehot, image.shape()[0], cfg.num_classes, "joint_forward");
    auto enc = encode(image, mode, capture_gates);
    JointOutputs<T> out;
    out.logits = classify(enc.fer);
    out.synth = decode(enc.fes, onehot, mode);
    out.gates = std::move(enc.gates);
    return out;
  }

  /// Recognition-only pass. The synthesis encoder still runs (the gates
  /// consume both branches); the decoder is skipped.
  Var<T> fer_forward(const Var<T>& image, Mode mode,
                     std::vector<GateOutputs<T>>* gates_out = nullptr) {
    auto enc = encode(image, mode, gates_out != nullptr);
    if (gates_out) *gates_out = std::move(enc.gates);
    return classify(enc.fer);
  }

  /// Synthesis-only pass: G(z_t, I).
  Var<T> generate(const Var<T>& image, const Tensor<T>& onehot, Mode mode) {
    if (cfg.sharing == SharingMode::kNone)
      throw ConfigError("generate: single-branch model has no synthesis path");
    detail::require_one_hot(onehot, image.shape()[0], cfg.num_classes, "generate");
    auto enc = encode(image, mode, false);
    return decode(enc.fes, onehot, mode);
  }

  Var<T> discriminate(const Var<T>& image, const Tensor<T>& onehot) const {
    detail::require_one_hot(onehot, image.shape()[0], cfg.num_classes, "discriminate");
    return disc.forward(image, onehot);
  }

  /// Everything trained by the generator-side optimizer.
  std::vector<NamedVar<T>> generator_params() const {
    std::vector<NamedVar<T>> out;
    for (size_t i = 0; i < 4; ++i) fer_enc[i].collect("fer" + std::to_string(i + 1), out);
    cls_fc1.collect("cls.fc1", out);
    cls_fc2.collect("cls.fc2", out);
    if (cfg.sharing == SharingMode::kNone) return out;
    for (size_t i = 0; i < 4; ++i) fes_enc[i].collect("fes" + std::to_string(i + 1), out);
    if (cfg.sharing == SharingMode::kGated)
      for (size_t i = 0; i < 4; ++i) flu[i].collect("flu" + std::to_string(i + 1), out);
    tra_fc.collect("tra.fc", out);
    tra_up.collect("tra.up", out);
    for (size_t i = 0; i < 4; ++i) dec[i].collect("dec" + std::to_string(i + 1), out);
    synth_head.collect("head", out);
    return out;
  }

  std::vector<NamedVar<T>> discriminator_params() const {
    std::vector<NamedVar<T>> out;
    if (cfg.sharing != SharingMode::kNone) disc.collect("disc", out);
    return out;
  }

  std::vector<NamedVar<T>> named_params() const {
    auto out = generator_params();
    auto d = discriminator_params();
    out.insert(out.end(), d.begin(), d.end());
    return out;
  }

  std::vector<NamedBuffer<T>> named_buffers() {
    std::vector<NamedBuffer<T>> out;
    for (size_t i = 0; i < 4; ++i) fer_enc[i].collect_buffers("fer" + std::to_string(i + 1), out);
    if (cfg.sharing == SharingMode::kNone) return out;
    for (size_t i = 0; i < 4; ++i) fes_enc[i].collect_buffers("fes" + std::to_string(i + 1), out);
    tra_up.collect_buffers("tra.up", out);
    for (size_t i = 0; i < 4; ++i) dec[i].collect_buffers("dec" + std::to_string(i + 1), out);
    return out;
  }

  long long parameter_count() const {
    long long n = 0;
    for (const auto& p : named_params()) n += p.var.numel();
    return n;
  }

  /// Parameters the recognition logits depend on (encoders of both branches,
  /// gating units, classifier) -- the capacity baseline for ablations.
  long long fer_path_parameter_count() const {
    long long n = 0;
    for (const auto& p : named_params()) {
      if (p.name.rfind("fer", 0) == 0 || p.name.rfind("fes", 0) == 0 ||
          p.name.rfind("flu", 0) == 0 || p.name.rfind("cls", 0) == 0)
        n += p.var.numel();
    }
    return n;
  }

  /// Set batch-norm running-stat freezing everywhere (for gradient checks).
  void set_freeze_running_stats(bool freeze) {
    for (auto& b : fer_enc) { b.n1.freeze_running = freeze; b.n2.freeze_running = freeze; }
    if (cfg.sharing == SharingMode::kNone) return;
    for (auto& b : fes_enc) { b.n1.freeze_running = freeze; b.n2.freeze_running = freeze; }
    tra_up.n1.freeze_running = freeze;
    tra_up.n2.freeze_running = freeze;
    for (auto& b : dec) { b.n1.freeze_running = freeze; b.n2.freeze_running = freeze; }
  }
};

/// Plain single-branch recognition forward over a block stack + classifier.
/// This is the reference path the gated model collapses to when every memory
/// gate is saturated closed.
template <typename T>
Var<T> single_branch_logits(std::array<ConvBlockParams<T>, 4>& blocks, LinearParams<T>& fc1,
                            LinearParams<T>& fc2, const Var<T>& image, Mode mode) {
  Var<T> h = image;
  for (int i = 0; i < 4; ++i) h = conv_block_forward(h, blocks[static_cast<size_t>(i)], mode);
  return fc2.forward(relu(fc1.forward(flatten(h))));
}

}  // namespace fersnet
