// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "fersnet/ops.hpp"

namespace fersnet {

/// Trade-off weights of the combined objective. lambda4 ramps linearly from
/// start to end over the run.
struct LossWeights {
  double lambda1 = 0.3;  // adversarial
  double lambda2 = 1.0;  // reconstruction
  double lambda3 = 0.5;  // cycle consistency
  double lambda4_start = 0.1;  // identity preservation, ramp start
  double lambda4_end = 0.5;

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || lambda4_start < 0 || lambda4_end < 0)
      throw ConfigError("loss weights must be non-negative");
    if (lambda4_start > lambda4_end)
      throw ConfigError("lambda4 ramp must be non-decreasing (start <= end)");
  }
};

/// Per-step breakdown of every objective term. The discriminator trains on
/// gan_d; everything else belongs to the generator-side total:
///   total = cls + l1*gan_g + l2*rec + l3*cyc + l4(epoch)*idt.
struct LossReport {
  double cls = 0, gan_g = 0, gan_d = 0, rec = 0, cyc = 0, idt = 0, total = 0;
  double lambda4_effective = 0;
};

inline double lambda4_schedule(int epoch, int total_epochs, const LossWeights& w) {
  if (total_epochs < 1) throw InputError("lambda4_schedule: total_epochs must be >= 1");
  if (epoch < 0 || epoch >= total_epochs)
    throw InputError("lambda4_schedule: epoch " + std::to_string(epoch) + " outside [0," +
                     std::to_string(total_epochs) + ")");
  if (total_epochs == 1) return w.lambda4_start;
  double t = static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
  return w.lambda4_start + (w.lambda4_end - w.lambda4_start) * t;
}

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Var<T> classification_loss(const Var<T>& logits, const std::vector<int>& labels) {
  return softmax_cross_entropy(logits, labels);
}

/// Binary cross-entropy form of the adversarial objective, averaged over
/// patches and batch, negated so the discriminator minimizes it. Fake images
/// are detached here; the generator never receives gradients from this loss.
template <typename T, typename D>
Var<T> gan_loss_discriminator(D&& discriminate, const Var<T>& real_image,
                              const Tensor<T>& real_label, const Var<T>& fake_image,
                              const Tensor<T>& fake_label) {
  auto real = discriminate(real_image, real_label);
  auto fake = discriminate(fake_image.detach(), fake_label);
  auto loss = add(bce_with_logits_mean(real, T(1)), bce_with_logits_mean(fake, T(0)));
  if (!all_finite(loss.value())) throw NumericError("discriminator loss is non-finite");
  return loss;
}

/// Non-saturating generator objective: -mean log D(fake). Gradients flow
/// through the generator.
template <typename T, typename D>
Var<T> gan_loss_generator(D&& discriminate, const Var<T>& fake_image,
                          const Tensor<T>& fake_label) {
  auto fake = discriminate(fake_image, fake_label);
  auto loss = bce_with_logits_mean(fake, T(1));
  if (!all_finite(loss.value())) throw NumericError("generator adversarial loss is non-finite");
  return loss;
}

/// Mean over batch and elements of the squared difference.
template <typename T>
Var<T> reconstruction_loss(const Var<T>& synth, const Var<T>& target) {
  return mse(synth, target);
}

/// || G(z_src, G(z_tgt, I)) - I ||, per-element mean, gradients through both
/// generator passes.
template <typename T, typename G>
Var<T> cycle_loss(G&& generate, const Var<T>& image, const Tensor<T>& source_onehot,
                  const Tensor<T>& target_onehot) {
  auto mid = generate(target_onehot, image);
  auto back = generate(source_onehot, mid);
  return mse(back, image);
}

/// Fast path reusing an already-built first generator pass.
template <typename T, typename G>
Var<T> cycle_loss_from(G&& generate, const Var<T>& image, const Var<T>& synth,
                       const Tensor<T>& source_onehot) {
  auto back = generate(source_onehot, synth);
  return mse(back, image);
}

/// Frozen feature extractor mapping an image batch to fixed-length
/// embeddings. Implementations must be deterministic in eval mode and must
/// not expose trainable parameters to the loss graph.
template <typename T>
class IdentityEmbedder {
 public:
  virtual ~IdentityEmbedder() = default;
  virtual Var<T> embed(const Var<T>& images) const = 0;
  virtual int embedding_dim() const = 0;
};

/// Mean over the batch of the squared L2 distance between embeddings.
/// Gradients flow into `synth` only (the embedder is frozen and the target
/// side carries no gradient path).
template <typename T>
Var<T> identity_loss(const IdentityEmbedder<T>& embedder, const Var<T>& synth,
                     const Var<T>& target_image) {
  auto es = embedder.embed(synth);
  auto et = embedder.embed(target_image.detach());
  if (es.shape() != et.shape())
    throw ConfigError("identity_loss: embedding shapes differ, " + shape_str(es.shape()) +
                      " vs " + shape_str(et.shape()));
  if (es.value().rank() != 2 || es.shape()[1] != embedder.embedding_dim())
    throw ConfigError("identity_loss: embedder output does not match its declared dimension");
  int B = es.shape()[0];
  return scale(sum_all(square(sub(es, et))), static_cast<T>(1.0 / B));
}

/// Raw random projection of pixels: the fast frozen embedder baseline.
template <typename T>
class RandomProjectionEmbedder : public IdentityEmbedder<T> {
 public:
  RandomProjectionEmbedder(long long input_numel, int dim, std::uint64_t seed) : dim_(dim) {
    Tensor<T> w({dim, static_cast<int>(input_numel)});
    RngStream rng = RngStream::derive(seed, "rand-proj-embedder");
    double s = 1.0 / std::sqrt(static_cast<double>(input_numel));
    for (long long i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(rng.normal() * s);
    weight_ = Var<T>::constant(std::move(w));
    bias_ = Var<T>::constant(Tensor<T>({dim}));
  }

  Var<T> embed(const Var<T>& images) const override {
    return linear(flatten(images), weight_, bias_);
  }
  int embedding_dim() const override { return dim_; }

 private:
  Var<T> weight_, bias_;
  int dim_;
};

/// The generator-side scalar terms, pre-weighting.
template <typename T>
struct GeneratorLossTerms {
  Var<T> cls, gan_g, rec, cyc, idt;
};

template <typename T>
struct TotalLoss {
  Var<T> value;
  LossReport report;
};

/// Weighted combination of the five generator-side terms at the given epoch.
template <typename T>
TotalLoss<T> total_generator_loss(const GeneratorLossTerms<T>& terms, const LossWeights& w,
                                  int epoch, int total_epochs) {
  double l4 = lambda4_schedule(epoch, total_epochs, w);
  auto check = [](const Var<T>& v, const char* name) {
    if (!std::isfinite(static_cast<double>(v.item())))
      throw NumericError(std::string("total_generator_loss: term '") + name + "' is non-finite");
  };
  check(terms.cls, "cls");
  check(terms.gan_g, "gan_g");
  check(terms.rec, "rec");
  check(terms.cyc, "cyc");
  check(terms.idt, "idt");
  TotalLoss<T> out;
  out.value = add(add(add(add(terms.cls, scale(terms.gan_g, static_cast<T>(w.lambda1))),
                          scale(terms.rec, static_cast<T>(w.lambda2))),
                      scale(terms.cyc, static_cast<T>(w.lambda3))),
                  scale(terms.idt, static_cast<T>(l4)));
  out.report.cls = terms.cls.item();
  out.report.gan_g = terms.gan_g.item();
  out.report.rec = terms.rec.item();
  out.report.cyc = terms.cyc.item();
  out.report.idt = terms.idt.item();
  out.report.lambda4_effective = l4;
  out.report.total = out.value.item();
  return out;
}

inline void write_loss_csv_header(std::ostream& os) {
  os << "step,epoch,lr,lambda4,cls,gan_g,gan_d,rec,cyc,idt,total\n";
}

inline void write_loss_csv_row(std::ostream& os, long long step, int epoch, double lr,
                               const LossReport& r) {
  os << step << ',' << epoch << ',' << lr << ',' << r.lambda4_effective << ',' << r.cls << ','
     << r.gan_g << ',' << r.gan_d << ',' << r.rec << ',' << r.cyc << ',' << r.idt << ','
     << r.total << '\n';
}

}  // namespace fersnet
