// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>

#include "fersnet/data.hpp"
#include "fersnet/losses.hpp"

namespace fersnet {

/// Small convolutional identity embedder, trained on subject-identity
/// classification of the toy corpus and then frozen. embed() runs in eval
/// mode and exposes no trainable parameters to the loss graph.
class ToyIdentityEmbedder : public IdentityEmbedder<float> {
 public:
  ToyIdentityEmbedder(int in_channels, int image_size, int dim, std::uint64_t seed);

  Var<float> embed(const Var<float>& images) const override;
  int embedding_dim() const override { return dim_; }

  /// Trainable handles (training only; freeze() drops them from the graph).
  std::vector<Var<float>> trainable_params();
  Var<float> classify_logits(const Var<float>& images, Mode mode, int n_subjects);
  void attach_head(int n_subjects, std::uint64_t seed);
  void freeze();

 private:
  Var<float> features(const Var<float>& images, Mode mode) const;
  mutable ConvBlockParams<float> b1_, b2_;
  LinearParams<float> fc_;    // to embedding
  LinearParams<float> head_;  // embedding -> subject logits (training only)
  int dim_ = 0;
  bool frozen_ = false;
};

/// Trains the embedder on subject classification over the given corpus.
std::unique_ptr<ToyIdentityEmbedder> train_toy_identity_embedder(const LoadedDataset& data,
                                                                 int epochs, int dim,
                                                                 std::uint64_t seed);

/// Mean squared embedding distance between same-identity and cross-identity
/// pairs over a dataset (diagnostic for embedder quality).
struct EmbedderSeparation {
  double same_identity = 0.0;
  double cross_identity = 0.0;
};
EmbedderSeparation embedding_separation(const IdentityEmbedder<float>& emb,
                                        const LoadedDataset& data, int max_pairs,
                                        std::uint64_t seed);

}  // namespace fersnet
