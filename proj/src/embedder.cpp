// SPDX-License-Identifier: Apache-2.0
#include "fersnet/embedder.hpp"

#include <algorithm>
#include <map>

namespace fersnet {

namespace {

void freeze_conv(Conv2dParams<float>& c) {
  c.w = Var<float>::constant(c.w.value());
  c.b = Var<float>::constant(c.b.value());
}
void freeze_bn(BatchNorm2dParams<float>& n) {
  n.gamma = Var<float>::constant(n.gamma.value());
  n.beta = Var<float>::constant(n.beta.value());
}

}  // namespace

ToyIdentityEmbedder::ToyIdentityEmbedder(int in_channels, int image_size, int dim,
                                         std::uint64_t seed)
    : dim_(dim) {
  RngStream rng = RngStream::derive(seed, "toy-embedder");
  b1_.init(in_channels, 8, rng);
  b2_.init(8, 16, rng);
  int s = image_size / 4;
  fc_.init(16 * s * s, dim, rng);
}

Var<float> ToyIdentityEmbedder::features(const Var<float>& images, Mode mode) const {
  auto h = conv_block_forward(images, b1_, mode);
  h = conv_block_forward(h, b2_, mode);
  return flatten(h);
}

Var<float> ToyIdentityEmbedder::embed(const Var<float>& images) const {
  return fc_.forward(features(images, Mode::kEval));
}

void ToyIdentityEmbedder::attach_head(int n_subjects, std::uint64_t seed) {
  RngStream rng = RngStream::derive(seed, "toy-embedder-head");
  head_.init(dim_, n_subjects, rng);
}

Var<float> ToyIdentityEmbedder::classify_logits(const Var<float>& images, Mode mode,
                                                int n_subjects) {
  if (head_.out_dim != n_subjects) throw ConfigError("embedder head not attached");
  return head_.forward(relu(fc_.forward(features(images, mode))));
}

std::vector<Var<float>> ToyIdentityEmbedder::trainable_params() {
  if (frozen_) throw ConfigError("embedder is frozen");
  std::vector<NamedVar<float>> named;
  b1_.collect("b1", named);
  b2_.collect("b2", named);
  fc_.collect("fc", named);
  if (head_.out_dim > 0) head_.collect("head", named);
  std::vector<Var<float>> out;
  for (auto& nv : named) out.push_back(nv.var);
  return out;
}

void ToyIdentityEmbedder::freeze() {
  freeze_conv(b1_.c1);
  freeze_conv(b1_.c2);
  freeze_bn(b1_.n1);
  freeze_bn(b1_.n2);
  freeze_conv(b2_.c1);
  freeze_conv(b2_.c2);
  freeze_bn(b2_.n1);
  freeze_bn(b2_.n2);
  fc_.w = Var<float>::constant(fc_.w.value());
  fc_.b = Var<float>::constant(fc_.b.value());
  frozen_ = true;
}

std::unique_ptr<ToyIdentityEmbedder> train_toy_identity_embedder(const LoadedDataset& data,
                                                                 int epochs, int dim,
                                                                 std::uint64_t seed) {
  auto subjects = data.manifest.distinct_subjects();
  std::map<int, int> subject_index;
  for (size_t i = 0; i < subjects.size(); ++i) subject_index[subjects[i]] = static_cast<int>(i);
  int n_subjects = static_cast<int>(subjects.size());
  if (n_subjects < 2) throw InputError("identity embedder needs at least 2 subjects");

  auto emb = std::make_unique<ToyIdentityEmbedder>(1, kTrainCrop, dim, seed);
  emb->attach_head(n_subjects, seed);
  auto params = emb->trainable_params();

  // plain Adam over the embedder parameters
  std::vector<Tensor<float>> m, v;
  for (auto& p : params) {
    m.emplace_back(p.shape());
    v.emplace_back(p.shape());
  }
  long long t = 0;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 1e-3;
  const int batch = 16;

  int n = static_cast<int>(data.images.size());
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    RngStream srng = RngStream::derive(seed, "emb-shuffle", static_cast<std::uint64_t>(epoch));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(srng.uniform_int(i + 1))]);
    for (int start = 0; start + 2 <= n; start += batch) {
      int bs = std::min(batch, n - start);
      if (bs < 2) break;
      Tensor<float> x({bs, 1, kTrainCrop, kTrainCrop});
      std::vector<int> labels(static_cast<size_t>(bs));
      for (int k = 0; k < bs; ++k) {
        int idx = order[static_cast<size_t>(start + k)];
        RngStream arng = RngStream::derive(seed, "emb-aug", static_cast<std::uint64_t>(epoch),
                                           static_cast<std::uint64_t>(start + k));
        Tensor<float> img = data.images[static_cast<size_t>(idx)];
        Tensor<float> prepared = img.size(1) == kTrainCrop ? img : augment_train(img, arng);
        std::copy(prepared.data(), prepared.data() + prepared.numel(),
                  x.data() + static_cast<long long>(k) * prepared.numel());
        labels[static_cast<size_t>(k)] =
            subject_index.at(data.manifest.records[static_cast<size_t>(idx)].subject_id);
      }
      auto loss = softmax_cross_entropy(
          emb->classify_logits(Var<float>::constant(x), Mode::kTrain, n_subjects), labels);
      for (auto& p : params) p.zero_grad();
      loss.backward();
      ++t;
      double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
      double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
      for (size_t pi = 0; pi < params.size(); ++pi) {
        if (!params[pi].grad().defined()) continue;
        const Tensor<float>& g = params[pi].grad();
        Tensor<float>& val = params[pi].value();
        for (long long i = 0; i < g.numel(); ++i) {
          double gi = g[i];
          m[pi][i] = static_cast<float>(b1 * m[pi][i] + (1 - b1) * gi);
          v[pi][i] = static_cast<float>(b2 * v[pi][i] + (1 - b2) * gi * gi);
          val[i] -= static_cast<float>(lr * (m[pi][i] / c1) /
                                       (std::sqrt(v[pi][i] / c2) + eps));
        }
      }
    }
  }
  emb->freeze();
  return emb;
}

EmbedderSeparation embedding_separation(const IdentityEmbedder<float>& emb,
                                        const LoadedDataset& data, int max_pairs,
                                        std::uint64_t seed) {
  int n = static_cast<int>(data.images.size());
  if (n < 2) throw InputError("embedding_separation: need at least 2 samples");
  std::vector<Tensor<float>> embs;
  embs.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Tensor<float> img = data.images[static_cast<size_t>(i)];
    Tensor<float> prepared = img.size(1) == kTrainCrop ? img : preprocess_eval(img);
    Tensor<float> x({1, 1, kTrainCrop, kTrainCrop}, prepared.vec());
    embs.push_back(emb.embed(Var<float>::constant(x)).value());
  }
  auto dist2 = [&](int a, int b) {
    double d = 0;
    for (long long i = 0; i < embs[static_cast<size_t>(a)].numel(); ++i) {
      double x = embs[static_cast<size_t>(a)][i] - embs[static_cast<size_t>(b)][i];
      d += x * x;
    }
    return d;
  };
  RngStream rng = RngStream::derive(seed, "emb-sep");
  double same = 0, cross = 0;
  long long n_same = 0, n_cross = 0;
  for (int k = 0; k < max_pairs; ++k) {
    int a = rng.uniform_int(n), b = rng.uniform_int(n);
    if (a == b) continue;
    bool same_id = data.manifest.records[static_cast<size_t>(a)].subject_id ==
                   data.manifest.records[static_cast<size_t>(b)].subject_id;
    if (same_id) {
      same += dist2(a, b);
      ++n_same;
    } else {
      cross += dist2(a, b);
      ++n_cross;
    }
  }
  EmbedderSeparation s;
  if (n_same > 0) s.same_identity = same / static_cast<double>(n_same);
  if (n_cross > 0) s.cross_identity = cross / static_cast<double>(n_cross);
  return s;
}

}  // namespace fersnet
