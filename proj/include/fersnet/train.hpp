// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fersnet/data.hpp"
#include "fersnet/losses.hpp"
#include "fersnet/model.hpp"

namespace fersnet {

/// lr(step) = lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi step / total)).
double cosine_lr(long long step, long long total_steps, double lr_max, double lr_min);

struct TrainConfig {
  int batch_size = 64;
  int epochs = 60;  // desk scale; paper_scale() restores 500
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  LossWeights weights;
  std::uint64_t seed = 1;
  bool deterministic = true;  // fixed seeds end to end; kernels are sequential
  int threads = 1;            // recorded; this build executes kernels sequentially
  ModelConfig model;

  enum class Embedder { kRandomProjection, kToyConvNet };
  Embedder embedder = Embedder::kRandomProjection;
  int embedding_dim = 32;
  int embedder_epochs = 6;  // pre-training epochs for the toy conv embedder

  int eval_every = 1;        // epochs between eval passes; 0 disables
  int checkpoint_every = 0;  // epochs between checkpoint writes; 0 = final only
  bool audit_updates = false;  // hash-audit that D/G updates do not cross
  bool cls_only = false;       // fine-tuning mode: classification loss only
  int max_train_samples = 0;   // subsample the train split (0 = all)

  static TrainConfig paper_scale() {
    TrainConfig c;
    c.epochs = 500;
    c.model.ladder = {64, 128, 256, 512};
    return c;
  }

  /// All problems at once (empty = valid).
  std::vector<std::string> validate() const;
};

struct StepRow {
  long long step = 0;
  int epoch = 0;
  double lr = 0;
  LossReport report;
};

struct RunHistory {
  std::vector<StepRow> rows;  // strictly ordered by step
  std::vector<double> epoch_eval_accuracy;
  double wall_seconds = 0;
  std::string checkpoint_path;
};

struct TrainResult {
  FersnetModel<float> model;
  RunHistory history;
};

/// Adversarially alternating optimization: per step, the discriminator
/// updates on its GAN loss, then the generator side updates on the combined
/// objective. Adam for both, cosine-annealed lr, lambda4 ramp per epoch.
/// When out_dir is non-empty, model.ckpt and history.csv are written there.
TrainResult train(const TrainConfig& cfg, const LoadedDataset& train_data,
                  const LoadedDataset& eval_data, const std::string& out_dir = "",
                  const FersnetModel<float>* init_from = nullptr);

/// Fraction of samples whose argmax logit equals the label (center-crop,
/// eval mode).
double evaluate_fer(FersnetModel<float>& model, const LoadedDataset& data);

/// Same protocol driven by an arbitrary per-image predictor (stubs, oracles).
double evaluate_fer(const std::function<int(const Tensor<float>&)>& predict,
                    const LoadedDataset& data);

struct CrossValResult {
  std::vector<double> fold_accuracy;
  double mean = 0;
};

/// k-fold identity-independent cross-validation: trains from scratch per
/// fold on the remaining folds.
CrossValResult cross_validate(const TrainConfig& cfg, const LoadedDataset& data, int k);

/// Batched eval-mode wrappers over a trained model.
BatchGenerator model_generator(FersnetModel<float>& model);
std::function<std::vector<int>(const Tensor<float>&)> model_batch_classifier(
    FersnetModel<float>& model);

/// Synthesize target expressions for every test image and score the
/// recognizer against the target labels. With `targets_are_source` the
/// degenerate protocol is run instead (target = source label only).
double synthetic_recognition_accuracy(
    const BatchGenerator& generate,
    const std::function<std::vector<int>(const Tensor<float>&)>& classify_batch,
    const LoadedDataset& test, int num_classes, bool targets_are_source = false);

/// Full quantitative synthesis protocol: trains an independent single-branch
/// recognizer on the real training set, then scores the generator on the
/// test set.
double evaluate_fes_quantitative(FersnetModel<float>& generator, const TrainConfig& cfg,
                                 const LoadedDataset& train_data, const LoadedDataset& test_data);

struct AblationRow {
  std::string name;
  std::vector<double> accuracies;  // per seed
  double mean = 0;
  double stddev = 0;
  long long parameter_count = 0;  // of the trained variant (last seed)
};

struct AblationOptions {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int k_folds = 5;
  int eval_fold = 0;
  int finetune_epochs = 8;
  double finetune_lr_scale = 0.1;
  double widen_no_mtl = 2.0;     // single-branch capacity match
  double widen_hard_sum = 1.25;  // hard-sharing capacity match
};

/// Trains the four study variants with shared seeds and data order and
/// reports per-seed and mean accuracies. Row order: w/o MTL, w/o ConvFLU,
/// original, w/ FES-DA.
std::vector<AblationRow> run_ablation(const TrainConfig& base, const LoadedDataset& data,
                                      const AblationOptions& opt, std::ostream* log = nullptr);

/// Variant configs used by the ablation (exposed for capacity audits).
TrainConfig ablation_variant_config(const TrainConfig& base, SharingMode mode,
                                    const AblationOptions& opt);

/// Per sample: 4 blocks x 2 directions x 2 gates = 16 heat maps, upsampled
/// to the input resolution, plus raw min/max sidecars and one montage grid.
/// Returns the number of heat-map files written.
int export_gate_visualizations(FersnetModel<float>& model, const LoadedDataset& samples,
                               int max_samples, const std::string& out_dir);

struct GateRegionStats {
  double feature_mean = 0;     // mean leak-gate response over mouth/eye/brow pixels
  double background_mean = 0;  // everywhere else
};

/// Mean recognition-direction leak-gate response over renderer-known feature
/// masks vs the background, averaged over samples and the four blocks.
GateRegionStats fer_leak_gate_region_stats(FersnetModel<float>& model, const LoadedDataset& data,
                                           const std::vector<FaceMasks>& masks);

}  // namespace fersnet
