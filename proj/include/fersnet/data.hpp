// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fersnet/tensor.hpp"
#include "fersnet/toyface.hpp"

namespace fersnet {

struct Sample {
  std::string path;  // relative to the manifest directory; empty for in-memory
  int subject_id = 0;
  int expression = 0;
  bool synthetic = false;
};

struct DatasetManifest {
  std::vector<Sample> records;
  int num_classes = 0;
  std::vector<long long> class_counts;  // over all records

  void recompute_counts();
  std::vector<int> distinct_subjects() const;

  /// CSV with header path,subject_id,expression[,synthetic]. Labels must lie
  /// in [0,E); malformed rows and duplicate paths are rejected with their
  /// line number.
  static DatasetManifest load(const std::string& path, int num_classes);
  void save(const std::string& path) const;
};

/// Per-image render parameters, persisted alongside a generated corpus so
/// masks can be re-derived and identity constancy can be audited.
struct RenderParamsRecord {
  std::string path;
  int subject_id = 0;
  int expression = 0;
  RenderFactors factors;
};

std::vector<RenderParamsRecord> load_render_params(const std::string& path);

/// Renders a complete toy corpus under out_dir: images/*.png, manifest.csv,
/// render_params.csv. Deterministic per seed (byte-identical files).
/// per_class_counts[e] samples of class e are dealt round-robin over a
/// per-class seeded subject order, so every subject covers several classes.
DatasetManifest generate_toy_dataset(const std::string& out_dir, int n_subjects,
                                     const std::vector<int>& per_class_counts,
                                     const ToyFaceSpec& spec, std::uint64_t seed);

/// Decoded corpus in memory. Real images keep their stored extent (110);
/// synthetic ones are generator outputs at the network extent (96).
struct LoadedDataset {
  DatasetManifest manifest;
  std::vector<Tensor<float>> images;  // [1,H,W] each, values in [-1,1]

  LoadedDataset subset(const std::vector<int>& indices) const;
};

LoadedDataset load_dataset(const DatasetManifest& manifest, const std::string& root_dir);
LoadedDataset load_dataset(const std::string& manifest_path, int num_classes);

/// Training augmentation on a [C,110,110] tensor: rotation drawn from
/// {-15,-10,-5,0,5,10,15} degrees (bilinear, border replication), horizontal
/// mirror with probability 0.5, then a uniform random 96x96 crop.
Tensor<float> augment_train(const Tensor<float>& image, RngStream& rng);

/// Deterministic center crop to 96x96 (origin (7,7) for 110 inputs).
Tensor<float> preprocess_eval(const Tensor<float>& image);

constexpr int kTrainCrop = 96;
constexpr int kCanvas = 110;

/// Subject-disjoint fold assignment: subjects are dealt into k groups whose
/// sizes differ by at most one; every sample inherits its subject's fold.
struct FoldAssignment {
  int k = 0;
  std::map<int, int> fold_of_subject;
  std::vector<int> fold_of_record;

  std::vector<int> train_indices(int fold) const;
  std::vector<int> test_indices(int fold) const;
};

FoldAssignment identity_folds(const DatasetManifest& manifest, int k, std::uint64_t seed);

/// Batched generator surface used by dataset balancing: maps 96x96 images
/// plus target classes to synthetic 96x96 images.
using BatchGenerator =
    std::function<Tensor<float>(const Tensor<float>& images, const std::vector<int>& targets)>;

/// Synthesizes every class from every real sample: the returned dataset
/// holds E synthetic images per input record (class counts exactly uniform,
/// each equal to the input record count).
LoadedDataset balance_with_fes(const LoadedDataset& real, const BatchGenerator& generate, int E);

}  // namespace fersnet
