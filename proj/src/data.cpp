// SPDX-License-Identifier: Apache-2.0
#include "fersnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fersnet/error.hpp"
#include "fersnet/image_io.hpp"
#include "fersnet/ops.hpp"

namespace fersnet {

namespace fs = std::filesystem;

void DatasetManifest::recompute_counts() {
  class_counts.assign(static_cast<size_t>(num_classes), 0);
  for (const auto& r : records) {
    if (r.expression < 0 || r.expression >= num_classes)
      throw InputError("manifest record has label outside [0," + std::to_string(num_classes) +
                       ")");
    ++class_counts[static_cast<size_t>(r.expression)];
  }
}

std::vector<int> DatasetManifest::distinct_subjects() const {
  std::set<int> s;
  for (const auto& r : records) s.insert(r.subject_id);
  return {s.begin(), s.end()};
}

DatasetManifest DatasetManifest::load(const std::string& path, int num_classes) {
  std::ifstream is(path);
  if (!is) throw IngestError("cannot open manifest '" + path + "'");
  DatasetManifest m;
  m.num_classes = num_classes;
  std::string line;
  int lineno = 0;
  if (!std::getline(is, line)) throw IngestError("manifest '" + path + "' is empty", 1);
  ++lineno;
  bool has_synth = false;
  if (line == "path,subject_id,expression,synthetic")
    has_synth = true;
  else if (line != "path,subject_id,expression")
    throw IngestError("manifest header must be 'path,subject_id,expression[,synthetic]'", 1);
  std::set<std::string> seen;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string path_field, subj, expr, synth;
    if (!std::getline(ls, path_field, ',') || !std::getline(ls, subj, ',') ||
        !std::getline(ls, expr, has_synth ? ',' : '\n'))
      throw IngestError("malformed manifest row", lineno);
    Sample s;
    s.path = path_field;
    try {
      s.subject_id = std::stoi(subj);
      s.expression = std::stoi(expr);
    } catch (const std::exception&) {
      throw IngestError("non-numeric field in manifest row", lineno);
    }
    if (has_synth) {
      if (!std::getline(ls, synth)) throw IngestError("missing synthetic flag", lineno);
      s.synthetic = (synth == "1" || synth == "true");
    }
    if (s.expression < 0 || s.expression >= num_classes)
      throw IngestError("expression label " + std::to_string(s.expression) + " outside [0," +
                        std::to_string(num_classes) + ")", lineno);
    if (!s.path.empty() && !seen.insert(s.path).second)
      throw IngestError("duplicate image path '" + s.path + "'", lineno);
    m.records.push_back(std::move(s));
  }
  m.recompute_counts();
  return m;
}

void DatasetManifest::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write manifest '" + path + "'");
  bool any_synth = false;
  for (const auto& r : records) any_synth = any_synth || r.synthetic;
  os << (any_synth ? "path,subject_id,expression,synthetic\n" : "path,subject_id,expression\n");
  for (const auto& r : records) {
    os << r.path << ',' << r.subject_id << ',' << r.expression;
    if (any_synth) os << ',' << (r.synthetic ? 1 : 0);
    os << '\n';
  }
}

std::vector<RenderParamsRecord> load_render_params(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IngestError("cannot open render params '" + path + "'");
  std::string line;
  std::getline(is, line);  // header
  std::vector<RenderParamsRecord> out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    RenderParamsRecord r;
    std::string f;
    auto next = [&](double& v) {
      if (!std::getline(ls, f, ',')) throw IngestError("malformed render params row", lineno);
      v = std::stod(f);
    };
    if (!std::getline(ls, r.path, ',')) throw IngestError("malformed render params row", lineno);
    double tmp;
    next(tmp);
    r.subject_id = static_cast<int>(tmp);
    next(tmp);
    r.expression = static_cast<int>(tmp);
    next(r.factors.subject.ellipse_ecc);
    next(r.factors.subject.eye_spacing);
    next(r.factors.subject.eye_height);
    next(r.factors.expr.mouth_curve);
    next(r.factors.expr.mouth_open);
    next(r.factors.expr.brow_angle);
    if (!std::getline(ls, f)) throw IngestError("malformed render params row", lineno);
    r.factors.brightness = std::stod(f);
    out.push_back(std::move(r));
  }
  return out;
}

DatasetManifest generate_toy_dataset(const std::string& out_dir, int n_subjects,
                                     const std::vector<int>& per_class_counts,
                                     const ToyFaceSpec& spec, std::uint64_t seed) {
  int E = static_cast<int>(per_class_counts.size());
  if (E < 2) throw InputError("generate_toy_dataset: need at least 2 classes");
  if (static_cast<size_t>(E) > spec.archetypes.size())
    throw InputError("generate_toy_dataset: not enough archetypes for " + std::to_string(E) +
                     " classes");
  if (n_subjects < 1) throw InputError("generate_toy_dataset: need at least 1 subject");
  for (int e = 0; e < E; ++e) {
    if (per_class_counts[static_cast<size_t>(e)] < 0)
      throw InputError("generate_toy_dataset: negative class count");
    long long cap = static_cast<long long>(n_subjects) * spec.max_per_subject_class;
    if (per_class_counts[static_cast<size_t>(e)] > cap)
      throw InputError("generate_toy_dataset: class " + std::to_string(e) + " asks for " +
                       std::to_string(per_class_counts[static_cast<size_t>(e)]) +
                       " samples, above the " + std::to_string(cap) +
                       " available (subjects x per-subject cap)");
  }

  fs::create_directories(fs::path(out_dir) / "images");

  std::vector<SubjectFactors> subjects(static_cast<size_t>(n_subjects));
  for (int s = 0; s < n_subjects; ++s) {
    RngStream rng = RngStream::derive(seed, "subject", static_cast<std::uint64_t>(s));
    subjects[static_cast<size_t>(s)].ellipse_ecc = rng.uniform(0.80, 1.15);
    subjects[static_cast<size_t>(s)].eye_spacing = rng.uniform(0.22, 0.34);
    subjects[static_cast<size_t>(s)].eye_height = rng.uniform(-0.30, -0.14);
  }

  DatasetManifest manifest;
  manifest.num_classes = E;
  std::ofstream params(fs::path(out_dir) / "render_params.csv");
  if (!params) throw IoError("cannot write render_params.csv under '" + out_dir + "'");
  params << "path,subject_id,expression,ellipse_ecc,eye_spacing,eye_height,"
            "mouth_curve,mouth_open,brow_angle,brightness\n";
  params.precision(17);

  std::uint64_t index = 0;
  for (int e = 0; e < E; ++e) {
    // per-class subject order, reshuffled so class coverage varies by subject
    std::vector<int> order(static_cast<size_t>(n_subjects));
    for (int s = 0; s < n_subjects; ++s) order[static_cast<size_t>(s)] = s;
    RngStream orng = RngStream::derive(seed, "class-order", static_cast<std::uint64_t>(e));
    for (int s = n_subjects - 1; s > 0; --s)
      std::swap(order[static_cast<size_t>(s)], order[static_cast<size_t>(orng.uniform_int(s + 1))]);

    for (int k = 0; k < per_class_counts[static_cast<size_t>(e)]; ++k, ++index) {
      int subject = order[static_cast<size_t>(k % n_subjects)];
      RngStream rng = RngStream::derive(seed, "image", index);
      RenderFactors f;
      f.subject = subjects[static_cast<size_t>(subject)];
      f.expr = spec.archetypes[static_cast<size_t>(e)];
      f.expr.mouth_curve += rng.uniform(-spec.factor_jitter, spec.factor_jitter);
      f.expr.mouth_open =
          std::max(0.0, f.expr.mouth_open + rng.uniform(-spec.factor_jitter, spec.factor_jitter));
      f.expr.brow_angle += rng.uniform(-spec.factor_jitter, spec.factor_jitter);
      f.brightness = rng.uniform(-spec.brightness_jitter, spec.brightness_jitter);

      Tensor<float> img = render_toy_face(f, spec.render_size, spec.noise, rng);
      char name[64];
      std::snprintf(name, sizeof(name), "images/s%03d_e%d_%05llu.png", subject, e,
                    static_cast<unsigned long long>(index));
      png_write_gray((fs::path(out_dir) / name).string(), tensor_to_image(img));

      Sample rec;
      rec.path = name;
      rec.subject_id = subject;
      rec.expression = e;
      manifest.records.push_back(rec);
      params << name << ',' << subject << ',' << e << ',' << f.subject.ellipse_ecc << ','
             << f.subject.eye_spacing << ',' << f.subject.eye_height << ',' << f.expr.mouth_curve
             << ',' << f.expr.mouth_open << ',' << f.expr.brow_angle << ',' << f.brightness
             << '\n';
    }
  }
  manifest.recompute_counts();
  manifest.save((fs::path(out_dir) / "manifest.csv").string());
  return manifest;
}

LoadedDataset LoadedDataset::subset(const std::vector<int>& indices) const {
  LoadedDataset out;
  out.manifest.num_classes = manifest.num_classes;
  for (int i : indices) {
    out.manifest.records.push_back(manifest.records[static_cast<size_t>(i)]);
    out.images.push_back(images[static_cast<size_t>(i)]);
  }
  out.manifest.recompute_counts();
  return out;
}

LoadedDataset load_dataset(const DatasetManifest& manifest, const std::string& root_dir) {
  LoadedDataset ds;
  ds.manifest = manifest;
  ds.images.reserve(manifest.records.size());
  for (const auto& r : manifest.records) {
    fs::path p = fs::path(root_dir) / r.path;
    ds.images.push_back(image_to_tensor(png_read_gray(p.string())));
  }
  return ds;
}

LoadedDataset load_dataset(const std::string& manifest_path, int num_classes) {
  auto manifest = DatasetManifest::load(manifest_path, num_classes);
  return load_dataset(manifest, fs::path(manifest_path).parent_path().string());
}

namespace {

Tensor<float> rotate_bilinear(const Tensor<float>& img, double degrees) {
  int C = img.size(0), H = img.size(1), W = img.size(2);
  double a = degrees * 3.14159265358979323846 / 180.0;
  double ca = std::cos(a), sa = std::sin(a);
  double cy = (H - 1) * 0.5, cx = (W - 1) * 0.5;
  Tensor<float> out({C, H, W});
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      double dx = j - cx, dy = i - cy;
      double sx = ca * dx + sa * dy + cx;
      double sy = -sa * dx + ca * dy + cy;
      // border replication
      sx = std::clamp(sx, 0.0, static_cast<double>(W - 1));
      sy = std::clamp(sy, 0.0, static_cast<double>(H - 1));
      int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
      int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      double fx = sx - x0, fy = sy - y0;
      for (int c = 0; c < C; ++c) {
        const float* p = img.data() + static_cast<long long>(c) * H * W;
        double v00 = p[static_cast<long long>(y0) * W + x0];
        double v01 = p[static_cast<long long>(y0) * W + x1];
        double v10 = p[static_cast<long long>(y1) * W + x0];
        double v11 = p[static_cast<long long>(y1) * W + x1];
        double v = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
        out[(static_cast<long long>(c) * H + i) * W + j] =
            static_cast<float>(std::clamp(v, -1.0, 1.0));
      }
    }
  }
  return out;
}

Tensor<float> mirror_horizontal(const Tensor<float>& img) {
  int C = img.size(0), H = img.size(1), W = img.size(2);
  Tensor<float> out({C, H, W});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j)
        out[(static_cast<long long>(c) * H + i) * W + j] =
            img[(static_cast<long long>(c) * H + i) * W + (W - 1 - j)];
  return out;
}

Tensor<float> crop(const Tensor<float>& img, int oy, int ox, int size) {
  int C = img.size(0), H = img.size(1), W = img.size(2);
  (void)H;
  Tensor<float> out({C, size, size});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < size; ++i)
      for (int j = 0; j < size; ++j)
        out[(static_cast<long long>(c) * size + i) * size + j] =
            img[(static_cast<long long>(c) * img.size(1) + oy + i) * W + ox + j];
  return out;
}

void require_canvas(const Tensor<float>& image, const char* what) {
  if (image.rank() != 3 || image.size(1) != kCanvas || image.size(2) != kCanvas)
    throw InputError(std::string(what) + ": expected [C," + std::to_string(kCanvas) + "," +
                     std::to_string(kCanvas) + "] input, got " + shape_str(image.shape()));
}

}  // namespace

Tensor<float> augment_train(const Tensor<float>& image, RngStream& rng) {
  require_canvas(image, "augment_train");
  static const int kAngles[7] = {-15, -10, -5, 0, 5, 10, 15};
  int angle = kAngles[rng.uniform_int(7)];
  bool mirror = rng.bernoulli(0.5);
  int span = kCanvas - kTrainCrop + 1;  // 15 -> 225 crop origins
  int oy = rng.uniform_int(span);
  int ox = rng.uniform_int(span);
  Tensor<float> t = (angle == 0) ? image : rotate_bilinear(image, angle);
  if (mirror) t = mirror_horizontal(t);
  return crop(t, oy, ox, kTrainCrop);
}

Tensor<float> preprocess_eval(const Tensor<float>& image) {
  require_canvas(image, "preprocess_eval");
  int off = (kCanvas - kTrainCrop) / 2;  // 7
  return crop(image, off, off, kTrainCrop);
}

std::vector<int> FoldAssignment::train_indices(int fold) const {
  std::vector<int> out;
  for (size_t i = 0; i < fold_of_record.size(); ++i)
    if (fold_of_record[i] != fold) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> FoldAssignment::test_indices(int fold) const {
  std::vector<int> out;
  for (size_t i = 0; i < fold_of_record.size(); ++i)
    if (fold_of_record[i] == fold) out.push_back(static_cast<int>(i));
  return out;
}

FoldAssignment identity_folds(const DatasetManifest& manifest, int k, std::uint64_t seed) {
  auto subjects = manifest.distinct_subjects();
  if (k < 1) throw InputError("identity_folds: k must be >= 1");
  if (k > static_cast<int>(subjects.size()))
    throw InputError("identity_folds: k=" + std::to_string(k) + " exceeds the " +
                     std::to_string(subjects.size()) + " distinct subjects");
  RngStream rng = RngStream::derive(seed, "folds");
  for (int i = static_cast<int>(subjects.size()) - 1; i > 0; --i)
    std::swap(subjects[static_cast<size_t>(i)], subjects[static_cast<size_t>(rng.uniform_int(i + 1))]);
  FoldAssignment fa;
  fa.k = k;
  for (size_t i = 0; i < subjects.size(); ++i)
    fa.fold_of_subject[subjects[i]] = static_cast<int>(i % static_cast<size_t>(k));
  fa.fold_of_record.reserve(manifest.records.size());
  for (const auto& r : manifest.records) fa.fold_of_record.push_back(fa.fold_of_subject.at(r.subject_id));
  return fa;
}

LoadedDataset balance_with_fes(const LoadedDataset& real, const BatchGenerator& generate, int E) {
  LoadedDataset out;
  out.manifest.num_classes = E;
  constexpr int kBatch = 32;
  std::vector<std::pair<int, int>> work;  // (record index, target class)
  for (size_t i = 0; i < real.manifest.records.size(); ++i)
    for (int e = 0; e < E; ++e) work.emplace_back(static_cast<int>(i), e);
  for (size_t start = 0; start < work.size(); start += kBatch) {
    size_t stop = std::min(work.size(), start + kBatch);
    int n = static_cast<int>(stop - start);
    Tensor<float> batch({n, 1, kTrainCrop, kTrainCrop});
    std::vector<int> targets(static_cast<size_t>(n));
    for (int b = 0; b < n; ++b) {
      const auto& [ri, e] = work[start + static_cast<size_t>(b)];
      const Tensor<float>& img = real.images[static_cast<size_t>(ri)];
      Tensor<float> prepared =
          (img.size(1) == kTrainCrop) ? img : preprocess_eval(img);
      std::copy(prepared.data(), prepared.data() + prepared.numel(),
                batch.data() + static_cast<long long>(b) * prepared.numel());
      targets[static_cast<size_t>(b)] = e;
    }
    Tensor<float> synth = generate(batch, targets);
    if (synth.shape() != Shape{n, 1, kTrainCrop, kTrainCrop})
      throw NumericError("balance_with_fes: generator returned unexpected shape " +
                         shape_str(synth.shape()));
    if (!all_finite(synth))
      throw NumericError("balance_with_fes: generator produced non-finite values");
    for (int b = 0; b < n; ++b) {
      const auto& [ri, e] = work[start + static_cast<size_t>(b)];
      const Sample& src = real.manifest.records[static_cast<size_t>(ri)];
      Sample rec;
      rec.subject_id = src.subject_id;
      rec.expression = e;
      rec.synthetic = true;
      out.manifest.records.push_back(rec);
      Tensor<float> img({1, kTrainCrop, kTrainCrop});
      std::copy(synth.data() + static_cast<long long>(b) * img.numel(),
                synth.data() + static_cast<long long>(b + 1) * img.numel(), img.data());
      out.images.push_back(std::move(img));
    }
  }
  out.manifest.recompute_counts();
  return out;
}

}  // namespace fersnet
