// SPDX-License-Identifier: Apache-2.0
#include "fersnet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "fersnet/embedder.hpp"
#include "fersnet/image_io.hpp"
#include "fersnet/model_io.hpp"

namespace fersnet {

namespace fs = std::filesystem;

double cosine_lr(long long step, long long total_steps, double lr_max, double lr_min) {
  if (total_steps < 1) throw InputError("cosine_lr: total_steps must be >= 1");
  if (step < 0 || step > total_steps)
    throw InputError("cosine_lr: step " + std::to_string(step) + " outside [0," +
                     std::to_string(total_steps) + "]");
  double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.14159265358979323846 * t));
}

std::vector<std::string> TrainConfig::validate() const {
  std::vector<std::string> p;
  if (batch_size < 2) p.push_back("batch_size must be >= 2 (batch norm needs batch statistics)");
  if (epochs < 1) p.push_back("epochs must be >= 1");
  if (!(lr_min < lr_max)) p.push_back("lr_min must be strictly below lr_max");
  if (embedding_dim < 1) p.push_back("embedding_dim must be >= 1");
  if (threads < 1) p.push_back("threads must be >= 1");
  if (max_train_samples < 0) p.push_back("max_train_samples must be >= 0");
  try {
    weights.validate();
  } catch (const ConfigError& e) {
    p.push_back(e.what());
  }
  try {
    model.validate();
  } catch (const ConfigError& e) {
    p.push_back(e.what());
  }
  return p;
}

namespace {

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long long t = 0;
  std::vector<Tensor<float>> m, v;

  void init(const std::vector<Var<float>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.shape());
      v.emplace_back(p.shape());
    }
  }

  void step(std::vector<Var<float>>& params, double lr) {
    ++t;
    double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
      if (!params[pi].grad().defined()) continue;
      const Tensor<float>& g = params[pi].grad();
      Tensor<float>& val = params[pi].value();
      Tensor<float>& mm = m[pi];
      Tensor<float>& vv = v[pi];
      for (long long i = 0; i < g.numel(); ++i) {
        double gi = static_cast<double>(g[i]);
        mm[i] = static_cast<float>(beta1 * mm[i] + (1.0 - beta1) * gi);
        vv[i] = static_cast<float>(beta2 * vv[i] + (1.0 - beta2) * gi * gi);
        val[i] -= static_cast<float>(lr * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + eps));
      }
    }
  }
};

void zero_grads(std::vector<Var<float>>& params) {
  for (auto& p : params) p.zero_grad();
}

Tensor<float> prepare_sample(const Tensor<float>& img) {
  return img.size(1) == kTrainCrop ? img : preprocess_eval(img);
}

void copy_into_batch(Tensor<float>& batch, int slot, const Tensor<float>& img) {
  std::copy(img.data(), img.data() + img.numel(),
            batch.data() + static_cast<long long>(slot) * img.numel());
}

Tensor<float> one_hot_batch(const std::vector<int>& classes, int E) {
  Tensor<float> t({static_cast<int>(classes.size()), E});
  for (size_t i = 0; i < classes.size(); ++i)
    t[static_cast<long long>(i) * E + classes[i]] = 1.0f;
  return t;
}

std::set<int> subject_set(const LoadedDataset& ds) {
  std::set<int> s;
  for (const auto& r : ds.manifest.records) s.insert(r.subject_id);
  return s;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const LoadedDataset& train_data,
                  const LoadedDataset& eval_data, const std::string& out_dir,
                  const FersnetModel<float>* init_from) {
  {
    auto problems = cfg.validate();
    if (!problems.empty()) {
      std::string msg = "invalid training config:";
      for (const auto& p : problems) msg += "\n  - " + p;
      throw ConfigError(msg);
    }
  }
  if (train_data.images.empty() || eval_data.images.empty())
    throw InputError("train: both manifests must be non-empty");
  {
    auto tr = subject_set(train_data), ev = subject_set(eval_data);
    for (int s : ev)
      if (tr.count(s))
        throw ConfigError("train/eval splits share subject " + std::to_string(s) +
                          "; identity-independent evaluation requires disjoint subjects");
  }
  const int E = cfg.model.num_classes;
  if (train_data.manifest.num_classes != E || eval_data.manifest.num_classes != E)
    throw ConfigError("dataset class count does not match the model's num_classes");

  LoadedDataset train_ds = train_data;
  if (cfg.max_train_samples > 0 &&
      cfg.max_train_samples < static_cast<int>(train_ds.images.size())) {
    std::vector<int> idx(train_ds.images.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    RngStream rng = RngStream::derive(cfg.seed, "subsample");
    for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i)
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(rng.uniform_int(i + 1))]);
    idx.resize(static_cast<size_t>(cfg.max_train_samples));
    std::sort(idx.begin(), idx.end());
    train_ds = train_ds.subset(idx);
  }

  for (int e = 0; e < E; ++e)
    if (train_ds.manifest.class_counts[static_cast<size_t>(e)] == 0)
      throw ConfigError("class " + std::to_string(e) +
                        " has no training samples; target pairing needs every class populated");

  FersnetModel<float> model;
  if (init_from) {
    model = clone_model(*init_from);
    if (model.cfg.num_classes != E) throw ConfigError("initial model class count mismatch");
  } else {
    model.init(cfg.model, cfg.seed);
  }
  const bool has_fes = (model.cfg.sharing != SharingMode::kNone) && !cfg.cls_only;

  // identity embedder (frozen during the run)
  std::unique_ptr<IdentityEmbedder<float>> embedder;
  if (has_fes) {
    if (cfg.embedder == TrainConfig::Embedder::kToyConvNet) {
      embedder = train_toy_identity_embedder(train_ds, cfg.embedder_epochs, cfg.embedding_dim,
                                             cfg.seed);
    } else {
      embedder = std::make_unique<RandomProjectionEmbedder<float>>(
          static_cast<long long>(cfg.model.in_channels) * kTrainCrop * kTrainCrop,
          cfg.embedding_dim, cfg.seed);
    }
  }

  // optimizer groups
  auto g_named_all = model.generator_params();
  std::vector<NamedVar<float>> g_named;
  for (auto& nv : g_named_all) {
    if (cfg.cls_only) {
      bool fer_path = nv.name.rfind("fer", 0) == 0 || nv.name.rfind("fes", 0) == 0 ||
                      nv.name.rfind("flu", 0) == 0 || nv.name.rfind("cls", 0) == 0;
      if (!fer_path) continue;
    }
    g_named.push_back(nv);
  }
  std::vector<Var<float>> g_params;
  for (auto& nv : g_named) g_params.push_back(nv.var);
  auto d_named = model.discriminator_params();
  std::vector<Var<float>> d_params;
  for (auto& nv : d_named) d_params.push_back(nv.var);
  AdamState adam_g, adam_d;
  adam_g.init(g_params);
  adam_d.init(d_params);

  // per-subject class -> record indices for target pairing
  std::map<int, std::map<int, std::vector<int>>> by_subject_class;
  for (size_t i = 0; i < train_ds.manifest.records.size(); ++i) {
    const auto& r = train_ds.manifest.records[i];
    by_subject_class[r.subject_id][r.expression].push_back(static_cast<int>(i));
  }

  const int n_train = static_cast<int>(train_ds.images.size());
  int steps_per_epoch = 0;
  for (int start = 0; start < n_train; start += cfg.batch_size)
    if (std::min(cfg.batch_size, n_train - start) >= 2) ++steps_per_epoch;
  if (steps_per_epoch == 0)
    throw ConfigError("train split has fewer than 2 samples; cannot form a batch");
  const long long total_steps = static_cast<long long>(steps_per_epoch) * cfg.epochs;

  std::ofstream hist_os;
  std::string ckpt_path;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    hist_os.open(fs::path(out_dir) / "history.csv");
    if (!hist_os) throw IoError("cannot write history.csv under '" + out_dir + "'");
    hist_os.precision(10);
    write_loss_csv_header(hist_os);
    ckpt_path = (fs::path(out_dir) / "model.ckpt").string();
  }

  RunHistory history;
  auto t0 = std::chrono::steady_clock::now();
  long long global_step = 0;
  std::string last_good_ckpt;

  std::vector<int> order(static_cast<size_t>(n_train));
  for (int i = 0; i < n_train; ++i) order[static_cast<size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    RngStream srng = RngStream::derive(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch));
    for (int i = n_train - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(srng.uniform_int(i + 1))]);

    for (int start = 0; start < n_train; start += cfg.batch_size) {
      int bs = std::min(cfg.batch_size, n_train - start);
      if (bs < 2) break;  // batch norm needs at least two samples
      double lr = cosine_lr(global_step, total_steps, cfg.lr_max, cfg.lr_min);

      Tensor<float> src({bs, cfg.model.in_channels, kTrainCrop, kTrainCrop});
      Tensor<float> tgt({bs, cfg.model.in_channels, kTrainCrop, kTrainCrop});
      std::vector<int> labels(static_cast<size_t>(bs));
      std::vector<int> target_labels(static_cast<size_t>(bs));
      for (int k = 0; k < bs; ++k) {
        int pos = start + k;
        int idx = order[static_cast<size_t>(pos)];
        const auto& rec = train_ds.manifest.records[static_cast<size_t>(idx)];
        const Tensor<float>& img = train_ds.images[static_cast<size_t>(idx)];
        Tensor<float> prepared;
        if (img.size(1) == kTrainCrop) {
          prepared = img;
        } else {
          RngStream arng = RngStream::derive(cfg.seed, "aug", static_cast<std::uint64_t>(epoch),
                                             static_cast<std::uint64_t>(pos));
          prepared = augment_train(img, arng);
        }
        copy_into_batch(src, k, prepared);
        labels[static_cast<size_t>(k)] = rec.expression;
        if (!has_fes) continue;

        RngStream prng = RngStream::derive(cfg.seed, "pair", static_cast<std::uint64_t>(epoch),
                                           static_cast<std::uint64_t>(pos));
        const auto& classes = by_subject_class.at(rec.subject_id);
        int pick = prng.uniform_int(static_cast<int>(classes.size()));
        auto it = classes.begin();
        std::advance(it, pick);
        target_labels[static_cast<size_t>(k)] = it->first;
        const auto& candidates = it->second;
        int tidx = candidates[static_cast<size_t>(prng.uniform_int(
            static_cast<int>(candidates.size())))];
        const Tensor<float>& timg = train_ds.images[static_cast<size_t>(tidx)];
        Tensor<float> tprep;
        if (timg.size(1) == kTrainCrop) {
          tprep = timg;
        } else {
          // identical augmentation draw keeps the pair registered
          RngStream arng2 = RngStream::derive(cfg.seed, "aug", static_cast<std::uint64_t>(epoch),
                                              static_cast<std::uint64_t>(pos));
          tprep = augment_train(timg, arng2);
        }
        copy_into_batch(tgt, k, tprep);
      }

      StepRow row;
      row.step = global_step;
      row.epoch = epoch;
      row.lr = lr;
      try {
        Var<float> src_var = Var<float>::constant(src);
        if (has_fes) {
          Tensor<float> src_onehot = one_hot_batch(labels, E);
          Tensor<float> tgt_onehot = one_hot_batch(target_labels, E);
          Var<float> tgt_var = Var<float>::constant(tgt);
          auto disc_fn = [&model](const Var<float>& im, const Tensor<float>& lb) {
            return model.discriminate(im, lb);
          };

          auto out = model.joint_forward(src_var, tgt_onehot, Mode::kTrain, false);

          std::uint64_t g_hash = cfg.audit_updates ? parameter_hash(g_named) : 0;
          auto d_loss = gan_loss_discriminator(disc_fn, tgt_var, tgt_onehot, out.synth,
                                               tgt_onehot);
          zero_grads(d_params);
          d_loss.backward();
          adam_d.step(d_params, lr);
          if (cfg.audit_updates && parameter_hash(g_named) != g_hash)
            throw NumericError("update audit: discriminator step changed generator parameters");

          std::uint64_t d_hash = cfg.audit_updates ? parameter_hash(d_named) : 0;
          GeneratorLossTerms<float> terms;
          terms.cls = classification_loss(out.logits, labels);
          terms.gan_g = gan_loss_generator(disc_fn, out.synth, tgt_onehot);
          terms.rec = reconstruction_loss(out.synth, tgt_var);
          auto gen_fn = [&model](const Tensor<float>& oh, const Var<float>& im) {
            return model.generate(im, oh, Mode::kTrain);
          };
          terms.cyc = cycle_loss_from(gen_fn, src_var, out.synth, src_onehot);
          terms.idt = identity_loss(*embedder, out.synth, tgt_var);
          auto total = total_generator_loss(terms, cfg.weights, epoch, cfg.epochs);
          zero_grads(g_params);
          total.value.backward();
          adam_g.step(g_params, lr);
          if (cfg.audit_updates && parameter_hash(d_named) != d_hash)
            throw NumericError("update audit: generator step changed discriminator parameters");

          row.report = total.report;
          row.report.gan_d = static_cast<double>(d_loss.item());
        } else {
          auto logits = model.fer_forward(src_var, Mode::kTrain);
          auto cls = classification_loss(logits, labels);
          if (!std::isfinite(static_cast<double>(cls.item())))
            throw NumericError("classification loss is non-finite");
          zero_grads(g_params);
          cls.backward();
          adam_g.step(g_params, lr);
          row.report.cls = static_cast<double>(cls.item());
          row.report.total = row.report.cls;
          row.report.lambda4_effective = lambda4_schedule(epoch, cfg.epochs, cfg.weights);
        }
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at step " + std::to_string(global_step) +
                           "; last-good checkpoint: " +
                           (last_good_ckpt.empty() ? "<none written>" : last_good_ckpt));
      }
      if (hist_os) write_loss_csv_row(hist_os, row.step, row.epoch, row.lr, row.report);
      history.rows.push_back(row);
      ++global_step;
    }

    bool last_epoch = (epoch + 1 == cfg.epochs);
    if (cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last_epoch))
      history.epoch_eval_accuracy.push_back(evaluate_fer(model, eval_data));
    if (!ckpt_path.empty() &&
        (last_epoch || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0))) {
      save_model(ckpt_path, model);
      last_good_ckpt = ckpt_path;
    }
  }

  history.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  history.checkpoint_path = last_good_ckpt;
  return {std::move(model), std::move(history)};
}

double evaluate_fer(FersnetModel<float>& model, const LoadedDataset& data) {
  if (data.images.empty()) throw InputError("evaluate_fer: empty dataset");
  const int batch = 32;
  int n = static_cast<int>(data.images.size());
  long long correct = 0;
  for (int start = 0; start < n; start += batch) {
    int bs = std::min(batch, n - start);
    Tensor<float> x({bs, model.cfg.in_channels, kTrainCrop, kTrainCrop});
    for (int k = 0; k < bs; ++k)
      copy_into_batch(x, k, prepare_sample(data.images[static_cast<size_t>(start + k)]));
    auto logits = model.fer_forward(Var<float>::constant(x), Mode::kEval);
    const int E = model.cfg.num_classes;
    for (int k = 0; k < bs; ++k) {
      const float* row = logits.value().data() + static_cast<long long>(k) * E;
      int arg = 0;
      for (int e = 1; e < E; ++e)
        if (row[e] > row[arg]) arg = e;
      if (arg == data.manifest.records[static_cast<size_t>(start + k)].expression) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

double evaluate_fer(const std::function<int(const Tensor<float>&)>& predict,
                    const LoadedDataset& data) {
  if (data.images.empty()) throw InputError("evaluate_fer: empty dataset");
  long long correct = 0;
  for (size_t i = 0; i < data.images.size(); ++i) {
    Tensor<float> prepared = prepare_sample(data.images[i]);
    if (predict(prepared) == data.manifest.records[i].expression) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.images.size());
}

CrossValResult cross_validate(const TrainConfig& cfg, const LoadedDataset& data, int k) {
  auto folds = identity_folds(data.manifest, k, cfg.seed);
  CrossValResult res;
  for (int f = 0; f < k; ++f) {
    LoadedDataset tr = data.subset(folds.train_indices(f));
    LoadedDataset te = data.subset(folds.test_indices(f));
    TrainResult r = train(cfg, tr, te);
    res.fold_accuracy.push_back(evaluate_fer(r.model, te));
  }
  double s = 0;
  for (double a : res.fold_accuracy) s += a;
  res.mean = s / static_cast<double>(res.fold_accuracy.size());
  return res;
}

BatchGenerator model_generator(FersnetModel<float>& model) {
  return [&model](const Tensor<float>& images, const std::vector<int>& targets) {
    Tensor<float> onehot = one_hot_batch(targets, model.cfg.num_classes);
    return model.generate(Var<float>::constant(images), onehot, Mode::kEval).value();
  };
}

std::function<std::vector<int>(const Tensor<float>&)> model_batch_classifier(
    FersnetModel<float>& model) {
  return [&model](const Tensor<float>& images) {
    auto logits = model.fer_forward(Var<float>::constant(images), Mode::kEval);
    int B = images.size(0), E = model.cfg.num_classes;
    std::vector<int> preds(static_cast<size_t>(B));
    for (int k = 0; k < B; ++k) {
      const float* row = logits.value().data() + static_cast<long long>(k) * E;
      int arg = 0;
      for (int e = 1; e < E; ++e)
        if (row[e] > row[arg]) arg = e;
      preds[static_cast<size_t>(k)] = arg;
    }
    return preds;
  };
}

double synthetic_recognition_accuracy(
    const BatchGenerator& generate,
    const std::function<std::vector<int>(const Tensor<float>&)>& classify_batch,
    const LoadedDataset& test, int num_classes, bool targets_are_source) {
  if (test.images.empty()) throw InputError("synthetic_recognition_accuracy: empty test set");
  std::vector<std::pair<int, int>> work;  // (record, target class)
  for (size_t i = 0; i < test.images.size(); ++i) {
    if (targets_are_source) {
      work.emplace_back(static_cast<int>(i), test.manifest.records[i].expression);
    } else {
      for (int e = 0; e < num_classes; ++e) work.emplace_back(static_cast<int>(i), e);
    }
  }
  const int batch = 32;
  long long correct = 0;
  for (size_t start = 0; start < work.size(); start += batch) {
    int bs = static_cast<int>(std::min(work.size() - start, static_cast<size_t>(batch)));
    Tensor<float> x({bs, 1, kTrainCrop, kTrainCrop});
    std::vector<int> targets(static_cast<size_t>(bs));
    for (int k = 0; k < bs; ++k) {
      const auto& [ri, e] = work[start + static_cast<size_t>(k)];
      copy_into_batch(x, k, prepare_sample(test.images[static_cast<size_t>(ri)]));
      targets[static_cast<size_t>(k)] = e;
    }
    Tensor<float> synth = generate(x, targets);
    auto preds = classify_batch(synth);
    for (int k = 0; k < bs; ++k)
      if (preds[static_cast<size_t>(k)] == targets[static_cast<size_t>(k)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(work.size());
}

double evaluate_fes_quantitative(FersnetModel<float>& generator, const TrainConfig& cfg,
                                 const LoadedDataset& train_data,
                                 const LoadedDataset& test_data) {
  TrainConfig rcfg = cfg;
  rcfg.model.sharing = SharingMode::kNone;  // independent recognizer, real images only
  TrainResult rec = train(rcfg, train_data, test_data);
  return synthetic_recognition_accuracy(model_generator(generator),
                                        model_batch_classifier(rec.model), test_data,
                                        cfg.model.num_classes);
}

TrainConfig ablation_variant_config(const TrainConfig& base, SharingMode mode,
                                    const AblationOptions& opt) {
  TrainConfig c = base;
  c.model.sharing = mode;
  double widen = 1.0;
  if (mode == SharingMode::kNone) widen = opt.widen_no_mtl;
  if (mode == SharingMode::kHardSum) widen = opt.widen_hard_sum;
  if (widen != 1.0)
    for (auto& w : c.model.ladder)
      w = std::max(1, static_cast<int>(std::lround(w * widen)));
  return c;
}

std::vector<AblationRow> run_ablation(const TrainConfig& base, const LoadedDataset& data,
                                      const AblationOptions& opt, std::ostream* log) {
  std::vector<AblationRow> rows(4);
  rows[0].name = "FERSNet w/o MTL";
  rows[1].name = "FERSNet w/o ConvFLU";
  rows[2].name = "FERSNet (original)";
  rows[3].name = "FERSNet w/ FES-DA";

  for (std::uint64_t seed : opt.seeds) {
    auto folds = identity_folds(data.manifest, opt.k_folds, seed);
    LoadedDataset tr = data.subset(folds.train_indices(opt.eval_fold));
    LoadedDataset te = data.subset(folds.test_indices(opt.eval_fold));

    FersnetModel<float> original;
    for (int vi = 0; vi < 3; ++vi) {
      SharingMode mode = vi == 0   ? SharingMode::kNone
                         : vi == 1 ? SharingMode::kHardSum
                                   : SharingMode::kGated;
      TrainConfig cfg = ablation_variant_config(base, mode, opt);
      cfg.seed = seed;
      TrainResult r = train(cfg, tr, te);
      double acc = evaluate_fer(r.model, te);
      rows[static_cast<size_t>(vi)].accuracies.push_back(acc);
      rows[static_cast<size_t>(vi)].parameter_count = r.model.parameter_count();
      if (log)
        (*log) << rows[static_cast<size_t>(vi)].name << "  seed=" << seed
               << "  acc=" << acc * 100.0 << "%\n";
      if (mode == SharingMode::kGated) original = std::move(r.model);
    }

    // FES-DA: balance the train split with the original model's synthesis
    // branch, then fine-tune the classifier path on a 1:1 real/synthetic mix.
    LoadedDataset synth = balance_with_fes(tr, model_generator(original), base.model.num_classes);
    LoadedDataset mixed = tr;
    {
      std::vector<int> idx(synth.images.size());
      for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
      RngStream rng = RngStream::derive(seed, "fesda-mix");
      for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i)
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(rng.uniform_int(i + 1))]);
      size_t take = std::min(idx.size(), tr.images.size());
      for (size_t i = 0; i < take; ++i) {
        mixed.manifest.records.push_back(synth.manifest.records[static_cast<size_t>(idx[i])]);
        mixed.images.push_back(synth.images[static_cast<size_t>(idx[i])]);
      }
      mixed.manifest.recompute_counts();
    }
    TrainConfig ft = base;
    ft.seed = seed;
    ft.cls_only = true;
    ft.epochs = opt.finetune_epochs;
    ft.lr_max *= opt.finetune_lr_scale;
    ft.lr_min *= opt.finetune_lr_scale;
    TrainResult fr = train(ft, mixed, te, "", &original);
    double acc = evaluate_fer(fr.model, te);
    rows[3].accuracies.push_back(acc);
    rows[3].parameter_count = fr.model.parameter_count();
    if (log) (*log) << rows[3].name << "  seed=" << seed << "  acc=" << acc * 100.0 << "%\n";
  }

  for (auto& row : rows) {
    double s = 0;
    for (double a : row.accuracies) s += a;
    row.mean = s / static_cast<double>(row.accuracies.size());
    double v = 0;
    for (double a : row.accuracies) v += (a - row.mean) * (a - row.mean);
    row.stddev = std::sqrt(v / static_cast<double>(row.accuracies.size()));
  }
  return rows;
}

namespace {

std::vector<float> upsample_nearest(const std::vector<float>& src, int sh, int sw, int dh,
                                    int dw) {
  std::vector<float> dst(static_cast<size_t>(dh) * dw);
  for (int i = 0; i < dh; ++i) {
    int si = std::min(sh - 1, i * sh / dh);
    for (int j = 0; j < dw; ++j) {
      int sj = std::min(sw - 1, j * sw / dw);
      dst[static_cast<size_t>(i) * dw + j] = src[static_cast<size_t>(si) * sw + sj];
    }
  }
  return dst;
}

GrayImage heat_to_image(const std::vector<float>& norm, int h, int w) {
  GrayImage img;
  img.width = w;
  img.height = h;
  img.pixels.resize(static_cast<size_t>(w) * h);
  for (size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = static_cast<std::uint8_t>(
        std::min(255.0f, std::max(0.0f, std::round(norm[i] * 255.0f))));
  return img;
}

}  // namespace

int export_gate_visualizations(FersnetModel<float>& model, const LoadedDataset& samples,
                               int max_samples, const std::string& out_dir) {
  if (model.cfg.sharing != SharingMode::kGated)
    throw ConfigError("gate visualization requires the gated model");
  fs::create_directories(out_dir);
  int n = std::min<int>(max_samples, static_cast<int>(samples.images.size()));
  int files = 0;
  const int size = kTrainCrop;
  for (int s = 0; s < n; ++s) {
    Tensor<float> prepared = prepare_sample(samples.images[static_cast<size_t>(s)]);
    Tensor<float> x({1, model.cfg.in_channels, size, size}, prepared.vec());
    std::vector<GateOutputs<float>> gates;
    model.fer_forward(Var<float>::constant(x), Mode::kEval, &gates);
    if (gates.size() != 8) throw NumericError("expected 8 gate outputs per forward");

    // montage: 4 block rows x (fer_r, fer_z, fes_r, fes_z) columns
    const int pad = 2;
    GrayImage grid;
    grid.width = 4 * size + 3 * pad;
    grid.height = 4 * size + 3 * pad;
    grid.pixels.assign(static_cast<size_t>(grid.width) * grid.height, 32);

    for (int b = 0; b < 4; ++b) {
      for (int dir = 0; dir < 2; ++dir) {
        const auto& g = gates[static_cast<size_t>(b * 2 + dir)];
        auto maps = gate_maps(g);
        const char* dname = dir == 0 ? "fer" : "fes";
        for (int which = 0; which < 2; ++which) {
          const GateHeatMap& m = which == 0 ? maps.r : maps.z;
          auto up = upsample_nearest(m.normalized, m.height, m.width, size, size);
          char name[64];
          std::snprintf(name, sizeof(name), "s%03d_b%d_%s_%s", s, b + 1, dname,
                        which == 0 ? "r" : "z");
          fs::path png = fs::path(out_dir) / (std::string(name) + ".png");
          png_write_gray(png.string(), heat_to_image(up, size, size));
          std::ofstream side(fs::path(out_dir) / (std::string(name) + ".txt"));
          if (!side) throw IoError("cannot write sidecar for " + png.string());
          side.precision(9);
          side << "min " << m.raw_min << "\nmax " << m.raw_max << "\n";
          ++files;

          int col = dir * 2 + which;
          for (int i = 0; i < size; ++i)
            for (int j = 0; j < size; ++j)
              grid.pixels[static_cast<size_t>(b * (size + pad) + i) * grid.width +
                          (col * (size + pad) + j)] =
                  static_cast<std::uint8_t>(std::min(
                      255.0f, std::max(0.0f, std::round(up[static_cast<size_t>(i) * size + j] *
                                                        255.0f))));
        }
      }
    }
    char gname[64];
    std::snprintf(gname, sizeof(gname), "s%03d_gates_grid.png", s);
    png_write_gray((fs::path(out_dir) / gname).string(), grid);
  }
  return files;
}

GateRegionStats fer_leak_gate_region_stats(FersnetModel<float>& model, const LoadedDataset& data,
                                           const std::vector<FaceMasks>& masks) {
  if (data.images.size() != masks.size())
    throw InputError("fer_leak_gate_region_stats: one mask per sample required");
  const int size = kTrainCrop;
  double feat_sum = 0, bg_sum = 0;
  long long feat_n = 0, bg_n = 0;
  int off = (kCanvas - kTrainCrop) / 2;
  for (size_t s = 0; s < data.images.size(); ++s) {
    Tensor<float> prepared = prepare_sample(data.images[s]);
    Tensor<float> x({1, model.cfg.in_channels, size, size}, prepared.vec());
    std::vector<GateOutputs<float>> gates;
    model.fer_forward(Var<float>::constant(x), Mode::kEval, &gates);
    // mean of the four recognition-direction leak gates, upsampled
    std::vector<float> acc(static_cast<size_t>(size) * size, 0.f);
    for (int b = 0; b < 4; ++b) {
      auto m = channel_mean_heat(gates[static_cast<size_t>(b * 2)].r.value(), 0);
      auto up = upsample_nearest(m.raw, m.height, m.width, size, size);
      for (size_t i = 0; i < acc.size(); ++i) acc[i] += up[i] / 4.f;
    }
    const FaceMasks& mk = masks[s];
    if (mk.size != kCanvas) throw InputError("masks must be rendered at canvas resolution");
    for (int i = 0; i < size; ++i)
      for (int j = 0; j < size; ++j) {
        bool feat = mk.features[static_cast<size_t>(i + off) * kCanvas + (j + off)] != 0;
        float v = acc[static_cast<size_t>(i) * size + j];
        if (feat) {
          feat_sum += v;
          ++feat_n;
        } else {
          bg_sum += v;
          ++bg_n;
        }
      }
  }
  GateRegionStats st;
  if (feat_n > 0) st.feature_mean = feat_sum / static_cast<double>(feat_n);
  if (bg_n > 0) st.background_mean = bg_sum / static_cast<double>(bg_n);
  return st;
}

}  // namespace fersnet
