// SPDX-License-Identifier: Apache-2.0
#include "fersnet/model_io.hpp"

#include <cstring>

#include <nlohmann/json.hpp>

namespace fersnet {

using nlohmann::json;

std::string model_meta_json(const ModelConfig& cfg) {
  json j;
  j["kind"] = "fersnet";
  j["num_classes"] = cfg.num_classes;
  j["in_channels"] = cfg.in_channels;
  j["image_size"] = cfg.image_size;
  j["ladder"] = cfg.ladder;
  j["label_channels"] = cfg.label_channels;
  j["cls_hidden"] = cfg.cls_hidden;
  j["disc_ladder"] = cfg.disc_ladder;
  j["sharing"] = sharing_mode_name(cfg.sharing);
  return j.dump();
}

ModelConfig model_config_from_meta(const std::string& meta_json) {
  json j = json::parse(meta_json, nullptr, false);
  if (j.is_discarded() || j.value("kind", "") != "fersnet")
    throw IoError("checkpoint meta does not describe a fersnet model");
  ModelConfig cfg;
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.in_channels = j.at("in_channels").get<int>();
  cfg.image_size = j.at("image_size").get<int>();
  cfg.ladder = j.at("ladder").get<std::vector<int>>();
  cfg.label_channels = j.at("label_channels").get<int>();
  cfg.cls_hidden = j.at("cls_hidden").get<int>();
  cfg.disc_ladder = j.at("disc_ladder").get<std::vector<int>>();
  cfg.sharing = sharing_mode_from(j.at("sharing").get<std::string>());
  return cfg;
}

void save_model(const std::string& path, FersnetModel<float>& model) {
  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  auto params = model.named_params();
  for (const auto& p : params) tensors.emplace_back(p.name, &p.var.value());
  auto buffers = model.named_buffers();
  for (const auto& b : buffers) tensors.emplace_back(b.name, b.tensor);
  save_checkpoint(path, tensors, model_meta_json(model.cfg));
}

FersnetModel<float> load_model(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  ModelConfig cfg = model_config_from_meta(ck.meta_json);
  FersnetModel<float> model;
  model.init(cfg, 0);
  for (auto& p : model.named_params()) {
    const Tensor<float>& src = ck.tensor(p.name);  // throws when absent
    if (src.shape() != p.var.shape())
      throw IoError("checkpoint tensor '" + p.name + "' has shape " + shape_str(src.shape()) +
                    ", model expects " + shape_str(p.var.shape()));
    const_cast<Var<float>&>(p.var).value() = src;
  }
  for (auto& b : model.named_buffers()) {
    const Tensor<float>& src = ck.tensor(b.name);
    if (src.shape() != b.tensor->shape())
      throw IoError("checkpoint buffer '" + b.name + "' has unexpected shape");
    *b.tensor = src;
  }
  return model;
}

FersnetModel<float> clone_model(const FersnetModel<float>& model) {
  FersnetModel<float> out;
  out.init(model.cfg, 0);
  auto src = model.named_params();
  auto dst = out.named_params();
  if (src.size() != dst.size()) throw ConfigError("clone_model: parameter lists diverge");
  for (size_t i = 0; i < src.size(); ++i)
    const_cast<Var<float>&>(dst[i].var).value() = src[i].var.value();
  auto sb = const_cast<FersnetModel<float>&>(model).named_buffers();
  auto db = out.named_buffers();
  for (size_t i = 0; i < sb.size(); ++i) *db[i].tensor = *sb[i].tensor;
  return out;
}

std::uint64_t parameter_hash(const std::vector<NamedVar<float>>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_bytes = [&h](const void* data, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : params) {
    mix_bytes(p.name.data(), p.name.size());
    mix_bytes(p.var.value().data(), static_cast<size_t>(p.var.numel()) * sizeof(float));
  }
  return h;
}

}  // namespace fersnet
