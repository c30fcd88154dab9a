// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "fersnet/checkpoint.hpp"
#include "fersnet/model.hpp"

namespace fersnet {

/// Architecture hyperparameters as the checkpoint "meta" object, so archives
/// are self-describing.
std::string model_meta_json(const ModelConfig& cfg);
ModelConfig model_config_from_meta(const std::string& meta_json);

void save_model(const std::string& path, FersnetModel<float>& model);
FersnetModel<float> load_model(const std::string& path);

/// Deep copy: fresh parameter nodes with identical values and buffers.
FersnetModel<float> clone_model(const FersnetModel<float>& model);

/// FNV-1a over the raw bytes of every named parameter, in collection order.
std::uint64_t parameter_hash(const std::vector<NamedVar<float>>& params);

}  // namespace fersnet
