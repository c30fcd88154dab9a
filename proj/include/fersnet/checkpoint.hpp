// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "fersnet/tensor.hpp"

namespace fersnet {

/// Named-tensor archive:
///   magic "FERSNTAR" | u32 version | u32 header length | header JSON |
///   raw little-endian f32 payload.
/// The header lists {name, dtype, shape, offset} per tensor plus a free-form
/// "meta" object (architecture hyperparameters), so checkpoints are
/// self-describing.
inline constexpr char kCheckpointMagic[8] = {'F', 'E', 'R', 'S', 'N', 'T', 'A', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string meta_json;  // serialized "meta" object
  std::vector<std::pair<std::string, Tensor<float>>> tensors;  // manifest order

  const Tensor<float>& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors,
                     const std::string& meta_json);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace fersnet
