// SPDX-License-Identifier: Apache-2.0
#include "fersnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "fersnet/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian; big-endian hosts are unsupported");

namespace fersnet {

using nlohmann::json;

const Tensor<float>& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw IoError("checkpoint has no tensor named '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors,
                     const std::string& meta_json) {
  json header;
  header["meta"] = meta_json.empty() ? json::object() : json::parse(meta_json);
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    json e;
    e["name"] = name;
    e["dtype"] = "f32";
    e["shape"] = t->shape();
    e["offset"] = offset;
    manifest.push_back(std::move(e));
    offset += static_cast<std::uint64_t>(t->numel()) * sizeof(float);
  }
  header["tensors"] = std::move(manifest);
  std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  std::uint32_t ver = kCheckpointVersion;
  std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
  os.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  os.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : tensors)
    os.write(reinterpret_cast<const char*>(t->data()),
             static_cast<std::streamsize>(t->numel() * static_cast<long long>(sizeof(float))));
  if (!os) throw IoError("failed while writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[sizeof(kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError("'" + path + "' is not a checkpoint archive (bad magic)");
  std::uint32_t ver = 0, hlen = 0;
  is.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  is.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!is) throw IoError("truncated checkpoint '" + path + "'");
  if (ver != kCheckpointVersion)
    throw IoError("checkpoint '" + path + "' has format version " + std::to_string(ver) +
                  ", expected " + std::to_string(kCheckpointVersion));
  std::string hs(hlen, '\0');
  is.read(hs.data(), hlen);
  if (!is) throw IoError("truncated checkpoint header in '" + path + "'");
  json header = json::parse(hs, nullptr, false);
  if (header.is_discarded()) throw IoError("corrupt checkpoint header in '" + path + "'");

  Checkpoint ck;
  ck.meta_json = header.value("meta", json::object()).dump();
  std::streampos payload_start = is.tellg();
  for (const auto& e : header.at("tensors")) {
    std::string name = e.at("name").get<std::string>();
    if (e.at("dtype").get<std::string>() != "f32")
      throw IoError("tensor '" + name + "' has unsupported dtype");
    Shape shape = e.at("shape").get<Shape>();
    std::uint64_t offset = e.at("offset").get<std::uint64_t>();
    Tensor<float> t(shape);
    is.seekg(payload_start + static_cast<std::streamoff>(offset));
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * static_cast<long long>(sizeof(float))));
    if (!is) throw IoError("truncated payload for tensor '" + name + "' in '" + path + "'");
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

}  // namespace fersnet
