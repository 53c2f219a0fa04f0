#pragma once

#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>

#include "aitl/fsio.hpp"
#include "aitl/model.hpp"
#include "aitl/tensor.hpp"

namespace aitl {

constexpr char kCheckpointMagic[8] = {'A', 'I', 'T', 'L', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCheckpointVersion = 1;

/// Container layout: 8-byte magic, u32 format version, u64 JSON header
/// length, JSON header (kind, spec, metadata, tensor index), then the
/// tensor payload as little-endian float32 in index order.
struct Checkpoint {
  nlohmann::json header;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
};

inline void save_checkpoint(const std::string& path, nlohmann::json header, const std::vector<std::string>& names,
                            const std::vector<Tensor>& tensors) {
  if (names.size() != tensors.size()) throw std::invalid_argument("save_checkpoint: name/tensor count mismatch");
  nlohmann::json index = nlohmann::json::array();
  for (size_t i = 0; i < names.size(); ++i)
    index.push_back({{"name", names[i]}, {"shape", tensors[i].shape}});
  header["tensors"] = index;
  std::string js = header.dump();

  std::string out;
  out.append(kCheckpointMagic, 8);
  uint32_t ver = kCheckpointVersion;
  out.append(reinterpret_cast<const char*>(&ver), 4);
  uint64_t jlen = js.size();
  out.append(reinterpret_cast<const char*>(&jlen), 8);
  out += js;
  for (const auto& t : tensors)
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
  atomic_write_file(path, out);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::string bytes = read_file(path);
  if (bytes.size() < 20) throw std::runtime_error("checkpoint " + path + ": truncated header");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint " + path + ": bad magic");
  uint32_t ver;
  std::memcpy(&ver, bytes.data() + 8, 4);
  if (ver != kCheckpointVersion)
    throw std::runtime_error("checkpoint " + path + ": unsupported format version " + std::to_string(ver));
  uint64_t jlen;
  std::memcpy(&jlen, bytes.data() + 12, 8);
  if (20 + jlen > bytes.size()) throw std::runtime_error("checkpoint " + path + ": truncated header");

  Checkpoint ck;
  ck.header = nlohmann::json::parse(bytes.substr(20, jlen));
  size_t off = 20 + jlen;
  for (const auto& entry : ck.header.at("tensors")) {
    std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    size_t n = static_cast<size_t>(Tensor::numel_of(shape));
    if (off + n * sizeof(float) > bytes.size())
      throw std::runtime_error("checkpoint " + path + ": truncated payload at tensor " +
                               entry.at("name").get<std::string>());
    Tensor t(shape);
    std::memcpy(t.data.data(), bytes.data() + off, n * sizeof(float));
    off += n * sizeof(float);
    ck.names.push_back(entry.at("name").get<std::string>());
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

inline nlohmann::json spec_to_json(const ModelSpec& s) {
  return {{"arch", s.arch},     {"input_hw", s.input_hw},   {"channels", s.channels},
          {"classes", s.classes}, {"init_seed", s.init_seed}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.arch = j.at("arch").get<std::string>();
  s.input_hw = j.at("input_hw").get<int>();
  s.channels = j.at("channels").get<int>();
  s.classes = j.at("classes").get<int>();
  s.init_seed = j.at("init_seed").get<uint64_t>();
  return s;
}

inline void save_classifier(const Classifier& c, const std::string& path, nlohmann::json meta = {}) {
  nlohmann::json header = {{"kind", "classifier"}, {"spec", spec_to_json(c.spec)}, {"trained", c.trained}};
  if (!meta.is_null() && !meta.empty()) header["meta"] = meta;
  save_checkpoint(path, header, c.param_names, c.params);
}

inline Classifier load_classifier(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.header.at("kind").get<std::string>() != "classifier")
    throw std::runtime_error("checkpoint " + path + ": not a classifier");
  Classifier c = build(spec_from_json(ck.header.at("spec")));
  if (ck.tensors.size() != c.params.size())
    throw std::runtime_error("checkpoint " + path + ": tensor count mismatch");
  for (size_t i = 0; i < c.params.size(); ++i) {
    if (ck.names[i] != c.param_names[i] || ck.tensors[i].shape != c.params[i].shape)
      throw std::runtime_error("checkpoint " + path + ": tensor " + ck.names[i] + " does not match architecture");
    c.params[i] = std::move(ck.tensors[i]);
  }
  c.trained = ck.header.value("trained", false);
  return c;
}

}  // namespace aitl
