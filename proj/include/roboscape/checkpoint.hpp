#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "roboscape/autograd.hpp"
#include "roboscape/common.hpp"

// Checkpoint container shared by the tokenizer and the world model:
// magic + version + JSON index (kind, config echo, name->offset table, blob
// hash) followed by raw little-endian float32 blobs.
namespace rs::ckpt {

inline constexpr char kMagic[4] = {'R', 'S', 'C', 'P'};
inline constexpr uint32_t kVersion = 1;

struct Loaded {
  std::string kind;
  nlohmann::json config;
  std::map<std::string, Tensor<float>> tensors;
};

inline void save(const std::string& path, const std::string& kind, const nlohmann::json& config,
                 const std::vector<std::pair<std::string, const Tensor<float>*>>& blobs) {
  nlohmann::json index;
  index["kind"] = kind;
  index["config"] = config;
  nlohmann::json params = nlohmann::json::array();
  uint64_t offset = 0;
  uint64_t hash = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : blobs) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = t->shape;
    e["offset"] = offset;
    e["bytes"] = static_cast<uint64_t>(t->numel()) * sizeof(float);
    params.push_back(e);
    offset += static_cast<uint64_t>(t->numel()) * sizeof(float);
    hash = fnv1a(t->data.data(), t->data.size() * sizeof(float), hash);
  }
  index["params"] = params;
  index["blob_fnv"] = hex64(hash);
  const std::string js = index.dump();

  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    RS_FAIL_IF(!out, "cannot write checkpoint %s", path.c_str());
    out.write(kMagic, 4);
    const uint32_t ver = kVersion;
    out.write(reinterpret_cast<const char*>(&ver), 4);
    const uint64_t jlen = js.size();
    out.write(reinterpret_cast<const char*>(&jlen), 8);
    out.write(js.data(), static_cast<std::streamsize>(js.size()));
    for (const auto& [name, t] : blobs)
      out.write(reinterpret_cast<const char*>(t->data.data()),
                static_cast<std::streamsize>(t->data.size() * sizeof(float)));
  }
  std::filesystem::rename(tmp, path);
}

inline Loaded load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  RS_FAIL_IF(!in, "cannot open checkpoint %s", path.c_str());
  char magic[4];
  in.read(magic, 4);
  RS_FAIL_IF(in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0,
             "%s is not a checkpoint (bad magic)", path.c_str());
  uint32_t ver = 0;
  in.read(reinterpret_cast<char*>(&ver), 4);
  RS_FAIL_IF(ver != kVersion, "checkpoint version mismatch: file %u, expected %u", ver, kVersion);
  uint64_t jlen = 0;
  in.read(reinterpret_cast<char*>(&jlen), 8);
  RS_FAIL_IF(!in || jlen == 0 || jlen > (1ull << 30), "corrupt checkpoint header in %s",
             path.c_str());
  std::string js(jlen, '\0');
  in.read(js.data(), static_cast<std::streamsize>(jlen));
  RS_FAIL_IF(in.gcount() != static_cast<std::streamsize>(jlen), "truncated checkpoint %s",
             path.c_str());
  nlohmann::json index = nlohmann::json::parse(js);

  Loaded out;
  out.kind = index.at("kind");
  out.config = index.at("config");
  uint64_t hash = 0xcbf29ce484222325ull;
  for (const auto& e : index.at("params")) {
    const std::string name = e.at("name");
    const std::vector<int> shape = e.at("shape");
    Tensor<float> t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    RS_FAIL_IF(in.gcount() != static_cast<std::streamsize>(t.data.size() * sizeof(float)),
               "truncated checkpoint blob '%s' in %s", name.c_str(), path.c_str());
    hash = fnv1a(t.data.data(), t.data.size() * sizeof(float), hash);
    out.tensors.emplace(name, std::move(t));
  }
  RS_FAIL_IF(hex64(hash) != index.at("blob_fnv").get<std::string>(),
             "checkpoint blob hash mismatch in %s", path.c_str());
  return out;
}

inline void save_params(const std::string& path, const std::string& kind,
                        const nlohmann::json& config, ParamStore<float>& ps,
                        const std::vector<std::pair<std::string, const Tensor<float>*>>& extra = {}) {
  std::vector<std::pair<std::string, const Tensor<float>*>> blobs;
  for (size_t i = 0; i < ps.size(); ++i) blobs.emplace_back(ps[i].name, &ps[i].value);
  for (const auto& e : extra) blobs.push_back(e);
  save(path, kind, config, blobs);
}

// Copies named tensors into an already-built store; shapes must match.
inline void restore_params(const Loaded& l, ParamStore<float>& ps) {
  for (size_t i = 0; i < ps.size(); ++i) {
    const auto it = l.tensors.find(ps[i].name);
    RS_FAIL_IF(it == l.tensors.end(), "checkpoint missing param '%s'", ps[i].name.c_str());
    RS_FAIL_IF(it->second.shape != ps[i].value.shape, "checkpoint param '%s' shape mismatch",
               ps[i].name.c_str());
    ps[i].value = it->second;
  }
}

}  // namespace rs::ckpt
