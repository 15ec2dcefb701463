#pragma once

#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "peernet/model.hpp"

namespace peernet {

// Checkpoints are a flat little-endian f64 buffer (<prefix>.bin) plus a JSON
// manifest (<prefix>.json) mapping parameter names to offsets and shapes.
inline void save_checkpoint(AssembledModel& model, const std::string& prefix) {
  std::ofstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot open '" + prefix + ".bin' for writing");
  nlohmann::json manifest;
  manifest["params"] = nlohmann::json::array();
  i64 offset = 0;
  for (Parameter* p : model.parameters()) {
    const Shape5& s = p->value.shape();
    manifest["params"].push_back({{"name", p->name},
                                  {"offset", offset},
                                  {"shape", {s.n, s.t, s.h, s.w, s.c}}});
    bin.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    offset += p->value.size();
  }
  manifest["total"] = offset;
  if (!bin.good()) throw IoError("write to '" + prefix + ".bin' failed");
  std::ofstream mf(prefix + ".json");
  if (!mf) throw IoError("cannot open '" + prefix + ".json' for writing");
  mf << manifest.dump(2) << "\n";
}

inline void load_checkpoint(AssembledModel& model, const std::string& prefix) {
  std::ifstream mf(prefix + ".json");
  if (!mf) throw IoError("cannot open checkpoint manifest '" + prefix + ".json'");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad checkpoint manifest: ") + e.what());
  }
  std::map<std::string, std::pair<i64, Shape5>> index;
  for (const auto& entry : manifest["params"]) {
    Shape5 s{entry["shape"][0], entry["shape"][1], entry["shape"][2], entry["shape"][3],
             entry["shape"][4]};
    index[entry["name"]] = {entry["offset"].get<i64>(), s};
  }
  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot open checkpoint data '" + prefix + ".bin'");
  auto params = model.parameters();
  if (index.size() != params.size()) {
    throw IoError("checkpoint holds " + std::to_string(index.size()) + " parameters, model has " +
                  std::to_string(params.size()));
  }
  for (Parameter* p : params) {
    auto it = index.find(p->name);
    if (it == index.end()) throw IoError("checkpoint missing parameter '" + p->name + "'");
    if (!(it->second.second == p->value.shape())) {
      throw IoError("checkpoint shape mismatch for '" + p->name + "'");
    }
    bin.seekg(static_cast<std::streamoff>(it->second.first * static_cast<i64>(sizeof(double))));
    bin.read(reinterpret_cast<char*>(p->value.data()),
             static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    if (!bin.good()) throw IoError("short read from '" + prefix + ".bin'");
  }
}

inline i64 checkpoint_total(const std::string& prefix) {
  std::ifstream mf(prefix + ".json");
  if (!mf) throw IoError("cannot open checkpoint manifest '" + prefix + ".json'");
  nlohmann::json manifest;
  mf >> manifest;
  return manifest["total"].get<i64>();
}

}  // namespace peernet
