#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "peernet/graph.hpp"

namespace peernet {

struct TableRow {
  int index = 0;
  int level = 0;
  std::vector<int> inputs;
  int channels = 0;
  int dilation = 1;
  int stride = 1;
  BlockKind kind = BlockKind::Conv;
};

struct ArchitectureTable {
  std::vector<TableRow> rows;
  int num_classes = 0;
};

inline BlockKind block_kind_from(const std::string& s) {
  if (s == "input-rgb") return BlockKind::InputRgb;
  if (s == "input-flow") return BlockKind::InputFlow;
  if (s == "input-object") return BlockKind::InputObject;
  if (s == "conv") return BlockKind::Conv;
  throw ConfigError("unknown block kind '" + s + "'");
}

// Parses and validates the JSON architecture description:
//   {"blocks":[{"index","level","inputs","channels","dilation","stride","kind"}],
//    "num_classes": int}
inline ArchitectureTable parse_architecture(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("architecture table is not valid JSON: ") + e.what());
  }
  if (!j.contains("blocks") || !j["blocks"].is_array()) {
    throw ConfigError("architecture table needs a 'blocks' array");
  }
  ArchitectureTable table;
  table.num_classes = j.value("num_classes", 0);

  std::map<int, int> level_of;
  int expected_index = 0;
  for (const auto& row : j["blocks"]) {
    TableRow r;
    try {
      r.index = row.at("index").get<int>();
      r.level = row.at("level").get<int>();
      r.channels = row.at("channels").get<int>();
      r.dilation = row.value("dilation", 1);
      r.stride = row.value("stride", 1);
      r.kind = block_kind_from(row.at("kind").get<std::string>());
      if (row.contains("inputs")) r.inputs = row["inputs"].get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("row " + std::to_string(expected_index) + ": " + e.what());
    }
    std::string where = "row " + std::to_string(r.index) + ": ";
    if (r.index != expected_index) {
      throw ConfigError(where + "indices must be 0..n-1 in order (expected " +
                        std::to_string(expected_index) + ")");
    }
    if (r.channels <= 0) throw ConfigError(where + "channels must be positive");
    if (r.dilation < 1 || r.stride < 1) throw ConfigError(where + "dilation/stride must be >= 1");
    if (is_input_kind(r.kind)) {
      if (r.level != 0) throw ConfigError(where + "input blocks live at level 0");
      if (!r.inputs.empty()) throw ConfigError(where + "input blocks take no block connections");
    } else {
      if (r.level < 1) throw ConfigError(where + "conv blocks need level >= 1");
      if (r.inputs.empty()) throw ConfigError(where + "conv block has no input connections");
      for (int src : r.inputs) {
        auto it = level_of.find(src);
        if (it == level_of.end()) {
          throw ConfigError(where + "input connection " + std::to_string(src) +
                            " references a later or missing block");
        }
        if (it->second >= r.level) {
          throw ConfigError(where + "input connection " + std::to_string(src) +
                            " violates the level rule L(j) < L(i)");
        }
      }
    }
    level_of[r.index] = r.level;
    table.rows.push_back(std::move(r));
    ++expected_index;
  }
  return table;
}

inline ArchitectureTable load_architecture(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open architecture table '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_architecture(text);
}

inline std::vector<BlockSpec> table_blocks(const ArchitectureTable& t) {
  std::vector<BlockSpec> blocks;
  for (const auto& r : t.rows) {
    BlockSpec s;
    s.index = r.index;
    s.level = r.level;
    s.channels = r.channels;
    s.temporal_dilation = r.dilation;
    s.spatial_stride = r.stride;
    s.kind = r.kind;
    blocks.push_back(s);
  }
  return blocks;
}

// Replaces every conv row's inputs with all lower-level blocks, the starting
// point of the one-shot connectivity search.
inline ArchitectureTable densify(const ArchitectureTable& t) {
  ArchitectureTable out = t;
  for (auto& r : out.rows) {
    if (is_input_kind(r.kind)) continue;
    r.inputs.clear();
    for (const auto& other : out.rows) {
      if (other.level < r.level) r.inputs.push_back(other.index);
    }
  }
  return out;
}

// Per-level sums of filter channel counts. Object input blocks carry no
// filters (pooling only), so they do not contribute.
inline std::map<int, i64> level_channel_sums(const ArchitectureTable& t) {
  std::map<int, i64> sums;
  for (const auto& r : t.rows) {
    if (r.kind == BlockKind::InputObject) continue;
    sums[r.level] += r.channels;
  }
  return sums;
}

// Small dense five-stream toy architecture used as the default for training
// experiments. Channels are written at reference scale; train it with
// width_scale 1/8.
inline const char* builtin_toy_table() {
  return R"({
  "num_classes": 16,
  "blocks": [
    {"index": 0, "level": 0, "inputs": [], "channels": 32, "dilation": 1, "stride": 4, "kind": "input-rgb"},
    {"index": 1, "level": 0, "inputs": [], "channels": 32, "dilation": 1, "stride": 4, "kind": "input-flow"},
    {"index": 2, "level": 0, "inputs": [], "channels": 8,  "dilation": 1, "stride": 4, "kind": "input-object"},
    {"index": 3, "level": 1, "inputs": [0, 1, 2], "channels": 32, "dilation": 1, "stride": 1, "kind": "conv"},
    {"index": 4, "level": 1, "inputs": [0, 1, 2], "channels": 32, "dilation": 2, "stride": 1, "kind": "conv"},
    {"index": 5, "level": 2, "inputs": [0, 1, 2, 3, 4], "channels": 64, "dilation": 1, "stride": 2, "kind": "conv"},
    {"index": 6, "level": 3, "inputs": [0, 1, 2, 3, 4, 5], "channels": 128, "dilation": 2, "stride": 2, "kind": "conv"}
  ]
})";
}

}  // namespace peernet
