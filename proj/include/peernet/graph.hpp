#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <vector>

#include "peernet/blocks.hpp"

namespace peernet {

enum class AttentionMode { None, Static, Self, Peer, OneShot };

inline const char* attention_mode_name(AttentionMode m) {
  switch (m) {
    case AttentionMode::None: return "none";
    case AttentionMode::Static: return "static";
    case AttentionMode::Self: return "self";
    case AttentionMode::Peer: return "peer";
    case AttentionMode::OneShot: return "oneshot";
  }
  return "?";
}

inline AttentionMode attention_mode_from(const std::string& s) {
  if (s == "none") return AttentionMode::None;
  if (s == "static") return AttentionMode::Static;
  if (s == "self") return AttentionMode::Self;
  if (s == "peer") return AttentionMode::Peer;
  if (s == "oneshot") return AttentionMode::OneShot;
  throw ConfigError("unknown attention mode '" + s + "'");
}

// Structural view of an edge's attention configuration. Learnable tensors
// live in the assembled model; the graph keeps just enough (current h
// values, selected peer) to drive pruning decisions and rendering.
struct AttentionBinding {
  AttentionMode mode = AttentionMode::None;
  int peer = -1;                 // Peer mode: the chosen block k
  std::vector<double> h;         // OneShot: mixing logits, aligned with peer_set order
};

struct GraphEdge {
  int src = -1;
  int dst = -1;
  double weight = 0.0;           // raw w_ji; the effective gate is sigmoid(w)
  AttentionBinding attention;
};

struct ConnectivityGraph {
  std::vector<BlockSpec> blocks;
  std::vector<GraphEdge> edges;

  const BlockSpec* find_block(int index) const {
    for (const auto& b : blocks)
      if (b.index == index) return &b;
    return nullptr;
  }
};

inline double sigmoid_value(double x) { return detail::stable_sigmoid(x); }

// Checks the level rule, index uniqueness and edge uniqueness.
inline void validate_graph(const ConnectivityGraph& g) {
  std::set<int> seen;
  for (const auto& b : g.blocks) {
    if (!seen.insert(b.index).second) {
      throw ConfigError("graph: duplicate block index " + std::to_string(b.index));
    }
    if (is_input_kind(b.kind) && b.level != 0) {
      throw ConfigError("graph: input block " + std::to_string(b.index) + " must be level 0");
    }
    if (b.kind == BlockKind::Conv && b.level < 1) {
      throw ConfigError("graph: conv block " + std::to_string(b.index) + " must have level >= 1");
    }
  }
  std::set<std::pair<int, int>> edge_seen;
  for (const auto& e : g.edges) {
    const BlockSpec* s = g.find_block(e.src);
    const BlockSpec* d = g.find_block(e.dst);
    if (!s || !d) throw ConfigError("graph: edge references missing block");
    if (s->level >= d->level) {
      throw ConfigError("graph: edge (" + std::to_string(e.src) + "," + std::to_string(e.dst) +
                        ") violates the level rule");
    }
    if (!edge_seen.insert({e.src, e.dst}).second) {
      throw ConfigError("graph: duplicate edge (" + std::to_string(e.src) + "," +
                        std::to_string(e.dst) + ")");
    }
  }
}

// All candidate connections (j,i) with L(j) < L(i), in (dst, src) order.
inline std::vector<std::pair<int, int>> valid_edges(const std::vector<BlockSpec>& blocks) {
  std::vector<std::pair<int, int>> out;
  for (const auto& dst : blocks) {
    for (const auto& src : blocks) {
      if (src.level < dst.level) out.emplace_back(src.index, dst.index);
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second < b.second : a.first < b.first;
  });
  return out;
}

// Peer set of any edge into `dst`: every block strictly below the
// destination's level, sorted by index. Independent of the edge source.
inline std::vector<int> peer_set(const std::vector<BlockSpec>& blocks, int dst) {
  const BlockSpec* d = nullptr;
  for (const auto& b : blocks)
    if (b.index == dst) d = &b;
  if (!d) throw ConfigError("peer_set: unknown block " + std::to_string(dst));
  std::vector<int> peers;
  for (const auto& b : blocks)
    if (b.level < d->level) peers.push_back(b.index);
  std::sort(peers.begin(), peers.end());
  return peers;
}

// Ascending level, ties broken by block index; every edge goes forward.
inline std::vector<int> topo_order(const ConnectivityGraph& g) {
  std::vector<const BlockSpec*> ptrs;
  for (const auto& b : g.blocks) ptrs.push_back(&b);
  std::sort(ptrs.begin(), ptrs.end(), [](const BlockSpec* a, const BlockSpec* b) {
    return a->level != b->level ? a->level < b->level : a->index < b->index;
  });
  std::vector<int> order;
  for (const auto* p : ptrs) order.push_back(p->index);
  return order;
}

// Argmax over h with ties broken by the lowest peer block index.
inline int argmax_peer(const std::vector<double>& h, const std::vector<int>& peers) {
  if (h.empty() || h.size() != peers.size()) {
    throw ConfigError("argmax_peer: h size " + std::to_string(h.size()) + " vs " +
                      std::to_string(peers.size()) + " peers");
  }
  size_t best = 0;
  for (size_t i = 1; i < h.size(); ++i) {
    if (h[i] > h[best]) best = i;
  }
  return peers[best];
}

// Drops edges whose effective weight sigmoid(w) falls below the threshold,
// but always keeps the strongest incoming edge of every non-input block so
// no block is orphaned.
inline ConnectivityGraph prune_connections(const ConnectivityGraph& g, double threshold = 0.2) {
  ConnectivityGraph out;
  out.blocks = g.blocks;
  for (const auto& b : g.blocks) {
    if (is_input_kind(b.kind)) continue;
    const GraphEdge* best = nullptr;
    for (const auto& e : g.edges) {
      if (e.dst != b.index) continue;
      if (!best || e.weight > best->weight) best = &e;
    }
    for (const auto& e : g.edges) {
      if (e.dst != b.index) continue;
      if (sigmoid_value(e.weight) >= threshold || &e == best) out.edges.push_back(e);
    }
  }
  return out;
}

// Replaces every OneShot binding with Peer(argmax h). Other modes pass
// through unchanged.
inline ConnectivityGraph prune_attention(const ConnectivityGraph& g) {
  ConnectivityGraph out = g;
  for (auto& e : out.edges) {
    if (e.attention.mode != AttentionMode::OneShot) continue;
    std::vector<int> peers = peer_set(out.blocks, e.dst);
    e.attention.peer = argmax_peer(e.attention.h, peers);
    e.attention.mode = AttentionMode::Peer;
    e.attention.h.clear();
  }
  return out;
}

// DOT rendering. Solid edges are weighted connections labeled with
// sigmoid(w); dashed edges show attention peers; edges leaving an object
// input block are highlighted.
inline std::string to_dot(const ConnectivityGraph& g) {
  std::ostringstream os;
  os << "digraph G {\n";
  if (!g.blocks.empty()) {
    os << "  rankdir=LR;\n  node [shape=box, fontsize=10];\n";
  }
  for (const auto& b : g.blocks) {
    os << "  b" << b.index << " [label=\"" << b.index << ": " << kind_name(b.kind) << " L"
       << b.level << " C" << b.channels << "\"";
    if (b.kind == BlockKind::InputObject) os << ", color=blue";
    os << "];\n";
  }
  for (const auto& e : g.edges) {
    const BlockSpec* s = g.find_block(e.src);
    os << "  b" << e.src << " -> b" << e.dst << " [label=\"" << std::fixed << std::setprecision(3)
       << sigmoid_value(e.weight) << "\"";
    if (s && s->kind == BlockKind::InputObject) os << ", color=blue, penwidth=2";
    os << "];\n";
  }
  for (const auto& e : g.edges) {
    int k = -1;
    if (e.attention.mode == AttentionMode::Peer) k = e.attention.peer;
    if (e.attention.mode == AttentionMode::Self) k = e.src;
    if (e.attention.mode == AttentionMode::OneShot && !e.attention.h.empty()) {
      k = argmax_peer(e.attention.h, peer_set(g.blocks, e.dst));
    }
    if (k >= 0) {
      os << "  b" << k << " -> b" << e.dst << " [style=dashed, color=magenta, constraint=false];\n";
    }
  }
  os << "}\n";
  return os.str();
}

inline void export_dot(const ConnectivityGraph& g, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("export_dot: cannot open '" + path + "' for writing");
  f << to_dot(g);
  if (!f.good()) throw IoError("export_dot: write to '" + path + "' failed");
}

}  // namespace peernet
