#pragma once

#include <map>
#include <optional>
#include <set>
#include <utility>
#include <vector>

#include "peernet/attention.hpp"
#include "peernet/table.hpp"

namespace peernet {

enum class LossKind { SoftmaxCE, SigmoidBCE };

struct ModelConfig {
  double width_scale = 1.0;
  double depth_scale = 1.0;
  int time = 4;
  int height = 16;
  int width = 16;
  int batch = 4;
  int num_classes = 0;      // 0: take from the table
  int object_channels = 0;  // 0: take from the object row
  AttentionMode attention_mode = AttentionMode::None;
  bool use_object = true;   // false drops object edges and object peers
  LossKind loss = LossKind::SoftmaxCE;
  std::uint64_t seed = 1;
};

struct ModelInputs {
  Tensor rgb;     // (N,T,H,W,3)
  Tensor flow;    // (N,T,H,W,2)
  Tensor object;  // (N,T,H,W,C_O), one-hot per pixel
};

struct ModelEdge {
  int src = -1;
  int dst = -1;
  Parameter w;                       // connection logit, gate = sigmoid(w)
  int pool_factor = 1;
  std::optional<ConvLayer> adapter;  // 1x1 conv when channels differ
  EdgeAttention attn;

  void collect_params(std::vector<Parameter*>& out) {
    out.push_back(&w);
    if (adapter) {
      out.push_back(&adapter->w);
      out.push_back(&adapter->b);
    }
    attn.collect_params(out);
  }
};

class AssembledModel {
public:
  ArchitectureTable table;  // scaled copy (channels after width_scale)
  ModelConfig config;
  int num_classes = 0;
  std::vector<Block> blocks;             // aligned with table rows
  std::vector<int> in_hw, out_hw;        // per-block spatial extents
  std::map<std::pair<int, int>, ModelEdge> edges;
  Parameter cls_w, cls_b;

  const Block& block(int index) const { return blocks.at(static_cast<size_t>(index)); }
  Block& block(int index) { return blocks.at(static_cast<size_t>(index)); }

  int final_block() const {
    int best = -1, best_level = -1;
    for (const auto& b : blocks) {
      if (b.spec.level > best_level || (b.spec.level == best_level && b.spec.index > best)) {
        best = b.spec.index;
        best_level = b.spec.level;
      }
    }
    return best;
  }

  // Stable order: block params, then per-edge params in (src,dst) key
  // order, then the classifier.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& b : blocks) b.collect_params(out);
    for (auto& [key, e] : edges) e.collect_params(out);
    out.push_back(&cls_w);
    out.push_back(&cls_b);
    return out;
  }

  i64 parameter_count() {
    i64 total = 0;
    for (Parameter* p : parameters()) total += p->size();
    return total;
  }

  // Structural view used by pruning, rendering and the cost model.
  ConnectivityGraph graph_view() const {
    ConnectivityGraph g;
    for (const auto& b : blocks) g.blocks.push_back(b.spec);
    for (const auto& [key, e] : edges) {
      GraphEdge ge;
      ge.src = e.src;
      ge.dst = e.dst;
      ge.weight = e.w.value[0];
      ge.attention.mode = e.attn.mode;
      ge.attention.peer = e.attn.peer;
      if (e.attn.h) {
        const Tensor& h = e.attn.h->value;
        ge.attention.h.assign(h.data(), h.data() + h.size());
      }
      g.edges.push_back(std::move(ge));
    }
    return g;
  }

  // Blocks that can influence the final logits given the current edges.
  std::vector<bool> live_blocks() const {
    std::vector<bool> live(blocks.size(), false);
    live[static_cast<size_t>(final_block())] = true;
    // walk levels downward; edges and attention peers both count as uses
    auto order = topo_order(graph_view());
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if (!live[static_cast<size_t>(*it)]) continue;
      for (const auto& [key, e] : edges) {
        if (e.dst != *it) continue;
        live[static_cast<size_t>(e.src)] = true;
        if (e.attn.mode == AttentionMode::Self) live[static_cast<size_t>(e.src)] = true;
        if (e.attn.mode == AttentionMode::Peer && e.attn.peer >= 0)
          live[static_cast<size_t>(e.attn.peer)] = true;
        if (e.attn.mode == AttentionMode::OneShot)
          for (int p : e.attn.peers) live[static_cast<size_t>(p)] = true;
      }
    }
    return live;
  }

  TensorValue adapt_edge(Tape* tape, ModelEdge& e, const TensorValue& x) {
    TensorValue y = x;
    if (e.pool_factor > 1) y = avg_pool_spatial(y, e.pool_factor);
    if (e.adapter) y = apply_conv(tape, *e.adapter, y);
    return y;
  }

  TensorValue forward(Tape* tape, const ModelInputs& in) {
    validate_inputs(in);
    std::vector<std::optional<TensorValue>> outs(blocks.size());
    std::vector<std::optional<TensorValue>> gaps(blocks.size());
    auto gap_of = [&](int idx) -> TensorValue {
      if (!gaps[static_cast<size_t>(idx)]) {
        gaps[static_cast<size_t>(idx)] = gap_spatial(*outs[static_cast<size_t>(idx)]);
      }
      return *gaps[static_cast<size_t>(idx)];
    };

    std::vector<bool> live = live_blocks();
    for (int idx : topo_order(graph_view())) {
      if (!live[static_cast<size_t>(idx)]) continue;
      Block& b = block(idx);
      if (is_input_kind(b.spec.kind)) {
        const Tensor* src = nullptr;
        switch (b.spec.kind) {
          case BlockKind::InputRgb: src = &in.rgb; break;
          case BlockKind::InputFlow: src = &in.flow; break;
          case BlockKind::InputObject: src = &in.object; break;
          default: break;
        }
        outs[static_cast<size_t>(idx)] = block_forward(tape, b, constant(*src));
        continue;
      }
      TensorValue fused = fuse_inputs(tape, idx, outs, gap_of);
      outs[static_cast<size_t>(idx)] = block_forward(tape, b, fused);
    }

    TensorValue pooled = gap_spatial(*outs[static_cast<size_t>(final_block())]);
    TensorValue frame_logits = fc_per_frame(pooled, use_param(tape, cls_w), use_param(tape, cls_b));
    return max_over_time(frame_logits);
  }

  // Weighted attention-modulated summation over the incoming connections.
  template <typename GapFn>
  TensorValue fuse_inputs(Tape* tape, int dst, std::vector<std::optional<TensorValue>>& outs,
                          GapFn&& gap_of) {
    std::optional<TensorValue> acc;
    for (auto& [key, e] : edges) {
      if (e.dst != dst) continue;
      if (!outs[static_cast<size_t>(e.src)]) {
        throw ConfigError("fuse: block " + std::to_string(e.src) + " output missing");
      }
      TensorValue adapted = adapt_edge(tape, e, *outs[static_cast<size_t>(e.src)]);
      TensorValue attended = adapted;
      switch (e.attn.mode) {
        case AttentionMode::None:
          break;
        case AttentionMode::Static:
          attended = channel_scale(adapted, sigmoid(use_param(tape, *e.attn.static_logits)));
          break;
        case AttentionMode::Self:
        case AttentionMode::Peer: {
          int k = e.attn.mode == AttentionMode::Self ? e.src : e.attn.peer;
          TensorValue a = sigmoid(fc_per_frame(gap_of(k), use_param(tape, e.attn.head->w),
                                               use_param(tape, e.attn.head->b)));
          attended = channel_scale(adapted, a);
          break;
        }
        case AttentionMode::OneShot: {
          std::vector<TensorValue> projected;
          projected.reserve(e.attn.peers.size());
          for (size_t p = 0; p < e.attn.peers.size(); ++p) {
            projected.push_back(
                fc_per_frame(gap_of(e.attn.peers[p]), use_param(tape, e.attn.projectors[p])));
          }
          TensorValue mixed = one_shot_peer_mix(use_param(tape, *e.attn.h), projected);
          TensorValue a = sigmoid(fc_per_frame(mixed, use_param(tape, e.attn.head->w),
                                               use_param(tape, e.attn.head->b)));
          attended = channel_scale(adapted, a);
          break;
        }
      }
      TensorValue term = scalar_scale(sigmoid(use_param(tape, e.w)), attended);
      acc = acc ? add(*acc, term) : term;
    }
    if (!acc) throw ConfigError("conv block " + std::to_string(dst) + " has no incoming edges");
    return *acc;
  }

  // Drops edges below the sigmoid(w) threshold, keeping each block's
  // strongest incoming edge.
  void prune_connections(double threshold = 0.2) {
    ConnectivityGraph pruned = peernet::prune_connections(graph_view(), threshold);
    std::set<std::pair<int, int>> keep;
    for (const auto& e : pruned.edges) keep.insert({e.src, e.dst});
    for (auto it = edges.begin(); it != edges.end();) {
      if (!keep.count(it->first))
        it = edges.erase(it);
      else
        ++it;
    }
  }

  // Collapses every OneShot binding to Peer(argmax h) with the equivalent
  // head: the winning projector folded into the shared head so the pruned
  // edge computes exactly the saturated mixture's attention.
  void prune_attention() {
    for (auto& [key, e] : edges) {
      if (e.attn.mode != AttentionMode::OneShot) continue;
      const Tensor& hv = e.attn.h->value;
      std::vector<double> h(hv.data(), hv.data() + hv.size());
      int k = argmax_peer(h, e.attn.peers);
      size_t pos = 0;
      while (e.attn.peers[pos] != k) ++pos;

      const Tensor& P = e.attn.projectors[pos].value;  // (1,1,1,C_k,C_i)
      const Tensor& W = e.attn.head->w.value;          // (1,1,1,C_i,C_i)
      i64 ck = P.shape().w, ci = P.shape().c, co = W.shape().c;
      Tensor folded(Shape5{1, 1, 1, ck, co});
      for (i64 a = 0; a < ck; ++a)
        for (i64 b = 0; b < co; ++b) {
          double acc = 0.0;
          for (i64 m = 0; m < ci; ++m) acc += P[a * ci + m] * W[m * co + b];
          folded[a * co + b] = acc;
        }
      std::string prefix = "e" + std::to_string(e.src) + "-" + std::to_string(e.dst) + ".attn";
      AttentionHead head;
      head.w = Parameter(prefix + ".w", std::move(folded));
      head.b = Parameter(prefix + ".b", e.attn.head->b.value);
      e.attn.mode = AttentionMode::Peer;
      e.attn.peer = k;
      e.attn.head = std::move(head);
      e.attn.projectors.clear();
      e.attn.h.reset();
      e.attn.peers.clear();
    }
  }

  // Rebinds one edge's attention; used by experiments and tests.
  void set_edge_attention(int src, int dst, AttentionMode mode, int peer = -1) {
    auto it = edges.find({src, dst});
    if (it == edges.end()) {
      throw ConfigError("set_edge_attention: no edge (" + std::to_string(src) + "," +
                        std::to_string(dst) + ")");
    }
    Rng rng = Rng(config.seed).fork(30000 + static_cast<std::uint64_t>(src) * 997 +
                                    static_cast<std::uint64_t>(dst));
    it->second.attn = make_edge_attention(src, dst, mode, peer, rng);
  }

  void validate_inputs(const ModelInputs& in) const {
    std::vector<bool> live = live_blocks();
    i64 batch = -1;
    for (const auto& b : blocks) {
      if (!is_input_kind(b.spec.kind) || !live[static_cast<size_t>(b.spec.index)]) continue;
      const Tensor* src = nullptr;
      const char* name = kind_name(b.spec.kind);
      switch (b.spec.kind) {
        case BlockKind::InputRgb: src = &in.rgb; break;
        case BlockKind::InputFlow: src = &in.flow; break;
        case BlockKind::InputObject: src = &in.object; break;
        default: break;
      }
      if (!src || src->empty()) {
        throw ConfigError(std::string("missing ") + name + " input required by the architecture");
      }
      const Shape5& s = src->shape();
      if (s.t != config.time || s.h != config.height || s.w != config.width ||
          s.c != b.in_channels) {
        throw ShapeError(std::string(name) + " input shape " + s.str() + " does not match model (T=" +
                         std::to_string(config.time) + ",H=" + std::to_string(config.height) +
                         ",W=" + std::to_string(config.width) + ",C=" + std::to_string(b.in_channels) +
                         ")");
      }
      if (batch < 0) batch = s.n;
      if (s.n != batch) throw ShapeError("modalities disagree on batch size");
      if (b.spec.kind == BlockKind::InputObject) check_one_hot(*src);
    }
  }

  static void check_one_hot(const Tensor& mask) {
    const Shape5& s = mask.shape();
    for (i64 n = 0; n < s.n; ++n)
      for (i64 t = 0; t < s.t; ++t)
        for (i64 h = 0; h < s.h; ++h)
          for (i64 w = 0; w < s.w; ++w) {
            double sum = 0.0;
            for (i64 c = 0; c < s.c; ++c) sum += mask.at(n, t, h, w, c);
            if (std::abs(sum - 1.0) > 1e-9) {
              throw ConfigError("object input is not one-hot per pixel");
            }
          }
  }

  EdgeAttention make_edge_attention(int src, int dst, AttentionMode mode, int explicit_peer,
                                    Rng& rng) {
    EdgeAttention a;
    a.mode = mode;
    std::string prefix = "e" + std::to_string(src) + "-" + std::to_string(dst) + ".attn";
    const int ci = block(dst).in_channels;
    switch (mode) {
      case AttentionMode::None:
        break;
      case AttentionMode::Static:
        a.static_logits = Parameter(prefix + ".static", Tensor(Shape5{1, 1, 1, 1, ci}));
        break;
      case AttentionMode::Self:
        a.head = make_attention_head(prefix, block(src).out_channels, ci, rng);
        break;
      case AttentionMode::Peer: {
        int k = explicit_peer;
        if (k < 0) {
          // Default peer: the object input block when available (the
          // cross-modal case the architecture is built around), else the
          // edge source.
          k = src;
          if (config.use_object) {
            for (const auto& b : blocks) {
              if (b.spec.kind == BlockKind::InputObject && b.spec.level < block(dst).spec.level) {
                k = b.spec.index;
                break;
              }
            }
          }
        }
        a.peer = k;
        a.head = make_attention_head(prefix, block(k).out_channels, ci, rng);
        break;
      }
      case AttentionMode::OneShot: {
        a.peers = attention_peers(dst);
        if (a.peers.empty()) throw ConfigError("one-shot attention: empty peer set");
        for (size_t p = 0; p < a.peers.size(); ++p) {
          i64 cp = block(a.peers[p]).out_channels;
          Tensor w(Shape5{1, 1, 1, cp, ci});
          for (i64 i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, 0.01);
          a.projectors.emplace_back(prefix + ".proj" + std::to_string(a.peers[p]), std::move(w));
        }
        a.head = make_attention_head(prefix, ci, ci, rng);
        a.h = Parameter(prefix + ".h", Tensor(Shape5{1, 1, 1, 1, static_cast<i64>(a.peers.size())}));
        break;
      }
    }
    return a;
  }

  // Legal attention sources for edges into `dst`; object blocks drop out
  // when the object modality is disabled.
  std::vector<int> attention_peers(int dst) const {
    std::vector<BlockSpec> specs;
    for (const auto& b : blocks) specs.push_back(b.spec);
    std::vector<int> peers = peer_set(specs, dst);
    if (!config.use_object) {
      std::erase_if(peers, [&](int p) {
        return blocks[static_cast<size_t>(p)].spec.kind == BlockKind::InputObject;
      });
    }
    return peers;
  }
};

// Builds the model: scaled blocks, resolution bookkeeping, adapters,
// connection gates and attention bindings.
inline AssembledModel build_model(const ArchitectureTable& table, const ModelConfig& config) {
  AssembledModel m;
  m.config = config;
  m.num_classes = config.num_classes > 0 ? config.num_classes : table.num_classes;
  if (m.num_classes <= 0) throw ConfigError("build_model: num_classes not set");

  Rng root(config.seed);

  // Scale channel widths; the object row follows the configured channel
  // count instead of the width scale (its width is the number of object
  // classes, not a filter count).
  m.table = table;
  for (auto& r : m.table.rows) {
    if (r.kind == BlockKind::InputObject) {
      if (config.object_channels > 0) r.channels = config.object_channels;
    } else {
      r.channels = std::max<int>(4, static_cast<int>(std::llround(r.channels * config.width_scale)));
    }
  }

  for (const auto& r : m.table.rows) {
    BlockSpec spec;
    spec.index = r.index;
    spec.level = r.level;
    spec.channels = r.channels;
    spec.temporal_dilation = r.dilation;
    spec.spatial_stride = r.stride;
    spec.kind = r.kind;
    Rng brng = root.fork(100 + static_cast<std::uint64_t>(r.index));
    if (is_input_kind(r.kind)) {
      int modality_channels = r.kind == BlockKind::InputRgb    ? 3
                              : r.kind == BlockKind::InputFlow ? 2
                                                               : r.channels;
      m.blocks.push_back(make_input_block(spec, modality_channels, brng));
    } else {
      m.blocks.push_back(make_conv_block(spec, spec.channels, config.depth_scale, brng));
    }
  }

  // Resolution bookkeeping. Every input block must land on the same extent;
  // a conv block consumes the coarsest extent below its level (sources are
  // only ever pooled down, never upsampled).
  m.in_hw.assign(m.blocks.size(), 0);
  m.out_hw.assign(m.blocks.size(), 0);
  auto ceil_div = [](int a, int b) { return (a + b - 1) / b; };
  int level0 = -1;
  for (auto& b : m.blocks) {
    if (!is_input_kind(b.spec.kind)) continue;
    int hw;
    if (b.spec.kind == BlockKind::InputObject) {
      hw = ceil_div(config.height, 4);
    } else {
      hw = ceil_div(ceil_div(config.height, 2), 2);
    }
    if (config.height != config.width) {
      throw ConfigError("build_model: square spatial inputs required");
    }
    m.in_hw[static_cast<size_t>(b.spec.index)] = config.height;
    m.out_hw[static_cast<size_t>(b.spec.index)] = hw;
    if (level0 < 0) level0 = hw;
    if (hw != level0) throw ConfigError("build_model: input blocks disagree on output extent");
  }
  int max_level = 0;
  for (auto& b : m.blocks) max_level = std::max(max_level, b.spec.level);
  for (int level = 1; level <= max_level; ++level) {
    int coarsest = std::numeric_limits<int>::max();
    for (auto& b : m.blocks) {
      if (b.spec.level < level) coarsest = std::min(coarsest, m.out_hw[static_cast<size_t>(b.spec.index)]);
    }
    for (auto& b : m.blocks) {
      if (b.spec.level != level) continue;
      m.in_hw[static_cast<size_t>(b.spec.index)] = coarsest;
      m.out_hw[static_cast<size_t>(b.spec.index)] = std::max(1, ceil_div(coarsest, b.spec.spatial_stride));
    }
  }

  // Edges with gates, adapters and attention.
  for (const auto& r : m.table.rows) {
    for (int src : r.inputs) {
      if (!config.use_object &&
          m.blocks[static_cast<size_t>(src)].spec.kind == BlockKind::InputObject) {
        continue;
      }
      ModelEdge e;
      e.src = src;
      e.dst = r.index;
      std::string prefix = "e" + std::to_string(src) + "-" + std::to_string(r.index);
      e.w = Parameter(prefix + ".w", Tensor::scalar(0.0));

      int src_hw = m.out_hw[static_cast<size_t>(src)];
      int dst_hw = m.in_hw[static_cast<size_t>(r.index)];
      if (src_hw < dst_hw) {
        throw ConfigError("edge (" + std::to_string(src) + "," + std::to_string(r.index) +
                          ") would need upsampling (" + std::to_string(src_hw) + " -> " +
                          std::to_string(dst_hw) + ")");
      }
      if (src_hw % dst_hw != 0) {
        throw ConfigError("edge (" + std::to_string(src) + "," + std::to_string(r.index) +
                          "): source extent " + std::to_string(src_hw) +
                          " not divisible by destination extent " + std::to_string(dst_hw));
      }
      e.pool_factor = src_hw / dst_hw;

      int c_src = m.blocks[static_cast<size_t>(src)].out_channels;
      int c_dst = m.blocks[static_cast<size_t>(r.index)].in_channels;
      if (c_src != c_dst) {
        Rng arng = root.fork(10000 + static_cast<std::uint64_t>(src) * 997 +
                             static_cast<std::uint64_t>(r.index));
        e.adapter = detail::make_conv(prefix + ".adapt", 1, 1, 1, c_src, c_dst, 1, 1, arng);
      }

      Rng attn_rng = root.fork(20000 + static_cast<std::uint64_t>(src) * 997 +
                               static_cast<std::uint64_t>(r.index));
      e.attn = m.make_edge_attention(src, r.index, config.attention_mode, -1, attn_rng);
      m.edges.emplace(std::make_pair(src, r.index), std::move(e));
    }
  }

  int c_final = m.blocks[static_cast<size_t>(m.final_block())].out_channels;
  Rng crng = root.fork(7);
  Tensor cw(Shape5{1, 1, 1, c_final, m.num_classes});
  double std = std::sqrt(2.0 / static_cast<double>(c_final));
  for (i64 i = 0; i < cw.size(); ++i) cw[i] = crng.normal(0.0, std);
  m.cls_w = Parameter("cls.w", std::move(cw));
  m.cls_b = Parameter("cls.b", Tensor(Shape5{1, 1, 1, 1, m.num_classes}));
  return m;
}

}  // namespace peernet
