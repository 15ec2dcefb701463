#pragma once

#include <optional>
#include <vector>

#include "peernet/blocks.hpp"
#include "peernet/graph.hpp"

namespace peernet {

// Channel-wise attention head: one fully connected layer over the
// spatially pooled peer signal, squashed to (0,1).
struct AttentionHead {
  Parameter w;  // (1,1,1,C_src,C_dst)
  Parameter b;  // (1,1,1,1,C_dst)
};

inline AttentionHead make_attention_head(const std::string& name, i64 c_src, i64 c_dst, Rng& rng) {
  AttentionHead head;
  Tensor w(Shape5{1, 1, 1, c_src, c_dst});
  for (i64 i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, 0.01);
  head.w = Parameter(name + ".w", std::move(w));
  head.b = Parameter(name + ".b", Tensor(Shape5{1, 1, 1, 1, c_dst}));
  return head;
}

// A = sigmoid(f(GAP(x))), computed per frame; values in (0,1).
inline TensorValue attention_vector(Tape* tape, AttentionHead& head, const TensorValue& x) {
  return sigmoid(fc_per_frame(gap_spatial(x), use_param(tape, head.w), use_param(tape, head.b)));
}

// Differentiable soft selection over peers: x = sum_k softmax(h)_k * x_k.
inline TensorValue one_shot_peer_mix(const TensorValue& h, const std::vector<TensorValue>& peers) {
  if (peers.empty()) throw ShapeError("one_shot_peer_mix: no peers");
  return mix(softmax_vec(h), peers);
}

// Per-edge attention state. Static carries input-independent logits; Self
// and Peer carry one head consuming the attention source's native channels;
// OneShot carries a per-peer projection to the destination width, the
// mixing logits h, and a shared head on the mixed vector.
struct EdgeAttention {
  AttentionMode mode = AttentionMode::None;
  int peer = -1;                       // Peer mode
  std::optional<AttentionHead> head;   // Self / Peer / OneShot
  std::vector<Parameter> projectors;   // OneShot, aligned with `peers`
  std::optional<Parameter> h;          // OneShot mixing logits
  std::optional<Parameter> static_logits;
  std::vector<int> peers;              // OneShot peer order (sorted by index)

  void collect_params(std::vector<Parameter*>& out) {
    if (static_logits) out.push_back(&*static_logits);
    if (head) {
      out.push_back(&head->w);
      out.push_back(&head->b);
    }
    for (auto& p : projectors) out.push_back(&p);
    if (h) out.push_back(&*h);
  }
};

}  // namespace peernet
