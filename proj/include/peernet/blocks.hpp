#pragma once

#include <optional>
#include <string>
#include <vector>

#include "peernet/ops.hpp"
#include "peernet/rng.hpp"

namespace peernet {

enum class BlockKind { InputRgb, InputFlow, InputObject, Conv };

inline const char* kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::InputRgb: return "input-rgb";
    case BlockKind::InputFlow: return "input-flow";
    case BlockKind::InputObject: return "input-object";
    case BlockKind::Conv: return "conv";
  }
  return "?";
}

struct BlockSpec {
  int index = 0;
  int level = 0;
  int channels = 0;
  int temporal_dilation = 1;
  int spatial_stride = 1;
  BlockKind kind = BlockKind::Conv;
};

inline bool is_input_kind(BlockKind k) { return k != BlockKind::Conv; }

struct ConvLayer {
  Parameter w;  // (kt,kh,kw,cin,cout) packed into Shape5
  Parameter b;  // (1,1,1,1,cout)
  int stride = 1;
  int dilation = 1;
};

// Picks parameter values on/off the tape; evaluation without a tape skips
// gradient recording entirely.
inline TensorValue use_param(Tape* tape, Parameter& p) {
  return tape ? watch(*tape, p) : constant(p.value);
}

inline TensorValue apply_conv(Tape* tape, ConvLayer& layer, const TensorValue& x) {
  return conv3d(x, use_param(tape, layer.w), use_param(tape, layer.b), layer.stride, layer.dilation);
}

// One residual module. The (2+1)D variant runs the temporal convolution
// first, then the 3x3 spatial convolution, then a pointwise convolution;
// the 2-D variant is a 1x1 / 3x3 / 1x1 bottleneck without expansion.
struct ResidualModule {
  bool spatiotemporal = false;
  ConvLayer c1, c2, c3;
  std::optional<ConvLayer> shortcut;
};

struct Block {
  BlockSpec spec;
  int in_channels = 0;
  int out_channels = 0;

  // Input-block layers (rgb: spatial + temporal conv; flow: spatial conv).
  std::optional<ConvLayer> in_spatial;
  std::optional<ConvLayer> in_temporal;
  int pool = 0;

  std::vector<ResidualModule> modules;

  void collect_params(std::vector<Parameter*>& out) {
    auto push = [&out](ConvLayer& l) {
      out.push_back(&l.w);
      out.push_back(&l.b);
    };
    if (in_spatial) push(*in_spatial);
    if (in_temporal) push(*in_temporal);
    for (auto& m : modules) {
      push(m.c1);
      push(m.c2);
      push(m.c3);
      if (m.shortcut) push(*m.shortcut);
    }
  }

  i64 param_count() {
    std::vector<Parameter*> ps;
    collect_params(ps);
    i64 total = 0;
    for (auto* p : ps) total += p->size();
    return total;
  }

  // Conv layers on the residual path, the count the level depths refer to.
  int residual_conv_layers() const { return static_cast<int>(modules.size()) * 3; }
};

namespace detail {

inline ConvLayer make_conv(const std::string& name, i64 kt, i64 kh, i64 kw, i64 cin, i64 cout,
                           int stride, int dilation, Rng& rng) {
  ConvLayer layer;
  layer.stride = stride;
  layer.dilation = dilation;
  Tensor w(Shape5{kt, kh, kw, cin, cout});
  double std = std::sqrt(2.0 / static_cast<double>(kt * kh * kw * cin));
  for (i64 i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, std);
  layer.w = Parameter(name + ".w", std::move(w));
  layer.b = Parameter(name + ".b", Tensor(Shape5{1, 1, 1, 1, cout}));
  return layer;
}

// Midplane width of the factorized spatiotemporal convolution, chosen so the
// temporal+spatial pair costs about as much as the full 3x3x3 kernel it
// replaces (t=3 temporal taps, d=3 spatial).
inline i64 midplanes(i64 cin, i64 cout) {
  return std::max<i64>(1, (27 * cin * cout) / (9 * cin + 3 * cout));
}

inline ResidualModule make_module(const std::string& name, bool spatiotemporal, i64 cin, i64 cout,
                                  int stride, int dilation, Rng& rng) {
  ResidualModule m;
  m.spatiotemporal = spatiotemporal;
  if (spatiotemporal) {
    i64 mid = midplanes(cin, cout);
    m.c1 = make_conv(name + ".t", 3, 1, 1, cin, mid, 1, dilation, rng);
    m.c2 = make_conv(name + ".s", 1, 3, 3, mid, cout, stride, 1, rng);
    m.c3 = make_conv(name + ".p", 1, 1, 1, cout, cout, 1, 1, rng);
  } else {
    m.c1 = make_conv(name + ".r", 1, 1, 1, cin, cout, 1, 1, rng);
    m.c2 = make_conv(name + ".s", 1, 3, 3, cout, cout, stride, 1, rng);
    m.c3 = make_conv(name + ".p", 1, 1, 1, cout, cout, 1, 1, rng);
  }
  if (cin != cout || stride != 1) {
    m.shortcut = make_conv(name + ".sc", 1, 1, 1, cin, cout, stride, 1, rng);
  }
  return m;
}

}  // namespace detail

// Input blocks downsample spatially by 4: rgb/flow with a strided 7x7 conv
// plus a 2x2 max pool, the object modality with a single 4x4 max pool and no
// learnable parameters.
inline Block make_input_block(const BlockSpec& spec, int modality_channels, Rng& rng) {
  if (!is_input_kind(spec.kind)) {
    throw ConfigError("make_input_block: block " + std::to_string(spec.index) + " is not an input kind");
  }
  Block b;
  b.spec = spec;
  b.in_channels = modality_channels;
  std::string prefix = "b" + std::to_string(spec.index);
  switch (spec.kind) {
    case BlockKind::InputRgb:
      b.in_spatial = detail::make_conv(prefix + ".in_s", 1, 7, 7, modality_channels, spec.channels, 2, 1, rng);
      b.in_temporal =
          detail::make_conv(prefix + ".in_t", 5, 1, 1, spec.channels, spec.channels, 1, spec.temporal_dilation, rng);
      b.pool = 2;
      b.out_channels = spec.channels;
      break;
    case BlockKind::InputFlow:
      b.in_spatial = detail::make_conv(prefix + ".in_s", 1, 7, 7, modality_channels, spec.channels, 2, 1, rng);
      b.pool = 2;
      b.out_channels = spec.channels;
      break;
    case BlockKind::InputObject:
      b.pool = 4;
      b.out_channels = modality_channels;
      break;
    default:
      break;
  }
  return b;
}

// Residual block: alternating (2+1)D and 2-D modules, starting
// spatiotemporal. Module counts at depth_scale 1 are 3/4/6/3 for levels 1-4
// (9/12/18/9 conv layers); the spatial stride is applied in the first module.
inline Block make_conv_block(const BlockSpec& spec, int in_channels, double depth_scale, Rng& rng) {
  if (spec.kind != BlockKind::Conv) {
    throw ConfigError("make_conv_block: block " + std::to_string(spec.index) + " is not a conv block");
  }
  static constexpr int kBaseModules[4] = {3, 4, 6, 3};
  if (spec.level < 1 || spec.level > 4) {
    throw ConfigError("make_conv_block: unknown level " + std::to_string(spec.level) +
                      " for block " + std::to_string(spec.index));
  }
  int count = std::max(1, static_cast<int>(std::llround(kBaseModules[spec.level - 1] * depth_scale)));
  Block b;
  b.spec = spec;
  b.in_channels = in_channels;
  b.out_channels = spec.channels;
  std::string prefix = "b" + std::to_string(spec.index);
  int cin = in_channels;
  for (int i = 0; i < count; ++i) {
    int stride = (i == 0) ? spec.spatial_stride : 1;
    bool spatiotemporal = (i % 2 == 0);
    b.modules.push_back(detail::make_module(prefix + ".m" + std::to_string(i), spatiotemporal, cin,
                                            spec.channels, stride, spec.temporal_dilation, rng));
    cin = spec.channels;
  }
  return b;
}

inline TensorValue block_forward(Tape* tape, Block& b, const TensorValue& x) {
  if (x.shape().c != b.in_channels) {
    throw ShapeError("block " + std::to_string(b.spec.index) + ": input channels " +
                     std::to_string(x.shape().c) + " != expected " + std::to_string(b.in_channels));
  }
  if (is_input_kind(b.spec.kind)) {
    TensorValue y = x;
    if (b.in_spatial) y = relu(apply_conv(tape, *b.in_spatial, y));
    if (b.in_temporal) y = relu(apply_conv(tape, *b.in_temporal, y));
    return max_pool_spatial(y, b.pool);
  }
  TensorValue y = x;
  for (auto& m : b.modules) {
    TensorValue branch = relu(apply_conv(tape, m.c1, y));
    branch = relu(apply_conv(tape, m.c2, branch));
    branch = apply_conv(tape, m.c3, branch);
    TensorValue sc = m.shortcut ? apply_conv(tape, *m.shortcut, y) : y;
    y = relu(add(branch, sc));
  }
  return y;
}

}  // namespace peernet
