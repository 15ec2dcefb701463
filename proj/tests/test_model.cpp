#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "helpers.hpp"
#include "peernet/checkpoint.hpp"
#include "peernet/model.hpp"

using namespace peernet;
using testutil::random_tensor;

namespace {

std::string table_path() { return std::string(PEERNET_SOURCE_DIR) + "/tables/assemblenet_pp.json"; }

ModelConfig toy_config(AttentionMode mode = AttentionMode::None, std::uint64_t seed = 3) {
  ModelConfig c;
  c.width_scale = 1.0 / 8.0;
  c.depth_scale = 1.0 / 3.0;
  c.time = 4;
  c.height = 16;
  c.width = 16;
  c.object_channels = 8;
  c.attention_mode = mode;
  c.seed = seed;
  return c;
}

Tensor one_hot_mask(const Shape5& s, Rng& rng) {
  Tensor m(s);
  for (i64 n = 0; n < s.n; ++n)
    for (i64 t = 0; t < s.t; ++t)
      for (i64 h = 0; h < s.h; ++h)
        for (i64 w = 0; w < s.w; ++w) m.at(n, t, h, w, rng.uniform_int(static_cast<int>(s.c))) = 1.0;
  return m;
}

ModelInputs toy_inputs(std::uint64_t seed, int batch = 2) {
  Rng rng(seed);
  ModelInputs in;
  in.rgb = random_tensor(Shape5{batch, 4, 16, 16, 3}, rng, -1.0, 1.0);
  in.flow = random_tensor(Shape5{batch, 4, 16, 16, 2}, rng, -1.0, 1.0);
  in.object = one_hot_mask(Shape5{batch, 4, 16, 16, 8}, rng);
  return in;
}

}  // namespace

TEST_CASE("parse reference architecture table") {
  auto table = load_architecture(table_path());
  REQUIRE(table.rows.size() == 15);
  CHECK(table.num_classes == 157);
  SECTION("row 12") {
    const TableRow& r = table.rows[12];
    CHECK(r.level == 3);
    CHECK(r.inputs == std::vector<int>{4, 11});
    CHECK(r.channels == 256);
    CHECK(r.dilation == 8);
    CHECK(r.stride == 2);
  }
  SECTION("row 14") {
    const TableRow& r = table.rows[14];
    CHECK(r.level == 4);
    CHECK(r.inputs == std::vector<int>{4, 12, 13});
    CHECK(r.channels == 512);
  }
  SECTION("edge count is the sum of the input lists") {
    size_t edges = 0;
    for (const auto& r : table.rows) edges += r.inputs.size();
    CHECK(edges == 46);
  }
  SECTION("per-level channel sums at width 1, object excluded") {
    auto sums = level_channel_sums(table);
    CHECK(sums[0] == 128);
    CHECK(sums[1] == 128);
    CHECK(sums[2] == 256);
    CHECK(sums[3] == 512);
    CHECK(sums[4] == 512);
  }
}

TEST_CASE("parse rejects malformed tables") {
  SECTION("not json") {
    CHECK_THROWS_AS(parse_architecture("not json"), ConfigError);
  }
  SECTION("same-level input connection") {
    const char* bad = R"({"num_classes": 2, "blocks": [
      {"index": 0, "level": 0, "inputs": [], "channels": 8, "kind": "input-rgb"},
      {"index": 1, "level": 1, "inputs": [0], "channels": 8, "kind": "conv"},
      {"index": 2, "level": 1, "inputs": [1], "channels": 8, "kind": "conv"}]})";
    CHECK_THROWS_WITH(parse_architecture(bad), Catch::Matchers::ContainsSubstring("level rule"));
  }
  SECTION("dangling input index") {
    const char* bad = R"({"num_classes": 2, "blocks": [
      {"index": 0, "level": 0, "inputs": [], "channels": 8, "kind": "input-rgb"},
      {"index": 1, "level": 1, "inputs": [0, 9], "channels": 8, "kind": "conv"}]})";
    CHECK_THROWS_WITH(parse_architecture(bad), Catch::Matchers::ContainsSubstring("missing block"));
  }
  SECTION("out-of-order indices") {
    const char* bad = R"({"num_classes": 2, "blocks": [
      {"index": 1, "level": 0, "inputs": [], "channels": 8, "kind": "input-rgb"}]})";
    CHECK_THROWS_AS(parse_architecture(bad), ConfigError);
  }
}

TEST_CASE("build toy model") {
  auto table = load_architecture(table_path());
  AssembledModel m = build_model(table, toy_config());
  SECTION("edges mirror the table input lists") {
    size_t want = 0;
    for (const auto& r : table.rows) want += r.inputs.size();
    CHECK(m.edges.size() == want);
    for (const auto& r : table.rows)
      for (int src : r.inputs) CHECK(m.edges.count({src, r.index}) == 1);
  }
  SECTION("widths follow width_scale with a floor of 4") {
    CHECK(m.block(0).out_channels == 4);   // 32/8
    CHECK(m.block(11).out_channels == 16); // 128/8
    CHECK(m.block(14).out_channels == 64); // 512/8
    CHECK(m.block(4).out_channels == 8);   // object row follows config C_O
  }
  SECTION("object block has zero parameters") {
    CHECK(m.block(4).param_count() == 0);
  }
  SECTION("resolution bookkeeping") {
    CHECK(m.out_hw[0] == 4);
    CHECK(m.out_hw[4] == 4);
    CHECK(m.in_hw[5] == 4);
    CHECK(m.out_hw[5] == 4);
    CHECK(m.in_hw[9] == 4);
    CHECK(m.out_hw[9] == 2);
    CHECK(m.in_hw[12] == 2);
    CHECK(m.out_hw[12] == 1);
    CHECK(m.in_hw[14] == 1);
    CHECK(m.out_hw[14] == 1);
  }
  SECTION("forward smoke: logits shape") {
    auto in = toy_inputs(17);
    auto logits = m.forward(nullptr, in);
    CHECK(logits.shape() == Shape5{2, 1, 1, 1, 157});
  }
}

TEST_CASE("resolution_match") {
  auto table = load_architecture(table_path());
  AssembledModel m = build_model(table, toy_config());
  Rng rng(5);
  SECTION("pool then 1x1 conv when both mismatch") {
    // edge (4,12): object 4x4 C8 -> destination expects 2x2 C32
    ModelEdge& e = m.edges.at({4, 12});
    CHECK(e.pool_factor == 2);
    REQUIRE(e.adapter.has_value());
    Tensor x = random_tensor(Shape5{1, 2, 4, 4, 8}, rng);
    auto y = m.adapt_edge(nullptr, e, constant(x));
    CHECK(y.shape() == Shape5{1, 2, 2, 2, 32});
  }
  SECTION("matched edge passes bitwise identically with no adapter") {
    ModelEdge& e = m.edges.at({0, 5});  // C4 -> C4, same extent
    CHECK(e.pool_factor == 1);
    CHECK_FALSE(e.adapter.has_value());
    Tensor x = random_tensor(Shape5{1, 2, 4, 4, 4}, rng);
    auto y = m.adapt_edge(nullptr, e, constant(x));
    for (i64 i = 0; i < x.size(); ++i) CHECK(y.value()[i] == x[i]);
  }
  SECTION("constant through 1x1 conv with weights summing to s gives c*s") {
    ModelEdge& e = m.edges.at({4, 5});  // object C8 -> C4
    REQUIRE(e.adapter.has_value());
    // set each output channel's weights to sum to a chosen value
    Tensor& w = e.adapter->w.value;  // (1,1,1,8,4)
    w.fill(0.0);
    for (i64 co = 0; co < 4; ++co) w[0 * 4 + co] = 0.5 * static_cast<double>(co + 1);
    e.adapter->b.value.fill(0.0);
    Tensor x(Shape5{1, 1, 4, 4, 8}, 0.0);
    for (i64 i = 0; i < x.size(); ++i) x[i] = 0.0;
    for (i64 h = 0; h < 4; ++h)
      for (i64 ww = 0; ww < 4; ++ww) x.at(0, 0, h, ww, 0) = 2.0;  // constant c=2 on channel 0
    auto y = m.adapt_edge(nullptr, e, constant(x));
    for (i64 h = 0; h < 4; ++h)
      for (i64 ww = 0; ww < 4; ++ww)
        for (i64 co = 0; co < 4; ++co)
          CHECK(y.value().at(0, 0, h, ww, co) ==
                Catch::Approx(2.0 * 0.5 * static_cast<double>(co + 1)).epsilon(1e-12));
  }
}

TEST_CASE("model forward properties") {
  auto table = load_architecture(table_path());
  SECTION("zeroed classifier gives zero logits") {
    AssembledModel m = build_model(table, toy_config());
    m.cls_w.value.fill(0.0);
    m.cls_b.value.fill(0.0);
    auto logits = m.forward(nullptr, toy_inputs(23));
    for (i64 i = 0; i < logits.value().size(); ++i) CHECK(logits.value()[i] == 0.0);
  }
  SECTION("frame duplication leaves logits unchanged under centered temporal kernels") {
    AssembledModel m = build_model(table, toy_config());
    // zero the off-center temporal taps so per-frame logits are frame-local
    for (auto& b : m.blocks) {
      std::vector<Parameter*> ps;
      b.collect_params(ps);
      for (Parameter* p : ps) {
        const Shape5& s = p->value.shape();
        if (s.n <= 1) continue;  // not a temporal kernel
        for (i64 kt = 0; kt < s.n; ++kt) {
          if (kt == s.n / 2) continue;
          for (i64 rest = 0; rest < s.t * s.h * s.w * s.c; ++rest)
            p->value[kt * s.t * s.h * s.w * s.c + rest] = 0.0;
        }
      }
    }
    Rng rng(31);
    Tensor f0r = random_tensor(Shape5{1, 1, 16, 16, 3}, rng), f1r = random_tensor(Shape5{1, 1, 16, 16, 3}, rng);
    Tensor f0f = random_tensor(Shape5{1, 1, 16, 16, 2}, rng), f1f = random_tensor(Shape5{1, 1, 16, 16, 2}, rng);
    Tensor f0o = one_hot_mask(Shape5{1, 1, 16, 16, 8}, rng), f1o = one_hot_mask(Shape5{1, 1, 16, 16, 8}, rng);
    auto assemble = [](const Tensor& a, const Tensor& b, const std::vector<int>& order) {
      const Shape5& s = a.shape();
      Tensor out(Shape5{1, static_cast<i64>(order.size()), s.h, s.w, s.c});
      for (size_t t = 0; t < order.size(); ++t) {
        const Tensor& src = order[t] == 0 ? a : b;
        for (i64 h = 0; h < s.h; ++h)
          for (i64 w = 0; w < s.w; ++w)
            for (i64 c = 0; c < s.c; ++c) out.at(0, static_cast<i64>(t), h, w, c) = src.at(0, 0, h, w, c);
      }
      return out;
    };
    ModelInputs a{assemble(f0r, f1r, {0, 1, 0, 1}), assemble(f0f, f1f, {0, 1, 0, 1}),
                  assemble(f0o, f1o, {0, 1, 0, 1})};
    ModelInputs b{assemble(f0r, f1r, {0, 0, 1, 1}), assemble(f0f, f1f, {0, 0, 1, 1}),
                  assemble(f0o, f1o, {0, 0, 1, 1})};
    auto la = m.forward(nullptr, a);
    auto lb = m.forward(nullptr, b);
    for (i64 i = 0; i < la.value().size(); ++i)
      CHECK(la.value()[i] == Catch::Approx(lb.value()[i]).margin(1e-12));
  }
  SECTION("rebuild with same seed is bit-identical") {
    AssembledModel m1 = build_model(table, toy_config(AttentionMode::OneShot, 55));
    AssembledModel m2 = build_model(table, toy_config(AttentionMode::OneShot, 55));
    auto p1 = m1.parameters(), p2 = m2.parameters();
    REQUIRE(p1.size() == p2.size());
    for (size_t i = 0; i < p1.size(); ++i) {
      REQUIRE(p1[i]->name == p2[i]->name);
      REQUIRE(p1[i]->value.size() == p2[i]->value.size());
      for (i64 k = 0; k < p1[i]->value.size(); ++k) REQUIRE(p1[i]->value[k] == p2[i]->value[k]);
    }
    auto in = toy_inputs(60);
    auto l1 = m1.forward(nullptr, in);
    auto l2 = m2.forward(nullptr, in);
    for (i64 i = 0; i < l1.value().size(); ++i) REQUIRE(l1.value()[i] == l2.value()[i]);
  }
  SECTION("object edges carry information") {
    AssembledModel with = build_model(table, toy_config(AttentionMode::None, 66));
    ModelConfig no_obj = toy_config(AttentionMode::None, 66);
    no_obj.use_object = false;
    AssembledModel without = build_model(table, no_obj);
    auto in = toy_inputs(70);
    auto lw = with.forward(nullptr, in);
    auto lo = without.forward(nullptr, in);
    double diff = 0.0;
    for (i64 i = 0; i < lw.value().size(); ++i) diff += std::abs(lw.value()[i] - lo.value()[i]);
    CHECK(diff > 1e-6);
  }
  SECTION("missing modality errors") {
    AssembledModel m = build_model(table, toy_config());
    ModelInputs in = toy_inputs(80);
    in.object = Tensor();
    CHECK_THROWS_AS(m.forward(nullptr, in), ConfigError);
  }
  SECTION("non-one-hot object errors") {
    AssembledModel m = build_model(table, toy_config());
    ModelInputs in = toy_inputs(81);
    in.object.at(0, 0, 0, 0, 0) += 0.5;
    CHECK_THROWS_AS(m.forward(nullptr, in), ConfigError);
  }
}

TEST_CASE("two-block model matches straight-line oracle") {
  const char* two = R"({"num_classes": 3, "blocks": [
    {"index": 0, "level": 0, "inputs": [], "channels": 8, "dilation": 1, "stride": 4, "kind": "input-rgb"},
    {"index": 1, "level": 1, "inputs": [0], "channels": 8, "dilation": 1, "stride": 1, "kind": "conv"}]})";
  ModelConfig c;
  c.time = 2;
  c.height = 8;
  c.width = 8;
  c.depth_scale = 1.0 / 3.0;
  c.seed = 77;
  AssembledModel m = build_model(parse_architecture(two), c);
  Rng rng(9);
  ModelInputs in;
  in.rgb = random_tensor(Shape5{2, 2, 8, 8, 3}, rng, -1.0, 1.0);
  auto got = m.forward(nullptr, in);

  // Hand-composed evaluation sharing the same parameters, no graph machinery.
  auto x0 = block_forward(nullptr, m.block(0), constant(in.rgb));
  auto gate = sigmoid(constant(m.edges.at({0, 1}).w.value));
  auto fused = scalar_scale(gate, x0);
  auto x1 = block_forward(nullptr, m.block(1), fused);
  auto pooled = gap_spatial(x1);
  auto frame = fc_per_frame(pooled, constant(m.cls_w.value), constant(m.cls_b.value));
  auto want = max_over_time(frame);
  REQUIRE(got.shape() == want.shape());
  for (i64 i = 0; i < want.value().size(); ++i)
    REQUIRE(std::abs(got.value()[i] - want.value()[i]) < 1e-10);
}

TEST_CASE("checkpoint round trip") {
  auto table = parse_architecture(builtin_toy_table());
  ModelConfig c;
  c.width_scale = 1.0 / 8.0;
  c.depth_scale = 1.0 / 3.0;
  c.object_channels = 8;
  c.attention_mode = AttentionMode::OneShot;
  c.seed = 91;
  AssembledModel m = build_model(table, c);
  auto dir = std::filesystem::temp_directory_path() / "peernet_ckpt_test";
  std::filesystem::create_directories(dir);
  std::string prefix = (dir / "model").string();
  save_checkpoint(m, prefix);

  CHECK(checkpoint_total(prefix) == m.parameter_count());

  std::vector<double> orig;
  for (Parameter* p : m.parameters())
    for (i64 i = 0; i < p->size(); ++i) orig.push_back(p->value[i]);
  for (Parameter* p : m.parameters()) p->value.fill(0.123);
  load_checkpoint(m, prefix);
  size_t k = 0;
  bool same = true;
  for (Parameter* p : m.parameters())
    for (i64 i = 0; i < p->size(); ++i) same = same && (p->value[i] == orig[k++]);
  CHECK(same);
  std::filesystem::remove_all(dir);
}
