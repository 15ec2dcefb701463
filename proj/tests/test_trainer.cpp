#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "peernet/trainer.hpp"

using namespace peernet;

namespace {

const char* kTinyTable = R"({
  "num_classes": 6,
  "blocks": [
    {"index": 0, "level": 0, "inputs": [], "channels": 8, "dilation": 1, "stride": 4, "kind": "input-rgb"},
    {"index": 1, "level": 0, "inputs": [], "channels": 6, "dilation": 1, "stride": 4, "kind": "input-object"},
    {"index": 2, "level": 1, "inputs": [0, 1], "channels": 8, "dilation": 1, "stride": 1, "kind": "conv"}
  ]
})";

ModelConfig tiny_model_config(AttentionMode mode, std::uint64_t seed) {
  ModelConfig c;
  c.time = 2;
  c.height = 8;
  c.width = 8;
  c.batch = 8;
  c.depth_scale = 1.0 / 3.0;
  c.object_channels = 6;
  c.attention_mode = mode;
  c.seed = seed;
  return c;
}

GeneratorConfig tiny_data_config(std::uint64_t seed) {
  GeneratorConfig g;
  g.num_classes = 6;
  g.num_objects = 6;
  g.motion_patterns = 1;  // label determined by the object alone
  g.mask_noise_rate = 0.0;
  g.samples = 128;
  g.height = 8;
  g.width = 8;
  g.time = 2;
  g.square = 4;
  g.rgb_noise = 0.1;
  g.seed = seed;
  return g;
}

}  // namespace

TEST_CASE("lr schedules") {
  TrainConfig cosine;
  cosine.iterations = 1000;
  cosine.base_lr = 0.4;
  SECTION("cosine endpoints") {
    CHECK(lr_at(cosine, 0) == Catch::Approx(0.4));
    CHECK(lr_at(cosine, 500) == Catch::Approx(0.2));
    CHECK(lr_at(cosine, 999) > 0.0);
  }
  SECTION("warm restart resets to base_lr each cycle") {
    TrainConfig wr = cosine;
    wr.schedule = ScheduleKind::CosineWarmRestart;
    wr.cycle_len = 100;
    CHECK(lr_at(wr, 0) == Catch::Approx(0.4));
    CHECK(lr_at(wr, 100) == Catch::Approx(0.4));
    CHECK(lr_at(wr, 900) == Catch::Approx(0.4));
    CHECK(lr_at(wr, 150) == Catch::Approx(0.2));
    for (int i = 0; i < 1000; ++i) CHECK(lr_at(wr, i) >= 0.0);
  }
  SECTION("continuity within a cycle") {
    TrainConfig wr = cosine;
    wr.schedule = ScheduleKind::CosineWarmRestart;
    wr.cycle_len = 250;
    for (int i = 1; i < 250; ++i) {
      CHECK(std::abs(lr_at(wr, i) - lr_at(wr, i - 1)) < 0.01);
    }
  }
  SECTION("invalid configs rejected") {
    TrainConfig bad = cosine;
    bad.schedule = ScheduleKind::CosineWarmRestart;
    bad.cycle_len = 300;  // does not divide 1000
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(lr_at(cosine, 1000), ConfigError);
    CHECK_THROWS_AS(lr_at(cosine, -1), ConfigError);
  }
}

TEST_CASE("average precision") {
  // ranks: hit at 1 (p=1), miss, hit at 3 (p=2/3) -> AP = (1 + 2/3)/2
  CHECK(average_precision({0.9, 0.8, 0.1}, {1, 0, 1}) == Catch::Approx(5.0 / 6.0));
  CHECK(average_precision({0.1, 0.9}, {0, 1}) == Catch::Approx(1.0));
  CHECK(mean_average_precision({{0.9, 0.2}, {0.1, 0.8}}, {{1, 0}, {0, 1}}) == Catch::Approx(1.0));
}

TEST_CASE("plain gradient descent on a 1-parameter convex surrogate") {
  // loss = (w-1)^2 built from tape ops; a single step must descend.
  Parameter w("w", Tensor::scalar(3.0));
  auto loss_of = [&]() {
    Tape tape;
    auto wv = watch(tape, w);
    auto d = add(wv, constant(Tensor::scalar(-1.0)));
    auto loss = scalar_scale(d, d);
    return std::pair<double, Tape>(loss.value().item(), std::move(tape));
  };
  w.zero_grad();
  Tape tape;
  auto wv = watch(tape, w);
  auto d = add(wv, constant(Tensor::scalar(-1.0)));
  auto loss = scalar_scale(d, d);
  double before = loss.value().item();
  tape.backward(loss.node());
  CHECK(w.grad[0] == Catch::Approx(2.0 * (3.0 - 1.0)));
  w.value[0] -= 0.1 * w.grad[0];
  double after = loss_of().first;
  CHECK(after < before);
}

TEST_CASE("train_step") {
  auto table = parse_architecture(kTinyTable);
  Dataset train = generate_dataset(tiny_data_config(1));
  Dataset test = generate_dataset(tiny_data_config(2));
  SECTION("zero learning rate leaves parameters unchanged bit-exactly") {
    AssembledModel m = build_model(table, tiny_model_config(AttentionMode::OneShot, 5));
    std::vector<double> before;
    for (Parameter* p : m.parameters())
      for (i64 i = 0; i < p->size(); ++i) before.push_back(p->value[i]);
    TrainConfig tc;
    tc.iterations = 10;
    Trainer tr(m, train, test, tc);
    Batcher b(train, m.config.batch, 3);
    tr.step(b.next(), 0.0);
    size_t k = 0;
    bool same = true;
    for (Parameter* p : m.parameters())
      for (i64 i = 0; i < p->size(); ++i) same = same && (p->value[i] == before[k++]);
    CHECK(same);
  }
  SECTION("one small step decreases loss on the same batch") {
    AssembledModel m = build_model(table, tiny_model_config(AttentionMode::None, 6));
    TrainConfig tc;
    tc.iterations = 10;
    Trainer tr(m, train, test, tc);
    Batcher bt(train, m.config.batch, 3);
    Batch batch = bt.next();
    double before = tr.step(batch, 0.01);
    Tape tape;
    auto logits = m.forward(&tape, batch_inputs(batch));
    double after = softmax_cross_entropy(logits, batch.labels).value().item();
    CHECK(after < before);
  }
  SECTION("update gradients match finite differences") {
    AssembledModel m = build_model(table, tiny_model_config(AttentionMode::OneShot, 7));
    Batcher bt(train, 4, 3);
    Batch batch = bt.next();
    auto run = [&](Tape& t) {
      return softmax_cross_entropy(m.forward(&t, batch_inputs(batch)), batch.labels);
    };
    // check a representative subset: gates, h, one conv, classifier
    std::vector<Parameter*> subset;
    for (auto& [key, e] : m.edges) {
      subset.push_back(&e.w);
      if (e.attn.h) subset.push_back(&*e.attn.h);
    }
    subset.push_back(&m.cls_b);
    subset.push_back(&m.block(2).modules[0].c3.b);
    auto res = testutil::gradcheck(run, subset);
    INFO(res.worst_param << " analytic=" << res.worst_analytic << " fd=" << res.worst_fd);
    CHECK(res.ok);
  }
}

TEST_CASE("training converges on the linearly separable toy task") {
  auto table = parse_architecture(kTinyTable);
  Dataset train = generate_dataset(tiny_data_config(11));
  Dataset test = generate_dataset(tiny_data_config(12));
  AssembledModel m = build_model(table, tiny_model_config(AttentionMode::None, 13));
  TrainConfig tc;
  tc.iterations = 500;
  tc.base_lr = 0.2;
  tc.eval_every = 0;
  Trainer tr(m, train, test, tc);
  MetricsLog log = tr.run();
  double last = log.rows.back().loss;
  INFO("final loss " << last);
  CHECK(last < 0.1);
}

TEST_CASE("determinism: identical configs give bit-identical logs") {
  auto table = parse_architecture(kTinyTable);
  Dataset train = generate_dataset(tiny_data_config(21));
  Dataset test = generate_dataset(tiny_data_config(22));
  auto run_once = [&]() {
    AssembledModel m = build_model(table, tiny_model_config(AttentionMode::OneShot, 23));
    TrainConfig tc;
    tc.iterations = 40;
    tc.eval_every = 20;
    Trainer tr(m, train, test, tc);
    return tr.run();
  };
  MetricsLog a = run_once();
  MetricsLog b = run_once();
  REQUIRE(a.rows.size() == b.rows.size());
  for (size_t i = 0; i < a.rows.size(); ++i) {
    REQUIRE(a.rows[i].iter == b.rows[i].iter);
    REQUIRE(a.rows[i].lr == b.rows[i].lr);
    REQUIRE(a.rows[i].loss == b.rows[i].loss);
    REQUIRE(a.rows[i].metric_value == b.rows[i].metric_value);
  }
}

TEST_CASE("pipeline: densify, search, prune") {
  auto table = parse_architecture(kTinyTable);
  Dataset train = generate_dataset(tiny_data_config(31));
  Dataset test = generate_dataset(tiny_data_config(32));
  ModelConfig mc = tiny_model_config(AttentionMode::None, 33);
  TrainConfig tc;
  tc.iterations = 30;
  tc.eval_every = 15;

  auto dir = std::filesystem::temp_directory_path() / "peernet_pipeline_test";
  std::filesystem::remove_all(dir);
  PipelineResult res = run_pipeline(table, mc, tc, train, test, dir.string());

  SECTION("pruned graph invariants") {
    ConnectivityGraph g = res.model.graph_view();
    validate_graph(g);
    for (const auto& e : g.edges) {
      CHECK(e.attention.mode != AttentionMode::OneShot);
      CHECK(e.attention.mode == AttentionMode::Peer);
    }
    // every conv block kept at least one incoming edge
    for (const auto& b : g.blocks) {
      if (is_input_kind(b.kind)) continue;
      int incoming = 0;
      for (const auto& e : g.edges)
        if (e.dst == b.index) ++incoming;
      CHECK(incoming >= 1);
    }
  }
  SECTION("artifacts written") {
    CHECK(std::filesystem::exists(dir / "metrics.csv"));
    CHECK(std::filesystem::exists(dir / "checkpoint_preprune.bin"));
    CHECK(std::filesystem::exists(dir / "checkpoint_final.bin"));
    CHECK(std::filesystem::exists(dir / "graph_final.dot"));
  }
  SECTION("densified search saw every candidate edge") {
    // block 2 is the only conv block; peers = the two inputs
    bool found = false;
    for (const auto& row : res.log.rows)
      if (!row.metric_name.empty()) found = true;
    CHECK(found);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("densify gives every valid edge") {
  auto table = load_architecture(std::string(PEERNET_SOURCE_DIR) + "/tables/assemblenet_pp.json");
  auto dense = densify(table);
  // block 14 receives one edge from every other block
  CHECK(dense.rows[14].inputs.size() == 14);
  size_t total = 0;
  for (const auto& r : dense.rows) total += r.inputs.size();
  auto blocks = table_blocks(table);
  CHECK(total == valid_edges(blocks).size());
}

TEST_CASE("saturated h then prune keeps logits within 1e-6") {
  auto table = parse_architecture(kTinyTable);
  ModelConfig mc = tiny_model_config(AttentionMode::OneShot, 41);
  AssembledModel m = build_model(densify(table), mc);
  for (auto& [key, e] : m.edges) {
    e.attn.h->value.fill(0.0);
    e.attn.h->value[0] = 50.0;
  }
  AssembledModel pruned = m;
  pruned.prune_attention();
  Rng rng(55);
  for (int rep = 0; rep < 5; ++rep) {
    ModelInputs in;
    in.rgb = testutil::random_tensor(Shape5{2, 2, 8, 8, 3}, rng, -1.0, 1.0);
    Tensor mask(Shape5{2, 2, 8, 8, 6});
    for (i64 n = 0; n < 2; ++n)
      for (i64 t = 0; t < 2; ++t)
        for (i64 h = 0; h < 8; ++h)
          for (i64 w = 0; w < 8; ++w) mask.at(n, t, h, w, rng.uniform_int(6)) = 1.0;
    in.object = mask;
    auto a = m.forward(nullptr, in);
    auto b = pruned.forward(nullptr, in);
    for (i64 i = 0; i < a.value().size(); ++i)
      REQUIRE(a.value()[i] == Catch::Approx(b.value()[i]).margin(1e-6));
  }
}
