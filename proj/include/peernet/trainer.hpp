#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "peernet/checkpoint.hpp"
#include "peernet/data.hpp"
#include "peernet/model.hpp"

namespace peernet {

enum class ScheduleKind { Cosine, CosineWarmRestart };

struct TrainConfig {
  int iterations = 3000;
  double base_lr = 0.05;
  ScheduleKind schedule = ScheduleKind::Cosine;
  int cycle_len = 0;  // warm-restart cycle length
  double momentum = 0.9;
  std::uint64_t seed = 1;
  double clip_norm = 10.0;
  int eval_every = 500;
  bool fine_tune = false;          // optional short fine-tune after pruning
  double fine_tune_fraction = 0.1;

  void validate() const {
    if (iterations <= 0) throw ConfigError("train: iterations must be positive");
    if (base_lr <= 0.0) throw ConfigError("train: base_lr must be positive");
    if (schedule == ScheduleKind::CosineWarmRestart) {
      if (cycle_len <= 0 || iterations % cycle_len != 0) {
        throw ConfigError("train: cycle_len must divide iterations for warm restarts");
      }
    }
  }
};

// Cosine decay; warm restarts reset the phase at every cycle boundary.
inline double lr_at(const TrainConfig& cfg, int iter) {
  if (iter < 0 || iter >= cfg.iterations) {
    throw ConfigError("lr_at: iteration " + std::to_string(iter) + " out of range");
  }
  int span = cfg.iterations;
  int phase = iter;
  if (cfg.schedule == ScheduleKind::CosineWarmRestart) {
    span = cfg.cycle_len;
    phase = iter % cfg.cycle_len;
  }
  return 0.5 * cfg.base_lr * (1.0 + std::cos(M_PI * static_cast<double>(phase) / span));
}

struct MetricsRow {
  int iter = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::string metric_name;  // empty for plain training rows
  double metric_value = 0.0;
};

struct MetricsLog {
  std::vector<MetricsRow> rows;

  void write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open metrics file '" + path + "'");
    f << "iter,lr,loss,metric_name,metric_value\n";
    char buf[256];
    for (const auto& r : rows) {
      if (r.metric_name.empty()) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,,\n", r.iter, r.lr, r.loss);
      } else {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%s,%.17g\n", r.iter, r.lr, r.loss,
                      r.metric_name.c_str(), r.metric_value);
      }
      f << buf;
    }
    if (!f.good()) throw IoError("write to '" + path + "' failed");
  }
};

struct EvalResult {
  double accuracy = 0.0;
  double mean_class_accuracy = 0.0;
};

// Average precision of one class: mean of precision at every positive hit,
// ranked by descending score.
inline double average_precision(const std::vector<double>& scores, const std::vector<int>& relevant) {
  if (scores.size() != relevant.size()) throw ConfigError("average_precision: size mismatch");
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  int hits = 0;
  double ap = 0.0;
  for (size_t rank = 0; rank < order.size(); ++rank) {
    if (relevant[order[rank]]) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  return hits > 0 ? ap / hits : 0.0;
}

// Multi-label mean average precision over classes; targets one row per
// sample, one column per class.
inline double mean_average_precision(const std::vector<std::vector<double>>& scores,
                                     const std::vector<std::vector<int>>& targets) {
  if (scores.empty()) return 0.0;
  size_t classes = scores[0].size();
  double total = 0.0;
  int counted = 0;
  for (size_t k = 0; k < classes; ++k) {
    std::vector<double> s;
    std::vector<int> r;
    bool any = false;
    for (size_t n = 0; n < scores.size(); ++n) {
      s.push_back(scores[n][k]);
      r.push_back(targets[n][k]);
      any = any || targets[n][k];
    }
    if (!any) continue;
    total += average_precision(s, r);
    ++counted;
  }
  return counted ? total / counted : 0.0;
}

// SGD with momentum over every learnable parameter: convolution filters,
// adapters, attention heads, connection gates w and mixing logits h.
class Trainer {
public:
  Trainer(AssembledModel& model, const Dataset& train, const Dataset& test, TrainConfig cfg)
      : model_(model), train_(train), test_(test), cfg_(cfg) {
    cfg_.validate();
  }

  double step(const Batch& batch, double lr) {
    auto params = model_.parameters();
    for (Parameter* p : params) p->zero_grad();
    Tape tape;
    TensorValue logits = model_.forward(&tape, batch_inputs(batch));
    TensorValue loss;
    if (model_.config.loss == LossKind::SoftmaxCE) {
      loss = softmax_cross_entropy(logits, batch.labels);
    } else {
      Tensor targets(logits.shape());
      for (i64 n = 0; n < logits.shape().n; ++n)
        targets.at(n, 0, 0, 0, batch.labels[static_cast<size_t>(n)]) = 1.0;
      loss = sigmoid_bce(logits, targets);
    }
    tape.backward(loss.node());

    double norm2 = 0.0;
    for (Parameter* p : params)
      for (i64 i = 0; i < p->size(); ++i) norm2 += p->grad[i] * p->grad[i];
    double scale = 1.0;
    double norm = std::sqrt(norm2);
    if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;

    for (Parameter* p : params) {
      Tensor& v = velocity(p);
      for (i64 i = 0; i < p->size(); ++i) {
        v[i] = cfg_.momentum * v[i] + p->grad[i] * scale;
        p->value[i] -= lr * v[i];
      }
    }
    return loss.value().item();
  }

  EvalResult evaluate() {
    const int eval_batch = 50;
    std::vector<int> correct_per_class(static_cast<size_t>(model_.num_classes), 0);
    std::vector<int> total_per_class(static_cast<size_t>(model_.num_classes), 0);
    int correct = 0;
    int n = static_cast<int>(test_.samples.size());
    for (int start = 0; start < n; start += eval_batch) {
      std::vector<int> idx;
      for (int i = start; i < std::min(start + eval_batch, n); ++i) idx.push_back(i);
      Batch b = make_batch(test_, idx);
      TensorValue logits = model_.forward(nullptr, batch_inputs(b));
      for (i64 row = 0; row < logits.shape().n; ++row) {
        int best = 0;
        for (int k = 1; k < model_.num_classes; ++k) {
          if (logits.value().at(row, 0, 0, 0, k) > logits.value().at(row, 0, 0, 0, best)) best = k;
        }
        int label = b.labels[static_cast<size_t>(row)];
        total_per_class[static_cast<size_t>(label)]++;
        if (best == label) {
          ++correct;
          correct_per_class[static_cast<size_t>(label)]++;
        }
      }
    }
    EvalResult r;
    r.accuracy = n ? static_cast<double>(correct) / n : 0.0;
    double sum = 0.0;
    int classes_seen = 0;
    for (size_t k = 0; k < total_per_class.size(); ++k) {
      if (!total_per_class[k]) continue;
      sum += static_cast<double>(correct_per_class[k]) / total_per_class[k];
      ++classes_seen;
    }
    r.mean_class_accuracy = classes_seen ? sum / classes_seen : 0.0;
    return r;
  }

  MetricsLog run(int iter_offset = 0) {
    Batcher batcher(train_, model_.config.batch, cfg_.seed);
    MetricsLog log;
    for (int iter = 0; iter < cfg_.iterations; ++iter) {
      double lr = lr_at(cfg_, iter);
      double loss = step(batcher.next(), lr);
      log.rows.push_back({iter_offset + iter, lr, loss, "", 0.0});
      bool last = iter + 1 == cfg_.iterations;
      if (last || (cfg_.eval_every > 0 && (iter + 1) % cfg_.eval_every == 0)) {
        EvalResult ev = evaluate();
        log.rows.push_back({iter_offset + iter, lr, loss, "accuracy", ev.accuracy});
        log.rows.push_back(
            {iter_offset + iter, lr, loss, "mean_class_accuracy", ev.mean_class_accuracy});
      }
    }
    return log;
  }

private:
  Tensor& velocity(Parameter* p) {
    auto it = velocity_.find(p->name);
    if (it == velocity_.end()) it = velocity_.emplace(p->name, Tensor(p->value.shape())).first;
    return it->second;
  }

  AssembledModel& model_;
  const Dataset& train_;
  const Dataset& test_;
  TrainConfig cfg_;
  std::map<std::string, Tensor> velocity_;
};

struct PipelineResult {
  AssembledModel model;
  MetricsLog log;
  EvalResult final_eval;
};

// The four-step search: (1) blocks from the table, (2) densify to every
// valid connection and attach one-shot attention, (3) train jointly,
// (4) prune low-weight connections and collapse attention to one peer per
// edge. Optionally fine-tunes the pruned model briefly.
inline PipelineResult run_pipeline(const ArchitectureTable& table, const ModelConfig& mconfig,
                                   const TrainConfig& tconfig, const Dataset& train,
                                   const Dataset& test,
                                   const std::optional<std::string>& out_dir = std::nullopt) {
  ArchitectureTable dense = densify(table);
  ModelConfig cfg = mconfig;
  cfg.attention_mode = AttentionMode::OneShot;
  PipelineResult result{build_model(dense, cfg), {}, {}};

  if (out_dir) std::filesystem::create_directories(*out_dir);

  {
    Trainer trainer(result.model, train, test, tconfig);
    result.log = trainer.run();
  }
  if (out_dir) {
    save_checkpoint(result.model, *out_dir + "/checkpoint_preprune");
    export_dot(result.model.graph_view(), *out_dir + "/graph_preprune.dot");
  }

  result.model.prune_connections(0.2);
  result.model.prune_attention();

  if (tconfig.fine_tune) {
    TrainConfig ft = tconfig;
    ft.iterations = std::max(1, static_cast<int>(tconfig.iterations * tconfig.fine_tune_fraction));
    ft.cycle_len = 0;
    ft.schedule = ScheduleKind::Cosine;
    ft.base_lr = tconfig.base_lr * 0.1;
    Trainer trainer(result.model, train, test, ft);
    MetricsLog ft_log = trainer.run(tconfig.iterations);
    result.log.rows.insert(result.log.rows.end(), ft_log.rows.begin(), ft_log.rows.end());
  }

  {
    Trainer trainer(result.model, train, test, tconfig);
    result.final_eval = trainer.evaluate();
    int last_iter = result.log.rows.empty() ? 0 : result.log.rows.back().iter;
    result.log.rows.push_back({last_iter, 0.0, 0.0, "pruned_accuracy", result.final_eval.accuracy});
    result.log.rows.push_back({last_iter, 0.0, 0.0, "pruned_mean_class_accuracy",
                               result.final_eval.mean_class_accuracy});
  }

  if (out_dir) {
    save_checkpoint(result.model, *out_dir + "/checkpoint_final");
    export_dot(result.model.graph_view(), *out_dir + "/graph_final.dot");
    result.log.write_csv(*out_dir + "/metrics.csv");
  }
  return result;
}

}  // namespace peernet
