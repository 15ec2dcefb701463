#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "peernet/model.hpp"
#include "peernet/rng.hpp"

namespace peernet {

// Cross-modal toy task: one colored square moves across a wrapping grid.
// The square's identity is written into the segmentation mask (and weakly
// into rgb color); its motion pattern is written into flow (and rgb
// displacement). The label pairs identity with motion, so neither mask nor
// flow alone determines the class.
struct GeneratorConfig {
  int num_classes = 16;
  int num_objects = 8;  // C_O: mask channels; channel 0 doubles as background
  int motion_patterns = 4;
  double mask_noise_rate = 0.15;
  int samples = 2000;
  int height = 16;
  int width = 16;
  int time = 4;
  int square = 6;
  double rgb_noise = 0.25;
  double flow_noise = 0.05;
  std::uint64_t seed = 7;

  void validate() const {
    if (num_classes < 2 || num_objects < 1 || motion_patterns < 1) {
      throw ConfigError("generator: classes/objects/motions must be positive");
    }
    if (num_classes > num_objects * motion_patterns) {
      throw ConfigError("generator: num_classes must be <= num_objects * motion_patterns");
    }
    if (motion_patterns > 8) throw ConfigError("generator: at most 8 motion patterns");
    if (mask_noise_rate < 0.0 || mask_noise_rate >= 1.0) {
      throw ConfigError("generator: mask_noise_rate must be in [0,1)");
    }
    if (square > height || square > width) throw ConfigError("generator: square exceeds the grid");
  }
};

struct SyntheticSample {
  Tensor rgb;          // (1,T,H,W,3)
  Tensor flow;         // (1,T,H,W,2)
  Tensor object_mask;  // (1,T,H,W,C_O), one-hot per pixel
  int label = 0;
  int object_id = 0;
  int motion = 0;
};

struct Dataset {
  GeneratorConfig config;
  std::vector<SyntheticSample> samples;
};

inline int pair_label(const GeneratorConfig& cfg, int object_id, int motion) {
  return (object_id * cfg.motion_patterns + motion) % cfg.num_classes;
}

inline std::pair<int, int> motion_velocity(int motion) {
  static constexpr int vy[8] = {0, 0, 1, -1, 1, -1, 1, -1};
  static constexpr int vx[8] = {1, -1, 0, 0, 1, -1, -1, 1};
  return {vy[motion], vx[motion]};
}

// Pure in (config, index): parallel generation by index range reproduces
// the sequential output.
inline SyntheticSample generate_sample(const GeneratorConfig& cfg, std::uint64_t index) {
  Rng rng = Rng(cfg.seed).fork(0x5EEDBA5EULL + index);
  SyntheticSample s;
  s.object_id = rng.uniform_int(cfg.num_objects);
  s.motion = rng.uniform_int(cfg.motion_patterns);
  s.label = pair_label(cfg, s.object_id, s.motion);
  auto [vy, vx] = motion_velocity(s.motion);
  int start_h = rng.uniform_int(cfg.height);
  int start_w = rng.uniform_int(cfg.width);

  const i64 T = cfg.time, H = cfg.height, W = cfg.width, C = cfg.num_objects;
  s.rgb = Tensor(Shape5{1, T, H, W, 3});
  s.flow = Tensor(Shape5{1, T, H, W, 2});
  s.object_mask = Tensor(Shape5{1, T, H, W, C});

  double color[3];
  for (int ch = 0; ch < 3; ++ch) color[ch] = 0.25 + 0.5 * ((s.object_id >> ch) & 1);

  for (i64 t = 0; t < T; ++t) {
    int top = (start_h + vy * static_cast<int>(t)) % cfg.height;
    int left = (start_w + vx * static_cast<int>(t)) % cfg.width;
    if (top < 0) top += cfg.height;
    if (left < 0) left += cfg.width;
    for (i64 h = 0; h < H; ++h)
      for (i64 w = 0; w < W; ++w) {
        int dh = (static_cast<int>(h) - top + cfg.height) % cfg.height;
        int dw = (static_cast<int>(w) - left + cfg.width) % cfg.width;
        bool inside = dh < cfg.square && dw < cfg.square;

        for (int ch = 0; ch < 3; ++ch) {
          double v = rng.normal(0.0, cfg.rgb_noise);
          if (inside) v += color[ch];
          s.rgb.at(0, t, h, w, ch) = v;
        }
        for (int ch = 0; ch < 2; ++ch) {
          double v = rng.normal(0.0, cfg.flow_noise);
          if (inside) v += (ch == 0 ? vx : vy);
          s.flow.at(0, t, h, w, ch) = std::clamp(v, -1.0, 1.0);
        }
        int true_class = inside ? s.object_id : 0;
        int cls = true_class;
        if (rng.uniform() < cfg.mask_noise_rate && C > 1) {
          // flip to a uniformly random wrong class; normalization survives
          int other = rng.uniform_int(cfg.num_objects - 1);
          cls = other >= true_class ? other + 1 : other;
        }
        s.object_mask.at(0, t, h, w, cls) = 1.0;
      }
  }
  return s;
}

inline Dataset generate_dataset(const GeneratorConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  ds.samples.reserve(static_cast<size_t>(cfg.samples));
  for (int i = 0; i < cfg.samples; ++i) {
    ds.samples.push_back(generate_sample(cfg, static_cast<std::uint64_t>(i)));
  }
  return ds;
}

struct Batch {
  Tensor rgb, flow, object;
  std::vector<int> labels;
};

inline Batch make_batch(const Dataset& ds, const std::vector<int>& indices) {
  const GeneratorConfig& c = ds.config;
  const i64 N = static_cast<i64>(indices.size());
  Batch b;
  b.rgb = Tensor(Shape5{N, c.time, c.height, c.width, 3});
  b.flow = Tensor(Shape5{N, c.time, c.height, c.width, 2});
  b.object = Tensor(Shape5{N, c.time, c.height, c.width, c.num_objects});
  auto copy_into = [N](Tensor& dst, const Tensor& src, i64 n) {
    i64 stride = src.size();
    (void)N;
    std::copy(src.data(), src.data() + stride, dst.data() + n * stride);
  };
  for (i64 n = 0; n < N; ++n) {
    const SyntheticSample& s = ds.samples[static_cast<size_t>(indices[static_cast<size_t>(n)])];
    copy_into(b.rgb, s.rgb, n);
    copy_into(b.flow, s.flow, n);
    copy_into(b.object, s.object_mask, n);
    b.labels.push_back(s.label);
  }
  return b;
}

inline ModelInputs batch_inputs(const Batch& b) {
  ModelInputs in;
  in.rgb = b.rgb;
  in.flow = b.flow;
  in.object = b.object;
  return in;
}

// Seeded epoch shuffles, drop-last batching.
class Batcher {
public:
  Batcher(const Dataset& ds, int batch, std::uint64_t seed)
      : ds_(&ds), batch_(batch), seed_(seed) {
    if (batch < 1 || batch > static_cast<int>(ds.samples.size())) {
      throw ConfigError("batcher: batch size " + std::to_string(batch) + " out of range");
    }
    reshuffle();
  }

  Batch next() {
    if ((cursor_ + 1) * batch_ > static_cast<int>(order_.size())) {
      ++epoch_;
      reshuffle();
    }
    std::vector<int> idx(order_.begin() + cursor_ * batch_, order_.begin() + (cursor_ + 1) * batch_);
    ++cursor_;
    return make_batch(*ds_, idx);
  }

  int epoch() const { return epoch_; }

private:
  void reshuffle() {
    Rng rng = Rng(seed_).fork(0xBA7C4 + static_cast<std::uint64_t>(epoch_));
    order_ = rng.permutation(static_cast<int>(ds_->samples.size()));
    cursor_ = 0;
  }

  const Dataset* ds_;
  int batch_;
  std::uint64_t seed_;
  int epoch_ = 0;
  int cursor_ = 0;
  std::vector<int> order_;
};

// Optional dump: flat binary tensors plus a JSON manifest echoing the
// generator configuration.
inline void save_dataset(const Dataset& ds, const std::string& dir, const std::string& split) {
  std::filesystem::create_directories(dir);
  std::string base = dir + "/" + split;
  std::ofstream bin(base + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot open '" + base + ".bin' for writing");
  for (const auto& s : ds.samples) {
    bin.write(reinterpret_cast<const char*>(s.rgb.data()),
              static_cast<std::streamsize>(s.rgb.size() * sizeof(double)));
    bin.write(reinterpret_cast<const char*>(s.flow.data()),
              static_cast<std::streamsize>(s.flow.size() * sizeof(double)));
    bin.write(reinterpret_cast<const char*>(s.object_mask.data()),
              static_cast<std::streamsize>(s.object_mask.size() * sizeof(double)));
  }
  if (!bin.good()) throw IoError("write to '" + base + ".bin' failed");
  nlohmann::json manifest;
  manifest["split"] = split;
  manifest["samples"] = ds.samples.size();
  manifest["seed"] = ds.config.seed;
  manifest["config"] = {{"num_classes", ds.config.num_classes},
                        {"num_objects", ds.config.num_objects},
                        {"motion_patterns", ds.config.motion_patterns},
                        {"mask_noise_rate", ds.config.mask_noise_rate},
                        {"height", ds.config.height},
                        {"width", ds.config.width},
                        {"time", ds.config.time},
                        {"square", ds.config.square},
                        {"rgb_noise", ds.config.rgb_noise},
                        {"flow_noise", ds.config.flow_noise}};
  manifest["shapes"] = {{"rgb", {1, ds.config.time, ds.config.height, ds.config.width, 3}},
                        {"flow", {1, ds.config.time, ds.config.height, ds.config.width, 2}},
                        {"object_mask",
                         {1, ds.config.time, ds.config.height, ds.config.width, ds.config.num_objects}}};
  nlohmann::json labels = nlohmann::json::array();
  for (const auto& s : ds.samples) labels.push_back(s.label);
  manifest["labels"] = labels;
  std::ofstream mf(base + ".json");
  if (!mf) throw IoError("cannot open '" + base + ".json' for writing");
  mf << manifest.dump(2) << "\n";
}

}  // namespace peernet
