#pragma once

#include <string>
#include <vector>

#include "cldyn/adam.hpp"
#include "cldyn/checkpoint.hpp"
#include "cldyn/config.hpp"
#include "cldyn/rng.hpp"
#include "cldyn/vfn.hpp"

namespace cldyn {

// Synthetic stand-ins for the downstream networks: a hotspot regressor, a
// region segmenter and a dominant-object detector over procedurally
// generated infrared/visible scenes with analytic ground truth.

struct SceneOptions {
  long min_blobs = 2;
  long max_blobs = 4;
  double sigma_lo_frac = 1.0 / 16.0;  // of min(H, W)
  double sigma_hi_frac = 1.0 / 10.0;
  double amp_lo = 0.7;
  double amp_hi = 1.0;
};

struct SceneSample {
  struct Blob {
    double cx, cy, sigma, amp;
  };
  Tensor ir, vi;                      // 1 x H x W in [0,1]
  Tensor gt_heat, gt_seg, gt_sal;     // heat in [0,1]; masks {0,1}
  std::uint64_t seed = 0;
  std::vector<Blob> blobs;
};

/// Pure function of (seed, H, W, options): visible = band-limited texture
/// with occluding dark patches, infrared = smooth background plus thermal
/// blobs. gt_heat is the max-normalized blob field, gt_seg thresholds it at
/// 0.5, gt_sal masks the single highest-energy blob.
inline SceneSample generate_scene(std::uint64_t seed, long h, long w,
                                  const SceneOptions& opt = {}) {
  if (h < 32 || w < 32) throw ShapeError("generate_scene needs H, W >= 32");
  Rng rng(derive_seed(seed, 0x5CE11E));
  SceneSample s;
  s.seed = seed;
  const double dim = static_cast<double>(std::min(h, w));
  const size_t n = static_cast<size_t>(h * w);

  // infrared: slow background + thermal blobs
  const long n_blobs = rng.uniform_int(opt.min_blobs, opt.max_blobs);
  for (long i = 0; i < n_blobs; ++i) {
    SceneSample::Blob b;
    b.cx = rng.uniform(0.15, 0.85) * static_cast<double>(w);
    b.cy = rng.uniform(0.15, 0.85) * static_cast<double>(h);
    b.sigma = rng.uniform(opt.sigma_lo_frac, opt.sigma_hi_frac) * dim;
    b.amp = rng.uniform(opt.amp_lo, opt.amp_hi);
    s.blobs.push_back(b);
  }
  std::vector<double> field(n, 0.0);
  double field_max = 0.0;
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double v = 0.0;
      for (const auto& b : s.blobs) {
        const double dx = static_cast<double>(x) - b.cx;
        const double dy = static_cast<double>(y) - b.cy;
        v += b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
      }
      field[static_cast<size_t>(y * w + x)] = v;
      field_max = std::max(field_max, v);
    }
  std::vector<double> heat(n, 0.0);
  if (field_max > 0.0)
    for (size_t i = 0; i < n; ++i) heat[i] = field[i] / field_max;

  const double bg_fx = rng.uniform(0.3, 1.0), bg_fy = rng.uniform(0.3, 1.0);
  const double bg_phase = rng.uniform(0.0, 6.283185307179586);
  std::vector<double> ir(n);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      const double u = static_cast<double>(x) / static_cast<double>(w);
      const double v = static_cast<double>(y) / static_cast<double>(h);
      const double bg = 0.15 + 0.08 * std::sin(6.283185307179586 * (bg_fx * u + bg_fy * v) + bg_phase);
      const double val = bg + 0.7 * heat[static_cast<size_t>(y * w + x)];
      ir[static_cast<size_t>(y * w + x)] = std::min(std::max(val, 0.0), 1.0);
    }

  // visible: a few band-limited sinusoids, no thermal information
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 5; ++i)
    waves.push_back({rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0),
                     rng.uniform(0.0, 6.283185307179586), rng.uniform(0.5, 1.0) / (1.0 + i)});
  std::vector<double> tex(n);
  double tmin = 1e300, tmax = -1e300;
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      const double u = static_cast<double>(x) / static_cast<double>(w);
      const double v = static_cast<double>(y) / static_cast<double>(h);
      double t = 0.0;
      for (const auto& wv : waves)
        t += wv.amp * std::sin(6.283185307179586 * (wv.fx * u + wv.fy * v) + wv.phase);
      tex[static_cast<size_t>(y * w + x)] = t;
      tmin = std::min(tmin, t);
      tmax = std::max(tmax, t);
    }
  const double span = tmax - tmin > 1e-12 ? tmax - tmin : 1.0;
  std::vector<double> vi(n);
  for (size_t i = 0; i < n; ++i) vi[i] = 0.2 + 0.65 * (tex[i] - tmin) / span;
  const long n_patches = rng.uniform_int(1, 3);
  for (long i = 0; i < n_patches; ++i) {
    const long pw = rng.uniform_int(w / 8, w / 3);
    const long ph = rng.uniform_int(h / 8, h / 3);
    const long px = rng.uniform_int(0, w - pw - 1);
    const long py = rng.uniform_int(0, h - ph - 1);
    for (long y = py; y < py + ph; ++y)
      for (long x = px; x < px + pw; ++x) vi[static_cast<size_t>(y * w + x)] *= 0.3;
  }

  // ground truths
  std::vector<double> seg(n, 0.0), sal(n, 0.0);
  for (size_t i = 0; i < n; ++i) seg[i] = heat[i] > 0.5 ? 1.0 : 0.0;
  if (!s.blobs.empty()) {
    size_t dominant = 0;
    double best_energy = -1.0;
    for (size_t i = 0; i < s.blobs.size(); ++i) {
      const double energy = s.blobs[i].amp * s.blobs[i].sigma * s.blobs[i].sigma;
      if (energy > best_energy) {
        best_energy = energy;
        dominant = i;
      }
    }
    const auto& b = s.blobs[dominant];
    const double r2 = 2.0 * b.sigma * b.sigma * std::log(2.0);  // field > amp/2
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) - b.cx;
        const double dy = static_cast<double>(y) - b.cy;
        if (dx * dx + dy * dy < r2) sal[static_cast<size_t>(y * w + x)] = 1.0;
      }
  }

  s.ir = Tensor::from_data(Shape{1, h, w}, std::move(ir));
  s.vi = Tensor::from_data(Shape{1, h, w}, std::move(vi));
  s.gt_heat = Tensor::from_data(Shape{1, h, w}, std::move(heat));
  s.gt_seg = Tensor::from_data(Shape{1, h, w}, std::move(seg));
  s.gt_sal = Tensor::from_data(Shape{1, h, w}, std::move(sal));
  return s;
}

inline std::vector<SceneSample> generate_scenes(std::uint64_t master_seed, std::uint64_t stream,
                                                long count, long h, long w,
                                                const SceneOptions& opt = {}) {
  std::vector<SceneSample> out;
  out.reserve(static_cast<size_t>(count));
  for (long i = 0; i < count; ++i)
    out.push_back(generate_scene(derive_seed(master_seed, stream * 1000003ULL + static_cast<std::uint64_t>(i)),
                                 h, w, opt));
  return out;
}

enum class TaskLossKind { MseHeat, BceSeg, BceSal };

inline std::string task_loss_kind_name(TaskLossKind k) {
  switch (k) {
    case TaskLossKind::MseHeat: return "mse_heat";
    case TaskLossKind::BceSeg: return "bce_seg";
    default: return "bce_sal";
  }
}

/// Frozen downstream network: three 3x3 convolutions (1->16->16->16) with
/// LeakyReLU, a sigmoid head to one channel. The semantic feature fed back
/// to the compensation module is the penultimate 16-channel activation.
struct TaskHandle {
  long id = 0;  // 1..N
  TaskLossKind kind = TaskLossKind::MseHeat;
  ConvLayer conv1, conv2, conv3, head;
  bool frozen = false;

  std::vector<Tensor> trainable() const {
    return {conv1.w, conv1.b, conv2.w, conv2.b, conv3.w, conv3.b, head.w, head.b};
  }
  NamedTensorList named_tensors() const {
    NamedTensorList out{{"meta", Tensor::from_data(Shape{2}, {static_cast<double>(id),
                                                              static_cast<double>(static_cast<long>(kind))})},
                        {"conv1.w", conv1.w}, {"conv1.b", conv1.b},
                        {"conv2.w", conv2.w}, {"conv2.b", conv2.b},
                        {"conv3.w", conv3.w}, {"conv3.b", conv3.b},
                        {"head.w", head.w},   {"head.b", head.b}};
    return out;
  }
  void set_frozen(bool f) {
    frozen = f;
    for (auto& t : trainable()) const_cast<Tensor&>(t).set_requires_grad(!f);
  }
  std::uint32_t checksum() const { return params_crc32(named_tensors()); }
};

inline TaskHandle init_task(long id, TaskLossKind kind, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xA5C0 + static_cast<std::uint64_t>(id)));
  TaskHandle t;
  t.id = id;
  t.kind = kind;
  t.conv1 = make_conv(16, 1, 3, rng);
  t.conv2 = make_conv(16, 16, 3, rng);
  t.conv3 = make_conv(16, 16, 3, rng);
  t.head = make_conv(1, 16, 3, rng);
  return t;
}

struct TaskOutput {
  Tensor prediction;  // 1 x H x W in (0,1)
  Tensor semantic;    // F_d, 16 x H x W
};

inline TaskOutput task_forward(const Tensor& image, const TaskHandle& t) {
  if (image.shape().rank != 3 || image.shape()[0] != 1)
    throw ShapeError("task_forward expects 1 x H x W, got " + image.shape().str());
  Tensor x = leaky_relu(apply_conv(t.conv1, image), 0.2);
  x = leaky_relu(apply_conv(t.conv2, x), 0.2);
  Tensor feat = leaky_relu(apply_conv(t.conv3, x), 0.2);
  Tensor pred = sigmoid(apply_conv(t.head, feat));
  return {pred, feat};
}

inline Tensor task_loss(const Tensor& prediction, const Tensor& gt, TaskLossKind kind) {
  if (kind == TaskLossKind::MseHeat) return mse_loss(prediction, gt);
  return bce_loss(prediction, gt);
}

inline const Tensor& ground_truth_for(const SceneSample& s, TaskLossKind kind) {
  switch (kind) {
    case TaskLossKind::MseHeat: return s.gt_heat;
    case TaskLossKind::BceSeg: return s.gt_seg;
    default: return s.gt_sal;
  }
}

struct PretrainReport {
  std::vector<double> final_loss;      // per task
  std::vector<bool> reached_threshold; // per task
};

/// Trains each task on the max-fused image max(ir, vi) until its loss
/// threshold or the epoch cap, then freezes. Failure to reach the threshold
/// freezes anyway and is reported.
inline PretrainReport pretrain_tasks(std::vector<TaskHandle>& tasks,
                                     const std::vector<SceneSample>& scenes,
                                     const RunConfig& cfg) {
  if (scenes.empty()) throw ConfigError("pretrain_tasks: empty scene set");
  PretrainReport report;
  std::vector<Tensor> inputs;
  inputs.reserve(scenes.size());
  for (const auto& s : scenes) inputs.push_back(detach(maximum(s.ir, s.vi)));

  for (auto& task : tasks) {
    const double threshold = task.kind == TaskLossKind::MseHeat ? cfg.task_threshold_heat
                             : task.kind == TaskLossKind::BceSeg ? cfg.task_threshold_seg
                                                                 : cfg.task_threshold_sal;
    Adam opt(task.trainable(), cfg.task_lr);
    double last = 0.0;
    bool reached = false;
    const long n = static_cast<long>(scenes.size());
    const long batch = std::min<long>(cfg.task_batch, n);
    for (long epoch = 0; epoch < cfg.task_epochs; ++epoch) {
      double epoch_sum = 0.0;
      for (long start = 0; start < n; start += batch) {
        const long stop = std::min(n, start + batch);
        opt.zero_grad();
        for (long i = start; i < stop; ++i) {
          TaskOutput out = task_forward(inputs[static_cast<size_t>(i)], task);
          Tensor loss = task_loss(out.prediction,
                                  ground_truth_for(scenes[static_cast<size_t>(i)], task.kind),
                                  task.kind);
          const double lv = loss.item();
          if (!std::isfinite(lv)) throw Error("pretrain_tasks: non-finite loss");
          epoch_sum += lv;
          backward(scale(loss, 1.0 / static_cast<double>(stop - start)));
        }
        opt.step();
      }
      last = epoch_sum / static_cast<double>(n);
      if (last < threshold) {
        reached = true;
        break;
      }
    }
    task.set_frozen(true);
    report.final_loss.push_back(last);
    report.reached_threshold.push_back(reached);
  }
  return report;
}

inline std::vector<TaskHandle> make_default_tasks(std::uint64_t seed) {
  return {init_task(1, TaskLossKind::MseHeat, seed), init_task(2, TaskLossKind::BceSeg, seed),
          init_task(3, TaskLossKind::BceSal, seed)};
}

}  // namespace cldyn
