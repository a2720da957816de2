// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mos/adapters.hpp"
#include "mos/backbone.hpp"
#include "mos/gaussian.hpp"
#include "mos/matrix.hpp"
#include "mos/rng.hpp"
#include "mos/stream.hpp"

namespace mos {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 48;
  double lr0 = 0.01;
  double momentum = 0.9;
  double alpha = 0.1;
  std::size_t bottleneck = 16;  // adapter projection dimension r
  bool align_classifier = false;
  std::size_t align_multiplier = 5;
  bool merge_per_epoch = false;  // ablation: merge once per epoch instead of per step
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 1, "TrainConfig: epochs must be >= 1");
    require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    require(lr0 > 0.0, "TrainConfig: lr0 must be > 0");
    require(momentum >= 0.0 && momentum < 1.0, "TrainConfig: momentum outside [0, 1)");
    require(alpha >= 0.0 && alpha <= 1.0, "TrainConfig: alpha outside [0, 1]");
    require(bottleneck >= 1, "TrainConfig: bottleneck must be >= 1");
    require(align_multiplier >= 1, "TrainConfig: align_multiplier must be >= 1");
  }
};

/// Half-cosine decay from lr0 at step 0 to 0 at total_steps.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  require(total_steps >= 1, "cosine_lr: total_steps must be >= 1");
  require(step <= total_steps, "cosine_lr: step beyond schedule");
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Per-adapter, per-class mean embeddings used directly as cosine classifier
/// weights. Adapter keys are 0-based task ids.
class PrototypeBank {
 public:
  void insert(std::size_t adapter_task, std::size_t cls, Vector proto) {
    protos_[{adapter_task, cls}] = std::move(proto);
  }

  bool has(std::size_t adapter_task, std::size_t cls) const {
    return protos_.count({adapter_task, cls}) != 0;
  }

  const Vector& prototype(std::size_t adapter_task, std::size_t cls) const {
    const auto it = protos_.find({adapter_task, cls});
    if (it == protos_.end())
      throw std::out_of_range("PrototypeBank: missing prototype for adapter " +
                              std::to_string(adapter_task) + ", class " + std::to_string(cls));
    return it->second;
  }

  std::size_t size() const { return protos_.size(); }

 private:
  std::map<std::pair<std::size_t, std::size_t>, Vector> protos_;
};

struct ClassStats {
  Vector mean;        // d
  Matrix covariance;  // d x d, biased sample covariance
  std::size_t count = 0;
};

using GaussianStats = std::map<std::size_t, ClassStats>;

struct LossTraceRow {
  std::size_t step = 0;   // within-task optimizer step, 0-based
  std::size_t epoch = 0;  // 0-based
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  AdapterSet adapter;
  TaskHead head;
  std::vector<LossTraceRow> trace;
  double final_train_accuracy = 0.0;
};

namespace detail {

/// Momentum buffers shaped like one task's trainable parameters.
struct Velocity {
  std::vector<Matrix> w_down, w_up;
  Matrix head;

  Velocity(const AdapterSet& a, const TaskHead& h) {
    for (std::size_t l = 0; l < a.w_down.size(); ++l) {
      w_down.emplace_back(a.w_down[l].rows(), a.w_down[l].cols());
      w_up.emplace_back(a.w_up[l].rows(), a.w_up[l].cols());
    }
    head = Matrix(h.weights.rows(), h.weights.cols());
  }

  static void step_tensor(Matrix& param, Matrix& vel, const Matrix& grad, double lr,
                          double momentum) {
    for (std::size_t i = 0; i < param.size(); ++i) {
      vel.data()[i] = momentum * vel.data()[i] - lr * grad.data()[i];
      param.data()[i] += vel.data()[i];
    }
  }

  void step(AdapterSet& a, TaskHead& h, const TaskGradients& g, double lr, double momentum) {
    for (std::size_t l = 0; l < a.w_down.size(); ++l) {
      step_tensor(a.w_down[l], w_down[l], g.w_down[l], lr, momentum);
      step_tensor(a.w_up[l], w_up[l], g.w_up[l], lr, momentum);
    }
    step_tensor(h.weights, head, g.head, lr, momentum);
  }
};

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.bounded(i)]);
  return idx;
}

using MergeHook = std::function<void(AdapterSet&)>;

/// Shared momentum-SGD loop over one task's data: epochs * ceil(n/batch)
/// steps, per-step cosine schedule, optional hooks applied to the adapter
/// after every step or every epoch.
inline std::vector<LossTraceRow> optimize_task(const Dataset& data, const FrozenBackbone& backbone,
                                               AdapterSet& adapter, TaskHead& head,
                                               const TrainConfig& cfg, Rng& rng,
                                               const MergeHook& after_step,
                                               const MergeHook& after_epoch) {
  Velocity velocity(adapter, head);
  const std::size_t steps_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * steps_per_epoch;
  std::vector<LossTraceRow> trace;
  trace.reserve(total_steps);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = shuffled_indices(data.size(), rng);
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      LabeledBatch batch;
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(lo + cfg.batch_size, data.size());
      for (std::size_t i = lo; i < hi; ++i) {
        batch.inputs.push_back(&data.feature(order[i]));
        batch.labels.push_back(data.labels[order[i]]);
      }
      const double lr = cosine_lr(step, total_steps, cfg.lr0);
      const BackwardResult back = backbone.backward(batch, adapter, head);
      velocity.step(adapter, head, back.grads, lr, cfg.momentum);
      if (after_step) after_step(adapter);
      trace.push_back({step, epoch, lr, back.loss});
      ++step;
    }
    if (after_epoch) after_epoch(adapter);
  }
  return trace;
}

}  // namespace detail

/// Optimizes one task's adapter and head with momentum SGD under a per-step
/// cosine schedule. From stage 2 on, the in-training adapter is replaced by
/// its EMA merge with the frozen history after every update (or once per
/// epoch with merge_per_epoch). The trained adapter is registered frozen;
/// the head is returned for inspection but plays no role at inference.
inline TrainResult train_task(const Dataset& data, const FrozenBackbone& backbone,
                              AdapterRegistry& registry, const TrainConfig& cfg,
                              const std::vector<std::size_t>& task_classes,
                              bool use_merge = true) {
  cfg.validate();
  require(data.size() >= 1, "train_task: empty dataset");
  require(!task_classes.empty(), "train_task: no task classes");
  for (std::size_t y : data.labels)
    require(std::find(task_classes.begin(), task_classes.end(), y) != task_classes.end(),
            "train_task: label out of task range");

  const std::size_t stage = registry.stages() + 1;  // 1-based
  Rng rng(mix_seed(cfg.seed, 0x7261696Eull + stage));
  AdapterSet adapter = init_adapter(stage, backbone.config(), cfg.bottleneck, rng);
  TaskHead head;
  head.weights = Matrix(backbone.embed_dim(), task_classes.size());
  head.class_offsets = task_classes;

  const bool merging = use_merge && registry.stages() >= 1;
  const detail::MergeHook merge = [&](AdapterSet& a) {
    a = ema_merge(a, registry.history(), cfg.alpha);
  };
  TrainResult result;
  result.trace = detail::optimize_task(data, backbone, adapter, head, cfg, rng,
                                       merging && !cfg.merge_per_epoch ? merge : detail::MergeHook{},
                                       merging && cfg.merge_per_epoch ? merge : detail::MergeHook{});

  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector logits = backbone.forward_logits(data.feature(i), adapter, head);
    std::size_t best = 0;
    for (std::size_t k = 1; k < logits.size(); ++k)
      if (logits[k] > logits[best]) best = k;
    if (head.class_offsets[best] == data.labels[i]) ++correct;
  }
  result.final_train_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());

  for (const auto& m : adapter.w_down) require(all_finite(m), "train_task: non-finite adapter");
  for (const auto& m : adapter.w_up) require(all_finite(m), "train_task: non-finite adapter");
  require(all_finite(head.weights), "train_task: non-finite head");

  result.adapter = adapter;
  result.head = std::move(head);
  registry.register_frozen(std::move(adapter));
  return result;
}

/// Class-mean embeddings of `data` under one frozen adapter, inserted under
/// (adapter.task_index - 1, class). Classes absent from the data are skipped.
inline void extract_prototypes(const Dataset& data, const FrozenBackbone& backbone,
                               const AdapterSet& adapter, PrototypeBank& bank) {
  require(adapter.task_index >= 1, "extract_prototypes: unregistered adapter");
  std::map<std::size_t, std::pair<Vector, std::size_t>> sums;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector emb = backbone.forward(data.feature(i), adapter);
    auto& slot = sums[data.labels[i]];
    if (slot.second == 0) slot.first = Vector(emb.size(), 0.0);
    add_scaled(slot.first, emb, 1.0);
    ++slot.second;
  }
  for (auto& [cls, sum] : sums) {
    for (double& v : sum.first) v /= static_cast<double>(sum.second);
    bank.insert(adapter.task_index - 1, cls, std::move(sum.first));
  }
}

/// Per-class mean and biased sample covariance of embeddings under one
/// adapter, with the instance count recorded for bookkeeping.
inline GaussianStats compute_gaussian_stats(const Dataset& data, const FrozenBackbone& backbone,
                                            const AdapterSet& adapter) {
  std::map<std::size_t, std::vector<Vector>> by_class;
  for (std::size_t i = 0; i < data.size(); ++i)
    by_class[data.labels[i]].push_back(backbone.forward(data.feature(i), adapter));

  GaussianStats stats;
  for (auto& [cls, embs] : by_class) {
    const std::size_t k = embs.size();
    const std::size_t d = embs.front().size();
    ClassStats cs;
    cs.count = k;
    cs.mean = Vector(d, 0.0);
    for (const Vector& e : embs) add_scaled(cs.mean, e, 1.0);
    for (double& v : cs.mean) v /= static_cast<double>(k);
    cs.covariance = Matrix(d, d);
    for (const Vector& e : embs) {
      Vector centered = e;
      add_scaled(centered, cs.mean, -1.0);
      add_outer(cs.covariance, centered, centered);
    }
    for (double& v : cs.covariance.data()) v /= static_cast<double>(k);
    stats[cls] = std::move(cs);
  }
  return stats;
}

/// Draws `count` replay features from one class's stored Gaussian, falling
/// back to diagonal-only sampling when the covariance cannot be factored.
inline std::vector<Vector> replay_class_features(const ClassStats& cs, std::size_t count,
                                                 Rng& rng) {
  Matrix factor;
  try {
    factor = cholesky(cs.covariance);
  } catch (const NotPositiveDefinite&) {
    factor = diagonal_sampling_factor(cs.covariance);
  }
  return sample_gaussian(cs.mean, factor, count, rng);
}

/// Replays class features from stored Gaussians and fine-tunes a global
/// linear head on them: align_multiplier * batch_size samples per class,
/// 5 epochs of the same momentum-SGD at lr0/10. Adapters are untouched.
/// With align_classifier off this is a no-op and the head stays unchanged.
inline void align_classifier(Matrix& global_head, const std::vector<std::size_t>& seen_classes,
                             const GaussianStats& stats, const TrainConfig& cfg, Rng& rng) {
  if (!cfg.align_classifier) return;
  require(!seen_classes.empty(), "align_classifier: no classes");
  require(global_head.cols() == seen_classes.size(),
          "align_classifier: head width does not match seen classes");
  for (std::size_t cls : seen_classes)
    if (stats.find(cls) == stats.end())
      throw std::invalid_argument("align_classifier: missing stats for class " +
                                  std::to_string(cls));

  const std::size_t per_class = cfg.align_multiplier * cfg.batch_size;
  std::vector<Vector> features;
  std::vector<std::size_t> labels;  // local indices into seen_classes
  features.reserve(per_class * seen_classes.size());
  for (std::size_t local = 0; local < seen_classes.size(); ++local) {
    for (Vector& v : replay_class_features(stats.at(seen_classes[local]), per_class, rng)) {
      features.push_back(std::move(v));
      labels.push_back(local);
    }
  }

  const double lr = cfg.lr0 / 10.0;
  Matrix vel(global_head.rows(), global_head.cols());
  const std::size_t steps_per_epoch = (features.size() + cfg.batch_size - 1) / cfg.batch_size;
  for (std::size_t epoch = 0; epoch < 5; ++epoch) {
    const std::vector<std::size_t> order = detail::shuffled_indices(features.size(), rng);
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(lo + cfg.batch_size, features.size());
      Matrix grad(global_head.rows(), global_head.cols());
      const double inv_n = 1.0 / static_cast<double>(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) {
        const Vector& x = features[order[i]];
        Vector p = FrozenBackbone::softmax(matvec(x, global_head));
        p[labels[order[i]]] -= 1.0;
        add_outer(grad, x, p, inv_n);
      }
      detail::Velocity::step_tensor(global_head, vel, grad, lr, cfg.momentum);
    }
  }
}

}  // namespace mos
