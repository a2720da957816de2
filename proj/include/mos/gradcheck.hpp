// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mos/backbone.hpp"
#include "mos/matrix.hpp"
#include "mos/rng.hpp"

namespace mos {

struct GradCheckResult {
  std::size_t configs = 0;
  std::size_t parameters_checked = 0;
  std::size_t failures = 0;
  std::size_t redraws = 0;
  double worst_rel_error = 0.0;
  bool ok() const { return configs > 0 && failures == 0; }
};

namespace gradcheck_detail {

inline constexpr double kStep = 1e-4;
inline constexpr double kRelTol = 1e-5;
inline constexpr double kAbsFloor = 1e-8;
// A +-kStep parameter perturbation can shift downstream pre-activations by a
// few times kStep at these weight scales; pre-activations nearer to zero let
// the central difference straddle a ReLU kink.
inline constexpr double kKinkMargin = 2e-3;

struct Case {
  BackboneConfig cfg;
  FrozenBackbone backbone;
  AdapterSet adapter;
  TaskHead head;
  std::vector<Vector> inputs;
};

inline Case draw_case(Rng& rng) {
  Case c;
  c.cfg.input_dim = 2 + rng.bounded(15);   // <= 16
  c.cfg.embed_dim = 2 + rng.bounded(31);   // <= 32
  c.cfg.hidden_dim = 2 + rng.bounded(31);  // <= 32
  c.cfg.num_blocks = 1 + rng.bounded(3);   // <= 3
  c.cfg.use_identity_residual = rng.bounded(2) == 0;
  c.cfg.init_seed = rng.next_u64();
  c.cfg.init_scale = 0.3;
  c.backbone = FrozenBackbone::build(c.cfg);

  const std::size_t r = 1 + rng.bounded(8);        // <= 8
  const std::size_t classes = 2 + rng.bounded(4);  // <= 5
  const std::size_t batch = 2 + rng.bounded(7);    // <= 8

  c.adapter.bottleneck = r;
  c.adapter.task_index = 1;
  for (std::size_t l = 0; l < c.cfg.num_blocks; ++l) {
    Matrix down(c.cfg.embed_dim, r);
    for (double& v : down.data()) v = rng.uniform(-0.3, 0.3);
    Matrix up(r, c.cfg.embed_dim);
    for (double& v : up.data()) v = rng.uniform(-0.3, 0.3);
    c.adapter.w_down.push_back(std::move(down));
    c.adapter.w_up.push_back(std::move(up));
  }
  c.head.weights = Matrix(c.cfg.embed_dim, classes);
  for (double& v : c.head.weights.data()) v = rng.uniform(-0.3, 0.3);
  for (std::size_t k = 0; k < classes; ++k) c.head.class_offsets.push_back(k);

  c.inputs.resize(batch);
  for (Vector& x : c.inputs) {
    x.resize(c.cfg.input_dim);
    for (double& v : x) v = rng.uniform(-1.0, 1.0);
  }
  return c;
}

inline bool away_from_kinks(const Case& c) {
  for (const Vector& x : c.inputs)
    if (c.backbone.min_relu_gap(x, c.adapter) < kKinkMargin) return false;
  return true;
}

}  // namespace gradcheck_detail

/// Checks every analytic adapter and head gradient entry of the mean
/// cross-entropy against central finite differences on `num_configs` random
/// small configurations. Candidate draws whose ReLU pre-activations sit
/// within perturbation reach of zero are redrawn deterministically.
inline GradCheckResult run_gradient_check(std::size_t num_configs = 100,
                                          std::uint64_t master_seed = 0x6D6F7367ull) {
  using namespace gradcheck_detail;
  GradCheckResult result;
  for (std::size_t k = 0; k < num_configs; ++k) {
    Rng rng(mix_seed(master_seed, k));
    Case c = draw_case(rng);
    while (!away_from_kinks(c)) {
      ++result.redraws;
      c = draw_case(rng);
    }

    LabeledBatch batch;
    Rng label_rng(rng.next_u64());
    for (const Vector& x : c.inputs) {
      batch.inputs.push_back(&x);
      batch.labels.push_back(label_rng.bounded(c.head.class_offsets.size()));
    }

    const BackwardResult analytic = c.backbone.backward(batch, c.adapter, c.head);

    std::vector<std::pair<Matrix*, const Matrix*>> tensors;
    for (std::size_t l = 0; l < c.cfg.num_blocks; ++l) {
      tensors.push_back({&c.adapter.w_down[l], &analytic.grads.w_down[l]});
      tensors.push_back({&c.adapter.w_up[l], &analytic.grads.w_up[l]});
    }
    tensors.push_back({&c.head.weights, &analytic.grads.head});

    for (auto& [param, grad] : tensors) {
      for (std::size_t i = 0; i < param->size(); ++i) {
        const double saved = param->data()[i];
        param->data()[i] = saved + kStep;
        const double loss_plus = c.backbone.batch_loss(batch, c.adapter, c.head);
        param->data()[i] = saved - kStep;
        const double loss_minus = c.backbone.batch_loss(batch, c.adapter, c.head);
        param->data()[i] = saved;

        const double fd = (loss_plus - loss_minus) / (2.0 * kStep);
        const double an = grad->data()[i];
        const double diff = std::abs(fd - an);
        const double denom = std::max(std::abs(fd), std::abs(an));
        const double rel = denom > 0.0 ? diff / denom : 0.0;
        ++result.parameters_checked;
        if (diff > kAbsFloor && rel >= kRelTol) ++result.failures;
        if (diff > kAbsFloor) result.worst_rel_error = std::max(result.worst_rel_error, rel);
      }
    }
    ++result.configs;
  }
  return result;
}

}  // namespace mos
