// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <utility>
#include <vector>

#include "mos/backbone.hpp"
#include "mos/matrix.hpp"
#include "mos/rng.hpp"
#include "mos/stream.hpp"
#include "mos/training.hpp"

namespace mos {

/// Upstream fitting recipe for the stand-in pre-trained model: a synthetic
/// cluster task disjoint from the incremental stream (its class directions
/// come from an independent seed). The backbone is trained end to end here
/// and frozen afterwards; incremental stages never touch its weights.
struct PretrainConfig {
  std::size_t classes = 50;
  std::size_t per_class = 40;
  double separation = 10.0;
  double noise = 1.0;
  std::size_t epochs = 30;
  std::size_t batch_size = 48;
  double lr0 = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 11;

  void validate() const {
    require(classes >= 2, "PretrainConfig: need at least 2 classes");
    require(per_class >= 2, "PretrainConfig: per_class must be >= 2");
    require(epochs >= 1 && batch_size >= 1, "PretrainConfig: bad schedule");
    require(lr0 > 0.0, "PretrainConfig: lr0 must be > 0");
    require(momentum >= 0.0 && momentum < 1.0, "PretrainConfig: momentum outside [0, 1)");
  }
};

struct PretrainResult {
  FrozenBackbone backbone;
  double final_train_accuracy = 0.0;
};

namespace pretrain_detail {

struct MutableBackbone {
  Matrix embed;
  Vector embed_bias;
  std::vector<FrozenBackbone::Block> blocks;
};

struct ForwardScratch {
  Vector input;
  std::vector<Vector> block_in, mlp_pre, block_out;
};

inline Vector forward(const MutableBackbone& net, const Vector& x, bool residual,
                      ForwardScratch* scratch) {
  Vector cur = matvec(x, net.embed);
  add_scaled(cur, net.embed_bias, 1.0);
  if (scratch) {
    scratch->input = x;
    scratch->block_in.clear();
    scratch->mlp_pre.clear();
    scratch->block_out.clear();
  }
  for (const auto& blk : net.blocks) {
    Vector u = matvec(cur, blk.mlp_in);
    add_scaled(u, blk.mlp_in_bias, 1.0);
    Vector relu_u = u;
    for (double& v : relu_u) v = v > 0.0 ? v : 0.0;
    Vector out = matvec(relu_u, blk.mlp_out);
    add_scaled(out, blk.mlp_out_bias, 1.0);
    if (residual) add_scaled(out, cur, 1.0);
    if (scratch) {
      scratch->block_in.push_back(cur);
      scratch->mlp_pre.push_back(std::move(u));
      scratch->block_out.push_back(out);
    }
    cur = std::move(out);
  }
  return cur;
}

struct Grads {
  Matrix embed;
  Vector embed_bias;
  std::vector<FrozenBackbone::Block> blocks;
  Matrix head;

  explicit Grads(const MutableBackbone& net, const Matrix& head_shape) {
    embed = Matrix(net.embed.rows(), net.embed.cols());
    embed_bias.assign(net.embed_bias.size(), 0.0);
    for (const auto& blk : net.blocks)
      blocks.push_back({Matrix(blk.mlp_in.rows(), blk.mlp_in.cols()),
                        Vector(blk.mlp_in_bias.size(), 0.0),
                        Matrix(blk.mlp_out.rows(), blk.mlp_out.cols()),
                        Vector(blk.mlp_out_bias.size(), 0.0)});
    head = Matrix(head_shape.rows(), head_shape.cols());
  }
};

}  // namespace pretrain_detail

/// Fits all backbone weights plus a throwaway linear head with momentum SGD
/// and a cosine schedule on an upstream synthetic task, then freezes the
/// result. Deterministic per config.
inline PretrainResult pretrain_backbone(const BackboneConfig& cfg, const PretrainConfig& pc) {
  using namespace pretrain_detail;
  cfg.validate();
  pc.validate();

  Rng data_rng(mix_seed(pc.seed, 0x70726554ull));
  auto [train, test] = synthetic_cil_dataset(pc.classes, cfg.input_dim, pc.per_class,
                                             pc.separation, pc.noise, data_rng);

  MutableBackbone net;
  Rng init_rng(cfg.init_seed);
  auto fill = [&](Matrix& m, std::size_t rows, std::size_t cols) {
    m = Matrix(rows, cols);
    for (double& v : m.data()) v = init_rng.uniform(-cfg.init_scale, cfg.init_scale);
  };
  auto fill_vec = [&](Vector& v, std::size_t n) {
    v.assign(n, 0.0);
    for (double& x : v) x = init_rng.uniform(-cfg.init_scale, cfg.init_scale);
  };
  fill(net.embed, cfg.input_dim, cfg.embed_dim);
  fill_vec(net.embed_bias, cfg.embed_dim);
  net.blocks.resize(cfg.num_blocks);
  for (auto& blk : net.blocks) {
    fill(blk.mlp_in, cfg.embed_dim, cfg.hidden_dim);
    fill_vec(blk.mlp_in_bias, cfg.hidden_dim);
    fill(blk.mlp_out, cfg.hidden_dim, cfg.embed_dim);
    fill_vec(blk.mlp_out_bias, cfg.embed_dim);
  }
  Matrix head(cfg.embed_dim, pc.classes);

  MutableBackbone vel = net;
  for (double& v : vel.embed.data()) v = 0.0;
  vel.embed_bias.assign(vel.embed_bias.size(), 0.0);
  for (auto& blk : vel.blocks) {
    for (double& v : blk.mlp_in.data()) v = 0.0;
    blk.mlp_in_bias.assign(blk.mlp_in_bias.size(), 0.0);
    for (double& v : blk.mlp_out.data()) v = 0.0;
    blk.mlp_out_bias.assign(blk.mlp_out_bias.size(), 0.0);
  }
  Matrix head_vel(cfg.embed_dim, pc.classes);

  Rng order_rng(mix_seed(pc.seed, 0x6F726465ull));
  const std::size_t steps_per_epoch = (train.size() + pc.batch_size - 1) / pc.batch_size;
  const std::size_t total_steps = pc.epochs * steps_per_epoch;
  ForwardScratch scratch;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < pc.epochs; ++epoch) {
    const std::vector<std::size_t> order = detail::shuffled_indices(train.size(), order_rng);
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t lo = b * pc.batch_size;
      const std::size_t hi = std::min(lo + pc.batch_size, train.size());
      Grads grads(net, head);
      const double inv_n = 1.0 / static_cast<double>(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) {
        const Vector& x = train.features[order[i]];
        const std::size_t y = train.labels[order[i]];
        const Vector emb = forward(net, x, cfg.use_identity_residual, &scratch);
        Vector dlogits = FrozenBackbone::softmax(matvec(emb, head));
        dlogits[y] -= 1.0;
        for (double& v : dlogits) v *= inv_n;
        add_outer(grads.head, emb, dlogits);
        Vector g = matvec_transposed(dlogits, head);
        for (std::size_t l = net.blocks.size(); l-- > 0;) {
          const auto& blk = net.blocks[l];
          auto& gb = grads.blocks[l];
          Vector relu_u = scratch.mlp_pre[l];
          for (double& v : relu_u) v = v > 0.0 ? v : 0.0;
          add_outer(gb.mlp_out, relu_u, g);
          add_scaled(gb.mlp_out_bias, g, 1.0);
          Vector gu = matvec_transposed(g, blk.mlp_out);
          for (std::size_t k = 0; k < gu.size(); ++k)
            if (!(scratch.mlp_pre[l][k] > 0.0)) gu[k] = 0.0;
          add_outer(gb.mlp_in, scratch.block_in[l], gu);
          add_scaled(gb.mlp_in_bias, gu, 1.0);
          Vector g_in = matvec_transposed(gu, blk.mlp_in);
          if (cfg.use_identity_residual) add_scaled(g_in, g, 1.0);
          g = std::move(g_in);
        }
        add_outer(grads.embed, scratch.input, g);
        add_scaled(grads.embed_bias, g, 1.0);
      }
      const double lr = cosine_lr(step, total_steps, pc.lr0);
      auto sgd = [&](Matrix& p, Matrix& v, const Matrix& gr) {
        detail::Velocity::step_tensor(p, v, gr, lr, pc.momentum);
      };
      auto sgd_vec = [&](Vector& p, Vector& v, const Vector& gr) {
        for (std::size_t i = 0; i < p.size(); ++i) {
          v[i] = pc.momentum * v[i] - lr * gr[i];
          p[i] += v[i];
        }
      };
      sgd(net.embed, vel.embed, grads.embed);
      sgd_vec(net.embed_bias, vel.embed_bias, grads.embed_bias);
      for (std::size_t l = 0; l < net.blocks.size(); ++l) {
        sgd(net.blocks[l].mlp_in, vel.blocks[l].mlp_in, grads.blocks[l].mlp_in);
        sgd_vec(net.blocks[l].mlp_in_bias, vel.blocks[l].mlp_in_bias, grads.blocks[l].mlp_in_bias);
        sgd(net.blocks[l].mlp_out, vel.blocks[l].mlp_out, grads.blocks[l].mlp_out);
        sgd_vec(net.blocks[l].mlp_out_bias, vel.blocks[l].mlp_out_bias,
                grads.blocks[l].mlp_out_bias);
      }
      sgd(head, head_vel, grads.head);
      ++step;
    }
  }

  std::size_t correct = 0;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const Vector emb = forward(net, train.features[i], cfg.use_identity_residual, nullptr);
    const Vector logits = matvec(emb, head);
    std::size_t best = 0;
    for (std::size_t k = 1; k < logits.size(); ++k)
      if (logits[k] > logits[best]) best = k;
    if (best == train.labels[i]) ++correct;
  }

  PretrainResult result;
  result.final_train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
  result.backbone = FrozenBackbone::from_weights(cfg, std::move(net.embed),
                                                 std::move(net.embed_bias),
                                                 std::move(net.blocks));
  return result;
}

}  // namespace mos
