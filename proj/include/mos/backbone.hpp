// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "mos/checkpoint.hpp"
#include "mos/matrix.hpp"
#include "mos/rng.hpp"

namespace mos {

inline std::string checksum_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xF];
    h >>= 4;
  }
  return out;
}

struct BackboneConfig {
  std::size_t input_dim = 1;   // D
  std::size_t embed_dim = 1;   // d
  std::size_t hidden_dim = 1;  // h
  std::size_t num_blocks = 1;  // L
  bool use_identity_residual = true;
  std::uint64_t init_seed = 0;
  double init_scale = 0.02;

  void validate() const {
    require(input_dim >= 1 && embed_dim >= 1 && hidden_dim >= 1 && num_blocks >= 1,
            "BackboneConfig: all dims must be >= 1");
    require(init_scale >= 0.0, "BackboneConfig: init_scale must be >= 0");
  }
};

/// Bottleneck branch beside each block's MLP: down-projection, ReLU,
/// up-projection. The only backbone-side trainable parameters.
struct AdapterSet {
  std::size_t bottleneck = 0;  // r
  std::size_t task_index = 0;  // 1-based registration label
  std::vector<Matrix> w_down;  // per block, d x r
  std::vector<Matrix> w_up;    // per block, r x d

  std::vector<const Matrix*> tensors() const {
    std::vector<const Matrix*> out;
    out.reserve(2 * w_down.size());
    for (std::size_t l = 0; l < w_down.size(); ++l) {
      out.push_back(&w_down[l]);
      out.push_back(&w_up[l]);
    }
    return out;
  }

  /// Content checksum over the canonical f32 encoding, so the value taken at
  /// registration time still matches after a save/load round trip.
  std::uint64_t checksum() const { return payload_checksum(tensors()); }
};

/// Task-local linear head trained beside an adapter and discarded after the
/// stage; column k scores global class class_offsets[k].
struct TaskHead {
  Matrix weights;  // d x |task classes|
  std::vector<std::size_t> class_offsets;

  std::size_t local_index_of(std::size_t global_class) const {
    for (std::size_t k = 0; k < class_offsets.size(); ++k)
      if (class_offsets[k] == global_class) return k;
    throw std::out_of_range("TaskHead: label outside task class range");
  }
};

struct TaskGradients {
  std::vector<Matrix> w_down;
  std::vector<Matrix> w_up;
  Matrix head;
};

struct BackwardResult {
  double loss = 0.0;
  TaskGradients grads;
};

struct LabeledBatch {
  std::vector<const Vector*> inputs;
  std::vector<std::size_t> labels;  // global class indices
};

/// Frozen feature extractor: an embedding layer followed by num_blocks MLP
/// blocks, each with an adapter injection point. Weights never change after
/// construction; backward propagates through them without updating them.
class FrozenBackbone {
 public:
  struct Block {
    Matrix mlp_in;        // d x h
    Vector mlp_in_bias;   // h
    Matrix mlp_out;       // h x d
    Vector mlp_out_bias;  // d
  };

  /// Adopts externally fitted weights and freezes them. The upstream
  /// pre-training utility is the only intended caller.
  static FrozenBackbone from_weights(const BackboneConfig& cfg, Matrix embed, Vector embed_bias,
                                     std::vector<Block> blocks) {
    cfg.validate();
    require(embed.rows() == cfg.input_dim && embed.cols() == cfg.embed_dim &&
                embed_bias.size() == cfg.embed_dim && blocks.size() == cfg.num_blocks,
            "from_weights: shape mismatch");
    FrozenBackbone bb;
    bb.cfg_ = cfg;
    bb.embed_ = std::move(embed);
    bb.embed_bias_ = std::move(embed_bias);
    bb.blocks_ = std::move(blocks);
    require(all_finite(bb.embed_), "from_weights: non-finite weights");
    for (const auto& blk : bb.blocks_)
      require(all_finite(blk.mlp_in) && all_finite(blk.mlp_out) && all_finite(blk.mlp_in_bias) &&
                  all_finite(blk.mlp_out_bias),
              "from_weights: non-finite weights");
    return bb;
  }

  static FrozenBackbone build(const BackboneConfig& cfg) {
    cfg.validate();
    FrozenBackbone bb;
    bb.cfg_ = cfg;
    Rng rng(cfg.init_seed);
    auto fill = [&](Matrix& m, std::size_t rows, std::size_t cols) {
      m = Matrix(rows, cols);
      for (double& v : m.data()) v = rng.uniform(-cfg.init_scale, cfg.init_scale);
    };
    auto fill_vec = [&](Vector& v, std::size_t n) {
      v.assign(n, 0.0);
      for (double& x : v) x = rng.uniform(-cfg.init_scale, cfg.init_scale);
    };
    fill(bb.embed_, cfg.input_dim, cfg.embed_dim);
    fill_vec(bb.embed_bias_, cfg.embed_dim);
    bb.blocks_.resize(cfg.num_blocks);
    for (auto& blk : bb.blocks_) {
      fill(blk.mlp_in, cfg.embed_dim, cfg.hidden_dim);
      fill_vec(blk.mlp_in_bias, cfg.hidden_dim);
      fill(blk.mlp_out, cfg.hidden_dim, cfg.embed_dim);
      fill_vec(blk.mlp_out_bias, cfg.embed_dim);
    }
    return bb;
  }

  const BackboneConfig& config() const { return cfg_; }
  std::size_t input_dim() const { return cfg_.input_dim; }
  std::size_t embed_dim() const { return cfg_.embed_dim; }
  std::size_t num_blocks() const { return cfg_.num_blocks; }
  const std::vector<Block>& blocks() const { return blocks_; }

  /// Checksum over the raw f64 weights; used to audit frozenness across
  /// training stages.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xCBF29CE484222325ull;
    auto mix = [&h](const std::vector<double>& v) {
      h = fnv1a64(v.data(), v.size() * sizeof(double), h);
    };
    mix(embed_.data());
    mix(embed_bias_);
    for (const auto& blk : blocks_) {
      mix(blk.mlp_in.data());
      mix(blk.mlp_in_bias);
      mix(blk.mlp_out.data());
      mix(blk.mlp_out_bias);
    }
    return h;
  }

  /// Adapter-free forward path.
  Vector forward(const Vector& x) const { return forward_impl(x, nullptr, nullptr); }

  /// Block output with the adapter branch:
  /// x_o = MLP(x_i) + ReLU(x_i * W_down) * W_up, plus x_i when the identity
  /// residual is enabled.
  Vector forward(const Vector& x, const AdapterSet& adapters) const {
    check_adapter(adapters);
    return forward_impl(x, &adapters, nullptr);
  }

  Vector forward_logits(const Vector& x, const AdapterSet& adapters, const TaskHead& head) const {
    check_adapter(adapters);
    require(head.weights.rows() == cfg_.embed_dim, "forward_logits: head input dim mismatch");
    return matvec(forward_impl(x, &adapters, nullptr), head.weights);
  }

  /// Mean softmax cross-entropy of the batch, forward pass only. Kept free
  /// of the reverse-mode path so finite-difference checks stay independent.
  double batch_loss(const LabeledBatch& batch, const AdapterSet& adapters, const TaskHead& head) const {
    require(!batch.inputs.empty(), "batch_loss: empty batch");
    double total = 0.0;
    for (std::size_t n = 0; n < batch.inputs.size(); ++n) {
      const Vector logits = forward_logits(*batch.inputs[n], adapters, head);
      total += cross_entropy(logits, head.local_index_of(batch.labels[n]));
    }
    return total / static_cast<double>(batch.inputs.size());
  }

  /// Exact reverse-mode gradients of the mean cross-entropy with respect to
  /// every adapter projection and the head; frozen weights transmit but do
  /// not receive gradient. ReLU subgradient at 0 is 0.
  BackwardResult backward(const LabeledBatch& batch, const AdapterSet& adapters,
                          const TaskHead& head) const {
    require(!batch.inputs.empty(), "backward: empty batch");
    check_adapter(adapters);
    require(head.weights.rows() == cfg_.embed_dim, "backward: head input dim mismatch");

    const std::size_t L = cfg_.num_blocks;
    BackwardResult res;
    res.grads.w_down.assign(L, Matrix(cfg_.embed_dim, adapters.bottleneck));
    res.grads.w_up.assign(L, Matrix(adapters.bottleneck, cfg_.embed_dim));
    res.grads.head = Matrix(head.weights.rows(), head.weights.cols());

    const double inv_n = 1.0 / static_cast<double>(batch.inputs.size());
    Trace trace;
    for (std::size_t n = 0; n < batch.inputs.size(); ++n) {
      const std::size_t target = head.local_index_of(batch.labels[n]);
      forward_traced(*batch.inputs[n], adapters, trace);
      const Vector logits = matvec(trace.block_out.back(), head.weights);
      Vector dlogits = softmax(logits);
      res.loss += cross_entropy_from_probs(dlogits, target) * inv_n;
      dlogits[target] -= 1.0;
      for (double& gv : dlogits) gv *= inv_n;

      add_outer(res.grads.head, trace.block_out.back(), dlogits);
      Vector g = matvec_transposed(dlogits, head.weights);  // dL/d block_out[L-1]

      for (std::size_t l = L; l-- > 0;) {
        const Block& blk = blocks_[l];
        const Vector& x_in = trace.block_in[l];
        // Adapter branch.
        Vector gs = matvec_transposed(g, adapters.w_up[l]);  // r
        for (std::size_t j = 0; j < gs.size(); ++j)
          if (!(trace.adapter_pre[l][j] > 0.0)) gs[j] = 0.0;
        add_outer(res.grads.w_up[l], trace.adapter_act[l], g);
        add_outer(res.grads.w_down[l], x_in, gs);
        // Frozen MLP branch.
        Vector gu = matvec_transposed(g, blk.mlp_out);  // h
        for (std::size_t j = 0; j < gu.size(); ++j)
          if (!(trace.mlp_pre[l][j] > 0.0)) gu[j] = 0.0;
        Vector g_in = matvec_transposed(gs, adapters.w_down[l]);
        add_scaled(g_in, matvec_transposed(gu, blk.mlp_in), 1.0);
        if (cfg_.use_identity_residual) add_scaled(g_in, g, 1.0);
        g = std::move(g_in);
      }
      // Gradient stops at the frozen embedding layer.
    }
    return res;
  }

  void save(const std::string& path) const {
    const std::vector<std::uint32_t> manifest = {
        static_cast<std::uint32_t>(cfg_.input_dim), static_cast<std::uint32_t>(cfg_.embed_dim),
        static_cast<std::uint32_t>(cfg_.hidden_dim), static_cast<std::uint32_t>(cfg_.num_blocks),
        cfg_.use_identity_residual ? 1u : 0u};
    std::vector<Matrix> bias_rows;
    std::vector<const Matrix*> tensors;
    collect_tensors(bias_rows, tensors);
    nlohmann::ordered_json sidecar;
    sidecar["kind"] = "backbone";
    sidecar["input_dim"] = cfg_.input_dim;
    sidecar["embed_dim"] = cfg_.embed_dim;
    sidecar["hidden_dim"] = cfg_.hidden_dim;
    sidecar["num_blocks"] = cfg_.num_blocks;
    sidecar["use_identity_residual"] = cfg_.use_identity_residual;
    sidecar["checksum"] = checksum_hex(payload_checksum(tensors));
    write_checkpoint(path, RecordKind::backbone, manifest, tensors, sidecar);
  }

  static FrozenBackbone load(const std::string& path) {
    const CheckpointPayload payload = read_checkpoint(path);
    if (payload.kind != RecordKind::backbone)
      throw std::runtime_error(path + ": not a backbone checkpoint");
    if (payload.manifest.size() != 5) throw std::runtime_error(path + ": bad backbone manifest");
    FrozenBackbone bb;
    bb.cfg_.input_dim = payload.manifest[0];
    bb.cfg_.embed_dim = payload.manifest[1];
    bb.cfg_.hidden_dim = payload.manifest[2];
    bb.cfg_.num_blocks = payload.manifest[3];
    bb.cfg_.use_identity_residual = payload.manifest[4] != 0;
    bb.cfg_.validate();
    std::size_t pos = 0;
    auto take_matrix = [&](std::size_t rows, std::size_t cols) {
      Matrix m(rows, cols);
      for (double& v : m.data()) {
        if (pos >= payload.values.size()) throw std::runtime_error(path + ": payload too short");
        v = static_cast<double>(payload.values[pos++]);
      }
      return m;
    };
    auto take_vector = [&](std::size_t n) { return take_matrix(1, n).data(); };
    bb.embed_ = take_matrix(bb.cfg_.input_dim, bb.cfg_.embed_dim);
    bb.embed_bias_ = take_vector(bb.cfg_.embed_dim);
    bb.blocks_.resize(bb.cfg_.num_blocks);
    for (auto& blk : bb.blocks_) {
      blk.mlp_in = take_matrix(bb.cfg_.embed_dim, bb.cfg_.hidden_dim);
      blk.mlp_in_bias = take_vector(bb.cfg_.hidden_dim);
      blk.mlp_out = take_matrix(bb.cfg_.hidden_dim, bb.cfg_.embed_dim);
      blk.mlp_out_bias = take_vector(bb.cfg_.embed_dim);
    }
    if (pos != payload.values.size())
      throw std::runtime_error(path + ": payload size mismatch for backbone config");
    for (const auto& blk : bb.blocks_)
      if (!all_finite(blk.mlp_in) || !all_finite(blk.mlp_out))
        throw std::runtime_error(path + ": non-finite weights");
    if (!all_finite(bb.embed_)) throw std::runtime_error(path + ": non-finite weights");
    return bb;
  }

  /// Load but require the checkpoint to match an expected configuration.
  static FrozenBackbone load(const std::string& path, const BackboneConfig& expected) {
    FrozenBackbone bb = load(path);
    const BackboneConfig& c = bb.cfg_;
    if (c.input_dim != expected.input_dim || c.embed_dim != expected.embed_dim ||
        c.hidden_dim != expected.hidden_dim || c.num_blocks != expected.num_blocks ||
        c.use_identity_residual != expected.use_identity_residual)
      throw std::runtime_error(path + ": checkpoint dimensions do not match config");
    return bb;
  }

  /// Smallest |pre-activation| over every ReLU unit this input touches.
  /// Finite-difference probes reject configurations where this is within the
  /// perturbation reach of zero, since a straddled kink corrupts the
  /// difference quotient without indicating a gradient bug.
  double min_relu_gap(const Vector& x, const AdapterSet& adapters) const {
    Trace trace;
    forward_traced(x, adapters, trace);
    double gap = std::numeric_limits<double>::infinity();
    for (const Vector& v : trace.mlp_pre)
      for (double u : v) gap = std::min(gap, std::abs(u));
    for (const Vector& v : trace.adapter_pre)
      for (double u : v) gap = std::min(gap, std::abs(u));
    return gap;
  }

  static Vector softmax(const Vector& logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    Vector p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      p[i] = std::exp(logits[i] - mx);
      z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
  }

 private:
  struct Trace {
    std::vector<Vector> block_in;     // per block input x_i
    std::vector<Vector> mlp_pre;      // pre-ReLU hidden, per block
    std::vector<Vector> adapter_pre;  // pre-ReLU bottleneck, per block
    std::vector<Vector> adapter_act;  // ReLU(bottleneck), per block
    std::vector<Vector> block_out;    // per block output (last = embedding)
  };

  void check_adapter(const AdapterSet& a) const {
    require(a.w_down.size() == cfg_.num_blocks && a.w_up.size() == cfg_.num_blocks,
            "adapter/backbone block count mismatch");
    for (std::size_t l = 0; l < a.w_down.size(); ++l)
      require(a.w_down[l].rows() == cfg_.embed_dim && a.w_down[l].cols() == a.bottleneck &&
                  a.w_up[l].rows() == a.bottleneck && a.w_up[l].cols() == cfg_.embed_dim,
              "adapter projection dims inconsistent with backbone");
  }

  static double cross_entropy(const Vector& logits, std::size_t target) {
    return cross_entropy_from_probs(softmax(logits), target);
  }

  static double cross_entropy_from_probs(const Vector& probs, std::size_t target) {
    return -std::log(std::max(probs[target], 1e-300));
  }

  Vector forward_impl(const Vector& x, const AdapterSet* adapters, Trace* trace) const {
    require(x.size() == cfg_.input_dim, "forward: input dim mismatch");
    Vector cur = matvec(x, embed_);
    add_scaled(cur, embed_bias_, 1.0);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const Block& blk = blocks_[l];
      Vector u = matvec(cur, blk.mlp_in);
      add_scaled(u, blk.mlp_in_bias, 1.0);
      Vector relu_u = u;
      for (double& v : relu_u) v = v > 0.0 ? v : 0.0;
      Vector out = matvec(relu_u, blk.mlp_out);
      add_scaled(out, blk.mlp_out_bias, 1.0);
      Vector s, relu_s;
      if (adapters != nullptr) {
        s = matvec(cur, adapters->w_down[l]);
        relu_s = s;
        for (double& v : relu_s) v = v > 0.0 ? v : 0.0;
        add_scaled(out, matvec(relu_s, adapters->w_up[l]), 1.0);
      }
      if (cfg_.use_identity_residual) add_scaled(out, cur, 1.0);
      if (trace != nullptr) {
        trace->block_in.push_back(cur);
        trace->mlp_pre.push_back(std::move(u));
        trace->adapter_pre.push_back(std::move(s));
        trace->adapter_act.push_back(std::move(relu_s));
        trace->block_out.push_back(out);
      }
      cur = std::move(out);
    }
    return cur;
  }

  void forward_traced(const Vector& x, const AdapterSet& adapters, Trace& trace) const {
    trace.block_in.clear();
    trace.mlp_pre.clear();
    trace.adapter_pre.clear();
    trace.adapter_act.clear();
    trace.block_out.clear();
    forward_impl(x, &adapters, &trace);
  }

  void collect_tensors(std::vector<Matrix>& bias_rows, std::vector<const Matrix*>& tensors) const {
    bias_rows.clear();
    bias_rows.reserve(1 + 2 * blocks_.size());
    auto as_row = [&](const Vector& v) {
      Matrix m(1, v.size());
      m.data() = v;
      bias_rows.push_back(std::move(m));
      return &bias_rows.back();
    };
    tensors.clear();
    tensors.push_back(&embed_);
    tensors.push_back(as_row(embed_bias_));
    for (const auto& blk : blocks_) {
      tensors.push_back(&blk.mlp_in);
      tensors.push_back(as_row(blk.mlp_in_bias));
      tensors.push_back(&blk.mlp_out);
      tensors.push_back(as_row(blk.mlp_out_bias));
    }
  }

  BackboneConfig cfg_;
  Matrix embed_;
  Vector embed_bias_;
  std::vector<Block> blocks_;
};

}  // namespace mos
