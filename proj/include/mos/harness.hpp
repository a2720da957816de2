// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mos/adapters.hpp"
#include "mos/backbone.hpp"
#include "mos/config.hpp"
#include "mos/inference.hpp"
#include "mos/pretrain.hpp"
#include "mos/report.hpp"
#include "mos/stream.hpp"
#include "mos/training.hpp"

namespace mos {

namespace seed_salt {
inline constexpr std::uint64_t data = 0x64617461;
inline constexpr std::uint64_t train = 0x7472616E;
inline constexpr std::uint64_t align = 0x616C6967;
inline constexpr std::uint64_t sequential = 0x73657175;
}  // namespace seed_salt

/// Per-stage snapshot of train-slice read counters, taken after each
/// training phase. Training at stage b may only advance slice b.
struct RunAudit {
  std::vector<std::vector<std::uint64_t>> reads_after_training;
  std::uint64_t backbone_checksum = 0;
  bool backbone_frozen = true;
};

inline void save_class_stats(const GaussianStats& stats, const std::string& path) {
  std::vector<std::uint32_t> manifest;
  std::vector<Matrix> rows;
  std::vector<const Matrix*> tensors;
  const std::size_t d = stats.empty() ? 0 : stats.begin()->second.mean.size();
  manifest.push_back(static_cast<std::uint32_t>(d));
  manifest.push_back(static_cast<std::uint32_t>(stats.size()));
  rows.reserve(stats.size());
  nlohmann::ordered_json sidecar;
  sidecar["kind"] = "class_stats";
  sidecar["embed_dim"] = d;
  sidecar["classes"] = nlohmann::ordered_json::array();
  for (const auto& [cls, cs] : stats) {
    manifest.push_back(static_cast<std::uint32_t>(cls));
    manifest.push_back(static_cast<std::uint32_t>(cs.count));
    Matrix mean_row(1, cs.mean.size());
    mean_row.data() = cs.mean;
    rows.push_back(std::move(mean_row));
    sidecar["classes"].push_back({{"class", cls}, {"count", cs.count}});
  }
  std::size_t i = 0;
  for (const auto& [cls, cs] : stats) {
    tensors.push_back(&rows[i++]);
    tensors.push_back(&cs.covariance);
  }
  write_checkpoint(path, RecordKind::class_stats, manifest, tensors, sidecar);
}

inline GaussianStats load_class_stats(const std::string& path) {
  const CheckpointPayload payload = read_checkpoint(path);
  if (payload.kind != RecordKind::class_stats)
    throw std::runtime_error(path + ": not a class-stats checkpoint");
  if (payload.manifest.size() < 2) throw std::runtime_error(path + ": bad stats manifest");
  const std::size_t d = payload.manifest[0];
  const std::size_t n = payload.manifest[1];
  if (payload.manifest.size() != 2 + 2 * n) throw std::runtime_error(path + ": bad stats manifest");
  if (payload.values.size() != n * (d + d * d))
    throw std::runtime_error(path + ": stats payload size mismatch");
  GaussianStats stats;
  std::size_t pos = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t cls = payload.manifest[2 + 2 * k];
    ClassStats cs;
    cs.count = payload.manifest[3 + 2 * k];
    cs.mean.resize(d);
    for (double& v : cs.mean) v = static_cast<double>(payload.values[pos++]);
    cs.covariance = Matrix(d, d);
    for (double& v : cs.covariance.data()) v = static_cast<double>(payload.values[pos++]);
    stats[cls] = std::move(cs);
  }
  return stats;
}

/// Pre-training is deterministic per (backbone, pretrain) config, so runs
/// within one process (ablation variants, seed sweeps sharing one frozen
/// model) reuse the fitted weights instead of refitting.
inline FrozenBackbone cached_pretrained_backbone(const BackboneConfig& cfg,
                                                 const PretrainConfig& pc) {
  struct Entry {
    BackboneConfig cfg;
    PretrainConfig pc;
    FrozenBackbone backbone;
  };
  static std::vector<Entry> cache;
  for (const Entry& e : cache) {
    const BackboneConfig& c = e.cfg;
    const PretrainConfig& p = e.pc;
    if (c.input_dim == cfg.input_dim && c.embed_dim == cfg.embed_dim &&
        c.hidden_dim == cfg.hidden_dim && c.num_blocks == cfg.num_blocks &&
        c.use_identity_residual == cfg.use_identity_residual && c.init_seed == cfg.init_seed &&
        c.init_scale == cfg.init_scale && p.classes == pc.classes &&
        p.per_class == pc.per_class && p.separation == pc.separation && p.noise == pc.noise &&
        p.epochs == pc.epochs && p.batch_size == pc.batch_size && p.lr0 == pc.lr0 &&
        p.momentum == pc.momentum && p.seed == pc.seed)
      return e.backbone;
  }
  cache.push_back({cfg, pc, pretrain_backbone(cfg, pc).backbone});
  return cache.back().backbone;
}

/// End-to-end incremental run: per stage, train the task adapter (with EMA
/// merging from stage 2 on), register it frozen, extract prototypes for the
/// new classes under every retained adapter, update Gaussian statistics,
/// then evaluate on all test data seen so far with the configured retrieval
/// and ensembling variant.
class ExperimentRunner {
 public:
  explicit ExperimentRunner(ExperimentConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  MetricsReport run() {
    prepare();
    const std::size_t num_tasks = plan_.map.num_tasks();
    for (std::size_t t = 0; t < num_tasks; ++t) {
      const std::vector<std::uint64_t> before = slice_reads();
      train_stage(t);
      audit_training_reads(t, before);
      check_backbone_frozen();
      if (!cfg_.eval_final_stage_only || t + 1 == num_tasks) evaluate_stage(t);
    }
    report_.finalize();
    write_outputs();
    return report_;
  }

  const RunAudit& audit() const { return audit_; }
  const AdapterRegistry& registry() const { return registry_; }
  const PrototypeBank& bank() const { return bank_; }
  const GaussianStats& class_stats() const { return stats_; }
  const SplitPlan& plan() const { return plan_; }
  const std::vector<Dataset>& train_slices() const { return train_slices_; }

 private:
  void prepare() {
    registry_ = AdapterRegistry(cfg_.train.alpha);
    StreamSpec stream = cfg_.stream;
    stream.shuffle_seed = mix_seed(cfg_.seed, cfg_.stream.shuffle_seed);
    plan_ = make_splits(stream);

    Dataset train_raw, test_raw;
    if (cfg_.data.source == "synthetic") {
      Rng data_rng(mix_seed(cfg_.seed, seed_salt::data));
      auto pair = synthetic_cil_dataset(cfg_.stream.total_classes, cfg_.backbone.input_dim,
                                        cfg_.data.per_class, cfg_.data.separation,
                                        cfg_.data.noise, data_rng);
      train_raw = std::move(pair.first);
      test_raw = std::move(pair.second);
    } else {
      const DatasetFormat fmt =
          cfg_.data.source == "csv" ? DatasetFormat::csv : DatasetFormat::f32bin;
      train_raw = load_dataset(cfg_.data.train_path, fmt, SplitTag::train,
                               cfg_.stream.total_classes);
      test_raw = load_dataset(cfg_.data.test_path, fmt, SplitTag::test,
                              cfg_.stream.total_classes);
      for (const Dataset* ds : {&train_raw, &test_raw})
        for (const Vector& f : ds->features)
          require(f.size() == cfg_.backbone.input_dim,
                  "dataset feature dim does not match backbone input_dim");
    }
    const Dataset train_all = remap_labels(train_raw, plan_);
    const Dataset test_all = remap_labels(test_raw, plan_);
    train_slices_.clear();
    test_slices_.clear();
    for (std::size_t t = 0; t < plan_.map.num_tasks(); ++t) {
      train_slices_.push_back(filter_task(train_all, plan_.map, t));
      test_slices_.push_back(filter_task(test_all, plan_.map, t));
      require(train_slices_.back().size() > 0, "task has no training data");
    }

    if (!cfg_.backbone_checkpoint.empty())
      backbone_ = FrozenBackbone::load(cfg_.backbone_checkpoint, cfg_.backbone);
    else if (cfg_.pretrain_backbone)
      backbone_ = cached_pretrained_backbone(cfg_.backbone, cfg_.pretrain);
    else
      backbone_ = FrozenBackbone::build(cfg_.backbone);
    audit_.backbone_checksum = backbone_.checksum();

    if (cfg_.mode == RunMode::sequential) {
      Rng rng(mix_seed(cfg_.seed, seed_salt::sequential));
      seq_adapter_ = init_adapter(1, backbone_.config(), cfg_.train.bottleneck, rng);
    }
  }

  void train_stage(std::size_t t) {
    const Dataset& slice = train_slices_[t];
    const std::vector<std::size_t>& classes = plan_.map.classes_of(t);
    TrainConfig tc = cfg_.train;
    tc.seed = mix_seed(cfg_.seed, seed_salt::train);

    switch (cfg_.mode) {
      case RunMode::mos: {
        TrainResult res = train_task(slice, backbone_, registry_, tc, classes,
                                     cfg_.variants.use_merge);
        append_trace(res.trace);
        for (std::size_t a = 0; a < registry_.stages(); ++a)
          extract_prototypes(slice, backbone_, registry_.adapter(a), bank_);
        merge_stats(compute_gaussian_stats(slice, backbone_, registry_.adapter(t)));
        registry_.audit();
        break;
      }
      case RunMode::first_adapter_only: {
        if (t == 0) {
          TrainResult res = train_task(slice, backbone_, registry_, tc, classes, false);
          append_trace(res.trace);
        }
        extract_prototypes(slice, backbone_, registry_.adapter(0), bank_);
        merge_stats(compute_gaussian_stats(slice, backbone_, registry_.adapter(0)));
        break;
      }
      case RunMode::sequential: {
        // Finetune-style anchor: one adapter and one growing linear head,
        // both updated on current-task data only and used directly for
        // classification. Old head columns see only negative pressure, so
        // recency bias accumulates the classic way.
        const std::size_t seen = plan_.map.classes_seen_through(t);
        Matrix grown(backbone_.embed_dim(), seen);
        for (std::size_t i = 0; i < seq_head_.weights.rows(); ++i)
          for (std::size_t j = 0; j < seq_head_.weights.cols(); ++j)
            grown(i, j) = seq_head_.weights(i, j);
        seq_head_.weights = std::move(grown);
        seq_head_.class_offsets.resize(seen);
        for (std::size_t c = 0; c < seen; ++c) seq_head_.class_offsets[c] = c;
        Rng rng(mix_seed(mix_seed(cfg_.seed, seed_salt::sequential), t + 1));
        std::vector<LossTraceRow> trace = detail::optimize_task(
            slice, backbone_, seq_adapter_, seq_head_, tc, rng, nullptr, nullptr);
        append_trace(trace);
        break;
      }
    }
  }

  void merge_stats(GaussianStats fresh) {
    for (auto& [cls, cs] : fresh) stats_[cls] = std::move(cs);
  }

  void append_trace(const std::vector<LossTraceRow>& rows) {
    for (LossTraceRow row : rows) {
      row.step = global_step_++;
      loss_trace_.push_back(row);
    }
  }

  std::vector<std::uint64_t> slice_reads() const {
    std::vector<std::uint64_t> reads;
    reads.reserve(train_slices_.size());
    for (const Dataset& s : train_slices_) reads.push_back(s.feature_reads);
    return reads;
  }

  void audit_training_reads(std::size_t t, const std::vector<std::uint64_t>& before) {
    audit_.reads_after_training.push_back(slice_reads());
    const auto& after = audit_.reads_after_training.back();
    for (std::size_t k = 0; k < before.size(); ++k) {
      if (k != t && after[k] != before[k])
        throw std::logic_error("exemplar-free violation: stage " + std::to_string(t + 1) +
                               " read training data of task " + std::to_string(k + 1));
    }
  }

  void check_backbone_frozen() {
    if (backbone_.checksum() != audit_.backbone_checksum) {
      audit_.backbone_frozen = false;
      throw std::logic_error("backbone weights changed during training");
    }
  }

  EmbedFn make_embed() const {
    if (cfg_.mode == RunMode::mos)
      return [this](const Vector& x, std::size_t task) {
        return backbone_.forward(x, registry_.adapter(task));
      };
    if (cfg_.mode == RunMode::first_adapter_only)
      return [this](const Vector& x, std::size_t task) {
        require(task == 0, "baseline mode only has the first adapter");
        return backbone_.forward(x, registry_.adapter(0));
      };
    return [this](const Vector& x, std::size_t task) {
      require(task == 0, "sequential mode has a single adapter");
      return backbone_.forward(x, seq_adapter_);
    };
  }

  void evaluate_stage(std::size_t t) {
    const std::size_t seen = plan_.map.classes_seen_through(t);
    const std::size_t tasks_trained = cfg_.mode == RunMode::mos ? t + 1 : 1;
    const EmbedFn embed = make_embed();

    std::vector<std::size_t> seen_classes(seen);
    for (std::size_t c = 0; c < seen; ++c) seen_classes[c] = c;
    const bool aligned_on = cfg_.variants.use_alignment && cfg_.mode != RunMode::sequential;
    if (aligned_on) {
      grow_aligned_head(seen);
      Rng rng(mix_seed(mix_seed(cfg_.seed, seed_salt::align), t + 1));
      TrainConfig align_cfg = cfg_.train;
      align_cfg.align_classifier = true;
      align_classifier(aligned_head_, seen_classes, stats_, align_cfg, rng);
    }

    std::size_t total = 0, correct = 0, retrieval_correct = 0, aligned_correct = 0;
    std::size_t iter_sum = 0, cycles = 0;
    std::size_t instance_id = 0;
    for (std::size_t k = 0; k <= t; ++k) {
      const Dataset& slice = test_slices_[k];
      for (std::size_t i = 0; i < slice.size(); ++i) {
        const Vector& x = slice.feature(i);
        const std::size_t y = slice.labels[i];

        std::size_t predicted = 0, initial_task = 0, final_task = 0;
        std::size_t top1_before = 0, top1_after = 0;
        RefineTrace trace;
        if (cfg_.mode == RunMode::sequential) {
          const Vector logits = matvec(backbone_.forward(x, seq_adapter_), seq_head_.weights);
          predicted = top1_before = top1_after = argmax_lowest(logits);
        } else {
          QueryEvaluator eval(x, bank_, plan_.map, seen, embed);
          if (cfg_.mode == RunMode::first_adapter_only) {
            trace.visited.push_back(0);
          } else if (cfg_.variants.oracle_task_ids) {
            final_task = plan_.map.task_of(y);
            trace.visited.push_back(infer_task_id(eval.logits(0), plan_.map));
          } else {
            const std::size_t max_iter = cfg_.variants.use_self_refine ? tasks_trained : 1;
            auto refined = self_refine(eval, tasks_trained, max_iter);
            final_task = refined.first;
            trace = std::move(refined.second);
          }
          initial_task = trace.visited.front();
          top1_before = argmax_lowest(eval.logits(0));
          top1_after = argmax_lowest(eval.logits(final_task));
          predicted = top1_after;
          if (cfg_.mode == RunMode::mos && cfg_.variants.use_ensemble) {
            Vector sum = eval.logits(0);
            add_scaled(sum, eval.logits(final_task), 1.0);
            predicted = argmax_lowest(sum);
          }
          if (aligned_on) {
            const Vector logits = matvec(eval.embedding(final_task), aligned_head_);
            if (argmax_lowest(logits) == y) ++aligned_correct;
          }
        }

        ++total;
        if (predicted == y) ++correct;
        if (final_task == plan_.map.task_of(y)) ++retrieval_correct;
        iter_sum += trace.iterations;
        if (trace.reason == RefineReason::cycle_detected) ++cycles;
        if (cfg_.write_diagnostics) {
          diagnostics_ += std::to_string(t + 1) + "," + std::to_string(instance_id) + "," +
                          std::to_string(initial_task) + "," + std::to_string(final_task) + "," +
                          std::to_string(trace.iterations) + "," + to_string(trace.reason) + "," +
                          std::to_string(top1_before) + "," + std::to_string(top1_after) + "\n";
        }
        ++instance_id;
      }
    }

    require(total > 0, "evaluate_stage: no test data");
    StageMetrics m;
    m.stage = t + 1;
    m.classes_seen = seen;
    m.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(total);
    m.retrieval_accuracy = static_cast<double>(retrieval_correct) / static_cast<double>(total);
    m.mean_refine_iterations = static_cast<double>(iter_sum) / static_cast<double>(total);
    m.cycle_rate = static_cast<double>(cycles) / static_cast<double>(total);
    if (aligned_on) {
      m.has_aligned_accuracy = true;
      m.aligned_accuracy = 100.0 * static_cast<double>(aligned_correct) / static_cast<double>(total);
    }
    report_.stages.push_back(m);
  }

  void grow_aligned_head(std::size_t seen) {
    Matrix grown(backbone_.embed_dim(), seen);
    for (std::size_t i = 0; i < aligned_head_.rows(); ++i)
      for (std::size_t j = 0; j < aligned_head_.cols(); ++j) grown(i, j) = aligned_head_(i, j);
    aligned_head_ = std::move(grown);
  }

  void write_outputs() {
    namespace fs = std::filesystem;
    fs::create_directories(cfg_.output_dir);
    emit_report(report_, cfg_.output_dir);

    std::string trace_csv = "step,epoch,lr,loss\n";
    for (const LossTraceRow& row : loss_trace_)
      trace_csv += std::to_string(row.step) + "," + std::to_string(row.epoch) + "," +
                   fmt_double(row.lr) + "," + fmt_double(row.loss) + "\n";
    detail::write_text_file((fs::path(cfg_.output_dir) / "loss_trace.csv").string(), trace_csv);

    if (cfg_.write_diagnostics) {
      const std::string header =
          "stage,id,initial_task,final_task,iterations,reason,top1_before,top1_after\n";
      detail::write_text_file((fs::path(cfg_.output_dir) / "diagnostics.csv").string(),
                              header + diagnostics_);
    }

    if (cfg_.write_checkpoints) {
      const fs::path ckpt = fs::path(cfg_.output_dir) / "checkpoints";
      fs::create_directories(ckpt);
      backbone_.save((ckpt / "backbone.mos1").string());
      if (cfg_.mode == RunMode::sequential) {
        AdapterRegistry seq_registry(0.0);
        seq_registry.register_frozen(seq_adapter_);
        seq_registry.save((ckpt / "adapters").string());
      } else {
        registry_.save((ckpt / "adapters").string());
      }
      save_class_stats(stats_, (ckpt / "class_stats.mos1").string());
    }
  }

  ExperimentConfig cfg_;
  SplitPlan plan_;
  std::vector<Dataset> train_slices_;
  std::vector<Dataset> test_slices_;
  FrozenBackbone backbone_;
  AdapterRegistry registry_{0.1};
  AdapterSet seq_adapter_;
  TaskHead seq_head_;
  PrototypeBank bank_;
  GaussianStats stats_;
  Matrix aligned_head_;
  MetricsReport report_;
  std::vector<LossTraceRow> loss_trace_;
  std::string diagnostics_;
  std::size_t global_step_ = 0;
  RunAudit audit_;
};

inline MetricsReport run_experiment(const ExperimentConfig& cfg, RunAudit* audit = nullptr) {
  ExperimentRunner runner(cfg);
  MetricsReport report = runner.run();
  if (audit != nullptr) *audit = runner.audit();
  return report;
}

struct AblationRow {
  std::string variant;
  MetricsReport report;
};

/// Runs the component ladder of the ablation study plus the sequential
/// single-adapter anchor, all from one base config and seed. Per-variant
/// outputs land in <output_dir>/<variant>/ and a comparison CSV at the root.
inline std::vector<AblationRow> run_ablation(const ExperimentConfig& base) {
  base.validate();
  namespace fs = std::filesystem;

  struct VariantSpec {
    const char* name;
    RunMode mode;
    bool merge, refine, ensemble;
  };
  const std::vector<VariantSpec> specs = {
      {"sequential", RunMode::sequential, false, false, false},
      {"baseline", RunMode::first_adapter_only, false, false, false},
      {"merge", RunMode::mos, true, false, false},
      {"self_refine", RunMode::mos, true, true, false},
      {"ensemble", RunMode::mos, true, true, true},
  };

  std::vector<AblationRow> rows;
  for (const VariantSpec& v : specs) {
    ExperimentConfig cfg = base;
    cfg.mode = v.mode;
    cfg.variants.use_merge = v.merge;
    cfg.variants.use_self_refine = v.refine;
    cfg.variants.use_ensemble = v.ensemble;
    cfg.variants.oracle_task_ids = false;
    cfg.output_dir = (fs::path(base.output_dir) / v.name).string();
    ExperimentRunner runner(cfg);
    rows.push_back({v.name, runner.run()});
  }

  fs::create_directories(base.output_dir);
  std::string curve = "variant,stage,accuracy,retrieval_accuracy\n";
  for (const AblationRow& row : rows)
    for (const StageMetrics& s : row.report.stages)
      curve += row.variant + "," + std::to_string(s.stage) + "," + fmt_double(s.accuracy) + "," +
               fmt_double(s.retrieval_accuracy) + "\n";
  detail::write_text_file((fs::path(base.output_dir) / "ablation.csv").string(), curve);

  std::string summary = "variant,last_accuracy,average_accuracy\n";
  for (const AblationRow& row : rows)
    summary += row.variant + "," + fmt_double(row.report.last_accuracy) + "," +
               fmt_double(row.report.average_accuracy) + "\n";
  detail::write_text_file((fs::path(base.output_dir) / "ablation_summary.csv").string(), summary);
  return rows;
}

}  // namespace mos
