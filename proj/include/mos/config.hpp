// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include "mos/backbone.hpp"
#include "mos/pretrain.hpp"
#include "mos/stream.hpp"
#include "mos/training.hpp"

#include "json.hpp"

namespace mos {

/// Raised for malformed or inconsistent configuration; the CLI maps it to
/// exit code 1 (runtime failures map to 2).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

enum class RunMode { mos, first_adapter_only, sequential };

inline const char* to_string(RunMode m) {
  switch (m) {
    case RunMode::mos: return "mos";
    case RunMode::first_adapter_only: return "first_adapter_only";
    case RunMode::sequential: return "sequential";
  }
  return "unknown";
}

inline RunMode run_mode_from_string(const std::string& s) {
  if (s == "mos") return RunMode::mos;
  if (s == "first_adapter_only") return RunMode::first_adapter_only;
  if (s == "sequential") return RunMode::sequential;
  throw ConfigError("unknown mode '" + s + "'");
}

struct VariantFlags {
  bool use_merge = true;
  bool use_self_refine = true;
  bool use_ensemble = true;
  bool use_alignment = false;
  bool oracle_task_ids = false;  // bypasses self-refinement when set
};

struct DataConfig {
  std::string source = "synthetic";  // synthetic | csv | f32bin
  std::size_t per_class = 40;
  double separation = 10.0;
  double noise = 1.0;
  std::string train_path;
  std::string test_path;

  void validate() const {
    if (source != "synthetic" && source != "csv" && source != "f32bin")
      throw ConfigError("data.source must be synthetic, csv or f32bin");
    if (source == "synthetic") {
      if (per_class < 2) throw ConfigError("data.per_class must be >= 2");
      if (!(separation > 0.0)) throw ConfigError("data.separation must be > 0");
      if (noise < 0.0) throw ConfigError("data.noise must be >= 0");
    } else if (train_path.empty() || test_path.empty()) {
      throw ConfigError("data.train_path and data.test_path are required for file sources");
    }
  }
};

struct ExperimentConfig {
  StreamSpec stream;
  BackboneConfig backbone;
  std::string backbone_checkpoint;  // load instead of seeded build when set
  bool pretrain_backbone = false;   // fit the backbone upstream before freezing
  PretrainConfig pretrain;
  TrainConfig train;
  DataConfig data;
  VariantFlags variants;
  RunMode mode = RunMode::mos;
  std::string output_dir = "mos-out";
  std::uint64_t seed = 1993;
  bool eval_final_stage_only = false;
  bool write_diagnostics = true;
  bool write_checkpoints = true;

  void validate() const {
    try {
      stream.validate();
      backbone.validate();
      train.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    data.validate();
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  }

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig from_json_file(const std::string& path);
  nlohmann::ordered_json to_json() const;
};

namespace detail {

/// Unknown keys are an error so config typos cannot silently alter a run.
inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& item : j.items())
    if (allowed.find(item.key()) == allowed.end())
      throw ConfigError(where + ": unknown key '" + item.key() + "'");
}

template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("bad value for '" + key + "'");
  }
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::get_or;
  check_keys(j, {"stream", "backbone", "train", "data", "variants", "mode", "output_dir", "seed",
                 "eval_final_stage_only", "write_diagnostics", "write_checkpoints"},
             "config");
  ExperimentConfig cfg;
  if (j.contains("stream")) {
    const auto& s = j.at("stream");
    check_keys(s, {"total_classes", "base_m", "inc_n", "shuffle_seed"}, "stream");
    cfg.stream.total_classes = get_or<std::size_t>(s, "total_classes", 0);
    cfg.stream.base_m = get_or<std::size_t>(s, "base_m", 0);
    cfg.stream.inc_n = get_or<std::size_t>(s, "inc_n", 0);
    cfg.stream.shuffle_seed = get_or<std::uint64_t>(s, "shuffle_seed", 1993);
  }
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    check_keys(b,
               {"input_dim", "embed_dim", "hidden_dim", "num_blocks", "use_identity_residual",
                "init_seed", "init_scale", "checkpoint", "pretrain"},
               "backbone");
    cfg.backbone.input_dim = get_or<std::size_t>(b, "input_dim", 1);
    cfg.backbone.embed_dim = get_or<std::size_t>(b, "embed_dim", 1);
    cfg.backbone.hidden_dim = get_or<std::size_t>(b, "hidden_dim", 1);
    cfg.backbone.num_blocks = get_or<std::size_t>(b, "num_blocks", 1);
    cfg.backbone.use_identity_residual = get_or<bool>(b, "use_identity_residual", true);
    cfg.backbone.init_seed = get_or<std::uint64_t>(b, "init_seed", 0);
    cfg.backbone.init_scale = get_or<double>(b, "init_scale", 0.02);
    cfg.backbone_checkpoint = get_or<std::string>(b, "checkpoint", "");
    if (b.contains("pretrain")) {
      const auto& p = b.at("pretrain");
      check_keys(p,
                 {"classes", "per_class", "separation", "noise", "epochs", "batch_size", "lr0",
                  "momentum", "seed"},
                 "backbone.pretrain");
      cfg.pretrain_backbone = true;
      cfg.pretrain.classes = get_or<std::size_t>(p, "classes", 50);
      cfg.pretrain.per_class = get_or<std::size_t>(p, "per_class", 40);
      cfg.pretrain.separation = get_or<double>(p, "separation", 10.0);
      cfg.pretrain.noise = get_or<double>(p, "noise", 1.0);
      cfg.pretrain.epochs = get_or<std::size_t>(p, "epochs", 30);
      cfg.pretrain.batch_size = get_or<std::size_t>(p, "batch_size", 48);
      cfg.pretrain.lr0 = get_or<double>(p, "lr0", 0.01);
      cfg.pretrain.momentum = get_or<double>(p, "momentum", 0.9);
      cfg.pretrain.seed = get_or<std::uint64_t>(p, "seed", 11);
    }
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t,
               {"epochs", "batch_size", "lr0", "momentum", "alpha", "bottleneck",
                "align_classifier", "align_multiplier", "merge_per_epoch"},
               "train");
    cfg.train.epochs = get_or<std::size_t>(t, "epochs", 20);
    cfg.train.batch_size = get_or<std::size_t>(t, "batch_size", 48);
    cfg.train.lr0 = get_or<double>(t, "lr0", 0.01);
    cfg.train.momentum = get_or<double>(t, "momentum", 0.9);
    cfg.train.alpha = get_or<double>(t, "alpha", 0.1);
    cfg.train.bottleneck = get_or<std::size_t>(t, "bottleneck", 16);
    cfg.train.align_classifier = get_or<bool>(t, "align_classifier", false);
    cfg.train.align_multiplier = get_or<std::size_t>(t, "align_multiplier", 5);
    cfg.train.merge_per_epoch = get_or<bool>(t, "merge_per_epoch", false);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, {"source", "per_class", "separation", "noise", "train_path", "test_path"},
               "data");
    cfg.data.source = get_or<std::string>(d, "source", "synthetic");
    cfg.data.per_class = get_or<std::size_t>(d, "per_class", 40);
    cfg.data.separation = get_or<double>(d, "separation", 10.0);
    cfg.data.noise = get_or<double>(d, "noise", 1.0);
    cfg.data.train_path = get_or<std::string>(d, "train_path", "");
    cfg.data.test_path = get_or<std::string>(d, "test_path", "");
  }
  if (j.contains("variants")) {
    const auto& v = j.at("variants");
    check_keys(v, {"use_merge", "use_self_refine", "use_ensemble", "use_alignment",
                   "oracle_task_ids"},
               "variants");
    cfg.variants.use_merge = get_or<bool>(v, "use_merge", true);
    cfg.variants.use_self_refine = get_or<bool>(v, "use_self_refine", true);
    cfg.variants.use_ensemble = get_or<bool>(v, "use_ensemble", true);
    cfg.variants.use_alignment = get_or<bool>(v, "use_alignment", false);
    cfg.variants.oracle_task_ids = get_or<bool>(v, "oracle_task_ids", false);
  }
  cfg.mode = run_mode_from_string(detail::get_or<std::string>(j, "mode", "mos"));
  cfg.output_dir = get_or<std::string>(j, "output_dir", "mos-out");
  cfg.seed = get_or<std::uint64_t>(j, "seed", 1993);
  cfg.eval_final_stage_only = get_or<bool>(j, "eval_final_stage_only", false);
  cfg.write_diagnostics = get_or<bool>(j, "write_diagnostics", true);
  cfg.write_checkpoints = get_or<bool>(j, "write_checkpoints", true);
  cfg.train.align_classifier = cfg.train.align_classifier || cfg.variants.use_alignment;
  cfg.variants.use_alignment = cfg.train.align_classifier;
  cfg.validate();
  return cfg;
}

/// MOS_OUT redirects all run outputs; the seed override mirrors --seed.
inline void apply_env_overrides(ExperimentConfig& cfg) {
  if (const char* out = std::getenv("MOS_OUT"); out != nullptr && out[0] != '\0')
    cfg.output_dir = out;
}

inline ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return from_json(j);
}

inline nlohmann::ordered_json ExperimentConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["mode"] = to_string(mode);
  j["output_dir"] = output_dir;
  j["eval_final_stage_only"] = eval_final_stage_only;
  j["write_diagnostics"] = write_diagnostics;
  j["write_checkpoints"] = write_checkpoints;
  j["stream"] = {{"total_classes", stream.total_classes},
                 {"base_m", stream.base_m},
                 {"inc_n", stream.inc_n},
                 {"shuffle_seed", stream.shuffle_seed}};
  j["backbone"] = {{"input_dim", backbone.input_dim},
                   {"embed_dim", backbone.embed_dim},
                   {"hidden_dim", backbone.hidden_dim},
                   {"num_blocks", backbone.num_blocks},
                   {"use_identity_residual", backbone.use_identity_residual},
                   {"init_seed", backbone.init_seed},
                   {"init_scale", backbone.init_scale},
                   {"checkpoint", backbone_checkpoint}};
  if (pretrain_backbone)
    j["backbone"]["pretrain"] = {{"classes", pretrain.classes},
                                 {"per_class", pretrain.per_class},
                                 {"separation", pretrain.separation},
                                 {"noise", pretrain.noise},
                                 {"epochs", pretrain.epochs},
                                 {"batch_size", pretrain.batch_size},
                                 {"lr0", pretrain.lr0},
                                 {"momentum", pretrain.momentum},
                                 {"seed", pretrain.seed}};
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"lr0", train.lr0},
                {"momentum", train.momentum},
                {"alpha", train.alpha},
                {"bottleneck", train.bottleneck},
                {"align_classifier", train.align_classifier},
                {"align_multiplier", train.align_multiplier},
                {"merge_per_epoch", train.merge_per_epoch}};
  j["data"] = {{"source", data.source},
               {"per_class", data.per_class},
               {"separation", data.separation},
               {"noise", data.noise},
               {"train_path", data.train_path},
               {"test_path", data.test_path}};
  j["variants"] = {{"use_merge", variants.use_merge},
                   {"use_self_refine", variants.use_self_refine},
                   {"use_ensemble", variants.use_ensemble},
                   {"use_alignment", variants.use_alignment},
                   {"oracle_task_ids", variants.oracle_task_ids}};
  return j;
}

}  // namespace mos
