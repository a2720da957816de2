// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mos/backbone.hpp"
#include "mos/checkpoint.hpp"
#include "mos/matrix.hpp"
#include "mos/rng.hpp"

namespace mos {

/// Fresh task adapter: W_down uniform in [-0.02, 0.02], W_up all zeros so the
/// adapter starts as an exact no-op on the frozen path.
inline AdapterSet init_adapter(std::size_t task_index, const BackboneConfig& cfg, std::size_t r,
                               Rng& rng) {
  require(r >= 1, "init_adapter: bottleneck must be >= 1");
  AdapterSet a;
  a.bottleneck = r;
  a.task_index = task_index;
  a.w_down.reserve(cfg.num_blocks);
  a.w_up.reserve(cfg.num_blocks);
  for (std::size_t l = 0; l < cfg.num_blocks; ++l) {
    Matrix down(cfg.embed_dim, r);
    for (double& v : down.data()) v = rng.uniform(-0.02, 0.02);
    a.w_down.push_back(std::move(down));
    a.w_up.emplace_back(r, cfg.embed_dim);
  }
  return a;
}

inline std::size_t adapter_parameter_count(const AdapterSet& a) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < a.w_down.size(); ++l) n += a.w_down[l].size() + a.w_up[l].size();
  return n;
}

/// Element-wise merge of the in-training adapter with the uniform mean of all
/// frozen predecessors:
///   merged = (1 - alpha) * current + (alpha / (b-1)) * sum(history).
/// The predecessor sum is accumulated in registration order so an
/// independently coded loop reproduces the result bitwise.
inline AdapterSet ema_merge(const AdapterSet& current, const std::vector<AdapterSet>& history,
                            double alpha) {
  require(!history.empty(), "ema_merge: history is empty (stage 1 performs no merge)");
  require(alpha >= 0.0 && alpha <= 1.0, "ema_merge: alpha outside [0, 1]");
  const double coef = alpha / static_cast<double>(history.size());
  AdapterSet merged = current;
  for (const AdapterSet& past : history) {
    require(past.w_down.size() == current.w_down.size() && past.bottleneck == current.bottleneck,
            "ema_merge: adapter shape mismatch");
    for (std::size_t l = 0; l < current.w_down.size(); ++l)
      require(past.w_down[l].rows() == current.w_down[l].rows() &&
                  past.w_up[l].cols() == current.w_up[l].cols(),
              "ema_merge: adapter shape mismatch");
  }
  for (std::size_t l = 0; l < current.w_down.size(); ++l) {
    auto merge_tensor = [&](Matrix& out, const Matrix& cur, auto member) {
      for (std::size_t i = 0; i < out.size(); ++i) {
        double acc = 0.0;
        for (const AdapterSet& past : history) acc += (past.*member)[l].data()[i];
        out.data()[i] = (1.0 - alpha) * cur.data()[i] + coef * acc;
      }
    };
    merge_tensor(merged.w_down[l], current.w_down[l], &AdapterSet::w_down);
    merge_tensor(merged.w_up[l], current.w_up[l], &AdapterSet::w_up);
  }
  return merged;
}

/// Ordered store of frozen task adapters. History entries never mutate after
/// registration; audit() re-verifies their content checksums.
class AdapterRegistry {
 public:
  explicit AdapterRegistry(double alpha) : alpha_(alpha) {
    require(alpha >= 0.0 && alpha <= 1.0, "AdapterRegistry: alpha outside [0, 1]");
  }

  double alpha() const { return alpha_; }
  std::size_t stages() const { return history_.size(); }
  const std::vector<AdapterSet>& history() const { return history_; }

  /// Adapter for 0-based task id.
  const AdapterSet& adapter(std::size_t task) const {
    if (task >= history_.size()) throw std::out_of_range("AdapterRegistry: no such task");
    return history_[task];
  }

  std::uint64_t checksum_of(std::size_t task) const {
    if (task >= checksums_.size()) throw std::out_of_range("AdapterRegistry: no such task");
    return checksums_[task];
  }

  void register_frozen(AdapterSet adapter) {
    if (adapter.task_index != history_.size() + 1)
      throw std::invalid_argument("AdapterRegistry: out-of-order task index " +
                                  std::to_string(adapter.task_index));
    checksums_.push_back(adapter.checksum());
    history_.push_back(std::move(adapter));
  }

  /// Throws if any frozen adapter's content no longer matches its
  /// registration checksum.
  void audit() const {
    for (std::size_t k = 0; k < history_.size(); ++k)
      if (history_[k].checksum() != checksums_[k])
        throw std::logic_error("AdapterRegistry: frozen adapter " + std::to_string(k + 1) +
                               " was mutated after registration");
  }

  /// One checkpoint file per adapter plus an index JSON with task order,
  /// alpha, bottleneck and checksums.
  void save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::ordered_json index;
    index["alpha"] = alpha_;
    index["bottleneck"] = history_.empty() ? 0 : history_.front().bottleneck;
    index["tasks"] = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < history_.size(); ++k) {
      const AdapterSet& a = history_[k];
      const std::string file = adapter_file_name(a.task_index);
      save_adapter(a, (fs::path(dir) / file).string());
      nlohmann::ordered_json entry;
      entry["task_index"] = a.task_index;
      entry["file"] = file;
      entry["checksum"] = checksum_hex(checksums_[k]);
      index["tasks"].push_back(entry);
    }
    std::ofstream out(fs::path(dir) / "adapters_index.json", std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write adapter index in " + dir);
    out << index.dump(2) << "\n";
  }

  static AdapterRegistry load(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "adapters_index.json");
    if (!in) throw std::runtime_error("cannot open adapter index in " + dir);
    nlohmann::json index = nlohmann::json::parse(in);
    AdapterRegistry reg(index.at("alpha").get<double>());
    for (const auto& entry : index.at("tasks")) {
      AdapterSet a = load_adapter((fs::path(dir) / entry.at("file").get<std::string>()).string());
      if (checksum_hex(a.checksum()) != entry.at("checksum").get<std::string>())
        throw std::runtime_error("adapter checksum mismatch for " +
                                 entry.at("file").get<std::string>());
      reg.register_frozen(std::move(a));
    }
    return reg;
  }

  static std::string adapter_file_name(std::size_t task_index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "adapter_%03zu.mos1", task_index);
    return buf;
  }

  static void save_adapter(const AdapterSet& a, const std::string& path) {
    const std::size_t L = a.w_down.size();
    require(L >= 1, "save_adapter: empty adapter");
    const std::size_t d = a.w_down.front().rows();
    const std::vector<std::uint32_t> manifest = {
        static_cast<std::uint32_t>(L), static_cast<std::uint32_t>(d),
        static_cast<std::uint32_t>(a.bottleneck), static_cast<std::uint32_t>(a.task_index)};
    nlohmann::ordered_json sidecar;
    sidecar["kind"] = "adapter";
    sidecar["num_blocks"] = L;
    sidecar["embed_dim"] = d;
    sidecar["bottleneck"] = a.bottleneck;
    sidecar["task_index"] = a.task_index;
    sidecar["checksum"] = checksum_hex(a.checksum());
    write_checkpoint(path, RecordKind::adapter, manifest, a.tensors(), sidecar);
  }

  static AdapterSet load_adapter(const std::string& path) {
    const CheckpointPayload payload = read_checkpoint(path);
    if (payload.kind != RecordKind::adapter)
      throw std::runtime_error(path + ": not an adapter checkpoint");
    if (payload.manifest.size() != 4) throw std::runtime_error(path + ": bad adapter manifest");
    const std::size_t L = payload.manifest[0];
    const std::size_t d = payload.manifest[1];
    AdapterSet a;
    a.bottleneck = payload.manifest[2];
    a.task_index = payload.manifest[3];
    if (payload.values.size() != L * 2 * d * a.bottleneck)
      throw std::runtime_error(path + ": adapter payload size mismatch");
    std::size_t pos = 0;
    for (std::size_t l = 0; l < L; ++l) {
      Matrix down(d, a.bottleneck);
      for (double& v : down.data()) v = static_cast<double>(payload.values[pos++]);
      Matrix up(a.bottleneck, d);
      for (double& v : up.data()) v = static_cast<double>(payload.values[pos++]);
      if (!all_finite(down) || !all_finite(up))
        throw std::runtime_error(path + ": non-finite adapter weights");
      a.w_down.push_back(std::move(down));
      a.w_up.push_back(std::move(up));
    }
    return a;
  }

 private:
  double alpha_;
  std::vector<AdapterSet> history_;
  std::vector<std::uint64_t> checksums_;
};

}  // namespace mos
