// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "mos/adapters.hpp"
#include "mos/backbone.hpp"

#include "oracle_helpers.hpp"

using namespace mos;

namespace {

BackboneConfig dims(std::size_t d, std::size_t blocks) {
  BackboneConfig cfg;
  cfg.input_dim = 4;
  cfg.embed_dim = d;
  cfg.hidden_dim = 4;
  cfg.num_blocks = blocks;
  return cfg;
}

AdapterSet constant_adapter(const BackboneConfig& cfg, std::size_t r, std::size_t task,
                            double value) {
  AdapterSet a;
  a.bottleneck = r;
  a.task_index = task;
  for (std::size_t l = 0; l < cfg.num_blocks; ++l) {
    a.w_down.emplace_back(cfg.embed_dim, r, value);
    a.w_up.emplace_back(r, cfg.embed_dim, value);
  }
  return a;
}

AdapterSet random_full_adapter(const BackboneConfig& cfg, std::size_t r, std::size_t task,
                               Rng& rng) {
  AdapterSet a = constant_adapter(cfg, r, task, 0.0);
  for (auto& m : a.w_down)
    for (double& v : m.data()) v = rng.uniform(-1.0, 1.0);
  for (auto& m : a.w_up)
    for (double& v : m.data()) v = rng.uniform(-1.0, 1.0);
  return a;
}

bool same_values(const AdapterSet& a, const AdapterSet& b) {
  if (a.w_down.size() != b.w_down.size()) return false;
  for (std::size_t l = 0; l < a.w_down.size(); ++l)
    if (!(a.w_down[l] == b.w_down[l]) || !(a.w_up[l] == b.w_up[l])) return false;
  return true;
}

}  // namespace

TEST_CASE("init_adapter: fresh adapter is a no-op on the frozen path") {
  BackboneConfig cfg = dims(8, 2);
  cfg.init_seed = 5;
  cfg.init_scale = 0.3;
  const FrozenBackbone bb = FrozenBackbone::build(cfg);
  Rng rng(7);
  const AdapterSet fresh = init_adapter(1, cfg, 4, rng);
  for (const auto& m : fresh.w_up)
    for (double v : m.data()) REQUIRE(v == 0.0);
  Vector x = {0.3, -0.2, 0.9, -0.5};
  REQUIRE(bb.forward(x, fresh) == bb.forward(x));
}

TEST_CASE("init_adapter: deterministic per seed") {
  const BackboneConfig cfg = dims(8, 2);
  Rng a(99), b(99);
  REQUIRE(init_adapter(1, cfg, 4, a).checksum() == init_adapter(1, cfg, 4, b).checksum());
}

TEST_CASE("init_adapter: parameter count follows L * 2dr") {
  const BackboneConfig cfg = dims(32, 2);
  Rng rng(1);
  const AdapterSet a = init_adapter(1, cfg, 16, rng);
  REQUIRE(adapter_parameter_count(a) == 2048);
}

TEST_CASE("ema_merge: pinned two-stage substitution") {
  const BackboneConfig cfg = dims(3, 2);
  const AdapterSet current = constant_adapter(cfg, 2, 2, 1.0);
  const std::vector<AdapterSet> history = {constant_adapter(cfg, 2, 1, 0.0)};
  const AdapterSet merged = ema_merge(current, history, 0.1);
  for (std::size_t l = 0; l < merged.w_down.size(); ++l) {
    for (double v : merged.w_down[l].data()) REQUIRE(v == 0.9);
    for (double v : merged.w_up[l].data()) REQUIRE(v == 0.9);
  }
}

TEST_CASE("ema_merge: alpha 0 returns the current adapter bitwise") {
  const BackboneConfig cfg = dims(5, 1);
  Rng rng(3);
  const AdapterSet current = random_full_adapter(cfg, 3, 3, rng);
  const std::vector<AdapterSet> history = {random_full_adapter(cfg, 3, 1, rng),
                                           random_full_adapter(cfg, 3, 2, rng)};
  REQUIRE(same_values(ema_merge(current, history, 0.0), current));
}

TEST_CASE("ema_merge: pinned three-stage substitution") {
  const BackboneConfig cfg = dims(3, 1);
  const AdapterSet current = constant_adapter(cfg, 2, 3, 0.0);
  const std::vector<AdapterSet> history = {constant_adapter(cfg, 2, 1, 1.0),
                                           constant_adapter(cfg, 2, 2, 3.0)};
  const AdapterSet merged = ema_merge(current, history, 0.1);
  for (double v : merged.w_down[0].data()) REQUIRE(v == 0.2);
  for (double v : merged.w_up[0].data()) REQUIRE(v == 0.2);
}

TEST_CASE("ema_merge: empty history is a stage-1 contract violation") {
  const BackboneConfig cfg = dims(3, 1);
  const AdapterSet current = constant_adapter(cfg, 2, 1, 1.0);
  REQUIRE_THROWS_AS(ema_merge(current, {}, 0.1), std::invalid_argument);
}

TEST_CASE("ema_merge: shape mismatch is rejected") {
  const BackboneConfig cfg = dims(3, 1);
  const AdapterSet current = constant_adapter(cfg, 2, 2, 1.0);
  const std::vector<AdapterSet> history = {constant_adapter(cfg, 3, 1, 1.0)};
  REQUIRE_THROWS_AS(ema_merge(current, history, 0.1), std::invalid_argument);
}

TEST_CASE("ema_merge: exact linearity under power-of-two scaling") {
  const BackboneConfig cfg = dims(4, 2);
  Rng rng(11);
  const AdapterSet current = random_full_adapter(cfg, 3, 4, rng);
  std::vector<AdapterSet> history = {random_full_adapter(cfg, 3, 1, rng),
                                     random_full_adapter(cfg, 3, 2, rng),
                                     random_full_adapter(cfg, 3, 3, rng)};
  const AdapterSet merged = ema_merge(current, history, 0.37);
  AdapterSet current2 = current;
  std::vector<AdapterSet> history2 = history;
  auto scale2 = [](AdapterSet& a) {
    for (auto& m : a.w_down)
      for (double& v : m.data()) v *= 2.0;
    for (auto& m : a.w_up)
      for (double& v : m.data()) v *= 2.0;
  };
  scale2(current2);
  for (auto& h : history2) scale2(h);
  AdapterSet merged2 = ema_merge(current2, history2, 0.37);
  auto halve = [](AdapterSet& a) {
    for (auto& m : a.w_down)
      for (double& v : m.data()) v *= 0.5;
    for (auto& m : a.w_up)
      for (double& v : m.data()) v *= 0.5;
  };
  halve(merged2);
  REQUIRE(same_values(merged2, merged));
}

TEST_CASE("ema_merge: output lies between current and history mean") {
  const BackboneConfig cfg = dims(4, 2);
  Rng rng(13);
  for (double alpha : {0.0, 0.1, 0.5, 0.93, 1.0}) {
    const AdapterSet current = random_full_adapter(cfg, 2, 3, rng);
    std::vector<AdapterSet> history = {random_full_adapter(cfg, 2, 1, rng),
                                       random_full_adapter(cfg, 2, 2, rng)};
    const AdapterSet merged = ema_merge(current, history, alpha);
    for (std::size_t l = 0; l < cfg.num_blocks; ++l)
      for (std::size_t i = 0; i < merged.w_down[l].size(); ++i) {
        const double cur = current.w_down[l].data()[i];
        double mean = 0.0;
        for (const auto& h : history) mean += h.w_down[l].data()[i];
        mean /= static_cast<double>(history.size());
        const double lo = std::min(cur, mean) - 1e-12;
        const double hi = std::max(cur, mean) + 1e-12;
        REQUIRE(merged.w_down[l].data()[i] >= lo);
        REQUIRE(merged.w_down[l].data()[i] <= hi);
      }
  }
}

TEST_CASE("ema_merge: bitwise agreement with the straight-loop oracle") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const BackboneConfig cfg = dims(1 + rng.bounded(6), 1 + rng.bounded(3));
    const std::size_t r = 1 + rng.bounded(4);
    const std::size_t b = 2 + rng.bounded(5);
    std::vector<AdapterSet> history;
    for (std::size_t k = 1; k < b; ++k) history.push_back(random_full_adapter(cfg, r, k, rng));
    const AdapterSet current = random_full_adapter(cfg, r, b, rng);
    const double alpha = rng.uniform01();
    REQUIRE(same_values(ema_merge(current, history, alpha),
                        oracle::ema_merge_loops(current, history, alpha)));
  }
}

TEST_CASE("registry: registration order is enforced") {
  const BackboneConfig cfg = dims(4, 1);
  AdapterRegistry reg(0.1);
  reg.register_frozen(constant_adapter(cfg, 2, 1, 0.5));
  reg.register_frozen(constant_adapter(cfg, 2, 2, 0.25));
  REQUIRE(reg.stages() == 2);
  REQUIRE(reg.adapter(0).task_index == 1);
  REQUIRE(reg.adapter(1).task_index == 2);
  REQUIRE_THROWS_AS(reg.register_frozen(constant_adapter(cfg, 2, 2, 0.1)),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(reg.adapter(2), std::out_of_range);
  reg.audit();  // untouched history passes
}

TEST_CASE("registry: checksums distinguish content") {
  const BackboneConfig cfg = dims(4, 1);
  const AdapterSet a = constant_adapter(cfg, 2, 1, 0.5);
  AdapterSet b = a;
  b.w_up[0](0, 0) += 0.125;
  REQUIRE(a.checksum() != b.checksum());
}

TEST_CASE("registry: save/load round trip with checksum verification") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "mos_registry_rt";
  fs::remove_all(dir);
  const BackboneConfig cfg = dims(6, 2);
  Rng rng(19);
  AdapterRegistry reg(0.1);
  reg.register_frozen(random_full_adapter(cfg, 3, 1, rng));
  reg.register_frozen(random_full_adapter(cfg, 3, 2, rng));
  reg.save(dir.string());

  const AdapterRegistry loaded = AdapterRegistry::load(dir.string());
  REQUIRE(loaded.stages() == 2);
  REQUIRE(loaded.alpha() == 0.1);
  for (std::size_t k = 0; k < 2; ++k) {
    REQUIRE(loaded.checksum_of(k) == reg.checksum_of(k));
    REQUIRE(loaded.adapter(k).task_index == k + 1);
  }

  // A corrupted payload fails the index checksum on load.
  const fs::path victim = dir / AdapterRegistry::adapter_file_name(2);
  std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(-4, std::ios::end);
  const char junk[4] = {0x13, 0x37, 0x13, 0x37};
  f.write(junk, 4);
  f.close();
  REQUIRE_THROWS_AS(AdapterRegistry::load(dir.string()), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("registry: adapter file size is payload plus fixed header") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "mos_registry_bytes";
  fs::remove_all(dir);
  const BackboneConfig cfg = dims(6, 2);
  Rng rng(23);
  AdapterRegistry reg(0.1);
  reg.register_frozen(random_full_adapter(cfg, 3, 1, rng));
  reg.save(dir.string());
  const auto size = fs::file_size(dir / AdapterRegistry::adapter_file_name(1));
  const std::size_t payload = cfg.num_blocks * 2 * cfg.embed_dim * 3 * 4;
  REQUIRE(size == checkpoint_header_bytes(4) + payload);
  fs::remove_all(dir);
}

TEST_CASE("registry: frozen history survives later merges untouched") {
  const BackboneConfig cfg = dims(4, 1);
  Rng rng(29);
  AdapterRegistry reg(0.1);
  reg.register_frozen(random_full_adapter(cfg, 2, 1, rng));
  reg.register_frozen(random_full_adapter(cfg, 2, 2, rng));
  const std::uint64_t c0 = reg.checksum_of(0);
  const std::uint64_t c1 = reg.checksum_of(1);
  AdapterSet current = random_full_adapter(cfg, 2, 3, rng);
  for (int step = 0; step < 50; ++step) current = ema_merge(current, reg.history(), 0.1);
  reg.audit();
  REQUIRE(reg.adapter(0).checksum() == c0);
  REQUIRE(reg.adapter(1).checksum() == c1);
}
