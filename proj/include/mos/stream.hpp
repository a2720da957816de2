// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mos/matrix.hpp"
#include "mos/rng.hpp"

namespace mos {

/// B-m Inc-n split protocol: base_m classes in the first task (or inc_n when
/// base_m = 0), inc_n per subsequent task, remainder classes in a final
/// shorter task.
struct StreamSpec {
  std::size_t total_classes = 0;
  std::size_t base_m = 0;
  std::size_t inc_n = 0;
  std::uint64_t shuffle_seed = 1993;

  void validate() const {
    require(total_classes >= 1, "StreamSpec: total_classes must be >= 1");
    require(base_m <= total_classes, "StreamSpec: base_m exceeds total_classes");
    if (base_m == 0) {
      require(inc_n >= 1, "StreamSpec: inc_n must be >= 1 when base_m = 0");
    } else if (base_m < total_classes) {
      require(inc_n >= 1, "StreamSpec: inc_n must be >= 1");
      require(base_m + inc_n <= total_classes,
              "StreamSpec: no room for an incremental task after the base task");
    }
  }
};

/// Class-to-task lookup over everything seen so far. Tasks partition the
/// class range; lookup stays valid for unequal split sizes where the
/// equal-split floor rule would not.
class ClassTaskMap {
 public:
  ClassTaskMap() = default;

  explicit ClassTaskMap(std::vector<std::size_t> task_sizes) {
    std::size_t next = 0;
    for (std::size_t t = 0; t < task_sizes.size(); ++t) {
      require(task_sizes[t] >= 1, "ClassTaskMap: empty task");
      std::vector<std::size_t> classes(task_sizes[t]);
      for (auto& c : classes) c = next++;
      tasks_.push_back(std::move(classes));
    }
    task_of_.resize(next);
    for (std::size_t t = 0; t < tasks_.size(); ++t)
      for (std::size_t c : tasks_[t]) task_of_[c] = t;
  }

  std::size_t num_tasks() const { return tasks_.size(); }
  std::size_t num_classes() const { return task_of_.size(); }

  std::size_t task_of(std::size_t cls) const {
    if (cls >= task_of_.size()) throw std::out_of_range("ClassTaskMap: unknown class");
    return task_of_[cls];
  }

  const std::vector<std::size_t>& classes_of(std::size_t task) const {
    if (task >= tasks_.size()) throw std::out_of_range("ClassTaskMap: unknown task");
    return tasks_[task];
  }

  /// Number of classes in tasks 0..task inclusive.
  std::size_t classes_seen_through(std::size_t task) const {
    if (task >= tasks_.size()) throw std::out_of_range("ClassTaskMap: unknown task");
    std::size_t n = 0;
    for (std::size_t t = 0; t <= task; ++t) n += tasks_[t].size();
    return n;
  }

 private:
  std::vector<std::vector<std::size_t>> tasks_;
  std::vector<std::size_t> task_of_;
};

/// Seeded class order plus the task partition over remapped class indices.
/// class_order[internal] is the raw dataset label assigned to internal class
/// id `internal`; internal ids are contiguous per task so equal splits obey
/// the floor rule by construction.
struct SplitPlan {
  std::vector<std::size_t> class_order;
  std::vector<std::size_t> internal_of_raw;
  ClassTaskMap map;
};

inline SplitPlan make_splits(const StreamSpec& spec) {
  spec.validate();
  SplitPlan plan;
  plan.class_order.resize(spec.total_classes);
  for (std::size_t i = 0; i < spec.total_classes; ++i) plan.class_order[i] = i;
  Rng rng(spec.shuffle_seed);
  for (std::size_t i = spec.total_classes; i > 1; --i) {
    const std::size_t j = rng.bounded(i);
    std::swap(plan.class_order[i - 1], plan.class_order[j]);
  }
  plan.internal_of_raw.resize(spec.total_classes);
  for (std::size_t internal = 0; internal < spec.total_classes; ++internal)
    plan.internal_of_raw[plan.class_order[internal]] = internal;

  std::vector<std::size_t> sizes;
  std::size_t remaining = spec.total_classes;
  if (spec.base_m > 0) {
    sizes.push_back(spec.base_m);
    remaining -= spec.base_m;
  }
  while (remaining > 0) {
    const std::size_t take = std::min(spec.inc_n, remaining);
    sizes.push_back(take);
    remaining -= take;
  }
  plan.map = ClassTaskMap(std::move(sizes));
  return plan;
}

enum class SplitTag { train, test };

/// Labeled feature set. feature() is the instrumented accessor backing the
/// exemplar-free audit; iterate through it rather than touching `features`
/// directly in training-stage code.
struct Dataset {
  std::vector<Vector> features;
  std::vector<std::size_t> labels;
  SplitTag tag = SplitTag::train;
  mutable std::uint64_t feature_reads = 0;

  std::size_t size() const { return features.size(); }

  const Vector& feature(std::size_t i) const {
    ++feature_reads;
    return features[i];
  }

  void validate(std::size_t num_classes) const {
    require(features.size() == labels.size(), "Dataset: feature/label length mismatch");
    for (std::size_t y : labels)
      require(y < num_classes, "Dataset: label exceeds declared class count");
    for (const Vector& f : features)
      require(all_finite(f), "Dataset: non-finite feature value");
  }
};

/// Gaussian-cluster benchmark generator: class means uniform on the sphere of
/// radius `separation`, instances mean + noise * N(0, I), 80/20 train/test
/// split per class. Deterministic per rng seed.
inline std::pair<Dataset, Dataset> synthetic_cil_dataset(std::size_t num_classes, std::size_t dim,
                                                         std::size_t per_class, double separation,
                                                         double noise, Rng& rng) {
  require(num_classes >= 1 && dim >= 1, "synthetic_cil_dataset: bad shape");
  require(per_class >= 2, "synthetic_cil_dataset: need at least 2 instances per class");
  require(separation > 0.0, "synthetic_cil_dataset: separation must be > 0");
  require(noise >= 0.0, "synthetic_cil_dataset: noise must be >= 0");

  Dataset train, test;
  train.tag = SplitTag::train;
  test.tag = SplitTag::test;
  const std::size_t n_train = std::max<std::size_t>(1, per_class * 4 / 5);
  for (std::size_t c = 0; c < num_classes; ++c) {
    Vector mean(dim);
    double norm = 0.0;
    do {
      for (double& v : mean) v = rng.normal();
      norm = norm2(mean);
    } while (norm < 1e-12);
    for (double& v : mean) v *= separation / norm;
    for (std::size_t i = 0; i < per_class; ++i) {
      Vector x = mean;
      for (double& v : x) v += noise * rng.normal();
      Dataset& dst = i < n_train ? train : test;
      dst.features.push_back(std::move(x));
      dst.labels.push_back(c);
    }
  }
  return {std::move(train), std::move(test)};
}

inline constexpr char kDatasetMagic[4] = {'M', 'O', 'S', 'D'};

/// CSV: one row per instance, real features followed by an integer label in
/// the last column. expected_classes = 0 skips the label-range check.
inline Dataset load_csv(const std::string& path, SplitTag tag, std::size_t expected_classes = 0) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  Dataset ds;
  ds.tag = tag;
  std::string line;
  std::size_t width = 0;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed number '" +
                                 cell + "'");
      }
      while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used]))) ++used;
      if (used != cell.size())
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed number '" +
                                 cell + "'");
      cells.push_back(v);
    }
    if (cells.size() < 2)
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": need features and label");
    if (width == 0) width = cells.size();
    if (cells.size() != width)
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": ragged row");
    const double label_val = cells.back();
    if (label_val < 0.0 || label_val != std::floor(label_val))
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": label must be a "
                               "non-negative integer");
    cells.pop_back();
    ds.features.push_back(std::move(cells));
    ds.labels.push_back(static_cast<std::size_t>(label_val));
  }
  if (ds.features.empty()) throw std::runtime_error(path + ": empty dataset");
  if (expected_classes > 0) ds.validate(expected_classes);
  return ds;
}

inline void save_f32bin(const Dataset& ds, const std::string& path) {
  require(!ds.features.empty(), "save_f32bin: empty dataset");
  const std::size_t dim = ds.features.front().size();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  auto put_u32 = [&](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                          static_cast<unsigned char>((v >> 8) & 0xFF),
                          static_cast<unsigned char>((v >> 16) & 0xFF),
                          static_cast<unsigned char>((v >> 24) & 0xFF)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  out.write(kDatasetMagic, 4);
  put_u32(static_cast<std::uint32_t>(ds.features.size()));
  put_u32(static_cast<std::uint32_t>(dim));
  for (const Vector& f : ds.features) {
    require(f.size() == dim, "save_f32bin: ragged feature rows");
    for (double v : f) {
      const float fv = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &fv, 4);
      put_u32(bits);
    }
  }
  for (std::size_t y : ds.labels) put_u32(static_cast<std::uint32_t>(y));
  if (!out) throw std::runtime_error("write failed for " + path);
}

inline Dataset load_f32bin(const std::string& path, SplitTag tag,
                           std::size_t expected_classes = 0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size()) throw std::runtime_error(path + ": truncated dataset file");
  };
  auto get_u32 = [&]() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i)])) << (8 * i);
    pos += 4;
    return v;
  };
  need(4);
  if (std::memcmp(bytes.data(), kDatasetMagic, 4) != 0)
    throw std::runtime_error(path + ": bad dataset magic");
  pos += 4;
  const std::uint32_t n = get_u32();
  const std::uint32_t dim = get_u32();
  if (n == 0 || dim == 0) throw std::runtime_error(path + ": empty dataset");
  Dataset ds;
  ds.tag = tag;
  ds.features.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    Vector f(dim);
    for (std::uint32_t j = 0; j < dim; ++j) {
      const std::uint32_t bits = get_u32();
      float fv;
      std::memcpy(&fv, &bits, 4);
      f[j] = static_cast<double>(fv);
    }
    ds.features.push_back(std::move(f));
  }
  ds.labels.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) ds.labels.push_back(get_u32());
  if (pos != bytes.size()) throw std::runtime_error(path + ": trailing bytes in dataset file");
  if (expected_classes > 0) ds.validate(expected_classes);
  return ds;
}

enum class DatasetFormat { csv, f32bin };

inline Dataset load_dataset(const std::string& path, DatasetFormat format, SplitTag tag,
                            std::size_t expected_classes = 0) {
  return format == DatasetFormat::csv ? load_csv(path, tag, expected_classes)
                                      : load_f32bin(path, tag, expected_classes);
}

/// Rewrites raw dataset labels into the split plan's internal class ids.
inline Dataset remap_labels(const Dataset& ds, const SplitPlan& plan) {
  Dataset out;
  out.tag = ds.tag;
  out.features = ds.features;
  out.labels.reserve(ds.labels.size());
  for (std::size_t raw : ds.labels) {
    require(raw < plan.internal_of_raw.size(), "remap_labels: label outside split plan");
    out.labels.push_back(plan.internal_of_raw[raw]);
  }
  return out;
}

/// Instances whose (already remapped) label falls in the given task's class
/// list. Order of the source dataset is preserved.
inline Dataset filter_task(const Dataset& ds, const ClassTaskMap& map, std::size_t task) {
  Dataset out;
  out.tag = ds.tag;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (map.task_of(ds.labels[i]) == task) {
      out.features.push_back(ds.features[i]);
      out.labels.push_back(ds.labels[i]);
    }
  return out;
}

}  // namespace mos
