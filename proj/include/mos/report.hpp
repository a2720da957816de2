// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mos/matrix.hpp"

#include "json.hpp"

namespace mos {

/// Shortest round-trip decimal form of a double; every number written to a
/// report parses back to the identical bit pattern, which keeps emitted files
/// byte-stable and lets consistency checkers compare exactly.
inline std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

struct StageMetrics {
  std::size_t stage = 0;  // 1-based
  std::size_t classes_seen = 0;
  double accuracy = 0.0;             // percent over all seen test data
  double retrieval_accuracy = 0.0;   // fraction with final task == true task
  double mean_refine_iterations = 0.0;
  double cycle_rate = 0.0;           // fraction terminated by cycle detection
  bool has_aligned_accuracy = false;
  double aligned_accuracy = 0.0;     // percent, replayed-Gaussian head
};

struct MetricsReport {
  std::vector<StageMetrics> stages;
  double last_accuracy = 0.0;
  double average_accuracy = 0.0;  // exact mean of per-stage accuracies

  void finalize() {
    require(!stages.empty(), "MetricsReport: no stages");
    double sum = 0.0;
    for (const StageMetrics& s : stages) {
      require(s.accuracy >= 0.0 && s.accuracy <= 100.0, "MetricsReport: accuracy out of range");
      sum += s.accuracy;
    }
    last_accuracy = stages.back().accuracy;
    average_accuracy = sum / static_cast<double>(stages.size());
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["stages"] = nlohmann::ordered_json::array();
    for (const StageMetrics& s : stages) {
      nlohmann::ordered_json row;
      row["stage"] = s.stage;
      row["classes_seen"] = s.classes_seen;
      row["accuracy"] = s.accuracy;
      row["retrieval_accuracy"] = s.retrieval_accuracy;
      row["mean_refine_iterations"] = s.mean_refine_iterations;
      row["cycle_rate"] = s.cycle_rate;
      if (s.has_aligned_accuracy) row["aligned_accuracy"] = s.aligned_accuracy;
      j["stages"].push_back(row);
    }
    j["last_accuracy"] = last_accuracy;
    j["average_accuracy"] = average_accuracy;
    return j;
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    for (const auto& row : j.at("stages")) {
      StageMetrics s;
      s.stage = row.at("stage").get<std::size_t>();
      s.classes_seen = row.at("classes_seen").get<std::size_t>();
      s.accuracy = row.at("accuracy").get<double>();
      s.retrieval_accuracy = row.at("retrieval_accuracy").get<double>();
      s.mean_refine_iterations = row.at("mean_refine_iterations").get<double>();
      s.cycle_rate = row.at("cycle_rate").get<double>();
      if (row.contains("aligned_accuracy")) {
        s.has_aligned_accuracy = true;
        s.aligned_accuracy = row.at("aligned_accuracy").get<double>();
      }
      r.stages.push_back(s);
    }
    r.last_accuracy = j.at("last_accuracy").get<double>();
    r.average_accuracy = j.at("average_accuracy").get<double>();
    return r;
  }

  static MetricsReport from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return from_json(nlohmann::json::parse(in));
  }
};

namespace detail {

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace detail

/// Writes metrics.json, the per-stage CSV and the plot-ready accuracy curve
/// into `dir`. Output is byte-stable for identical reports.
inline void emit_report(const MetricsReport& report, const std::string& dir) {
  require(!report.stages.empty(), "emit_report: empty report");
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  detail::write_text_file((fs::path(dir) / "metrics.json").string(),
                          report.to_json().dump(2) + "\n");

  const bool aligned = report.stages.front().has_aligned_accuracy;
  std::string csv =
      "stage,classes_seen,accuracy,retrieval_accuracy,mean_refine_iterations,cycle_rate";
  if (aligned) csv += ",aligned_accuracy";
  csv += "\n";
  for (const StageMetrics& s : report.stages) {
    csv += std::to_string(s.stage) + "," + std::to_string(s.classes_seen) + "," +
           fmt_double(s.accuracy) + "," + fmt_double(s.retrieval_accuracy) + "," +
           fmt_double(s.mean_refine_iterations) + "," + fmt_double(s.cycle_rate);
    if (aligned) csv += "," + fmt_double(s.aligned_accuracy);
    csv += "\n";
  }
  detail::write_text_file((fs::path(dir) / "stages.csv").string(), csv);

  std::string curve = "stage,accuracy\n";
  for (const StageMetrics& s : report.stages)
    curve += std::to_string(s.stage) + "," + fmt_double(s.accuracy) + "\n";
  detail::write_text_file((fs::path(dir) / "accuracy_curve.csv").string(), curve);
}

/// Re-derives the summary fields from the per-stage list and compares them
/// exactly against the stored values; the `report` CLI subcommand uses this
/// as an external consistency check.
inline bool verify_report_consistency(const MetricsReport& report, std::string* detail = nullptr) {
  if (report.stages.empty()) {
    if (detail) *detail = "report has no stages";
    return false;
  }
  double sum = 0.0;
  for (const StageMetrics& s : report.stages) sum += s.accuracy;
  const double avg = sum / static_cast<double>(report.stages.size());
  if (avg != report.average_accuracy) {
    if (detail)
      *detail = "average_accuracy mismatch: stored " + fmt_double(report.average_accuracy) +
                ", recomputed " + fmt_double(avg);
    return false;
  }
  if (report.stages.back().accuracy != report.last_accuracy) {
    if (detail) *detail = "last_accuracy does not match final stage";
    return false;
  }
  return true;
}

}  // namespace mos
