// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mos/matrix.hpp"
#include "mos/stream.hpp"
#include "mos/training.hpp"

namespace mos {

/// Embedding of an input under one task's adapter: phi(x; A_task), task
/// 0-based. Abstracting this keeps retrieval logic independent of the
/// backbone so it can be exercised on hand-built prototype tables.
using EmbedFn = std::function<Vector(const Vector& x, std::size_t task)>;

enum class RefineReason { fixed_point, cycle_detected, max_iter };

inline const char* to_string(RefineReason r) {
  switch (r) {
    case RefineReason::fixed_point: return "fixed_point";
    case RefineReason::cycle_detected: return "cycle_detected";
    case RefineReason::max_iter: return "max_iter";
  }
  return "unknown";
}

/// Record of one retrieval loop: the inferred task ids in order (first entry
/// is the initial inference through the first adapter), why it stopped, how
/// many re-inferences ran and how many distinct adapters were embedded.
struct RefineTrace {
  std::vector<std::size_t> visited;
  RefineReason reason = RefineReason::fixed_point;
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
};

/// Index of the largest logit; ties break toward the lowest class index so
/// metrics stay reproducible.
inline std::size_t argmax_lowest(const Vector& logits) {
  require(!logits.empty(), "argmax_lowest: empty logits");
  std::size_t best = 0;
  for (std::size_t k = 1; k < logits.size(); ++k)
    if (logits[k] > logits[best]) best = k;
  return best;
}

/// Prototype of class `cls` for queries through adapter `task`. Classes
/// introduced before `task` can never be embedded under it in the
/// exemplar-free protocol, so they resolve to the prototype taken under
/// their own task's adapter.
inline const Vector& resolve_prototype(const PrototypeBank& bank, const ClassTaskMap& map,
                                       std::size_t task, std::size_t cls) {
  if (bank.has(task, cls)) return bank.prototype(task, cls);
  return bank.prototype(map.task_of(cls), cls);
}

/// Cosine logits over the first `seen_classes` classes under one adapter.
inline Vector predict_with_adapter(const Vector& x, std::size_t task, const PrototypeBank& bank,
                                   const ClassTaskMap& map, std::size_t seen_classes,
                                   const EmbedFn& embed) {
  const Vector emb = embed(x, task);
  Vector logits(seen_classes);
  for (std::size_t c = 0; c < seen_classes; ++c)
    logits[c] = cosine_similarity(resolve_prototype(bank, map, task, c), emb);
  return logits;
}

/// Task of the argmax class via the lookup table. Generalizes the
/// equal-split floor rule to arbitrary split sizes.
inline std::size_t infer_task_id(const Vector& logits, const ClassTaskMap& map) {
  require(logits.size() <= map.num_classes(), "infer_task_id: logits exceed known classes");
  return map.task_of(argmax_lowest(logits));
}

/// Caches per-adapter embeddings and cosine logits for one query so the
/// retrieval loop never embeds the same adapter twice. The query and the
/// embedding functor are stored by value so callers may pass temporaries;
/// the bank and map must outlive the evaluator.
class QueryEvaluator {
 public:
  QueryEvaluator(Vector x, const PrototypeBank& bank, const ClassTaskMap& map,
                 std::size_t seen_classes, EmbedFn embed)
      : x_(std::move(x)), bank_(bank), map_(map), seen_classes_(seen_classes),
        embed_(std::move(embed)) {}

  bool cached(std::size_t task) const { return entries_.count(task) != 0; }

  const Vector& logits(std::size_t task) { return entry(task).logits; }
  const Vector& embedding(std::size_t task) { return entry(task).embedding; }

  std::size_t evaluations() const { return evaluations_; }
  const ClassTaskMap& map() const { return map_; }

 private:
  struct Entry {
    Vector embedding;
    Vector logits;
  };

  const Entry& entry(std::size_t task) {
    auto it = entries_.find(task);
    if (it == entries_.end()) {
      ++evaluations_;
      Entry e;
      e.embedding = embed_(x_, task);
      e.logits.resize(seen_classes_);
      for (std::size_t c = 0; c < seen_classes_; ++c)
        e.logits[c] = cosine_similarity(resolve_prototype(bank_, map_, task, c), e.embedding);
      it = entries_.emplace(task, std::move(e)).first;
    }
    return it->second;
  }

  Vector x_;
  const PrototypeBank& bank_;
  const ClassTaskMap& map_;
  std::size_t seen_classes_;
  EmbedFn embed_;
  std::map<std::size_t, Entry> entries_;
  std::size_t evaluations_ = 0;
};

/// Training-free retrieval loop: infer a task id through the first adapter,
/// re-embed with the inferred task's adapter, and repeat until the inferred
/// id confirms itself. A re-inferred task that was already visited closes a
/// cycle and the loop returns that task (the first element of the cycle);
/// exhausting the max_iter budget of fresh embeddings returns the current
/// candidate. Cached re-evaluations are free, so the loop performs at most
/// min(max_iter, tasks_trained) adapter evaluations.
inline std::pair<std::size_t, RefineTrace> self_refine(QueryEvaluator& eval,
                                                       std::size_t tasks_trained,
                                                       std::size_t max_iter) {
  require(tasks_trained >= 1, "self_refine: no trained adapters");
  require(max_iter >= 1, "self_refine: max_iter must be >= 1");
  const ClassTaskMap& map = eval.map();

  RefineTrace trace;
  std::size_t current = infer_task_id(eval.logits(0), map);
  trace.visited.push_back(current);
  if (current == 0) {
    trace.reason = RefineReason::fixed_point;
    trace.evaluations = eval.evaluations();
    return {current, trace};
  }
  while (true) {
    require(current < tasks_trained, "self_refine: inferred task has no adapter");
    if (!eval.cached(current) && eval.evaluations() >= max_iter) {
      trace.reason = RefineReason::max_iter;
      break;
    }
    const std::size_t next = infer_task_id(eval.logits(current), map);
    ++trace.iterations;
    if (next == current) {
      trace.reason = RefineReason::fixed_point;
      break;
    }
    if (std::find(trace.visited.begin(), trace.visited.end(), next) != trace.visited.end()) {
      trace.reason = RefineReason::cycle_detected;
      trace.visited.push_back(next);
      current = next;
      break;
    }
    trace.visited.push_back(next);
    current = next;
  }
  trace.evaluations = eval.evaluations();
  return {current, trace};
}

inline std::pair<std::size_t, RefineTrace> self_refine(const Vector& x, const PrototypeBank& bank,
                                                       const ClassTaskMap& map,
                                                       std::size_t tasks_trained,
                                                       std::size_t max_iter, const EmbedFn& embed,
                                                       std::size_t seen_classes) {
  QueryEvaluator eval(x, bank, map, seen_classes, embed);
  return self_refine(eval, tasks_trained, max_iter);
}

struct EnsembleResult {
  std::size_t predicted_class = 0;
  std::size_t initial_task = 0;
  std::size_t final_task = 0;
  Vector part1;  // cosine logits through the first adapter
  Vector part2;  // cosine logits through the retrieved adapter
  RefineTrace trace;
};

/// Two-stage ensemble: the raw sum of the first adapter's cosine logits and
/// the self-refined adapter's, argmaxed over everything seen so far. With a
/// single stage this reduces to the first adapter's own argmax.
inline EnsembleResult ensemble_predict(const Vector& x, const PrototypeBank& bank,
                                       const ClassTaskMap& map, std::size_t tasks_trained,
                                       std::size_t max_iter, const EmbedFn& embed,
                                       std::size_t seen_classes) {
  QueryEvaluator eval(x, bank, map, seen_classes, embed);
  EnsembleResult res;
  auto [final_task, trace] = self_refine(eval, tasks_trained, max_iter);
  res.final_task = final_task;
  res.trace = std::move(trace);
  res.initial_task = res.trace.visited.front();
  res.part1 = eval.logits(0);
  res.part2 = eval.logits(final_task);
  Vector sum = res.part1;
  add_scaled(sum, res.part2, 1.0);
  res.predicted_class = argmax_lowest(sum);
  return res;
}

}  // namespace mos
