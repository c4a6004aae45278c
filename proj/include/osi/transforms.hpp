// Copyright 2026 The osieval Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "osi/common.hpp"
#include "osi/embedding_store.hpp"
#include "osi/parallel.hpp"
#include "osi/scoring.hpp"
#include "osi/watchlist.hpp"

namespace osi {

/// Held-out impostor embeddings for normalization statistics. The cohort
/// population must be disjoint from both the enrolled and the tested
/// speakers; the caller is responsible for that provenance.
struct CohortSet {
  const EmbeddingStore* store = nullptr;
  std::size_t k = 1000;  ///< top-k size for normalization statistics
};

/// Mean and population standard deviation of the top-k cohort scores of one
/// trial side.
struct CohortStats {
  double mean = 0.0;
  double stddev = 0.0;
};

/// Top-k selection plus mean and population standard deviation over a raw
/// score list.
inline CohortStats stats_from_scores(std::vector<double> scores, std::size_t k) {
  if (k == 0) throw ContractError("cohort top-k must be positive");
  if (scores.size() < k)
    throw ContractError("cohort has " + std::to_string(scores.size()) +
                        " embeddings, fewer than top-k " + std::to_string(k));
  std::partial_sort(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(k),
                    scores.end(), std::greater<double>());
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) sum += scores[i];
  const double mean = sum / static_cast<double>(k);
  double sq = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double d = scores[i] - mean;
    sq += d * d;
  }
  const double stddev = std::sqrt(sq / static_cast<double>(k));
  if (stddev <= 0.0)
    throw ContractError("zero variance among top-" + std::to_string(k) +
                        " cohort scores");
  return {mean, stddev};
}

inline std::vector<double> cohort_scores(const EmbeddingRecord& reference,
                                         const CohortSet& cohort) {
  if (!cohort.store) throw ContractError("cohort store not set");
  std::vector<double> scores;
  scores.reserve(cohort.store->size());
  for (const EmbeddingRecord& rec : cohort.store->records())
    scores.push_back(cosine(reference, rec));
  return scores;
}

/// Scores the reference against every cohort embedding and summarizes the
/// top-k of them.
inline CohortStats cohort_stats(const EmbeddingRecord& reference, const CohortSet& cohort) {
  return stats_from_scores(cohort_scores(reference, cohort), cohort.k);
}

/// Symmetric two-sided adaptive normalization of one raw score, using the
/// enrollment-side and test-side cohort statistics.
inline double asnorm(double raw, const CohortStats& enroll_stats,
                     const CohortStats& test_stats) {
  return 0.5 * ((raw - enroll_stats.mean) / enroll_stats.stddev +
                (raw - test_stats.mean) / test_stats.stddev);
}

/// Renormalizes a scored run. Every per-speaker score of a trial is
/// normalized with that speaker's enrollment-side statistics and the shared
/// test-side statistics, and the maximum is re-taken; normalization is
/// applied before the max because it can change which speaker wins, which a
/// post-hoc transform of the winning score cannot. raw_score is left as the
/// plain cosine maximum; transformed_score and best_speaker are updated.
///
/// Cohort statistics are computed once per distinct enrollment or test
/// recording (not once per trial), then reused read-only across all trials.
inline std::vector<ScoreRecord> normalize_run(const std::vector<ScoreRecord>& records,
                                              const SplitPlan& plan,
                                              const EmbeddingStore& store,
                                              const CohortSet& cohort,
                                              unsigned threads = 0) {
  std::vector<EnrollmentMatrix> matrices;
  matrices.reserve(plan.splits.size());
  for (const WatchlistSplit& split : plan.splits)
    matrices.push_back(resolve_enrollment(split, store));

  std::vector<const EmbeddingRecord*> references;
  std::unordered_set<std::string> seen;
  for (const EnrollmentMatrix& m : matrices)
    for (const EmbeddingRecord* rec : m.embeddings)
      if (seen.insert(rec->recording_id).second) references.push_back(rec);
  for (const ScoreRecord& r : records) {
    const EmbeddingRecord* rec = store.find_recording(r.test_recording);
    if (!rec)
      throw ContractError("test recording '" + r.test_recording + "' not in store");
    if (seen.insert(rec->recording_id).second) references.push_back(rec);
  }

  std::vector<CohortStats> stats(references.size());
  parallel_for(references.size(), threads,
               [&](std::size_t i) { stats[i] = cohort_stats(*references[i], cohort); });
  std::unordered_map<std::string, CohortStats> stats_by_recording;
  stats_by_recording.reserve(references.size());
  for (std::size_t i = 0; i < references.size(); ++i)
    stats_by_recording.emplace(references[i]->recording_id, stats[i]);

  std::vector<ScoreRecord> out = records;
  parallel_for(out.size(), threads, [&](std::size_t i) {
    ScoreRecord& r = out[i];
    if (r.split_id >= plan.splits.size())
      throw ContractError("unknown split_id " + std::to_string(r.split_id));
    const EnrollmentMatrix& m = matrices[r.split_id];
    const EmbeddingRecord& test = store.by_recording(r.test_recording);
    const CohortStats& test_stats = stats_by_recording.at(test.recording_id);
    bool first = true;
    double best = 0.0;
    std::string best_speaker;
    for (std::size_t j = 0; j < m.speakers.size(); ++j) {
      const double raw = cosine(*m.embeddings[j], test);
      const CohortStats& enroll_stats =
          stats_by_recording.at(m.embeddings[j]->recording_id);
      const double z = asnorm(raw, enroll_stats, test_stats);
      if (first || z > best || (z == best && m.speakers[j] < best_speaker)) {
        best = z;
        best_speaker = m.speakers[j];
        first = false;
      }
    }
    if (first) throw ContractError("cannot normalize against an empty watchlist");
    r.transformed_score = best;
    r.best_speaker = best_speaker;
  });
  return out;
}

namespace detail {

/// Mean that is exactly the identity on all-equal inputs, so fusing copies
/// of one system reproduces it bit for bit at any system count.
inline double fuse_mean(const std::vector<double>& values) {
  bool all_equal = true;
  for (double v : values)
    if (v != values.front()) { all_equal = false; break; }
  if (all_equal) return values.front();
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

}  // namespace detail

/// Unweighted score-level fusion over aligned score files. Only the final
/// per-trial maxima are available here, so the maxima themselves are
/// averaged (raw and, when every system carries it, transformed); this is
/// the documented fallback when per-speaker scores cannot be recomputed.
/// best_speaker is taken from the first system. For fusion that averages
/// per-speaker scores before re-taking the max, see fuse_rescore.
inline std::vector<ScoreRecord> fuse(const std::vector<std::vector<ScoreRecord>>& systems) {
  if (systems.empty()) throw ContractError("fuse needs at least one system");
  const std::size_t n = systems.front().size();
  for (std::size_t m = 1; m < systems.size(); ++m)
    if (systems[m].size() != n)
      throw ContractError("system " + std::to_string(m) + " has " +
                          std::to_string(systems[m].size()) + " trials, expected " +
                          std::to_string(n));
  bool all_transformed = true;
  for (const std::vector<ScoreRecord>& sys : systems)
    for (const ScoreRecord& r : sys)
      if (!r.transformed_score) { all_transformed = false; break; }

  std::vector<ScoreRecord> out = systems.front();
  std::vector<double> raw(systems.size()), transformed(systems.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t m = 0; m < systems.size(); ++m) {
      const ScoreRecord& r = systems[m][i];
      if (r.split_id != out[i].split_id || r.test_recording != out[i].test_recording ||
          r.label != out[i].label)
        throw ContractError("systems disagree at trial index " + std::to_string(i) +
                            " (" + out[i].test_recording + " vs " + r.test_recording + ")");
      raw[m] = r.raw_score;
      if (all_transformed) transformed[m] = *r.transformed_score;
    }
    out[i].raw_score = detail::fuse_mean(raw);
    if (all_transformed) out[i].transformed_score = detail::fuse_mean(transformed);
    else out[i].transformed_score.reset();
  }
  return out;
}

/// Per-speaker fusion: for every trial, each enrolled speaker's score is
/// averaged across systems first and the maximum is re-taken over the fused
/// scores. The systems share one split plan and recording ids but may use
/// embeddings of different dimensions.
inline std::vector<ScoreRecord> fuse_rescore(const SplitPlan& plan,
                                             const std::vector<const EmbeddingStore*>& stores,
                                             const std::vector<Trial>& trials,
                                             unsigned threads = 0) {
  if (stores.empty()) throw ContractError("fuse needs at least one system");
  std::vector<std::vector<EnrollmentMatrix>> matrices(stores.size());
  for (std::size_t m = 0; m < stores.size(); ++m) {
    matrices[m].reserve(plan.splits.size());
    for (const WatchlistSplit& split : plan.splits)
      matrices[m].push_back(resolve_enrollment(split, *stores[m]));
  }

  std::vector<ScoreRecord> out(trials.size());
  parallel_for(trials.size(), threads, [&](std::size_t i) {
    const Trial& t = trials[i];
    if (t.split_id >= plan.splits.size())
      throw ContractError("trial " + std::to_string(i) + ": unknown split_id " +
                          std::to_string(t.split_id));
    std::vector<const EmbeddingRecord*> tests(stores.size());
    for (std::size_t m = 0; m < stores.size(); ++m) {
      tests[m] = stores[m]->find_recording(t.test_recording);
      if (!tests[m])
        throw ContractError("trial " + std::to_string(i) + ": test recording '" +
                            t.test_recording + "' missing from system " +
                            std::to_string(m));
    }
    const std::vector<std::string>& speakers = matrices[0][t.split_id].speakers;
    ScoreRecord r;
    r.split_id = t.split_id;
    r.test_recording = t.test_recording;
    r.label = t.label;
    std::vector<double> per_system(stores.size());
    bool first = true;
    for (std::size_t j = 0; j < speakers.size(); ++j) {
      for (std::size_t m = 0; m < stores.size(); ++m)
        per_system[m] = cosine(*matrices[m][t.split_id].embeddings[j], *tests[m]);
      const double fused = detail::fuse_mean(per_system);
      if (first || fused > r.raw_score ||
          (fused == r.raw_score && speakers[j] < r.best_speaker)) {
        r.raw_score = fused;
        r.best_speaker = speakers[j];
        first = false;
      }
    }
    if (first)
      throw ContractError("trial " + std::to_string(i) + ": empty watchlist");
    out[i] = std::move(r);
  });
  return out;
}

}  // namespace osi
