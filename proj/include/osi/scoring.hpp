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

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "osi/common.hpp"
#include "osi/embedding_store.hpp"
#include "osi/parallel.hpp"
#include "osi/watchlist.hpp"

namespace osi {

/// Outcome of one trial: the maximum over the watchlist's per-speaker
/// cosine scores and the speaker attaining it. transformed_score carries the
/// value after normalization, calibration, or fusion; raw_score always stays
/// the plain cosine maximum.
struct ScoreRecord {
  std::size_t split_id = 0;
  std::string test_recording;
  std::string best_speaker;
  double raw_score = 0.0;
  TrialLabel label = TrialLabel::kInset;
  std::optional<double> transformed_score;

  double effective_score() const {
    return transformed_score ? *transformed_score : raw_score;
  }
};

/// The enrollment embeddings of one split, resolved once and reused for all
/// of that split's trials. Speakers keep the watchlist's construction order.
struct EnrollmentMatrix {
  std::vector<std::string> speakers;
  std::vector<const EmbeddingRecord*> embeddings;
};

inline EnrollmentMatrix resolve_enrollment(const WatchlistSplit& split,
                                           const EmbeddingStore& store) {
  EnrollmentMatrix m;
  m.speakers = split.inset;
  m.embeddings.reserve(split.inset.size());
  for (const std::string& speaker : split.inset) {
    auto it = split.enrollment.find(speaker);
    if (it == split.enrollment.end())
      throw ContractError("no enrollment selected for speaker '" + speaker + "'");
    const EmbeddingRecord* rec = store.find_recording(it->second);
    if (!rec)
      throw ContractError("enrollment recording '" + it->second +
                          "' of speaker '" + speaker + "' not in store");
    m.embeddings.push_back(rec);
  }
  return m;
}

/// Scores one test embedding against every enrolled speaker and keeps the
/// maximum. Ties go to the lexicographically smallest speaker_id so reruns
/// are reproducible.
inline ScoreRecord score_trial(const EnrollmentMatrix& enrollment,
                               const EmbeddingRecord& test, std::size_t split_id,
                               TrialLabel label) {
  if (enrollment.speakers.empty())
    throw ContractError("cannot score against an empty watchlist");
  ScoreRecord out;
  out.split_id = split_id;
  out.test_recording = test.recording_id;
  out.label = label;
  bool first = true;
  for (std::size_t i = 0; i < enrollment.speakers.size(); ++i) {
    const double s = cosine(*enrollment.embeddings[i], test);
    if (first || s > out.raw_score ||
        (s == out.raw_score && enrollment.speakers[i] < out.best_speaker)) {
      out.raw_score = s;
      out.best_speaker = enrollment.speakers[i];
      first = false;
    }
  }
  return out;
}

inline ScoreRecord score_trial(const WatchlistSplit& split, const EmbeddingRecord& test,
                               const EmbeddingStore& store,
                               TrialLabel label = TrialLabel::kInset) {
  return score_trial(resolve_enrollment(split, store), test, split.split_id, label);
}

/// Detection rule: in-set iff the score strictly exceeds the threshold.
/// Uses the transformed score when present.
inline TrialLabel detect(const ScoreRecord& record, double theta) {
  return record.effective_score() > theta ? TrialLabel::kInset : TrialLabel::kOos;
}

/// Closed-set identification: the argmax speaker.
inline const std::string& identify(const ScoreRecord& record) {
  return record.best_speaker;
}

/// Scores every trial. Trials are independent given the immutable store and
/// plan, so the loop parallelizes over trials; each trial writes only its own
/// output slot, keeping the result identical for any thread count.
inline std::vector<ScoreRecord> score_run(const SplitPlan& plan,
                                          const std::vector<Trial>& trials,
                                          const EmbeddingStore& store,
                                          unsigned threads = 0) {
  std::vector<EnrollmentMatrix> matrices;
  matrices.reserve(plan.splits.size());
  for (const WatchlistSplit& split : plan.splits)
    matrices.push_back(resolve_enrollment(split, store));

  std::vector<ScoreRecord> records(trials.size());
  parallel_for(trials.size(), threads, [&](std::size_t i) {
    const Trial& t = trials[i];
    try {
      if (t.split_id >= plan.splits.size())
        throw ContractError("unknown split_id " + std::to_string(t.split_id));
      const EmbeddingRecord* test = store.find_recording(t.test_recording);
      if (!test)
        throw ContractError("test recording '" + t.test_recording + "' not in store");
      records[i] = score_trial(matrices[t.split_id], *test, t.split_id, t.label);
    } catch (const ContractError& e) {
      throw ContractError("trial " + std::to_string(i) + ": " + e.what());
    }
  });
  return records;
}

// Score file: TSV with header, columns split_id, test_recording,
// best_speaker, raw_score, label, plus transformed_score once a transform
// has run. Scores are written with 17 significant digits so the text file
// round-trips the exact double and byte-compares across reruns.

inline void write_scores(const std::vector<ScoreRecord>& records, const std::string& path) {
  bool any_transformed = false;
  for (const ScoreRecord& r : records)
    if (r.transformed_score) { any_transformed = true; break; }
  if (any_transformed)
    for (const ScoreRecord& r : records)
      if (!r.transformed_score)
        throw ContractError("record for '" + r.test_recording +
                            "' lacks transformed_score; cannot write a mixed score file");

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("cannot write file: " + path);
  out << "split_id\ttest_recording\tbest_speaker\traw_score\tlabel";
  if (any_transformed) out << "\ttransformed_score";
  out << "\n";
  for (const ScoreRecord& r : records) {
    out << r.split_id << "\t" << r.test_recording << "\t" << r.best_speaker << "\t"
        << format_double(r.raw_score) << "\t" << trial_label_name(r.label);
    if (any_transformed) out << "\t" << format_double(*r.transformed_score);
    out << "\n";
  }
  if (!out) throw ContractError("write failed: " + path);
}

inline std::vector<ScoreRecord> read_scores(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ContractError("empty score file: " + path);
  bool has_transformed = false;
  if (line == "split_id\ttest_recording\tbest_speaker\traw_score\tlabel\ttransformed_score")
    has_transformed = true;
  else if (line != "split_id\ttest_recording\tbest_speaker\traw_score\tlabel")
    throw ContractError("bad score file header in " + path);

  std::vector<ScoreRecord> records;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string split_id, recording, speaker, raw, label, transformed;
    const bool ok = std::getline(ss, split_id, '\t') && std::getline(ss, recording, '\t') &&
                    std::getline(ss, speaker, '\t') && std::getline(ss, raw, '\t') &&
                    std::getline(ss, label, '\t') &&
                    (!has_transformed || std::getline(ss, transformed, '\t'));
    if (!ok)
      throw ContractError("malformed score line " + std::to_string(lineno) + " in " + path);
    ScoreRecord r;
    try {
      r.split_id = std::stoull(split_id);
      r.raw_score = std::stod(raw);
      if (has_transformed) r.transformed_score = std::stod(transformed);
    } catch (const std::exception&) {
      throw ContractError("bad numeric field on line " + std::to_string(lineno) + " in " +
                          path);
    }
    r.test_recording = std::move(recording);
    r.best_speaker = std::move(speaker);
    r.label = trial_label_from_string(label);
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace osi
