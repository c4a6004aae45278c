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
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "osi/common.hpp"
#include "osi/embedding_store.hpp"
#include "osi/rng.hpp"

namespace osi {

/// One watchlist: the enrolled in-set speaker group of one split. The
/// out-of-set complement is not stored; it is derived against whatever
/// speaker population the split is evaluated on (see oos_speakers below).
struct WatchlistSplit {
  std::size_t split_id = 0;
  std::vector<std::string> inset;  ///< in-set speaker ids, construction order
  /// speaker_id -> enrollment recording_id, parallel to inset once selected.
  std::map<std::string, std::string> enrollment;

  bool contains(const std::string& speaker_id) const {
    return std::find(inset.begin(), inset.end(), speaker_id) != inset.end();
  }
};

enum class SplitMode { kKfold, kLoso };

inline std::string split_mode_name(SplitMode m) {
  return m == SplitMode::kKfold ? "kfold" : "loso";
}

inline SplitMode split_mode_from_string(const std::string& s) {
  if (s == "kfold") return SplitMode::kKfold;
  if (s == "loso") return SplitMode::kLoso;
  throw ContractError("unknown split mode '" + s + "' (expected kfold or loso)");
}

/// A full set of watchlist splits over one speaker population.
struct SplitPlan {
  SplitMode mode = SplitMode::kKfold;
  std::size_t watchlist_size = 0;  ///< W; for loso this is N - 1
  std::uint64_t seed = 0;
  std::vector<WatchlistSplit> splits;
  bool enrollment_selected = false;
};

/// Out-of-set complement of a split within the given population. Speakers
/// absent from every watchlist (k-fold leftovers, cohort-style extras) are
/// out-of-set in every split.
inline std::vector<std::string> oos_speakers(const WatchlistSplit& split,
                                             const std::vector<std::string>& population) {
  std::unordered_set<std::string> in(split.inset.begin(), split.inset.end());
  std::vector<std::string> out;
  out.reserve(population.size() - split.inset.size());
  for (const std::string& s : population)
    if (!in.count(s)) out.push_back(s);
  return out;
}

/// Shuffles the population once with a seeded generator and slices it into
/// floor(N/W) consecutive blocks of exactly W speakers. The N mod W leftover
/// speakers are in-set in no split and so stay out-of-set everywhere.
inline SplitPlan build_kfold(const std::vector<std::string>& population,
                             std::size_t watchlist_size, std::uint64_t seed) {
  const std::size_t n = population.size();
  if (watchlist_size == 0) throw ContractError("watchlist size must be positive");
  if (watchlist_size > n)
    throw ContractError("watchlist size " + std::to_string(watchlist_size) +
                        " exceeds population size " + std::to_string(n));
  std::vector<std::string> shuffled = population;
  SplitMix64 rng(derive_seed(seed, 0));
  rng.shuffle(shuffled);

  SplitPlan plan;
  plan.mode = SplitMode::kKfold;
  plan.watchlist_size = watchlist_size;
  plan.seed = seed;
  const std::size_t n_splits = n / watchlist_size;
  plan.splits.reserve(n_splits);
  for (std::size_t s = 0; s < n_splits; ++s) {
    WatchlistSplit split;
    split.split_id = s;
    split.inset.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(s * watchlist_size),
                       shuffled.begin() + static_cast<std::ptrdiff_t>((s + 1) * watchlist_size));
    plan.splits.push_back(std::move(split));
  }
  return plan;
}

/// Leave-one-speaker-out: N splits, split i enrolls everyone except speaker
/// i of the population (which becomes that split's only out-of-set speaker).
inline SplitPlan build_loso(const std::vector<std::string>& population,
                            std::uint64_t seed) {
  const std::size_t n = population.size();
  if (n < 2) throw ContractError("loso needs a population of at least 2 speakers");
  SplitPlan plan;
  plan.mode = SplitMode::kLoso;
  plan.watchlist_size = n - 1;
  plan.seed = seed;
  plan.splits.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    WatchlistSplit split;
    split.split_id = i;
    split.inset.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) split.inset.push_back(population[j]);
    plan.splits.push_back(std::move(split));
  }
  return plan;
}

/// Picks one enrollment recording per in-set speaker. The choice depends
/// only on (seed, speaker_id), so a speaker keeps the same enrollment across
/// every split of the plan and per-speaker cohort statistics stay reusable.
inline void select_enrollment(SplitPlan& plan, const EmbeddingStore& store,
                              std::uint64_t seed) {
  std::map<std::string, std::string> chosen;
  for (WatchlistSplit& split : plan.splits) {
    split.enrollment.clear();
    for (const std::string& speaker : split.inset) {
      auto it = chosen.find(speaker);
      if (it == chosen.end()) {
        const std::vector<std::size_t>& recs = store.recordings_of(speaker);
        if (recs.size() < 2)
          throw ContractError("speaker '" + speaker +
                              "' has fewer than 2 recordings; cannot hold out "
                              "an enrollment segment");
        SplitMix64 rng(derive_seed(seed, fnv1a64(speaker)));
        const std::size_t pick = static_cast<std::size_t>(rng.next_below(recs.size()));
        it = chosen.emplace(speaker, store.record(recs[pick]).recording_id).first;
      }
      split.enrollment.emplace(speaker, it->second);
    }
  }
  plan.enrollment_selected = true;
}

enum class TrialLabel { kInset, kOos };

inline std::string trial_label_name(TrialLabel l) {
  return l == TrialLabel::kInset ? "inset" : "oos";
}

inline TrialLabel trial_label_from_string(const std::string& s) {
  if (s == "inset") return TrialLabel::kInset;
  if (s == "oos") return TrialLabel::kOos;
  throw ContractError("unknown trial label '" + s + "' (expected inset or oos)");
}

/// One (split, test recording) comparison to be scored.
struct Trial {
  std::size_t split_id = 0;
  std::string test_recording;
  TrialLabel label = TrialLabel::kInset;
};

/// Enumerates trials for every split: in-set trials are the non-enrollment
/// recordings of in-set speakers, out-of-set trials are all recordings of
/// out-of-set speakers (the store's population defines the complement).
/// If max_trials_per_label is set, each label's list is uniformly
/// sub-sampled without replacement to that many trials, keeping
/// (split_id, enumeration) order.
inline std::vector<Trial> make_trials(const SplitPlan& plan, const EmbeddingStore& store,
                                      std::optional<std::size_t> max_trials_per_label,
                                      std::uint64_t seed) {
  if (!plan.enrollment_selected)
    throw ContractError("enrollment must be selected before making trials");
  const std::vector<std::string>& population = store.speakers();

  std::vector<Trial> inset_trials;
  std::vector<Trial> oos_trials;
  for (const WatchlistSplit& split : plan.splits) {
    for (const std::string& speaker : split.inset) {
      const std::string& enrolled = split.enrollment.at(speaker);
      for (std::size_t rec_idx : store.recordings_of(speaker)) {
        const EmbeddingRecord& rec = store.record(rec_idx);
        if (rec.recording_id == enrolled) continue;
        inset_trials.push_back({split.split_id, rec.recording_id, TrialLabel::kInset});
      }
    }
    for (const std::string& speaker : oos_speakers(split, population))
      for (std::size_t rec_idx : store.recordings_of(speaker))
        oos_trials.push_back(
            {split.split_id, store.record(rec_idx).recording_id, TrialLabel::kOos});
  }

  auto subsample = [&](std::vector<Trial>& trials, std::uint64_t stream) {
    if (!max_trials_per_label || trials.size() <= *max_trials_per_label) return;
    SplitMix64 rng(derive_seed(seed, stream));
    std::vector<std::size_t> keep = sample_indices(trials.size(), *max_trials_per_label, rng);
    std::vector<Trial> out;
    out.reserve(keep.size());
    for (std::size_t i : keep) out.push_back(std::move(trials[i]));
    trials = std::move(out);
  };
  subsample(inset_trials, 0);
  subsample(oos_trials, 1);

  // Merge back into (split_id, enumeration) order: both lists are already
  // ordered by split_id, with in-set trials of a split preceding its
  // out-of-set trials.
  std::vector<Trial> trials;
  trials.reserve(inset_trials.size() + oos_trials.size());
  std::size_t a = 0, b = 0;
  while (a < inset_trials.size() || b < oos_trials.size()) {
    const bool take_inset =
        b == oos_trials.size() ||
        (a < inset_trials.size() && inset_trials[a].split_id <= oos_trials[b].split_id);
    trials.push_back(take_inset ? std::move(inset_trials[a++]) : std::move(oos_trials[b++]));
  }
  return trials;
}

// Plan file: JSON {mode, watchlist_size, seed, splits: [{split_id, inset,
// enrollment}]}. Out-of-set sets are derived at use time, never stored.

inline nlohmann::ordered_json plan_to_json(const SplitPlan& plan) {
  nlohmann::ordered_json j;
  j["mode"] = split_mode_name(plan.mode);
  j["watchlist_size"] = plan.watchlist_size;
  j["seed"] = plan.seed;
  j["splits"] = nlohmann::ordered_json::array();
  for (const WatchlistSplit& split : plan.splits) {
    nlohmann::ordered_json js;
    js["split_id"] = split.split_id;
    js["inset"] = split.inset;
    nlohmann::ordered_json enroll = nlohmann::ordered_json::object();
    for (const std::string& speaker : split.inset) {
      auto it = split.enrollment.find(speaker);
      if (it != split.enrollment.end()) enroll[speaker] = it->second;
    }
    js["enrollment"] = std::move(enroll);
    j["splits"].push_back(std::move(js));
  }
  return j;
}

inline SplitPlan plan_from_json(const nlohmann::json& j) {
  try {
    SplitPlan plan;
    plan.mode = split_mode_from_string(j.at("mode").get<std::string>());
    plan.watchlist_size = j.at("watchlist_size").get<std::size_t>();
    plan.seed = j.at("seed").get<std::uint64_t>();
    bool any_enrollment = true;
    for (const auto& js : j.at("splits")) {
      WatchlistSplit split;
      split.split_id = js.at("split_id").get<std::size_t>();
      split.inset = js.at("inset").get<std::vector<std::string>>();
      for (const auto& [speaker, rec] : js.at("enrollment").items())
        split.enrollment.emplace(speaker, rec.get<std::string>());
      if (split.enrollment.size() != split.inset.size()) any_enrollment = false;
      plan.splits.push_back(std::move(split));
    }
    plan.enrollment_selected = any_enrollment && !plan.splits.empty();
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("malformed plan file: ") + e.what());
  }
}

inline void write_plan(const SplitPlan& plan, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("cannot write file: " + path);
  out << plan_to_json(plan).dump(2) << "\n";
  if (!out) throw ContractError("write failed: " + path);
}

inline SplitPlan read_plan(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ContractError("malformed plan file " + path + ": " + e.what());
  }
  return plan_from_json(j);
}

// Trial list file: TSV with header, columns split_id, test_recording, label.

inline void write_trials(const std::vector<Trial>& trials, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("cannot write file: " + path);
  out << "split_id\ttest_recording\tlabel\n";
  for (const Trial& t : trials)
    out << t.split_id << "\t" << t.test_recording << "\t" << trial_label_name(t.label)
        << "\n";
  if (!out) throw ContractError("write failed: " + path);
}

inline std::vector<Trial> read_trials(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "split_id\ttest_recording\tlabel")
    throw ContractError("bad trial file header in " + path);
  std::vector<Trial> trials;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string split_id, recording, label;
    if (!std::getline(ss, split_id, '\t') || !std::getline(ss, recording, '\t') ||
        !std::getline(ss, label, '\t'))
      throw ContractError("malformed trial line " + std::to_string(lineno) + " in " + path);
    Trial t;
    try {
      t.split_id = std::stoull(split_id);
    } catch (const std::exception&) {
      throw ContractError("bad split_id on line " + std::to_string(lineno) + " in " + path);
    }
    t.test_recording = std::move(recording);
    t.label = trial_label_from_string(label);
    trials.push_back(std::move(t));
  }
  return trials;
}

}  // namespace osi
