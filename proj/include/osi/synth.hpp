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
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "osi/common.hpp"
#include "osi/embedding_store.hpp"
#include "osi/metrics.hpp"
#include "osi/parallel.hpp"
#include "osi/rng.hpp"
#include "osi/scoring.hpp"
#include "osi/watchlist.hpp"

namespace osi {

/// Centroid-plus-noise population model on the unit sphere. Each speaker is
/// a random unit centroid; each recording is the centroid plus isotropic
/// noise of scale epsilon, renormalized. Small epsilon gives well-separated
/// speakers, large epsilon drowns them. Synthetic magnitude and SNR are
/// drawn correlated with the per-recording noise scale so calibration has
/// signal to exploit.
struct SynthConfig {
  std::size_t n_speakers = 0;
  std::size_t recordings_per_speaker = 3;
  std::size_t dim = 128;
  double within_spread = 0.3;  ///< epsilon, base within-speaker noise scale

  /// Lognormal scale of the per-recording noise jitter: the effective
  /// epsilon of a recording is epsilon * exp(spread_jitter * t), t ~ N(0,1).
  /// 0 keeps every recording at the base epsilon.
  double spread_jitter = 0.0;

  double magnitude_mean = 10.0;
  double magnitude_spread = 2.0;
  double snr_mean_db = 20.0;
  double snr_spread_db = 5.0;

  /// Correlation between the noise jitter draw t and the quality draws that
  /// produce SNR and magnitude; 0 decouples them entirely.
  double quality_rho = 0.5;

  /// Optional (duration_s, epsilon multiplier) table. When set, every
  /// recording picks one row uniformly, gets that duration as metadata, and
  /// has its noise scaled by the multiplier (shorter utterances = larger
  /// multiplier = noisier embeddings).
  std::vector<std::pair<double, double>> duration_to_spread;

  std::uint64_t seed = 0;

  /// When set, noise/quality draws come from this seed while centroids still
  /// come from `seed`. Two configs differing only here model two systems
  /// observing the same speakers through independent noise.
  std::optional<std::uint64_t> noise_seed;
};

inline void validate(const SynthConfig& cfg) {
  if (cfg.n_speakers == 0) throw ContractError("n_speakers must be positive");
  if (cfg.recordings_per_speaker < 2)
    throw ContractError("recordings_per_speaker must be at least 2");
  if (cfg.dim < 2) throw ContractError("dim must be at least 2");
  if (!(cfg.within_spread > 0.0)) throw ContractError("within_spread must be positive");
  if (cfg.spread_jitter < 0.0) throw ContractError("spread_jitter must be nonnegative");
  if (!(cfg.magnitude_mean > 0.0)) throw ContractError("magnitude_mean must be positive");
  if (cfg.magnitude_spread < 0.0 || cfg.snr_spread_db < 0.0)
    throw ContractError("spreads must be nonnegative");
  if (cfg.quality_rho < -1.0 || cfg.quality_rho > 1.0)
    throw ContractError("quality_rho must lie in [-1, 1]");
  for (const auto& [dur, mult] : cfg.duration_to_spread) {
    if (dur < 0.0) throw ContractError("durations must be nonnegative");
    if (!(mult > 0.0)) throw ContractError("duration spread multipliers must be positive");
  }
}

namespace detail {

inline std::string synth_speaker_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%05zu", i);
  return buf;
}

inline std::string synth_recording_id(std::size_t speaker, std::size_t rec) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "s%05zu_r%03zu", speaker, rec);
  return buf;
}

struct PendingRecord {
  std::string recording_id;
  std::vector<float> raw;
  float snr_db = 0.0f;
  std::optional<float> duration_s;
};

}  // namespace detail

/// Generates the population. Every speaker derives two private generator
/// streams from the config seeds (one for the centroid, one for noise and
/// quality), so generation parallelizes over speakers without changing any
/// drawn value, and two configs sharing `seed` but differing in
/// `noise_seed` produce the same centroids under independent noise.
inline EmbeddingStore generate(const SynthConfig& cfg, unsigned threads = 0) {
  validate(cfg);
  const std::uint64_t noise_base = cfg.noise_seed.value_or(cfg.seed);
  std::vector<std::vector<detail::PendingRecord>> pending(cfg.n_speakers);

  parallel_for(cfg.n_speakers, threads, [&](std::size_t i) {
    SplitMix64 centroid_rng(derive_seed(cfg.seed, 2 * i));
    SplitMix64 noise_rng(derive_seed(noise_base, 2 * i + 1));

    std::vector<double> centroid(cfg.dim);
    double norm_sq = 0.0;
    for (double& c : centroid) {
      c = centroid_rng.next_gauss();
      norm_sq += c * c;
    }
    const double centroid_norm = std::sqrt(norm_sq);
    for (double& c : centroid) c /= centroid_norm;

    const double root = std::sqrt(1.0 - cfg.quality_rho * cfg.quality_rho);
    std::vector<detail::PendingRecord>& out = pending[i];
    out.resize(cfg.recordings_per_speaker);
    std::vector<double> x(cfg.dim);
    for (std::size_t j = 0; j < cfg.recordings_per_speaker; ++j) {
      detail::PendingRecord& rec = out[j];
      rec.recording_id = detail::synth_recording_id(i, j);

      double mult = 1.0;
      if (!cfg.duration_to_spread.empty()) {
        const std::size_t pick = static_cast<std::size_t>(
            noise_rng.next_below(cfg.duration_to_spread.size()));
        rec.duration_s = static_cast<float>(cfg.duration_to_spread[pick].first);
        mult = cfg.duration_to_spread[pick].second;
      }
      for (double& v : x) v = noise_rng.next_gauss();
      const double t = noise_rng.next_gauss();
      const double u_snr = noise_rng.next_gauss();
      const double u_mag = noise_rng.next_gauss();

      const double eps = cfg.within_spread * mult * std::exp(cfg.spread_jitter * t);
      double sq = 0.0;
      for (std::size_t a = 0; a < cfg.dim; ++a) {
        x[a] = centroid[a] + eps * x[a];
        sq += x[a] * x[a];
      }
      const double norm = std::sqrt(sq);

      const double q_snr = cfg.quality_rho * t + root * u_snr;
      const double q_mag = cfg.quality_rho * t + root * u_mag;
      rec.snr_db = static_cast<float>(cfg.snr_mean_db - cfg.snr_spread_db * q_snr);
      const double magnitude =
          std::max(1e-3, cfg.magnitude_mean - cfg.magnitude_spread * q_mag);

      rec.raw.resize(cfg.dim);
      for (std::size_t a = 0; a < cfg.dim; ++a)
        rec.raw[a] = static_cast<float>(x[a] / norm * magnitude);
    }
  });

  EmbeddingStore store;
  for (std::size_t i = 0; i < cfg.n_speakers; ++i) {
    const std::string speaker = detail::synth_speaker_id(i);
    for (detail::PendingRecord& rec : pending[i])
      store.add(speaker, rec.recording_id, std::move(rec.raw), rec.snr_db,
                rec.duration_s);
  }
  return store;
}

/// Group false-alarm probability when the W per-speaker non-target scores
/// are independent and share one threshold: 1 - (1 - p)^W. The max-of-W
/// law that makes watchlist false alarms grow with watchlist size.
inline double independent_far_oracle(double per_speaker_far, std::size_t watchlist_size) {
  if (!(per_speaker_far > 0.0 && per_speaker_far < 1.0))
    throw ContractError("per-speaker false-alarm rate must lie in (0, 1)");
  if (watchlist_size == 0) throw ContractError("watchlist size must be positive");
  return 1.0 - std::pow(1.0 - per_speaker_far,
                        static_cast<double>(watchlist_size));
}

struct SweepSettings {
  std::optional<std::size_t> max_trials_per_label;
  double far_level = 0.005;
  double frr_level = 0.05;
  unsigned threads = 0;
};

struct SweepRow {
  std::size_t watchlist_size = 0;
  double eer = 0.0;
  double frr_at_far = 0.0;
  double far_at_frr = 0.0;
};

/// Runs the whole pipeline (generate, k-fold splits, trials, scoring,
/// operating-point metrics) once per watchlist size over one shared
/// population. Duplicate sizes produce identical rows.
inline std::vector<SweepRow> sweep(const SynthConfig& cfg,
                                   const std::vector<std::size_t>& sizes,
                                   const SweepSettings& settings = {}) {
  for (std::size_t w : sizes)
    if (w > cfg.n_speakers)
      throw ContractError("watchlist size " + std::to_string(w) +
                          " exceeds population size " + std::to_string(cfg.n_speakers));
  const EmbeddingStore store = generate(cfg, settings.threads);
  std::vector<SweepRow> rows;
  rows.reserve(sizes.size());
  for (std::size_t w : sizes) {
    SplitPlan plan = build_kfold(store.speakers(), w, cfg.seed);
    select_enrollment(plan, store, cfg.seed);
    const std::vector<Trial> trials =
        make_trials(plan, store, settings.max_trials_per_label, cfg.seed);
    const std::vector<ScoreRecord> records =
        score_run(plan, trials, store, settings.threads);
    const ScorePartition p = partition(records, false);
    SweepRow row;
    row.watchlist_size = w;
    row.eer = eer(p);
    row.frr_at_far = rate_at(p, FixedRate::kFar, settings.far_level);
    row.far_at_frr = rate_at(p, FixedRate::kFrr, settings.frr_level);
    rows.push_back(row);
  }
  return rows;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("cannot write file: " + path);
  out << "watchlist_size,eer,frr_at_far,far_at_frr\n";
  for (const SweepRow& r : rows)
    out << r.watchlist_size << "," << format_double(r.eer) << ","
        << format_double(r.frr_at_far) << "," << format_double(r.far_at_frr) << "\n";
  if (!out) throw ContractError("write failed: " + path);
}

}  // namespace osi
