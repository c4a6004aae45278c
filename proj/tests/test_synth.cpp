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

#include <cmath>
#include <set>

#include <catch2/catch_amalgamated.hpp>

#include "test_support.hpp"

using Catch::Matchers::ContainsSubstring;
using test_support::TempDir;

namespace {

osi::SynthConfig base_config(std::size_t n, std::size_t recs, std::size_t dim,
                             double spread, std::uint64_t seed) {
  osi::SynthConfig cfg;
  cfg.n_speakers = n;
  cfg.recordings_per_speaker = recs;
  cfg.dim = dim;
  cfg.within_spread = spread;
  cfg.seed = seed;
  return cfg;
}

/// Mean cosine between all same-speaker recording pairs.
double mean_within(const osi::EmbeddingStore& store) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const std::string& spk : store.speakers()) {
    const std::vector<std::size_t>& recs = store.recordings_of(spk);
    for (std::size_t a = 0; a < recs.size(); ++a)
      for (std::size_t b = a + 1; b < recs.size(); ++b) {
        sum += osi::cosine(store.record(recs[a]), store.record(recs[b]));
        ++count;
      }
  }
  return sum / static_cast<double>(count);
}

/// Mean cosine between first recordings of distinct speakers.
double mean_cross(const osi::EmbeddingStore& store) {
  double sum = 0.0;
  std::size_t count = 0;
  const std::vector<std::string>& spk = store.speakers();
  for (std::size_t a = 0; a < spk.size(); ++a)
    for (std::size_t b = a + 1; b < spk.size(); ++b) {
      sum += osi::cosine(store.record(store.recordings_of(spk[a])[0]),
                         store.record(store.recordings_of(spk[b])[0]));
      ++count;
    }
  return sum / static_cast<double>(count);
}

}  // namespace

TEST_CASE("generation is deterministic and correctly shaped") {
  const osi::SynthConfig cfg = base_config(7, 4, 16, 0.2, 33);
  const osi::EmbeddingStore a = osi::generate(cfg);
  const osi::EmbeddingStore b = osi::generate(cfg);

  REQUIRE(a.size() == 28);
  REQUIRE(a.dimension() == 16);
  REQUIRE(a.speakers().size() == 7);
  REQUIRE(osi::serialize_binary(a) == osi::serialize_binary(b));

  // Identifiers follow the zero-padded scheme, in order.
  REQUIRE(a.speakers().front() == "s00000");
  REQUIRE(a.speakers().back() == "s00006");
  REQUIRE(a.record(0).recording_id == "s00000_r000");
  REQUIRE(a.record(a.size() - 1).recording_id == "s00006_r003");

  for (std::size_t i = 0; i < a.size(); ++i) {
    const osi::EmbeddingRecord& r = a.record(i);
    REQUIRE(r.snr_db.has_value());
    REQUIRE_FALSE(r.duration_s.has_value());  // no duration table configured
    REQUIRE(r.raw_magnitude >= 1e-3);
    double sq = 0.0;
    for (float x : r.unit) sq += static_cast<double>(x) * x;
    REQUIRE(std::sqrt(sq) == Catch::Approx(1.0).margin(1e-6));
  }

  // Thread count changes nothing.
  REQUIRE(osi::serialize_binary(osi::generate(cfg, 3)) == osi::serialize_binary(a));
}

TEST_CASE("a different seed moves every embedding") {
  const osi::EmbeddingStore a = osi::generate(base_config(4, 2, 8, 0.2, 1));
  const osi::EmbeddingStore b = osi::generate(base_config(4, 2, 8, 0.2, 2));
  REQUIRE(osi::serialize_binary(a) != osi::serialize_binary(b));
}

TEST_CASE("vanishing noise collapses a speaker onto one direction") {
  osi::SynthConfig cfg = base_config(5, 3, 32, 1e-9, 77);
  const osi::EmbeddingStore store = osi::generate(cfg);
  for (const std::string& spk : store.speakers()) {
    const std::vector<std::size_t>& recs = store.recordings_of(spk);
    for (std::size_t a = 0; a < recs.size(); ++a)
      for (std::size_t b = a + 1; b < recs.size(); ++b)
        REQUIRE(osi::cosine(store.record(recs[a]), store.record(recs[b])) >
                1.0 - 1e-6);
  }
}

TEST_CASE("huge noise erases speaker identity") {
  const osi::EmbeddingStore store = osi::generate(base_config(24, 3, 128, 10.0, 78));
  // Within-speaker and cross-speaker cosines both sit near zero.
  REQUIRE(std::abs(mean_within(store)) < 0.1);
  REQUIRE(std::abs(mean_cross(store)) < 0.1);
}

TEST_CASE("moderate noise clusters recordings around their speaker") {
  const osi::EmbeddingStore store = osi::generate(base_config(30, 3, 32, 0.1, 79));
  // Predicted within-speaker cosine is 1/(1 + eps^2 * dim) ~ 0.76 here.
  REQUIRE(mean_within(store) > 0.6);
  REQUIRE(std::abs(mean_cross(store)) < 0.15);
  REQUIRE(mean_within(store) > mean_cross(store) + 0.4);
}

TEST_CASE("larger spread lowers within-speaker similarity") {
  const double tight = mean_within(osi::generate(base_config(20, 3, 32, 0.05, 80)));
  const double loose = mean_within(osi::generate(base_config(20, 3, 32, 0.3, 80)));
  REQUIRE(tight > loose);
}

TEST_CASE("shared seed with a different noise seed keeps centroids") {
  osi::SynthConfig cfg = base_config(12, 2, 32, 0.1, 90);
  osi::SynthConfig cfg2 = cfg;
  cfg2.noise_seed = 4242;
  const osi::EmbeddingStore a = osi::generate(cfg);
  const osi::EmbeddingStore b = osi::generate(cfg2);

  REQUIRE(a.speakers() == b.speakers());
  REQUIRE(osi::serialize_binary(a) != osi::serialize_binary(b));

  // Same-speaker recordings across the two stores still agree strongly
  // (shared centroid), far above cross-speaker agreement.
  double same = 0.0, cross = 0.0;
  std::size_t n = a.speakers().size();
  for (std::size_t i = 0; i < n; ++i) {
    same += osi::cosine(a.record(a.recordings_of(a.speakers()[i])[0]),
                        b.record(b.recordings_of(b.speakers()[i])[0]));
    cross += osi::cosine(a.record(a.recordings_of(a.speakers()[i])[0]),
                         b.record(b.recordings_of(b.speakers()[(i + 1) % n])[0]));
  }
  REQUIRE(same / static_cast<double>(n) > cross / static_cast<double>(n) + 0.4);
}

TEST_CASE("duration table assigns durations and scales the noise") {
  osi::SynthConfig cfg = base_config(40, 6, 32, 0.08, 91);
  cfg.duration_to_spread = {{60.0, 1.0}, {2.0, 6.0}};
  const osi::EmbeddingStore store = osi::generate(cfg);

  // Every recording carries one of the configured durations.
  std::set<double> seen;
  for (std::size_t i = 0; i < store.size(); ++i) {
    REQUIRE(store.record(i).duration_s.has_value());
    seen.insert(static_cast<double>(*store.record(i).duration_s));
  }
  REQUIRE(seen == std::set<double>{2.0, 60.0});

  // Short (noisier) recordings sit farther from their speaker's other
  // recordings than long ones do.
  double short_sum = 0.0, long_sum = 0.0;
  std::size_t short_n = 0, long_n = 0;
  for (const std::string& spk : store.speakers()) {
    const std::vector<std::size_t>& recs = store.recordings_of(spk);
    for (std::size_t a = 0; a < recs.size(); ++a)
      for (std::size_t b = 0; b < recs.size(); ++b) {
        if (a == b) continue;
        const double c = osi::cosine(store.record(recs[a]), store.record(recs[b]));
        if (*store.record(recs[a]).duration_s == 2.0f) {
          short_sum += c;
          ++short_n;
        } else {
          long_sum += c;
          ++long_n;
        }
      }
  }
  REQUIRE(short_n > 0);
  REQUIRE(long_n > 0);
  REQUIRE(long_sum / static_cast<double>(long_n) >
          short_sum / static_cast<double>(short_n) + 0.1);
}

TEST_CASE("quality correlation ties snr to embedding fidelity") {
  osi::SynthConfig cfg = base_config(60, 4, 32, 0.12, 92);
  cfg.spread_jitter = 0.6;
  cfg.quality_rho = 0.9;
  const osi::EmbeddingStore store = osi::generate(cfg);

  // Per recording: snr versus mean cosine to the speaker's other recordings.
  std::vector<double> snr, fidelity;
  for (const std::string& spk : store.speakers()) {
    const std::vector<std::size_t>& recs = store.recordings_of(spk);
    for (std::size_t a = 0; a < recs.size(); ++a) {
      double sum = 0.0;
      for (std::size_t b = 0; b < recs.size(); ++b)
        if (a != b) sum += osi::cosine(store.record(recs[a]), store.record(recs[b]));
      snr.push_back(*store.record(recs[a]).snr_db);
      fidelity.push_back(sum / static_cast<double>(recs.size() - 1));
    }
  }
  const std::size_t n = snr.size();
  double ms = 0.0, mf = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ms += snr[i];
    mf += fidelity[i];
  }
  ms /= static_cast<double>(n);
  mf /= static_cast<double>(n);
  double cov = 0.0, vs = 0.0, vf = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (snr[i] - ms) * (fidelity[i] - mf);
    vs += (snr[i] - ms) * (snr[i] - ms);
    vf += (fidelity[i] - mf) * (fidelity[i] - mf);
  }
  const double corr = cov / std::sqrt(vs * vf);
  REQUIRE(corr > 0.3);  // high rho: low-noise recordings report high snr
}

TEST_CASE("configuration validation rejects bad parameters") {
  osi::SynthConfig cfg = base_config(5, 3, 16, 0.2, 0);
  osi::SynthConfig bad = cfg;
  bad.n_speakers = 0;
  REQUIRE_THROWS_AS(osi::generate(bad), osi::ContractError);
  bad = cfg;
  bad.recordings_per_speaker = 1;
  REQUIRE_THROWS_AS(osi::generate(bad), osi::ContractError);
  bad = cfg;
  bad.dim = 1;
  REQUIRE_THROWS_AS(osi::generate(bad), osi::ContractError);
  bad = cfg;
  bad.within_spread = 0.0;
  REQUIRE_THROWS_AS(osi::generate(bad), osi::ContractError);
  bad = cfg;
  bad.quality_rho = 1.5;
  REQUIRE_THROWS_AS(osi::generate(bad), osi::ContractError);
  bad = cfg;
  bad.duration_to_spread = {{2.0, 0.0}};
  REQUIRE_THROWS_AS(osi::generate(bad), osi::ContractError);
}

TEST_CASE("group false-alarm law worked examples") {
  // At watchlist size 1 the law reduces to the per-speaker rate, up to the
  // round trip through 1 - (1 - p).
  REQUIRE(osi::independent_far_oracle(0.01, 1) == Catch::Approx(0.01).margin(1e-15));
  REQUIRE(osi::independent_far_oracle(0.5, 2) == 0.75);
  REQUIRE(osi::independent_far_oracle(0.01, 100) ==
          Catch::Approx(0.6339676587267709).margin(1e-12));
  REQUIRE(osi::independent_far_oracle(0.25, 3) ==
          Catch::Approx(1.0 - 0.75 * 0.75 * 0.75).margin(1e-15));
}

TEST_CASE("the pipeline sweep emits one row per size, deterministically") {
  osi::SynthConfig cfg = base_config(30, 3, 64, 0.15, 93);
  osi::SweepSettings settings;
  const std::vector<osi::SweepRow> rows = osi::sweep(cfg, {5, 5, 10}, settings);
  REQUIRE(rows.size() == 3);
  REQUIRE(rows[0].watchlist_size == 5);
  REQUIRE(rows[1].watchlist_size == 5);
  REQUIRE(rows[2].watchlist_size == 10);
  // Duplicate sizes give identical rows.
  REQUIRE(rows[0].eer == rows[1].eer);
  REQUIRE(rows[0].frr_at_far == rows[1].frr_at_far);
  REQUIRE(rows[0].far_at_frr == rows[1].far_at_frr);
  for (const osi::SweepRow& r : rows) {
    REQUIRE(r.eer >= 0.0);
    REQUIRE(r.eer <= 1.0);
  }

  REQUIRE_THROWS_AS(osi::sweep(cfg, {31}, settings), osi::ContractError);
}

TEST_CASE("near-zero spread drives every sweep error rate to zero") {
  osi::SynthConfig cfg = base_config(24, 3, 64, 1e-6, 94);
  const std::vector<osi::SweepRow> rows = osi::sweep(cfg, {4, 12}, {});
  for (const osi::SweepRow& r : rows) {
    REQUIRE(r.eer < 1e-6);
    REQUIRE(r.frr_at_far == 0.0);
    REQUIRE(r.far_at_frr == 0.0);
  }
}

TEST_CASE("sweep csv lists the header and one line per row") {
  TempDir tmp;
  const std::string path = tmp.file("sweep.csv");
  std::vector<osi::SweepRow> rows{{5, 0.125, 0.5, 0.0078125}, {10, 0.25, 0.625, 0.5}};
  osi::write_sweep_csv(rows, path);
  const std::string text = test_support::read_file(path);
  REQUIRE(text ==
          "watchlist_size,eer,frr_at_far,far_at_frr\n"
          "5,0.125,0.5,0.0078125\n"
          "10,0.25,0.625,0.5\n");
}
