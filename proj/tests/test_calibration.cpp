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

#include <catch2/catch_amalgamated.hpp>

#include "test_support.hpp"

using Catch::Matchers::ContainsSubstring;
using test_support::TempDir;

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Labeled sample drawn from a known affine-logistic model.
struct Synthetic {
  std::vector<double> scores;
  std::vector<std::vector<double>> quality;
  std::vector<int> labels;
};

Synthetic draw_from_model(std::size_t n, double w0, const std::vector<double>& w,
                          double b, const std::vector<double>& scales,
                          std::uint64_t seed) {
  Synthetic out;
  osi::SplitMix64 rng(seed);
  out.scores.reserve(n);
  out.quality.reserve(n);
  out.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = rng.next_gauss();
    std::vector<double> q(w.size());
    double z = w0 * s + b;
    for (std::size_t j = 0; j < w.size(); ++j) {
      q[j] = rng.next_gauss() * scales[j];
      z += w[j] * q[j];
    }
    out.scores.push_back(s);
    out.quality.push_back(std::move(q));
    out.labels.push_back(rng.next_unit() < sigmoid(z) ? 1 : 0);
  }
  return out;
}

}  // namespace

TEST_CASE("the default quality measure set has the documented six entries") {
  const std::vector<std::string>& names = osi::default_measure_names();
  REQUIRE(names == std::vector<std::string>{
                       "max_magnitude", "min_magnitude", "impostor_mean(enroll)",
                       "impostor_mean(test)", "snr_db(enroll)", "snr_db(test)"});
  REQUIRE_FALSE(osi::measure_needs_cohort("max_magnitude"));
  REQUIRE(osi::measure_needs_cohort("impostor_mean(enroll)"));
  REQUIRE(osi::measure_needs_cohort("impostor_mean(test)"));
}

TEST_CASE("quality measures compute magnitudes, impostor means, and metadata") {
  osi::EmbeddingStore store;
  store.add("e", "enroll_r", {3.0f, 4.0f}, 15.0f, 6.0f);   // magnitude 5
  store.add("t", "test_r", {0.0f, 2.0f}, 9.0f, 3.5f);      // magnitude 2
  osi::EmbeddingStore cohort_pop;
  cohort_pop.add("c1", "c1r", {1.0f, 0.0f});
  cohort_pop.add("c2", "c2r", {0.0f, 1.0f});
  const osi::CohortSet cohort{&cohort_pop, 2};

  const osi::EmbeddingRecord& enroll = *store.find_recording("enroll_r");
  const osi::EmbeddingRecord& test = *store.find_recording("test_r");
  const std::vector<double> q = osi::quality_vector(enroll, test, cohort);
  REQUIRE(q.size() == 6);
  REQUIRE(q[0] == 5.0);  // max magnitude
  REQUIRE(q[1] == 2.0);  // min magnitude
  // Full-cohort means, not top-k: enroll scores {0.6, 0.8}, test {0.0, 1.0}.
  REQUIRE(q[2] == Catch::Approx(0.7).margin(1e-7));
  REQUIRE(q[3] == Catch::Approx(0.5).margin(1e-7));
  REQUIRE(q[4] == 15.0);
  REQUIRE(q[5] == 9.0);

  // The optional duration measure reads the test side.
  const std::vector<double> dur = osi::quality_vector(
      enroll, test, cohort, {std::string(osi::kDurationMeasure)});
  REQUIRE(dur == std::vector<double>{3.5});
}

TEST_CASE("missing metadata names the offending measure") {
  osi::EmbeddingStore store;
  store.add("e", "enroll_r", {1.0f, 0.0f}, 15.0f);
  store.add("t", "test_r", {0.0f, 1.0f});  // no snr, no duration
  osi::EmbeddingStore cohort_pop;
  cohort_pop.add("c", "cr", {1.0f, 1.0f});
  const osi::CohortSet cohort{&cohort_pop, 1};
  const auto& enroll = *store.find_recording("enroll_r");
  const auto& test = *store.find_recording("test_r");

  REQUIRE_THROWS_WITH(
      osi::quality_vector(enroll, test, cohort, {"snr_db(test)"}),
      ContainsSubstring("snr_db(test)"));
  REQUIRE_THROWS_WITH(
      osi::quality_vector(enroll, test, cohort, {"duration_s(test)"}),
      ContainsSubstring("duration_s(test)"));
  REQUIRE_THROWS_WITH(osi::quality_vector(enroll, test, cohort, {"bogus"}),
                      ContainsSubstring("bogus"));
}

TEST_CASE("applying weights is the documented affine form") {
  osi::CalibratorWeights w;
  w.w0 = 2.0;
  w.w = {1.0};
  w.b = -0.25;
  w.measure_names = {"max_magnitude"};
  REQUIRE(osi::calibrate_apply(0.5, {0.25}, w) == 1.0);

  osi::CalibratorWeights ident;
  ident.w0 = 1.0;
  REQUIRE(osi::calibrate_apply(0.37, {}, ident) == 0.37);

  osi::CalibratorWeights zero;
  zero.w0 = 0.0;
  zero.w = {0.0, 0.0};
  zero.measure_names = {"a", "b"};
  REQUIRE(osi::calibrate_apply(0.9, {5.0, -2.0}, zero) == 0.0);

  REQUIRE_THROWS_AS(osi::calibrate_apply(0.5, {1.0, 2.0}, w), osi::ContractError);
}

TEST_CASE("applying weights is affine in the score") {
  osi::CalibratorWeights w;
  w.w0 = 2.0;
  w.w = {1.0};
  w.b = -0.25;
  w.measure_names = {"m"};
  const std::vector<double> q{0.5};
  // Dyadic inputs make the identity exact in floating point.
  REQUIRE(osi::calibrate_apply(0.5 * 0.25 + 0.5 * 0.75, q, w) ==
          0.5 * osi::calibrate_apply(0.25, q, w) +
              0.5 * osi::calibrate_apply(0.75, q, w));
  // And it holds to rounding error everywhere.
  osi::SplitMix64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const double a = rng.next_unit(), s1 = rng.next_gauss(), s2 = rng.next_gauss();
    const double lhs = osi::calibrate_apply(a * s1 + (1 - a) * s2, q, w);
    const double rhs =
        a * osi::calibrate_apply(s1, q, w) + (1 - a) * osi::calibrate_apply(s2, q, w);
    REQUIRE(lhs == Catch::Approx(rhs).margin(1e-12));
  }
}

TEST_CASE("analytic gradient matches central finite differences") {
  const Synthetic data = draw_from_model(60, 1.0, {0.5, -0.7}, 0.2, {1.0, 2.0}, 5);
  osi::LogisticProblem prob;
  prob.n = data.scores.size();
  prob.d = 3;
  prob.l2 = 0.01;
  prob.y = data.labels;
  prob.x.resize(prob.n * prob.d);
  for (std::size_t i = 0; i < prob.n; ++i) {
    prob.x[i * 3] = data.scores[i];
    prob.x[i * 3 + 1] = data.quality[i][0];
    prob.x[i * 3 + 2] = data.quality[i][1];
  }

  osi::SplitMix64 rng(8);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<double> theta(4);
    for (double& t : theta) t = rng.next_gauss() * 0.5;

    double loss = 0.0;
    std::vector<double> grad;
    prob.loss_grad(theta, loss, grad);
    REQUIRE(loss == Catch::Approx(prob.loss(theta)).margin(1e-12));

    const double h = 1e-6;
    for (std::size_t j = 0; j < 4; ++j) {
      std::vector<double> up = theta, dn = theta;
      up[j] += h;
      dn[j] -= h;
      const double fd = (prob.loss(up) - prob.loss(dn)) / (2.0 * h);
      REQUIRE(grad[j] == Catch::Approx(fd).margin(1e-5));
    }

    // Hessian columns against gradient differences.
    const std::vector<double> hess = prob.hessian(theta);
    for (std::size_t j = 0; j < 4; ++j) {
      std::vector<double> up = theta, dn = theta;
      up[j] += h;
      dn[j] -= h;
      double lu = 0.0, ld = 0.0;
      std::vector<double> gu, gd;
      prob.loss_grad(up, lu, gu);
      prob.loss_grad(dn, ld, gd);
      for (std::size_t a = 0; a < 4; ++a) {
        const double fd = (gu[a] - gd[a]) / (2.0 * h);
        REQUIRE(hess[a * 4 + j] == Catch::Approx(fd).margin(1e-5));
      }
    }
  }
}

TEST_CASE("the loss at zero weights is log 2") {
  osi::LogisticProblem prob;
  prob.n = 4;
  prob.d = 1;
  prob.x = {1.0, -1.0, 2.0, 0.5};
  prob.y = {1, 0, 1, 0};
  REQUIRE(prob.loss({0.0, 0.0}) == Catch::Approx(std::log(2.0)).margin(1e-15));
}

TEST_CASE("cholesky solves SPD systems and rejects singular ones") {
  const std::vector<double> a{4.0, 1.0, 2.0, 1.0, 3.0, 0.0, 2.0, 0.0, 5.0};
  const std::vector<double> rhs{1.0, 2.0, 3.0};
  std::vector<double> x;
  REQUIRE(osi::detail::cholesky_solve(a, rhs, 3, x));
  for (std::size_t i = 0; i < 3; ++i) {
    double got = 0.0;
    for (std::size_t j = 0; j < 3; ++j) got += a[i * 3 + j] * x[j];
    REQUIRE(got == Catch::Approx(rhs[i]).margin(1e-12));
  }

  const std::vector<double> singular{1.0, 1.0, 1.0, 1.0};  // rank 1
  REQUIRE_FALSE(osi::detail::cholesky_solve(singular, {1.0, 2.0}, 2, x));
}

TEST_CASE("training separates separable 1-d data") {
  const std::vector<double> scores{-2.0, -1.0, 1.0, 2.0};
  const std::vector<std::vector<double>> quality(4);
  const std::vector<int> labels{0, 0, 1, 1};
  osi::TrainConfig cfg;
  cfg.l2 = 0.1;
  const osi::CalibratorWeights w = osi::calibrate_train(scores, quality, labels, {}, cfg);
  REQUIRE(w.w0 > 0.0);
  REQUIRE(w.iterations > 0);

  // Training loss beats the coin-flip baseline of ln 2.
  double loss = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double p = sigmoid(osi::calibrate_apply(scores[i], {}, w));
    loss += labels[i] ? -std::log(p) : -std::log(1.0 - p);
  }
  REQUIRE(loss / 4.0 < std::log(2.0));
}

TEST_CASE("uninformative features leave only the class prior") {
  const Synthetic data = draw_from_model(50000, 0.0, {0.0}, 0.0, {1.0}, 11);
  // Re-label by an independent coin with 30% heads.
  std::vector<int> labels = data.labels;
  osi::SplitMix64 coin(12);
  for (int& y : labels) y = coin.next_unit() < 0.3 ? 1 : 0;

  osi::TrainConfig cfg;
  cfg.l2 = 1e-4;
  const osi::CalibratorWeights w =
      osi::calibrate_train(data.scores, data.quality, labels, {"q0"}, cfg);
  REQUIRE(std::abs(w.w0) < 0.05);
  REQUIRE(std::abs(w.w[0]) < 0.05);
  REQUIRE(sigmoid(w.b) == Catch::Approx(0.3).margin(1e-2));
}

TEST_CASE("training recovers the generating model") {
  const double w0 = 1.2, b = -0.4;
  const std::vector<double> wq{0.15, -0.6};
  const std::vector<double> scales{5.0, 1.0};  // mixed scales exercise standardization
  const Synthetic data = draw_from_model(20000, w0, wq, b, scales, 21);

  osi::TrainConfig cfg;
  cfg.l2 = 1e-6;
  const osi::CalibratorWeights got =
      osi::calibrate_train(data.scores, data.quality, data.labels, {"qa", "qb"}, cfg);

  REQUIRE(std::abs(got.w0 - w0) / std::abs(w0) < 0.1);
  REQUIRE(std::abs(got.w[0] - wq[0]) / std::abs(wq[0]) < 0.1);
  REQUIRE(std::abs(got.w[1] - wq[1]) / std::abs(wq[1]) < 0.1);
  REQUIRE(std::abs(got.b - b) / std::abs(b) < 0.1);
  REQUIRE(got.measure_names == std::vector<std::string>{"qa", "qb"});

  // Determinism: identical inputs, identical weights.
  const osi::CalibratorWeights again =
      osi::calibrate_train(data.scores, data.quality, data.labels, {"qa", "qb"}, cfg);
  REQUIRE(again.w0 == got.w0);
  REQUIRE(again.w == got.w);
  REQUIRE(again.b == got.b);
  REQUIRE(again.iterations == got.iterations);
}

TEST_CASE("training rejects malformed inputs") {
  const std::vector<std::vector<double>> q1(1), q2(2);
  REQUIRE_THROWS_WITH(osi::calibrate_train({}, {}, {}, {}), ContainsSubstring("no training"));
  REQUIRE_THROWS_AS(osi::calibrate_train({0.5}, q1, {1}, {}), osi::ContractError);
  REQUIRE_THROWS_WITH(osi::calibrate_train({0.5, 0.6}, q2, {1, 2}, {}),
                      ContainsSubstring("labels"));
  REQUIRE_THROWS_WITH(
      osi::calibrate_train({0.5, std::numeric_limits<double>::infinity()}, q2, {1, 0}, {}),
      ContainsSubstring("non-finite"));
  REQUIRE_THROWS_WITH(osi::calibrate_train({0.5, 0.6}, q2, {0, 1}, {"m"}),
                      ContainsSubstring("expected"));
}

TEST_CASE("an unreachable tolerance reports the final gradient norm") {
  const Synthetic data = draw_from_model(500, 1.0, {0.5}, 0.1, {1.0}, 31);
  osi::TrainConfig cfg;
  cfg.max_iterations = 1;
  REQUIRE_THROWS_WITH(
      osi::calibrate_train(data.scores, data.quality, data.labels, {"q"}, cfg),
      ContainsSubstring("gradient"));
}

TEST_CASE("weights round-trip through their file format") {
  osi::CalibratorWeights w;
  w.w0 = 1.25;
  w.w = {0.1, -2.7, 3.333333333333333};
  w.b = -0.125;
  w.measure_names = {"max_magnitude", "min_magnitude", "snr_db(test)"};
  w.l2 = 1e-4;
  w.seed = 99;
  w.iterations = 17;

  TempDir tmp;
  const std::string path = tmp.file("weights.json");
  osi::write_weights(w, path);
  const osi::CalibratorWeights back = osi::read_weights(path);
  REQUIRE(back.w0 == w.w0);
  REQUIRE(back.w == w.w);
  REQUIRE(back.b == w.b);
  REQUIRE(back.measure_names == w.measure_names);
  REQUIRE(back.l2 == w.l2);
  REQUIRE(back.seed == w.seed);
  REQUIRE(back.iterations == w.iterations);
}

TEST_CASE("calibrating a run applies the affine transform per trial") {
  const osi::EmbeddingStore store = test_support::small_population(8, 3, 8, 0.3, 41);
  const osi::EmbeddingStore cohort_pop = test_support::small_population(10, 2, 8, 0.3, 42);
  const osi::CohortSet cohort{&cohort_pop, 8};
  osi::SplitPlan plan = osi::build_kfold(store.speakers(), 4, 41);
  osi::select_enrollment(plan, store, 41);
  const std::vector<osi::Trial> trials = osi::make_trials(plan, store, std::nullopt, 41);
  const std::vector<osi::ScoreRecord> records = osi::score_run(plan, trials, store);

  osi::CalibratorWeights w;
  w.w0 = 1.5;
  w.w = {0.25, -0.5};
  w.b = 0.75;
  w.measure_names = {"max_magnitude", "impostor_mean(test)"};

  const std::vector<osi::ScoreRecord> calibrated =
      osi::calibrate_run(records, plan, store, cohort, w);
  REQUIRE(calibrated.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const osi::WatchlistSplit& split = plan.splits[records[i].split_id];
    const osi::EmbeddingRecord& enroll =
        *store.find_recording(split.enrollment.at(records[i].best_speaker));
    const osi::EmbeddingRecord& test = *store.find_recording(records[i].test_recording);
    const std::vector<double> q =
        osi::quality_vector(enroll, test, cohort, w.measure_names);
    REQUIRE(calibrated[i].transformed_score.has_value());
    REQUIRE(*calibrated[i].transformed_score ==
            osi::calibrate_apply(records[i].raw_score, q, w));
    REQUIRE(calibrated[i].raw_score == records[i].raw_score);
    REQUIRE(calibrated[i].best_speaker == records[i].best_speaker);
  }

  // With identity weights the transform reproduces the raw score.
  osi::CalibratorWeights ident;
  ident.w0 = 1.0;
  const std::vector<osi::ScoreRecord> same =
      osi::calibrate_run(records, plan, store, cohort, ident);
  for (std::size_t i = 0; i < records.size(); ++i)
    REQUIRE(*same[i].transformed_score == records[i].raw_score);
}
