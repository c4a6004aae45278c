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
#include <fstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "osi/common.hpp"
#include "osi/embedding_store.hpp"
#include "osi/parallel.hpp"
#include "osi/scoring.hpp"
#include "osi/transforms.hpp"
#include "osi/watchlist.hpp"

namespace osi {

/// The default quality measure set: max/min embedding magnitude over the
/// trial pair, per-side impostor-cohort score means, per-side SNR.
inline const std::vector<std::string>& default_measure_names() {
  static const std::vector<std::string> names = {
      "max_magnitude",        "min_magnitude",   "impostor_mean(enroll)",
      "impostor_mean(test)",  "snr_db(enroll)",  "snr_db(test)"};
  return names;
}

/// Utterance duration of the test side, available as an optional extra
/// measure beyond the default set.
inline constexpr std::string_view kDurationMeasure = "duration_s(test)";

/// Mean cosine score of the reference against the whole impostor cohort.
/// Unlike the normalization statistics, this uses every cohort embedding,
/// not the top-k.
inline double impostor_mean(const EmbeddingRecord& reference, const CohortSet& cohort) {
  const std::vector<double> scores = cohort_scores(reference, cohort);
  if (scores.empty()) throw ContractError("impostor cohort is empty");
  double sum = 0.0;
  for (double s : scores) sum += s;
  return sum / static_cast<double>(scores.size());
}

inline bool measure_needs_cohort(const std::string& name) {
  return name == "impostor_mean(enroll)" || name == "impostor_mean(test)";
}

namespace detail {

inline double quality_measure(const std::string& name, const EmbeddingRecord& enroll,
                              const EmbeddingRecord& test, double enroll_impostor,
                              double test_impostor) {
  if (name == "max_magnitude") return std::max(enroll.raw_magnitude, test.raw_magnitude);
  if (name == "min_magnitude") return std::min(enroll.raw_magnitude, test.raw_magnitude);
  if (name == "impostor_mean(enroll)") return enroll_impostor;
  if (name == "impostor_mean(test)") return test_impostor;
  if (name == "snr_db(enroll)") {
    if (!enroll.snr_db)
      throw ContractError("recording '" + enroll.recording_id +
                          "' lacks the snr_db(enroll) measure");
    return *enroll.snr_db;
  }
  if (name == "snr_db(test)") {
    if (!test.snr_db)
      throw ContractError("recording '" + test.recording_id +
                          "' lacks the snr_db(test) measure");
    return *test.snr_db;
  }
  if (name == kDurationMeasure) {
    if (!test.duration_s)
      throw ContractError("recording '" + test.recording_id +
                          "' lacks the duration_s(test) measure");
    return *test.duration_s;
  }
  throw ContractError("unknown quality measure '" + name + "'");
}

}  // namespace detail

/// Quality measures for one trial pair, in measure_names order. Magnitudes
/// come from the pre-normalization vector norms; impostor averages score the
/// full cohort.
inline std::vector<double> quality_vector(const EmbeddingRecord& enroll,
                                          const EmbeddingRecord& test,
                                          const CohortSet& cohort,
                                          const std::vector<std::string>& measure_names =
                                              default_measure_names()) {
  double enroll_imp = 0.0, test_imp = 0.0;
  bool need_cohort = false;
  for (const std::string& name : measure_names)
    if (measure_needs_cohort(name)) need_cohort = true;
  if (need_cohort) {
    enroll_imp = impostor_mean(enroll, cohort);
    test_imp = impostor_mean(test, cohort);
  }
  std::vector<double> q;
  q.reserve(measure_names.size());
  for (const std::string& name : measure_names)
    q.push_back(detail::quality_measure(name, enroll, test, enroll_imp, test_imp));
  return q;
}

/// Affine calibration weights over (score, quality measures).
struct CalibratorWeights {
  double w0 = 1.0;           ///< weight on the raw score
  std::vector<double> w;     ///< weights on the quality measures
  double b = 0.0;            ///< bias
  std::vector<std::string> measure_names;
  double l2 = 0.0;
  std::uint64_t seed = 0;
  std::size_t iterations = 0;
};

/// Applies the affine transform w0*s + sum_k w_k*q_k + b.
inline double calibrate_apply(double s, const std::vector<double>& q,
                              const CalibratorWeights& weights) {
  if (q.size() != weights.w.size())
    throw ContractError("quality vector has " + std::to_string(q.size()) +
                        " measures, calibrator expects " +
                        std::to_string(weights.w.size()));
  double out = weights.w0 * s;
  for (std::size_t k = 0; k < q.size(); ++k) out += weights.w[k] * q[k];
  return out + weights.b;
}

/// Regularized logistic-regression objective over a fixed design matrix,
/// exposed so the analytical gradient can be checked against finite
/// differences. Parameters are packed as [w_0..w_{d-1}, bias]; the l2
/// penalty covers the weights only.
struct LogisticProblem {
  std::size_t n = 0;       ///< rows
  std::size_t d = 0;       ///< feature columns (bias excluded)
  std::vector<double> x;   ///< row-major n x d
  std::vector<int> y;      ///< labels in {0, 1}
  double l2 = 0.0;

  double margin(const std::vector<double>& theta, std::size_t i) const {
    double z = theta[d];
    for (std::size_t j = 0; j < d; ++j) z += theta[j] * x[i * d + j];
    return z;
  }

  /// Mean binary cross-entropy plus the l2 penalty, via the overflow-safe
  /// softplus identity.
  double loss(const std::vector<double>& theta) const {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double z = margin(theta, i);
      const double softplus = z > 0.0 ? z + std::log1p(std::exp(-z))
                                      : std::log1p(std::exp(z));
      total += softplus - (y[i] ? z : 0.0);
    }
    double penalty = 0.0;
    for (std::size_t j = 0; j < d; ++j) penalty += theta[j] * theta[j];
    return total / static_cast<double>(n) + l2 * penalty;
  }

  void loss_grad(const std::vector<double>& theta, double& loss_out,
                 std::vector<double>& grad) const {
    grad.assign(d + 1, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double z = margin(theta, i);
      const double softplus = z > 0.0 ? z + std::log1p(std::exp(-z))
                                      : std::log1p(std::exp(z));
      total += softplus - (y[i] ? z : 0.0);
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double r = p - static_cast<double>(y[i]);
      for (std::size_t j = 0; j < d; ++j) grad[j] += r * x[i * d + j];
      grad[d] += r;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    double penalty = 0.0;
    for (std::size_t j = 0; j <= d; ++j) grad[j] *= inv_n;
    for (std::size_t j = 0; j < d; ++j) {
      penalty += theta[j] * theta[j];
      grad[j] += 2.0 * l2 * theta[j];
    }
    loss_out = total * inv_n + l2 * penalty;
  }

  /// Dense (d+1)^2 Hessian, row-major.
  std::vector<double> hessian(const std::vector<double>& theta) const {
    const std::size_t m = d + 1;
    std::vector<double> h(m * m, 0.0);
    std::vector<double> row(m);
    for (std::size_t i = 0; i < n; ++i) {
      const double z = margin(theta, i);
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double s = p * (1.0 - p);
      for (std::size_t j = 0; j < d; ++j) row[j] = x[i * d + j];
      row[d] = 1.0;
      for (std::size_t a = 0; a < m; ++a)
        for (std::size_t b = 0; b <= a; ++b) h[a * m + b] += s * row[a] * row[b];
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = 0; b <= a; ++b) {
        h[a * m + b] *= inv_n;
        h[b * m + a] = h[a * m + b];
      }
    for (std::size_t j = 0; j < d; ++j) h[j * m + j] += 2.0 * l2;
    return h;
  }
};

namespace detail {

/// Cholesky solve of the SPD system a x = rhs (size m). Returns false when
/// the factorization hits a non-positive pivot.
inline bool cholesky_solve(std::vector<double> a, std::vector<double> rhs,
                           std::size_t m, std::vector<double>& x) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double sum = a[i * m + j];
      for (std::size_t k = 0; k < j; ++k) sum -= a[i * m + k] * a[j * m + k];
      if (i == j) {
        if (!(sum > 0.0) || !std::isfinite(sum)) return false;
        a[i * m + i] = std::sqrt(sum);
      } else {
        a[i * m + j] = sum / a[j * m + j];
      }
    }
  }
  for (std::size_t i = 0; i < m; ++i) {
    double sum = rhs[i];
    for (std::size_t k = 0; k < i; ++k) sum -= a[i * m + k] * rhs[k];
    rhs[i] = sum / a[i * m + i];
  }
  x.assign(m, 0.0);
  for (std::size_t ii = m; ii-- > 0;) {
    double sum = rhs[ii];
    for (std::size_t k = ii + 1; k < m; ++k) sum -= a[k * m + ii] * x[k];
    x[ii] = sum / a[ii * m + ii];
  }
  return true;
}

}  // namespace detail

struct TrainConfig {
  double l2 = 1e-4;
  std::uint64_t seed = 0;
  std::size_t max_iterations = 10000;
  double tolerance = 1e-8;  ///< gradient max-norm stopping threshold
};

/// Trains the calibrator by full-batch Newton iterations with Armijo
/// backtracking on the logistic loss. Features are standardized to mean 0
/// and variance 1 for conditioning, and the standardization is folded back
/// so the returned weights apply directly to raw (score, quality) inputs.
/// Deterministic: no random initialization, fixed iteration order.
inline CalibratorWeights calibrate_train(const std::vector<double>& scores,
                                         const std::vector<std::vector<double>>& quality,
                                         const std::vector<int>& labels,
                                         const std::vector<std::string>& measure_names,
                                         const TrainConfig& cfg = {}) {
  const std::size_t n = scores.size();
  const std::size_t k = measure_names.size();
  if (n == 0) throw ContractError("no training examples");
  if (quality.size() != n || labels.size() != n)
    throw ContractError("scores, quality vectors, and labels must align");
  bool any_pos = false, any_neg = false;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ContractError("labels must be 0 or 1");
    (y ? any_pos : any_neg) = true;
  }
  if (!any_pos || !any_neg)
    throw ContractError("training data contains a single class only");
  if (cfg.l2 < 0.0) throw ContractError("l2 must be nonnegative");

  const std::size_t d = 1 + k;
  LogisticProblem prob;
  prob.n = n;
  prob.d = d;
  prob.l2 = cfg.l2;
  prob.x.resize(n * d);
  prob.y = labels;
  for (std::size_t i = 0; i < n; ++i) {
    if (quality[i].size() != k)
      throw ContractError("quality vector " + std::to_string(i) + " has " +
                          std::to_string(quality[i].size()) + " measures, expected " +
                          std::to_string(k));
    prob.x[i * d] = scores[i];
    for (std::size_t j = 0; j < k; ++j) prob.x[i * d + 1 + j] = quality[i][j];
  }
  for (double v : prob.x)
    if (!std::isfinite(v)) throw ContractError("non-finite training feature");

  // Column standardization; constant columns keep scale 1 (their weight is
  // redundant with the bias and decays to 0 under the l2 penalty).
  std::vector<double> mu(d, 0.0), sigma(d, 1.0);
  for (std::size_t j = 0; j < d; ++j) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += prob.x[i * d + j];
    mu[j] = sum / static_cast<double>(n);
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dv = prob.x[i * d + j] - mu[j];
      sq += dv * dv;
    }
    const double sd = std::sqrt(sq / static_cast<double>(n));
    sigma[j] = sd > 0.0 ? sd : 1.0;
    for (std::size_t i = 0; i < n; ++i)
      prob.x[i * d + j] = (prob.x[i * d + j] - mu[j]) / sigma[j];
  }

  std::vector<double> theta(d + 1, 0.0), grad, direction;
  double loss = 0.0;
  prob.loss_grad(theta, loss, grad);
  std::size_t iterations = 0;
  bool converged = false;
  double gnorm = 0.0;
  for (; iterations < cfg.max_iterations; ++iterations) {
    gnorm = 0.0;
    for (double g : grad) gnorm = std::max(gnorm, std::abs(g));
    if (gnorm < cfg.tolerance) { converged = true; break; }

    std::vector<double> h = prob.hessian(theta);
    std::vector<double> rhs(d + 1);
    for (std::size_t j = 0; j <= d; ++j) rhs[j] = -grad[j];
    double jitter = 0.0;
    while (!detail::cholesky_solve(h, rhs, d + 1, direction)) {
      jitter = jitter == 0.0 ? 1e-10 : jitter * 100.0;
      if (jitter > 1.0)
        throw ContractError("calibration optimizer failed: Hessian is degenerate");
      for (std::size_t j = 0; j <= d; ++j) h[j * (d + 2)] += jitter;
    }

    double slope = 0.0;
    for (std::size_t j = 0; j <= d; ++j) slope += grad[j] * direction[j];
    double step = 1.0;
    std::vector<double> candidate(d + 1);
    double new_loss = loss;
    bool accepted = false;
    while (step > 1e-14) {
      for (std::size_t j = 0; j <= d; ++j)
        candidate[j] = theta[j] + step * direction[j];
      new_loss = prob.loss(candidate);
      if (new_loss <= loss + 1e-4 * step * slope) { accepted = true; break; }
      step *= 0.5;
    }
    if (!accepted) break;
    if (new_loss > loss)
      throw std::logic_error("calibration objective increased within a step");
    theta = candidate;
    prob.loss_grad(theta, loss, grad);
  }
  if (!converged) {
    gnorm = 0.0;
    for (double g : grad) gnorm = std::max(gnorm, std::abs(g));
    if (gnorm >= cfg.tolerance)
      throw ContractError("calibration failed to reach tolerance " +
                          format_double(cfg.tolerance) + "; final gradient max-norm " +
                          format_double(gnorm));
  }

  CalibratorWeights out;
  out.measure_names = measure_names;
  out.l2 = cfg.l2;
  out.seed = cfg.seed;
  out.iterations = iterations;
  out.w0 = theta[0] / sigma[0];
  out.w.resize(k);
  double bias = theta[d];
  bias -= theta[0] * mu[0] / sigma[0];
  for (std::size_t j = 0; j < k; ++j) {
    out.w[j] = theta[1 + j] / sigma[1 + j];
    bias -= theta[1 + j] * mu[1 + j] / sigma[1 + j];
  }
  out.b = bias;
  return out;
}

// Weights file: JSON {w0, w, b, measure_names, l2, seed, iterations}.

inline nlohmann::ordered_json weights_to_json(const CalibratorWeights& weights) {
  nlohmann::ordered_json j;
  j["w0"] = weights.w0;
  j["w"] = weights.w;
  j["b"] = weights.b;
  j["measure_names"] = weights.measure_names;
  j["l2"] = weights.l2;
  j["seed"] = weights.seed;
  j["iterations"] = weights.iterations;
  return j;
}

inline CalibratorWeights weights_from_json(const nlohmann::json& j) {
  try {
    CalibratorWeights w;
    w.w0 = j.at("w0").get<double>();
    w.w = j.at("w").get<std::vector<double>>();
    w.b = j.at("b").get<double>();
    w.measure_names = j.at("measure_names").get<std::vector<std::string>>();
    w.l2 = j.value("l2", 0.0);
    w.seed = j.value("seed", std::uint64_t{0});
    w.iterations = j.value("iterations", std::size_t{0});
    if (w.w.size() != w.measure_names.size())
      throw ContractError("weights file has " + std::to_string(w.w.size()) +
                          " weights for " + std::to_string(w.measure_names.size()) +
                          " measure names");
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("malformed weights file: ") + e.what());
  }
}

inline void write_weights(const CalibratorWeights& weights, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("cannot write file: " + path);
  out << weights_to_json(weights).dump(2) << "\n";
  if (!out) throw ContractError("write failed: " + path);
}

inline CalibratorWeights read_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ContractError("malformed weights file " + path + ": " + e.what());
  }
  return weights_from_json(j);
}

/// Quality vectors for every score record of a run: the enroll side is the
/// best-matching speaker's enrollment, the test side the trial recording.
/// Impostor means are computed once per distinct recording and reused.
inline std::vector<std::vector<double>> quality_for_records(
    const std::vector<ScoreRecord>& records, const SplitPlan& plan,
    const EmbeddingStore& store, const CohortSet& cohort,
    const std::vector<std::string>& measure_names, unsigned threads = 0) {
  std::vector<std::unordered_map<std::string, const EmbeddingRecord*>> enroll_of(
      plan.splits.size());
  for (std::size_t s = 0; s < plan.splits.size(); ++s) {
    const EnrollmentMatrix m = resolve_enrollment(plan.splits[s], store);
    for (std::size_t j = 0; j < m.speakers.size(); ++j)
      enroll_of[s].emplace(m.speakers[j], m.embeddings[j]);
  }

  bool need_cohort = false;
  for (const std::string& name : measure_names)
    if (measure_needs_cohort(name)) need_cohort = true;

  std::unordered_map<std::string, double> impostor_of;
  if (need_cohort) {
    std::vector<const EmbeddingRecord*> references;
    std::unordered_set<std::string> seen;
    for (const auto& per_split : enroll_of)
      for (const auto& [speaker, rec] : per_split)
        if (seen.insert(rec->recording_id).second) references.push_back(rec);
    for (const ScoreRecord& r : records) {
      const EmbeddingRecord* rec = store.find_recording(r.test_recording);
      if (!rec)
        throw ContractError("test recording '" + r.test_recording + "' not in store");
      if (seen.insert(rec->recording_id).second) references.push_back(rec);
    }
    std::vector<double> means(references.size());
    parallel_for(references.size(), threads,
                 [&](std::size_t i) { means[i] = impostor_mean(*references[i], cohort); });
    impostor_of.reserve(references.size());
    for (std::size_t i = 0; i < references.size(); ++i)
      impostor_of.emplace(references[i]->recording_id, means[i]);
  }

  std::vector<std::vector<double>> quality(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    const ScoreRecord& r = records[i];
    if (r.split_id >= plan.splits.size())
      throw ContractError("unknown split_id " + std::to_string(r.split_id));
    auto it = enroll_of[r.split_id].find(r.best_speaker);
    if (it == enroll_of[r.split_id].end())
      throw ContractError("speaker '" + r.best_speaker + "' is not enrolled in split " +
                          std::to_string(r.split_id));
    const EmbeddingRecord& enroll = *it->second;
    const EmbeddingRecord& test = store.by_recording(r.test_recording);
    const double enroll_imp =
        need_cohort ? impostor_of.at(enroll.recording_id) : 0.0;
    const double test_imp = need_cohort ? impostor_of.at(test.recording_id) : 0.0;
    std::vector<double> q;
    q.reserve(measure_names.size());
    for (const std::string& name : measure_names)
      q.push_back(detail::quality_measure(name, enroll, test, enroll_imp, test_imp));
    quality[i] = std::move(q);
  });
  return quality;
}

/// Applies trained weights to every record: transformed_score becomes the
/// affine transform of the raw score and the trial's quality vector.
inline std::vector<ScoreRecord> calibrate_run(const std::vector<ScoreRecord>& records,
                                              const SplitPlan& plan,
                                              const EmbeddingStore& store,
                                              const CohortSet& cohort,
                                              const CalibratorWeights& weights,
                                              unsigned threads = 0) {
  const std::vector<std::vector<double>> quality =
      quality_for_records(records, plan, store, cohort, weights.measure_names, threads);
  std::vector<ScoreRecord> out = records;
  parallel_for(out.size(), threads, [&](std::size_t i) {
    out[i].transformed_score = calibrate_apply(out[i].raw_score, quality[i], weights);
  });
  return out;
}

}  // namespace osi
