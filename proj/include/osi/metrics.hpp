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
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "osi/common.hpp"
#include "osi/scoring.hpp"

namespace osi {

/// Scores split by trial label, each sorted ascending. target = in-set
/// trials (false rejections happen here), nontarget = out-of-set trials
/// (false alarms happen here).
struct ScorePartition {
  std::vector<double> targets;
  std::vector<double> nontargets;
};

inline ScorePartition partition(const std::vector<ScoreRecord>& records,
                                bool use_transformed) {
  if (records.empty())
    throw ContractError("no score records: rates are not computable");
  ScorePartition p;
  for (const ScoreRecord& r : records) {
    if (use_transformed && !r.transformed_score)
      throw ContractError("record for '" + r.test_recording +
                          "' lacks transformed_score");
    const double s = use_transformed ? *r.transformed_score : r.raw_score;
    (r.label == TrialLabel::kInset ? p.targets : p.nontargets).push_back(s);
  }
  std::sort(p.targets.begin(), p.targets.end());
  std::sort(p.nontargets.begin(), p.nontargets.end());
  return p;
}

/// One threshold of the sweep. Rates follow the strict-greater detect rule:
/// FAR(t) = fraction of nontargets > t, FRR(t) = fraction of targets <= t,
/// so detect() and the reported rates agree at every threshold.
struct OperatingPoint {
  double threshold = 0.0;
  double far = 0.0;
  double frr = 0.0;
};

/// Full threshold sweep in one merge pass over the two sorted lists: the
/// pre-threshold point (everything accepted: FAR 1, FRR 0) followed by one
/// point per distinct observed score, ascending. O(n) after sorting; no
/// per-threshold rescans, which matters at millions of trials.
inline std::vector<OperatingPoint> sweep_operating_points(const ScorePartition& p) {
  if (p.targets.empty() || p.nontargets.empty())
    throw ContractError("rates need at least one target and one nontarget score");
  const double nt = static_cast<double>(p.targets.size());
  const double nn = static_cast<double>(p.nontargets.size());

  std::vector<OperatingPoint> points;
  points.reserve(p.targets.size() + p.nontargets.size() + 1);
  points.push_back({-std::numeric_limits<double>::infinity(), 1.0, 0.0});

  std::size_t ti = 0, ni = 0;
  while (ti < p.targets.size() || ni < p.nontargets.size()) {
    double s;
    if (ni == p.nontargets.size()) s = p.targets[ti];
    else if (ti == p.targets.size()) s = p.nontargets[ni];
    else s = std::min(p.targets[ti], p.nontargets[ni]);
    while (ti < p.targets.size() && p.targets[ti] <= s) ++ti;
    while (ni < p.nontargets.size() && p.nontargets[ni] <= s) ++ni;
    points.push_back({s, static_cast<double>(p.nontargets.size() - ni) / nn,
                      static_cast<double>(ti) / nt});
  }
  return points;
}

/// Equal error rate: the crossing of FAR (non-increasing) and FRR
/// (non-decreasing) along the sweep, linearly interpolated between the two
/// bracketing thresholds when the step functions jump across each other.
inline double eer(const ScorePartition& p) {
  const std::vector<OperatingPoint> points = sweep_operating_points(p);
  for (std::size_t j = 1; j < points.size(); ++j) {
    const double d = points[j].far - points[j].frr;
    if (d > 0.0) continue;
    if (d == 0.0) return points[j].far;
    const double d_prev = points[j - 1].far - points[j - 1].frr;
    const double alpha = d_prev / (d_prev - d);
    return points[j - 1].far + alpha * (points[j].far - points[j - 1].far);
  }
  // FAR reaches 0 and FRR reaches 1 at the maximum score, so the difference
  // always crosses zero within the sweep.
  throw ContractError("eer sweep found no crossing");
}

enum class FixedRate { kFar, kFrr };

/// Operating point under a rate budget: among thresholds at the distinct
/// observed scores, picks the one that keeps the fixed rate strictly below
/// the level while optimizing the reported rate. A fixed FAR budget takes
/// the smallest such threshold (lowest FRR); a fixed FRR budget takes the
/// largest (lowest FAR). Reports the other rate there.
inline double rate_at(const ScorePartition& p, FixedRate fixed, double level) {
  if (!(level > 0.0 && level < 1.0))
    throw ContractError("rate level must lie in (0, 1), got " + format_double(level));
  const std::vector<OperatingPoint> points = sweep_operating_points(p);
  if (fixed == FixedRate::kFar) {
    for (std::size_t j = 1; j < points.size(); ++j)
      if (points[j].far < level) return points[j].frr;
    throw ContractError("no threshold attains far < " + format_double(level));
  }
  std::optional<double> best;
  double min_frr = 1.0;
  for (std::size_t j = 1; j < points.size(); ++j) {
    min_frr = std::min(min_frr, points[j].frr);
    if (points[j].frr < level) best = points[j].far;
  }
  if (!best)
    throw ContractError("no threshold attains frr < " + format_double(level) +
                        " (minimum reachable frr is " + format_double(min_frr) + ")");
  return *best;
}

/// DET curve: the whole sweep as (far, frr) pairs in increasing-FRR order,
/// optionally downsampled uniformly to max_points with both endpoints kept.
inline std::vector<OperatingPoint> det_curve(const ScorePartition& p,
                                             std::optional<std::size_t> max_points = {}) {
  std::vector<OperatingPoint> points = sweep_operating_points(p);
  if (!max_points || *max_points >= points.size()) return points;
  const std::size_t m = std::max<std::size_t>(2, *max_points);
  std::vector<OperatingPoint> out;
  out.reserve(m);
  const std::size_t n = points.size();
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t idx = static_cast<std::size_t>(
        std::llround(static_cast<double>(i) * static_cast<double>(n - 1) /
                     static_cast<double>(m - 1)));
    out.push_back(points[idx]);
  }
  return out;
}

/// Equal-width histogram. Bins are left-closed right-open except the final
/// bin, which also includes the upper range bound. Scores outside the range
/// land in the underflow/overflow sentinels, so counts always sum to the
/// input size.
struct Histogram {
  double lo = 0.0;
  double hi = 1.0;
  std::vector<std::uint64_t> counts;
  std::uint64_t underflow = 0;
  std::uint64_t overflow = 0;
};

inline Histogram histogram(const std::vector<double>& scores, std::size_t bins,
                           double lo, double hi) {
  if (bins == 0) throw ContractError("histogram needs at least one bin");
  if (!(lo < hi))
    throw ContractError("invalid histogram range [" + format_double(lo) + ", " +
                        format_double(hi) + "]");
  Histogram h;
  h.lo = lo;
  h.hi = hi;
  h.counts.assign(bins, 0);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double s : scores) {
    if (s < lo) { ++h.underflow; continue; }
    if (s > hi) { ++h.overflow; continue; }
    std::size_t idx = static_cast<std::size_t>((s - lo) / width);
    if (idx >= bins) idx = bins - 1;
    ++h.counts[idx];
  }
  return h;
}

// Report and curve files. DET CSV: far,frr per line. Histogram CSV:
// bin_lo,bin_hi,count with sentinel rows for the out-of-range tails.

inline void write_det_csv(const std::vector<OperatingPoint>& points,
                          const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("cannot write file: " + path);
  out << "far,frr\n";
  for (const OperatingPoint& pt : points)
    out << format_double(pt.far) << "," << format_double(pt.frr) << "\n";
  if (!out) throw ContractError("write failed: " + path);
}

inline void write_histogram_csv(const Histogram& h, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("cannot write file: " + path);
  out << "bin_lo,bin_hi,count\n";
  out << "-inf," << format_double(h.lo) << "," << h.underflow << "\n";
  const double width = (h.hi - h.lo) / static_cast<double>(h.counts.size());
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    const double bin_lo = h.lo + width * static_cast<double>(i);
    const double bin_hi = (i + 1 == h.counts.size()) ? h.hi : h.lo + width * static_cast<double>(i + 1);
    out << format_double(bin_lo) << "," << format_double(bin_hi) << "," << h.counts[i]
        << "\n";
  }
  out << format_double(h.hi) << ",inf," << h.overflow << "\n";
  if (!out) throw ContractError("write failed: " + path);
}

}  // namespace osi
