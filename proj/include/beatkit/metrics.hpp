#pragma once

// Beat evaluation: F-measure with a +-70 ms window and the continuity scores
// CMLt / AMLt (17.5% phase and period tolerance), following the conventions
// of mir_eval.beat.

#include <algorithm>
#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include "beatkit/error.hpp"
#include "beatkit/targets.hpp"

namespace beatkit {

inline constexpr double kFMeasureWindow = 0.070;
inline constexpr double kContinuityTolerance = 0.175;

struct MatchCounts {
  std::size_t hits = 0;
  std::size_t false_positives = 0;
  std::size_t misses = 0;

  double precision() const {
    const std::size_t n = hits + false_positives;
    return n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
  }
  double recall() const {
    const std::size_t n = hits + misses;
    return n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
  }
};

// One-to-one matching: candidate pairs within tol are taken closest first
// (ties by reference index, then estimate index).
inline MatchCounts match_events(const std::vector<double>& est, const std::vector<double>& ref, double tol) {
  std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
  for (std::size_t r = 0; r < ref.size(); ++r) {
    const auto lo = std::lower_bound(est.begin(), est.end(), ref[r] - tol);
    for (auto it = lo; it != est.end() && *it <= ref[r] + tol; ++it)
      if (std::abs(*it - ref[r]) <= tol) pairs.emplace_back(std::abs(*it - ref[r]), r, it - est.begin());
  }
  std::sort(pairs.begin(), pairs.end());
  std::vector<bool> used_est(est.size()), used_ref(ref.size());
  MatchCounts c;
  for (const auto& [d, r, e] : pairs) {
    if (used_ref[r] || used_est[e]) continue;
    used_ref[r] = used_est[e] = true;
    ++c.hits;
  }
  c.false_positives = est.size() - c.hits;
  c.misses = ref.size() - c.hits;
  return c;
}

inline double f_measure(const MatchCounts& c, std::size_t n_est, std::size_t n_ref) {
  if (n_est == 0 && n_ref == 0) return 1.0;
  if (n_est == 0 || n_ref == 0 || c.hits == 0) return 0.0;
  const double p = c.precision(), r = c.recall();
  return 2.0 * p * r / (p + r);
}

inline double f_measure(const std::vector<double>& est, const std::vector<double>& ref, double tol = kFMeasureWindow) {
  return f_measure(match_events(est, ref, tol), est.size(), ref.size());
}

// Reference, offbeat, double tempo, half tempo (odd), half tempo (even).
inline std::vector<std::vector<double>> reference_variations(const std::vector<double>& ref) {
  std::vector<double> offbeat, twice, half_odd, half_even;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    twice.push_back(ref[i]);
    if (i + 1 < ref.size()) {
      const double mid = 0.5 * (ref[i] + ref[i + 1]);
      offbeat.push_back(mid);
      twice.push_back(mid);
    }
    (i % 2 == 0 ? half_odd : half_even).push_back(ref[i]);
  }
  return {ref, offbeat, twice, half_odd, half_even};
}

struct ContinuityScores {
  double cmlc = 0.0, cmlt = 0.0, amlc = 0.0, amlt = 0.0;
};

namespace detail {

// (longest continuous run, total) fraction of correct estimates against one
// reference variant.
inline std::pair<double, double> continuity_against(const std::vector<double>& est, const std::vector<double>& ref,
                                                    double phase_tol, double period_tol) {
  if (est.empty() || ref.size() < 2) return {0.0, 0.0};
  std::vector<bool> used(ref.size());
  std::size_t longest = 0, run = 0, total = 0;
  for (std::size_t m = 0; m < est.size(); ++m) {
    const auto it = std::lower_bound(ref.begin(), ref.end(), est[m]);
    std::size_t nearest = static_cast<std::size_t>(it - ref.begin());
    if (nearest == ref.size() || (nearest > 0 && est[m] - ref[nearest - 1] <= ref[nearest] - est[m])) --nearest;
    const double diff = std::abs(est[m] - ref[nearest]);
    bool ok = false;
    if (!used[nearest]) {
      if (m == 0 || nearest == 0) {
        const double interval =
            nearest + 1 < ref.size() ? ref[nearest + 1] - ref[nearest] : ref[nearest] - ref[nearest - 1];
        const double phase = interval == 0.0 ? 0.0 : diff / interval;
        ok = phase < phase_tol;
      } else {
        const double interval = ref[nearest] - ref[nearest - 1];
        const double phase = diff / interval;
        const double period = std::abs(1.0 - (est[m] - est[m - 1]) / interval);
        ok = phase < phase_tol && period < period_tol;
      }
    }
    used[nearest] = true;
    if (ok) {
      ++total;
      longest = std::max(longest, ++run);
    } else {
      run = 0;
    }
  }
  const double n = static_cast<double>(est.size());
  return {static_cast<double>(longest) / n, static_cast<double>(total) / n};
}

}  // namespace detail

inline ContinuityScores continuity_scores(const std::vector<double>& est, const std::vector<double>& ref,
                                          double phase_tol = kContinuityTolerance,
                                          double period_tol = kContinuityTolerance) {
  if (ref.size() < 2)
    throw DataError("continuity metrics need at least 2 reference beats, got " + std::to_string(ref.size()));
  ContinuityScores s;
  const auto variants = reference_variations(ref);
  for (std::size_t v = 0; v < variants.size(); ++v) {
    const auto [c, t] = detail::continuity_against(est, variants[v], phase_tol, period_tol);
    if (v == 0) {
      s.cmlc = c;
      s.cmlt = t;
    }
    s.amlc = std::max(s.amlc, c);
    s.amlt = std::max(s.amlt, t);
  }
  return s;
}

struct TrackScores {
  double f_measure = 0.0;
  double cmlt = 0.0;
  double amlt = 0.0;
  MatchCounts counts;
};

struct MetricReport {
  TrackScores beat;
  TrackScores downbeat;
};

inline TrackScores score_track(const std::vector<double>& est, const std::vector<double>& ref) {
  TrackScores s;
  s.counts = match_events(est, ref, kFMeasureWindow);
  s.f_measure = f_measure(s.counts, est.size(), ref.size());
  const ContinuityScores c = continuity_scores(est, ref);
  s.cmlt = c.cmlt;
  s.amlt = c.amlt;
  return s;
}

inline MetricReport evaluate_annotation(const Annotation& est, const Annotation& ref) {
  return {score_track(est.beat_times, ref.beat_times), score_track(est.downbeat_times(), ref.downbeat_times())};
}

}  // namespace beatkit
