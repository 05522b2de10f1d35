#pragma once

// Supervision targets, the three-way loss and partial-demix augmentation.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "beatkit/encoder.hpp"

namespace beatkit {

inline constexpr double kProbClip = 1e-7;

struct Annotation {
  std::vector<double> beat_times;  // seconds, strictly ascending
  std::vector<int> beat_positions;  // 1 = downbeat
  int beats_per_bar = 4;

  std::size_t size() const { return beat_times.size(); }

  // Estimates from other trackers may skip beats, so callers scoring them
  // can drop the bar-cycle requirement.
  void validate(bool require_cycle = true) const {
    if (beat_positions.size() != beat_times.size()) throw DataError("annotation: one position per beat required");
    if (beats_per_bar < 1) throw DataError("annotation: beats_per_bar must be positive");
    for (std::size_t i = 0; i < beat_times.size(); ++i) {
      if (!std::isfinite(beat_times[i])) throw DataError("annotation: non-finite beat time");
      if (i > 0 && !(beat_times[i] > beat_times[i - 1]))
        throw DataError("annotation: beat times must be strictly ascending");
      const int p = beat_positions[i];
      if (p < 1 || p > beats_per_bar) throw DataError("annotation: position out of range");
      if (require_cycle && i > 0 && p != beat_positions[i - 1] % beats_per_bar + 1)
        throw DataError("annotation: positions must cycle 1.." + std::to_string(beats_per_bar));
    }
  }

  std::vector<double> downbeat_times() const {
    std::vector<double> out;
    for (std::size_t i = 0; i < beat_times.size(); ++i)
      if (beat_positions[i] == 1) out.push_back(beat_times[i]);
    return out;
  }
};

struct TargetTrack {
  std::vector<double> beat;
  std::vector<double> downbeat;
  std::vector<double> tempo;

  std::size_t frames() const { return beat.size(); }
};

inline long time_to_frame(double seconds, double fps) { return std::lround(seconds * fps); }

namespace detail {
inline void widen_at(std::vector<double>& track, long frame) {
  static constexpr double kWeights[] = {0.25, 0.5, 1.0, 0.5, 0.25};
  const long T = static_cast<long>(track.size());
  for (long k = -2; k <= 2; ++k) {
    const long f = frame + k;
    if (f >= 0 && f < T) track[f] = std::max(track[f], kWeights[k + 2]);
  }
}
}  // namespace detail

// Beat and downbeat parts only; tempo is left empty.
inline TargetTrack widen_targets(const Annotation& ann, std::size_t T, double fps) {
  TargetTrack out;
  out.beat.assign(T, 0.0);
  out.downbeat.assign(T, 0.0);
  for (std::size_t i = 0; i < ann.size(); ++i) {
    const long f = time_to_frame(ann.beat_times[i], fps);
    if (f < 0 || f >= static_cast<long>(T))
      throw DataError("annotation: beat at " + std::to_string(ann.beat_times[i]) + " s lies outside the clip (" +
                      std::to_string(T) + " frames)");
    detail::widen_at(out.beat, f);
    if (ann.beat_positions[i] == 1) detail::widen_at(out.downbeat, f);
  }
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median of empty sequence");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Class k (0-based) stands for k + 1 BPM.
inline std::size_t bpm_to_class(double bpm, std::size_t classes) {
  const long c = std::lround(bpm);
  return static_cast<std::size_t>(std::clamp<long>(c, 1, static_cast<long>(classes))) - 1;
}

inline std::vector<double> derive_tempo_target(const Annotation& ann, std::size_t classes = 300) {
  if (ann.size() < 2) throw DataError("tempo target needs at least two beats");
  std::vector<double> ibi;
  for (std::size_t i = 1; i < ann.size(); ++i) ibi.push_back(ann.beat_times[i] - ann.beat_times[i - 1]);
  const std::size_t c = bpm_to_class(60.0 / median(ibi), classes);
  std::vector<double> out(classes, 0.0);
  out[c] = 0.5;
  if (c > 0) out[c - 1] = 0.25;
  if (c + 1 < classes) out[c + 1] = 0.25;
  const double s = std::accumulate(out.begin(), out.end(), 0.0);
  for (double& v : out) v /= s;
  return out;
}

inline TargetTrack make_targets(const Annotation& ann, std::size_t T, double fps, std::size_t classes = 300) {
  TargetTrack t = widen_targets(ann, T, fps);
  t.tempo = derive_tempo_target(ann, classes);
  return t;
}

// ---------------------------------------------------------------------------
// Loss

// Mean binary cross entropy of clipped predictions against soft targets.
inline Tensor binary_cross_entropy(const Tensor& pred, const std::vector<double>& target) {
  if (pred.numel() != target.size())
    throw ShapeError("binary_cross_entropy: " + std::to_string(pred.numel()) + " predictions vs " +
                     std::to_string(target.size()) + " targets");
  const std::size_t n = target.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp(pred.data()[i], kProbClip, 1.0 - kProbClip);
    s -= target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p);
  }
  return detail::make_op("bce", Shape{}, Buffer{s / static_cast<double>(n)}, {pred},
                         [target](const Tape::Record& r) {
                           double* g = detail::input_grad(r, 0);
                           if (!g) return;
                           const double go = r.output->grad[0] / static_cast<double>(target.size());
                           const auto& p = r.inputs[0]->value;
                           for (std::size_t i = 0; i < target.size(); ++i) {
                             if (p[i] < kProbClip || p[i] > 1.0 - kProbClip) continue;
                             g[i] += go * (-target[i] / p[i] + (1.0 - target[i]) / (1.0 - p[i]));
                           }
                         });
}

// -sum(target * log(clip(pred))) for a predicted distribution.
inline Tensor cross_entropy(const Tensor& pred, const std::vector<double>& target) {
  if (pred.numel() != target.size()) throw ShapeError("cross_entropy: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i)
    if (target[i] != 0.0) s -= target[i] * std::log(std::clamp(pred.data()[i], kProbClip, 1.0 - kProbClip));
  return detail::make_op("cross_entropy", Shape{}, Buffer{s}, {pred}, [target](const Tape::Record& r) {
    double* g = detail::input_grad(r, 0);
    if (!g) return;
    const double go = r.output->grad[0];
    const auto& p = r.inputs[0]->value;
    for (std::size_t i = 0; i < target.size(); ++i) {
      if (target[i] == 0.0 || p[i] < kProbClip || p[i] > 1.0 - kProbClip) continue;
      g[i] -= go * target[i] / p[i];
    }
  });
}

// The same clipped losses evaluated from logits. Values match the
// probability versions; gradients are those of the unclipped log-sigmoid /
// log-softmax (sigmoid(z) - y and softmax(z) - y), so a saturated head still
// receives a training signal.
inline Tensor binary_cross_entropy_logits(const Tensor& z, const std::vector<double>& target) {
  if (z.numel() != target.size()) throw ShapeError("binary_cross_entropy_logits: size mismatch");
  const std::size_t n = target.size();
  const double lo = std::log(kProbClip), hi = std::log1p(-kProbClip);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = z.data()[i];
    // log sigmoid(x) and log(1 - sigmoid(x)), computed stably.
    const double lp = -std::log1p(std::exp(-std::abs(x))) + std::min(x, 0.0);
    const double lq = lp - x;
    s -= target[i] * std::clamp(lp, lo, hi) + (1.0 - target[i]) * std::clamp(lq, lo, hi);
  }
  return detail::make_op("bce_logits", Shape{}, Buffer{s / static_cast<double>(n)}, {z},
                         [target](const Tape::Record& r) {
                           double* g = detail::input_grad(r, 0);
                           if (!g) return;
                           const double go = r.output->grad[0] / static_cast<double>(target.size());
                           const auto& x = r.inputs[0]->value;
                           for (std::size_t i = 0; i < target.size(); ++i) {
                             const double p = x[i] >= 0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
                             g[i] += go * (p - target[i]);
                           }
                         });
}

inline Tensor cross_entropy_logits(const Tensor& z, const std::vector<double>& target) {
  if (z.numel() != target.size()) throw ShapeError("cross_entropy_logits: size mismatch");
  const std::size_t n = target.size();
  const auto& x = z.data();
  const double mx = *std::max_element(x.begin(), x.end());
  double den = 0.0;
  for (double v : x) den += std::exp(v - mx);
  const double lse = mx + std::log(den);
  const double lo = std::log(kProbClip), hi = std::log1p(-kProbClip);
  double s = 0.0, mass = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mass += target[i];
    if (target[i] != 0.0) s -= target[i] * std::clamp(x[i] - lse, lo, hi);
  }
  return detail::make_op("cross_entropy_logits", Shape{}, Buffer{s}, {z}, [target, lse, mass](const Tape::Record& r) {
    double* g = detail::input_grad(r, 0);
    if (!g) return;
    const double go = r.output->grad[0];
    const auto& v = r.inputs[0]->value;
    for (std::size_t i = 0; i < target.size(); ++i) g[i] += go * (mass * std::exp(v[i] - lse) - target[i]);
  });
}

struct LossTerms {
  Tensor total;
  double beat = 0, downbeat = 0, tempo = 0;
};

inline LossTerms multitask_loss(const Tensor& beat, const Tensor& downbeat, const Tensor& tempo,
                                const TargetTrack& tgt) {
  const Tensor lb = binary_cross_entropy(beat, tgt.beat);
  const Tensor ld = binary_cross_entropy(downbeat, tgt.downbeat);
  const Tensor lt = cross_entropy(tempo, tgt.tempo);
  return {scale(add(add(lb, ld), lt), 1.0 / 3.0), lb.item(), ld.item(), lt.item()};
}

inline LossTerms multitask_loss(const EncoderOutput& out, const TargetTrack& tgt) {
  const Tensor lb = binary_cross_entropy_logits(out.beat_logit, tgt.beat);
  const Tensor ld = binary_cross_entropy_logits(out.downbeat_logit, tgt.downbeat);
  const Tensor lt = cross_entropy_logits(out.tempo_logits, tgt.tempo);
  return {scale(add(add(lb, ld), lt), 1.0 / 3.0), lb.item(), ld.item(), lt.item()};
}

inline double multitask_loss(const ActivationTrack& acts, const TargetTrack& tgt) {
  NoGradGuard guard;
  const std::size_t T = acts.frames();
  return multitask_loss(Tensor::from({T}, acts.beat), Tensor::from({T}, acts.downbeat),
                        Tensor::from({acts.tempo.size()}, acts.tempo), tgt)
      .total.item();
}

// ---------------------------------------------------------------------------
// Partial demix augmentation

// Channels listed in `merged` are replaced by a single channel placed at the
// position of the first of them; the rest keep their order.
struct MergePlan {
  std::vector<std::size_t> merged;  // empty or 2..4 sorted channel indices
};

inline MergePlan sample_merge_plan(std::mt19937_64& rng, std::size_t channels = 5) {
  if (channels != 5) throw ContractError("partial demix augmentation expects 5 channels, got " + std::to_string(channels));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double x = u(rng);
  const std::size_t k = x < 0.5 ? 0 : x < 0.8 ? 2 : x < 0.9 ? 3 : 4;
  MergePlan plan;
  if (k == 0) return plan;
  std::vector<std::size_t> idx(channels);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  plan.merged.assign(idx.begin(), idx.begin() + static_cast<long>(k));
  std::sort(plan.merged.begin(), plan.merged.end());
  return plan;
}

// Values are log(1 + magnitude): merged = log1p(sum expm1(x)).
inline DemixedClip apply_merge(const DemixedClip& clip, const MergePlan& plan) {
  if (plan.merged.empty()) return clip;
  const std::size_t T = clip.frames(), C = clip.channels(), F = clip.bins();
  for (std::size_t c : plan.merged)
    if (c >= C) throw ContractError("merge plan refers to a missing channel");
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::string> names;
  for (std::size_t c = 0; c < C; ++c) {
    const bool in = std::find(plan.merged.begin(), plan.merged.end(), c) != plan.merged.end();
    if (!in) {
      groups.push_back({c});
      names.push_back(clip.channel_names[c]);
    } else if (c == plan.merged.front()) {
      groups.push_back(plan.merged);
      std::string n;
      for (std::size_t m : plan.merged) n += (n.empty() ? "" : "&") + clip.channel_names[m];
      names.push_back(n);
    }
  }
  const std::size_t C2 = groups.size();
  const auto& src = clip.values.data();
  std::vector<double> v(T * C2 * F);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t g = 0; g < C2; ++g)
      for (std::size_t f = 0; f < F; ++f) {
        if (groups[g].size() == 1) {
          v[(t * C2 + g) * F + f] = src[(t * C + groups[g][0]) * F + f];
          continue;
        }
        double lin = 0.0;
        for (std::size_t c : groups[g]) lin += std::expm1(src[(t * C + c) * F + f]);
        v[(t * C2 + g) * F + f] = std::log1p(lin);
      }
  DemixedClip out;
  out.values = Tensor::from({T, C2, F}, std::move(v));
  out.fps = clip.fps;
  out.channel_names = std::move(names);
  return out;
}

inline DemixedClip partial_demix_augment(const DemixedClip& clip, std::mt19937_64& rng) {
  return apply_merge(clip, sample_merge_plan(rng, clip.channels()));
}

}  // namespace beatkit
