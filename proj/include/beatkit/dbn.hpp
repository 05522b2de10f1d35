#pragma once

// Bar-pointer HMM over (meter, beat interval, position in bar) decoded with
// Viterbi. Tempo may only change when the bar position wraps around.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "beatkit/encoder.hpp"
#include "beatkit/error.hpp"

namespace beatkit {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct DBNConfig {
  double min_bpm = 55.0;
  double max_bpm = 215.0;
  std::vector<int> meters = {3, 4};
  double observation_lambda = 6.0;
  double transition_lambda = 100.0;
  double threshold = 0.2;
  double fps = kDefaultFps;
  double floor = 1e-12;
  bool correct = true;  // place each beat at the activation peak inside its beat region

  void validate() const {
    if (!(min_bpm > 0) || !(min_bpm < max_bpm)) throw ConfigError("dbn: need 0 < min_bpm < max_bpm");
    if (meters.empty()) throw ConfigError("dbn: need at least one meter");
    for (int m : meters)
      if (m < 1) throw ConfigError("dbn: meters must be positive");
    if (!(observation_lambda >= 1)) throw ConfigError("dbn: observation_lambda must be >= 1");
    if (!(transition_lambda >= 0)) throw ConfigError("dbn: transition_lambda must be >= 0");
    if (!(threshold >= 0 && threshold < 1)) throw ConfigError("dbn: threshold must lie in [0, 1)");
    if (!(fps > 0)) throw ConfigError("dbn: fps must be positive");
  }
};

struct StateSpace {
  struct Block {
    int meter;
    int interval;        // frames per beat
    std::size_t offset;  // first state index
    std::size_t size() const { return static_cast<std::size_t>(meter * interval); }
  };
  std::vector<Block> blocks;  // ordered by meter (config order), then interval ascending
  std::vector<int> intervals;
  std::size_t states = 0;

  struct Info {
    std::size_t block;
    int position;  // 0 .. meter * interval - 1
  };

  Info info(std::size_t s) const {
    const auto it = std::upper_bound(blocks.begin(), blocks.end(), s,
                                     [](std::size_t v, const Block& b) { return v < b.offset; });
    const std::size_t b = static_cast<std::size_t>(it - blocks.begin()) - 1;
    return {b, static_cast<int>(s - blocks[b].offset)};
  }
};

inline StateSpace build_state_space(const DBNConfig& cfg) {
  cfg.validate();
  const double lo = cfg.fps * 60.0 / cfg.max_bpm, hi = cfg.fps * 60.0 / cfg.min_bpm;
  const int tmin = std::max(1, static_cast<int>(std::ceil(lo - 1e-9)));
  const int tmax = static_cast<int>(std::floor(hi + 1e-9));
  if (tmax < tmin) throw ConfigError("dbn: BPM bounds leave no integer beat interval at this frame rate");
  StateSpace sp;
  for (int t = tmin; t <= tmax; ++t) sp.intervals.push_back(t);
  for (int m : cfg.meters)
    for (int t : sp.intervals) {
      sp.blocks.push_back({m, t, sp.states});
      sp.states += static_cast<std::size_t>(m * t);
    }
  return sp;
}

// log p(tau' | tau) at a bar wrap, normalized over the available intervals.
inline double tempo_change_logprob(int from_interval, int to_interval, const std::vector<int>& intervals,
                                   double lambda) {
  double z = 0.0;
  for (int t : intervals) z += std::exp(-lambda * std::abs(static_cast<double>(t) / from_interval - 1.0));
  return -lambda * std::abs(static_cast<double>(to_interval) / from_interval - 1.0) - std::log(z);
}

inline double transition_logprob(const StateSpace& sp, std::size_t from, std::size_t to, const DBNConfig& cfg) {
  const auto a = sp.info(from), b = sp.info(to);
  const auto& ba = sp.blocks[a.block];
  const auto& bb = sp.blocks[b.block];
  if (ba.meter != bb.meter) return kNegInf;
  const bool wraps = a.position == static_cast<int>(ba.size()) - 1;
  if (!wraps) return a.block == b.block && b.position == a.position + 1 ? 0.0 : kNegInf;
  if (b.position != 0) return kNegInf;
  return tempo_change_logprob(ba.interval, bb.interval, sp.intervals, cfg.transition_lambda);
}

enum class StateKind { downbeat, beat, none };

inline StateKind state_kind(const StateSpace::Block& b, int position, double observation_lambda) {
  const int in_beat = position % b.interval;
  if (static_cast<double>(in_beat) * observation_lambda >= static_cast<double>(b.interval)) return StateKind::none;
  return position < b.interval ? StateKind::downbeat : StateKind::beat;
}

inline double observation_logprob(StateKind kind, double beat_act, double downbeat_act, const DBNConfig& cfg) {
  double p = 0.0;
  switch (kind) {
    case StateKind::downbeat: p = downbeat_act; break;
    case StateKind::beat: p = beat_act - downbeat_act; break;
    case StateKind::none: p = (1.0 - beat_act) / (cfg.observation_lambda - 1.0); break;
  }
  if (!(p >= cfg.floor)) p = cfg.floor;  // also catches 0/0 when observation_lambda == 1
  return std::log(p);
}

inline double observation_logprob(const StateSpace& sp, std::size_t s, double beat_act, double downbeat_act,
                                  const DBNConfig& cfg) {
  const auto i = sp.info(s);
  return observation_logprob(state_kind(sp.blocks[i.block], i.position, cfg.observation_lambda), beat_act,
                             downbeat_act, cfg);
}

// Per-frame log emission for each of the three state classes.
struct FrameEmission {
  double downbeat, beat, none;
};

struct DecodedPath {
  std::vector<std::size_t> states;
  double log_prob = kNegInf;
};

// Viterbi over the state space. `emission(t)` gives the three class log
// emissions at frame t. Ties go to the smaller state index.
template <class EmissionFn>
DecodedPath decode_path(const StateSpace& sp, const DBNConfig& cfg, std::size_t T, EmissionFn&& emission) {
  DecodedPath out;
  if (T == 0) return out;
  const std::size_t S = sp.states, NB = sp.blocks.size();
  std::vector<StateKind> kind(S);
  for (const auto& b : sp.blocks)
    for (int p = 0; p < static_cast<int>(b.size()); ++p) kind[b.offset + p] = state_kind(b, p, cfg.observation_lambda);

  // Wrap transition table between blocks of the same meter.
  std::vector<double> wrap(NB * NB, kNegInf);
  for (std::size_t i = 0; i < NB; ++i)
    for (std::size_t j = 0; j < NB; ++j)
      if (sp.blocks[i].meter == sp.blocks[j].meter)
        wrap[i * NB + j] = tempo_change_logprob(sp.blocks[i].interval, sp.blocks[j].interval, sp.intervals,
                                                cfg.transition_lambda);

  auto emit = [&](const FrameEmission& e, std::size_t s) {
    return kind[s] == StateKind::downbeat ? e.downbeat : kind[s] == StateKind::beat ? e.beat : e.none;
  };

  std::vector<double> score(S), next(S);
  std::vector<std::uint32_t> back(T * NB, 0);  // predecessor block for each bar start
  {
    const FrameEmission e = emission(std::size_t{0});
    const double init = -std::log(static_cast<double>(S));
    for (std::size_t s = 0; s < S; ++s) score[s] = init + emit(e, s);
  }
  for (std::size_t t = 1; t < T; ++t) {
    const FrameEmission e = emission(t);
    for (std::size_t j = 0; j < NB; ++j) {
      const auto& bj = sp.blocks[j];
      double best = kNegInf;
      std::uint32_t arg = 0;
      for (std::size_t i = 0; i < NB; ++i) {
        const double w = wrap[i * NB + j];
        if (w == kNegInf) continue;
        const auto& bi = sp.blocks[i];
        const double v = score[bi.offset + bi.size() - 1] + w;
        if (v > best) {
          best = v;
          arg = static_cast<std::uint32_t>(i);
        }
      }
      back[t * NB + j] = arg;
      next[bj.offset] = best + emit(e, bj.offset);
      for (std::size_t p = 1; p < bj.size(); ++p) next[bj.offset + p] = score[bj.offset + p - 1] + emit(e, bj.offset + p);
    }
    std::swap(score, next);
  }
  std::size_t s = 0;
  for (std::size_t k = 1; k < S; ++k)
    if (score[k] > score[s]) s = k;
  out.log_prob = score[s];
  out.states.assign(T, 0);
  for (std::size_t t = T; t-- > 0;) {
    out.states[t] = s;
    if (t == 0) break;
    const auto i = sp.info(s);
    if (i.position > 0) {
      s = s - 1;
    } else {
      const auto& b = sp.blocks[back[t * NB + i.block]];
      s = b.offset + b.size() - 1;
    }
  }
  return out;
}

inline FrameEmission frame_emission(double beat, double downbeat, const DBNConfig& cfg) {
  return {observation_logprob(StateKind::downbeat, beat, downbeat, cfg),
          observation_logprob(StateKind::beat, beat, downbeat, cfg),
          observation_logprob(StateKind::none, beat, downbeat, cfg)};
}

struct BeatSequence {
  std::vector<double> times;
  std::vector<int> positions;
  int beats_per_bar = 0;  // decoded meter, 0 when empty
  double fps = kDefaultFps;

  std::size_t size() const { return times.size(); }
};

inline BeatSequence viterbi_decode(const std::vector<double>& beat, const std::vector<double>& downbeat,
                                   const DBNConfig& cfg, const StateSpace& sp) {
  if (beat.size() != downbeat.size()) throw ShapeError("viterbi_decode: beat/downbeat length mismatch");
  BeatSequence out;
  out.fps = cfg.fps;
  std::size_t first = 0, last = beat.size();
  while (first < last && beat[first] < cfg.threshold) ++first;
  while (last > first && beat[last - 1] < cfg.threshold) --last;
  if (first == last) return out;

  const DecodedPath path = decode_path(sp, cfg, last - first, [&](std::size_t t) {
    return frame_emission(beat[first + t], downbeat[first + t], cfg);
  });

  // Segments of consecutive frames spent in the beat region of one beat.
  std::size_t t = 0;
  const std::size_t n = path.states.size();
  while (t < n) {
    const auto i = sp.info(path.states[t]);
    const auto& b = sp.blocks[i.block];
    if (state_kind(b, i.position, cfg.observation_lambda) == StateKind::none) {
      ++t;
      continue;
    }
    const int beat_index = i.position / b.interval;
    std::size_t end = t + 1;
    while (end < n) {
      const auto j = sp.info(path.states[end]);
      if (j.block != i.block || j.position != i.position + static_cast<int>(end - t) ||
          state_kind(b, j.position, cfg.observation_lambda) == StateKind::none)
        break;
      ++end;
    }
    // A region cut by the start of the decoded range has no entry frame.
    const bool entered = i.position % b.interval == 0;
    if (entered || cfg.correct) {
      std::size_t at = t;
      if (cfg.correct)
        for (std::size_t k = t + 1; k < end; ++k)
          if (beat[first + k] > beat[first + at]) at = k;
      out.times.push_back(static_cast<double>(first + at) / cfg.fps);
      out.positions.push_back(beat_index + 1);
      out.beats_per_bar = b.meter;
    }
    t = end;
  }
  return out;
}

inline BeatSequence viterbi_decode(const std::vector<double>& beat, const std::vector<double>& downbeat,
                                   const DBNConfig& cfg) {
  return viterbi_decode(beat, downbeat, cfg, build_state_space(cfg));
}

inline BeatSequence viterbi_decode(const ActivationTrack& acts, DBNConfig cfg) {
  cfg.fps = acts.fps;
  return viterbi_decode(acts.beat, acts.downbeat, cfg);
}

}  // namespace beatkit
