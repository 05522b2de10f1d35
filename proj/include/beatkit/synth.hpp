#pragma once

// Synthetic five-stem clips with exact beat/downbeat annotations.
//
// drum:  broadband bursts on every beat (stronger and with a low kick on the
//        downbeat), weak hi-hat ticks half way between beats
// bass:  a harmonic band whose fundamental changes at every downbeat
// vocal, piano, other: temporally correlated noise, piano with sustained
//        partials that change at random beats
// Everything is built in linear magnitude and stored as log(1 + magnitude).

#include <cmath>
#include <random>

#include "beatkit/targets.hpp"

namespace beatkit {

struct SynthParams {
  double bpm = 120.0;
  int beats_per_bar = 4;
  std::size_t frames = 2048;
  std::size_t mel_bins = 128;
  double fps = kDefaultFps;
  double first_beat = 0.25;  // seconds
  int first_position = 1;
  double noise = 0.08;

  void validate() const {
    if (bpm < 40.0 || bpm > 240.0) throw ConfigError("synth: bpm must lie in [40, 240]");
    if (beats_per_bar != 3 && beats_per_bar != 4) throw ConfigError("synth: beats_per_bar must be 3 or 4");
    if (frames < 1 || frames > 8192) throw ConfigError("synth: frames must lie in [1, 8192]");
    if (mel_bins < 16) throw ConfigError("synth: need at least 16 mel bins");
    if (!(fps > 0)) throw ConfigError("synth: fps must be positive");
    if (first_position < 1 || first_position > beats_per_bar) throw ConfigError("synth: bad first position");
    if (first_beat < 0) throw ConfigError("synth: first beat must be non-negative");
  }
};

// Draws tempo, meter and phase for one clip.
struct SynthRanges {
  double min_bpm = 80.0;
  double max_bpm = 160.0;
};

inline SynthParams random_synth_params(SynthParams base, const SynthRanges& ranges, std::mt19937_64& rng) {
  base.bpm = std::uniform_real_distribution<double>(ranges.min_bpm, ranges.max_bpm)(rng);
  base.beats_per_bar = std::bernoulli_distribution(0.5)(rng) ? 4 : 3;
  base.first_beat = std::uniform_real_distribution<double>(0.0, 60.0 / base.bpm)(rng);
  base.first_position = std::uniform_int_distribution<int>(1, base.beats_per_bar)(rng);
  return base;
}

struct SynthClip {
  DemixedClip clip;
  Annotation annotation;
};

inline SynthClip synth_clip(const SynthParams& p, std::mt19937_64& rng) {
  p.validate();
  const std::size_t T = p.frames, F = p.mel_bins, C = 5;
  const double period = 60.0 / p.bpm;

  Annotation ann;
  ann.beats_per_bar = p.beats_per_bar;
  int pos = p.first_position;
  for (double t = p.first_beat; time_to_frame(t, p.fps) < static_cast<long>(T);) {
    ann.beat_times.push_back(t);
    ann.beat_positions.push_back(pos);
    pos = pos % p.beats_per_bar + 1;
    t = p.first_beat + period * static_cast<double>(ann.beat_times.size());
  }

  std::vector<double> mag(T * C * F, 0.0);
  auto at = [&](std::size_t t, std::size_t c, std::size_t f) -> double& { return mag[(t * C + c) * F + f]; };
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Slowly varying noise floor per channel (AR(1) along time, smoothed over bins).
  const double floor_level[5] = {0.25, 0.2, 0.05, 0.05, 0.3};
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> state(F, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      double prev = 0.0;
      for (std::size_t f = 0; f < F; ++f) {
        state[f] = 0.9 * state[f] + 0.45 * gauss(rng);
        const double smooth = 0.6 * state[f] + 0.4 * prev;
        prev = state[f];
        at(t, c, f) += floor_level[c] * std::exp(0.5 * smooth);
      }
    }
  }

  const std::size_t kick_top = F / 8, burst_top = F / 2, hat_lo = 3 * F / 4;
  const double decay[3] = {1.0, 0.3, 0.08};
  int bass_root = 0;
  int piano_note = static_cast<int>(F / 3);
  for (std::size_t i = 0; i < ann.size(); ++i) {
    const long b = time_to_frame(ann.beat_times[i], p.fps);
    const bool down = ann.beat_positions[i] == 1;
    const double amp = down ? 3.0 : 1.6;
    for (int k = 0; k < 3; ++k) {
      const long t = b + k;
      if (t >= static_cast<long>(T)) break;
      for (std::size_t f = 0; f < burst_top; ++f) at(t, 2, f) += amp * decay[k] * (0.8 + 0.4 * unit(rng));
      if (down)
        for (std::size_t f = 0; f < kick_top; ++f) at(t, 2, f) += 4.0 * decay[k];
    }
    const long hat = time_to_frame(ann.beat_times[i] + 0.5 * period, p.fps);
    if (hat < static_cast<long>(T))
      for (std::size_t f = hat_lo; f < F; ++f) at(hat, 2, f) += 0.5 * (0.8 + 0.4 * unit(rng));

    if (down) bass_root = std::uniform_int_distribution<int>(2, static_cast<int>(F / 10))(rng);
    if (down || unit(rng) < 0.3) piano_note = std::uniform_int_distribution<int>(static_cast<int>(F / 4), static_cast<int>(F / 2))(rng);
    const long next = i + 1 < ann.size() ? time_to_frame(ann.beat_times[i + 1], p.fps) : static_cast<long>(T);
    for (long t = std::max<long>(b, 0); t < std::min<long>(next, static_cast<long>(T)); ++t) {
      const double env = std::exp(-0.04 * static_cast<double>(t - b));
      for (int h = 1; h <= 4; ++h) {
        const std::size_t f = static_cast<std::size_t>(bass_root * h);
        if (f < F) at(t, 3, f) += 2.0 / h * (0.5 + 0.5 * env);
        const std::size_t g = static_cast<std::size_t>(piano_note + 7 * (h - 1));
        if (g < F) at(t, 1, g) += 0.8 / h * env;
      }
    }
  }

  std::vector<double> v(mag.size());
  for (std::size_t i = 0; i < mag.size(); ++i) v[i] = std::log1p(std::max(0.0, mag[i] * (1.0 + p.noise * gauss(rng))));

  SynthClip out;
  out.clip.values = Tensor::from({T, C, F}, std::move(v));
  out.clip.fps = p.fps;
  out.clip.channel_names = default_stem_names();
  out.annotation = std::move(ann);
  return out;
}

}  // namespace beatkit
