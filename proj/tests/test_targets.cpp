#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <cstring>
#include <random>
#include <set>

#include "beatkit/synth.hpp"
#include "beatkit/targets.hpp"
#include "support/oracles.hpp"

using namespace beatkit;

namespace {

constexpr double kFps = 100.0;  // frame = time * 100 keeps the hand examples readable

Annotation at_frames(const std::vector<long>& frames, int bpb = 4) {
  Annotation a;
  a.beats_per_bar = bpb;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    a.beat_times.push_back(static_cast<double>(frames[i]) / kFps);
    a.beat_positions.push_back(static_cast<int>(i % bpb) + 1);
  }
  return a;
}

DemixedClip random_five(std::size_t T, std::size_t F, std::mt19937_64& rng) {
  DemixedClip c;
  c.values = Tensor::uniform({T, 5, F}, 0.0, 3.0, rng);
  c.channel_names = default_stem_names();
  return c;
}

}  // namespace

TEST(Widen, PatternAroundIsolatedBeat) {
  const auto t = widen_targets(at_frames({10}), 20, kFps);
  const std::map<long, double> expect{{8, 0.25}, {9, 0.5}, {10, 1.0}, {11, 0.5}, {12, 0.25}};
  for (long f = 0; f < 20; ++f) {
    const double e = expect.count(f) ? expect.at(f) : 0.0;
    EXPECT_EQ(t.beat[f], e) << f;
    EXPECT_EQ(t.downbeat[f], e) << f;  // first beat is a downbeat
  }
}

TEST(Widen, ClippedAtClipStart) {
  const auto t = widen_targets(at_frames({0}), 6, kFps);
  EXPECT_EQ(t.beat, (std::vector<double>{1.0, 0.5, 0.25, 0, 0, 0}));
}

TEST(Widen, OverlapsTakeMaximum) {
  const auto t = widen_targets(at_frames({10, 13}), 20, kFps);
  EXPECT_EQ(t.beat[11], 0.5);
  EXPECT_EQ(t.beat[12], 0.5);
  EXPECT_EQ(t.beat[10], 1.0);
  EXPECT_EQ(t.beat[13], 1.0);
  // Only the first beat is a downbeat.
  EXPECT_EQ(t.downbeat[13], 0.0);
  EXPECT_EQ(t.downbeat[12], 0.25);
}

TEST(Widen, BeatPastClipEndIsError) {
  EXPECT_THROW(widen_targets(at_frames({5, 25}), 20, kFps), DataError);
}

TEST(Widen, MatchesDistanceOracleOnRandomTracks) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const long T = std::uniform_int_distribution<long>(1, 80)(rng);
    std::vector<long> frames;
    for (long f = 0; f < T; ++f)
      if (std::bernoulli_distribution(0.15)(rng)) frames.push_back(f);
    const auto t = widen_targets(at_frames(frames), static_cast<std::size_t>(T), kFps);
    for (long f = 0; f < T; ++f) {
      long nearest = 99;
      for (long b : frames) nearest = std::min(nearest, std::abs(b - f));
      const double e = nearest == 0 ? 1.0 : nearest == 1 ? 0.5 : nearest == 2 ? 0.25 : 0.0;
      ASSERT_EQ(t.beat[f], e);
      ASSERT_LE(t.beat[f], 1.0);
    }
  }
}

TEST(Tempo, HalfSecondBeatsGive120) {
  Annotation a;
  for (int i = 0; i < 9; ++i) {
    a.beat_times.push_back(0.3 + 0.5 * i);
    a.beat_positions.push_back(i % 4 + 1);
  }
  const auto d = derive_tempo_target(a);
  ASSERT_EQ(d.size(), 300u);
  EXPECT_DOUBLE_EQ(d[118], 0.25);  // 119 BPM
  EXPECT_DOUBLE_EQ(d[119], 0.5);   // 120 BPM
  EXPECT_DOUBLE_EQ(d[120], 0.25);  // 121 BPM
  double s = 0;
  for (double v : d) s += v;
  EXPECT_DOUBLE_EQ(s, 1.0);
}

TEST(Tempo, MedianIgnoresJitter) {
  std::mt19937_64 rng(2);
  Annotation a;
  for (int i = 0; i < 40; ++i) {
    a.beat_times.push_back(1.0 + 0.5 * i + std::uniform_real_distribution<double>(-0.005, 0.005)(rng));
    a.beat_positions.push_back(i % 4 + 1);
  }
  const auto d = derive_tempo_target(a);
  EXPECT_EQ(std::max_element(d.begin(), d.end()) - d.begin(), 119);
}

TEST(Tempo, OneSecondGives60AndEdgesRenormalize) {
  Annotation a;
  a.beat_times = {0.0, 1.0, 2.0};
  a.beat_positions = {1, 2, 3};
  auto d = derive_tempo_target(a);
  EXPECT_DOUBLE_EQ(d[59], 0.5);

  a.beat_times = {0.0, 0.1, 0.2};  // 600 BPM clamps to the top class
  d = derive_tempo_target(a);
  EXPECT_DOUBLE_EQ(d[299], 0.5 / 0.75);
  EXPECT_DOUBLE_EQ(d[298], 0.25 / 0.75);
}

TEST(Tempo, NeedsTwoBeats) {
  EXPECT_THROW(derive_tempo_target(at_frames({3})), DataError);
}

TEST(Loss, SingleFrameHalfAgainstOne) {
  NoGradGuard g;
  const Tensor p = Tensor::from({1}, std::vector<double>{0.5});
  EXPECT_NEAR(binary_cross_entropy(p, {1.0}).item(), std::log(2.0), 1e-15);
}

TEST(Loss, HardTargetsMatchedGiveNearZero) {
  TargetTrack t;
  t.beat = {1, 0, 0, 1};
  t.downbeat = {0, 0, 0, 1};
  t.tempo = {0, 1, 0};
  ActivationTrack a;
  a.beat = t.beat;
  a.downbeat = t.downbeat;
  a.tempo = t.tempo;
  const double l = multitask_loss(a, t);
  EXPECT_GE(l, 0.0);
  EXPECT_LT(l, 1e-6);
}

TEST(Loss, TermsWeighEqually) {
  std::mt19937_64 rng(3);
  TargetTrack t;
  t.beat = {0.25, 1.0, 0.5};
  t.downbeat = {0, 0.5, 1};
  t.tempo = {0.25, 0.5, 0.25};
  NoGradGuard g;
  const Tensor b = Tensor::uniform({3}, 0.1, 0.9, rng), d = Tensor::uniform({3}, 0.1, 0.9, rng);
  const Tensor tempo = Tensor::from({3}, std::vector<double>{0.2, 0.3, 0.5});
  const auto base = multitask_loss(b, d, tempo, t);
  EXPECT_NEAR(base.total.item(), (base.beat + base.downbeat + base.tempo) / 3.0, 1e-15);
  const Tensor sharper = Tensor::from({3}, std::vector<double>{0.05, 0.05, 0.9});
  const auto other = multitask_loss(b, d, sharper, t);
  EXPECT_NEAR(other.total.item() - base.total.item(), (other.tempo - base.tempo) / 3.0, 1e-14);
}

TEST(Loss, NonNegativeOnRandomInputs) {
  std::mt19937_64 rng(4);
  NoGradGuard g;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t T = std::uniform_int_distribution<std::size_t>(1, 30)(rng);
    TargetTrack t;
    for (std::size_t i = 0; i < T; ++i) {
      t.beat.push_back(std::uniform_real_distribution<double>(0, 1)(rng));
      t.downbeat.push_back(std::bernoulli_distribution(0.2)(rng) ? 1.0 : 0.0);
    }
    t.tempo.assign(5, 0.2);
    const Tensor tempo = softmax_lastdim(Tensor::uniform({5}, -2, 2, rng));
    const auto l = multitask_loss(Tensor::uniform({T}, 0, 1, rng), Tensor::uniform({T}, 0, 1, rng), tempo, t);
    ASSERT_GE(l.total.item(), 0.0);
  }
}

TEST(Loss, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  Tensor b = Tensor::uniform({6}, 0.05, 0.95, rng).set_requires_grad();
  Tensor d = Tensor::uniform({6}, 0.05, 0.95, rng).set_requires_grad();
  Tensor logits = Tensor::uniform({4}, -1, 1, rng).set_requires_grad();
  TargetTrack t;
  t.beat = {0, 0.25, 0.5, 1, 0.5, 0.25};
  t.downbeat = {1, 0.5, 0.25, 0, 0, 0};
  t.tempo = {0.1, 0.2, 0.3, 0.4};
  auto loss = [&] { return multitask_loss(b, d, softmax_lastdim(logits), t).total; };
  const auto r = beatkit::testing::check_gradients({{"beat", b}, {"down", d}, {"tempo", logits}}, loss, 1e-6);
  EXPECT_EQ(r.failures, 0u) << r.worst_where;
  Tape::active().clear();
}

TEST(Augment, BranchFrequencies) {
  std::mt19937_64 rng(6);
  std::map<std::size_t, int> counts;
  std::vector<int> per_channel(5, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const MergePlan p = sample_merge_plan(rng);
    ++counts[p.merged.size()];
    for (std::size_t c : p.merged) ++per_channel[c];
    std::set<std::size_t> distinct(p.merged.begin(), p.merged.end());
    ASSERT_EQ(distinct.size(), p.merged.size());
  }
  EXPECT_NEAR(counts[0] / double(n), 0.5, 0.015);
  EXPECT_NEAR(counts[2] / double(n), 0.3, 0.015);
  EXPECT_NEAR(counts[3] / double(n), 0.1, 0.015);
  EXPECT_NEAR(counts[4] / double(n), 0.1, 0.015);
  // Expected merged slots per channel: (0.3*2 + 0.1*3 + 0.1*4) / 5 = 0.26 per draw.
  for (int c : per_channel) EXPECT_NEAR(c / double(n), 0.26, 0.02);
}

TEST(Augment, MergeIsLogOfLinearSum) {
  std::mt19937_64 rng(7);
  const DemixedClip clip = random_five(6, 4, rng);
  const DemixedClip out = apply_merge(clip, MergePlan{{0, 1}});
  ASSERT_EQ(out.channels(), 4u);
  EXPECT_EQ(out.channel_names, (std::vector<std::string>{"vocal&piano", "drum", "bass", "other"}));
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t f = 0; f < 4; ++f) {
      const double a = clip.values.at({t, 0, f}), b = clip.values.at({t, 1, f});
      EXPECT_NEAR(out.values.at({t, 0, f}), std::log(std::exp(a) + std::exp(b) - 1.0), 1e-12);
      EXPECT_EQ(out.values.at({t, 3, f}), clip.values.at({t, 4, f}));
    }
  const DemixedClip three = apply_merge(clip, MergePlan{{1, 3, 4}});
  EXPECT_EQ(three.channel_names, (std::vector<std::string>{"vocal", "piano&bass&other", "drum"}));
}

TEST(Augment, ConservesLinearEnergy) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const DemixedClip clip = random_five(7, 5, rng);
    const DemixedClip out = partial_demix_augment(clip, rng);
    EXPECT_EQ(out.channels(), out.channel_names.size());
    double before = 0, after = 0;
    for (double v : clip.values.data()) before += std::expm1(v);
    for (double v : out.values.data()) after += std::expm1(v);
    ASSERT_NEAR(before, after, 1e-9);
    if (out.channels() == 5) {
      ASSERT_TRUE(std::equal(clip.values.data().begin(), clip.values.data().end(), out.values.data().begin()));
    }
  }
}

TEST(Augment, RequiresFiveChannels) {
  std::mt19937_64 rng(9);
  DemixedClip clip;
  clip.values = Tensor::zeros({3, 4, 2});
  clip.channel_names = {"a", "b", "c", "d"};
  EXPECT_THROW(partial_demix_augment(clip, rng), ContractError);
}

TEST(Synth, PeriodicBeatsAndMeter) {
  std::mt19937_64 rng(10);
  SynthParams p;
  p.bpm = 132;
  p.beats_per_bar = 3;
  p.first_position = 2;
  p.frames = 1000;
  const auto s = synth_clip(p, rng);
  EXPECT_NO_THROW(s.annotation.validate());
  EXPECT_NO_THROW(s.clip.validate());
  EXPECT_EQ(s.clip.values.shape(), (Shape{1000, 5, 128}));
  const auto& bt = s.annotation.beat_times;
  ASSERT_GT(bt.size(), 10u);
  for (std::size_t i = 1; i < bt.size(); ++i) EXPECT_NEAR(bt[i] - bt[i - 1], 60.0 / 132, 1e-12);
  EXPECT_EQ(s.annotation.beat_positions[0], 2);
  for (std::size_t i = 0; i < bt.size(); ++i)
    EXPECT_EQ(s.annotation.beat_positions[i] == 1, i % 3 == 2);
  EXPECT_LT(time_to_frame(bt.back(), p.fps), 1000);
}

TEST(Synth, SameSeedIsBitIdentical) {
  SynthParams p;
  p.frames = 300;
  std::mt19937_64 a(11), b(11);
  const auto x = synth_clip(random_synth_params(p, {}, a), a);
  const auto y = synth_clip(random_synth_params(p, {}, b), b);
  EXPECT_EQ(x.annotation.beat_times, y.annotation.beat_times);
  ASSERT_EQ(x.clip.values.numel(), y.clip.values.numel());
  EXPECT_EQ(std::memcmp(x.clip.values.data().data(), y.clip.values.data().data(), x.clip.values.numel() * 8), 0);
}

TEST(Synth, DrumEnergyPeaksOnBeats) {
  std::mt19937_64 rng(12);
  SynthParams p;
  p.frames = 800;
  const auto s = synth_clip(p, rng);
  const std::size_t drum = s.clip.channel_index("drum");
  std::vector<double> energy(p.frames, 0.0);
  for (std::size_t t = 0; t < p.frames; ++t)
    for (std::size_t f = 0; f < 64; ++f) energy[t] += s.clip.values.at({t, drum, f});
  double on = 0, off = 0;
  std::size_t n_on = 0, n_off = 0;
  std::vector<bool> is_beat(p.frames, false);
  for (double bt : s.annotation.beat_times) is_beat[time_to_frame(bt, p.fps)] = true;
  for (std::size_t t = 0; t < p.frames; ++t) (is_beat[t] ? (on += energy[t], ++n_on) : (off += energy[t], ++n_off));
  EXPECT_GT(on / n_on, 2.0 * off / n_off);
}

TEST(Synth, RejectsOutOfRangeParams) {
  std::mt19937_64 rng(13);
  SynthParams p;
  p.bpm = 300;
  EXPECT_THROW(synth_clip(p, rng), ConfigError);
  p = {};
  p.beats_per_bar = 5;
  EXPECT_THROW(synth_clip(p, rng), ConfigError);
  p = {};
  p.frames = 9000;
  EXPECT_THROW(synth_clip(p, rng), ConfigError);
}

TEST(Loss, LogitFormMatchesProbabilityForm) {
  std::mt19937_64 rng(14);
  NoGradGuard g;
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor z = Tensor::uniform({9}, -25.0, 25.0, rng);
    std::vector<double> y(9);
    for (double& v : y) v = std::uniform_real_distribution<double>(0, 1)(rng);
    EXPECT_NEAR(binary_cross_entropy_logits(z, y).item(), binary_cross_entropy(sigmoid(z), y).item(), 1e-9);
    const Tensor zt = Tensor::uniform({7}, -30.0, 30.0, rng);
    const std::vector<double> t{0, 0.25, 0.5, 0.25, 0, 0, 0};
    EXPECT_NEAR(cross_entropy_logits(zt, t).item(), cross_entropy(softmax_lastdim(zt), t).item(), 1e-9);
  }
}

TEST(Loss, LogitFormGradients) {
  std::mt19937_64 rng(15);
  Tensor z = Tensor::uniform({6}, -2, 2, rng).set_requires_grad();
  Tensor zt = Tensor::uniform({5}, -2, 2, rng).set_requires_grad();
  const std::vector<double> y{0, 0.25, 0.5, 1, 0.5, 0.25}, t{0.1, 0.2, 0.3, 0.4, 0.0};
  auto loss = [&] { return add(binary_cross_entropy_logits(z, y), cross_entropy_logits(zt, t)); };
  const auto r = beatkit::testing::check_gradients({{"z", z}, {"zt", zt}}, loss, 1e-6);
  EXPECT_EQ(r.failures, 0u) << r.worst_where;
  Tape::active().clear();
}

TEST(Loss, SaturatedTempoHeadStillLearns) {
  Tensor zt = Tensor::from({4}, std::vector<double>{60.0, 0.0, 0.0, 0.0}).set_requires_grad();
  const std::vector<double> t{0.0, 0.25, 0.5, 0.25};
  const Tensor l = cross_entropy_logits(zt, t);
  EXPECT_NEAR(l.item(), -std::log(1e-7), 1e-9);  // clipped value
  backward(l);
  EXPECT_NEAR(zt.grad()[0], 1.0, 1e-12);
  EXPECT_NEAR(zt.grad()[2], -0.5, 1e-12);
  Tape::active().clear();
}
