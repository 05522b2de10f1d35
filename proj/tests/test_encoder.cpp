#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "beatkit/encoder.hpp"
#include "support/oracles.hpp"

using namespace beatkit;

namespace {

DemixedClip random_clip(std::size_t T, std::size_t C, std::size_t F, std::mt19937_64& rng) {
  DemixedClip clip;
  clip.values = Tensor::uniform({T, C, F}, 0.0, 2.0, rng);
  for (std::size_t c = 0; c < C; ++c) clip.channel_names.push_back("ch" + std::to_string(c));
  return clip;
}

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.mel_bins = 64;
  c.conv_filters = 2;
  c.d_model = 8;
  c.d_ff = 12;
  c.head_dim = 4;
  c.head_windows = {{1, 1}, {0, 2}};
  c.n_ttl = 3;
  c.demixed_layers = {1};
  c.dropout_main = 0.0;
  c.dropout_tempo = 0.0;
  c.tempo_classes = 7;
  return c;
}

DemixedClip permute_channels(const DemixedClip& clip, const std::vector<std::size_t>& perm) {
  const std::size_t T = clip.frames(), C = clip.channels(), F = clip.bins();
  std::vector<double> v(T * C * F);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t f = 0; f < F; ++f) v[(t * C + c) * F + f] = clip.values.data()[(t * C + perm[c]) * F + f];
  DemixedClip out = clip;
  out.values = Tensor::from({T, C, F}, v);
  return out;
}

void zero(Tensor t) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0); }

}  // namespace

TEST(Frontend, ShapeAudit) {
  std::mt19937_64 rng(1);
  const auto cfg = EncoderConfig::desk();
  const auto p = EncoderParams::init(cfg, rng);
  const DemixedClip clip = random_clip(128, 5, 128, rng);
  NoGradGuard g;
  EXPECT_EQ(frontend_forward(clip, p.frontend, cfg).shape(), (Shape{128, 5, cfg.d_model}));
}

TEST(Frontend, ZeroInputWithZeroBiasesGivesZero) {
  std::mt19937_64 rng(2);
  auto cfg = tiny_config();
  auto p = EncoderParams::init(cfg, rng);
  for (auto& b : p.frontend.conv_b) zero(b);
  zero(p.frontend.proj_b);
  DemixedClip clip;
  clip.values = Tensor::zeros({16, 3, 64});
  clip.channel_names = {"a", "b", "c"};
  NoGradGuard g;
  const Tensor y = frontend_forward(clip, p.frontend, cfg);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Frontend, IndivisibleBinsIsConfigError) {
  auto cfg = tiny_config();
  cfg.mel_bins = 100;
  EXPECT_THROW(cfg.validate(), ConfigError);
  std::mt19937_64 rng(3);
  EXPECT_THROW(EncoderParams::init(cfg, rng), ConfigError);
}

TEST(Frontend, BinMismatchIsConfigError) {
  std::mt19937_64 rng(4);
  const auto cfg = tiny_config();
  const auto p = EncoderParams::init(cfg, rng);
  const DemixedClip clip = random_clip(8, 2, 128, rng);
  NoGradGuard g;
  EXPECT_THROW(frontend_forward(clip, p.frontend, cfg), ConfigError);
}

TEST(Frontend, ChannelsAreProcessedIndependently) {
  std::mt19937_64 rng(5);
  const auto cfg = tiny_config();
  const auto p = EncoderParams::init(cfg, rng);
  const DemixedClip clip = random_clip(12, 4, 64, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  NoGradGuard g;
  const Tensor a = frontend_forward(clip, p.frontend, cfg);
  const Tensor b = frontend_forward(permute_channels(clip, perm), p.frontend, cfg);
  const std::size_t T = 12, C = 4, D = cfg.d_model;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t d = 0; d < D; ++d)
        EXPECT_NEAR(b.data()[(t * C + c) * D + d], a.data()[(t * C + perm[c]) * D + d], 1e-12);
}

TEST(Layers, ZeroedOutputProjectionsGiveIdentity) {
  std::mt19937_64 rng(6);
  const auto cfg = tiny_config();
  auto p = EncoderParams::init(cfg, rng);
  for (LayerParams* l : {&p.ttl[0], &p.itl[0]}) {
    zero(l->attention.wo);
    zero(l->attention.bo);
    zero(l->ffn.w2);
    zero(l->ffn.b2);
  }
  const Tensor x = beatkit::testing::random_tensor({3, 10, cfg.d_model}, rng, false);
  NoGradGuard g;
  const Tensor y = ttl_forward(x, p.ttl[0], cfg.ttl_attention(0), cfg).output;
  const Tensor z = itl_forward(x, p.itl[0], cfg);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
    EXPECT_DOUBLE_EQ(z.data()[i], x.data()[i]);
  }
}

TEST(Layers, ChannelAttentionMatchesScalarOracle) {
  std::mt19937_64 rng(7);
  const auto cfg = tiny_config();
  const auto p = EncoderParams::init(cfg, rng);
  const AttentionParams& a = p.itl[0].attention;
  const std::size_t B = 3, C = 4, D = cfg.d_model, H = cfg.heads(), d = cfg.head_dim;
  const Tensor x = beatkit::testing::random_tensor({B, C, D}, rng, false);
  NoGradGuard g;
  const Tensor got = channel_attention(x, a, H);

  auto proj = [&](const Tensor& w, const Tensor& b, std::size_t bi, std::size_t c, std::size_t j) {
    double s = b.data()[j];
    for (std::size_t i = 0; i < D; ++i) s += x.data()[(bi * C + c) * D + i] * w.data()[i * D + j];
    return s;
  };
  for (std::size_t bi = 0; bi < B; ++bi) {
    std::vector<double> z(C * D, 0.0);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t qc = 0; qc < C; ++qc) {
        std::vector<double> logits(C);
        for (std::size_t kc = 0; kc < C; ++kc) {
          double s = 0;
          for (std::size_t e = 0; e < d; ++e)
            s += proj(a.wq, a.bq, bi, qc, h * d + e) * proj(a.wk, a.bk, bi, kc, h * d + e);
          logits[kc] = s / std::sqrt(static_cast<double>(d));
        }
        const double mx = *std::max_element(logits.begin(), logits.end());
        double den = 0;
        for (double& l : logits) den += (l = std::exp(l - mx));
        for (std::size_t kc = 0; kc < C; ++kc)
          for (std::size_t e = 0; e < d; ++e)
            z[qc * D + h * d + e] += logits[kc] / den * proj(a.wv, a.bv, bi, kc, h * d + e);
      }
    for (std::size_t qc = 0; qc < C; ++qc)
      for (std::size_t j = 0; j < D; ++j) {
        double s = a.bo.data()[j];
        for (std::size_t i = 0; i < D; ++i) s += z[qc * D + i] * a.wo.data()[i * D + j];
        EXPECT_NEAR(got.data()[(bi * C + qc) * D + j], s, 1e-12);
      }
  }
}

TEST(Layers, ItlIsChannelPermutationEquivariant) {
  std::mt19937_64 rng(8);
  const auto cfg = tiny_config();
  const auto p = EncoderParams::init(cfg, rng);
  const std::size_t T = 5, C = 4, D = cfg.d_model;
  const Tensor x = beatkit::testing::random_tensor({T, C, D}, rng, false);
  const std::vector<std::size_t> perm{3, 1, 0, 2};
  std::vector<double> xp(x.numel());
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t j = 0; j < D; ++j) xp[(t * C + c) * D + j] = x.data()[(t * C + perm[c]) * D + j];
  NoGradGuard g;
  const Tensor y = itl_forward(x, p.itl[0], cfg);
  const Tensor yp = itl_forward(Tensor::from({T, C, D}, xp), p.itl[0], cfg);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t j = 0; j < D; ++j)
        EXPECT_NEAR(yp.data()[(t * C + c) * D + j], y.data()[(t * C + perm[c]) * D + j], 1e-12);
}

TEST(Encoder, OutputsInvariantToChannelOrder) {
  std::mt19937_64 rng(9);
  const auto cfg = tiny_config();
  const auto p = EncoderParams::init(cfg, rng);
  const DemixedClip clip = random_clip(20, 4, 64, rng);
  NoGradGuard g;
  const auto a = encoder_forward(clip, p, cfg);
  const auto b = encoder_forward(permute_channels(clip, {1, 3, 0, 2}), p, cfg);
  for (std::size_t t = 0; t < 20; ++t) {
    EXPECT_NEAR(a.beat.data()[t], b.beat.data()[t], 1e-12);
    EXPECT_NEAR(a.downbeat.data()[t], b.downbeat.data()[t], 1e-12);
  }
  for (std::size_t k = 0; k < cfg.tempo_classes; ++k) EXPECT_NEAR(a.tempo.data()[k], b.tempo.data()[k], 1e-12);
}

TEST(Encoder, TempoIsDistributionAndReachesEveryTtl) {
  std::mt19937_64 rng(10);
  const auto cfg = tiny_config();
  const auto p = EncoderParams::init(cfg, rng);
  const DemixedClip clip = random_clip(16, 3, 64, rng);
  Tape::active().clear();
  const auto out = encoder_forward(clip, p, cfg);
  double s = 0;
  for (double v : out.tempo.data()) {
    EXPECT_GT(v, 0.0);
    s += v;
  }
  EXPECT_NEAR(s, 1.0, 1e-12);
  // Only the tempo path contributes to this loss.
  backward(sum(scale(log(narrow(out.tempo, 0, 3, 1)), -1.0)));
  for (std::size_t l = 0; l < cfg.n_ttl; ++l) {
    ASSERT_TRUE(p.ttl[l].ffn.w2.has_grad()) << "layer " << l;
    double mass = 0;
    for (double v : p.ttl[l].ffn.w2.grad()) mass += std::abs(v);
    EXPECT_GT(mass, 0.0) << "layer " << l;
  }
  Tape::active().clear();
}

TEST(Encoder, DeskSmokeForwardBackward) {
  std::mt19937_64 rng(11);
  const auto cfg = EncoderConfig::desk();
  const auto p = EncoderParams::init(cfg, rng);
  DemixedClip clip = random_clip(256, 5, 128, rng);
  clip.channel_names = default_stem_names();
  Tape::active().clear();
  const auto out = encoder_forward(clip, p, cfg, RunMode{true, &rng});
  ASSERT_EQ(out.beat.shape(), (Shape{256}));
  ASSERT_EQ(out.downbeat.shape(), (Shape{256}));
  ASSERT_EQ(out.tempo.shape(), (Shape{300}));
  EXPECT_EQ(out.attention.size(), cfg.n_ttl);
  EXPECT_EQ(out.attention[0].size(), 5 * cfg.heads());
  for (double v : out.beat.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  backward(add(mean(out.beat), mean(out.downbeat)));
  for (const auto& [name, t] : p.named()) {
    if (name.rfind("tempo.", 0) == 0) continue;
    EXPECT_TRUE(t.has_grad()) << name;
  }
  Tape::active().clear();
}

TEST(Encoder, EndToEndLocality) {
  std::mt19937_64 rng(12);
  auto cfg = tiny_config();
  cfg.head_windows = {{2, 2}, {4, 0}};
  const auto p = EncoderParams::init(cfg, rng);
  const std::size_t T = 120, t0 = 60;
  const DemixedClip clip = random_clip(T, 3, 64, rng);
  DemixedClip bumped = clip;
  std::vector<double> v(clip.values.data().begin(), clip.values.data().end());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t f = 0; f < 64; ++f) v[(t0 * 3 + c) * 64 + f] += 0.7;
  bumped.values = Tensor::from({T, 3, 64}, v);

  // Three 3x3 convs reach one frame each; window extents then add 4 * (1 + 2 + 4).
  const long reach = 3 + 4 * 7;
  NoGradGuard g;
  const auto a = encoder_forward(clip, p, cfg);
  const auto b = encoder_forward(bumped, p, cfg);
  bool changed_inside = false;
  for (std::size_t t = 0; t < T; ++t) {
    const double diff = std::abs(a.beat.data()[t] - b.beat.data()[t]);
    if (std::abs(static_cast<long>(t) - static_cast<long>(t0)) > reach)
      EXPECT_EQ(diff, 0.0) << "frame " << t;
    else if (diff > 0)
      changed_inside = true;
  }
  EXPECT_TRUE(changed_inside);
}

TEST(Encoder, TinyModelGradientCheck) {
  std::mt19937_64 rng(13);
  auto cfg = tiny_config();
  cfg.tempo_classes = 5;
  const auto p = EncoderParams::init(cfg, rng);
  const DemixedClip clip = random_clip(12, 3, 64, rng);
  auto loss = [&] {
    const auto out = encoder_forward(clip, p, cfg);
    const Tensor w = Tensor::from({12}, std::vector<double>{0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.7, -0.1, 0.05, 0.3, -0.6, 0.4});
    return add(add(sum(mul(out.beat, w)), sum(mul(out.downbeat, scale(w, -0.5)))), sum(log(narrow(out.tempo, 0, 2, 1))));
  };
  std::vector<std::pair<std::string, Tensor>> subset;
  for (const auto& [name, t] : p.named())
    if (name.find("conv0") != std::string::npos || name.find("ttl2.attn.relative") != std::string::npos ||
        name.find("itl0.attn.wq") != std::string::npos || name.find("ttl0.ffn.b1") != std::string::npos ||
        name.find("beat.w") != std::string::npos || name.find("tempo.b") != std::string::npos)
      subset.emplace_back(name, t);
  const auto report = beatkit::testing::check_gradients(subset, loss, 1e-5, 1e-4, 1e-7);
  EXPECT_GT(report.checked, 100u);
  EXPECT_EQ(report.failures, 0u) << report.worst_where;
  Tape::active().clear();
}

TEST(Encoder, ModelInputIgnoresConstantOffsetsPerBin) {
  std::mt19937_64 rng(14);
  const Model m = Model::create(tiny_config(), 4);
  const std::size_t T = 40, C = 3, F = 64;
  const DemixedClip clip = random_clip(T, C, F, rng);
  DemixedClip shifted = clip;
  std::vector<double> v(clip.values.data().begin(), clip.values.data().end());
  std::uniform_real_distribution<double> u(-1.0, 2.0);
  std::vector<double> offset(C * F);
  for (double& o : offset) o = u(rng);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < C * F; ++i) v[t * C * F + i] += offset[i];
  shifted.values = Tensor::from({T, C, F}, v);
  NoGradGuard g;
  const auto a = encoder_forward(clip, m);
  const auto b = encoder_forward(shifted, m);
  for (std::size_t t = 0; t < T; ++t) EXPECT_NEAR(a.beat.data()[t], b.beat.data()[t], 1e-12) << "frame " << t;
  for (std::size_t k = 0; k < m.config.tempo_classes; ++k) EXPECT_NEAR(a.tempo.data()[k], b.tempo.data()[k], 1e-12);
}

TEST(Config, TextRoundTrip) {
  auto c = EncoderConfig::paper();
  c.dropout_main = 0.125;
  const auto back = parse_config_text(to_config_text(c), EncoderConfig::desk());
  EXPECT_EQ(to_config_text(back), to_config_text(c));
  EXPECT_EQ(back.head_windows.size(), 8u);
  EXPECT_EQ(back.demixed_layers, (std::vector<std::size_t>{3, 4, 5}));
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config_text("colour=blue\n"), ConfigError);
  EXPECT_THROW(parse_config_text("d_model=abc\n"), ConfigError);
  EXPECT_THROW(parse_config_text("d_model=12\n"), ConfigError);
  EXPECT_THROW(parse_config_text("justtext\n"), ConfigError);
  EXPECT_THROW(parse_config_text("demixed_layers=9\n"), ConfigError);
}

TEST(Config, FullProfileGeometry) {
  const auto c = EncoderConfig::paper();
  EXPECT_NO_THROW(c.validate());
  const auto rf = receptive_field(c.geometry(), c.fps);
  EXPECT_EQ(rf.frames, 2045u);
  EXPECT_EQ(c.dilation(8), 256u);
}

TEST(Params, CheckpointRoundTripAndMismatch) {
  std::mt19937_64 rng(14);
  const auto cfg = tiny_config();
  const auto a = EncoderParams::init(cfg, rng);
  auto b = EncoderParams::init(cfg, rng);
  b.load(decode_checkpoint(io::ByteReader(encode_checkpoint(a.to_arrays()))));
  const auto na = a.named(), nb = b.named();
  ASSERT_EQ(na.size(), nb.size());
  for (std::size_t i = 0; i < na.size(); ++i) {
    EXPECT_EQ(na[i].first, nb[i].first);
    EXPECT_TRUE(std::equal(na[i].second.data().begin(), na[i].second.data().end(), nb[i].second.data().begin()));
  }
  auto other = cfg;
  other.d_ff = 16;
  auto c = EncoderParams::init(other, rng);
  EXPECT_THROW(c.load(a.to_arrays()), ConfigError);
  auto arrays = a.to_arrays();
  arrays.pop_back();
  EXPECT_THROW(b.load(arrays), ConfigError);
}
