#pragma once

// Demixed Beat Transformer encoder.
//
// Layout of the hidden state is [C, T, D]: every instrument channel is an
// independent sequence for the temporal layers (TTL, dilated attention along
// T) and the channel axis is attended by the instrumental layers (ITL, plain
// attention across C at each frame, no positional term).

#include <algorithm>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "beatkit/checkpoint.hpp"
#include "beatkit/dsa.hpp"
#include "beatkit/tensor.hpp"

namespace beatkit {

inline constexpr double kDefaultFps = 43.07;

inline std::vector<std::string> default_stem_names() { return {"vocal", "piano", "drum", "bass", "other"}; }

struct DemixedClip {
  Tensor values;  // [T, C, F], log(1 + magnitude)
  double fps = kDefaultFps;
  std::vector<std::string> channel_names;

  std::size_t frames() const { return values.dim(0); }
  std::size_t channels() const { return values.dim(1); }
  std::size_t bins() const { return values.dim(2); }

  void validate() const {
    if (!values.defined() || values.rank() != 3) throw DataError("DemixedClip: values must be [T, C, F]");
    if (channel_names.size() != channels()) throw DataError("DemixedClip: one name per channel required");
    if (!(fps > 0.0)) throw DataError("DemixedClip: fps must be positive");
    for (double v : values.data())
      if (!std::isfinite(v)) throw DataError("DemixedClip: non-finite spectrogram value");
  }

  // Index of the named channel, or 0 when absent.
  std::size_t channel_index(const std::string& name) const {
    const auto it = std::find(channel_names.begin(), channel_names.end(), name);
    return it == channel_names.end() ? 0 : static_cast<std::size_t>(it - channel_names.begin());
  }
};

struct EncoderConfig {
  std::size_t mel_bins = 128;
  std::size_t conv_filters = 8;
  std::size_t conv_blocks = 3;
  std::size_t pool = 4;
  std::size_t n_ttl = 6;
  std::vector<std::size_t> demixed_layers = {2};  // TTL indices followed by an ITL
  std::size_t d_model = 32;
  std::size_t d_ff = 64;
  std::size_t head_dim = 8;
  std::vector<HeadWindow> head_windows = {{2, 2}, {2, 2}, {0, 4}, {4, 0}};
  std::size_t dilation_base = 2;
  double dropout_main = 0.1;
  double dropout_tempo = 0.5;
  std::size_t tempo_classes = 300;
  double fps = kDefaultFps;
  double ln_eps = 1e-5;

  std::size_t heads() const { return head_windows.size(); }

  // 9 TTLs, middle three demixed, 8 heads of width 32, d_ff 1024.
  static EncoderConfig paper() {
    EncoderConfig c;
    c.conv_filters = 128;
    c.n_ttl = 9;
    c.demixed_layers = {3, 4, 5};
    c.d_model = 256;
    c.d_ff = 1024;
    c.head_dim = 32;
    c.head_windows = paper_head_windows();
    return c;
  }
  static EncoderConfig desk() { return EncoderConfig{}; }

  std::size_t pooled_bins() const {
    std::size_t f = mel_bins;
    for (std::size_t b = 0; b < conv_blocks; ++b) f /= pool;
    return f;
  }

  std::size_t dilation(std::size_t layer) const {
    std::size_t r = 1;
    for (std::size_t i = 0; i < layer; ++i) r *= dilation_base;
    return r;
  }

  DSAConfig ttl_attention(std::size_t layer) const {
    DSAConfig c;
    c.dilation = dilation(layer);
    c.head_dim = head_dim;
    c.heads = head_windows;
    return c;
  }

  std::vector<LayerGeometry> geometry() const {
    std::vector<LayerGeometry> g;
    for (std::size_t l = 0; l < n_ttl; ++l) g.push_back({head_windows, dilation(l)});
    return g;
  }

  bool is_demixed(std::size_t layer) const {
    return std::find(demixed_layers.begin(), demixed_layers.end(), layer) != demixed_layers.end();
  }

  void validate() const {
    if (head_windows.empty()) throw ConfigError("EncoderConfig: need at least one head");
    if (heads() * head_dim != d_model)
      throw ConfigError("EncoderConfig: d_model must equal heads x head_dim");
    if (n_ttl == 0) throw ConfigError("EncoderConfig: need at least one TTL");
    if (pool < 1 || conv_blocks < 1) throw ConfigError("EncoderConfig: bad pooling schedule");
    std::size_t f = mel_bins;
    for (std::size_t b = 0; b < conv_blocks; ++b) {
      if (f % pool != 0)
        throw ConfigError("EncoderConfig: mel_bins " + std::to_string(mel_bins) + " not divisible by the pooling schedule");
      f /= pool;
    }
    if (f == 0) throw ConfigError("EncoderConfig: pooling leaves no frequency bins");
    for (std::size_t l : demixed_layers)
      if (l >= n_ttl) throw ConfigError("EncoderConfig: demixed layer index out of range");
    if (dilation_base < 1) throw ConfigError("EncoderConfig: dilation base must be >= 1");
    if (dropout_main < 0 || dropout_main >= 1 || dropout_tempo < 0 || dropout_tempo >= 1)
      throw ConfigError("EncoderConfig: dropout rates must lie in [0,1)");
    if (tempo_classes < 1) throw ConfigError("EncoderConfig: need tempo classes");
  }
};

// ---------------------------------------------------------------------------
// key=value config text

inline std::string to_config_text(const EncoderConfig& c) {
  std::ostringstream os;
  os.precision(17);
  auto list = [](const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  std::string windows;
  for (std::size_t i = 0; i < c.head_windows.size(); ++i)
    windows += (i ? "," : "") + std::to_string(c.head_windows[i].m) + ":" + std::to_string(c.head_windows[i].n);
  os << "mel_bins=" << c.mel_bins << "\nconv_filters=" << c.conv_filters << "\nconv_blocks=" << c.conv_blocks
     << "\npool=" << c.pool << "\nn_ttl=" << c.n_ttl << "\ndemixed_layers=" << list(c.demixed_layers)
     << "\nd_model=" << c.d_model << "\nd_ff=" << c.d_ff << "\nhead_dim=" << c.head_dim
     << "\nhead_windows=" << windows << "\ndilation_base=" << c.dilation_base << "\ndropout_main=" << c.dropout_main
     << "\ndropout_tempo=" << c.dropout_tempo << "\ntempo_classes=" << c.tempo_classes << "\nfps=" << c.fps
     << "\nln_eps=" << c.ln_eps << "\n";
  return os.str();
}

inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line without '=': " + line);
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

namespace detail {

inline std::size_t config_size(const std::string& k, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + k + "': expected an integer, got '" + v + "'");
  }
}

inline double config_real(const std::string& k, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(x)) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + k + "': expected a number, got '" + v + "'");
  }
}

inline std::vector<std::string> config_list(const std::string& v, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace detail

// Applies key=value overrides on top of `base`. Unknown keys are errors.
inline EncoderConfig apply_config(EncoderConfig c, const std::map<std::string, std::string>& kv) {
  const auto size = detail::config_size;
  const auto real = detail::config_real;
  const auto split = detail::config_list;
  for (const auto& [k, v] : kv) {
    if (k == "mel_bins") c.mel_bins = size(k, v);
    else if (k == "conv_filters") c.conv_filters = size(k, v);
    else if (k == "conv_blocks") c.conv_blocks = size(k, v);
    else if (k == "pool") c.pool = size(k, v);
    else if (k == "n_ttl") c.n_ttl = size(k, v);
    else if (k == "demixed_layers") {
      c.demixed_layers.clear();
      for (const auto& s : split(v, ',')) c.demixed_layers.push_back(size(k, s));
    } else if (k == "d_model") c.d_model = size(k, v);
    else if (k == "d_ff") c.d_ff = size(k, v);
    else if (k == "head_dim") c.head_dim = size(k, v);
    else if (k == "head_windows") {
      c.head_windows.clear();
      for (const auto& s : split(v, ',')) {
        const auto mn = split(s, ':');
        if (mn.size() != 2) throw ConfigError("head_windows entries must be m:n");
        c.head_windows.push_back({size(k, mn[0]), size(k, mn[1])});
      }
    } else if (k == "dilation_base") c.dilation_base = size(k, v);
    else if (k == "dropout_main") c.dropout_main = real(k, v);
    else if (k == "dropout_tempo") c.dropout_tempo = real(k, v);
    else if (k == "tempo_classes") c.tempo_classes = size(k, v);
    else if (k == "fps") c.fps = real(k, v);
    else if (k == "ln_eps") c.ln_eps = real(k, v);
    else throw ConfigError("unknown model config key '" + k + "'");
  }
  c.validate();
  return c;
}

inline EncoderConfig parse_config_text(const std::string& text, EncoderConfig base = EncoderConfig::desk()) {
  return apply_config(std::move(base), parse_key_values(text));
}

// ---------------------------------------------------------------------------
// Parameters

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

struct LayerParams {
  Tensor norm1_gain, norm1_bias;
  AttentionParams attention;
  Tensor norm2_gain, norm2_bias;
  FeedForwardParams ffn;
};

struct FrontendParams {
  std::vector<Tensor> conv_w, conv_b;
  Tensor proj_w, proj_b;
};

struct EncoderParams {
  FrontendParams frontend;
  std::vector<LayerParams> ttl;
  std::vector<LayerParams> itl;  // one per demixed layer, same order as demixed_layers
  Tensor beat_w, beat_b, downbeat_w, downbeat_b;
  Tensor tempo_w, tempo_b;

  static EncoderParams init(const EncoderConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    EncoderParams p;
    const std::size_t D = cfg.d_model;
    std::size_t in_ch = 1;
    // Biases start at zero: random offsets in the small conv stack swamp the
    // frame-to-frame variation the heads need.
    for (std::size_t b = 0; b < cfg.conv_blocks; ++b) {
      p.frontend.conv_w.push_back(init_uniform({cfg.conv_filters, in_ch, 3, 3}, in_ch * 9, rng));
      p.frontend.conv_b.push_back(Tensor::zeros({cfg.conv_filters}).set_requires_grad());
      in_ch = cfg.conv_filters;
    }
    const std::size_t flat = cfg.conv_filters * cfg.pooled_bins();
    p.frontend.proj_w = init_uniform({flat, D}, flat, rng);
    p.frontend.proj_b = Tensor::zeros({D}).set_requires_grad();

    auto layer = [&](bool relative) {
      LayerParams l;
      l.norm1_gain = Tensor::full({D}, 1.0).set_requires_grad();
      l.norm1_bias = Tensor::zeros({D}).set_requires_grad();
      l.attention = AttentionParams::init(D, cfg.head_windows, cfg.head_dim, relative, rng);
      l.norm2_gain = Tensor::full({D}, 1.0).set_requires_grad();
      l.norm2_bias = Tensor::zeros({D}).set_requires_grad();
      l.ffn.w1 = init_uniform({D, cfg.d_ff}, D, rng);
      l.ffn.b1 = Tensor::zeros({cfg.d_ff}).set_requires_grad();
      l.ffn.w2 = init_uniform({cfg.d_ff, D}, cfg.d_ff, rng);
      l.ffn.b2 = Tensor::zeros({D}).set_requires_grad();
      return l;
    };
    for (std::size_t l = 0; l < cfg.n_ttl; ++l) {
      p.ttl.push_back(layer(true));
      if (cfg.is_demixed(l)) p.itl.push_back(layer(false));
    }
    p.beat_w = init_uniform({D, 1}, D, rng);
    p.beat_b = Tensor::zeros({1}).set_requires_grad();
    p.downbeat_w = init_uniform({D, 1}, D, rng);
    p.downbeat_b = Tensor::zeros({1}).set_requires_grad();
    p.tempo_w = init_uniform({D, cfg.tempo_classes}, D, rng);
    p.tempo_b = Tensor::zeros({cfg.tempo_classes}).set_requires_grad();
    return p;
  }

  // Stable names used for checkpoints and optimizer state.
  std::vector<std::pair<std::string, Tensor>> named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t b = 0; b < frontend.conv_w.size(); ++b) {
      out.emplace_back("frontend.conv" + std::to_string(b) + ".w", frontend.conv_w[b]);
      out.emplace_back("frontend.conv" + std::to_string(b) + ".b", frontend.conv_b[b]);
    }
    out.emplace_back("frontend.proj.w", frontend.proj_w);
    out.emplace_back("frontend.proj.b", frontend.proj_b);
    auto add_layer = [&](const std::string& prefix, const LayerParams& l) {
      out.emplace_back(prefix + ".norm1.gain", l.norm1_gain);
      out.emplace_back(prefix + ".norm1.bias", l.norm1_bias);
      const AttentionParams& a = l.attention;
      out.emplace_back(prefix + ".attn.wq", a.wq);
      out.emplace_back(prefix + ".attn.bq", a.bq);
      out.emplace_back(prefix + ".attn.wk", a.wk);
      out.emplace_back(prefix + ".attn.bk", a.bk);
      out.emplace_back(prefix + ".attn.wv", a.wv);
      out.emplace_back(prefix + ".attn.bv", a.bv);
      out.emplace_back(prefix + ".attn.wo", a.wo);
      out.emplace_back(prefix + ".attn.bo", a.bo);
      for (std::size_t h = 0; h < a.relative.size(); ++h)
        out.emplace_back(prefix + ".attn.relative" + std::to_string(h), a.relative[h]);
      out.emplace_back(prefix + ".norm2.gain", l.norm2_gain);
      out.emplace_back(prefix + ".norm2.bias", l.norm2_bias);
      out.emplace_back(prefix + ".ffn.w1", l.ffn.w1);
      out.emplace_back(prefix + ".ffn.b1", l.ffn.b1);
      out.emplace_back(prefix + ".ffn.w2", l.ffn.w2);
      out.emplace_back(prefix + ".ffn.b2", l.ffn.b2);
    };
    for (std::size_t l = 0; l < ttl.size(); ++l) add_layer("ttl" + std::to_string(l), ttl[l]);
    for (std::size_t l = 0; l < itl.size(); ++l) add_layer("itl" + std::to_string(l), itl[l]);
    out.emplace_back("beat.w", beat_w);
    out.emplace_back("beat.b", beat_b);
    out.emplace_back("downbeat.w", downbeat_w);
    out.emplace_back("downbeat.b", downbeat_b);
    out.emplace_back("tempo.w", tempo_w);
    out.emplace_back("tempo.b", tempo_b);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named()) n += t.numel();
    return n;
  }

  std::vector<NamedArray> to_arrays() const {
    std::vector<NamedArray> out;
    for (const auto& [name, t] : named()) out.push_back(to_named_array(name, t));
    return out;
  }

  // Copies values from checkpoint arrays; every parameter must be present with
  // a matching shape. Extra arrays are ignored.
  void load(const std::vector<NamedArray>& arrays) {
    std::map<std::string, const NamedArray*> by_name;
    for (const NamedArray& a : arrays) by_name[a.name] = &a;
    for (auto& [name, t] : named()) {
      const auto it = by_name.find(name);
      if (it == by_name.end()) throw ConfigError("checkpoint lacks parameter '" + name + "'");
      if (it->second->shape != t.shape())
        throw ConfigError("checkpoint parameter '" + name + "' has shape " + to_string(it->second->shape) +
                          ", model expects " + to_string(t.shape()));
      Tensor handle = t;
      std::copy(it->second->values.begin(), it->second->values.end(), handle.mutable_data().begin());
    }
  }
};

struct Model {
  EncoderConfig config;
  EncoderParams params;

  static Model create(const EncoderConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return {cfg, EncoderParams::init(cfg, rng)};
  }
};

// ---------------------------------------------------------------------------
// Forward pass

struct RunMode {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training with dropout
};

inline Tensor maybe_dropout(const Tensor& x, double rate, const RunMode& mode) {
  if (!mode.training || rate == 0.0) return x;
  if (!mode.rng) throw ContractError("training mode needs an rng for dropout");
  return dropout(x, rate, *mode.rng);
}

// Three blocks of (3x3 conv over time x frequency, ELU, 1 x pool max-pool over
// frequency), shared by all channels, then a linear map to d_model.
// Returns [T, C, D].
inline Tensor frontend_forward(const DemixedClip& clip, const FrontendParams& p, const EncoderConfig& cfg) {
  if (clip.bins() != cfg.mel_bins)
    throw ConfigError("frontend: clip has " + std::to_string(clip.bins()) + " bins, model expects " +
                      std::to_string(cfg.mel_bins));
  cfg.validate();
  const std::size_t T = clip.frames(), C = clip.channels(), F = clip.bins();
  Tensor x = reshape(permute(clip.values, {1, 0, 2}), {C, 1, T, F});
  for (std::size_t b = 0; b < p.conv_w.size(); ++b)
    x = max_pool_lastdim(elu(conv2d_same(x, p.conv_w[b], p.conv_b[b])), cfg.pool);
  // [C, filters, T, F'] -> [C, T, filters * F']
  x = reshape(permute(x, {0, 2, 1, 3}), {C, T, cfg.conv_filters * cfg.pooled_bins()});
  return permute(linear(x, p.proj_w, p.proj_b), {1, 0, 2});
}

inline Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  return linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

struct LayerResult {
  Tensor output;
  std::vector<Tensor> attention;  // TTL: [C * heads] windowed weights
};

// Temporal layer on x[C, T, D] (or [T, D]): pre-norm residual DSA, then
// pre-norm residual feed-forward. Each channel is an independent sequence.
inline LayerResult ttl_forward(const Tensor& x, const LayerParams& p, const DSAConfig& attn, const EncoderConfig& cfg,
                               const RunMode& mode = {}) {
  MultiHeadResult a = multi_head_dsa(layer_norm(x, p.norm1_gain, p.norm1_bias, cfg.ln_eps), p.attention, attn);
  const Tensor h = add(x, maybe_dropout(a.output, cfg.dropout_main, mode));
  const Tensor f = feed_forward(layer_norm(h, p.norm2_gain, p.norm2_bias, cfg.ln_eps), p.ffn);
  return {add(h, maybe_dropout(f, cfg.dropout_main, mode)), std::move(a.weights)};
}

// Full multi-head attention across the channel axis of x[..., C, D].
inline Tensor channel_attention(const Tensor& x, const AttentionParams& p, std::size_t heads) {
  const std::size_t C = x.dim(x.rank() - 2), D = x.dim(x.rank() - 1);
  if (D % heads != 0) throw ConfigError("channel_attention: d_model not divisible by heads");
  const std::size_t d = D / heads;
  const std::size_t B = x.numel() / (C * D);
  const Tensor xb = reshape(x, {B, C, D});
  auto split = [&](const Tensor& t) {
    return reshape(permute(reshape(t, {B, C, heads, d}), {0, 2, 1, 3}), {B * heads, C, d});
  };
  const auto a = reference::full_attention(split(linear(xb, p.wq, p.bq)), split(linear(xb, p.wk, p.bk)),
                                           split(linear(xb, p.wv, p.bv)));
  Tensor z = reshape(permute(reshape(a.output, {B, heads, C, d}), {0, 2, 1, 3}), {B, C, D});
  return reshape(linear(z, p.wo, p.bo), x.shape());
}

// Instrumental layer on x[..., C, D]: same pre-norm residual layout as the
// TTL with unwindowed attention across channels and no positional term.
inline Tensor itl_forward(const Tensor& x, const LayerParams& p, const EncoderConfig& cfg, const RunMode& mode = {}) {
  const Tensor a = channel_attention(layer_norm(x, p.norm1_gain, p.norm1_bias, cfg.ln_eps), p.attention, cfg.heads());
  const Tensor h = add(x, maybe_dropout(a, cfg.dropout_main, mode));
  const Tensor f = feed_forward(layer_norm(h, p.norm2_gain, p.norm2_bias, cfg.ln_eps), p.ffn);
  return add(h, maybe_dropout(f, cfg.dropout_main, mode));
}

// Each TTL output [C, T, D] is summed over channels and averaged over time;
// the per-layer vectors are summed, dropped out and mapped to tempo classes.
inline Tensor tempo_head_logits(const std::vector<Tensor>& layer_outputs, const EncoderParams& p,
                               const EncoderConfig& cfg, const RunMode& mode = {}) {
  if (layer_outputs.empty()) throw ContractError("tempo head needs at least one layer output");
  Tensor acc;
  for (const Tensor& lo : layer_outputs) {
    const Tensor v = mean_axis(sum_axis(lo, 0), 0);
    acc = acc.defined() ? add(acc, v) : v;
  }
  acc = maybe_dropout(acc, cfg.dropout_tempo, mode);
  return linear(acc, p.tempo_w, p.tempo_b);
}

inline Tensor tempo_head_forward(const std::vector<Tensor>& layer_outputs, const EncoderParams& p,
                                 const EncoderConfig& cfg, const RunMode& mode = {}) {
  return softmax_lastdim(tempo_head_logits(layer_outputs, p, cfg, mode));
}

struct EncoderOutput {
  Tensor beat;      // [T]
  Tensor downbeat;  // [T]
  Tensor tempo;     // [tempo_classes]
  // Pre-activation heads; the training loss is computed from these.
  Tensor beat_logit, downbeat_logit, tempo_logits;
  std::vector<Tensor> layer_outputs;           // TTL outputs, [C, T, D]
  std::vector<std::vector<Tensor>> attention;  // per TTL, index c * heads + h, each [T, l_win]
};

inline EncoderOutput encoder_forward(const DemixedClip& clip, const EncoderParams& p, const EncoderConfig& cfg,
                                     const RunMode& mode = {}) {
  clip.validate();
  const std::size_t T = clip.frames();
  Tensor x = permute(frontend_forward(clip, p.frontend, cfg), {1, 0, 2});
  x = maybe_dropout(x, cfg.dropout_main, mode);
  EncoderOutput out;
  std::size_t itl_index = 0;
  for (std::size_t l = 0; l < cfg.n_ttl; ++l) {
    LayerResult r = ttl_forward(x, p.ttl[l], cfg.ttl_attention(l), cfg, mode);
    x = r.output;
    out.layer_outputs.push_back(x);
    out.attention.push_back(std::move(r.attention));
    if (cfg.is_demixed(l)) {
      // ITL attends across channels at each frame: [C, T, D] -> [T, C, D] and back.
      x = permute(itl_forward(permute(x, {1, 0, 2}), p.itl.at(itl_index++), cfg, mode), {1, 0, 2});
    }
  }
  const Tensor summed = sum_axis(x, 0);
  out.beat_logit = reshape(linear(summed, p.beat_w, p.beat_b), {T});
  out.downbeat_logit = reshape(linear(summed, p.downbeat_w, p.downbeat_b), {T});
  out.tempo_logits = tempo_head_logits(out.layer_outputs, p, cfg, mode);
  out.beat = sigmoid(out.beat_logit);
  out.downbeat = sigmoid(out.downbeat_logit);
  out.tempo = softmax_lastdim(out.tempo_logits);
  return out;
}

// Removes each (channel, bin) mean over the clip. Stationary tones and noise
// floors otherwise dominate the conv stack and bury the onsets. This is input
// preprocessing: the network itself stays local in time.
inline DemixedClip centre_bins(const DemixedClip& clip) {
  DemixedClip out = clip;
  out.values = sub(clip.values, mean_axis(clip.values, 0));
  return out;
}

// Model-level entry point used by training, inference and attention export:
// centred input, then the network.
inline EncoderOutput encoder_forward(const DemixedClip& clip, const Model& model, const RunMode& mode = {}) {
  return encoder_forward(centre_bins(clip), model.params, model.config, mode);
}

struct ActivationTrack {
  std::vector<double> beat;
  std::vector<double> downbeat;
  std::vector<double> tempo;
  double fps = kDefaultFps;

  std::size_t frames() const { return beat.size(); }
};

inline ActivationTrack to_activation_track(const EncoderOutput& out, double fps) {
  ActivationTrack a;
  a.beat.assign(out.beat.data().begin(), out.beat.data().end());
  a.downbeat.assign(out.downbeat.data().begin(), out.downbeat.data().end());
  a.tempo.assign(out.tempo.data().begin(), out.tempo.data().end());
  a.fps = fps;
  return a;
}

// Inference without recording a tape.
inline ActivationTrack infer(const DemixedClip& clip, const Model& model) {
  NoGradGuard guard;
  return to_activation_track(encoder_forward(clip, model), clip.fps);
}

}  // namespace beatkit
