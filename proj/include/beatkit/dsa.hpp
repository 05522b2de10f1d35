#pragma once

// Dilated self-attention.
//
// A query at position i attends to keys at i + r*k for k in [-m, n]. The
// kernel gathers those keys with the pad-and-roll layout, so cost and memory
// are O(T * l_win). reference::masked_attention computes the same thing
// through a dense T x T masked score matrix and exists as a test oracle.

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "beatkit/tensor.hpp"

namespace beatkit {

// Attention window of one head: m frames back (non-causal part), n ahead.
struct HeadWindow {
  std::size_t m = 2;
  std::size_t n = 2;
  std::size_t size() const { return m + n + 1; }
  friend bool operator==(const HeadWindow&, const HeadWindow&) = default;
};

struct DSAConfig {
  std::size_t m = 2;
  std::size_t n = 2;
  std::size_t dilation = 1;
  std::size_t head_dim = 32;
  // Per-head windows for multi-head attention. Empty means one head (m, n).
  std::vector<HeadWindow> heads;

  std::size_t window_size() const { return m + n + 1; }
  std::size_t head_count() const { return heads.empty() ? 1 : heads.size(); }
  HeadWindow head_window(std::size_t h) const { return heads.empty() ? HeadWindow{m, n} : heads.at(h); }

  DSAConfig for_head(std::size_t h) const {
    DSAConfig c = *this;
    const HeadWindow w = head_window(h);
    c.m = w.m;
    c.n = w.n;
    c.heads.clear();
    return c;
  }

  void validate() const {
    if (dilation < 1) throw ConfigError("DSAConfig: dilation must be >= 1");
    if (head_dim < 1) throw ConfigError("DSAConfig: head_dim must be >= 1");
  }
};

// Four symmetric heads plus four skewed heads with m = 0, 1, 3, 4 and n = 4 - m.
inline std::vector<HeadWindow> paper_head_windows() {
  return {{2, 2}, {2, 2}, {2, 2}, {2, 2}, {0, 4}, {1, 3}, {3, 1}, {4, 0}};
}

// True when key j is inside the dilated window of query i.
inline bool attainable(std::size_t i, std::size_t j, const DSAConfig& cfg) {
  const auto d = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(i);
  const auto r = static_cast<std::ptrdiff_t>(cfg.dilation);
  if (d % r != 0) return false;
  const std::ptrdiff_t k = d / r;
  return k >= -static_cast<std::ptrdiff_t>(cfg.m) && k <= static_cast<std::ptrdiff_t>(cfg.n);
}

struct RolledSequence {
  Tensor values;                                          // [..., T, l_win, d]
  std::shared_ptr<const std::vector<std::uint8_t>> valid;  // [T * l_win], 0 marks a pad cell
};

// values[..., i, k, :] = x[..., i + r*(k - m), :] where that index is inside [0, T).
//
// Pads m*r zeros in front and n*r behind, makes l_win copies each rolled r
// steps further, stacks them on a new axis and keeps the first T rows. The
// validity marker travels through the same pad and roll.
inline RolledSequence pad_and_roll(const Tensor& x, const DSAConfig& cfg) {
  cfg.validate();
  if (x.rank() < 2) throw ShapeError("pad_and_roll: expects [..., T, d]");
  const std::size_t T = x.dim(x.rank() - 2);
  const std::size_t r = cfg.dilation;
  const std::size_t L = cfg.window_size();

  const Tensor padded = pad_axis(x, -2, cfg.m * r, cfg.n * r, 0.0);
  std::vector<Tensor> copies;
  copies.reserve(L);
  for (std::size_t k = 0; k < L; ++k) copies.push_back(roll(padded, -2, -static_cast<std::ptrdiff_t>(k * r)));
  RolledSequence out;
  out.values = narrow(stack(copies, -2), -3, 0, T);

  auto valid = std::make_shared<std::vector<std::uint8_t>>(T * L);
  {
    NoGradGuard guard;
    const Tensor marker = pad_axis(Tensor::full({T}, 1.0), 0, cfg.m * r, cfg.n * r, 0.0);
    for (std::size_t k = 0; k < L; ++k) {
      const Tensor rolled = roll(marker, 0, -static_cast<std::ptrdiff_t>(k * r));
      for (std::size_t i = 0; i < T; ++i) (*valid)[i * L + k] = rolled.data()[i] != 0.0;
    }
  }
  out.valid = std::move(valid);
  return out;
}

struct AttentionResult {
  Tensor output;   // [..., T, d]
  Tensor weights;  // [..., T, l_win] for the kernel, [..., T, T] for the dense reference
};

// Windowed attention over q, k, v of shape [..., T, d] with an optional
// relative-position term. `bias` holds one d-vector per window offset
// ([l_win, d]); it enters the logits as Q_i . a_k.
inline AttentionResult dsa_forward(const Tensor& q, const Tensor& k, const Tensor& v, const DSAConfig& cfg,
                                   const Tensor& bias = {}) {
  if (q.rank() < 2 || k.shape() != q.shape() || v.shape() != q.shape())
    throw ShapeError("dsa_forward: Q, K, V must share shape [..., T, d]");
  const std::size_t T = q.dim(q.rank() - 2), d = q.dim(q.rank() - 1), L = cfg.window_size();
  const std::size_t batch = q.numel() / (T * d);
  const RolledSequence keys = pad_and_roll(k, cfg);
  const RolledSequence values = pad_and_roll(v, cfg);

  Tensor kb = keys.values;
  if (bias.defined()) {
    if (bias.shape() != Shape{L, d}) throw ShapeError("dsa_forward: relative bias must be [l_win, d]");
    kb = add(kb, bias);
  }
  Shape q1 = q.shape();
  q1.insert(q1.end() - 1, 1);  // [..., T, 1, d]
  Tensor logits = scale(sum_axis(mul(reshape(q, q1), kb), -1), 1.0 / std::sqrt(static_cast<double>(d)));
  auto valid = keys.valid;
  if (batch > 1) {
    auto tiled = std::make_shared<std::vector<std::uint8_t>>();
    tiled->reserve(batch * T * L);
    for (std::size_t b = 0; b < batch; ++b) tiled->insert(tiled->end(), valid->begin(), valid->end());
    valid = std::move(tiled);
  }
  logits = masked_fill(logits, valid);
  Tensor p = softmax_lastdim(logits);
  Shape p1 = p.shape();
  p1.push_back(1);  // [..., T, l_win, 1]
  Tensor z = sum_axis(mul(reshape(p, p1), values.values), -2);
  return {z, p};
}

namespace reference {

// Dense masked attention: O(T^2) time and memory. Test oracle only.
inline AttentionResult masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const DSAConfig& cfg) {
  if (q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape())
    throw ShapeError("masked_attention: Q, K, V must share shape [T, d]");
  const std::size_t T = q.dim(0), d = q.dim(1);
  auto keep = std::make_shared<std::vector<std::uint8_t>>(T * T);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j) (*keep)[i * T + j] = attainable(i, j, cfg);
  const Tensor qs = scale(q, 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor logits = masked_fill(matmul(qs, transpose(k, 0, 1)), keep);
  Tensor p = softmax_lastdim(logits);
  return {matmul(p, v), p};
}

// Unmasked scaled dot-product attention.
inline AttentionResult full_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  const std::size_t d = q.dim(q.rank() - 1);
  const Tensor qs = scale(q, 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor p = softmax_lastdim(matmul(qs, transpose(k, -1, -2)));
  return {matmul(p, v), p};
}

}  // namespace reference

// Projections of one attention sublayer. `relative` holds one [l_win, d_f]
// table per head; it is empty for attention without positional terms.
struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  std::vector<Tensor> relative;

  static AttentionParams init(std::size_t d_model, const std::vector<HeadWindow>& windows, std::size_t head_dim,
                              bool with_relative, std::mt19937_64& rng) {
    AttentionParams p;
    auto proj = [&](Tensor& w, Tensor& b) {
      w = init_uniform({d_model, d_model}, d_model, rng);
      b = Tensor::zeros({d_model}).set_requires_grad();
    };
    proj(p.wq, p.bq);
    proj(p.wk, p.bk);
    proj(p.wv, p.bv);
    proj(p.wo, p.bo);
    if (with_relative)
      for (const HeadWindow& w : windows) p.relative.push_back(init_uniform({w.size(), head_dim}, head_dim, rng));
    return p;
  }
};

struct MultiHeadResult {
  Tensor output;                // same shape as the input
  std::vector<Tensor> weights;  // index b * heads + h, each [T, l_win]
};

// Multi-head DSA over x[T, d_model] or a batch of sequences x[B, T, d_model].
inline MultiHeadResult multi_head_dsa(const Tensor& x, const AttentionParams& p, const DSAConfig& cfg) {
  cfg.validate();
  const bool batched = x.rank() == 3;
  if (!batched && x.rank() != 2) throw ShapeError("multi_head_dsa: expects [T, D] or [B, T, D]");
  const Tensor xb = batched ? x : reshape(x, {1, x.dim(0), x.dim(1)});
  const std::size_t B = xb.dim(0), T = xb.dim(1), D = xb.dim(2);
  const std::size_t H = cfg.head_count(), d = cfg.head_dim;
  if (H * d != D)
    throw ConfigError("multi_head_dsa: d_model " + std::to_string(D) + " != heads " + std::to_string(H) +
                      " x head_dim " + std::to_string(d));
  if (!p.relative.empty() && p.relative.size() != H) throw ConfigError("multi_head_dsa: one relative table per head");

  // [B, T, D] -> [B, H, T, d]
  auto split = [&](const Tensor& t) { return permute(reshape(t, {B, T, H, d}), {0, 2, 1, 3}); };
  const Tensor q = split(linear(xb, p.wq, p.bq));
  const Tensor k = split(linear(xb, p.wk, p.bk));
  const Tensor v = split(linear(xb, p.wv, p.bv));

  MultiHeadResult result;
  result.weights.resize(B * H);
  std::vector<Tensor> heads;
  heads.reserve(H);
  for (std::size_t h = 0; h < H; ++h) {
    auto pick = [&](const Tensor& t) { return reshape(narrow(t, 1, h, 1), {B, T, d}); };
    const Tensor bias = p.relative.empty() ? Tensor{} : p.relative[h];
    AttentionResult a = dsa_forward(pick(q), pick(k), pick(v), cfg.for_head(h), bias);
    heads.push_back(a.output);
    // Weight traces are kept as plain values.
    NoGradGuard guard;
    const std::size_t L = a.weights.dim(2);
    for (std::size_t b = 0; b < B; ++b) result.weights[b * H + h] = reshape(narrow(a.weights.detach(), 0, b, 1), {T, L});
  }
  // H x [B, T, d] -> [B, T, H*d]
  Tensor z = permute(stack(heads, 1), {0, 2, 1, 3});
  z = linear(reshape(z, {B, T, D}), p.wo, p.bo);
  result.output = batched ? z : reshape(z, {T, D});
  return result;
}

struct LayerGeometry {
  std::vector<HeadWindow> heads;
  std::size_t dilation = 1;
};

struct ReceptiveField {
  std::size_t frames = 0;
  double seconds = 0.0;
};

// Span of input frames reaching one output frame: 1 + sum_l (m_l + n_l) * r_l,
// taking the widest head of every layer.
inline ReceptiveField receptive_field(std::span<const LayerGeometry> layers, double fps) {
  if (layers.empty()) throw ContractError("receptive_field: need at least one layer");
  if (!(fps > 0.0)) throw ContractError("receptive_field: fps must be positive");
  std::size_t frames = 1;
  for (const LayerGeometry& layer : layers) {
    std::size_t widest = 0;
    for (const HeadWindow& w : layer.heads) widest = std::max(widest, w.m + w.n);
    frames += widest * layer.dilation;
  }
  return {frames, static_cast<double>(frames) / fps};
}

}  // namespace beatkit
