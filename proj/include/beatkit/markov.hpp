#pragma once

// Temporal attention read as Markov transitions over frame positions. Each
// TTL contributes a one-step matrix; products over layers give the L-step
// transition.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "beatkit/encoder.hpp"
#include "beatkit/error.hpp"

namespace beatkit {

inline constexpr std::size_t kMaxMarkovFrames = 2048;

struct TransitionMatrix {
  std::size_t size = 0;
  std::vector<double> values;  // row-major size x size
  std::size_t steps = 1;
  std::string provenance;  // e.g. "ttl2/c2/avg", or "first..last" for products

  double operator()(std::size_t i, std::size_t j) const { return values[i * size + j]; }
  double& operator()(std::size_t i, std::size_t j) { return values[i * size + j]; }

  static TransitionMatrix zeros(std::size_t T) {
    TransitionMatrix m;
    m.size = T;
    m.values.assign(T * T, 0.0);
    return m;
  }
  static TransitionMatrix identity(std::size_t T) {
    TransitionMatrix m = zeros(T);
    for (std::size_t i = 0; i < T; ++i) m(i, i) = 1.0;
    return m;
  }

  double row_sum(std::size_t i) const {
    double s = 0.0;
    for (std::size_t j = 0; j < size; ++j) s += (*this)(i, j);
    return s;
  }
  std::size_t row_nonzeros(std::size_t i) const {
    std::size_t n = 0;
    for (std::size_t j = 0; j < size; ++j) n += (*this)(i, j) != 0.0;
    return n;
  }
  // Largest |row sum - 1| over all rows.
  double stochastic_error() const {
    double e = 0.0;
    for (std::size_t i = 0; i < size; ++i) e = std::max(e, std::abs(row_sum(i) - 1.0));
    return e;
  }
};

// Scatter windowed weights [T, l_win] into a dense matrix. Slot k of row i
// holds key i + (k - m) * r; slots that fall outside the sequence carry zero
// weight after masking.
inline TransitionMatrix densify_window(const Tensor& weights, const HeadWindow& w, std::size_t dilation) {
  if (weights.rank() != 2 || weights.dim(1) != w.size())
    throw ShapeError("densify_window: expected [T, " + std::to_string(w.size()) + "] weights, got " +
                     to_string(weights.shape()));
  const std::size_t T = weights.dim(0), L = w.size();
  if (T > kMaxMarkovFrames) throw ContractError("densify_window: T exceeds the dense cap of 2048 frames");
  TransitionMatrix P = TransitionMatrix::zeros(T);
  const auto& a = weights.data();
  const auto r = static_cast<std::ptrdiff_t>(dilation), m = static_cast<std::ptrdiff_t>(w.m);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t k = 0; k < L; ++k) {
      const std::ptrdiff_t j = static_cast<std::ptrdiff_t>(i) + (static_cast<std::ptrdiff_t>(k) - m) * r;
      if (j < 0 || j >= static_cast<std::ptrdiff_t>(T)) continue;
      P(i, static_cast<std::size_t>(j)) += a[i * L + k];
    }
  return P;
}

// One-step matrix of TTL `layer` for one channel; head = nullopt averages the
// heads.
inline TransitionMatrix layer_attention_matrix(const EncoderOutput& out, const EncoderConfig& cfg, std::size_t layer,
                                               std::size_t channel, std::optional<std::size_t> head = std::nullopt) {
  if (layer >= out.attention.size())
    throw ContractError("layer_attention_matrix: layer " + std::to_string(layer) + " out of range (model has " +
                        std::to_string(out.attention.size()) + " temporal layers)");
  const DSAConfig dsa = cfg.ttl_attention(layer);
  const std::size_t H = dsa.head_count();
  const auto& weights = out.attention[layer];
  if (channel * H >= weights.size()) throw ContractError("layer_attention_matrix: channel out of range");
  if (head && *head >= H) throw ContractError("layer_attention_matrix: head out of range");

  TransitionMatrix P;
  if (head) {
    P = densify_window(weights[channel * H + *head], dsa.head_window(*head), dsa.dilation);
  } else {
    for (std::size_t h = 0; h < H; ++h) {
      const TransitionMatrix Ph = densify_window(weights[channel * H + h], dsa.head_window(h), dsa.dilation);
      if (h == 0)
        P = Ph;
      else
        for (std::size_t k = 0; k < P.values.size(); ++k) P.values[k] += Ph.values[k];
    }
    for (double& v : P.values) v /= static_cast<double>(H);
  }
  P.steps = 1;
  P.provenance = "ttl" + std::to_string(layer) + "/c" + std::to_string(channel) + "/" +
                 (head ? "head" + std::to_string(*head) : std::string("avg"));
  return P;
}

// Runs the model once (no tape) and returns the one-step matrix of every TTL.
inline std::vector<TransitionMatrix> attention_matrices(const DemixedClip& clip, const Model& model,
                                                        std::size_t channel,
                                                        std::optional<std::size_t> head = std::nullopt) {
  if (clip.frames() > kMaxMarkovFrames)
    throw ContractError("attention_matrices: clip has " + std::to_string(clip.frames()) +
                        " frames, dense export is capped at 2048");
  NoGradGuard guard;
  const EncoderOutput out = encoder_forward(clip, model);
  std::vector<TransitionMatrix> ms;
  for (std::size_t l = 0; l < out.attention.size(); ++l)
    ms.push_back(layer_attention_matrix(out, model.config, l, channel, head));
  return ms;
}

inline TransitionMatrix layer_attention_matrix(std::size_t layer, const DemixedClip& clip, const Model& model,
                                               std::size_t channel, std::optional<std::size_t> head = std::nullopt) {
  if (layer >= model.config.n_ttl) throw ContractError("layer_attention_matrix: layer out of range");
  return attention_matrices(clip, model, channel, head).at(layer);
}

// P^(L) = P^1 P^2 ... P^L. Rows of the right factor are visited sparsely,
// which keeps each step near O(T^2 * l_win) while the one-step matrices are
// banded.
inline TransitionMatrix multi_step_product(std::span<const TransitionMatrix> ms) {
  if (ms.empty()) throw ContractError("multi_step_product: need at least one matrix");
  const std::size_t T = ms[0].size;
  for (const auto& m : ms)
    if (m.size != T || m.values.size() != T * T) throw ShapeError("multi_step_product: dimension mismatch");
  TransitionMatrix acc = ms[0];
  for (std::size_t l = 1; l < ms.size(); ++l) {
    const TransitionMatrix& B = ms[l];
    std::vector<std::vector<std::pair<std::size_t, double>>> rows(T);
    for (std::size_t k = 0; k < T; ++k)
      for (std::size_t j = 0; j < T; ++j)
        if (B(k, j) != 0.0) rows[k].emplace_back(j, B(k, j));
    TransitionMatrix next = TransitionMatrix::zeros(T);
    for (std::size_t i = 0; i < T; ++i) {
      double* out = &next.values[i * T];
      for (std::size_t k = 0; k < T; ++k) {
        const double a = acc(i, k);
        if (a == 0.0) continue;
        for (const auto& [j, b] : rows[k]) out[j] += a * b;
      }
    }
    acc = std::move(next);
  }
  acc.steps = ms.size();
  acc.provenance = ms.size() == 1 ? ms[0].provenance : ms.front().provenance + ".." + ms.back().provenance;
  return acc;
}

// Total incoming probability per frame: sum over rows of each column.
inline std::vector<double> column_mass(const TransitionMatrix& P) {
  std::vector<double> c(P.size, 0.0);
  for (std::size_t i = 0; i < P.size; ++i)
    for (std::size_t j = 0; j < P.size; ++j) c[j] += P(i, j);
  return c;
}

enum class MatrixFormat { csv, pgm };

inline std::string export_file_name(std::size_t steps, std::optional<std::size_t> head, MatrixFormat f) {
  return "P_L" + std::to_string(steps) + "_head" + (head ? std::to_string(*head) : std::string("avg")) +
         (f == MatrixFormat::csv ? ".csv" : ".pgm");
}

inline std::string matrix_to_csv(const TransitionMatrix& P) {
  std::string s;
  char buf[32];
  for (std::size_t i = 0; i < P.size; ++i) {
    for (std::size_t j = 0; j < P.size; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", P(i, j));
      if (j) s += ',';
      s += buf;
    }
    s += '\n';
  }
  return s;
}

inline TransitionMatrix matrix_from_csv(const std::string& text) {
  TransitionMatrix P;
  std::size_t rows = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::size_t start = pos, cols = 0;
    while (start <= eol) {
      std::size_t comma = text.find(',', start);
      if (comma == std::string::npos || comma > eol) comma = eol;
      const std::string cell = text.substr(start, comma - start);
      try {
        std::size_t used = 0;
        P.values.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw DataError("");
      } catch (const std::exception&) {
        throw DataError("matrix csv: bad cell '" + cell + "' on row " + std::to_string(rows + 1));
      }
      ++cols;
      start = comma + 1;
    }
    if (rows == 0) P.size = cols;
    if (cols != P.size) throw DataError("matrix csv: ragged row " + std::to_string(rows + 1));
    ++rows;
    pos = eol + 1;
  }
  if (rows != P.size) throw DataError("matrix csv: not square");
  return P;
}

// 8-bit binary graymap, every row scaled by its own maximum.
inline std::string matrix_to_pgm(const TransitionMatrix& P) {
  std::string s = "P5\n" + std::to_string(P.size) + " " + std::to_string(P.size) + "\n255\n";
  for (std::size_t i = 0; i < P.size; ++i) {
    double mx = 0.0;
    for (std::size_t j = 0; j < P.size; ++j) mx = std::max(mx, P(i, j));
    for (std::size_t j = 0; j < P.size; ++j) {
      const double v = mx > 0.0 ? P(i, j) / mx : 0.0;
      s += static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    }
  }
  return s;
}

inline void export_matrix(const TransitionMatrix& P, const std::string& path, MatrixFormat f) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  const std::string bytes = f == MatrixFormat::csv ? matrix_to_csv(P) : matrix_to_pgm(P);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace beatkit
