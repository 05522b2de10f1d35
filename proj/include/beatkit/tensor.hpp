#pragma once

// Dense float64 tensors with a reverse-mode autodiff tape.
//
// A Tensor is a cheap handle to a shared node holding shape, value and an
// optional gradient buffer. Every differentiable operation appends a record to
// the thread-local Tape when gradient recording is enabled and at least one
// input requires a gradient; backward() replays the tape in reverse.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "beatkit/error.hpp"

namespace beatkit {

using Shape = std::vector<std::size_t>;

inline constexpr double kMaskSentinel = -std::numeric_limits<double>::infinity();

// Byte accounting for tensor storage. Used by the DSA benchmark to compare
// peak memory of the windowed kernel and the masked reference.
namespace memory {
namespace detail {
inline std::atomic<std::int64_t> live{0};
inline std::atomic<std::int64_t> peak{0};

inline void on_alloc(std::int64_t bytes) {
  const std::int64_t now = live.fetch_add(bytes) + bytes;
  std::int64_t seen = peak.load();
  while (now > seen && !peak.compare_exchange_weak(seen, now)) {
  }
}
inline void on_free(std::int64_t bytes) { live.fetch_sub(bytes); }
}  // namespace detail

inline std::int64_t live_bytes() { return detail::live.load(); }
inline std::int64_t peak_bytes() { return detail::peak.load(); }
inline void reset_peak() { detail::peak.store(detail::live.load()); }

template <class T>
struct TrackingAllocator {
  using value_type = T;
  TrackingAllocator() = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    T* p = std::allocator<T>{}.allocate(n);
    detail::on_alloc(static_cast<std::int64_t>(n * sizeof(T)));
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    detail::on_free(static_cast<std::int64_t>(n * sizeof(T)));
    std::allocator<T>{}.deallocate(p, n);
  }
  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};
}  // namespace memory

using Buffer = std::vector<double, memory::TrackingAllocator<double>>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;

  double* grad_data() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad.data();
  }
};

using NodePtr = std::shared_ptr<Node>;

inline void check_shape(const Shape& shape) {
  for (std::size_t d : shape)
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
}

}  // namespace detail

// Ordered list of recorded operations. Inputs of a record always precede it.
class Tape {
 public:
  struct Record {
    const char* op = "";
    std::vector<detail::NodePtr> inputs;
    detail::NodePtr output;
    std::function<void(const Record&)> backward;
  };

  void record(Record r) { records_.push_back(std::move(r)); }
  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  void backward(const detail::NodePtr& loss) {
    loss->grad_data()[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward(*it);
    }
    clear();
  }

  static Tape& active() {
    thread_local Tape tape;
    return tape;
  }

 private:
  std::vector<Record> records_;
};

inline bool& grad_recording() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_recording()) { grad_recording() = false; }
  ~NoGradGuard() { grad_recording() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, Buffer values) {
    detail::check_shape(shape);
    if (beatkit::numel(shape) != values.size())
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                       to_string(shape));
    for (double v : values)
      if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
        throw NumericError("tensor values must be finite or the mask sentinel");
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return Tensor(std::move(node));
  }
  static Tensor from(Shape shape, const std::vector<double>& values) {
    return from(std::move(shape), Buffer(values.begin(), values.end()));
  }
  static Tensor full(Shape shape, double value) {
    const std::size_t n = beatkit::numel(shape);
    return from(std::move(shape), Buffer(n, value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor scalar(double value) { return from(Shape{}, Buffer{value}); }
  static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Buffer v(beatkit::numel(shape));
    for (double& x : v) x = dist(rng);
    return from(std::move(shape), std::move(v));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Direct mutation is meant for leaves (parameter updates, test setup).
  std::span<double> mutable_data() { return node_->value; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }
  double at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeError("index rank mismatch");
    std::size_t flat = 0, axis = 0;
    for (std::size_t i : index) {
      if (i >= node_->shape[axis]) throw ShapeError("index out of range");
      flat = flat * node_->shape[axis++] + i;
    }
    return node_->value[flat];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Same values, no history, no gradient.
  Tensor detach() const { return from(shape(), node_->value); }

  const detail::NodePtr& node() const { return node_; }

 private:
  detail::NodePtr node_;
};

// Runs the active tape backward from a scalar loss and clears it.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ContractError("backward() needs a scalar loss, got " + to_string(loss.shape()));
  if (!loss.requires_grad()) throw ContractError("backward(): loss is not connected to any tensor requiring grad");
  Tape::active().backward(loss.node());
}

namespace detail {

using BackwardFn = std::function<void(const Tape::Record&)>;

inline void check_output(const Buffer& v, const char* op) {
  for (double x : v)
    if (std::isnan(x) || x == std::numeric_limits<double>::infinity())
      throw NumericError(std::string(op) + ": produced a non-finite value");
}

// Builds the output tensor of an op and records it on the tape when needed.
inline Tensor make_op(const char* op, Shape shape, Buffer value, std::vector<Tensor> inputs,
                      BackwardFn backward) {
  check_output(value, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (grad_recording())
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    node->requires_grad = true;
    Tape::Record rec;
    rec.op = op;
    rec.inputs.reserve(inputs.size());
    for (const Tensor& t : inputs) rec.inputs.push_back(t.node());
    rec.output = node;
    rec.backward = std::move(backward);
    Tape::active().record(std::move(rec));
  }
  return Tensor(std::move(node));
}

// Gradient buffer of record input i, or nullptr when it needs none.
inline double* input_grad(const Tape::Record& rec, std::size_t i) {
  Node& n = *rec.inputs[i];
  return n.requires_grad ? n.grad_data() : nullptr;
}

inline std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank) {
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range");
  return static_cast<std::size_t>(axis);
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};
inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// True when `small`, leading ones stripped, equals the trailing dims of `big`.
inline bool is_trailing_block(const Shape& big, const Shape& small) {
  std::size_t lead = 0;
  while (lead < small.size() && small[lead] == 1) ++lead;
  const std::size_t k = small.size() - lead;
  if (k > big.size()) return false;
  return std::equal(small.begin() + static_cast<std::ptrdiff_t>(lead), small.end(),
                    big.end() - static_cast<std::ptrdiff_t>(k));
}

inline std::vector<std::size_t> broadcast_strides(const Shape& out, const Shape& in) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t src = in.size() - 1 - i;
    const std::size_t dst = out.size() - 1 - i;
    strides[dst] = in[src] == 1 ? 0 : stride;
    stride *= in[src];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) for every element of the broadcast.
template <class F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const std::size_t n = numel(out);
  const std::size_t na = numel(a), nb = numel(b);
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  if (na == n && is_trailing_block(out, b)) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i % nb);
    return;
  }
  if (nb == n && is_trailing_block(out, a)) {
    for (std::size_t i = 0; i < n; ++i) f(i, i % na, i);
    return;
  }
  const auto sa = broadcast_strides(out, a);
  const auto sb = broadcast_strides(out, b);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = out.size(); d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { add, sub, mul, div };

inline Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* op) {
  Shape out = broadcast_shapes(a.shape(), b.shape(), op);
  Buffer v(numel(out));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  switch (kind) {
    case BinaryKind::add:
      for_each_broadcast(out, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) { v[i] = pa[ia] + pb[ib]; });
      break;
    case BinaryKind::sub:
      for_each_broadcast(out, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) { v[i] = pa[ia] - pb[ib]; });
      break;
    case BinaryKind::mul:
      for_each_broadcast(out, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) { v[i] = pa[ia] * pb[ib]; });
      break;
    case BinaryKind::div:
      for_each_broadcast(out, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) { v[i] = pa[ia] / pb[ib]; });
      break;
  }
  return make_op(op, out, std::move(v), {a, b}, [kind, out](const Tape::Record& r) {
    const double* g = r.output->grad.data();
    const Node& na = *r.inputs[0];
    const Node& nb = *r.inputs[1];
    double* ga = input_grad(r, 0);
    double* gb = input_grad(r, 1);
    const double* va = na.value.data();
    const double* vb = nb.value.data();
    for_each_broadcast(out, na.shape, nb.shape, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      switch (kind) {
        case BinaryKind::add:
          if (ga) ga[ia] += g[i];
          if (gb) gb[ib] += g[i];
          break;
        case BinaryKind::sub:
          if (ga) ga[ia] += g[i];
          if (gb) gb[ib] -= g[i];
          break;
        case BinaryKind::mul:
          if (ga) ga[ia] += g[i] * vb[ib];
          if (gb) gb[ib] += g[i] * va[ia];
          break;
        case BinaryKind::div:
          if (ga) ga[ia] += g[i] / vb[ib];
          if (gb) gb[ib] -= g[i] * va[ia] / (vb[ib] * vb[ib]);
          break;
      }
    });
  });
}

// y = f(x) elementwise; dfdx(x, y) gives the local derivative.
template <class F, class D>
Tensor unary(const char* op, const Tensor& x, F f, D dfdx) {
  Buffer v(x.numel());
  const double* px = x.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(px[i]);
  return make_op(op, x.shape(), std::move(v), {x}, [dfdx](const Tape::Record& r) {
    double* gx = input_grad(r, 0);
    if (!gx) return;
    const double* g = r.output->grad.data();
    const double* xv = r.inputs[0]->value.data();
    const double* yv = r.output->value.data();
    for (std::size_t i = 0; i < r.output->value.size(); ++i) gx[i] += g[i] * dfdx(xv[i], yv[i]);
  });
}

// C[P,R] += op(A) * op(B), row-major, with optional transposes.
inline void gemm_acc(const double* A, const double* B, double* C, std::size_t P, std::size_t Q,
                     std::size_t R, bool trans_a, bool trans_b) {
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < P; ++i) {
      double* c = C + i * R;
      for (std::size_t k = 0; k < Q; ++k) {
        const double aik = A[i * Q + k];
        if (aik == 0.0) continue;
        const double* b = B + k * R;
        for (std::size_t j = 0; j < R; ++j) c[j] += aik * b[j];
      }
    }
  } else if (!trans_a && trans_b) {
    // B stored as [R,Q]
    for (std::size_t i = 0; i < P; ++i) {
      const double* a = A + i * Q;
      for (std::size_t j = 0; j < R; ++j) {
        const double* b = B + j * Q;
        double s = 0.0;
        for (std::size_t k = 0; k < Q; ++k) s += a[k] * b[k];
        C[i * R + j] += s;
      }
    }
  } else if (trans_a && !trans_b) {
    // A stored as [Q,P]
    for (std::size_t k = 0; k < Q; ++k) {
      const double* a = A + k * P;
      const double* b = B + k * R;
      for (std::size_t i = 0; i < P; ++i) {
        const double aki = a[i];
        if (aki == 0.0) continue;
        double* c = C + i * R;
        for (std::size_t j = 0; j < R; ++j) c[j] += aki * b[j];
      }
    }
  } else {
    throw ContractError("gemm_acc: double transpose unsupported");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy broadcasting)

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::add, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::sub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::mul, "mul"); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::div, "div"); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary("scale", x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}
inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary("add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}
inline Tensor operator*(const Tensor& x, double s) { return scale(x, s); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }
inline Tensor operator-(const Tensor& x) { return scale(x, -1.0); }

inline Tensor exp(const Tensor& x) {
  return detail::unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& x) {
  for (double v : x.data())
    if (!(v > 0.0)) throw NumericError("log: non-positive input");
  return detail::unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}
inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      "sigmoid", x,
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}
inline Tensor tanh(const Tensor& x) {
  return detail::unary("tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}
inline Tensor relu(const Tensor& x) {
  return detail::unary("relu", x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}
inline Tensor elu(const Tensor& x) {
  return detail::unary(
      "elu", x, [](double v) { return v > 0 ? v : std::expm1(v); },
      [](double v, double y) { return v > 0 ? 1.0 : y + 1.0; });
}
// tanh approximation of GELU
inline Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return detail::unary(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))); },
      [](double v, double) {
        const double u = c * (v + 0.044715 * v * v * v);
        const double t = std::tanh(u);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * v * v);
      });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_op("sum", Shape{}, Buffer{s}, {x}, [](const Tape::Record& r) {
    double* gx = detail::input_grad(r, 0);
    if (!gx) return;
    const double g = r.output->grad[0];
    for (std::size_t i = 0; i < r.inputs[0]->value.size(); ++i) gx[i] += g;
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// Sums out one axis; the axis is removed from the shape.
inline Tensor sum_axis(const Tensor& x, std::ptrdiff_t axis_in) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  const auto s = detail::split_at(x.shape(), axis);
  Shape out = x.shape();
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  Buffer v(s.outer * s.inner, 0.0);
  const double* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.extent; ++k) {
      const double* src = px + (o * s.extent + k) * s.inner;
      double* dst = v.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  return detail::make_op("sum_axis", out, std::move(v), {x}, [s](const Tape::Record& r) {
    double* gx = detail::input_grad(r, 0);
    if (!gx) return;
    const double* g = r.output->grad.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.extent; ++k) {
        double* dst = gx + (o * s.extent + k) * s.inner;
        const double* src = g + o * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
      }
  });
}

inline Tensor mean_axis(const Tensor& x, std::ptrdiff_t axis) {
  const std::size_t a = detail::normalize_axis(axis, x.rank());
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(x.dim(a)));
}

// ---------------------------------------------------------------------------
// Shape manipulation. Views are realized by copy.

inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::check_shape(shape);
  if (numel(shape) != x.numel())
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  Buffer v(x.data().begin(), x.data().end());
  return detail::make_op("reshape", std::move(shape), std::move(v), {x}, [](const Tape::Record& r) {
    double* gx = detail::input_grad(r, 0);
    if (!gx) return;
    const Buffer& g = r.output->grad;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t rank = x.rank();
  if (perm.size() != rank) throw ShapeError("permute: rank mismatch");
  std::vector<bool> seen(rank, false);
  for (std::size_t p : perm) {
    if (p >= rank || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out(rank);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out[i] = x.dim(perm[i]);
    src_stride[i] = in_strides[perm[i]];
  }
  // map[i] = source index of output element i
  const std::size_t n = x.numel();
  auto map = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*map)[i] = src;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < out[d]) break;
      src -= src_stride[d] * out[d];
      idx[d] = 0;
    }
  }
  Buffer v(n);
  const double* px = x.data().data();
  for (std::size_t i = 0; i < n; ++i) v[i] = px[(*map)[i]];
  return detail::make_op("permute", out, std::move(v), {x}, [map](const Tape::Record& r) {
    double* gx = detail::input_grad(r, 0);
    if (!gx) return;
    const Buffer& g = r.output->grad;
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*map)[i]] += g[i];
  });
}

inline Tensor transpose(const Tensor& x, std::ptrdiff_t a0, std::ptrdiff_t a1) {
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[detail::normalize_axis(a0, x.rank())], perm[detail::normalize_axis(a1, x.rank())]);
  return permute(x, perm);
}

inline Tensor narrow(const Tensor& x, std::ptrdiff_t axis_in, std::size_t start, std::size_t length) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  if (length == 0 || start + length > x.dim(axis)) throw ShapeError("narrow: range out of bounds");
  const auto s = detail::split_at(x.shape(), axis);
  Shape out = x.shape();
  out[axis] = length;
  Buffer v(s.outer * length * s.inner);
  const double* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(px + (o * s.extent + start) * s.inner, length * s.inner, v.data() + o * length * s.inner);
  return detail::make_op("narrow", out, std::move(v), {x}, [s, start, length](const Tape::Record& r) {
    double* gx = detail::input_grad(r, 0);
    if (!gx) return;
    const double* g = r.output->grad.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      double* dst = gx + (o * s.extent + start) * s.inner;
      const double* src = g + o * length * s.inner;
      for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
    }
  });
}

inline Tensor concat(const std::vector<Tensor>& xs, std::ptrdiff_t axis_in) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const std::size_t axis = detail::normalize_axis(axis_in, xs[0].rank());
  Shape out = xs[0].shape();
  out[axis] = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor& t : xs) {
    if (t.rank() != out.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < out.size(); ++d)
      if (d != axis && t.dim(d) != out[d]) throw ShapeError("concat: shape mismatch");
    offsets.push_back(out[axis]);
    out[axis] += t.dim(axis);
  }
  const auto so = detail::split_at(out, axis);
  Buffer v(numel(out));
  for (std::size_t j = 0; j < xs.size(); ++j) {
    const auto sj = detail::split_at(xs[j].shape(), axis);
    const double* px = xs[j].data().data();
    for (std::size_t o = 0; o < so.outer; ++o)
      std::copy_n(px + o * sj.extent * sj.inner, sj.extent * sj.inner,
                  v.data() + (o * so.extent + offsets[j]) * so.inner);
  }
  return detail::make_op("concat", out, std::move(v), xs, [so, offsets](const Tape::Record& r) {
    const double* g = r.output->grad.data();
    for (std::size_t j = 0; j < r.inputs.size(); ++j) {
      double* gx = detail::input_grad(r, j);
      if (!gx) continue;
      const std::size_t extent = r.inputs[j]->shape.empty() ? 1 : r.inputs[j]->value.size() / (so.outer * so.inner);
      for (std::size_t o = 0; o < so.outer; ++o) {
        const double* src = g + (o * so.extent + offsets[j]) * so.inner;
        double* dst = gx + o * extent * so.inner;
        for (std::size_t i = 0; i < extent * so.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

// Stacks equally-shaped tensors along a new axis.
inline Tensor stack(const std::vector<Tensor>& xs, std::ptrdiff_t axis_in) {
  if (xs.empty()) throw ShapeError("stack: no inputs");
  const std::ptrdiff_t rank = static_cast<std::ptrdiff_t>(xs[0].rank());
  if (axis_in < 0) axis_in += rank + 1;
  if (axis_in < 0 || axis_in > rank) throw ShapeError("stack: axis out of range");
  const auto axis = static_cast<std::size_t>(axis_in);
  std::vector<Tensor> expanded;
  expanded.reserve(xs.size());
  for (const Tensor& t : xs) {
    if (t.shape() != xs[0].shape()) throw ShapeError("stack: shape mismatch");
    Shape s = t.shape();
    s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), 1);
    expanded.push_back(reshape(t, s));
  }
  return concat(expanded, static_cast<std::ptrdiff_t>(axis));
}

// Cyclic shift: out[i] = x[(i - shift) mod n] along `axis`.
inline Tensor roll(const Tensor& x, std::ptrdiff_t axis_in, std::ptrdiff_t shift) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  const auto s = detail::split_at(x.shape(), axis);
  const auto n = static_cast<std::ptrdiff_t>(s.extent);
  const std::size_t sh = static_cast<std::size_t>(((shift % n) + n) % n);
  Buffer v(x.numel());
  const double* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.extent; ++k)
      std::copy_n(px + (o * s.extent + k) * s.inner, s.inner,
                  v.data() + (o * s.extent + (k + sh) % s.extent) * s.inner);
  return detail::make_op("roll", x.shape(), std::move(v), {x}, [s, sh](const Tape::Record& r) {
    double* gx = detail::input_grad(r, 0);
    if (!gx) return;
    const double* g = r.output->grad.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.extent; ++k) {
        double* dst = gx + (o * s.extent + k) * s.inner;
        const double* src = g + (o * s.extent + (k + sh) % s.extent) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
      }
  });
}

inline Tensor pad_axis(const Tensor& x, std::ptrdiff_t axis_in, std::size_t left, std::size_t right,
                       double value = 0.0) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  if (!std::isfinite(value)) throw ContractError("pad_axis: pad value must be finite");
  const auto s = detail::split_at(x.shape(), axis);
  Shape out = x.shape();
  out[axis] += left + right;
  const std::size_t ext = out[axis];
  Buffer v(numel(out), value);
  const double* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(px + o * s.extent * s.inner, s.extent * s.inner, v.data() + (o * ext + left) * s.inner);
  return detail::make_op("pad_axis", out, std::move(v), {x}, [s, ext, left](const Tape::Record& r) {
    double* gx = detail::input_grad(r, 0);
    if (!gx) return;
    const double* g = r.output->grad.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      const double* src = g + (o * ext + left) * s.inner;
      double* dst = gx + o * s.extent * s.inner;
      for (std::size_t i = 0; i < s.extent * s.inner; ++i) dst[i] += src[i];
    }
  });
}

// Replaces cells whose keep flag is 0 with `value` (default: the mask sentinel).
inline Tensor masked_fill(const Tensor& x, std::shared_ptr<const std::vector<std::uint8_t>> keep,
                          double value = kMaskSentinel) {
  if (keep->size() != x.numel()) throw ShapeError("masked_fill: mask size mismatch");
  Buffer v(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!(*keep)[i]) v[i] = value;
  return detail::make_op("masked_fill", x.shape(), std::move(v), {x}, [keep](const Tape::Record& r) {
    double* gx = detail::input_grad(r, 0);
    if (!gx) return;
    const Buffer& g = r.output->grad;
    for (std::size_t i = 0; i < g.size(); ++i)
      if ((*keep)[i]) gx[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

// Batched matrix product with numpy-style broadcasting of leading dims.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul: operands need rank >= 2");
  const std::size_t P = a.dim(a.rank() - 2), Q = a.dim(a.rank() - 1);
  const std::size_t Qb = b.dim(b.rank() - 2), R = b.dim(b.rank() - 1);
  if (Q != Qb)
    throw ShapeError("matmul: inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  const Shape batch = detail::broadcast_shapes(a_batch, b_batch, "matmul");
  Shape out = batch;
  out.push_back(P);
  out.push_back(R);

  // Flattened batch index pairs (a_batch_index, b_batch_index).
  auto pairs = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>();
  {
    const Shape bshape = batch.empty() ? Shape{1} : batch;
    const Shape as = a_batch.empty() ? Shape{1} : a_batch;
    const Shape bs = b_batch.empty() ? Shape{1} : b_batch;
    pairs->resize(numel(bshape));
    detail::for_each_broadcast(bshape, as, bs, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      (*pairs)[i] = {ia, ib};
    });
  }
  Buffer v(numel(out), 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  // b without batch dims and a contiguous: one tall GEMM.
  const bool fold = b_batch.empty() || numel(b_batch) == 1;
  if (fold && a_batch.size() >= b_batch.size()) {
    detail::gemm_acc(pa, pb, v.data(), pairs->size() * P, Q, R, false, false);
  } else {
    for (std::size_t i = 0; i < pairs->size(); ++i) {
      const auto [ia, ib] = (*pairs)[i];
      detail::gemm_acc(pa + ia * P * Q, pb + ib * Q * R, v.data() + i * P * R, P, Q, R, false, false);
    }
  }
  return detail::make_op("matmul", out, std::move(v), {a, b}, [pairs, P, Q, R](const Tape::Record& r) {
    const double* g = r.output->grad.data();
    const double* va = r.inputs[0]->value.data();
    const double* vb = r.inputs[1]->value.data();
    double* ga = detail::input_grad(r, 0);
    double* gb = detail::input_grad(r, 1);
    for (std::size_t i = 0; i < pairs->size(); ++i) {
      const auto [ia, ib] = (*pairs)[i];
      const double* gi = g + i * P * R;
      // dA = dC B^T ; dB = A^T dC
      if (ga) detail::gemm_acc(gi, vb + ib * Q * R, ga + ia * P * Q, P, R, Q, false, true);
      if (gb) detail::gemm_acc(va + ia * P * Q, gi, gb + ib * Q * R, Q, P, R, true, false);
    }
  });
}

// x[..., in] * w[in, out] + b[out]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() == 1) return add(reshape(matmul(reshape(x, {1, x.dim(0)}), w), {w.dim(1)}), b);
  return add(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Normalization

// Softmax over the last axis. Mask-sentinel entries map to exactly 0.
inline Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("softmax_lastdim: needs rank >= 1");
  const std::size_t n = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / n;
  Buffer v(x.numel());
  const double* px = x.data().data();
  for (std::size_t row = 0; row < rows; ++row) {
    const double* in = px + row * n;
    double* out = v.data() + row * n;
    double mx = kMaskSentinel;
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[j]);
    if (mx == kMaskSentinel) throw DegenerateSliceError("softmax_lastdim: every entry of a slice is masked");
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = in[j] == kMaskSentinel ? 0.0 : std::exp(in[j] - mx);
      total += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= total;
  }
  return detail::make_op("softmax_lastdim", x.shape(), std::move(v), {x}, [n, rows](const Tape::Record& r) {
    double* gx = detail::input_grad(r, 0);
    if (!gx) return;
    const double* g = r.output->grad.data();
    const double* y = r.output->value.data();
    for (std::size_t row = 0; row < rows; ++row) {
      const double* gr = g + row * n;
      const double* yr = y + row * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < n; ++j) gx[row * n + j] += yr[j] * (gr[j] - dot);
    }
  });
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t n = x.dim(x.rank() - 1);
  if (gain.numel() != n || bias.numel() != n) throw ShapeError("layer_norm: gain/bias must match last dimension");
  const std::size_t rows = x.numel() / n;
  auto xhat = std::make_shared<Buffer>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Buffer v(x.numel());
  const double* px = x.data().data();
  const double* pg = gain.data().data();
  const double* pb = bias.data().data();
  for (std::size_t row = 0; row < rows; ++row) {
    const double* in = px + row * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[row] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (in[j] - mu) * inv;
      (*xhat)[row * n + j] = h;
      v[row * n + j] = h * pg[j] + pb[j];
    }
  }
  return detail::make_op("layer_norm", x.shape(), std::move(v), {x, gain, bias},
                         [n, rows, xhat, inv_std](const Tape::Record& r) {
    const double* g = r.output->grad.data();
    const double* pg = r.inputs[1]->value.data();
    double* gx = detail::input_grad(r, 0);
    double* gg = detail::input_grad(r, 1);
    double* gb = detail::input_grad(r, 2);
    std::vector<double> dxhat(n);
    for (std::size_t row = 0; row < rows; ++row) {
      const double* gr = g + row * n;
      const double* hr = xhat->data() + row * n;
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (gg) gg[j] += gr[j] * hr[j];
        if (gb) gb[j] += gr[j];
        dxhat[j] = gr[j] * pg[j];
        s1 += dxhat[j];
        s2 += dxhat[j] * hr[j];
      }
      if (!gx) continue;
      const double k = (*inv_std)[row] / static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j)
        gx[row * n + j] += k * (static_cast<double>(n) * dxhat[j] - s1 - hr[j] * s2);
    }
  });
}

// Inverted dropout; identity when rate == 0.
inline Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must lie in [0,1)");
  if (rate == 0.0) return x;
  auto keep = std::make_shared<std::vector<double>>(x.numel());
  std::bernoulli_distribution coin(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  for (double& k : *keep) k = coin(rng) ? s : 0.0;
  Buffer v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.data()[i] * (*keep)[i];
  return detail::make_op("dropout", x.shape(), std::move(v), {x}, [keep](const Tape::Record& r) {
    double* gx = detail::input_grad(r, 0);
    if (!gx) return;
    const Buffer& g = r.output->grad;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*keep)[i];
  });
}

// ---------------------------------------------------------------------------
// Convolution front-end primitives

// 2D convolution with zero "same" padding: x[N,Ci,H,W], w[Co,Ci,KH,KW] (odd
// kernel sizes), b[Co] -> [N,Co,H,W].
inline Tensor conv2d_same(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d_same: expects rank-4 input and weight");
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  if (w.dim(1) != Ci) throw ShapeError("conv2d_same: input channel mismatch");
  if (KH % 2 == 0 || KW % 2 == 0) throw ShapeError("conv2d_same: kernel sizes must be odd");
  if (b.numel() != Co) throw ShapeError("conv2d_same: bias size mismatch");
  const auto ph = static_cast<std::ptrdiff_t>(KH / 2), pw = static_cast<std::ptrdiff_t>(KW / 2);

  // Calls body(input row, kw, first column, end column, column offset) for
  // every tap feeding output row ho.
  auto for_row_taps = [=](std::size_t ho, std::size_t kh, auto&& body) {
    const std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(ho) + static_cast<std::ptrdiff_t>(kh) - ph;
    if (hi < 0 || hi >= static_cast<std::ptrdiff_t>(H)) return;
    for (std::size_t kw = 0; kw < KW; ++kw) {
      const std::ptrdiff_t dw = static_cast<std::ptrdiff_t>(kw) - pw;
      const std::ptrdiff_t w0 = std::max<std::ptrdiff_t>(0, -dw);
      const std::ptrdiff_t w1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(W), static_cast<std::ptrdiff_t>(W) - dw);
      body(static_cast<std::size_t>(hi), kw, w0, w1, dw);
    }
  };

  Buffer v(N * Co * H * W);
  const double* px = x.data().data();
  const double* pwt = w.data().data();
  const double* pb = b.data().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Co; ++co)
      for (std::size_t ho = 0; ho < H; ++ho) {
        double* o = v.data() + ((n * Co + co) * H + ho) * W;
        std::fill_n(o, W, pb[co]);
        for (std::size_t ci = 0; ci < Ci; ++ci) {
          const double* in = px + (n * Ci + ci) * H * W;
          for (std::size_t kh = 0; kh < KH; ++kh)
            for_row_taps(ho, kh, [&](std::size_t hi, std::size_t kw, std::ptrdiff_t w0, std::ptrdiff_t w1, std::ptrdiff_t dw) {
              const double wv = pwt[((co * Ci + ci) * KH + kh) * KW + kw];
              const double* i = in + hi * W + dw;
              for (std::ptrdiff_t c = w0; c < w1; ++c) o[c] += wv * i[c];
            });
        }
      }
  return detail::make_op("conv2d_same", Shape{N, Co, H, W}, std::move(v), {x, w, b},
                         [=](const Tape::Record& r) {
    const double* g = r.output->grad.data();
    const double* xv = r.inputs[0]->value.data();
    const double* wv_all = r.inputs[1]->value.data();
    double* gx = detail::input_grad(r, 0);
    double* gw = detail::input_grad(r, 1);
    double* gb = detail::input_grad(r, 2);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t co = 0; co < Co; ++co) {
        const double* go = g + (n * Co + co) * H * W;
        if (gb) {
          double s = 0.0;
          for (std::size_t i = 0; i < H * W; ++i) s += go[i];
          gb[co] += s;
        }
        for (std::size_t ho = 0; ho < H; ++ho) {
          const double* gr = go + ho * W;
          for (std::size_t ci = 0; ci < Ci; ++ci) {
            const double* in = xv + (n * Ci + ci) * H * W;
            double* gin = gx ? gx + (n * Ci + ci) * H * W : nullptr;
            for (std::size_t kh = 0; kh < KH; ++kh)
              for_row_taps(ho, kh, [&](std::size_t hi, std::size_t kw, std::ptrdiff_t w0, std::ptrdiff_t w1, std::ptrdiff_t dw) {
                const std::size_t widx = ((co * Ci + ci) * KH + kh) * KW + kw;
                const double* ir = in + hi * W + dw;
                if (gw) {
                  double acc = 0.0;
                  for (std::ptrdiff_t c = w0; c < w1; ++c) acc += gr[c] * ir[c];
                  gw[widx] += acc;
                }
                if (gin) {
                  const double wv = wv_all[widx];
                  double* gi = gin + hi * W + dw;
                  for (std::ptrdiff_t c = w0; c < w1; ++c) gi[c] += wv * gr[c];
                }
              });
          }
        }
      }
  });
}

// Non-overlapping max pooling over the last axis. Ties pick the first cell.
inline Tensor max_pool_lastdim(const Tensor& x, std::size_t k) {
  const std::size_t n = x.dim(x.rank() - 1);
  if (k == 0 || n % k != 0)
    throw ShapeError("max_pool_lastdim: last dimension " + std::to_string(n) + " not divisible by " + std::to_string(k));
  Shape out = x.shape();
  out.back() = n / k;
  const std::size_t m = numel(out);
  auto argmax = std::make_shared<std::vector<std::size_t>>(m);
  Buffer v(m);
  const double* px = x.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t best = i * k;
    for (std::size_t j = 1; j < k; ++j)
      if (px[i * k + j] > px[best]) best = i * k + j;
    (*argmax)[i] = best;
    v[i] = px[best];
  }
  return detail::make_op("max_pool_lastdim", out, std::move(v), {x}, [argmax](const Tape::Record& r) {
    double* gx = detail::input_grad(r, 0);
    if (!gx) return;
    const Buffer& g = r.output->grad;
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
  });
}

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
inline Tensor init_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t = Tensor::uniform(std::move(shape), -bound, bound, rng);
  t.set_requires_grad(true);
  return t;
}

}  // namespace beatkit
