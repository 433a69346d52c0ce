#pragma once

// Dense float64 tensors with a tape-based reverse-mode autograd.
//
// Ops record onto the thread's active Tape (see RecordingScope) only when at
// least one input requires a gradient. With no active tape every op is a plain
// forward computation, which is how inference runs.

#include <Eigen/Core>

#include <type_traits>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace olab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::string_view op, const std::string& detail)
      : std::invalid_argument(std::string(op) + ": " + detail) {}
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Leaves resized elements uninitialized; gradient buffers are either zeroed
// explicitly or fully overwritten by the first backward that touches them.
template <class T>
struct UninitAllocator : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = UninitAllocator<U>;
  };
  UninitAllocator() = default;
  template <class U>
  UninitAllocator(const UninitAllocator<U>&) noexcept {}
  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... A>
  void construct(U* p, A&&... a) {
    ::new (static_cast<void*>(p)) U(std::forward<A>(a)...);
  }
};

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double, UninitAllocator<double>> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;  // nonzero once recorded on a tape

  std::span<double> ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }

  // second is true when the buffer was just allocated: the caller must write
  // every element instead of accumulating
  std::pair<std::span<double>, bool> grad_for_write() {
    if (grad.size() == data.size()) return {grad, false};
    grad.resize(data.size());
    return {grad, true};
  }
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape.empty()) shape = {1};
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor", "zero-sized dimension in " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor", "shape " + shape_str(shape) + " does not match " +
                                     std::to_string(data.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double item() const {
    if (numel() != 1) throw ShapeError("item", "tensor " + shape_str(shape()) + " is not scalar");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

  /// Tape identifier, present only for tensors produced by a recorded op.
  std::optional<std::uint64_t> node_id() const {
    if (node_->id == 0) return std::nullopt;
    return node_->id;
  }

  /// Same values, fresh storage, no autograd linkage.
  Tensor detached_copy() const { return Tensor(shape(), node_->data); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

class Tape {
 public:
  struct Entry {
    std::string op;
    std::vector<std::shared_ptr<Node>> inputs;
    std::shared_ptr<Node> output;
    std::function<void(std::span<const double>)> backward;
  };

  std::size_t size() const { return entries_.size(); }
  const Entry& entry(std::size_t i) const { return entries_.at(i); }
  void clear() { entries_.clear(); }

  void record(Entry e) {
    static thread_local std::uint64_t next_id = 0;
    e.output->id = ++next_id;
    entries_.push_back(std::move(e));
  }

  /// Fills grad of every recorded input with d(loss)/d(input). Leaf
  /// gradients accumulate across calls; intermediate gradients are reset.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
      throw ShapeError("backward", "loss must be scalar, got " + shape_str(loss.shape()));
    }
    std::size_t last = entries_.size();
    for (std::size_t i = entries_.size(); i-- > 0;) {
      if (entries_[i].output == loss.node()) {
        last = i;
        break;
      }
    }
    if (last == entries_.size()) {
      throw std::logic_error("backward: loss was not produced under this tape");
    }
    // intermediate grads are allocated on first write; untouched ones stay
    // empty and their entries are skipped
    for (std::size_t i = 0; i <= last; ++i) entries_[i].output->grad.clear();
    entries_[last].output->grad.assign(1, 1.0);
    for (std::size_t i = last + 1; i-- > 0;) {
      Entry& e = entries_[i];
      if (e.output->grad.empty()) e.output->grad.assign(e.output->data.size(), 0.0);
      else e.backward(e.output->grad);
    }
  }

 private:
  std::vector<Entry> entries_;
};

inline Tape*& active_tape() {
  static thread_local Tape* tape = nullptr;
  return tape;
}

/// Makes `tape` the recording target for the current thread while alive.
class RecordingScope {
 public:
  explicit RecordingScope(Tape& tape) : previous_(active_tape()) { active_tape() = &tape; }
  ~RecordingScope() { active_tape() = previous_; }
  RecordingScope(const RecordingScope&) = delete;
  RecordingScope& operator=(const RecordingScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording (e.g. for evaluation inside a training scope).
class NoRecordScope {
 public:
  NoRecordScope() : previous_(active_tape()) { active_tape() = nullptr; }
  ~NoRecordScope() { active_tape() = previous_; }
  NoRecordScope(const NoRecordScope&) = delete;
  NoRecordScope& operator=(const NoRecordScope&) = delete;

 private:
  Tape* previous_;
};

inline void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

namespace ops {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

/// Gradient sink for an input; empty span when the input needs no gradient.
inline std::span<double> sink(const std::shared_ptr<Node>& n) {
  if (!n->requires_grad) return {};
  return n->ensure_grad();
}

struct WriteSink {
  std::span<double> g;
  bool fresh = false;
  bool empty() const { return g.empty(); }
  double* data() const { return g.data(); }
  double& operator[](std::size_t i) const { return g[i]; }
};

/// Like sink, but skips zero-filling a new buffer. Only for backward
/// functions that write every element of the input gradient.
inline WriteSink sink_write(const std::shared_ptr<Node>& n) {
  if (!n->requires_grad) return {};
  auto [g, fresh] = n->grad_for_write();
  return {g, fresh};
}

/// out[i] = exp(in[i] - shift), vectorized. Every element goes through the
/// same packet code via an aligned, zero-padded chunk, so results do not
/// depend on where the caller's buffers sit in memory. Eigen's exp clamps its
/// argument rather than returning 0 for -inf, hence the fix-up.
inline void exp_into(const double* in, double shift, double* out, std::size_t n) {
  constexpr std::size_t kChunk = 256;
  constexpr std::size_t kPad = 8;
  alignas(64) double buf[kChunk];
  using Arr = Eigen::Array<double, Eigen::Dynamic, 1>;
  for (std::size_t i = 0; i < n; i += kChunk) {
    const std::size_t m = std::min(kChunk, n - i);
    const std::size_t padded = (m + kPad - 1) / kPad * kPad;
    for (std::size_t j = 0; j < padded; ++j) buf[j] = j < m ? in[i + j] - shift : 0.0;
    Eigen::Map<Arr, Eigen::Aligned64> a(buf, static_cast<Eigen::Index>(padded));
    a = a.exp();
    for (std::size_t j = 0; j < m; ++j) {
      out[i + j] = in[i + j] == -std::numeric_limits<double>::infinity() ? 0.0 : buf[j];
    }
  }
}

inline Tensor finish(std::string_view op, Tensor out, std::vector<Tensor> inputs,
                     std::function<void(std::span<const double>)> bw) {
  Tape* tape = active_tape();
  if (tape == nullptr) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  out.set_requires_grad(true);
  Tape::Entry e;
  e.op = std::string(op);
  for (const auto& t : inputs) e.inputs.push_back(t.node());
  e.output = out.node();
  e.backward = std::move(bw);
  tape->record(std::move(e));
  return out;
}

/// Checks that `b` is `a`'s shape or a trailing suffix of it; returns the
/// number of elements of `b`.
inline std::size_t trailing_broadcast(std::string_view op, const Shape& a, const Shape& b) {
  bool ok = b.size() <= a.size();
  for (std::size_t i = 0; ok && i < b.size(); ++i) {
    ok = a[a.size() - b.size() + i] == b[i];
  }
  if (!ok) {
    throw ShapeError(op, "shape " + shape_str(b) + " does not broadcast to " + shape_str(a));
  }
  return shape_numel(b);
}

inline void require_finite(std::string_view op, std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw DomainError(std::string(op) + ": non-finite input");
  }
}

template <class F, class D>
Tensor unary(std::string_view op, const Tensor& x, F f, D dfdx) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  Tensor y(x.shape(), std::move(out));
  auto xn = x.node();
  auto yn = y.node();
  return finish(op, y, {x}, [xn, yn, dfdx](std::span<const double> g) {
    auto gx = sink_write(xn);
    if (gx.empty()) return;
    if (gx.fresh) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * dfdx(xn->data[i], yn->data[i]);
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xn->data[i], yn->data[i]);
    }
  });
}

}  // namespace detail

struct MatmulOptions {
  bool transpose_b = false;
};

/// a: [..., M, K]. b: [K, N] (shared across a's leading dims) or
/// [..., K, N] with the same leading dims as a. transpose_b reads b as
/// [..., N, K].
inline Tensor matmul(const Tensor& a, const Tensor& b, MatmulOptions opt = {}) {
  using namespace detail;
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul", "operands must be at least 2-D, got " + shape_str(a.shape()) +
                                   " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  const std::size_t bk = opt.transpose_b ? b.dim(b.rank() - 1) : b.dim(b.rank() - 2);
  const std::size_t n = opt.transpose_b ? b.dim(b.rank() - 2) : b.dim(b.rank() - 1);
  bool ok = bk == k;
  std::size_t batches = 1;
  const bool shared_b = b.rank() == 2;
  if (!shared_b) {
    ok = ok && a.rank() == b.rank();
    for (std::size_t i = 0; ok && i + 2 < a.rank(); ++i) ok = a.dim(i) == b.dim(i);
  }
  if (!ok) {
    throw ShapeError("matmul", "incompatible shapes " + shape_str(a.shape()) + " and " +
                                   shape_str(b.shape()) +
                                   (opt.transpose_b ? " (b transposed)" : ""));
  }
  for (std::size_t i = 0; i + 2 < a.rank(); ++i) batches *= a.dim(i);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(shape_numel(out_shape));

  const std::size_t rows = shared_b ? batches * m : m;
  const std::size_t loops = shared_b ? 1 : batches;
  const std::size_t b_rows = opt.transpose_b ? n : k;
  const std::size_t b_cols = opt.transpose_b ? k : n;
  for (std::size_t p = 0; p < loops; ++p) {
    ConstMap A(a.data().data() + p * rows * k, rows, k);
    ConstMap B(b.data().data() + (shared_b ? 0 : p * k * n), b_rows, b_cols);
    MutMap C(out.data() + p * rows * n, rows, n);
    if (opt.transpose_b) {
      C.noalias() = A * B.transpose();
    } else {
      C.noalias() = A * B;
    }
  }
  Tensor y(std::move(out_shape), std::move(out));
  auto an = a.node();
  auto bn = b.node();
  return finish("matmul", y, {a, b},
                [an, bn, rows, loops, k, n, b_rows, b_cols, shared_b,
                 trans = opt.transpose_b](std::span<const double> g) {
                  // a before b: when both are the same node the second sink
                  // sees an allocated buffer and accumulates
                  auto ga = sink_write(an);
                  auto gb = sink_write(bn);
                  for (std::size_t p = 0; p < loops; ++p) {
                    ConstMap G(g.data() + p * rows * n, rows, n);
                    ConstMap B(bn->data.data() + (shared_b ? 0 : p * k * n), b_rows, b_cols);
                    ConstMap A(an->data.data() + p * rows * k, rows, k);
                    if (!ga.empty()) {
                      MutMap GA(ga.data() + p * rows * k, rows, k);
                      if (ga.fresh) {
                        if (trans) {
                          GA.noalias() = G * B;
                        } else {
                          GA.noalias() = G * B.transpose();
                        }
                      } else if (trans) {
                        GA.noalias() += G * B;
                      } else {
                        GA.noalias() += G * B.transpose();
                      }
                    }
                    if (!gb.empty()) {
                      MutMap GB(gb.data() + (shared_b ? 0 : p * k * n), b_rows, b_cols);
                      if (gb.fresh) {
                        if (trans) {
                          GB.noalias() = G.transpose() * A;
                        } else {
                          GB.noalias() = A.transpose() * G;
                        }
                      } else if (trans) {
                        GB.noalias() += G.transpose() * A;
                      } else {
                        GB.noalias() += A.transpose() * G;
                      }
                    }
                  }
                });
}

/// Elementwise a + b; b may be a trailing suffix of a's shape (bias add).
inline Tensor add(const Tensor& a, const Tensor& b) {
  using namespace detail;
  const std::size_t inner = trailing_broadcast("add", a.shape(), b.shape());
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t o = 0; o < out.size(); o += inner) {
    for (std::size_t j = 0; j < inner; ++j) out[o + j] += bd[j];
  }
  auto an = a.node();
  auto bn = b.node();
  return finish("add", Tensor(a.shape(), std::move(out)), {a, b},
                [an, bn, inner](std::span<const double> g) {
                  auto ga = sink_write(an);
                  if (ga.fresh) {
                    std::copy(g.begin(), g.end(), ga.data());
                  } else {
                    for (std::size_t i = 0; i < ga.g.size(); ++i) ga[i] += g[i];
                  }
                  auto gb = sink(bn);
                  if (gb.empty()) return;
                  for (std::size_t o = 0; o < g.size(); o += inner) {
                    for (std::size_t j = 0; j < inner; ++j) gb[j] += g[o + j];
                  }
                });
}

/// x @ w + b for x [..., K], w [K, N], b [N]. Same arithmetic as
/// add(matmul(x, w), b) in one op.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  using namespace detail;
  if (x.rank() < 1 || w.rank() != 2 || b.shape() != Shape{w.dim(1)} ||
      x.shape().back() != w.dim(0)) {
    throw ShapeError("linear", "shapes " + shape_str(x.shape()) + ", " + shape_str(w.shape()) +
                                   ", " + shape_str(b.shape()));
  }
  const std::size_t k = w.dim(0);
  const std::size_t n = w.dim(1);
  const std::size_t rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  std::vector<double> out(rows * n);
  MutMap Y(out.data(), rows, n);
  Y.noalias() = ConstMap(x.data().data(), rows, k) * ConstMap(w.data().data(), k, n);
  Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), n);
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  return finish("linear", Tensor(std::move(out_shape), std::move(out)), {x, w, b},
                [xn, wn, bn, rows, k, n](std::span<const double> g) {
                  ConstMap G(g.data(), rows, n);
                  ConstMap X(xn->data.data(), rows, k);
                  ConstMap W(wn->data.data(), k, n);
                  auto gx = sink_write(xn);
                  if (!gx.empty()) {
                    MutMap GX(gx.data(), rows, k);
                    if (gx.fresh) {
                      GX.noalias() = G * W.transpose();
                    } else {
                      GX.noalias() += G * W.transpose();
                    }
                  }
                  auto gw = sink_write(wn);
                  if (!gw.empty()) {
                    MutMap GW(gw.data(), k, n);
                    if (gw.fresh) {
                      GW.noalias() = X.transpose() * G;
                    } else {
                      GW.noalias() += X.transpose() * G;
                    }
                  }
                  auto gb = sink(bn);
                  if (gb.empty()) return;
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
                  }
                });
}

/// Elementwise a * b with the same trailing broadcast rule as add.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  using namespace detail;
  const std::size_t inner = trailing_broadcast("mul", a.shape(), b.shape());
  std::vector<double> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t o = 0; o < out.size(); o += inner) {
    for (std::size_t j = 0; j < inner; ++j) out[o + j] = ad[o + j] * bd[j];
  }
  auto an = a.node();
  auto bn = b.node();
  return finish("mul", Tensor(a.shape(), std::move(out)), {a, b},
                [an, bn, inner](std::span<const double> g) {
                  auto ga = sink(an);
                  auto gb = sink(bn);
                  for (std::size_t o = 0; o < g.size(); o += inner) {
                    for (std::size_t j = 0; j < inner; ++j) {
                      if (!ga.empty()) ga[o + j] += g[o + j] * bn->data[j];
                      if (!gb.empty()) gb[j] += g[o + j] * an->data[o + j];
                    }
                  }
                });
}

/// factor * x + offset with scalar coefficients.
inline Tensor affine(const Tensor& x, double factor, double offset) {
  return detail::unary(
      "affine", x, [=](double v) { return factor * v + offset; },
      [=](double, double) { return factor; });
}

inline Tensor scale(const Tensor& x, double factor) {
  return detail::unary(
      "scale", x, [=](double v) { return factor * v; }, [=](double, double) { return factor; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw DomainError("log: input must be > 0, got " + std::to_string(v));
  }
  return detail::unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// Gradient flows only where lo < x < hi; zero on and beyond the bounds.
inline Tensor clip(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clip: lo > hi");
  return detail::unary(
      "clip", x, [=](double v) { return std::clamp(v, lo, hi); },
      [=](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * inv_sqrt2));
  Tensor y(x.shape(), std::move(out));
  auto xn = x.node();
  auto yn = y.node();
  return detail::finish("gelu", y, {x}, [xn, yn](std::span<const double> g) {
    auto gx = detail::sink_write(xn);
    if (gx.empty()) return;
    const auto& v = xn->data;
    constexpr std::size_t kChunk = 256;
    double half_sq[kChunk];
    double pdf[kChunk];
    for (std::size_t c = 0; c < v.size(); c += kChunk) {
      const std::size_t m = std::min(kChunk, v.size() - c);
      for (std::size_t j = 0; j < m; ++j) half_sq[j] = -0.5 * v[c + j] * v[c + j];
      detail::exp_into(half_sq, 0.0, pdf, m);
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t i = c + j;
        // Phi(v) = y / v away from 0 saves a second erf
        const double cdf =
            std::abs(v[i]) > 1e-3 ? yn->data[i] / v[i] : 0.5 * (1.0 + std::erf(v[i] * inv_sqrt2));
        const double d = g[i] * (cdf + v[i] * inv_sqrt_2pi * pdf[j]);
        gx[i] = gx.fresh ? d : gx[i] + d;
      }
    }
  });
}

/// Sum of every element, as a [1] tensor.
inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xn = x.node();
  return detail::finish("sum", Tensor::scalar(s), {x}, [xn](std::span<const double> g) {
    auto gx = detail::sink(xn);
    for (double& v : gx) v += g[0];
  });
}

namespace detail {
inline Shape drop_last(const Shape& s) {
  if (s.size() == 1) return {1};
  return Shape(s.begin(), s.end() - 1);
}
}  // namespace detail

/// Reduction over the last axis.
inline Tensor sum_axis(const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(rows, 0.0);
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r] += xd[r * n + j];
  }
  auto xn = x.node();
  return detail::finish("sum_axis", Tensor(detail::drop_last(x.shape()), std::move(out)), {x},
                        [xn, n](std::span<const double> g) {
                          auto gx = detail::sink(xn);
                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i / n];
                        });
}

/// Max over the last axis; the gradient goes to the first maximal element.
inline Tensor max_axis(const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(rows);
  std::vector<std::size_t> arg(rows);
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j) {
      if (xd[r * n + j] > xd[r * n + best]) best = j;
    }
    arg[r] = r * n + best;
    out[r] = xd[arg[r]];
  }
  auto xn = x.node();
  return detail::finish("max_axis", Tensor(detail::drop_last(x.shape()), std::move(out)), {x},
                        [xn, arg = std::move(arg)](std::span<const double> g) {
                          auto gx = detail::sink(xn);
                          if (gx.empty()) return;
                          for (std::size_t r = 0; r < arg.size(); ++r) gx[arg[r]] += g[r];
                        });
}

/// Softmax over the last axis with max subtraction. -inf entries get
/// probability exactly 0; a fully masked row (all -inf) is an error. NaN
/// or +inf turn the whole row NaN, so a blown-up model shows up in the loss.
inline Tensor softmax(const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    if (mx == -std::numeric_limits<double>::infinity() &&
        std::none_of(in, in + n, [](double v) { return std::isnan(v); })) {
      throw DomainError("softmax: row is fully masked");
    }
    detail::exp_into(in, mx, o, n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += o[j];
    for (std::size_t j = 0; j < n; ++j) o[j] /= s;
  }
  Tensor y(x.shape(), std::move(out));
  auto xn = x.node();
  auto yn = y.node();
  return detail::finish("softmax", y, {x}, [xn, yn, n](std::span<const double> g) {
    auto gx = detail::sink_write(xn);
    if (gx.empty()) return;
    const auto& p = yn->data;
    for (std::size_t r = 0; r < p.size() / n; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * p[r * n + j];
      if (gx.fresh) {
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] = p[r * n + j] * (g[r * n + j] - dot);
      } else {
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += p[r * n + j] * (g[r * n + j] - dot);
      }
    }
  });
}

/// Normalizes over the last axis, then applies gain/bias of shape [D].
/// eps sits inside the square root.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm", "gain/bias " + shape_str(gain.shape()) + "/" +
                                       shape_str(bias.shape()) + " for input " +
                                       shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  std::vector<double> out(x.numel());
  auto xd = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (in[j] - mean) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gd[j] + bd[j];
    }
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return detail::finish(
      "layer_norm", Tensor(x.shape(), std::move(out)), {x, gain, bias},
      [xn, gn, bn, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](
          std::span<const double> g) {
        auto gx = detail::sink_write(xn);
        auto gg = detail::sink(gn);
        auto gb = detail::sink(bn);
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_dy = 0.0;
          double sum_dy_xhat = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dy = g[r * d + j] * gn->data[j];
            sum_dy += dy;
            sum_dy_xhat += dy * xhat[r * d + j];
            if (!gg.empty()) gg[j] += g[r * d + j] * xhat[r * d + j];
            if (!gb.empty()) gb[j] += g[r * d + j];
          }
          if (gx.empty()) continue;
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double dy = g[r * d + j] * gn->data[j];
            const double v = rstd[r] * (dy - inv_d * sum_dy - xhat[r * d + j] * inv_d * sum_dy_xhat);
            gx[r * d + j] = gx.fresh ? v : gx[r * d + j] + v;
          }
        }
      });
}

/// Rows of `table` ([V, D]) selected by `ids`; output shape lead_shape + [D].
inline Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids,
                               Shape lead_shape) {
  if (table.rank() != 2) {
    throw ShapeError("embedding_lookup", "table must be 2-D, got " + shape_str(table.shape()));
  }
  if (shape_numel(lead_shape) != ids.size()) {
    throw ShapeError("embedding_lookup", std::to_string(ids.size()) + " ids for lead shape " +
                                             shape_str(lead_shape));
  }
  const std::size_t v = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw ShapeError("embedding_lookup",
                       "id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v));
    }
    std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  lead_shape.push_back(d);
  auto tn = table.node();
  return detail::finish("embedding_lookup", Tensor(std::move(lead_shape), std::move(out)), {table},
                        [tn, d, idv = std::vector<std::int32_t>(ids.begin(), ids.end())](
                            std::span<const double> g) {
                          auto gt = detail::sink(tn);
                          if (gt.empty()) return;
                          for (std::size_t i = 0; i < idv.size(); ++i) {
                            double* row = gt.data() + static_cast<std::size_t>(idv[i]) * d;
                            for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
                          }
                        });
}

/// Axis permutation: output axis i is input axis perm[i].
inline Tensor transpose(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  std::vector<std::size_t> seen(r, 0);
  bool ok = perm.size() == r;
  for (std::size_t p : perm) ok = ok && p < r && seen[p]++ == 0;
  if (!ok) throw ShapeError("transpose", "invalid permutation for " + shape_str(x.shape()));
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * x.dim(i + 1);
  // source offset of each output row (all dims but the last); within a row
  // the source advances by a fixed stride
  const std::size_t row = out_shape[r - 1];
  const std::size_t step = in_stride[perm[r - 1]];
  std::vector<std::size_t> src(x.numel() / row);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < src.size(); ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i + 1 < r; ++i) off += idx[i] * in_stride[perm[i]];
    src[o] = off;
    for (std::size_t i = r - 1; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t o = 0; o < src.size(); ++o) {
    for (std::size_t j = 0; j < row; ++j) out[o * row + j] = xd[src[o] + j * step];
  }
  auto xn = x.node();
  return detail::finish("transpose", Tensor(std::move(out_shape), std::move(out)), {x},
                        [xn, src = std::move(src), row, step](std::span<const double> g) {
                          auto gx = detail::sink_write(xn);
                          if (gx.empty()) return;
                          for (std::size_t o = 0; o < src.size(); ++o) {
                            for (std::size_t j = 0; j < row; ++j) {
                              double& dst = gx[src[o] + j * step];
                              dst = gx.fresh ? g[o * row + j] : dst + g[o * row + j];
                            }
                          }
                        });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape", "cannot reshape " + shape_str(x.shape()) + " to " +
                                    shape_str(shape));
  }
  auto xn = x.node();
  return detail::finish("reshape",
                        Tensor(std::move(shape), std::vector<double>(x.data().begin(), x.data().end())),
                        {x}, [xn](std::span<const double> g) {
                          auto gx = detail::sink_write(xn);
                          if (gx.empty()) return;
                          if (gx.fresh) {
                            std::copy(g.begin(), g.end(), gx.data());
                          } else {
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                          }
                        });
}

/// Replaces entries where mask != 0 with `value`; mask_shape must be a
/// trailing suffix of x's shape. Filled entries receive no gradient.
inline Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask,
                          const Shape& mask_shape, double value) {
  const std::size_t inner = detail::trailing_broadcast("masked_fill", x.shape(), mask_shape);
  if (mask.size() != inner) {
    throw ShapeError("masked_fill", "mask has " + std::to_string(mask.size()) +
                                        " entries for shape " + shape_str(mask_shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i % inner]) out[i] = value;
  }
  auto xn = x.node();
  return detail::finish("masked_fill", Tensor(x.shape(), std::move(out)), {x},
                        [xn, inner, m = std::vector<std::uint8_t>(mask.begin(), mask.end())](
                            std::span<const double> g) {
                          auto gx = detail::sink(xn);
                          if (gx.empty()) return;
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            if (!m[i % inner]) gx[i] += g[i];
                          }
                        });
}

/// Mean natural-log cross-entropy of rows of `logits` ([N, V]) against
/// `targets`; rows whose target equals ignore_index are skipped.
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                            std::int32_t ignore_index = -1) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw ShapeError("cross_entropy", "logits " + shape_str(logits.shape()) + " vs " +
                                          std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = logits.dim(0);
  const std::size_t v = logits.dim(1);
  std::vector<double> prob(logits.numel());
  auto ld = logits.data();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] == ignore_index) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
      throw ShapeError("cross_entropy", "target " + std::to_string(targets[r]) +
                                            " outside vocabulary of " + std::to_string(v));
    }
    const double* row = ld.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double* pr = prob.data() + r * v;
    detail::exp_into(row, mx, pr, v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += pr[j];
    for (std::size_t j = 0; j < v; ++j) pr[j] /= s;
    total += mx + std::log(s) - row[targets[r]];
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: no target positions");
  auto ln = logits.node();
  return detail::finish(
      "cross_entropy", Tensor::scalar(total / static_cast<double>(count)), {logits},
      [ln, n, v, count, prob = std::move(prob),
       tv = std::vector<std::int32_t>(targets.begin(), targets.end()),
       ignore_index](std::span<const double> g) {
        auto gl = detail::sink(ln);
        if (gl.empty()) return;
        const double w = g[0] / static_cast<double>(count);
        for (std::size_t r = 0; r < n; ++r) {
          if (tv[r] == ignore_index) continue;
          for (std::size_t j = 0; j < v; ++j) gl[r * v + j] += w * prob[r * v + j];
          gl[r * v + static_cast<std::size_t>(tv[r])] -= w;
        }
      });
}

}  // namespace ops

/// Max over coordinates of |analytic - central| / max(|analytic|, |central|, 1e-8),
/// where analytic is the tape gradient of f at x and central the symmetric
/// difference with step h. Perturbs x in place and restores it. The caller is
/// responsible for keeping x away from clip boundaries and max ties.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                double h = 1e-5) {
  const bool had_rg = x.requires_grad();
  x.set_requires_grad(true);
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor y;
    {
      RecordingScope scope(tape);
      y = f(x);
    }
    x.zero_grad();
    tape.backward(y);
    analytic.assign(x.grad().begin(), x.grad().end());
  }
  double worst = 0.0;
  {
    NoRecordScope no_record;
    auto xd = x.mutable_data();
    for (std::size_t i = 0; i < xd.size(); ++i) {
      const double saved = xd[i];
      xd[i] = saved + h;
      const double fp = f(x).item();
      xd[i] = saved - h;
      const double fm = f(x).item();
      xd[i] = saved;
      const double central = (fp - fm) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(central), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - central) / denom);
    }
  }
  x.set_requires_grad(had_rg);
  return worst;
}

}  // namespace olab
