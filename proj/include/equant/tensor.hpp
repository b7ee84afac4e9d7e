#pragma once

// Reverse-mode autodiff over dense row-major tensors. The op set is exactly
// what the network needs; no general broadcasting. Every op computes its
// result eagerly and, when a tape is attached and some input needs a
// gradient, records a closure that accumulates adjoints into its inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "equant/errors.hpp"
#include "equant/rng.hpp"

namespace equant {

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Boolean mask over positions; 1 marks a real (unpadded) entry.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> on;

  static Mask ones(const Shape& s) {
    Mask m;
    m.shape = s;
    m.on.assign(static_cast<std::size_t>(numel_of(s)), 1);
    return m;
  }
  static Mask from(const Shape& s, std::vector<std::uint8_t> bits) {
    Mask m;
    m.shape = s;
    m.on = std::move(bits);
    if (static_cast<std::int64_t>(m.on.size()) != numel_of(s))
      throw ShapeError("mask bits do not match shape " + shape_str(s));
    return m;
  }
  // First n real, rest padding.
  static Mask prefix(int total, int real) {
    Mask m;
    m.shape = {total};
    m.on.assign(static_cast<std::size_t>(total), 0);
    for (int i = 0; i < real && i < total; ++i) m.on[static_cast<std::size_t>(i)] = 1;
    return m;
  }
  bool at(std::int64_t i) const { return on[static_cast<std::size_t>(i)] != 0; }
  std::int64_t size() const { return static_cast<std::int64_t>(on.size()); }
  int count() const {
    int c = 0;
    for (auto b : on) c += b ? 1 : 0;
    return c;
  }
};

inline Mask outer(const Mask& rows, const Mask& cols) {
  Mask m;
  m.shape = {rows.shape[0], cols.shape[0]};
  m.on.resize(static_cast<std::size_t>(rows.size() * cols.size()));
  for (std::int64_t i = 0; i < rows.size(); ++i)
    for (std::int64_t j = 0; j < cols.size(); ++j)
      m.on[static_cast<std::size_t>(i * cols.size() + j)] =
          static_cast<std::uint8_t>(rows.at(i) && cols.at(j));
  return m;
}

template <typename T>
class Tensor {
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool from_op = false;
  };
  std::shared_ptr<Node> n_;

  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->value.assign(static_cast<std::size_t>(numel_of(s)), T{0});
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor from(const Shape& s, std::vector<T> values, bool requires_grad = false) {
    if (static_cast<std::int64_t>(values.size()) != numel_of(s))
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not fill shape " + shape_str(s));
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::int64_t numel() const { return static_cast<std::int64_t>(n_->value.size()); }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }

  std::span<T> value() { return n_->value; }
  std::span<const T> value() const { return n_->value; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return n_->value[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  bool from_op() const { return n_->from_op; }
  void mark_from_op() { n_->from_op = true; }
  bool needs_grad() const { return n_->requires_grad || n_->from_op; }

  // Gradient accumulation buffer, materialised as zeros on first access.
  std::vector<T>& grad_storage() const {
    if (n_->grad.empty()) n_->grad.assign(n_->value.size(), T{0});
    return n_->grad;
  }
  bool grad_touched() const { return !n_->grad.empty(); }
  std::span<const T> grad() const { return grad_storage(); }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T{0});
  }

  bool same_node(const Tensor& o) const { return n_ == o.n_; }

  bool all_finite() const {
    for (T v : n_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

// Ordered record of recorded primitives; replayed once, in reverse.
template <typename T>
class Tape {
 public:
  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
  std::size_t size() const { return ops_.size(); }
  bool consumed() const { return consumed_; }

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (consumed_)
      throw ContractError("backward called twice on the same tape; reset() first");
    consumed_ = true;
    loss.grad_storage()[0] += T{1};
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void reset() {
    ops_.clear();
    consumed_ = false;
  }

 private:
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
};

// Forward-pass context: the tape (nullptr disables recording) plus the
// training-time state the stochastic ops need.
template <typename T>
struct Ctx {
  Tape<T>* tape = nullptr;
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;

  static Ctx eval() { return Ctx{}; }
  static Ctx record(Tape<T>& t) { return Ctx{&t, false, 0.0, nullptr}; }
  static Ctx train(Tape<T>& t, double drop, Rng& r) { return Ctx{&t, true, drop, &r}; }

  bool recording() const { return tape != nullptr; }
};

namespace detail {

template <typename T>
void check_2d(const Tensor<T>& x, const char* op) {
  if (x.ndim() != 2) throw ShapeError(std::string(op) + ": expected 2-d, got " + shape_str(x.shape()));
}

template <typename T, typename... Ts>
bool any_needs_grad(const Tensor<T>& first, const Ts&... rest) {
  if constexpr (sizeof...(rest) == 0) return first.needs_grad();
  else return first.needs_grad() || any_needs_grad(rest...);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Ctx<T>& ctx, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = Tensor<T>::zeros(a.shape());
  auto av = a.value(), bv = b.value();
  auto ov = out.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] + bv[i];
  if (ctx.recording() && detail::any_needs_grad(a, b)) {
    out.mark_from_op();
    ctx.tape->record([a, b, out]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      if (a.needs_grad()) {
        auto& ga = a.grad_storage();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.needs_grad()) {
        auto& gb = b.grad_storage();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Ctx<T>& ctx, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = Tensor<T>::zeros(a.shape());
  auto av = a.value(), bv = b.value();
  auto ov = out.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] * bv[i];
  if (ctx.recording() && detail::any_needs_grad(a, b)) {
    out.mark_from_op();
    ctx.tape->record([a, b, out]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto av2 = a.value();
      auto bv2 = b.value();
      if (a.needs_grad()) {
        auto& ga = a.grad_storage();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv2[i];
      }
      if (b.needs_grad()) {
        auto& gb = b.grad_storage();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av2[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Ctx<T>& ctx, const Tensor<T>& a, T c) {
  auto out = Tensor<T>::zeros(a.shape());
  auto av = a.value();
  auto ov = out.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] * c;
  if (ctx.recording() && a.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([a, out, c]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto& ga = a.grad_storage();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
    });
  }
  return out;
}

// a[n x d] + row[d], broadcast over rows (bias add).
template <typename T>
Tensor<T> add_row(Ctx<T>& ctx, const Tensor<T>& a, const Tensor<T>& row) {
  detail::check_2d(a, "add_row");
  const int n = a.dim(0), d = a.dim(1);
  if (row.numel() != d)
    throw ShapeError("add_row: row " + shape_str(row.shape()) + " vs width " + std::to_string(d));
  auto out = Tensor<T>::zeros(a.shape());
  auto av = a.value(), rv = row.value();
  auto ov = out.value();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) ov[i * d + j] = av[i * d + j] + rv[j];
  if (ctx.recording() && detail::any_needs_grad(a, row)) {
    out.mark_from_op();
    ctx.tape->record([a, row, out, n, d]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      if (a.needs_grad()) {
        auto& ga = a.grad_storage();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (row.needs_grad()) {
        auto& gr = row.grad_storage();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) gr[j] += go[static_cast<std::size_t>(i * d + j)];
      }
    });
  }
  return out;
}

// a[n x d] * row[d], broadcast over rows (per-column scaling).
template <typename T>
Tensor<T> mul_row(Ctx<T>& ctx, const Tensor<T>& a, const Tensor<T>& row) {
  detail::check_2d(a, "mul_row");
  const int n = a.dim(0), d = a.dim(1);
  if (row.numel() != d)
    throw ShapeError("mul_row: row " + shape_str(row.shape()) + " vs width " + std::to_string(d));
  auto out = Tensor<T>::zeros(a.shape());
  auto av = a.value(), rv = row.value();
  auto ov = out.value();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) ov[i * d + j] = av[i * d + j] * rv[j];
  if (ctx.recording() && detail::any_needs_grad(a, row)) {
    out.mark_from_op();
    ctx.tape->record([a, row, out, n, d]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto av2 = a.value();
      auto rv2 = row.value();
      if (a.needs_grad()) {
        auto& ga = a.grad_storage();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) ga[static_cast<std::size_t>(i * d + j)] += go[static_cast<std::size_t>(i * d + j)] * rv2[j];
      }
      if (row.needs_grad()) {
        auto& gr = row.grad_storage();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) gr[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(i * d + j)] * av2[i * d + j];
      }
    });
  }
  return out;
}

// a[n x m] + col[n], broadcast over columns.
template <typename T>
Tensor<T> add_col(Ctx<T>& ctx, const Tensor<T>& a, const Tensor<T>& col) {
  detail::check_2d(a, "add_col");
  const int n = a.dim(0), m = a.dim(1);
  if (col.numel() != n)
    throw ShapeError("add_col: col " + shape_str(col.shape()) + " vs height " + std::to_string(n));
  auto out = Tensor<T>::zeros(a.shape());
  auto av = a.value(), cv = col.value();
  auto ov = out.value();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) ov[i * m + j] = av[i * m + j] + cv[i];
  if (ctx.recording() && detail::any_needs_grad(a, col)) {
    out.mark_from_op();
    ctx.tape->record([a, col, out, n, m]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      if (a.needs_grad()) {
        auto& ga = a.grad_storage();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (col.needs_grad()) {
        auto& gc = col.grad_storage();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) gc[i] += go[static_cast<std::size_t>(i * m + j)];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(Ctx<T>& ctx, const Tensor<T>& a, const Tensor<T>& s) {
  if (s.numel() != 1) throw ShapeError("add_scalar: scalar operand has " + shape_str(s.shape()));
  auto out = Tensor<T>::zeros(a.shape());
  auto av = a.value();
  const T sv = s.value()[0];
  auto ov = out.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] + sv;
  if (ctx.recording() && detail::any_needs_grad(a, s)) {
    out.mark_from_op();
    ctx.tape->record([a, s, out]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      if (a.needs_grad()) {
        auto& ga = a.grad_storage();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (s.needs_grad()) {
        auto& gs = s.grad_storage();
        for (std::size_t i = 0; i < go.size(); ++i) gs[0] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(Ctx<T>& ctx, const Tensor<T>& a) {
  auto out = Tensor<T>::zeros(a.shape());
  auto av = a.value();
  auto ov = out.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] > T{0} ? av[i] : T{0};
  if (ctx.recording() && a.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([a, out]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto av2 = a.value();
      auto& ga = a.grad_storage();
      for (std::size_t i = 0; i < go.size(); ++i)
        if (av2[i] > T{0}) ga[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(Ctx<T>& ctx, const Tensor<T>& a) {
  auto out = Tensor<T>::zeros(a.shape());
  auto av = a.value();
  auto ov = out.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const double x = static_cast<double>(av[i]);
    ov[i] = static_cast<T>(x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                  : std::exp(x) / (1.0 + std::exp(x)));
  }
  if (ctx.recording() && a.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([a, out]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto ov2 = out.value();
      auto& ga = a.grad_storage();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * ov2[i] * (T{1} - ov2[i]);
    });
  }
  return out;
}

// Inverted dropout; identity when not training or rate == 0.
template <typename T>
Tensor<T> dropout(Ctx<T>& ctx, const Tensor<T>& a) {
  if (!ctx.training || ctx.dropout <= 0.0) return a;
  if (ctx.rng == nullptr) throw ContractError("dropout: training context without rng");
  const double keep = 1.0 - ctx.dropout;
  auto keep_mask = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(a.numel()));
  auto out = Tensor<T>::zeros(a.shape());
  auto av = a.value();
  auto ov = out.value();
  const T inv = static_cast<T>(1.0 / keep);
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const bool k = canonical(*ctx.rng) < keep;
    (*keep_mask)[static_cast<std::size_t>(i)] = k;
    ov[i] = k ? av[i] * inv : T{0};
  }
  if (ctx.recording() && a.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([a, out, keep_mask, inv]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto& ga = a.grad_storage();
      for (std::size_t i = 0; i < go.size(); ++i)
        if ((*keep_mask)[i]) ga[i] += go[i] * inv;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Ctx<T>& ctx, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_2d(a, "matmul");
  detail::check_2d(b, "matmul");
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
  auto out = Tensor<T>::zeros({n, m});
  {
    auto av = a.value();
    auto bv = b.value();
    auto ov = out.value();
    for (int i = 0; i < n; ++i)
      for (int p = 0; p < k; ++p) {
        const T aip = av[i * k + p];
        if (aip == T{0}) continue;
        const T* brow = &bv[p * m];
        T* orow = &ov[i * m];
        for (int j = 0; j < m; ++j) orow[j] += aip * brow[j];
      }
  }
  if (ctx.recording() && detail::any_needs_grad(a, b)) {
    out.mark_from_op();
    ctx.tape->record([a, b, out, n, k, m]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      if (a.needs_grad()) {
        auto& ga = a.grad_storage();
        auto bv = b.value();
        // dA = dC . B^T
        for (int i = 0; i < n; ++i)
          for (int p = 0; p < k; ++p) {
            T acc{0};
            const T* grow = &go[static_cast<std::size_t>(i) * m];
            const T* brow = &bv[p * m];
            for (int j = 0; j < m; ++j) acc += grow[j] * brow[j];
            ga[static_cast<std::size_t>(i * k + p)] += acc;
          }
      }
      if (b.needs_grad()) {
        auto& gb = b.grad_storage();
        auto av = a.value();
        // dB = A^T . dC
        for (int p = 0; p < k; ++p)
          for (int i = 0; i < n; ++i) {
            const T aip = av[i * k + p];
            if (aip == T{0}) continue;
            const T* grow = &go[static_cast<std::size_t>(i) * m];
            T* brow = &gb[static_cast<std::size_t>(p) * m];
            for (int j = 0; j < m; ++j) brow[j] += aip * grow[j];
          }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(Ctx<T>& ctx, const Tensor<T>& a) {
  detail::check_2d(a, "transpose");
  const int n = a.dim(0), m = a.dim(1);
  auto out = Tensor<T>::zeros({m, n});
  auto av = a.value();
  auto ov = out.value();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) ov[j * n + i] = av[i * m + j];
  if (ctx.recording() && a.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([a, out, n, m]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto& ga = a.grad_storage();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) ga[static_cast<std::size_t>(i * m + j)] += go[static_cast<std::size_t>(j * n + i)];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_cols(Ctx<T>& ctx, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  const int n = parts[0].dim(0);
  int total = 0;
  for (const auto& p : parts) {
    detail::check_2d(p, "concat_cols");
    if (p.dim(0) != n) throw ShapeError("concat_cols: row counts differ");
    total += p.dim(1);
  }
  auto out = Tensor<T>::zeros({n, total});
  auto ov = out.value();
  int off = 0;
  for (const auto& p : parts) {
    const int d = p.dim(1);
    auto pv = p.value();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) ov[i * total + off + j] = pv[i * d + j];
    off += d;
  }
  bool track = false;
  for (const auto& p : parts) track = track || p.needs_grad();
  if (ctx.recording() && track) {
    out.mark_from_op();
    ctx.tape->record([parts, out, n, total]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      int off2 = 0;
      for (const auto& p : parts) {
        const int d = p.dim(1);
        if (p.needs_grad()) {
          auto& gp = p.grad_storage();
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
              gp[static_cast<std::size_t>(i * d + j)] += go[static_cast<std::size_t>(i * total + off2 + j)];
        }
        off2 += d;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(Ctx<T>& ctx, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  const int d = parts[0].dim(1);
  int total = 0;
  for (const auto& p : parts) {
    detail::check_2d(p, "concat_rows");
    if (p.dim(1) != d) throw ShapeError("concat_rows: widths differ");
    total += p.dim(0);
  }
  auto out = Tensor<T>::zeros({total, d});
  auto ov = out.value();
  int off = 0;
  for (const auto& p : parts) {
    auto pv = p.value();
    std::copy(pv.begin(), pv.end(), ov.begin() + static_cast<std::ptrdiff_t>(off) * d);
    off += p.dim(0);
  }
  bool track = false;
  for (const auto& p : parts) track = track || p.needs_grad();
  if (ctx.recording() && track) {
    out.mark_from_op();
    ctx.tape->record([parts, out, d]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      std::size_t off2 = 0;
      for (const auto& p : parts) {
        const std::size_t cnt = static_cast<std::size_t>(p.numel());
        if (p.needs_grad()) {
          auto& gp = p.grad_storage();
          for (std::size_t i = 0; i < cnt; ++i) gp[i] += go[off2 + i];
        }
        off2 += cnt;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(Ctx<T>& ctx, const Tensor<T>& a, int r0, int r1) {
  detail::check_2d(a, "slice_rows");
  const int n = a.dim(0), d = a.dim(1);
  if (r0 < 0 || r1 > n || r0 >= r1)
    throw ShapeError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ") out of " + std::to_string(n));
  auto out = Tensor<T>::zeros({r1 - r0, d});
  auto av = a.value();
  auto ov = out.value();
  std::copy(av.begin() + static_cast<std::ptrdiff_t>(r0) * d,
            av.begin() + static_cast<std::ptrdiff_t>(r1) * d, ov.begin());
  if (ctx.recording() && a.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([a, out, r0, d]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto& ga = a.grad_storage();
      for (std::size_t i = 0; i < go.size(); ++i) ga[static_cast<std::size_t>(r0) * d + i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(Ctx<T>& ctx, const Tensor<T>& a, int c0, int c1) {
  detail::check_2d(a, "slice_cols");
  const int n = a.dim(0), d = a.dim(1);
  if (c0 < 0 || c1 > d || c0 >= c1)
    throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") out of " + std::to_string(d));
  const int w = c1 - c0;
  auto out = Tensor<T>::zeros({n, w});
  auto av = a.value();
  auto ov = out.value();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < w; ++j) ov[i * w + j] = av[i * d + c0 + j];
  if (ctx.recording() && a.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([a, out, c0, n, d, w]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto& ga = a.grad_storage();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j) ga[static_cast<std::size_t>(i * d + c0 + j)] += go[static_cast<std::size_t>(i * w + j)];
    });
  }
  return out;
}

// Append zero rows up to new_n (fixed-length padding for the conv head).
template <typename T>
Tensor<T> pad_rows(Ctx<T>& ctx, const Tensor<T>& a, int new_n) {
  detail::check_2d(a, "pad_rows");
  const int n = a.dim(0), d = a.dim(1);
  if (new_n < n)
    throw ContractError("pad_rows: target length " + std::to_string(new_n) +
                        " is shorter than input " + std::to_string(n));
  auto out = Tensor<T>::zeros({new_n, d});
  auto av = a.value();
  auto ov = out.value();
  std::copy(av.begin(), av.end(), ov.begin());
  if (ctx.recording() && a.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([a, out]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto& ga = a.grad_storage();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Ctx<T>& ctx, const Tensor<T>& a, const Shape& s) {
  if (numel_of(s) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(s));
  auto out = Tensor<T>::from(s, std::vector<T>(a.value().begin(), a.value().end()));
  if (ctx.recording() && a.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([a, out]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto& ga = a.grad_storage();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
  }
  return out;
}

// Row gather from an embedding table; adjoints scatter-add back.
template <typename T>
Tensor<T> gather_rows(Ctx<T>& ctx, const Tensor<T>& table, const std::vector<int>& ids) {
  detail::check_2d(table, "gather_rows");
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw ContractError("gather_rows: index " + std::to_string(id) + " outside table of " +
                          std::to_string(v) + " rows");
  auto out = Tensor<T>::zeros({static_cast<int>(ids.size()), d});
  auto tv = table.value();
  auto ov = out.value();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(tv.begin() + static_cast<std::ptrdiff_t>(ids[i]) * d,
              tv.begin() + static_cast<std::ptrdiff_t>(ids[i] + 1) * d,
              ov.begin() + static_cast<std::ptrdiff_t>(i) * d);
  if (ctx.recording() && table.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([table, out, ids, d]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto& gt = table.grad_storage();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < d; ++j)
          gt[static_cast<std::size_t>(ids[i]) * d + j] += go[i * d + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(Ctx<T>& ctx, const Tensor<T>& a) {
  auto out = Tensor<T>::zeros({1});
  T acc{0};
  for (T v : a.value()) acc += v;
  out.value()[0] = acc;
  if (ctx.recording() && a.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([a, out]() {
      if (!out.grad_touched()) return;
      const T g = out.grad_storage()[0];
      auto& ga = a.grad_storage();
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

// Column-wise max over rows; ties route the adjoint to the first maximiser.
template <typename T>
Tensor<T> max_rows(Ctx<T>& ctx, const Tensor<T>& a) {
  detail::check_2d(a, "max_rows");
  const int n = a.dim(0), d = a.dim(1);
  auto out = Tensor<T>::zeros({1, d});
  auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(d), 0);
  auto av = a.value();
  auto ov = out.value();
  for (int j = 0; j < d; ++j) {
    T best = av[j];
    int bi = 0;
    for (int i = 1; i < n; ++i)
      if (av[i * d + j] > best) {
        best = av[i * d + j];
        bi = i;
      }
    ov[j] = best;
    (*arg)[static_cast<std::size_t>(j)] = bi;
  }
  if (ctx.recording() && a.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([a, out, arg, d]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto& ga = a.grad_storage();
      for (int j = 0; j < d; ++j)
        ga[static_cast<std::size_t>((*arg)[static_cast<std::size_t>(j)]) * d + j] += go[static_cast<std::size_t>(j)];
    });
  }
  return out;
}

// Mean over unmasked rows -> [1 x d].
template <typename T>
Tensor<T> masked_mean_rows(Ctx<T>& ctx, const Tensor<T>& a, const Mask& mask) {
  detail::check_2d(a, "masked_mean_rows");
  const int n = a.dim(0), d = a.dim(1);
  if (mask.size() != n) throw ShapeError("masked_mean_rows: mask length vs rows");
  const int k = mask.count();
  if (k == 0) throw ContractError("masked_mean_rows: fully masked input");
  auto out = Tensor<T>::zeros({1, d});
  auto av = a.value();
  auto ov = out.value();
  for (int i = 0; i < n; ++i) {
    if (!mask.at(i)) continue;
    for (int j = 0; j < d; ++j) ov[j] += av[i * d + j];
  }
  const T inv = static_cast<T>(1.0 / k);
  for (int j = 0; j < d; ++j) ov[j] *= inv;
  if (ctx.recording() && a.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([a, out, mask, inv, n, d]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto& ga = a.grad_storage();
      for (int i = 0; i < n; ++i) {
        if (!mask.at(i)) continue;
        for (int j = 0; j < d; ++j) ga[static_cast<std::size_t>(i * d + j)] += go[static_cast<std::size_t>(j)] * inv;
      }
    });
  }
  return out;
}

// Mean over unmasked cells of an [h x w x c] map -> [1 x c].
template <typename T>
Tensor<T> masked_mean_cells(Ctx<T>& ctx, const Tensor<T>& a, const Mask& mask) {
  if (a.ndim() != 3) throw ShapeError("masked_mean_cells: expected 3-d, got " + shape_str(a.shape()));
  const int h = a.dim(0), w = a.dim(1), c = a.dim(2);
  if (mask.size() != static_cast<std::int64_t>(h) * w)
    throw ShapeError("masked_mean_cells: mask size vs h*w");
  const int k = mask.count();
  if (k == 0) throw ContractError("masked_mean_cells: fully masked input");
  auto out = Tensor<T>::zeros({1, c});
  auto av = a.value();
  auto ov = out.value();
  for (int p = 0; p < h * w; ++p) {
    if (!mask.at(p)) continue;
    for (int q = 0; q < c; ++q) ov[q] += av[p * c + q];
  }
  const T inv = static_cast<T>(1.0 / k);
  for (int q = 0; q < c; ++q) ov[q] *= inv;
  if (ctx.recording() && a.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([a, out, mask, inv, h, w, c]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto& ga = a.grad_storage();
      for (int p = 0; p < h * w; ++p) {
        if (!mask.at(p)) continue;
        for (int q = 0; q < c; ++q) ga[static_cast<std::size_t>(p * c + q)] += go[static_cast<std::size_t>(q)] * inv;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax / normalisation
// ---------------------------------------------------------------------------

// Numerically stable softmax along `axis` of a 2-d tensor. The mask runs
// along the softmax axis; masked entries come out exactly zero. A 1-d input
// is treated as a single row with axis 1.
template <typename T>
Tensor<T> masked_softmax(Ctx<T>& ctx, const Tensor<T>& x, int axis, const Mask& mask) {
  Tensor<T> x2 = x;
  bool was_1d = false;
  if (x.ndim() == 1) {
    was_1d = true;
    Ctx<T> noop = Ctx<T>::eval();
    x2 = reshape(noop, x, {1, x.dim(0)});
    if (ctx.recording() && x.needs_grad()) {
      // re-record the reshape so adjoints flow back to the 1-d input
      x2 = reshape(ctx, x, {1, x.dim(0)});
    }
    axis = 1;
  }
  detail::check_2d(x2, "masked_softmax");
  const int n = x2.dim(0), m = x2.dim(1);
  const int slice_len = (axis == 1) ? m : n;
  const int num_slices = (axis == 1) ? n : m;
  if (axis != 0 && axis != 1) throw ContractError("masked_softmax: axis must be 0 or 1");
  if (mask.size() != slice_len)
    throw ShapeError("masked_softmax: mask length " + std::to_string(mask.size()) +
                     " vs axis extent " + std::to_string(slice_len));
  if (mask.count() == 0) throw ContractError("masked_softmax: fully masked slice");

  auto out = Tensor<T>::zeros(x2.shape());
  auto xv = x2.value();
  auto ov = out.value();
  auto at = [&](int s, int t) { return axis == 1 ? s * m + t : t * m + s; };
  for (int s = 0; s < num_slices; ++s) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int t = 0; t < slice_len; ++t)
      if (mask.at(t)) mx = std::max(mx, xv[at(s, t)]);
    T z{0};
    for (int t = 0; t < slice_len; ++t) {
      if (!mask.at(t)) continue;
      const T e = static_cast<T>(std::exp(static_cast<double>(xv[at(s, t)] - mx)));
      ov[at(s, t)] = e;
      z += e;
    }
    const T inv = T{1} / z;
    for (int t = 0; t < slice_len; ++t)
      if (mask.at(t)) ov[at(s, t)] *= inv;
  }

  if (ctx.recording() && x2.needs_grad()) {
    out.mark_from_op();
    const Tensor<T> xin = x2;
    ctx.tape->record([xin, out, mask, axis, n, m, num_slices, slice_len]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto yv = out.value();
      auto& gx = xin.grad_storage();
      auto at2 = [&](int s, int t) { return axis == 1 ? s * m + t : t * m + s; };
      for (int s = 0; s < num_slices; ++s) {
        T dot{0};
        for (int t = 0; t < slice_len; ++t)
          if (mask.at(t)) dot += go[static_cast<std::size_t>(at2(s, t))] * yv[at2(s, t)];
        for (int t = 0; t < slice_len; ++t) {
          if (!mask.at(t)) continue;
          const std::size_t idx = static_cast<std::size_t>(at2(s, t));
          gx[idx] += yv[idx] * (go[idx] - dot);
        }
      }
    });
  }
  if (was_1d) {
    Ctx<T> sub = ctx;
    return reshape(sub, out, {out.numel() > 0 ? static_cast<int>(out.numel()) : 0});
  }
  return out;
}

// Per-row layer normalisation with affine gain/bias over the last dimension.
template <typename T>
Tensor<T> layer_norm(Ctx<T>& ctx, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, double eps = 1e-6) {
  detail::check_2d(x, "layer_norm");
  const int n = x.dim(0), d = x.dim(1);
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm: gain/bias must match width " + std::to_string(d));
  auto out = Tensor<T>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
  auto xv = x.value();
  auto gv = gain.value();
  auto bv = bias.value();
  auto ov = out.value();
  for (int i = 0; i < n; ++i) {
    double mean = 0;
    for (int j = 0; j < d; ++j) mean += static_cast<double>(xv[i * d + j]);
    mean /= d;
    double var = 0;
    for (int j = 0; j < d; ++j) {
      const double c = static_cast<double>(xv[i * d + j]) - mean;
      var += c * c;
    }
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(i)] = static_cast<T>(is);
    for (int j = 0; j < d; ++j) {
      const T xh = static_cast<T>((static_cast<double>(xv[i * d + j]) - mean) * is);
      (*xhat)[static_cast<std::size_t>(i * d + j)] = xh;
      ov[i * d + j] = gv[j] * xh + bv[j];
    }
  }
  if (ctx.recording() && detail::any_needs_grad(x, gain, bias)) {
    out.mark_from_op();
    ctx.tape->record([x, gain, bias, out, xhat, inv_std, n, d]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto gv2 = gain.value();
      if (gain.needs_grad()) {
        auto& gg = gain.grad_storage();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j)
            gg[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(i * d + j)] * (*xhat)[static_cast<std::size_t>(i * d + j)];
      }
      if (bias.needs_grad()) {
        auto& gb = bias.grad_storage();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) gb[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(i * d + j)];
      }
      if (x.needs_grad()) {
        auto& gx = x.grad_storage();
        for (int i = 0; i < n; ++i) {
          // a = gain .* dy; dx = (a - mean(a) - xhat * mean(a .* xhat)) / std
          double mean_a = 0, mean_ax = 0;
          for (int j = 0; j < d; ++j) {
            const double a = static_cast<double>(gv2[j]) * static_cast<double>(go[static_cast<std::size_t>(i * d + j)]);
            mean_a += a;
            mean_ax += a * static_cast<double>((*xhat)[static_cast<std::size_t>(i * d + j)]);
          }
          mean_a /= d;
          mean_ax /= d;
          const double is = static_cast<double>((*inv_std)[static_cast<std::size_t>(i)]);
          for (int j = 0; j < d; ++j) {
            const double a = static_cast<double>(gv2[j]) * static_cast<double>(go[static_cast<std::size_t>(i * d + j)]);
            const double xh = static_cast<double>((*xhat)[static_cast<std::size_t>(i * d + j)]);
            gx[static_cast<std::size_t>(i * d + j)] += static_cast<T>((a - mean_a - xh * mean_ax) * is);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolutions ("same" zero padding; masked positions contribute zero)
// ---------------------------------------------------------------------------

// Depthwise pass with a k x d kernel followed by 1x1 pointwise mixing.
template <typename T>
Tensor<T> depthwise_separable_conv1d(Ctx<T>& ctx, const Tensor<T>& x, const Tensor<T>& depth,
                                     const Tensor<T>& point, const Tensor<T>& bias,
                                     const Mask& mask) {
  detail::check_2d(x, "depthwise_separable_conv1d");
  detail::check_2d(depth, "depthwise_separable_conv1d");
  detail::check_2d(point, "depthwise_separable_conv1d");
  const int n = x.dim(0), d = x.dim(1);
  const int k = depth.dim(0);
  if (k % 2 == 0)
    throw ConfigError("depthwise_separable_conv1d: kernel width " + std::to_string(k) +
                      " must be odd");
  if (depth.dim(1) != d)
    throw ShapeError("depthwise_separable_conv1d: depth kernel " + shape_str(depth.shape()) +
                     " vs input " + shape_str(x.shape()));
  if (point.dim(0) != d)
    throw ShapeError("depthwise_separable_conv1d: point kernel " + shape_str(point.shape()) +
                     " vs channels " + std::to_string(d));
  const int dout = point.dim(1);
  if (bias.numel() != dout) throw ShapeError("depthwise_separable_conv1d: bias width");
  if (mask.size() != n) throw ShapeError("depthwise_separable_conv1d: mask length vs rows");
  const int off = k / 2;

  // masked input: padding rows are treated as zeros
  auto mx = std::make_shared<std::vector<T>>(x.value().begin(), x.value().end());
  for (int i = 0; i < n; ++i)
    if (!mask.at(i)) std::fill(mx->begin() + static_cast<std::ptrdiff_t>(i) * d, mx->begin() + static_cast<std::ptrdiff_t>(i + 1) * d, T{0});

  // depthwise stage, kept for the backward pass
  auto mid = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * d, T{0});
  {
    auto dv = depth.value();
    for (int i = 0; i < n; ++i)
      for (int u = 0; u < k; ++u) {
        const int src = i + u - off;
        if (src < 0 || src >= n) continue;
        const T* xr = &(*mx)[static_cast<std::size_t>(src) * d];
        const T* dr = &dv[u * d];
        T* tr = &(*mid)[static_cast<std::size_t>(i) * d];
        for (int c = 0; c < d; ++c) tr[c] += dr[c] * xr[c];
      }
  }

  auto out = Tensor<T>::zeros({n, dout});
  {
    auto pv = point.value();
    auto bv = bias.value();
    auto ov = out.value();
    for (int i = 0; i < n; ++i) {
      if (!mask.at(i)) continue;  // masked outputs stay zero
      T* orow = &ov[static_cast<std::size_t>(i) * dout];
      for (int j = 0; j < dout; ++j) orow[j] = bv[j];
      const T* tr = &(*mid)[static_cast<std::size_t>(i) * d];
      for (int c = 0; c < d; ++c) {
        const T tc = tr[c];
        if (tc == T{0}) continue;
        const T* prow = &pv[static_cast<std::size_t>(c) * dout];
        for (int j = 0; j < dout; ++j) orow[j] += tc * prow[j];
      }
    }
  }

  if (ctx.recording() && detail::any_needs_grad(x, depth, point, bias)) {
    out.mark_from_op();
    ctx.tape->record([x, depth, point, bias, out, mask, mx, mid, n, d, k, dout, off]() {
      if (!out.grad_touched()) return;
      const auto& go_raw = out.grad_storage();
      // incoming adjoints at masked rows are dead by construction
      std::vector<T> go(go_raw.begin(), go_raw.end());
      for (int i = 0; i < n; ++i)
        if (!mask.at(i))
          std::fill(go.begin() + static_cast<std::ptrdiff_t>(i) * dout, go.begin() + static_cast<std::ptrdiff_t>(i + 1) * dout, T{0});

      if (bias.needs_grad()) {
        auto& gb = bias.grad_storage();
        for (int i = 0; i < n; ++i)
          if (mask.at(i))
            for (int j = 0; j < dout; ++j) gb[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(i * dout + j)];
      }
      if (point.needs_grad()) {
        auto& gp = point.grad_storage();
        for (int i = 0; i < n; ++i)
          for (int c = 0; c < d; ++c) {
            const T tc = (*mid)[static_cast<std::size_t>(i) * d + c];
            if (tc == T{0}) continue;
            for (int j = 0; j < dout; ++j)
              gp[static_cast<std::size_t>(c * dout + j)] += tc * go[static_cast<std::size_t>(i * dout + j)];
          }
      }
      const bool need_mid = depth.needs_grad() || x.needs_grad();
      if (!need_mid) return;
      std::vector<T> gmid(static_cast<std::size_t>(n) * d, T{0});
      {
        auto pv = point.value();
        for (int i = 0; i < n; ++i)
          for (int c = 0; c < d; ++c) {
            T acc{0};
            const T* prow = &pv[static_cast<std::size_t>(c) * dout];
            const T* grow = &go[static_cast<std::size_t>(i) * dout];
            for (int j = 0; j < dout; ++j) acc += prow[j] * grow[j];
            gmid[static_cast<std::size_t>(i * d + c)] = acc;
          }
      }
      if (depth.needs_grad()) {
        auto& gd = depth.grad_storage();
        for (int i = 0; i < n; ++i)
          for (int u = 0; u < k; ++u) {
            const int src = i + u - off;
            if (src < 0 || src >= n) continue;
            for (int c = 0; c < d; ++c)
              gd[static_cast<std::size_t>(u * d + c)] += gmid[static_cast<std::size_t>(i * d + c)] * (*mx)[static_cast<std::size_t>(src * d + c)];
          }
      }
      if (x.needs_grad()) {
        auto dv = depth.value();
        auto& gx = x.grad_storage();
        for (int i = 0; i < n; ++i)
          for (int u = 0; u < k; ++u) {
            const int src = i + u - off;
            if (src < 0 || src >= n || !mask.at(src)) continue;
            for (int c = 0; c < d; ++c)
              gx[static_cast<std::size_t>(src * d + c)] += gmid[static_cast<std::size_t>(i * d + c)] * dv[u * d + c];
          }
      }
    });
  }
  return out;
}

// Dense 1-d convolution, weight [k x cin x cout].
template <typename T>
Tensor<T> conv1d(Ctx<T>& ctx, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  detail::check_2d(x, "conv1d");
  if (w.ndim() != 3) throw ShapeError("conv1d: weight must be [k x cin x cout]");
  const int n = x.dim(0), cin = x.dim(1);
  const int k = w.dim(0), cout = w.dim(2);
  if (k % 2 == 0) throw ConfigError("conv1d: kernel width " + std::to_string(k) + " must be odd");
  if (w.dim(1) != cin)
    throw ShapeError("conv1d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  if (bias.numel() != cout) throw ShapeError("conv1d: bias width");
  const int off = k / 2;
  auto out = Tensor<T>::zeros({n, cout});
  {
    auto xv = x.value();
    auto wv = w.value();
    auto bv = bias.value();
    auto ov = out.value();
    for (int i = 0; i < n; ++i) {
      T* orow = &ov[static_cast<std::size_t>(i) * cout];
      for (int j = 0; j < cout; ++j) orow[j] = bv[j];
      for (int u = 0; u < k; ++u) {
        const int src = i + u - off;
        if (src < 0 || src >= n) continue;
        const T* xr = &xv[static_cast<std::size_t>(src) * cin];
        for (int c = 0; c < cin; ++c) {
          const T xc = xr[c];
          if (xc == T{0}) continue;
          const T* wrow = &wv[static_cast<std::size_t>((u * cin + c)) * cout];
          for (int j = 0; j < cout; ++j) orow[j] += xc * wrow[j];
        }
      }
    }
  }
  if (ctx.recording() && detail::any_needs_grad(x, w, bias)) {
    out.mark_from_op();
    ctx.tape->record([x, w, bias, out, n, cin, k, cout, off]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      if (bias.needs_grad()) {
        auto& gb = bias.grad_storage();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < cout; ++j) gb[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(i * cout + j)];
      }
      if (w.needs_grad()) {
        auto xv = x.value();
        auto& gw = w.grad_storage();
        for (int i = 0; i < n; ++i)
          for (int u = 0; u < k; ++u) {
            const int src = i + u - off;
            if (src < 0 || src >= n) continue;
            for (int c = 0; c < cin; ++c) {
              const T xc = xv[src * cin + c];
              if (xc == T{0}) continue;
              for (int j = 0; j < cout; ++j)
                gw[static_cast<std::size_t>((u * cin + c)) * cout + j] += xc * go[static_cast<std::size_t>(i * cout + j)];
            }
          }
      }
      if (x.needs_grad()) {
        auto wv = w.value();
        auto& gx = x.grad_storage();
        for (int i = 0; i < n; ++i)
          for (int u = 0; u < k; ++u) {
            const int src = i + u - off;
            if (src < 0 || src >= n) continue;
            for (int c = 0; c < cin; ++c) {
              T acc{0};
              const T* wrow = &wv[static_cast<std::size_t>((u * cin + c)) * cout];
              const T* grow = &go[static_cast<std::size_t>(i) * cout];
              for (int j = 0; j < cout; ++j) acc += wrow[j] * grow[j];
              gx[static_cast<std::size_t>(src * cin + c)] += acc;
            }
          }
      }
    });
  }
  return out;
}

// Dense 2-d convolution on an [h x w x cin] map, weight [kh x kw x cin x cout].
// Masked cells are zeroed on input and output.
template <typename T>
Tensor<T> conv2d(Ctx<T>& ctx, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 const Mask& mask) {
  if (x.ndim() != 3) throw ShapeError("conv2d: expected [h x w x cin]");
  if (w.ndim() != 4) throw ShapeError("conv2d: weight must be [kh x kw x cin x cout]");
  const int h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  const int kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  if (kh % 2 == 0 || kw % 2 == 0) throw ConfigError("conv2d: kernel sides must be odd");
  if (w.dim(2) != cin) throw ShapeError("conv2d: weight channels vs input");
  if (bias.numel() != cout) throw ShapeError("conv2d: bias width");
  if (mask.size() != static_cast<std::int64_t>(h) * wd) throw ShapeError("conv2d: mask size vs h*w");
  const int oh = kh / 2, ow = kw / 2;

  auto mx = std::make_shared<std::vector<T>>(x.value().begin(), x.value().end());
  for (int p = 0; p < h * wd; ++p)
    if (!mask.at(p)) std::fill(mx->begin() + static_cast<std::ptrdiff_t>(p) * cin, mx->begin() + static_cast<std::ptrdiff_t>(p + 1) * cin, T{0});

  auto out = Tensor<T>::zeros({h, wd, cout});
  {
    auto wv = w.value();
    auto bv = bias.value();
    auto ov = out.value();
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < wd; ++j) {
        if (!mask.at(i * wd + j)) continue;
        T* orow = &ov[static_cast<std::size_t>(i * wd + j) * cout];
        for (int q = 0; q < cout; ++q) orow[q] = bv[q];
        for (int u = 0; u < kh; ++u) {
          const int si = i + u - oh;
          if (si < 0 || si >= h) continue;
          for (int v = 0; v < kw; ++v) {
            const int sj = j + v - ow;
            if (sj < 0 || sj >= wd) continue;
            const T* xr = &(*mx)[static_cast<std::size_t>(si * wd + sj) * cin];
            const T* wr = &wv[static_cast<std::size_t>(((u * kw) + v) * cin) * cout];
            for (int c = 0; c < cin; ++c) {
              const T xc = xr[c];
              if (xc == T{0}) continue;
              const T* wrow = wr + static_cast<std::ptrdiff_t>(c) * cout;
              for (int q = 0; q < cout; ++q) orow[q] += xc * wrow[q];
            }
          }
        }
      }
  }

  if (ctx.recording() && detail::any_needs_grad(x, w, bias)) {
    out.mark_from_op();
    ctx.tape->record([x, w, bias, out, mask, mx, h, wd, cin, kh, kw, cout, oh, ow]() {
      if (!out.grad_touched()) return;
      const auto& go_raw = out.grad_storage();
      std::vector<T> go(go_raw.begin(), go_raw.end());
      for (int p = 0; p < h * wd; ++p)
        if (!mask.at(p))
          std::fill(go.begin() + static_cast<std::ptrdiff_t>(p) * cout, go.begin() + static_cast<std::ptrdiff_t>(p + 1) * cout, T{0});
      if (bias.needs_grad()) {
        auto& gb = bias.grad_storage();
        for (int p = 0; p < h * wd; ++p)
          if (mask.at(p))
            for (int q = 0; q < cout; ++q) gb[static_cast<std::size_t>(q)] += go[static_cast<std::size_t>(p * cout + q)];
      }
      const bool need_w = w.needs_grad();
      const bool need_x = x.needs_grad();
      if (!need_w && !need_x) return;
      auto wv = w.value();
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < wd; ++j) {
          const T* grow = &go[static_cast<std::size_t>(i * wd + j) * cout];
          bool dead = true;
          for (int q = 0; q < cout; ++q)
            if (grow[q] != T{0}) { dead = false; break; }
          if (dead) continue;
          for (int u = 0; u < kh; ++u) {
            const int si = i + u - oh;
            if (si < 0 || si >= h) continue;
            for (int v = 0; v < kw; ++v) {
              const int sj = j + v - ow;
              if (sj < 0 || sj >= wd) continue;
              const std::size_t src = static_cast<std::size_t>(si * wd + sj);
              for (int c = 0; c < cin; ++c) {
                const std::size_t widx = static_cast<std::size_t>(((u * kw) + v) * cin + c) * cout;
                if (need_w) {
                  const T xc = (*mx)[src * cin + c];
                  if (xc != T{0}) {
                    auto& gw = w.grad_storage();
                    for (int q = 0; q < cout; ++q) gw[widx + q] += xc * grow[q];
                  }
                }
                if (need_x && mask.at(static_cast<std::int64_t>(src))) {
                  T acc{0};
                  for (int q = 0; q < cout; ++q) acc += wv[widx + q] * grow[q];
                  x.grad_storage()[src * cin + c] += acc;
                }
              }
            }
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// attention and losses
// ---------------------------------------------------------------------------

// Single-head scaled dot-product self-attention with square projections.
template <typename T>
Tensor<T> self_attention(Ctx<T>& ctx, const Tensor<T>& x, const Tensor<T>& wq,
                         const Tensor<T>& wk, const Tensor<T>& wv, const Mask& mask) {
  detail::check_2d(x, "self_attention");
  const int d = x.dim(1);
  for (const Tensor<T>* w : {&wq, &wk, &wv})
    if (w->ndim() != 2 || w->dim(0) != d || w->dim(1) != d)
      throw ShapeError("self_attention: projections must be " + std::to_string(d) + "x" +
                       std::to_string(d));
  auto q = matmul(ctx, x, wq);
  auto k = matmul(ctx, x, wk);
  auto v = matmul(ctx, x, wv);
  auto logits = matmul(ctx, q, transpose(ctx, k));
  logits = scale(ctx, logits, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  auto att = masked_softmax(ctx, logits, 1, mask);
  return matmul(ctx, att, v);
}

// -log p at the target index of a probability vector.
template <typename T>
Tensor<T> cross_entropy_categorical(Ctx<T>& ctx, const Tensor<T>& p, int target) {
  if (p.ndim() > 2 || (p.ndim() == 2 && p.dim(0) != 1))
    throw ShapeError("cross_entropy_categorical: expected a probability vector");
  const int n = static_cast<int>(p.numel());
  if (target < 0 || target >= n)
    throw ContractError("cross_entropy_categorical: target " + std::to_string(target) +
                        " outside [0," + std::to_string(n) + ")");
  constexpr double kClamp = 1e-12;
  const double pt = std::clamp(static_cast<double>(p.value()[target]), kClamp, 1.0 - kClamp);
  auto out = Tensor<T>::scalar(static_cast<T>(-std::log(pt)));
  if (ctx.recording() && p.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([p, out, target, pt]() {
      if (!out.grad_touched()) return;
      const T g = out.grad_storage()[0];
      p.grad_storage()[static_cast<std::size_t>(target)] += g * static_cast<T>(-1.0 / pt);
    });
  }
  return out;
}

// -[t log p + (1-t) log(1-p)] on a scalar probability.
template <typename T>
Tensor<T> cross_entropy_binary(Ctx<T>& ctx, const Tensor<T>& p, int target) {
  if (p.numel() != 1) throw ShapeError("cross_entropy_binary: expected a scalar probability");
  if (target != 0 && target != 1)
    throw ContractError("cross_entropy_binary: target must be 0 or 1");
  constexpr double kClamp = 1e-12;
  const double pv = std::clamp(static_cast<double>(p.value()[0]), kClamp, 1.0 - kClamp);
  const double loss = target == 1 ? -std::log(pv) : -std::log(1.0 - pv);
  auto out = Tensor<T>::scalar(static_cast<T>(loss));
  if (ctx.recording() && p.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([p, out, target, pv]() {
      if (!out.grad_touched()) return;
      const T g = out.grad_storage()[0];
      const double dp = target == 1 ? -1.0 / pv : 1.0 / (1.0 - pv);
      p.grad_storage()[0] += g * static_cast<T>(dp);
    });
  }
  return out;
}

// y = x W + b as a single fused primitive would be overkill; compose.
template <typename T>
Tensor<T> linear(Ctx<T>& ctx, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  auto y = matmul(ctx, x, w);
  if (b.defined()) y = add_row(ctx, y, b);
  return y;
}

// Zero out masked rows (constant mask, straight-through adjoint on kept rows).
template <typename T>
Tensor<T> apply_row_mask(Ctx<T>& ctx, const Tensor<T>& x, const Mask& mask) {
  detail::check_2d(x, "apply_row_mask");
  const int n = x.dim(0), d = x.dim(1);
  if (mask.size() != n) throw ShapeError("apply_row_mask: mask length vs rows");
  auto out = Tensor<T>::zeros(x.shape());
  auto xv = x.value();
  auto ov = out.value();
  for (int i = 0; i < n; ++i) {
    if (!mask.at(i)) continue;
    for (int j = 0; j < d; ++j) ov[i * d + j] = xv[i * d + j];
  }
  if (ctx.recording() && x.needs_grad()) {
    out.mark_from_op();
    ctx.tape->record([x, out, mask, n, d]() {
      if (!out.grad_touched()) return;
      const auto& go = out.grad_storage();
      auto& gx = x.grad_storage();
      for (int i = 0; i < n; ++i) {
        if (!mask.at(i)) continue;
        for (int j = 0; j < d; ++j) gx[static_cast<std::size_t>(i * d + j)] += go[static_cast<std::size_t>(i * d + j)];
      }
    });
  }
  return out;
}

// Sinusoidal position signal, interleaved sin/cos: channel 2i is
// sin(pos * w_i), channel 2i+1 is cos(pos * w_i), w_i = 10000^(-2i/d).
template <typename T>
Tensor<T> positional_encoding(int n, int d) {
  auto pe = Tensor<T>::zeros({n, d});
  auto v = pe.value();
  for (int pos = 0; pos < n; ++pos)
    for (int i = 0; i + 1 < d + 1; i += 2) {
      const double w = std::pow(10000.0, -static_cast<double>(i) / d);
      v[pos * d + i] = static_cast<T>(std::sin(pos * w));
      if (i + 1 < d) v[pos * d + i + 1] = static_cast<T>(std::cos(pos * w));
    }
  return pe;
}

}  // namespace equant
