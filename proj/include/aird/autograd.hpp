#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aird/tensor.hpp"

namespace aird {

inline constexpr double kLogFloor = 1e-12;

namespace kernel {

// C[m×n] (+)= A[m×k] · B[k×n], row-major.
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate = false) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m×n] (+)= A[m×k] · B[n×k]ᵀ
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate = false) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

// C[k×n] (+)= A[m×k]ᵀ · B[m×n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate = false) {
  if (!accumulate) std::fill(c, c + k * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernel

class Graph;

/// Handle to a value recorded on a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const;
};

/// Append-only tape. Backward walks nodes in reverse append order, once each.
/// A Graph is confined to one thread.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t) { return push(std::move(t), {}, nullptr, false, nullptr); }

  // Leaf bound to an external parameter; backward accumulates into param.grad.
  Var param(Tensor& p) {
    Tensor copy(p.shape(), p.storage());
    return push(std::move(copy), {}, nullptr, p.requires_grad(), &p);
  }

  // Unbound leaf whose gradient is read back with grad().
  Var variable(Tensor t) { return push(std::move(t), {}, nullptr, true, nullptr); }

  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool needs = false;
    for (auto i : inputs) needs = needs || nodes_.at(i).needs_grad;
    return push(std::move(value), std::move(inputs), needs ? std::move(fn) : nullptr, needs, nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  std::span<const double> grad(Var v) const { return nodes_.at(v.id).grad; }

  // Zero-initialised on first touch.
  std::vector<double>& grad_buffer(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  void backward(Var loss) {
    if (loss.graph != this) throw ContractError("backward: loss belongs to another graph");
    if (value(loss.id).size() != 1)
      throw ContractError("backward: loss must be scalar, got shape " +
                          to_string(value(loss.id).shape()));
    grad_buffer(loss.id)[0] += 1.0;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, id);
      if (n.bound) n.bound->accumulate_grad(n.grad);
    }
  }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
    Tensor* bound = nullptr;
  };

  Var push(Tensor v, std::vector<std::size_t> inputs, BackwardFn fn, bool needs, Tensor* bound) {
    nodes_.push_back(Node{std::move(v), {}, std::move(inputs), std::move(fn), needs, bound});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(id); }
inline double Var::item() const {
  if (value().size() != 1) throw ContractError("item() on non-scalar " + to_string(shape()));
  return value()[0];
}

namespace detail {

inline Graph& same_graph(Var a, Var b) {
  if (a.graph != b.graph) throw ContractError("operands recorded on different graphs");
  return *a.graph;
}

// Binary ops accept equal shapes, a trailing-suffix shape, or a single element.
inline bool broadcastable(const Shape& big, const Shape& small) {
  if (shape_size(small) == 1) return true;
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <class F, class DA, class DB>
Var binary(Var a, Var b, std::string_view name, F f, DA da, DB db) {
  Graph& g = same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool a_big = av.size() > bv.size() || (av.size() == bv.size() && av.rank() >= bv.rank());
  const Shape& big = a_big ? av.shape() : bv.shape();
  const Shape& small = a_big ? bv.shape() : av.shape();
  if (!broadcastable(big, small))
    throw DimensionError(std::string(name) + ": cannot broadcast " + to_string(av.shape()) + " with " +
                         to_string(bv.shape()));
  Tensor out(big);
  const std::size_t na = av.size(), nb = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i % na], bv[i % nb]);
  return g.record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id, na, nb, da, db](Graph& g, std::size_t self) {
    const auto& go = g.grad_buffer(self);
    const Tensor& x = g.value(ia);
    const Tensor& y = g.value(ib);
    if (g.needs_grad(ia)) {
      auto& gx = g.grad_buffer(ia);
      for (std::size_t i = 0; i < go.size(); ++i) gx[i % na] += go[i] * da(x[i % na], y[i % nb]);
    }
    if (g.needs_grad(ib)) {
      auto& gy = g.grad_buffer(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gy[i % nb] += go[i] * db(x[i % na], y[i % nb]);
    }
  });
}

// f maps x -> y; df maps (x, y) -> dy/dx.
template <class F, class DF>
Var unary(Var a, F f, DF df) {
  Graph& g = *a.graph;
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return g.record(std::move(out), {a.id}, [ia = a.id, df](Graph& g, std::size_t self) {
    const auto& go = g.grad_buffer(self);
    const Tensor& x = g.value(ia);
    const Tensor& y = g.value(self);
    auto& gx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * df(x[i], y[i]);
  });
}

inline void require_rank(const Tensor& t, std::size_t r, std::string_view op) {
  if (t.rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         to_string(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}
inline Var sub(Var a, Var b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}
inline Var mul(Var a, Var b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

inline Var scale(Var a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}
inline Var add_scalar(Var a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}
inline Var relu(Var a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
inline Var exp(Var a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Var sigmoid(Var a) {
  return detail::unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

// Inputs in [0, kLogFloor) are raised to the floor; negative or NaN inputs are a
// domain error.
inline Var log(Var a) {
  for (double v : a.value().data())
    if (!(v >= 0.0)) throw NumericError("log: non-positive input " + std::to_string(v));
  return detail::unary(
      a, [](double x) { return std::log(std::max(x, kLogFloor)); },
      [](double x, double) { return x >= kLogFloor ? 1.0 / x : 0.0; });
}

// Gradient is zero where the input lies outside [lo, hi].
inline Var clamp(Var a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra and shape

inline Var matmul(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw DimensionError("matmul: incompatible shapes " + to_string(av.shape()) + " and " +
                         to_string(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  kernel::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return g.record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id, m, k, n](Graph& g, std::size_t self) {
    const auto& go = g.grad_buffer(self);
    if (g.needs_grad(ia))
      kernel::gemm_nt(go.data(), g.value(ib).data().data(), g.grad_buffer(ia).data(), m, n, k, true);
    if (g.needs_grad(ib))
      kernel::gemm_tn(g.value(ia).data().data(), go.data(), g.grad_buffer(ib).data(), m, k, n, true);
  });
}

inline Var transpose(Var a) {
  const Tensor& av = a.value();
  detail::require_rank(av, 2, "transpose");
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return a.graph->record(std::move(out), {a.id}, [ia = a.id, r, c](Graph& g, std::size_t self) {
    const auto& go = g.grad_buffer(self);
    auto& gx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += go[j * r + i];
  });
}

inline Var reshape(Var a, Shape s) {
  Tensor out = a.value().reshaped(std::move(s));
  return a.graph->record(std::move(out), {a.id}, [ia = a.id](Graph& g, std::size_t self) {
    const auto& go = g.grad_buffer(self);
    auto& gx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
}

// [n×p] ++ [n×q] -> [n×(p+q)]
inline Var concat_cols(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank(av, 2, "concat_cols");
  detail::require_rank(bv, 2, "concat_cols");
  if (av.dim(0) != bv.dim(0))
    throw DimensionError("concat_cols: row mismatch " + to_string(av.shape()) + " vs " + to_string(bv.shape()));
  const std::size_t n = av.dim(0), p = av.dim(1), q = bv.dim(1);
  Tensor out({n, p + q});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(av.data().data() + i * p, p, out.data().data() + i * (p + q));
    std::copy_n(bv.data().data() + i * q, q, out.data().data() + i * (p + q) + p);
  }
  return g.record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id, n, p, q](Graph& g, std::size_t self) {
    const auto& go = g.grad_buffer(self);
    if (g.needs_grad(ia)) {
      auto& gx = g.grad_buffer(ia);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < p; ++j) gx[i * p + j] += go[i * (p + q) + j];
    }
    if (g.needs_grad(ib)) {
      auto& gy = g.grad_buffer(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < q; ++j) gy[i * q + j] += go[i * (p + q) + p + j];
    }
  });
}

// Selects rows (first axis) by index; repeated indices accumulate gradient.
inline Var gather_rows(Var a, std::vector<std::size_t> rows) {
  const Tensor& av = a.value();
  if (av.rank() < 1) throw DimensionError("gather_rows on scalar");
  const std::size_t n = av.dim(0);
  const std::size_t w = av.size() / n;
  Shape s = av.shape();
  s[0] = rows.size();
  Tensor out(s);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw DimensionError("gather_rows: index " + std::to_string(rows[r]) + " out of range");
    std::copy_n(av.data().data() + rows[r] * w, w, out.data().data() + r * w);
  }
  return a.graph->record(std::move(out), {a.id}, [ia = a.id, rows = std::move(rows), w](Graph& g, std::size_t self) {
    const auto& go = g.grad_buffer(self);
    auto& gx = g.grad_buffer(ia);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < w; ++j) gx[rows[r] * w + j] += go[r * w + j];
  });
}

// out[i] = a[i, cols[i]] for a [n×c].
inline Var pick(Var a, std::vector<std::size_t> cols) {
  const Tensor& av = a.value();
  detail::require_rank(av, 2, "pick");
  const std::size_t n = av.dim(0), c = av.dim(1);
  if (cols.size() != n) throw DimensionError("pick: need one column per row");
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    if (cols[i] >= c) throw DimensionError("pick: column out of range");
    out[i] = av[i * c + cols[i]];
  }
  return a.graph->record(std::move(out), {a.id}, [ia = a.id, cols = std::move(cols), c](Graph& g, std::size_t self) {
    const auto& go = g.grad_buffer(self);
    auto& gx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < cols.size(); ++i) gx[i * c + cols[i]] += go[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

enum class ReduceOp { sum, mean, max };

inline Var sum(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.data()) s += v;
  return a.graph->record(Tensor({1}, {s}), {a.id}, [ia = a.id](Graph& g, std::size_t self) {
    const double go = g.grad_buffer(self)[0];
    for (auto& x : g.grad_buffer(ia)) x += go;
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// Reduces along one axis; max routes gradient to the first maximal index.
inline Var reduce(ReduceOp op, Var a, std::size_t axis) {
  const Tensor& av = a.value();
  if (axis >= av.rank())
    throw DimensionError("reduce: axis " + std::to_string(axis) + " invalid for " + to_string(av.shape()));
  const Shape& s = av.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t ext = s[axis];
  Shape os;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) os.push_back(s[i]);
  if (os.empty()) os.push_back(1);
  Tensor out(os);
  std::vector<std::size_t> arg(op == ReduceOp::max ? outer * inner : 0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const double* base = av.data().data() + o * ext * inner + in;
      double acc = op == ReduceOp::max ? -std::numeric_limits<double>::infinity() : 0.0;
      std::size_t best = 0;
      for (std::size_t e = 0; e < ext; ++e) {
        const double v = base[e * inner];
        if (op == ReduceOp::max) {
          if (v > acc) acc = v, best = e;
        } else {
          acc += v;
        }
      }
      if (op == ReduceOp::mean) acc /= static_cast<double>(ext);
      out[o * inner + in] = acc;
      if (op == ReduceOp::max) arg[o * inner + in] = best;
    }
  return a.graph->record(std::move(out), {a.id},
                         [ia = a.id, op, outer, inner, ext, arg = std::move(arg)](Graph& g, std::size_t self) {
                           const auto& go = g.grad_buffer(self);
                           auto& gx = g.grad_buffer(ia);
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t in = 0; in < inner; ++in) {
                               const double d = go[o * inner + in];
                               const std::size_t base = o * ext * inner + in;
                               if (op == ReduceOp::max) {
                                 gx[base + arg[o * inner + in] * inner] += d;
                               } else {
                                 const double w = op == ReduceOp::mean ? d / static_cast<double>(ext) : d;
                                 for (std::size_t e = 0; e < ext; ++e) gx[base + e * inner] += w;
                               }
                             }
                         });
}

// ---------------------------------------------------------------------------
// Softmax family (last axis of a rank-2 tensor)

inline Var softmax(Var a) {
  const Tensor& av = a.value();
  detail::require_rank(av, 2, "softmax");
  const std::size_t n = av.dim(0), c = av.dim(1);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = av.data().data() + i * c;
    double* p = out.data().data() + i * c;
    const double mx = *std::max_element(z, z + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (p[j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < c; ++j) p[j] /= s;
  }
  return a.graph->record(std::move(out), {a.id}, [ia = a.id, n, c](Graph& g, std::size_t self) {
    const auto& go = g.grad_buffer(self);
    const Tensor& p = g.value(self);
    auto& gx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += go[i * c + j] * p[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += p[i * c + j] * (go[i * c + j] - dot);
    }
  });
}

// Row-wise log-sum-exp. When `exclude` is given, column exclude[i] is left out
// of row i (and receives no gradient).
inline Var logsumexp_rows(Var a, std::optional<std::vector<std::size_t>> exclude = std::nullopt) {
  const Tensor& av = a.value();
  detail::require_rank(av, 2, "logsumexp_rows");
  const std::size_t n = av.dim(0), c = av.dim(1);
  constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> skip(n, none);
  if (exclude) {
    if (exclude->size() != n) throw DimensionError("logsumexp_rows: exclude list length mismatch");
    if (c < 2) throw DimensionError("logsumexp_rows: nothing left after exclusion");
    skip = *exclude;
  }
  Tensor out({n});
  Tensor soft(av.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = av.data().data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (j != skip[i]) mx = std::max(mx, z[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (j != skip[i]) s += (soft[i * c + j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < c; ++j) soft[i * c + j] /= s;
    out[i] = mx + std::log(s);
  }
  return a.graph->record(std::move(out), {a.id}, [ia = a.id, n, c, soft = std::move(soft)](Graph& g, std::size_t self) {
    const auto& go = g.grad_buffer(self);
    auto& gx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += go[i] * soft[i * c + j];
  });
}

inline Var log_softmax(Var a) {
  const Tensor& av = a.value();
  detail::require_rank(av, 2, "log_softmax");
  const std::size_t n = av.dim(0), c = av.dim(1);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = av.data().data() + i * c;
    const double mx = *std::max_element(z, z + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = z[j] - lse;
  }
  return a.graph->record(std::move(out), {a.id}, [ia = a.id, n, c](Graph& g, std::size_t self) {
    const auto& go = g.grad_buffer(self);
    const Tensor& lp = g.value(self);
    auto& gx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += go[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += go[i * c + j] - std::exp(lp[i * c + j]) * gs;
    }
  });
}

// Mean negative log-likelihood of integer labels under softmax(logits).
inline Var cross_entropy(Var logits, const std::vector<std::size_t>& labels) {
  return scale(sum(pick(log_softmax(logits), labels)), -1.0 / static_cast<double>(labels.size()));
}

// ---------------------------------------------------------------------------
// Vector geometry

// Divides each row by its L2 norm. strict: zero-norm rows throw; otherwise the
// norm is floored at kLogFloor.
inline Var l2_normalize_rows(Var a, bool strict = true) {
  const Tensor& av = a.value();
  detail::require_rank(av, 2, "l2_normalize_rows");
  const std::size_t n = av.dim(0), d = av.dim(1);
  Tensor out(av.shape());
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += av[i * d + j] * av[i * d + j];
    double nr = std::sqrt(s);
    if (nr < kLogFloor) {
      if (strict) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(i));
      nr = kLogFloor;
    }
    norms[i] = nr;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = av[i * d + j] / nr;
  }
  return a.graph->record(std::move(out), {a.id}, [ia = a.id, n, d, norms = std::move(norms)](Graph& g, std::size_t self) {
    const auto& go = g.grad_buffer(self);
    const Tensor& y = g.value(self);
    auto& gx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += go[i * d + j] * y[i * d + j];
      for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += (go[i * d + j] - y[i * d + j] * dot) / norms[i];
    }
  });
}

// out[i] = <a_i, b_i> for equal-shape [n×d] inputs.
inline Var rowwise_dot(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank(av, 2, "rowwise_dot");
  if (av.shape() != bv.shape())
    throw DimensionError("rowwise_dot: shape mismatch " + to_string(av.shape()) + " vs " + to_string(bv.shape()));
  const std::size_t n = av.dim(0), d = av.dim(1);
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += av[i * d + j] * bv[i * d + j];
    out[i] = s;
  }
  return g.record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id, n, d](Graph& g, std::size_t self) {
    const auto& go = g.grad_buffer(self);
    const Tensor& x = g.value(ia);
    const Tensor& y = g.value(ib);
    if (g.needs_grad(ia)) {
      auto& gx = g.grad_buffer(ia);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += go[i] * y[i * d + j];
    }
    if (g.needs_grad(ib)) {
      auto& gy = g.grad_buffer(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gy[i * d + j] += go[i] * x[i * d + j];
    }
  });
}

inline Var cosine_rows(Var a, Var b, bool strict = true) {
  return rowwise_dot(l2_normalize_rows(a, strict), l2_normalize_rows(b, strict));
}

// ---------------------------------------------------------------------------
// Image ops (NCHW)

struct ConvGeometry {
  std::size_t batch, channels, height, width, kernel, stride, pad;
  std::size_t out_h() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_w() const { return (width + 2 * pad - kernel) / stride + 1; }
};

inline ConvGeometry conv_geometry(const Shape& s, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (s.size() != 4) throw DimensionError("conv input must be B×C×H×W, got " + to_string(s));
  if (stride == 0 || kernel == 0) throw DimensionError("conv: kernel and stride must be positive");
  if (s[2] + 2 * pad < kernel || s[3] + 2 * pad < kernel ||
      (s[2] + 2 * pad - kernel) % stride != 0 || (s[3] + 2 * pad - kernel) % stride != 0)
    throw DimensionError("conv: geometry " + to_string(s) + " incompatible with kernel " + std::to_string(kernel) +
                         " stride " + std::to_string(stride) + " pad " + std::to_string(pad));
  return {s[0], s[1], s[2], s[3], kernel, stride, pad};
}

// [B×C×H×W] -> [(B·Ho·Wo) × (C·k·k)]
inline Var im2col(Var x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  const Tensor& xv = x.value();
  const ConvGeometry geo = conv_geometry(xv.shape(), kernel, stride, pad);
  const std::size_t ho = geo.out_h(), wo = geo.out_w();
  const std::size_t cols = geo.channels * kernel * kernel;
  // Source offset per (row, col); -1 marks padding.
  std::vector<std::ptrdiff_t> src(geo.batch * ho * wo * cols);
  Tensor out({geo.batch * ho * wo, cols});
  std::size_t r = 0;
  for (std::size_t b = 0; b < geo.batch; ++b)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox, ++r)
        for (std::size_t c = 0; c < geo.channels; ++c)
          for (std::size_t ky = 0; ky < kernel; ++ky)
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              const std::size_t col = (c * kernel + ky) * kernel + kx;
              std::ptrdiff_t off = -1;
              if (iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(geo.height) &&
                  ix < static_cast<std::ptrdiff_t>(geo.width))
                off = static_cast<std::ptrdiff_t>(((b * geo.channels + c) * geo.height + iy) * geo.width + ix);
              src[r * cols + col] = off;
              out[r * cols + col] = off >= 0 ? xv[static_cast<std::size_t>(off)] : 0.0;
            }
  return x.graph->record(std::move(out), {x.id}, [ix = x.id, src = std::move(src)](Graph& g, std::size_t self) {
    const auto& go = g.grad_buffer(self);
    auto& gx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < src.size(); ++i)
      if (src[i] >= 0) gx[static_cast<std::size_t>(src[i])] += go[i];
  });
}

// [(B·H·W) × C] -> [B×C×H×W]
inline Var rows_to_nchw(Var a, std::size_t batch, std::size_t h, std::size_t w) {
  const Tensor& av = a.value();
  detail::require_rank(av, 2, "rows_to_nchw");
  if (av.dim(0) != batch * h * w) throw DimensionError("rows_to_nchw: row count mismatch");
  const std::size_t c = av.dim(1);
  Tensor out({batch, c, h, w});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t p = 0; p < h * w; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) out[(b * c + ch) * h * w + p] = av[(b * h * w + p) * c + ch];
  return a.graph->record(std::move(out), {a.id}, [ia = a.id, batch, c, hw = h * w](Graph& g, std::size_t self) {
    const auto& go = g.grad_buffer(self);
    auto& gx = g.grad_buffer(ia);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) gx[(b * hw + p) * c + ch] += go[(b * c + ch) * hw + p];
  });
}

// 2×2 max pooling, stride 2; ties route to the first element in scan order.
inline Var maxpool2(Var x) {
  const Tensor& xv = x.value();
  detail::require_rank(xv, 4, "maxpool2");
  const std::size_t b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h % 2 || w % 2) throw DimensionError("maxpool2: odd spatial extent " + to_string(xv.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor out({b, c, ho, wo});
  std::vector<std::size_t> arg(out.size());
  for (std::size_t plane = 0; plane < b * c; ++plane)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t bi = 0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = plane * h * w + (2 * oy + dy) * w + 2 * ox + dx;
            if (xv[idx] > best) best = xv[idx], bi = idx;
          }
        const std::size_t o = plane * ho * wo + oy * wo + ox;
        out[o] = best;
        arg[o] = bi;
      }
  return x.graph->record(std::move(out), {x.id}, [ix = x.id, arg = std::move(arg)](Graph& g, std::size_t self) {
    const auto& go = g.grad_buffer(self);
    auto& gx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += go[i];
  });
}

}  // namespace aird
