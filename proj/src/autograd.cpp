#include "forge/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace forge {

// ---- Graph ----------------------------------------------------------------

template <typename T>
void Graph<T>::check_recordable() const {
  if (backward_done_) throw AutodiffError("graph: recording after backward requires reset()");
}

template <typename T>
Var<T> Graph<T>::leaf(Tensor<T> value, bool requires_grad) {
  check_recordable();
  nodes_.push_back(Node{"leaf", std::move(value), {}, {}, requires_grad});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::record(std::string_view kind, Tensor<T> value, std::vector<NodeId> inputs,
                        BackwardFn fn) {
  check_recordable();
  bool needs = false;
  for (auto id : inputs) {
    if (id >= nodes_.size()) throw AutodiffError("graph: input node from the future");
    needs = needs || nodes_[id].requires_grad;
  }
  if (!needs) fn = nullptr;
  nodes_.push_back(Node{std::string(kind), std::move(value), std::move(inputs), std::move(fn), needs});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
const Tensor<T>& Graph<T>::grad(NodeId id) const {
  if (!has_grad(id)) throw AutodiffError("graph: no gradient for node " + std::to_string(id));
  return *grads_[id];
}

template <typename T>
Tensor<T>& Graph<T>::grad_slot(NodeId id) {
  if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
  auto& slot = grads_[id];
  if (!slot) slot.emplace(nodes_[id].value.shape(), T{0});
  return *slot;
}

template <typename T>
void Graph<T>::accumulate(NodeId id, const Tensor<T>& g) {
  if (!nodes_.at(id).requires_grad) return;
  auto& slot = grad_slot(id);
  if (slot.shape() != g.shape()) {
    throw ShapeError("graph: gradient shape " + shape_str(g.shape()) + " for node of shape " +
                     shape_str(slot.shape()));
  }
  auto dst = slot.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void Graph<T>::backward(const Var<T>& seed) {
  if (&seed.graph() != this) throw AutodiffError("graph: seed belongs to another graph");
  if (backward_done_) throw AutodiffError("graph: backward called twice without reset()");
  const auto& sv = nodes_.at(seed.id()).value;
  if (sv.numel() != 1) {
    throw AutodiffError("graph: backward seed must be scalar, got shape " + shape_str(sv.shape()));
  }
  grads_.assign(nodes_.size(), std::nullopt);
  grads_[seed.id()].emplace(sv.shape(), T{1});
  for (NodeId id = seed.id() + 1; id-- > 0;) {
    auto& node = nodes_[id];
    if (node.backward && grads_[id]) node.backward(*this, id);
  }
  backward_done_ = true;
}

template <typename T>
void Graph<T>::reset() {
  nodes_.clear();
  grads_.clear();
  backward_done_ = false;
}

// ---- helpers --------------------------------------------------------------

std::size_t normalize_axis(int axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  const long a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t d = 0; d < r; ++d) {
    const std::size_t da = d + a.size() >= r ? a[d + a.size() - r] : 1;
    const std::size_t db = d + b.size() >= r ? b[d + b.size() - r] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[d] = std::max(da, db);
  }
  return out;
}

namespace {

template <typename T>
Graph<T>& common_graph(const Var<T>& a, const Var<T>& b) {
  if (!a.valid() || !b.valid()) throw AutodiffError("op on an empty Var");
  if (&a.graph() != &b.graph()) throw AutodiffError("op mixes Vars from different graphs");
  return a.graph();
}

// Strides of `in` viewed in the rank of `out`, zero on broadcast dimensions.
std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t s = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    const std::size_t d = k + r - in.size();
    strides[d] = (in[k] == 1 && out[d] != 1) ? 0 : s;
    s *= in[k];
  }
  return strides;
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> sa, sb;
  bool same = false;     // both inputs already have the output shape
  bool b_scalar = false; // a has the output shape, b is a single element

  BroadcastPlan(const Shape& a, const Shape& b) : out(broadcast_shape(a, b)) {
    same = (a == out && b == out);
    b_scalar = (a == out && shape_numel(b) == 1);
    sa = aligned_strides(a, out);
    sb = aligned_strides(b, out);
  }

  template <class F>
  void visit(F&& f) const {
    const std::size_t n = shape_numel(out);
    if (same) {
      for (std::size_t i = 0; i < n; ++i) f(i, i, i);
      return;
    }
    if (b_scalar) {
      for (std::size_t i = 0; i < n; ++i) f(i, i, std::size_t{0});
      return;
    }
    const std::size_t r = out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < n; ++o) {
      f(o, ia, ib);
      for (std::size_t d = r; d-- > 0;) {
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
};

// Partials(a, b, y) returns {dy/da, dy/db}.
template <typename T, class Fwd, class Partials>
Var<T> binary(std::string_view kind, const Var<T>& a, const Var<T>& b, Fwd fwd, Partials partials) {
  auto& g = common_graph(a, b);
  BroadcastPlan plan(a.shape(), b.shape());
  Tensor<T> out(plan.out);
  const auto& av = a.value();
  const auto& bv = b.value();
  plan.visit([&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = fwd(av[ia], bv[ib]); });
  const NodeId aid = a.id(), bid = b.id();
  return g.record(kind, std::move(out), {aid, bid},
                  [plan = std::move(plan), aid, bid, partials](Graph<T>& graph, NodeId self) {
                    const auto& go = graph.grad(self);
                    const auto& y = graph.value(self);
                    const auto& x1 = graph.value(aid);
                    const auto& x2 = graph.value(bid);
                    Tensor<T>* ga = graph.requires_grad(aid) ? &graph.grad_slot(aid) : nullptr;
                    Tensor<T>* gb = graph.requires_grad(bid) ? &graph.grad_slot(bid) : nullptr;
                    plan.visit([&](std::size_t o, std::size_t ia, std::size_t ib) {
                      const auto [da, db] = partials(x1[ia], x2[ib], y[o]);
                      if (ga) (*ga)[ia] += go[o] * da;
                      if (gb) (*gb)[ib] += go[o] * db;
                    });
                  });
}

// Deriv(x, y) returns dy/dx.
template <typename T, class Fwd, class Deriv>
Var<T> unary(std::string_view kind, const Var<T>& x, Fwd fwd, Deriv deriv) {
  auto& g = x.graph();
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = fwd(xv[i]);
  const NodeId xid = x.id();
  return g.record(kind, std::move(out), {xid}, [xid, deriv](Graph<T>& graph, NodeId self) {
    const auto& go = graph.grad(self);
    const auto& y = graph.value(self);
    const auto& xv2 = graph.value(xid);
    auto& gx = graph.grad_slot(xid);
    for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * deriv(xv2[i], y[i]);
  });
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit k;
  for (std::size_t d = 0; d < axis; ++d) k.outer *= s[d];
  k.n = s[axis];
  for (std::size_t d = axis + 1; d < s.size(); ++d) k.inner *= s[d];
  return k;
}

template <typename T>
T sigmoid_value(T z) {
  if (z >= 0) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

}  // namespace

// ---- element-wise ---------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary<T>("add", a, b, [](T x, T y) { return x + y; },
                   [](T, T, T) { return std::pair<T, T>{T(1), T(1)}; });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary<T>("sub", a, b, [](T x, T y) { return x - y; },
                   [](T, T, T) { return std::pair<T, T>{T(1), T(-1)}; });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary<T>("mul", a, b, [](T x, T y) { return x * y; },
                   [](T x, T y, T) { return std::pair<T, T>{y, x}; });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return binary<T>("div", a, b, [](T x, T y) { return x / y; },
                   [](T x, T y, T) { return std::pair<T, T>{T(1) / y, -x / (y * y)}; });
}

template <typename T>
Var<T> neg(const Var<T>& x) {
  return unary<T>("neg", x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  return unary<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> pow(const Var<T>& x, T exponent) {
  return unary<T>("pow", x, [exponent](T v) { return std::pow(v, exponent); },
                  [exponent](T v, T) { return exponent * std::pow(v, exponent - T(1)); });
}

template <typename T>
Var<T> sqrt(const Var<T>& x) {
  return unary<T>("sqrt", x, [](T v) { return std::sqrt(v); },
                  [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary<T>("sigmoid", x, [](T v) { return sigmoid_value(v); },
                  [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  return unary<T>("silu", x, [](T v) { return v * sigmoid_value(v); },
                  [](T v, T) {
                    const T s = sigmoid_value(v);
                    return s * (T(1) + v * (T(1) - s));
                  });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return unary<T>("tanh", x, [](T v) { return std::tanh(v); },
                  [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  return unary<T>("scale", x, [factor](T v) { return v * factor; },
                  [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return unary<T>("add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

// ---- reductions -----------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc{0};
  for (auto v : x.value().data()) acc += v;
  const NodeId xid = x.id();
  return x.graph().record("sum", Tensor<T>::scalar(acc), {xid}, [xid](Graph<T>& graph, NodeId self) {
    const T go = graph.grad(self)[0];
    auto& gx = graph.grad_slot(xid);
    for (auto& v : gx.data()) v += go;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().numel()));
}

template <typename T>
Var<T> sum(const Var<T>& x, int axis) {
  const auto& xv = x.value();
  const std::size_t ax = normalize_axis(axis, xv.rank());
  const AxisSplit k = split_at(xv.shape(), ax);
  Shape os = xv.shape();
  os[ax] = 1;
  Tensor<T> out(os);
  for (std::size_t o = 0; o < k.outer; ++o)
    for (std::size_t j = 0; j < k.n; ++j)
      for (std::size_t i = 0; i < k.inner; ++i) out[o * k.inner + i] += xv[(o * k.n + j) * k.inner + i];
  const NodeId xid = x.id();
  return x.graph().record("sum_axis", std::move(out), {xid}, [xid, k](Graph<T>& graph, NodeId self) {
    const auto& go = graph.grad(self);
    auto& gx = graph.grad_slot(xid);
    for (std::size_t o = 0; o < k.outer; ++o)
      for (std::size_t j = 0; j < k.n; ++j)
        for (std::size_t i = 0; i < k.inner; ++i) gx[(o * k.n + j) * k.inner + i] += go[o * k.inner + i];
  });
}

template <typename T>
Var<T> mean(const Var<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.value().rank());
  return scale(sum(x, axis), T(1) / static_cast<T>(x.value().dim(ax)));
}

template <typename T>
Var<T> max(const Var<T>& x, int axis) {
  const auto& xv = x.value();
  const std::size_t ax = normalize_axis(axis, xv.rank());
  const AxisSplit k = split_at(xv.shape(), ax);
  Shape os = xv.shape();
  os[ax] = 1;
  Tensor<T> out(os);
  std::vector<std::size_t> arg(k.outer * k.inner, 0);
  for (std::size_t o = 0; o < k.outer; ++o) {
    for (std::size_t i = 0; i < k.inner; ++i) {
      std::size_t best = (o * k.n) * k.inner + i;
      for (std::size_t j = 1; j < k.n; ++j) {
        const std::size_t at = (o * k.n + j) * k.inner + i;
        if (xv[at] > xv[best]) best = at;
      }
      out[o * k.inner + i] = xv[best];
      arg[o * k.inner + i] = best;
    }
  }
  const NodeId xid = x.id();
  return x.graph().record("max_axis", std::move(out), {xid},
                          [xid, arg = std::move(arg)](Graph<T>& graph, NodeId self) {
                            const auto& go = graph.grad(self);
                            auto& gx = graph.grad_slot(xid);
                            for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += go[i];
                          });
}

// ---- linear algebra and layout ---------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  auto& g = common_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: shape mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), kk = av.dim(1), n = bv.dim(1);
  Tensor<T> out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = &out[i * n];
    for (std::size_t p = 0; p < kk; ++p) {
      const T aip = av[i * kk + p];
      if (aip == T(0)) continue;
      const T* brow = &bv[p * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  const NodeId aid = a.id(), bid = b.id();
  return g.record("matmul", std::move(out), {aid, bid}, [aid, bid, m, kk, n](Graph<T>& graph, NodeId self) {
    const auto& go = graph.grad(self);
    const auto& x1 = graph.value(aid);
    const auto& x2 = graph.value(bid);
    if (graph.requires_grad(aid)) {
      auto& ga = graph.grad_slot(aid);  // ga += go · x2ᵀ
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < kk; ++p) {
          T acc{0};
          for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * x2[p * n + j];
          ga[i * kk + p] += acc;
        }
    }
    if (graph.requires_grad(bid)) {
      auto& gb = graph.grad_slot(bid);  // gb += x1ᵀ · go
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < kk; ++p) {
          const T aip = x1[i * kk + p];
          if (aip == T(0)) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * go[i * n + j];
        }
    }
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  const auto& xv = x.value();
  if (xv.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(xv.shape()));
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor<T> out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  const NodeId xid = x.id();
  return x.graph().record("transpose", std::move(out), {xid}, [xid, r, c](Graph<T>& graph, NodeId self) {
    const auto& go = graph.grad(self);
    auto& gx = graph.grad_slot(xid);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += go[j * r + i];
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  const auto& xv = x.value();
  if (shape_numel(shape) != xv.numel()) {
    throw ShapeError("reshape: " + shape_str(xv.shape()) + " to " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), xv.storage());
  const NodeId xid = x.id();
  return x.graph().record("reshape", std::move(out), {xid}, [xid](Graph<T>& graph, NodeId self) {
    const auto& go = graph.grad(self);
    auto& gx = graph.grad_slot(xid);
    for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
  });
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  auto& g = parts[0].graph();
  const Shape& first = parts[0].shape();
  const std::size_t ax = normalize_axis(axis, first.size());
  Shape os = first;
  os[ax] = 0;
  std::vector<NodeId> ids;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (&p.graph() != &g) throw AutodiffError("concat: Vars from different graphs");
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = (d == ax) || s[d] == first[d];
    if (!ok) throw ShapeError("concat: " + shape_str(s) + " does not match " + shape_str(first));
    os[ax] += s[ax];
    ids.push_back(p.id());
    widths.push_back(s[ax]);
  }
  const AxisSplit k = split_at(os, ax);
  Tensor<T> out(os);
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& pv = parts[pi].value();
    const std::size_t w = widths[pi];
    for (std::size_t o = 0; o < k.outer; ++o)
      std::copy_n(&pv[o * w * k.inner], w * k.inner, &out[(o * k.n + offset) * k.inner]);
    offset += w;
  }
  return g.record("concat", std::move(out), ids, [ids, widths, k](Graph<T>& graph, NodeId self) {
    const auto& go = graph.grad(self);
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < ids.size(); ++pi) {
      const std::size_t w = widths[pi];
      if (graph.requires_grad(ids[pi])) {
        auto& gp = graph.grad_slot(ids[pi]);
        for (std::size_t o = 0; o < k.outer; ++o)
          for (std::size_t e = 0; e < w * k.inner; ++e)
            gp[o * w * k.inner + e] += go[(o * k.n + off) * k.inner + e];
      }
      off += w;
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& x, int axis, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  const std::size_t ax = normalize_axis(axis, xv.rank());
  if (begin >= end || end > xv.dim(ax)) {
    throw ShapeError("slice: [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                     std::to_string(ax) + " of " + shape_str(xv.shape()));
  }
  const AxisSplit k = split_at(xv.shape(), ax);
  const std::size_t w = end - begin;
  Shape os = xv.shape();
  os[ax] = w;
  Tensor<T> out(os);
  for (std::size_t o = 0; o < k.outer; ++o)
    std::copy_n(&xv[(o * k.n + begin) * k.inner], w * k.inner, &out[o * w * k.inner]);
  const NodeId xid = x.id();
  return x.graph().record("slice", std::move(out), {xid}, [xid, k, begin, w](Graph<T>& graph, NodeId self) {
    const auto& go = graph.grad(self);
    auto& gx = graph.grad_slot(xid);
    for (std::size_t o = 0; o < k.outer; ++o)
      for (std::size_t e = 0; e < w * k.inner; ++e) gx[(o * k.n + begin) * k.inner + e] += go[o * w * k.inner + e];
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& table, std::span<const TokenId> ids) {
  const auto& tv = table.value();
  if (tv.rank() < 1) throw ShapeError("gather_rows: table must have rank >= 1");
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  const std::size_t rows = tv.dim(0);
  const std::size_t width = tv.numel() / rows;
  Shape os = tv.shape();
  os[0] = ids.size();
  Tensor<T> out(os);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw ShapeError("gather_rows: id " + std::to_string(ids[i]) + " out of range for " +
                       std::to_string(rows) + " rows");
    }
    std::copy_n(&tv[static_cast<std::size_t>(ids[i]) * width], width, &out[i * width]);
  }
  std::vector<TokenId> idv(ids.begin(), ids.end());
  const NodeId tid = table.id();
  return table.graph().record("gather_rows", std::move(out), {tid},
                              [tid, width, idv = std::move(idv)](Graph<T>& graph, NodeId self) {
                                const auto& go = graph.grad(self);
                                auto& gt = graph.grad_slot(tid);
                                for (std::size_t i = 0; i < idv.size(); ++i)
                                  for (std::size_t e = 0; e < width; ++e)
                                    gt[static_cast<std::size_t>(idv[i]) * width + e] += go[i * width + e];
                              });
}

template <typename T>
Var<T> where(const Mask& mask, const Var<T>& a, const Var<T>& b) {
  auto& g = common_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const bool a_one = av.numel() == 1 && av.shape() != mask.shape();
  const bool b_one = bv.numel() == 1 && bv.shape() != mask.shape();
  if ((!a_one && av.shape() != mask.shape()) || (!b_one && bv.shape() != mask.shape())) {
    throw ShapeError("where: operands " + shape_str(av.shape()) + ", " + shape_str(bv.shape()) +
                     " against mask " + shape_str(mask.shape()));
  }
  Tensor<T> out(mask.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = mask[i] ? av[a_one ? 0 : i] : bv[b_one ? 0 : i];
  const NodeId aid = a.id(), bid = b.id();
  return g.record("where", std::move(out), {aid, bid}, [mask, aid, bid, a_one, b_one](Graph<T>& graph, NodeId self) {
    const auto& go = graph.grad(self);
    Tensor<T>* ga = graph.requires_grad(aid) ? &graph.grad_slot(aid) : nullptr;
    Tensor<T>* gb = graph.requires_grad(bid) ? &graph.grad_slot(bid) : nullptr;
    for (std::size_t i = 0; i < go.numel(); ++i) {
      if (mask[i]) {
        if (ga) (*ga)[a_one ? 0 : i] += go[i];
      } else if (gb) {
        (*gb)[b_one ? 0 : i] += go[i];
      }
    }
  });
}

// ---- composites -----------------------------------------------------------

template <typename T>
Var<T> stop_gradient(const Var<T>& x) {
  return x.graph().constant(x.value());
}

template <typename T>
Var<T> softmax(const Var<T>& x, int axis) {
  const auto shifted = x - stop_gradient(max(x, axis));
  const auto e = exp(shifted);
  return e / sum(e, axis);
}

template <typename T>
Var<T> log_softmax(const Var<T>& x, int axis) {
  const auto shifted = x - stop_gradient(max(x, axis));
  return shifted - log(sum(exp(shifted), axis));
}

template <typename T>
Var<T> softplus(const Var<T>& x) {
  const auto& xv = x.value();
  Mask positive(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) positive[i] = xv[i] > T(0);
  auto& g = x.graph();
  const auto relu = where(positive, x, g.constant(T(0)));
  const auto abs = where(positive, x, neg(x));
  return relu + log(add_scalar(exp(neg(abs)), T(1)));
}

// ---- instantiation --------------------------------------------------------

#define FORGE_INSTANTIATE(T)                                                            \
  template class Graph<T>;                                                              \
  template Var<T> add(const Var<T>&, const Var<T>&);                                   \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                   \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                   \
  template Var<T> div(const Var<T>&, const Var<T>&);                                   \
  template Var<T> neg(const Var<T>&);                                                  \
  template Var<T> exp(const Var<T>&);                                                  \
  template Var<T> log(const Var<T>&);                                                  \
  template Var<T> pow(const Var<T>&, T);                                               \
  template Var<T> sqrt(const Var<T>&);                                                 \
  template Var<T> sigmoid(const Var<T>&);                                              \
  template Var<T> silu(const Var<T>&);                                                 \
  template Var<T> tanh(const Var<T>&);                                                 \
  template Var<T> sum(const Var<T>&);                                                  \
  template Var<T> mean(const Var<T>&);                                                 \
  template Var<T> sum(const Var<T>&, int);                                             \
  template Var<T> mean(const Var<T>&, int);                                            \
  template Var<T> max(const Var<T>&, int);                                             \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                \
  template Var<T> transpose(const Var<T>&);                                            \
  template Var<T> reshape(const Var<T>&, Shape);                                       \
  template Var<T> concat(std::span<const Var<T>>, int);                                \
  template Var<T> slice(const Var<T>&, int, std::size_t, std::size_t);                 \
  template Var<T> gather_rows(const Var<T>&, std::span<const TokenId>);                \
  template Var<T> where(const Mask&, const Var<T>&, const Var<T>&);                    \
  template Var<T> stop_gradient(const Var<T>&);                                        \
  template Var<T> softmax(const Var<T>&, int);                                         \
  template Var<T> log_softmax(const Var<T>&, int);                                     \
  template Var<T> softplus(const Var<T>&);                                             \
  template Var<T> scale(const Var<T>&, T);                                             \
  template Var<T> add_scalar(const Var<T>&, T);

FORGE_INSTANTIATE(float)
FORGE_INSTANTIATE(double)

#undef FORGE_INSTANTIATE

}  // namespace forge
