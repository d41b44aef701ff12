#include "mmk/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

#include "mmk/errors.hpp"
#include "mmk/kernels.hpp"
#include "mmk/rng.hpp"

namespace mmk {

namespace {

#ifdef NDEBUG
std::atomic<bool> g_check_finite{false};
#else
std::atomic<bool> g_check_finite{true};
#endif

}  // namespace

void set_default_check_finite(bool on) { g_check_finite.store(on); }
bool default_check_finite() { return g_check_finite.load(); }

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Constant: return "constant";
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddBias: return "add_bias";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Softmax: return "softmax";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Embedding: return "embedding";
    case OpKind::EmbeddingBag: return "embedding_bag";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::RepeatRows: return "repeat_rows";
    case OpKind::Attention: return "attention";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::Sum: return "sum";
    case OpKind::Dropout: return "dropout";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (graph == nullptr) throw ContractError("Var is not bound to a graph");
  return graph->node(id).value;
}

Graph::Graph() : check_finite_(default_check_finite()) {}

Var Graph::constant(Tensor value) { return record(OpKind::Constant, {}, std::move(value), {}); }

Var Graph::variable(Tensor value) {
  Var v = record(OpKind::Leaf, {}, std::move(value), {});
  nodes_[v.id].requires_grad = true;
  return v;
}

Var Graph::parameter(const std::string& name, const Tensor& value) {
  if (auto it = named_.find(name); it != named_.end()) return Var{this, it->second};
  Var v = variable(value);
  named_.emplace(name, v.id);
  return v;
}

Var Graph::record(OpKind op, std::vector<NodeId> inputs, Tensor value, BackwardFn backward) {
  if (backward_done_) throw ContractError("graph already differentiated; build a new graph");
  for (NodeId in : inputs) {
    if (in >= nodes_.size()) throw ContractError("op input refers to a node not yet in the graph");
  }
  if (check_finite_ && !value.all_finite()) {
    throw NumericError("non-finite value produced by op '" + std::string(op_name(op)) + "' (node " +
                       std::to_string(nodes_.size()) + ")");
  }
  Node n;
  n.op = op;
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](NodeId in) { return nodes_[in].requires_grad; });
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Tensor& Graph::grad(NodeId id) {
  Tensor& g = grads_.at(id);
  if (g.empty()) g = Tensor::zeros(nodes_[id].value.shape());
  return g;
}

Gradients Graph::backward(Var loss) {
  if (loss.graph != this) throw ContractError("loss does not belong to this graph");
  if (backward_done_) throw ContractError("backward may be called only once per graph");
  if (nodes_[loss.id].value.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_str(nodes_[loss.id].value.shape()));
  }
  backward_done_ = true;
  grads_.assign(nodes_.size(), Tensor{});
  if (nodes_[loss.id].requires_grad) {
    grad(loss.id).fill(1.0);
    for (NodeId id = loss.id + 1; id-- > 0;) {
      const Node& n = nodes_[id];
      if (!n.requires_grad || !n.backward || grads_[id].empty()) continue;
      n.backward(*this, id);
    }
  }
  Gradients out;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].op != OpKind::Leaf) continue;
    out.leaves_.emplace(id, grad(id));
  }
  for (const auto& [name, id] : named_) out.named_.emplace(name, out.leaves_.at(id));
  grads_.clear();
  return out;
}

const Tensor& Gradients::of(Var v) const {
  auto it = leaves_.find(v.id);
  if (it == leaves_.end()) throw ContractError("no gradient recorded for node " + std::to_string(v.id));
  return it->second;
}

// ---------------------------------------------------------------------------
// ops

namespace {

void require_same_graph(Var a, Var b) {
  if (a.graph == nullptr || a.graph != b.graph) throw ContractError("op inputs belong to different graphs");
}

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_matrix(std::string_view op, const Tensor& t) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

void accumulate(Tensor& dst, const Tensor& src, double factor = 1.0) {
  double* d = dst.raw();
  const double* s = src.raw();
  for (std::size_t i = 0, n = dst.numel(); i < n; ++i) d[i] += factor * s[i];
}

template <typename F>
Tensor map_values(const Tensor& x, F f) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = f(x[i]);
  return y;
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out({m, n});
  kernels::gemm_nn(m, k, n, av.raw(), bv.raw(), out.raw());
  NodeId ia = a.id, ib = b.id;
  return a.graph->record(OpKind::MatMul, {ia, ib}, std::move(out), [ia, ib, m, k, n](Graph& g, NodeId self) {
    const Tensor& dy = g.grad(self);
    if (g.requires_grad(ia)) {
      kernels::gemm_nt(m, n, k, dy.raw(), g.node(ib).value.raw(), g.grad(ia).raw());
    }
    if (g.requires_grad(ib)) {
      kernels::gemm_tn(k, m, n, g.node(ia).value.raw(), dy.raw(), g.grad(ib).raw());
    }
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_matrix("transpose", av);
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = av.at(i, j);
  NodeId ia = a.id;
  return a.graph->record(OpKind::Transpose, {ia}, std::move(out), [ia, r, c](Graph& g, NodeId self) {
    const Tensor& dy = g.grad(self);
    Tensor& da = g.grad(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) da.at(i, j) += dy.at(j, i);
  });
}

Var add(Var a, Var b) {
  require_same_graph(a, b);
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  accumulate(out, b.value());
  NodeId ia = a.id, ib = b.id;
  return a.graph->record(OpKind::Add, {ia, ib}, std::move(out), [ia, ib](Graph& g, NodeId self) {
    const Tensor& dy = g.grad(self);
    if (g.requires_grad(ia)) accumulate(g.grad(ia), dy);
    if (g.requires_grad(ib)) accumulate(g.grad(ib), dy);
  });
}

Var sub(Var a, Var b) {
  require_same_graph(a, b);
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  accumulate(out, b.value(), -1.0);
  NodeId ia = a.id, ib = b.id;
  return a.graph->record(OpKind::Sub, {ia, ib}, std::move(out), [ia, ib](Graph& g, NodeId self) {
    const Tensor& dy = g.grad(self);
    if (g.requires_grad(ia)) accumulate(g.grad(ia), dy);
    if (g.requires_grad(ib)) accumulate(g.grad(ib), dy, -1.0);
  });
}

Var mul(Var a, Var b) {
  require_same_graph(a, b);
  require_same_shape("mul", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  NodeId ia = a.id, ib = b.id;
  return a.graph->record(OpKind::Mul, {ia, ib}, std::move(out), [ia, ib](Graph& g, NodeId self) {
    const Tensor& dy = g.grad(self);
    if (g.requires_grad(ia)) {
      Tensor& da = g.grad(ia);
      const Tensor& bv = g.node(ib).value;
      for (std::size_t i = 0; i < da.numel(); ++i) da[i] += dy[i] * bv[i];
    }
    if (g.requires_grad(ib)) {
      Tensor& db = g.grad(ib);
      const Tensor& av = g.node(ia).value;
      for (std::size_t i = 0; i < db.numel(); ++i) db[i] += dy[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = map_values(a.value(), [factor](double v) { return v * factor; });
  NodeId ia = a.id;
  return a.graph->record(OpKind::Scale, {ia}, std::move(out), [ia, factor](Graph& g, NodeId self) {
    accumulate(g.grad(ia), g.grad(self), factor);
  });
}

Var add_bias(Var x, Var bias) {
  require_same_graph(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  const std::size_t n = xv.shape().back();
  if (bv.numel() != n || (bv.rank() != 1 && !(bv.rank() == 2 && bv.rows() == 1))) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " does not match last axis of " +
                         shape_str(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i % n];
  NodeId ix = x.id, ib = bias.id;
  return x.graph->record(OpKind::AddBias, {ix, ib}, std::move(out), [ix, ib, n](Graph& g, NodeId self) {
    const Tensor& dy = g.grad(self);
    if (g.requires_grad(ix)) accumulate(g.grad(ix), dy);
    if (g.requires_grad(ib)) {
      Tensor& db = g.grad(ib);
      for (std::size_t i = 0; i < dy.numel(); ++i) db[i % n] += dy[i];
    }
  });
}

Var relu(Var x) {
  Tensor out = map_values(x.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  NodeId ix = x.id;
  return x.graph->record(OpKind::Relu, {ix}, std::move(out), [ix](Graph& g, NodeId self) {
    const Tensor& dy = g.grad(self);
    const Tensor& xv = g.node(ix).value;
    Tensor& dx = g.grad(ix);
    for (std::size_t i = 0; i < dx.numel(); ++i)
      if (xv[i] > 0.0) dx[i] += dy[i];
  });
}

Var sigmoid(Var x) {
  Tensor out = map_values(x.value(), [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    double e = std::exp(v);
    return e / (1.0 + e);
  });
  NodeId ix = x.id;
  return x.graph->record(OpKind::Sigmoid, {ix}, std::move(out), [ix](Graph& g, NodeId self) {
    const Tensor& dy = g.grad(self);
    const Tensor& y = g.node(self).value;
    Tensor& dx = g.grad(ix);
    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dy[i] * y[i] * (1.0 - y[i]);
  });
}

namespace {
struct AxisLayout {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisLayout axis_layout(const Shape& shape, int axis) {
  const int rank = static_cast<int>(shape.size());
  const int a = axis < 0 ? rank + axis : axis;
  if (a < 0 || a >= rank) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  AxisLayout l;
  for (int i = 0; i < a; ++i) l.outer *= shape[i];
  l.n = shape[a];
  for (int i = a + 1; i < rank; ++i) l.inner *= shape[i];
  return l;
}
}  // namespace

Var softmax(Var x, int axis) {
  const Tensor& xv = x.value();
  const AxisLayout l = axis_layout(xv.shape(), axis);
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.n * l.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < l.n; ++j) mx = std::max(mx, xv[base + j * l.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < l.n; ++j) {
        double e = std::exp(xv[base + j * l.inner] - mx);
        out[base + j * l.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < l.n; ++j) out[base + j * l.inner] /= z;
    }
  }
  NodeId ix = x.id;
  return x.graph->record(OpKind::Softmax, {ix}, std::move(out), [ix, l](Graph& g, NodeId self) {
    const Tensor& dy = g.grad(self);
    const Tensor& y = g.node(self).value;
    Tensor& dx = g.grad(ix);
    for (std::size_t o = 0; o < l.outer; ++o) {
      for (std::size_t in = 0; in < l.inner; ++in) {
        const std::size_t base = o * l.n * l.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < l.n; ++j) dot += dy[base + j * l.inner] * y[base + j * l.inner];
        for (std::size_t j = 0; j < l.n; ++j) {
          const std::size_t idx = base + j * l.inner;
          dx[idx] += y[idx] * (dy[idx] - dot);
        }
      }
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_same_graph(x, gain);
  require_same_graph(x, bias);
  const Tensor& xv = x.value();
  const std::size_t d = xv.shape().back();
  if (gain.value().numel() != d || bias.value().numel() != d) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
  }
  if (eps < 0.0) throw NumericError("layer_norm: eps must be non-negative");
  if (eps == 0.0 && d < 2) throw NumericError("layer_norm: degenerate variance (d < 2 with eps = 0)");
  const std::size_t rows = xv.numel() / d;
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.raw() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    if (var + eps <= 0.0) throw NumericError("layer_norm: zero variance with eps = 0");
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  NodeId ix = x.id, ig = gain.id, ib = bias.id;
  return x.graph->record(
      OpKind::LayerNorm, {ix, ig, ib}, std::move(out),
      [ix, ig, ib, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, NodeId self) {
        const Tensor& dy = g.grad(self);
        const Tensor& gv = g.node(ig).value;
        if (g.requires_grad(ig)) {
          Tensor& dg = g.grad(ig);
          for (std::size_t i = 0; i < dy.numel(); ++i) dg[i % d] += dy[i] * xhat[i];
        }
        if (g.requires_grad(ib)) {
          Tensor& db = g.grad(ib);
          for (std::size_t i = 0; i < dy.numel(); ++i) db[i % d] += dy[i];
        }
        if (g.requires_grad(ix)) {
          Tensor& dx = g.grad(ix);
          std::vector<double> dh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dh[j] = dy[r * d + j] * gv[j];
              mean_dh += dh[j];
              mean_dh_h += dh[j] * xhat[r * d + j];
            }
            mean_dh /= static_cast<double>(d);
            mean_dh_h /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              dx[r * d + j] += inv_std[r] * (dh[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
            }
          }
        }
      });
}

Var embedding(Var table, std::span<const std::int32_t> ids) {
  const Tensor& tv = table.value();
  require_matrix("embedding", tv);
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  const std::size_t vocab = tv.rows(), d = tv.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(vocab));
    }
    std::copy_n(tv.raw() + ids[i] * d, d, out.raw() + i * d);
  }
  NodeId it = table.id;
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return table.graph->record(OpKind::Embedding, {it}, std::move(out), [it, d, idv = std::move(idv)](Graph& g, NodeId self) {
    const Tensor& dy = g.grad(self);
    Tensor& dt = g.grad(it);
    for (std::size_t i = 0; i < idv.size(); ++i) {
      double* row = dt.raw() + idv[i] * d;
      const double* src = dy.raw() + i * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += src[j];
    }
  });
}

Var embedding_bag(Var table, std::span<const std::int32_t> ids, std::span<const double> weights) {
  const Tensor& tv = table.value();
  require_matrix("embedding_bag", tv);
  if (ids.size() != weights.size()) throw DimensionError("embedding_bag: ids and weights differ in length");
  const std::size_t vocab = tv.rows(), d = tv.cols();
  Tensor out({1, d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DimensionError("embedding_bag: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(vocab));
    }
    for (std::size_t j = 0; j < d; ++j) out[j] += weights[i] * tv.at(ids[i], j);
  }
  NodeId it = table.id;
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  std::vector<double> wv(weights.begin(), weights.end());
  return table.graph->record(OpKind::EmbeddingBag, {it}, std::move(out),
                             [it, d, idv = std::move(idv), wv = std::move(wv)](Graph& g, NodeId self) {
                               const Tensor& dy = g.grad(self);
                               Tensor& dt = g.grad(it);
                               for (std::size_t i = 0; i < idv.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j) dt.at(idv[i], j) += wv[i] * dy[j];
                             });
}

Var concat_cols(Var a, Var b) {
  require_same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix("concat_cols", av);
  require_matrix("concat_cols", bv);
  if (av.rows() != bv.rows()) {
    throw DimensionError("concat_cols: row counts differ, " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  const std::size_t r = av.rows(), ca = av.cols(), cb = bv.cols();
  Tensor out({r, ca + cb});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(av.raw() + i * ca, ca, out.raw() + i * (ca + cb));
    std::copy_n(bv.raw() + i * cb, cb, out.raw() + i * (ca + cb) + ca);
  }
  NodeId ia = a.id, ib = b.id;
  return a.graph->record(OpKind::ConcatCols, {ia, ib}, std::move(out), [ia, ib, r, ca, cb](Graph& g, NodeId self) {
    const Tensor& dy = g.grad(self);
    if (g.requires_grad(ia)) {
      Tensor& da = g.grad(ia);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < ca; ++j) da.at(i, j) += dy.at(i, j);
    }
    if (g.requires_grad(ib)) {
      Tensor& db = g.grad(ib);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < cb; ++j) db.at(i, j) += dy.at(i, ca + j);
    }
  });
}

Var repeat_rows(Var row, std::size_t n) {
  const Tensor& rv = row.value();
  if (rv.rank() != 2 || rv.rows() != 1) throw DimensionError("repeat_rows: expected [1 x d], got " + shape_str(rv.shape()));
  if (n == 0) throw DimensionError("repeat_rows: n must be positive");
  const std::size_t d = rv.cols();
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(rv.raw(), d, out.raw() + i * d);
  NodeId ir = row.id;
  return row.graph->record(OpKind::RepeatRows, {ir}, std::move(out), [ir, n, d](Graph& g, NodeId self) {
    const Tensor& dy = g.grad(self);
    Tensor& dr = g.grad(ir);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) dr[j] += dy.at(i, j);
  });
}

Var attention(Var q, Var k, Var v, std::size_t n_heads, const AttentionMask& mask) {
  require_same_graph(q, k);
  require_same_graph(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_matrix("attention", qv);
  require_matrix("attention", kv);
  require_matrix("attention", vv);
  const std::size_t lq = qv.rows(), lk = kv.rows(), d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || vv.rows() != lk) {
    throw DimensionError("attention: q " + shape_str(qv.shape()) + ", k " + shape_str(kv.shape()) + ", v " +
                         shape_str(vv.shape()) + " are incompatible");
  }
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("attention: width not divisible by head count");
  if (!mask.key_valid.empty() && mask.key_valid.size() != lk) {
    throw DimensionError("attention: key mask length differs from key count");
  }
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  auto allowed = [&mask](std::size_t i, std::size_t j) {
    if (mask.causal && j > i) return false;
    return mask.key_valid.empty() || mask.key_valid[j];
  };

  // probs layout: [head][i][j]
  std::vector<double> probs(n_heads * lq * lk, 0.0);
  Tensor out({lq, d});
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < lq; ++i) {
      double* p = probs.data() + (h * lq + i) * lk;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < lk; ++j) {
        if (!allowed(i, j)) continue;
        double s = 0.0;
        for (std::size_t t = 0; t < dh; ++t) s += qv.at(i, off + t) * kv.at(j, off + t);
        p[j] = s * inv_sqrt;
        mx = std::max(mx, p[j]);
      }
      if (mx == -std::numeric_limits<double>::infinity()) {
        throw ContractError("attention: query " + std::to_string(i) + " has no visible key");
      }
      double z = 0.0;
      for (std::size_t j = 0; j < lk; ++j) {
        if (!allowed(i, j)) {
          p[j] = 0.0;
          continue;
        }
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j < lk; ++j) p[j] /= z;
      for (std::size_t j = 0; j < lk; ++j) {
        if (p[j] == 0.0) continue;
        for (std::size_t t = 0; t < dh; ++t) out.at(i, off + t) += p[j] * vv.at(j, off + t);
      }
    }
  }
  NodeId iq = q.id, ik = k.id, iv = v.id;
  return q.graph->record(
      OpKind::Attention, {iq, ik, iv}, std::move(out),
      [iq, ik, iv, lq, lk, d, dh, n_heads, inv_sqrt, probs = std::move(probs)](Graph& g, NodeId self) {
        const Tensor& dy = g.grad(self);
        const Tensor& qv = g.node(iq).value;
        const Tensor& kv = g.node(ik).value;
        const Tensor& vv = g.node(iv).value;
        const bool gq = g.requires_grad(iq), gk = g.requires_grad(ik), gv = g.requires_grad(iv);
        Tensor* dq = gq ? &g.grad(iq) : nullptr;
        Tensor* dk = gk ? &g.grad(ik) : nullptr;
        Tensor* dvv = gv ? &g.grad(iv) : nullptr;
        std::vector<double> dp(lk);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < lq; ++i) {
            const double* p = probs.data() + (h * lq + i) * lk;
            double dot = 0.0;
            for (std::size_t j = 0; j < lk; ++j) {
              double s = 0.0;
              if (p[j] != 0.0) {
                for (std::size_t t = 0; t < dh; ++t) s += dy.at(i, off + t) * vv.at(j, off + t);
              }
              dp[j] = s;
              dot += s * p[j];
            }
            for (std::size_t j = 0; j < lk; ++j) {
              if (p[j] == 0.0) continue;
              if (dvv) {
                for (std::size_t t = 0; t < dh; ++t) dvv->at(j, off + t) += p[j] * dy.at(i, off + t);
              }
              const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
              if (dq) {
                for (std::size_t t = 0; t < dh; ++t) dq->at(i, off + t) += ds * kv.at(j, off + t);
              }
              if (dk) {
                for (std::size_t t = 0; t < dh; ++t) dk->at(j, off + t) += ds * qv.at(i, off + t);
              }
            }
          }
        }
        (void)d;
      });
}

Var cross_entropy(Var logits, std::span<const std::int32_t> targets, std::int32_t ignore, Reduction reduction) {
  const Tensor& lv = logits.value();
  require_matrix("cross_entropy", lv);
  const std::size_t l = lv.rows(), vocab = lv.cols();
  if (targets.size() != l) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(l) +
                         " logit rows");
  }
  std::size_t count = 0;
  for (auto t : targets) {
    if (t == ignore) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw DimensionError("cross_entropy: target id " + std::to_string(t) + " outside vocabulary of " +
                           std::to_string(vocab));
    }
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: every target position is ignored");
  const double norm = reduction == Reduction::Mean ? 1.0 / static_cast<double>(count) : 1.0;
  // softmax rows are cached for backward
  std::vector<double> probs(l * vocab, 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < l; ++i) {
    if (targets[i] == ignore) continue;
    const double* row = lv.raw() + i * vocab;
    double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[i * vocab + j] = std::exp(row[j] - mx);
      z += probs[i * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[i * vocab + j] /= z;
    loss -= (row[targets[i]] - mx - std::log(z));
  }
  NodeId il = logits.id;
  std::vector<std::int32_t> tv(targets.begin(), targets.end());
  return logits.graph->record(
      OpKind::CrossEntropy, {il}, Tensor::scalar(loss * norm),
      [il, l, vocab, norm, ignore, tv = std::move(tv), probs = std::move(probs)](Graph& g, NodeId self) {
        const double up = g.grad(self)[0] * norm;
        Tensor& dl = g.grad(il);
        for (std::size_t i = 0; i < l; ++i) {
          if (tv[i] == ignore) continue;
          for (std::size_t j = 0; j < vocab; ++j) dl[i * vocab + j] += up * probs[i * vocab + j];
          dl[i * vocab + tv[i]] -= up;
        }
      });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  NodeId ix = x.id;
  return x.graph->record(OpKind::Sum, {ix}, Tensor::scalar(s), [ix](Graph& g, NodeId self) {
    const double up = g.grad(self)[0];
    Tensor& dx = g.grad(ix);
    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += up;
  });
}

Var dropout(Var x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return x;
  const Tensor& xv = x.value();
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(xv.numel());
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    out[i] = xv[i] * mask[i];
  }
  NodeId ix = x.id;
  return x.graph->record(OpKind::Dropout, {ix}, std::move(out), [ix, mask = std::move(mask)](Graph& g, NodeId self) {
    const Tensor& dy = g.grad(self);
    Tensor& dx = g.grad(ix);
    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dy[i] * mask[i];
  });
}

}  // namespace mmk
