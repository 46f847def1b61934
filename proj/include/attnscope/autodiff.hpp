#pragma once

// Recorded computation graph over dense double tensors with batched
// reverse-mode (vector-Jacobian) and forward-mode (Jacobian-vector) sweeps.
//
// Nodes are appended in topological order: every input of node i has an id
// smaller than i. Values are immutable once recorded, so a finished graph can
// be differentiated from several threads at once; each sweep owns its buffers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "attnscope/error.hpp"
#include "attnscope/tensor.hpp"

namespace attnscope::ad {

using NodeId = std::size_t;

enum class OpKind {
  Leaf,
  MatMul,
  Add,
  AddBias,
  Scale,
  Transpose,
  ConcatCols,
  SliceRow,
  Gather,
  Softmax,
  LayerNorm,
  Gelu,
};

enum class GeluVariant { Exact, Tanh };

struct Node {
  OpKind kind = OpKind::Leaf;
  std::vector<NodeId> inputs;
  std::shared_ptr<const Tensor> value;
  double scalar = 0.0;  // Scale factor, LayerNorm eps
  std::size_t index = 0;  // SliceRow row
  std::vector<std::size_t> ids;  // Gather rows
  GeluVariant gelu = GeluVariant::Exact;
  // LayerNorm cache: normalized input and per-row reciprocal std.
  std::shared_ptr<const Tensor> xhat;
  std::vector<double> rstd;
  std::string label;
};

namespace detail {

// C(m x n) += A(m x k) * B(k x n)
inline void gemm(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t r = 0; r < k; ++r) {
      const double av = ai[r];
      if (av == 0.0) continue;
      const double* br = b + r * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * br[j];
    }
  }
}

// C(m x n) += A(m x k) * B^T where B is (n x k)
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t r = 0; r < k; ++r) acc += ai[r] * bj[r];
      c[i * n + j] += acc;
    }
  }
}

// C(m x n) += A^T * B where A is (k x m), B is (k x n)
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t r = 0; r < k; ++r) {
    const double* ar = a + r * m;
    const double* br = b + r * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * br[j];
    }
  }
}

inline double normal_cdf(double x) {
  return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

inline double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

constexpr double kTanhGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kTanhGeluCubic = 0.044715;

inline double gelu_value(double x, GeluVariant v) {
  if (v == GeluVariant::Exact) return x * normal_cdf(x);
  const double u = kTanhGeluScale * (x + kTanhGeluCubic * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_slope(double x, GeluVariant v) {
  if (v == GeluVariant::Exact) return normal_cdf(x) + x * normal_pdf(x);
  const double u = kTanhGeluScale * (x + kTanhGeluCubic * x * x * x);
  const double t = std::tanh(u);
  const double du = kTanhGeluScale * (1.0 + 3.0 * kTanhGeluCubic * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a rank-2 operand, got " +
                         shape_string(t.shape()));
  }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul inner dimensions disagree: " +
                         shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor c({a.dim(0), b.dim(1)});
  gemm(a.data().data(), b.data().data(), c.data().data(), a.dim(0), a.dim(1),
       b.dim(1));
  return c;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add shape mismatch: " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  Tensor c = a;
  for (std::size_t i = 0; i < c.numel(); ++i) c[i] += b[i];
  return c;
}

inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
  if (bias.rank() != 1 || a.rank() == 0 || bias.numel() != a.cols()) {
    throw DimensionError("bias " + shape_string(bias.shape()) +
                         " does not broadcast over " + shape_string(a.shape()));
  }
  Tensor c = a;
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < c.numel(); ++i) c[i] += bias[i % n];
  return c;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor c = a;
  for (double& v : c.data()) v *= s;
  return c;
}

inline Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor c({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c.at(j, i) = a.at(i, j);
  return c;
}

inline Tensor concat_cols(const std::vector<const Tensor*>& parts) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const std::size_t m = parts.front()->rank() == 2 ? parts.front()->dim(0) : 0;
  std::size_t n = 0;
  for (const Tensor* p : parts) {
    require_matrix(*p, "concat");
    if (p->dim(0) != m) {
      throw DimensionError("concat row mismatch: " + shape_string(p->shape()) +
                           " vs " + std::to_string(m) + " rows");
    }
    n += p->dim(1);
  }
  Tensor c({m, n});
  std::size_t off = 0;
  for (const Tensor* p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p->row(i).begin(), p->dim(1), c.row(i).begin() + off);
    off += p->dim(1);
  }
  return c;
}

inline Tensor slice_row(const Tensor& a, std::size_t row) {
  require_matrix(a, "slice");
  if (row >= a.dim(0)) {
    throw IndexError("row " + std::to_string(row) + " out of range for " +
                     shape_string(a.shape()));
  }
  auto r = a.row(row);
  return Tensor::vector(std::vector<double>(r.begin(), r.end()));
}

inline Tensor gather(const Tensor& table, std::span<const std::size_t> ids) {
  require_matrix(table, "gather");
  const std::size_t d = table.dim(1);
  Tensor c({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= table.dim(0)) {
      throw InputError("id " + std::to_string(ids[r]) + " at position " +
                       std::to_string(r) + " out of range for table of " +
                       std::to_string(table.dim(0)) + " rows");
    }
    std::copy_n(table.row(ids[r]).begin(), d, c.row(r).begin());
  }
  return c;
}

inline Tensor softmax(const Tensor& a) {
  if (a.numel() == 0 || a.rank() == 0 || a.rank() > 2) {
    throw DimensionError("softmax expects a non-empty vector or matrix, got " +
                         shape_string(a.shape()));
  }
  Tensor c = a;
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto row = c.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
  }
  return c;
}

struct LayerNormResult {
  Tensor out;
  Tensor xhat;
  std::vector<double> rstd;
};

inline LayerNormResult layer_norm(const Tensor& x, const Tensor& gamma,
                                  const Tensor& beta, double eps) {
  if (x.rank() == 0 || x.rank() > 2 || x.cols() < 2) {
    throw DimensionError("layer_norm needs rows of at least 2 elements, got " +
                         shape_string(x.shape()));
  }
  const std::size_t n = x.cols();
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw DimensionError("layer_norm affine parameters " +
                         shape_string(gamma.shape()) + "/" +
                         shape_string(beta.shape()) + " do not match width " +
                         std::to_string(n));
  }
  LayerNormResult res{Tensor(x.shape()), Tensor(x.shape()), {}};
  res.rstd.resize(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    res.rstd[r] = rs;
    auto xh = res.xhat.row(r);
    auto out = res.out.row(r);
    for (std::size_t j = 0; j < n; ++j) {
      xh[j] = (row[j] - mean) * rs;
      out[j] = xh[j] * gamma[j] + beta[j];
    }
  }
  return res;
}

inline Tensor gelu(const Tensor& x, GeluVariant v) {
  Tensor c = x;
  for (double& e : c.data()) e = gelu_value(e, v);
  return c;
}

}  // namespace detail

class Graph {
 public:
  NodeId leaf(Tensor value, std::string label = {}) {
    return leaf(std::make_shared<const Tensor>(std::move(value)),
                std::move(label));
  }

  /// Records a leaf that shares storage with the caller (e.g. model weights).
  NodeId leaf(std::shared_ptr<const Tensor> value, std::string label = {}) {
    Node n;
    n.kind = OpKind::Leaf;
    n.value = std::move(value);
    n.label = std::move(label);
    return push(std::move(n));
  }

  NodeId matmul(NodeId a, NodeId b) {
    return record(OpKind::MatMul, {a, b},
                  detail::matmul(value(a), value(b)));
  }

  NodeId add(NodeId a, NodeId b) {
    return record(OpKind::Add, {a, b}, detail::add(value(a), value(b)));
  }

  NodeId add_bias(NodeId a, NodeId bias) {
    return record(OpKind::AddBias, {a, bias},
                  detail::add_bias(value(a), value(bias)));
  }

  NodeId linear(NodeId x, NodeId weight, NodeId bias) {
    return add_bias(matmul(x, weight), bias);
  }

  NodeId scale(NodeId a, double s) {
    Node n = make(OpKind::Scale, {a});
    n.scalar = s;
    n.value = std::make_shared<const Tensor>(detail::scale(value(a), s));
    return push(std::move(n));
  }

  NodeId transpose(NodeId a) {
    return record(OpKind::Transpose, {a}, detail::transpose(value(a)));
  }

  NodeId concat_cols(const std::vector<NodeId>& parts) {
    return record(OpKind::ConcatCols, parts, detail::concat_cols(ptrs(parts)));
  }

  NodeId slice_row(NodeId a, std::size_t row) {
    Node n = make(OpKind::SliceRow, {a});
    n.index = row;
    n.value = std::make_shared<const Tensor>(detail::slice_row(value(a), row));
    return push(std::move(n));
  }

  NodeId gather(NodeId table, std::vector<std::size_t> ids) {
    Node n = make(OpKind::Gather, {table});
    n.value = std::make_shared<const Tensor>(detail::gather(value(table), ids));
    n.ids = std::move(ids);
    return push(std::move(n));
  }

  /// Row-wise softmax (a vector is a single row).
  NodeId softmax(NodeId a) {
    return record(OpKind::Softmax, {a}, detail::softmax(value(a)));
  }

  /// Row-wise layer normalization with population variance.
  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps) {
    auto res = detail::layer_norm(value(x), value(gamma), value(beta), eps);
    Node n = make(OpKind::LayerNorm, {x, gamma, beta});
    n.scalar = eps;
    n.value = std::make_shared<const Tensor>(std::move(res.out));
    n.xhat = std::make_shared<const Tensor>(std::move(res.xhat));
    n.rstd = std::move(res.rstd);
    return push(std::move(n));
  }

  NodeId gelu(NodeId x, GeluVariant variant = GeluVariant::Exact) {
    Node n = make(OpKind::Gelu, {x});
    n.gelu = variant;
    n.value = std::make_shared<const Tensor>(detail::gelu(value(x), variant));
    return push(std::move(n));
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const Tensor& value(NodeId id) const { return *nodes_.at(id).value; }
  std::shared_ptr<const Tensor> shared_value(NodeId id) const {
    return nodes_.at(id).value;
  }

  /// Recomputes every node from the recorded leaves in topological order.
  std::vector<Tensor> replay() const {
    std::vector<Tensor> vals;
    vals.reserve(nodes_.size());
    for (const Node& n : nodes_) {
      auto in = [&](std::size_t k) -> const Tensor& { return vals[n.inputs[k]]; };
      switch (n.kind) {
        case OpKind::Leaf: vals.push_back(*n.value); break;
        case OpKind::MatMul: vals.push_back(detail::matmul(in(0), in(1))); break;
        case OpKind::Add: vals.push_back(detail::add(in(0), in(1))); break;
        case OpKind::AddBias: vals.push_back(detail::add_bias(in(0), in(1))); break;
        case OpKind::Scale: vals.push_back(detail::scale(in(0), n.scalar)); break;
        case OpKind::Transpose: vals.push_back(detail::transpose(in(0))); break;
        case OpKind::ConcatCols: {
          std::vector<const Tensor*> parts;
          for (NodeId id : n.inputs) parts.push_back(&vals[id]);
          vals.push_back(detail::concat_cols(parts));
          break;
        }
        case OpKind::SliceRow: vals.push_back(detail::slice_row(in(0), n.index)); break;
        case OpKind::Gather: vals.push_back(detail::gather(in(0), n.ids)); break;
        case OpKind::Softmax: vals.push_back(detail::softmax(in(0))); break;
        case OpKind::LayerNorm:
          vals.push_back(detail::layer_norm(in(0), in(1), in(2), n.scalar).out);
          break;
        case OpKind::Gelu: vals.push_back(detail::gelu(in(0), n.gelu)); break;
      }
    }
    return vals;
  }

  /// Flags every node whose value depends on `x` (x included).
  std::vector<char> descendants(NodeId x) const {
    std::vector<char> mark(nodes_.size(), 0);
    mark.at(x) = 1;
    for (std::size_t i = x + 1; i < nodes_.size(); ++i)
      for (NodeId p : nodes_[i].inputs)
        if (mark[p]) {
          mark[i] = 1;
          break;
        }
    return mark;
  }

  /// Flags every node that `y` depends on (y included).
  std::vector<char> ancestors(NodeId y) const {
    std::vector<char> mark(nodes_.size(), 0);
    mark.at(y) = 1;
    for (std::size_t i = y + 1; i-- > 0;) {
      if (!mark[i]) continue;
      for (NodeId p : nodes_[i].inputs) mark[p] = 1;
    }
    return mark;
  }

  bool depends_on(NodeId y, NodeId x) const {
    if (x > y) return false;
    return descendants(x)[y] != 0;
  }

 private:
  Node make(OpKind kind, std::vector<NodeId> inputs) const {
    for (NodeId id : inputs) {
      if (id >= nodes_.size()) throw IndexError("unknown graph node " + std::to_string(id));
    }
    Node n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    return n;
  }

  NodeId record(OpKind kind, std::vector<NodeId> inputs, Tensor out) {
    Node n = make(kind, std::move(inputs));
    n.value = std::make_shared<const Tensor>(std::move(out));
    return push(std::move(n));
  }

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  std::vector<const Tensor*> ptrs(const std::vector<NodeId>& ids) const {
    std::vector<const Tensor*> out;
    for (NodeId id : ids) out.push_back(&value(id));
    return out;
  }

  std::vector<Node> nodes_;
};

namespace detail {

using Block = std::vector<double>;  // batch-major: element (s, i) at s * numel + i

inline Block& ensure(std::vector<Block>& bufs, NodeId id, std::size_t size) {
  if (bufs[id].empty()) bufs[id].assign(size, 0.0);
  return bufs[id];
}

// Propagates the cotangent block `g` of node `n` into the buffers of its
// active parents.
inline void backward_node(const Graph& graph, const Node& n, const Block& g,
                          std::size_t batch, std::vector<Block>& grads,
                          const std::vector<char>& active) {
  const Tensor& out = *n.value;
  const std::size_t no = out.numel();
  auto parent = [&](std::size_t k) -> Block* {
    const NodeId id = n.inputs[k];
    if (!active[id]) return nullptr;
    return &ensure(grads, id, batch * graph.value(id).numel());
  };

  switch (n.kind) {
    case OpKind::Leaf:
      break;
    case OpKind::MatMul: {
      const Tensor& a = graph.value(n.inputs[0]);
      const Tensor& b = graph.value(n.inputs[1]);
      const std::size_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
      if (Block* ga = parent(0))
        gemm_nt(g.data(), b.data().data(), ga->data(), batch * m, nn, k);
      if (Block* gb = parent(1))
        for (std::size_t s = 0; s < batch; ++s)
          gemm_tn(a.data().data(), g.data() + s * no, gb->data() + s * k * nn,
                  k, m, nn);
      break;
    }
    case OpKind::Add: {
      for (std::size_t k = 0; k < 2; ++k)
        if (Block* gp = parent(k))
          for (std::size_t i = 0; i < g.size(); ++i) (*gp)[i] += g[i];
      break;
    }
    case OpKind::AddBias: {
      if (Block* ga = parent(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      if (Block* gb = parent(1)) {
        const std::size_t nc = out.cols();
        for (std::size_t s = 0; s < batch; ++s)
          for (std::size_t i = 0; i < no; ++i)
            (*gb)[s * nc + i % nc] += g[s * no + i];
      }
      break;
    }
    case OpKind::Scale: {
      if (Block* ga = parent(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += n.scalar * g[i];
      break;
    }
    case OpKind::Transpose: {
      if (Block* ga = parent(0)) {
        const std::size_t r = out.dim(0), c = out.dim(1);  // input is c x r
        for (std::size_t s = 0; s < batch; ++s)
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
              (*ga)[s * no + j * r + i] += g[s * no + i * c + j];
      }
      break;
    }
    case OpKind::ConcatCols: {
      const std::size_t m = out.dim(0), ncol = out.dim(1);
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t w = graph.value(n.inputs[k]).dim(1);
        if (Block* gp = parent(k))
          for (std::size_t s = 0; s < batch; ++s)
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < w; ++j)
                (*gp)[s * m * w + i * w + j] += g[s * no + i * ncol + off + j];
        off += w;
      }
      break;
    }
    case OpKind::SliceRow: {
      if (Block* ga = parent(0)) {
        const std::size_t na = graph.value(n.inputs[0]).numel();
        for (std::size_t s = 0; s < batch; ++s)
          for (std::size_t j = 0; j < no; ++j)
            (*ga)[s * na + n.index * no + j] += g[s * no + j];
      }
      break;
    }
    case OpKind::Gather: {
      if (Block* gt = parent(0)) {
        const std::size_t d = out.cols();
        const std::size_t nt = graph.value(n.inputs[0]).numel();
        for (std::size_t s = 0; s < batch; ++s)
          for (std::size_t r = 0; r < n.ids.size(); ++r)
            for (std::size_t j = 0; j < d; ++j)
              (*gt)[s * nt + n.ids[r] * d + j] += g[s * no + r * d + j];
      }
      break;
    }
    case OpKind::Softmax: {
      // J = diag(y) - y y^T per row: g_x = y * (g - <g, y>)
      if (Block* ga = parent(0)) {
        const std::size_t c = out.cols();
        for (std::size_t s = 0; s < batch; ++s)
          for (std::size_t r = 0; r < out.rows(); ++r) {
            const double* y = out.data().data() + r * c;
            const double* gr = g.data() + s * no + r * c;
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += gr[j] * y[j];
            double* dst = ga->data() + s * no + r * c;
            for (std::size_t j = 0; j < c; ++j) dst[j] += y[j] * (gr[j] - dot);
          }
      }
      break;
    }
    case OpKind::LayerNorm: {
      const Tensor& gamma = graph.value(n.inputs[1]);
      const Tensor& xhat = *n.xhat;
      const std::size_t c = out.cols();
      const double inv_n = 1.0 / static_cast<double>(c);
      Block* gx = parent(0);
      Block* gg = parent(1);
      Block* gbeta = parent(2);
      for (std::size_t s = 0; s < batch; ++s)
        for (std::size_t r = 0; r < out.rows(); ++r) {
          const double* gr = g.data() + s * no + r * c;
          const double* xh = xhat.data().data() + r * c;
          if (gx) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double gh = gr[j] * gamma[j];
              m1 += gh;
              m2 += gh * xh[j];
            }
            m1 *= inv_n;
            m2 *= inv_n;
            double* dst = gx->data() + s * no + r * c;
            for (std::size_t j = 0; j < c; ++j)
              dst[j] += n.rstd[r] * (gr[j] * gamma[j] - m1 - xh[j] * m2);
          }
          if (gg)
            for (std::size_t j = 0; j < c; ++j) (*gg)[s * c + j] += gr[j] * xh[j];
          if (gbeta)
            for (std::size_t j = 0; j < c; ++j) (*gbeta)[s * c + j] += gr[j];
        }
      break;
    }
    case OpKind::Gelu: {
      if (Block* ga = parent(0)) {
        const Tensor& x = graph.value(n.inputs[0]);
        for (std::size_t s = 0; s < batch; ++s)
          for (std::size_t i = 0; i < no; ++i)
            (*ga)[s * no + i] += g[s * no + i] * gelu_slope(x[i], n.gelu);
      }
      break;
    }
  }
}

// Tangent of node `n` given the tangent blocks of its inputs; a null input
// tangent means the input does not depend on the seeded node.
inline Block forward_node(const Graph& graph, const Node& n,
                          const std::vector<const Block*>& dt,
                          std::size_t batch) {
  const Tensor& out = *n.value;
  const std::size_t no = out.numel();
  Block t(batch * no, 0.0);

  switch (n.kind) {
    case OpKind::Leaf:
      break;
    case OpKind::MatMul: {
      const Tensor& a = graph.value(n.inputs[0]);
      const Tensor& b = graph.value(n.inputs[1]);
      const std::size_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
      if (dt[0]) gemm(dt[0]->data(), b.data().data(), t.data(), batch * m, k, nn);
      if (dt[1])
        for (std::size_t s = 0; s < batch; ++s)
          gemm(a.data().data(), dt[1]->data() + s * k * nn, t.data() + s * no,
               m, k, nn);
      break;
    }
    case OpKind::Add: {
      for (const Block* d : dt)
        if (d)
          for (std::size_t i = 0; i < t.size(); ++i) t[i] += (*d)[i];
      break;
    }
    case OpKind::AddBias: {
      if (dt[0])
        for (std::size_t i = 0; i < t.size(); ++i) t[i] += (*dt[0])[i];
      if (dt[1]) {
        const std::size_t nc = out.cols();
        for (std::size_t s = 0; s < batch; ++s)
          for (std::size_t i = 0; i < no; ++i)
            t[s * no + i] += (*dt[1])[s * nc + i % nc];
      }
      break;
    }
    case OpKind::Scale: {
      if (dt[0])
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = n.scalar * (*dt[0])[i];
      break;
    }
    case OpKind::Transpose: {
      if (dt[0]) {
        const std::size_t r = out.dim(0), c = out.dim(1);
        for (std::size_t s = 0; s < batch; ++s)
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
              t[s * no + i * c + j] = (*dt[0])[s * no + j * r + i];
      }
      break;
    }
    case OpKind::ConcatCols: {
      const std::size_t m = out.dim(0), ncol = out.dim(1);
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t w = graph.value(n.inputs[k]).dim(1);
        if (dt[k])
          for (std::size_t s = 0; s < batch; ++s)
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < w; ++j)
                t[s * no + i * ncol + off + j] = (*dt[k])[s * m * w + i * w + j];
        off += w;
      }
      break;
    }
    case OpKind::SliceRow: {
      if (dt[0]) {
        const std::size_t na = graph.value(n.inputs[0]).numel();
        for (std::size_t s = 0; s < batch; ++s)
          for (std::size_t j = 0; j < no; ++j)
            t[s * no + j] = (*dt[0])[s * na + n.index * no + j];
      }
      break;
    }
    case OpKind::Gather: {
      if (dt[0]) {
        const std::size_t d = out.cols();
        const std::size_t nt = graph.value(n.inputs[0]).numel();
        for (std::size_t s = 0; s < batch; ++s)
          for (std::size_t r = 0; r < n.ids.size(); ++r)
            for (std::size_t j = 0; j < d; ++j)
              t[s * no + r * d + j] = (*dt[0])[s * nt + n.ids[r] * d + j];
      }
      break;
    }
    case OpKind::Softmax: {
      if (dt[0]) {
        const std::size_t c = out.cols();
        for (std::size_t s = 0; s < batch; ++s)
          for (std::size_t r = 0; r < out.rows(); ++r) {
            const double* y = out.data().data() + r * c;
            const double* dx = dt[0]->data() + s * no + r * c;
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += dx[j] * y[j];
            for (std::size_t j = 0; j < c; ++j)
              t[s * no + r * c + j] = y[j] * (dx[j] - dot);
          }
      }
      break;
    }
    case OpKind::LayerNorm: {
      const Tensor& gamma = graph.value(n.inputs[1]);
      const Tensor& xhat = *n.xhat;
      const std::size_t c = out.cols();
      const double inv_n = 1.0 / static_cast<double>(c);
      for (std::size_t s = 0; s < batch; ++s)
        for (std::size_t r = 0; r < out.rows(); ++r) {
          const double* xh = xhat.data().data() + r * c;
          double* dst = t.data() + s * no + r * c;
          if (dt[0]) {
            const double* dx = dt[0]->data() + s * no + r * c;
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              m1 += dx[j];
              m2 += dx[j] * xh[j];
            }
            m1 *= inv_n;
            m2 *= inv_n;
            for (std::size_t j = 0; j < c; ++j)
              dst[j] += n.rstd[r] * (dx[j] - m1 - xh[j] * m2) * gamma[j];
          }
          if (dt[1])
            for (std::size_t j = 0; j < c; ++j) dst[j] += xh[j] * (*dt[1])[s * c + j];
          if (dt[2])
            for (std::size_t j = 0; j < c; ++j) dst[j] += (*dt[2])[s * c + j];
        }
      break;
    }
    case OpKind::Gelu: {
      if (dt[0]) {
        const Tensor& x = graph.value(n.inputs[0]);
        for (std::size_t s = 0; s < batch; ++s)
          for (std::size_t i = 0; i < no; ++i)
            t[s * no + i] = (*dt[0])[s * no + i] * gelu_slope(x[i], n.gelu);
      }
      break;
    }
  }
  return t;
}

// Nodes on some path from x to y.
inline std::vector<char> active_path(const Graph& graph, NodeId y, NodeId x) {
  auto down = graph.descendants(x);
  auto up = graph.ancestors(y);
  for (std::size_t i = 0; i < down.size(); ++i) down[i] = down[i] && up[i];
  return down;
}

inline Block vjp_block(const Graph& graph, NodeId y, Block seeds,
                       std::size_t batch, NodeId x,
                       const std::vector<char>& active) {
  const std::size_t nx = graph.value(x).numel();
  if (!active[y]) return Block(batch * nx, 0.0);
  std::vector<Block> grads(graph.size());
  grads[y] = std::move(seeds);
  for (NodeId i = y; i > x; --i) {
    if (!active[i] || grads[i].empty()) continue;
    backward_node(graph, graph.node(i), grads[i], batch, grads, active);
    Block().swap(grads[i]);
  }
  if (grads[x].empty()) grads[x].assign(batch * nx, 0.0);
  return std::move(grads[x]);
}

inline Block jvp_block(const Graph& graph, NodeId x, Block seeds,
                       std::size_t batch, NodeId y,
                       const std::vector<char>& active) {
  const std::size_t ny = graph.value(y).numel();
  if (!active[x]) return Block(batch * ny, 0.0);
  std::vector<NodeId> last_use(graph.size(), 0);
  for (NodeId i = x; i <= y; ++i)
    if (active[i])
      for (NodeId p : graph.node(i).inputs) last_use[p] = i;
  std::vector<Block> tangents(graph.size());
  tangents[x] = std::move(seeds);
  for (NodeId i = x + 1; i <= y; ++i) {
    if (!active[i]) continue;
    const Node& n = graph.node(i);
    std::vector<const Block*> dt;
    dt.reserve(n.inputs.size());
    for (NodeId p : n.inputs)
      dt.push_back(active[p] && !tangents[p].empty() ? &tangents[p] : nullptr);
    tangents[i] = forward_node(graph, n, dt, batch);
    for (NodeId p : n.inputs)
      if (last_use[p] == i && p != y) Block().swap(tangents[p]);
  }
  return std::move(tangents[y]);
}

}  // namespace detail

/// Pulls back `cotangents` (batch x numel(y), or a single vector) through the
/// graph; returns d<cotangent, y>/dx as a (batch x numel(x)) matrix.
inline Tensor vjp(const Graph& graph, NodeId y, const Tensor& cotangents,
                  NodeId x) {
  const std::size_t ny = graph.value(y).numel();
  if (cotangents.cols() != ny) {
    throw DimensionError("cotangent " + shape_string(cotangents.shape()) +
                         " does not match node of " + std::to_string(ny) +
                         " elements");
  }
  const std::size_t batch = cotangents.rows();
  auto active = detail::active_path(graph, y, x);
  auto out = detail::vjp_block(graph, y, cotangents.values(), batch, x, active);
  return Tensor::matrix(batch, graph.value(x).numel(), std::move(out));
}

/// Pushes `tangents` (batch x numel(x)) forward; returns (batch x numel(y)).
inline Tensor jvp(const Graph& graph, NodeId x, const Tensor& tangents,
                  NodeId y) {
  const std::size_t nx = graph.value(x).numel();
  if (tangents.cols() != nx) {
    throw DimensionError("tangent " + shape_string(tangents.shape()) +
                         " does not match node of " + std::to_string(nx) +
                         " elements");
  }
  const std::size_t batch = tangents.rows();
  auto active = detail::active_path(graph, y, x);
  auto out = detail::jvp_block(graph, x, tangents.values(), batch, y, active);
  return Tensor::matrix(batch, graph.value(y).numel(), std::move(out));
}

enum class Mode { Reverse, Forward };

struct JacobianOptions {
  Mode mode = Mode::Reverse;
  /// Seeds per sweep; 0 picks the largest batch that fits `memory_budget`.
  std::size_t max_batch = 0;
  std::size_t memory_budget = std::size_t{256} << 20;
  /// Receives a message when x is not an ancestor of y.
  std::vector<std::string>* warnings = nullptr;
};

namespace detail {

inline std::size_t batch_size(const Graph& graph,
                              const std::vector<char>& active,
                              std::size_t seeds, const JacobianOptions& opt) {
  if (opt.max_batch) return std::clamp<std::size_t>(opt.max_batch, 1, std::max<std::size_t>(seeds, 1));
  std::size_t per_seed = 0;
  for (std::size_t i = 0; i < active.size(); ++i)
    if (active[i]) per_seed += graph.value(i).numel();
  const std::size_t fit = opt.memory_budget / (sizeof(double) * std::max<std::size_t>(per_seed, 1));
  return std::clamp<std::size_t>(fit, 1, std::max<std::size_t>(seeds, 1));
}

inline std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace detail

/// Streams the Jacobian d y[y_idx] / d x[x_idx] in blocks. The callback gets
/// (row0, col0, block) where `block` covers rows row0.. and columns col0.. of
/// the |y_idx| x |x_idx| Jacobian. Reverse mode yields full-width row
/// blocks, forward mode full-height column blocks.
template <class Callback>
void for_each_jacobian_block(const Graph& graph, NodeId y,
                             std::span<const std::size_t> y_idx, NodeId x,
                             std::span<const std::size_t> x_idx,
                             const JacobianOptions& opt, Callback&& cb) {
  const std::size_t ny = graph.value(y).numel();
  const std::size_t nx = graph.value(x).numel();
  for (std::size_t i : y_idx)
    if (i >= ny) throw IndexError("output index " + std::to_string(i) + " out of range");
  for (std::size_t i : x_idx)
    if (i >= nx) throw IndexError("input index " + std::to_string(i) + " out of range");

  auto active = detail::active_path(graph, y, x);
  if (!active[y]) {
    if (opt.warnings)
      opt.warnings->push_back("node " + std::to_string(y) +
                              " does not depend on node " + std::to_string(x) +
                              "; Jacobian is zero");
    if (!y_idx.empty())
      cb(std::size_t{0}, std::size_t{0},
         Tensor({y_idx.size(), x_idx.size()}));
    return;
  }

  if (opt.mode == Mode::Reverse) {
    const std::size_t step = detail::batch_size(graph, active, y_idx.size(), opt);
    for (std::size_t r0 = 0; r0 < y_idx.size(); r0 += step) {
      const std::size_t b = std::min(step, y_idx.size() - r0);
      detail::Block seeds(b * ny, 0.0);
      for (std::size_t s = 0; s < b; ++s) seeds[s * ny + y_idx[r0 + s]] = 1.0;
      auto g = detail::vjp_block(graph, y, std::move(seeds), b, x, active);
      Tensor block({b, x_idx.size()});
      for (std::size_t s = 0; s < b; ++s)
        for (std::size_t c = 0; c < x_idx.size(); ++c)
          block.at(s, c) = g[s * nx + x_idx[c]];
      cb(r0, std::size_t{0}, std::move(block));
    }
  } else {
    const std::size_t step = detail::batch_size(graph, active, x_idx.size(), opt);
    for (std::size_t c0 = 0; c0 < x_idx.size(); c0 += step) {
      const std::size_t b = std::min(step, x_idx.size() - c0);
      detail::Block seeds(b * nx, 0.0);
      for (std::size_t s = 0; s < b; ++s) seeds[s * nx + x_idx[c0 + s]] = 1.0;
      auto t = detail::jvp_block(graph, x, std::move(seeds), b, y, active);
      Tensor block({y_idx.size(), b});
      for (std::size_t r = 0; r < y_idx.size(); ++r)
        for (std::size_t s = 0; s < b; ++s) block.at(r, s) = t[s * ny + y_idx[r]];
      cb(std::size_t{0}, c0, std::move(block));
    }
  }
}

/// Jacobian of the selected elements of y with respect to the selected
/// elements of x, as a dense |y_idx| x |x_idx| matrix.
inline Tensor jacobian_block(const Graph& graph, NodeId y,
                             std::span<const std::size_t> y_idx, NodeId x,
                             std::span<const std::size_t> x_idx,
                             const JacobianOptions& opt = {}) {
  Tensor jac({y_idx.size(), x_idx.size()});
  for_each_jacobian_block(
      graph, y, y_idx, x, x_idx, opt,
      [&](std::size_t r0, std::size_t c0, const Tensor& block) {
        for (std::size_t r = 0; r < block.dim(0); ++r)
          for (std::size_t c = 0; c < block.dim(1); ++c)
            jac.at(r0 + r, c0 + c) = block.at(r, c);
      });
  return jac;
}

/// Full Jacobian dy/dx for rank-1 nodes y (p elements) and x (q elements).
inline Tensor jacobian(const Graph& graph, NodeId y, NodeId x,
                       const JacobianOptions& opt = {}) {
  const Tensor& vy = graph.value(y);
  const Tensor& vx = graph.value(x);
  if (vy.rank() != 1 || vx.rank() != 1) {
    throw DimensionError("jacobian expects rank-1 nodes, got " +
                         shape_string(vy.shape()) + " and " +
                         shape_string(vx.shape()));
  }
  const auto yi = detail::iota_indices(vy.numel());
  const auto xi = detail::iota_indices(vx.numel());
  return jacobian_block(graph, y, yi, x, xi, opt);
}

}  // namespace attnscope::ad
