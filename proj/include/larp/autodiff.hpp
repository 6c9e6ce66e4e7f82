#pragma once

// Tape-based reverse-mode automatic differentiation over 2-D tensors.
//
// A Tape owns a growing list of nodes; every op appends a node whose backward
// closure scatters the incoming gradient to its parents. Node ids are ints
// and parents always have smaller ids, so one reverse sweep over the node
// list is a valid topological order. Gradients are accumulated lazily: a node
// whose gradient tensor was never touched is skipped, which together with
// stop_gradient() keeps blocked subgraphs free.
//
// Broadcasting in binary elementwise ops follows one rule: the left operand
// has the full [B,D] shape and the right operand is either the same shape,
// a row [1,D], a column [B,1], or a scalar [1,1].

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "larp/tensor.hpp"

namespace larp {

using NodeId = int;

class Tape {
 public:
  struct Node {
    Tensor val;
    Tensor grad;  // empty until a gradient first reaches this node
    bool needs_grad = false;
    std::function<void(Tape&, Node&)> backward;  // empty for leaves
  };

  NodeId leaf(Tensor v, bool needs_grad = false) {
    nodes_.push_back(Node{std::move(v), {}, needs_grad, nullptr});
    return static_cast<NodeId>(nodes_.size()) - 1;
  }
  NodeId constant(Tensor v) { return leaf(std::move(v), false); }
  NodeId scalar(double v) { return constant(Tensor::scalar(v)); }

  const Tensor& val(NodeId id) const { return nodes_[id].val; }
  const Tensor& grad(NodeId id) const { return nodes_[id].grad; }
  bool needs_grad(NodeId id) const { return nodes_[id].needs_grad; }
  size_t size() const { return nodes_.size(); }

  // Gradient tensor of `id`, allocated as zeros on first use.
  Tensor& grad_ref(NodeId id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.val.rows, n.val.cols);
    return n.grad;
  }

  // Reverse sweep from `loss` (must be a scalar node).
  void backward(NodeId loss) {
    if (val(loss).size() != 1) throw std::invalid_argument("backward: loss must be 1x1");
    grad_ref(loss).d[0] = 1.0;
    for (NodeId i = loss; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, n);
    }
  }

  // ---------------------------------------------------------------------
  // Elementwise binary ops (right operand broadcastable)
  // ---------------------------------------------------------------------

  NodeId add(NodeId a, NodeId b) {
    return binary(
        a, b, [](double x, double y) { return x + y; },
        [](double, double, double, double g, double& da, double& db) {
          da += g;
          db += g;
        });
  }
  NodeId sub(NodeId a, NodeId b) {
    return binary(
        a, b, [](double x, double y) { return x - y; },
        [](double, double, double, double g, double& da, double& db) {
          da += g;
          db -= g;
        });
  }
  NodeId mul(NodeId a, NodeId b) {
    return binary(
        a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double, double g, double& da, double& db) {
          da += g * y;
          db += g * x;
        });
  }
  NodeId div(NodeId a, NodeId b) {
    return binary(
        a, b, [](double x, double y) { return x / y; },
        [](double x, double y, double, double g, double& da, double& db) {
          da += g / y;
          db -= g * x / (y * y);
        });
  }
  // min/max route the gradient to the argument that won; ties go to `a`.
  NodeId min(NodeId a, NodeId b) {
    return binary(
        a, b, [](double x, double y) { return x <= y ? x : y; },
        [](double x, double y, double, double g, double& da, double& db) {
          (x <= y ? da : db) += g;
        });
  }
  NodeId max(NodeId a, NodeId b) {
    return binary(
        a, b, [](double x, double y) { return x >= y ? x : y; },
        [](double x, double y, double, double g, double& da, double& db) {
          (x >= y ? da : db) += g;
        });
  }

  // ---------------------------------------------------------------------
  // Elementwise unary ops
  // ---------------------------------------------------------------------

  NodeId scale(NodeId a, double c) {
    return unary(
        a, [c](double x) { return c * x; },
        [c](double, double, double g, double& da) { da += c * g; });
  }
  NodeId add_const(NodeId a, double c) {
    return unary(
        a, [c](double x) { return x + c; },
        [](double, double, double g, double& da) { da += g; });
  }
  NodeId abs(NodeId a) {
    return unary(
        a, [](double x) { return std::abs(x); },
        [](double x, double, double g, double& da) { da += x >= 0 ? g : -g; });
  }
  NodeId square(NodeId a) {
    return unary(
        a, [](double x) { return x * x; },
        [](double x, double, double g, double& da) { da += 2 * x * g; });
  }
  NodeId sqrt(NodeId a) {
    return unary(
        a, [](double x) { return std::sqrt(x); },
        [](double, double y, double g, double& da) { da += g / (2 * y); });
  }
  NodeId relu(NodeId a) {
    return unary(
        a, [](double x) { return x > 0 ? x : 0; },
        [](double x, double, double g, double& da) { da += x > 0 ? g : 0; });
  }
  // ELU with alpha = 1; smooth value, C0-continuous derivative at 0.
  NodeId elu(NodeId a) {
    return unary(
        a, [](double x) { return x > 0 ? x : std::expm1(x); },
        [](double, double y, double g, double& da) { da += y > 0 ? g : g * (y + 1); });
  }
  // Exact GeLU, 0.5 x (1 + erf(x / sqrt 2)).
  NodeId gelu(NodeId a) {
    return unary(
        a,
        [](double x) { return 0.5 * x * (1 + std::erf(x * (1.0 / std::numbers::sqrt2))); },
        [](double x, double, double g, double& da) {
          double cdf = 0.5 * (1 + std::erf(x * (1.0 / std::numbers::sqrt2)));
          double pdf = std::exp(-0.5 * x * x) / std::sqrt(2 * std::numbers::pi);
          da += g * (cdf + x * pdf);
        });
  }

  // Value passes through, gradient does not.
  NodeId stop_gradient(NodeId a) { return leaf(val(a), false); }

  // ---------------------------------------------------------------------
  // Matrix product and reductions
  // ---------------------------------------------------------------------

  NodeId matmul(NodeId x, NodeId w) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    if (xv.cols != wv.rows) throw std::invalid_argument("matmul: inner dims disagree");
    Tensor out(xv.rows, wv.cols);
    gemm(xv, wv, nullptr, out);
    return op(std::move(out), {x, w}, [x, w](Tape& t, Node& n) {
      const Tensor& g = n.grad;
      if (t.needs_grad(x))
        t.grad_ref(x).map().noalias() += g.map() * t.val(w).map().transpose();
      if (t.needs_grad(w))
        t.grad_ref(w).map().noalias() += t.val(x).map().transpose() * g.map();
    });
  }

  // x*W + b with b a [1,O] row, fused to keep the node count down.
  NodeId affine(NodeId x, NodeId w, NodeId b) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    const Tensor& bv = val(b);
    if (xv.cols != wv.rows || bv.rows != 1 || bv.cols != wv.cols)
      throw std::invalid_argument("affine: shape mismatch");
    Tensor out(xv.rows, wv.cols);
    gemm(xv, wv, &bv, out);
    return op(std::move(out), {x, w, b}, [x, w, b](Tape& t, Node& n) {
      const Tensor& g = n.grad;
      if (t.needs_grad(x))
        t.grad_ref(x).map().noalias() += g.map() * t.val(w).map().transpose();
      if (t.needs_grad(w))
        t.grad_ref(w).map().noalias() += t.val(x).map().transpose() * g.map();
      if (t.needs_grad(b)) t.grad_ref(b).map().row(0) += g.map().colwise().sum();
    });
  }

  NodeId sum_all(NodeId a) {
    Tensor out = Tensor::scalar(val(a).map().sum());
    return op(std::move(out), {a}, [a](Tape& t, Node& n) {
      double g = n.grad.d[0];
      for (double& v : t.grad_ref(a).d) v += g;
    });
  }
  NodeId mean_all(NodeId a) {
    double inv = 1.0 / val(a).size();
    Tensor out = Tensor::scalar(val(a).map().sum() * inv);
    return op(std::move(out), {a}, [a, inv](Tape& t, Node& n) {
      double g = n.grad.d[0] * inv;
      for (double& v : t.grad_ref(a).d) v += g;
    });
  }

  // ---------------------------------------------------------------------
  // Column structure
  // ---------------------------------------------------------------------

  NodeId slice_cols(NodeId a, int lo, int hi) {
    const Tensor& av = val(a);
    if (lo < 0 || hi > av.cols || lo >= hi)
      throw std::invalid_argument("slice_cols: bad range");
    Tensor out(av.rows, hi - lo);
    for (int r = 0; r < av.rows; ++r)
      for (int c = lo; c < hi; ++c) out.at(r, c - lo) = av.at(r, c);
    return op(std::move(out), {a}, [a, lo](Tape& t, Node& n) {
      Tensor& da = t.grad_ref(a);
      for (int r = 0; r < n.grad.rows; ++r)
        for (int c = 0; c < n.grad.cols; ++c) da.at(r, lo + c) += n.grad.at(r, c);
    });
  }

  NodeId concat_cols(std::span<const NodeId> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    int rows = val(parts[0]).rows, cols = 0;
    for (NodeId p : parts) {
      if (val(p).rows != rows) throw std::invalid_argument("concat_cols: row mismatch");
      cols += val(p).cols;
    }
    Tensor out(rows, cols);
    int off = 0;
    for (NodeId p : parts) {
      const Tensor& pv = val(p);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < pv.cols; ++c) out.at(r, off + c) = pv.at(r, c);
      off += pv.cols;
    }
    std::vector<NodeId> ps(parts.begin(), parts.end());
    bool any = false;
    for (NodeId p : ps) any = any || needs_grad(p);
    return op(std::move(out), any, [ps](Tape& t, Node& n) {
      int off = 0;
      for (NodeId p : ps) {
        int w = t.val(p).cols;
        if (t.needs_grad(p)) {
          Tensor& dp = t.grad_ref(p);
          for (int r = 0; r < n.grad.rows; ++r)
            for (int c = 0; c < w; ++c) dp.at(r, c) += n.grad.at(r, off + c);
        }
        off += w;
      }
    });
  }
  NodeId concat_cols(std::initializer_list<NodeId> parts) {
    return concat_cols(std::span<const NodeId>(parts.begin(), parts.size()));
  }

  // ---------------------------------------------------------------------
  // Row structure: batches of same-typed rows are stacked into one tensor so
  // a single network evaluation covers them; these ops route rows in and out.
  // ---------------------------------------------------------------------

  NodeId slice_rows(NodeId a, int lo, int hi) {
    const Tensor& av = val(a);
    if (lo < 0 || hi > av.rows || lo >= hi)
      throw std::invalid_argument("slice_rows: bad range");
    Tensor out(hi - lo, av.cols);
    std::copy(av.d.begin() + static_cast<size_t>(lo) * av.cols,
              av.d.begin() + static_cast<size_t>(hi) * av.cols, out.d.begin());
    return op(std::move(out), {a}, [a, lo](Tape& t, Node& n) {
      Tensor& da = t.grad_ref(a);
      const size_t off = static_cast<size_t>(lo) * n.grad.cols;
      for (size_t k = 0; k < n.grad.size(); ++k) da.d[off + k] += n.grad.d[k];
    });
  }

  NodeId concat_rows(std::span<const NodeId> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    int cols = val(parts[0]).cols, rows = 0;
    for (NodeId p : parts) {
      if (val(p).cols != cols) throw std::invalid_argument("concat_rows: col mismatch");
      rows += val(p).rows;
    }
    Tensor out(rows, cols);
    size_t off = 0;
    for (NodeId p : parts) {
      const Tensor& pv = val(p);
      std::copy(pv.d.begin(), pv.d.end(), out.d.begin() + off);
      off += pv.size();
    }
    std::vector<NodeId> ps(parts.begin(), parts.end());
    bool any = false;
    for (NodeId p : ps) any = any || needs_grad(p);
    return op(std::move(out), any, [ps](Tape& t, Node& n) {
      size_t off = 0;
      for (NodeId p : ps) {
        const size_t sz = t.val(p).size();
        if (t.needs_grad(p)) {
          Tensor& dp = t.grad_ref(p);
          for (size_t k = 0; k < sz; ++k) dp.d[k] += n.grad.d[off + k];
        }
        off += sz;
      }
    });
  }
  NodeId concat_rows(std::initializer_list<NodeId> parts) {
    return concat_rows(std::span<const NodeId>(parts.begin(), parts.size()));
  }

  // ---------------------------------------------------------------------
  // Row-wise geometric ops
  // ---------------------------------------------------------------------

  // [B,k] x [B,k] -> [B,1]
  NodeId row_dot(NodeId a, NodeId b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (!av.same_shape(bv)) throw std::invalid_argument("row_dot: shape mismatch");
    Tensor out(av.rows, 1);
    for (int r = 0; r < av.rows; ++r) {
      double s = 0;
      for (int c = 0; c < av.cols; ++c) s += av.at(r, c) * bv.at(r, c);
      out.at(r, 0) = s;
    }
    return op(std::move(out), {a, b}, [a, b](Tape& t, Node& n) {
      const Tensor& av = t.val(a);
      const Tensor& bv = t.val(b);
      bool ga = t.needs_grad(a), gb = t.needs_grad(b);
      Tensor* da = ga ? &t.grad_ref(a) : nullptr;
      Tensor* db = gb ? &t.grad_ref(b) : nullptr;
      for (int r = 0; r < av.rows; ++r) {
        double g = n.grad.at(r, 0);
        for (int c = 0; c < av.cols; ++c) {
          if (ga) da->at(r, c) += g * bv.at(r, c);
          if (gb) db->at(r, c) += g * av.at(r, c);
        }
      }
    });
  }

  // Rows scaled to unit L2 norm. Rows with tiny norm are left untouched by
  // the gradient (their forward value divides by the epsilon-guarded norm).
  // The forward divides rather than multiplying by a reciprocal so that the
  // result is bit-identical to scalar-at-a-time normalization.
  NodeId normalize_rows(NodeId a, double eps = 1e-12) {
    const Tensor& av = val(a);
    Tensor out(av.rows, av.cols);
    for (int r = 0; r < av.rows; ++r) {
      double s = 0;
      for (int c = 0; c < av.cols; ++c) s += av.at(r, c) * av.at(r, c);
      double norm = std::max(std::sqrt(s), eps);
      for (int c = 0; c < av.cols; ++c) out.at(r, c) = av.at(r, c) / norm;
    }
    return op(std::move(out), {a}, [a, eps](Tape& t, Node& n) {
      const Tensor& av = t.val(a);
      Tensor& da = t.grad_ref(a);
      for (int r = 0; r < av.rows; ++r) {
        double s = 0;
        for (int c = 0; c < av.cols; ++c) s += av.at(r, c) * av.at(r, c);
        double norm = std::max(std::sqrt(s), eps);
        // dx = (g - y (y . g)) / |x|
        double ydotg = 0;
        for (int c = 0; c < av.cols; ++c) ydotg += n.val.at(r, c) * n.grad.at(r, c);
        for (int c = 0; c < av.cols; ++c)
          da.at(r, c) += (n.grad.at(r, c) - n.val.at(r, c) * ydotg) / norm;
      }
    });
  }

  // Row-wise Hamilton product of [B,4] quaternion blocks.
  NodeId quat_mul_rows(NodeId a, NodeId b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (av.cols != 4 || bv.cols != 4 || av.rows != bv.rows)
      throw std::invalid_argument("quat_mul_rows: expected matching [B,4]");
    Tensor out(av.rows, 4);
    for (int r = 0; r < av.rows; ++r) {
      const double *x = &av.at(r, 0), *y = &bv.at(r, 0);
      double* o = &out.at(r, 0);
      o[0] = x[0] * y[0] - x[1] * y[1] - x[2] * y[2] - x[3] * y[3];
      o[1] = x[0] * y[1] + x[1] * y[0] + x[2] * y[3] - x[3] * y[2];
      o[2] = x[0] * y[2] - x[1] * y[3] + x[2] * y[0] + x[3] * y[1];
      o[3] = x[0] * y[3] + x[1] * y[2] - x[2] * y[1] + x[3] * y[0];
    }
    return op(std::move(out), {a, b}, [a, b](Tape& t, Node& n) {
      // With y = L(a) b = R(b) a, the adjoints are da += R(b)^T g and
      // db += L(a)^T g, expanded by hand below.
      const Tensor& av = t.val(a);
      const Tensor& bv = t.val(b);
      bool ga = t.needs_grad(a), gb = t.needs_grad(b);
      Tensor* da = ga ? &t.grad_ref(a) : nullptr;
      Tensor* db = gb ? &t.grad_ref(b) : nullptr;
      for (int r = 0; r < av.rows; ++r) {
        const double *x = &av.at(r, 0), *y = &bv.at(r, 0), *g = &n.grad.at(r, 0);
        if (ga) {
          double* o = &da->at(r, 0);
          o[0] += g[0] * y[0] + g[1] * y[1] + g[2] * y[2] + g[3] * y[3];
          o[1] += -g[0] * y[1] + g[1] * y[0] - g[2] * y[3] + g[3] * y[2];
          o[2] += -g[0] * y[2] + g[1] * y[3] + g[2] * y[0] - g[3] * y[1];
          o[3] += -g[0] * y[3] - g[1] * y[2] + g[2] * y[1] + g[3] * y[0];
        }
        if (gb) {
          double* o = &db->at(r, 0);
          o[0] += g[0] * x[0] + g[1] * x[1] + g[2] * x[2] + g[3] * x[3];
          o[1] += -g[0] * x[1] + g[1] * x[0] + g[2] * x[3] - g[3] * x[2];
          o[2] += -g[0] * x[2] - g[1] * x[3] + g[2] * x[0] + g[3] * x[1];
          o[3] += -g[0] * x[3] + g[1] * x[2] - g[2] * x[1] + g[3] * x[0];
        }
      }
    });
  }

  // [B,4] unit quaternions -> [B,9] row-major rotation matrices.
  NodeId quat_to_mat_rows(NodeId q) {
    const Tensor& qv = val(q);
    if (qv.cols != 4) throw std::invalid_argument("quat_to_mat_rows: expected [B,4]");
    Tensor out(qv.rows, 9);
    for (int r = 0; r < qv.rows; ++r) {
      const double* p = &qv.at(r, 0);
      double w = p[0], x = p[1], y = p[2], z = p[3];
      double* m = &out.at(r, 0);
      m[0] = 1 - 2 * (y * y + z * z); m[1] = 2 * (x * y - w * z); m[2] = 2 * (x * z + w * y);
      m[3] = 2 * (x * y + w * z); m[4] = 1 - 2 * (x * x + z * z); m[5] = 2 * (y * z - w * x);
      m[6] = 2 * (x * z - w * y); m[7] = 2 * (y * z + w * x); m[8] = 1 - 2 * (x * x + y * y);
    }
    return op(std::move(out), {q}, [q](Tape& t, Node& n) {
      const Tensor& qv = t.val(q);
      Tensor& dq = t.grad_ref(q);
      for (int r = 0; r < qv.rows; ++r) {
        const double* p = &qv.at(r, 0);
        double w = p[0], x = p[1], y = p[2], z = p[3];
        const double* g = &n.grad.at(r, 0);
        double* o = &dq.at(r, 0);
        o[0] += 2 * (-g[1] * z + g[2] * y + g[3] * z - g[5] * x - g[6] * y + g[7] * x);
        o[1] += 2 * (g[1] * y + g[2] * z + g[3] * y - 2 * g[4] * x - g[5] * w + g[6] * z +
                     g[7] * w - 2 * g[8] * x);
        o[2] += 2 * (-2 * g[0] * y + g[1] * x + g[2] * w + g[3] * x + g[5] * z - g[6] * w +
                     g[7] * z - 2 * g[8] * y);
        o[3] += 2 * (-2 * g[0] * z - g[1] * w + g[2] * x + g[3] * w - 2 * g[4] * z + g[5] * y +
                     g[6] * x + g[7] * y);
      }
    });
  }

  // Row-wise y = M v with M a [B,9] row-major 3x3 block and v a [B,3].
  NodeId mat3vec_rows(NodeId m, NodeId v) {
    const Tensor& mv = val(m);
    const Tensor& vv = val(v);
    if (mv.cols != 9 || vv.cols != 3 || mv.rows != vv.rows)
      throw std::invalid_argument("mat3vec_rows: expected [B,9] and [B,3]");
    Tensor out(mv.rows, 3);
    for (int r = 0; r < mv.rows; ++r) {
      const double *M = &mv.at(r, 0), *x = &vv.at(r, 0);
      double* o = &out.at(r, 0);
      for (int i = 0; i < 3; ++i)
        o[i] = M[3 * i] * x[0] + M[3 * i + 1] * x[1] + M[3 * i + 2] * x[2];
    }
    return op(std::move(out), {m, v}, [m, v](Tape& t, Node& n) {
      const Tensor& mv = t.val(m);
      const Tensor& vv = t.val(v);
      bool gm = t.needs_grad(m), gv = t.needs_grad(v);
      Tensor* dm = gm ? &t.grad_ref(m) : nullptr;
      Tensor* dv = gv ? &t.grad_ref(v) : nullptr;
      for (int r = 0; r < mv.rows; ++r) {
        const double *M = &mv.at(r, 0), *x = &vv.at(r, 0), *g = &n.grad.at(r, 0);
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) {
            if (gm) dm->at(r, 3 * i + j) += g[i] * x[j];
            if (gv) dv->at(r, j) += g[i] * M[3 * i + j];
          }
      }
    });
  }

  // Row-wise y = M^T v (the inverse rotation when M is orthonormal).
  NodeId mat3tvec_rows(NodeId m, NodeId v) {
    const Tensor& mv = val(m);
    const Tensor& vv = val(v);
    if (mv.cols != 9 || vv.cols != 3 || mv.rows != vv.rows)
      throw std::invalid_argument("mat3tvec_rows: expected [B,9] and [B,3]");
    Tensor out(mv.rows, 3);
    for (int r = 0; r < mv.rows; ++r) {
      const double *M = &mv.at(r, 0), *x = &vv.at(r, 0);
      double* o = &out.at(r, 0);
      for (int j = 0; j < 3; ++j) o[j] = M[j] * x[0] + M[3 + j] * x[1] + M[6 + j] * x[2];
    }
    return op(std::move(out), {m, v}, [m, v](Tape& t, Node& n) {
      const Tensor& mv = t.val(m);
      const Tensor& vv = t.val(v);
      bool gm = t.needs_grad(m), gv = t.needs_grad(v);
      Tensor* dm = gm ? &t.grad_ref(m) : nullptr;
      Tensor* dv = gv ? &t.grad_ref(v) : nullptr;
      for (int r = 0; r < mv.rows; ++r) {
        const double *M = &mv.at(r, 0), *x = &vv.at(r, 0), *g = &n.grad.at(r, 0);
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) {
            if (gm) dm->at(r, 3 * i + j) += x[i] * g[j];
            if (gv) dv->at(r, i) += M[3 * i + j] * g[j];
          }
      }
    });
  }

  // Row-wise cross product of [B,3] blocks.
  NodeId cross_rows(NodeId a, NodeId b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (av.cols != 3 || !av.same_shape(bv))
      throw std::invalid_argument("cross_rows: expected matching [B,3]");
    Tensor out(av.rows, 3);
    for (int r = 0; r < av.rows; ++r) {
      const double *x = &av.at(r, 0), *y = &bv.at(r, 0);
      double* o = &out.at(r, 0);
      o[0] = x[1] * y[2] - x[2] * y[1];
      o[1] = x[2] * y[0] - x[0] * y[2];
      o[2] = x[0] * y[1] - x[1] * y[0];
    }
    return op(std::move(out), {a, b}, [a, b](Tape& t, Node& n) {
      // grad_a = b x g, grad_b = g x a
      const Tensor& av = t.val(a);
      const Tensor& bv = t.val(b);
      bool ga = t.needs_grad(a), gb = t.needs_grad(b);
      Tensor* da = ga ? &t.grad_ref(a) : nullptr;
      Tensor* db = gb ? &t.grad_ref(b) : nullptr;
      for (int r = 0; r < av.rows; ++r) {
        const double *x = &av.at(r, 0), *y = &bv.at(r, 0), *g = &n.grad.at(r, 0);
        if (ga) {
          da->at(r, 0) += y[1] * g[2] - y[2] * g[1];
          da->at(r, 1) += y[2] * g[0] - y[0] * g[2];
          da->at(r, 2) += y[0] * g[1] - y[1] * g[0];
        }
        if (gb) {
          db->at(r, 0) += g[1] * x[2] - g[2] * x[1];
          db->at(r, 1) += g[2] * x[0] - g[0] * x[2];
          db->at(r, 2) += g[0] * x[1] - g[1] * x[0];
        }
      }
    });
  }

  // out = mask * a + (1 - mask) * b with a constant [B,1] mask; used to pick
  // between branches of piecewise-defined geometry decided off-tape.
  NodeId blend_rows(const Tensor& mask, NodeId a, NodeId b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (!av.same_shape(bv) || mask.rows != av.rows || mask.cols != 1)
      throw std::invalid_argument("blend_rows: shape mismatch");
    Tensor out(av.rows, av.cols);
    for (int r = 0; r < av.rows; ++r)
      for (int c = 0; c < av.cols; ++c)
        out.at(r, c) = mask.at(r, 0) * av.at(r, c) + (1 - mask.at(r, 0)) * bv.at(r, c);
    return op(std::move(out), {a, b}, [a, b, mask](Tape& t, Node& n) {
      bool ga = t.needs_grad(a), gb = t.needs_grad(b);
      Tensor* da = ga ? &t.grad_ref(a) : nullptr;
      Tensor* db = gb ? &t.grad_ref(b) : nullptr;
      for (int r = 0; r < n.grad.rows; ++r)
        for (int c = 0; c < n.grad.cols; ++c) {
          if (ga) da->at(r, c) += mask.at(r, 0) * n.grad.at(r, c);
          if (gb) db->at(r, c) += (1 - mask.at(r, 0)) * n.grad.at(r, c);
        }
    });
  }

 private:
  std::vector<Node> nodes_;

  template <class Parents, class Back>
  NodeId op_impl(Tensor out, const Parents& parents, Back back) {
    bool any = false;
    for (NodeId p : parents) any = any || needs_grad(p);
    return op(std::move(out), any, std::move(back));
  }

  template <class Back>
  NodeId op(Tensor out, std::initializer_list<NodeId> parents, Back back) {
    return op_impl(std::move(out), parents, std::move(back));
  }

  template <class Back>
  NodeId op(Tensor out, bool needs, Back back) {
    Node n;
    n.val = std::move(out);
    n.needs_grad = needs;
    if (needs) n.backward = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  // Shared implementation of broadcast-aware elementwise binaries. FwdFn maps
  // (x, y) to the output; BackFn receives (x, y, out, g, da, db).
  template <class FwdFn, class BackFn>
  NodeId binary(NodeId a, NodeId b, FwdFn fwd, BackFn bk) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (!(bv.same_shape(av) || (bv.rows == 1 && bv.cols == av.cols) ||
          (bv.rows == av.rows && bv.cols == 1) || bv.size() == 1))
      throw std::invalid_argument("binary op: incompatible shapes");
    const bool brow = bv.rows == 1 && bv.cols == av.cols && av.rows != 1;
    const bool bcol = bv.cols == 1 && bv.rows == av.rows && av.cols != 1;
    const bool bscalar = bv.size() == 1 && av.size() != 1;
    Tensor out(av.rows, av.cols);
    for (int r = 0; r < av.rows; ++r)
      for (int c = 0; c < av.cols; ++c)
        out.at(r, c) = fwd(av.at(r, c), bval(bv, r, c, brow, bcol, bscalar));
    return op(std::move(out), {a, b}, [a, b, bk, brow, bcol, bscalar](Tape& t, Node& n) {
      const Tensor& av = t.val(a);
      const Tensor& bv = t.val(b);
      bool ga = t.needs_grad(a), gb = t.needs_grad(b);
      Tensor* da = ga ? &t.grad_ref(a) : nullptr;
      Tensor* db = gb ? &t.grad_ref(b) : nullptr;
      double sink = 0;  // discarded accumulator for operands without grad
      auto bslot = [&](int r, int c) -> double& {
        if (!gb) return sink;
        if (bscalar) return db->d[0];
        if (brow) return db->at(0, c);
        if (bcol) return db->at(r, 0);
        return db->at(r, c);
      };
      for (int r = 0; r < av.rows; ++r)
        for (int c = 0; c < av.cols; ++c)
          bk(av.at(r, c), bval(bv, r, c, brow, bcol, bscalar), n.val.at(r, c),
             n.grad.at(r, c), ga ? da->at(r, c) : sink, bslot(r, c));
    });
  }

  static double bval(const Tensor& bv, int r, int c, bool brow, bool bcol, bool bscalar) {
    if (bscalar) return bv.d[0];
    if (brow) return bv.at(0, c);
    if (bcol) return bv.at(r, 0);
    return bv.at(r, c);
  }

  template <class FwdFn, class BackFn>
  NodeId unary(NodeId a, FwdFn fwd, BackFn bk) {
    const Tensor& av = val(a);
    Tensor out(av.rows, av.cols);
    for (size_t i = 0; i < av.size(); ++i) out.d[i] = fwd(av.d[i]);
    return op(std::move(out), {a}, [a, bk](Tape& t, Node& n) {
      const Tensor& av = t.val(a);
      Tensor& da = t.grad_ref(a);
      for (size_t i = 0; i < av.size(); ++i) bk(av.d[i], n.val.d[i], n.grad.d[i], da.d[i]);
    });
  }
};

}  // namespace larp
