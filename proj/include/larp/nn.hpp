#pragma once

// Multilayer perceptrons over the autodiff tape, plus the optimizer pieces
// the trainer needs: Adam, a cosine learning-rate schedule, and the global
// gradient-norm rule that discards or rescales unstable updates.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "larp/autodiff.hpp"
#include "larp/rng.hpp"
#include "larp/tensor.hpp"

namespace larp {

enum class Act { relu, elu, gelu };

inline std::string act_name(Act a) {
  switch (a) {
    case Act::relu: return "relu";
    case Act::elu: return "elu";
    case Act::gelu: return "gelu";
  }
  throw std::invalid_argument("bad activation enum");
}

inline Act act_from_name(const std::string& s) {
  if (s == "relu") return Act::relu;
  if (s == "elu") return Act::elu;
  if (s == "gelu") return Act::gelu;
  throw std::invalid_argument("unknown activation: " + s);
}

// `layers` counts affine layers; activations sit between them, so the output
// layer is linear. layers = 1 degenerates to a single affine map.
struct MlpSpec {
  int in = 0, out = 0, hidden = 0, layers = 2;
  Act act = Act::elu;

  int layer_in(int l) const { return l == 0 ? in : hidden; }
  int layer_out(int l) const { return l == layers - 1 ? out : hidden; }
  size_t n_params() const {
    size_t n = 0;
    for (int l = 0; l < layers; ++l)
      n += static_cast<size_t>(layer_in(l) + 1) * layer_out(l);
    return n;
  }
};

struct MlpParams {
  std::vector<Tensor> w, b;  // w[l] is [in_l, out_l], b[l] is [1, out_l]
};

inline MlpParams init_mlp(const MlpSpec& spec, uint64_t seed) {
  MlpParams p;
  for (int l = 0; l < spec.layers; ++l) {
    auto rng = make_rng(seed, l);
    p.w.push_back(he_uniform(spec.layer_in(l), spec.layer_out(l), spec.layer_in(l), rng));
    p.b.push_back(Tensor(1, spec.layer_out(l)));
  }
  return p;
}

inline NodeId apply_act(Tape& t, NodeId x, Act act) {
  switch (act) {
    case Act::relu: return t.relu(x);
    case Act::elu: return t.elu(x);
    case Act::gelu: return t.gelu(x);
  }
  throw std::invalid_argument("bad activation enum");
}

// Forward pass on the tape; `w` and `b` are node ids of previously leafed
// parameters (so the same leaves can be shared across all unroll steps).
inline NodeId mlp_forward(Tape& t, const MlpSpec& spec, const std::vector<NodeId>& w,
                          const std::vector<NodeId>& b, NodeId x) {
  NodeId h = x;
  for (int l = 0; l < spec.layers; ++l) {
    h = t.affine(h, w[l], b[l]);
    if (l + 1 < spec.layers) h = apply_act(t, h, spec.act);
  }
  return h;
}

// Tape-free forward for tests and tooling that only need values.
inline Tensor mlp_forward_plain(const MlpSpec& spec, const MlpParams& p, const Tensor& x) {
  Tensor h = x;
  for (int l = 0; l < spec.layers; ++l) {
    Tensor next(h.rows, spec.layer_out(l));
    gemm(h, p.w[l], &p.b[l], next);
    if (l + 1 < spec.layers) {
      for (double& v : next.d) {
        switch (spec.act) {
          case Act::relu: v = v > 0 ? v : 0; break;
          case Act::elu: v = v > 0 ? v : std::expm1(v); break;
          case Act::gelu: v = 0.5 * v * (1 + std::erf(v * (1.0 / std::numbers::sqrt2))); break;
        }
      }
    }
    h = std::move(next);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

inline double global_grad_norm(const std::vector<const Tensor*>& grads) {
  double s = 0;
  for (const Tensor* g : grads)
    for (double v : g->d) s += v * v;
  return std::sqrt(s);
}

// What to do when the global gradient norm exceeds the threshold: discard the
// whole update, or rescale the gradient onto the threshold sphere.
enum class GradRule { drop, rescale };

class Adam {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  // Applies one update in place; params[i] and grads[i] must stay aligned
  // call to call. State tensors are created on first use.
  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
            double lr) {
    if (m_.empty()) {
      for (Tensor* p : params) {
        m_.emplace_back(p->rows, p->cols);
        v_.emplace_back(p->rows, p->cols);
      }
    }
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw std::invalid_argument("Adam: parameter list changed size");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, t_);
    const double c2 = 1.0 - std::pow(beta2, t_);
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = *grads[i];
      for (size_t k = 0; k < p.size(); ++k) {
        double m = m_[i].d[k] = beta1 * m_[i].d[k] + (1 - beta1) * g.d[k];
        double v = v_[i].d[k] = beta2 * v_[i].d[k] + (1 - beta2) * g.d[k] * g.d[k];
        p.d[k] -= lr * (m / c1) / (std::sqrt(v / c2) + eps);
      }
    }
  }

  int steps_taken() const { return t_; }

 private:
  int t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Cosine decay from lr0 to lr_min across `total` units of progress.
inline double cosine_lr(double lr0, double lr_min, double progress, double total) {
  if (total <= 0) return lr0;
  double f = std::clamp(progress / total, 0.0, 1.0);
  return lr_min + 0.5 * (lr0 - lr_min) * (1 + std::cos(std::numbers::pi * f));
}

}  // namespace larp
