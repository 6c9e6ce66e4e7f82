// Reverse-mode tape: finite-difference agreement for every differentiable
// op, stop-gradient semantics, MLP layers, Adam, and kernel determinism.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "larp/autodiff.hpp"
#include "larp/nn.hpp"
#include "larp/rng.hpp"

using namespace larp;

namespace {

Tensor rand_tensor(int r, int c, std::mt19937_64& rng, double lo = -1.0,
                   double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(r, c);
  for (double& v : t.d) v = u(rng);
  return t;
}

// Random values bounded away from zero so kinked ops (abs, relu, min, max)
// are differentiable at every probe point.
Tensor rand_signed(int r, int c, std::mt19937_64& rng, double lo = 0.2,
                   double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::bernoulli_distribution flip(0.5);
  Tensor t(r, c);
  for (double& v : t.d) v = flip(rng) ? u(rng) : -u(rng);
  return t;
}

using Builder = std::function<NodeId(Tape&, const std::vector<NodeId>&)>;

struct AdResult {
  double loss;
  std::vector<Tensor> grads;
};

AdResult ad_eval(const std::vector<Tensor>& inputs, const Builder& build) {
  Tape t;
  std::vector<NodeId> ids;
  for (const Tensor& in : inputs) ids.push_back(t.leaf(in, true));
  const NodeId loss = build(t, ids);
  t.backward(loss);
  AdResult r{t.val(loss).d[0], {}};
  for (NodeId id : ids)
    r.grads.push_back(t.grad(id).empty() ? Tensor(t.val(id).rows, t.val(id).cols)
                                         : t.grad(id));
  return r;
}

// Central finite differences on every component of every input.
void check_grads(const std::vector<Tensor>& inputs, const Builder& build,
                 double h = 1e-6, double tol = 2e-6) {
  const AdResult ad = ad_eval(inputs, build);
  REQUIRE(std::isfinite(ad.loss));
  for (size_t i = 0; i < inputs.size(); ++i)
    for (size_t k = 0; k < inputs[i].size(); ++k) {
      std::vector<Tensor> plus = inputs, minus = inputs;
      plus[i].d[k] += h;
      minus[i].d[k] -= h;
      const double fd = (ad_eval(plus, build).loss - ad_eval(minus, build).loss) / (2 * h);
      const double got = ad.grads[i].d[k];
      INFO("input " << i << " component " << k << " fd " << fd << " ad " << got);
      CHECK(std::abs(fd - got) <= tol * std::max(1.0, std::abs(fd)));
    }
}

// Scalar readout that weights every output entry differently, so no gradient
// component can hide behind a symmetric reduction.
NodeId readout(Tape& t, NodeId out, uint64_t salt = 17) {
  const Tensor& v = t.val(out);
  auto rng = make_rng(salt, static_cast<uint64_t>(v.size()));
  return t.sum_all(t.mul(out, t.constant(rand_tensor(v.rows, v.cols, rng, 0.3, 1.7))));
}

}  // namespace

TEST_CASE("elementwise binary ops match finite differences in every broadcast") {
  auto rng = make_rng(101, 0);
  const Tensor a = rand_signed(3, 4, rng);
  // Right-operand shapes: full, row, column, scalar.
  const std::vector<Tensor> rights = {rand_signed(3, 4, rng), rand_signed(1, 4, rng),
                                      rand_signed(3, 1, rng), rand_signed(1, 1, rng)};
  for (const Tensor& b : rights) {
    for (int which = 0; which < 6; ++which) {
      Builder build = [which](Tape& t, const std::vector<NodeId>& in) {
        NodeId out = 0;
        switch (which) {
          case 0: out = t.add(in[0], in[1]); break;
          case 1: out = t.sub(in[0], in[1]); break;
          case 2: out = t.mul(in[0], in[1]); break;
          case 3: out = t.div(in[0], in[1]); break;
          case 4: out = t.min(in[0], in[1]); break;
          case 5: out = t.max(in[0], in[1]); break;
        }
        return readout(t, out);
      };
      check_grads({a, b}, build);
    }
  }
}

TEST_CASE("elementwise unary ops match finite differences") {
  auto rng = make_rng(102, 0);
  const Tensor a = rand_signed(2, 5, rng);
  const Tensor pos = rand_tensor(2, 5, rng, 0.2, 2.0);
  auto unary_case = [](auto opf) {
    return Builder{[opf](Tape& t, const std::vector<NodeId>& in) {
      return readout(t, opf(t, in[0]));
    }};
  };
  check_grads({a}, unary_case([](Tape& t, NodeId x) { return t.scale(x, -1.7); }));
  check_grads({a}, unary_case([](Tape& t, NodeId x) { return t.add_const(x, 0.4); }));
  check_grads({a}, unary_case([](Tape& t, NodeId x) { return t.abs(x); }));
  check_grads({a}, unary_case([](Tape& t, NodeId x) { return t.square(x); }));
  check_grads({pos}, unary_case([](Tape& t, NodeId x) { return t.sqrt(x); }));
  check_grads({a}, unary_case([](Tape& t, NodeId x) { return t.relu(x); }));
  check_grads({a}, unary_case([](Tape& t, NodeId x) { return t.elu(x); }));
  check_grads({a}, unary_case([](Tape& t, NodeId x) { return t.gelu(x); }));
}

TEST_CASE("activation values are correct and finite over a wide range") {
  Tape t;
  // exp(-1) - 1 for the negative branch.
  const NodeId e = t.elu(t.constant(Tensor::scalar(-1.0)));
  CHECK_THAT(t.val(e).d[0], Catch::Matchers::WithinAbs(std::expm1(-1.0), 1e-15));

  // Activations and their derivatives stay finite across [-50, 50].
  Tensor wide(1, 101);
  for (int i = 0; i <= 100; ++i) wide.at(0, i) = -50.0 + i;
  for (Act act : {Act::relu, Act::elu, Act::gelu}) {
    Tape tt;
    const NodeId x = tt.leaf(wide, true);
    const NodeId y = apply_act(tt, x, act);
    tt.backward(tt.sum_all(y));
    for (double v : tt.val(y).d) CHECK(std::isfinite(v));
    for (double g : tt.grad(x).d) CHECK(std::isfinite(g));
  }
}

TEST_CASE("matrix, reduction, and structure ops match finite differences") {
  auto rng = make_rng(103, 0);
  const Tensor x = rand_tensor(3, 4, rng);
  const Tensor w = rand_tensor(4, 2, rng);
  const Tensor b = rand_tensor(1, 2, rng);

  check_grads({x, w}, [](Tape& t, const std::vector<NodeId>& in) {
    return readout(t, t.matmul(in[0], in[1]));
  });
  check_grads({x, w, b}, [](Tape& t, const std::vector<NodeId>& in) {
    return readout(t, t.affine(in[0], in[1], in[2]));
  });
  check_grads({x}, [](Tape& t, const std::vector<NodeId>& in) {
    return t.sum_all(in[0]);
  });
  check_grads({x}, [](Tape& t, const std::vector<NodeId>& in) {
    return t.mean_all(in[0]);
  });
  check_grads({x}, [](Tape& t, const std::vector<NodeId>& in) {
    return readout(t, t.slice_cols(in[0], 1, 3));
  });
  check_grads({x}, [](Tape& t, const std::vector<NodeId>& in) {
    return readout(t, t.slice_rows(in[0], 1, 3));
  });
  check_grads({x, rand_tensor(3, 2, rng)}, [](Tape& t, const std::vector<NodeId>& in) {
    return readout(t, t.concat_cols({in[0], in[1]}));
  });
  check_grads({x, rand_tensor(2, 4, rng)}, [](Tape& t, const std::vector<NodeId>& in) {
    return readout(t, t.concat_rows({in[0], in[1]}));
  });
}

TEST_CASE("row-wise geometric ops match finite differences") {
  auto rng = make_rng(104, 0);
  const Tensor v3a = rand_tensor(4, 3, rng);
  const Tensor v3b = rand_tensor(4, 3, rng);
  const Tensor q4a = rand_tensor(4, 4, rng, 0.3, 1.0);
  const Tensor q4b = rand_tensor(4, 4, rng, 0.3, 1.0);
  const Tensor m9 = rand_tensor(4, 9, rng);

  check_grads({v3a, v3b}, [](Tape& t, const std::vector<NodeId>& in) {
    return readout(t, t.row_dot(in[0], in[1]));
  });
  check_grads({v3a, v3b}, [](Tape& t, const std::vector<NodeId>& in) {
    return readout(t, t.cross_rows(in[0], in[1]));
  });
  check_grads({q4a}, [](Tape& t, const std::vector<NodeId>& in) {
    return readout(t, t.normalize_rows(in[0]));
  });
  check_grads({q4a, q4b}, [](Tape& t, const std::vector<NodeId>& in) {
    return readout(t, t.quat_mul_rows(in[0], in[1]));
  });
  check_grads({q4a}, [](Tape& t, const std::vector<NodeId>& in) {
    return readout(t, t.quat_to_mat_rows(in[0]));
  });
  check_grads({m9, v3a}, [](Tape& t, const std::vector<NodeId>& in) {
    return readout(t, t.mat3vec_rows(in[0], in[1]));
  });
  check_grads({m9, v3a}, [](Tape& t, const std::vector<NodeId>& in) {
    return readout(t, t.mat3tvec_rows(in[0], in[1]));
  });

  Tensor mask(4, 1);
  mask.d = {1, 0, 1, 0};
  check_grads({v3a, v3b}, [mask](Tape& t, const std::vector<NodeId>& in) {
    return readout(t, t.blend_rows(mask, in[0], in[1]));
  });
}

TEST_CASE("simple losses have closed-form gradients") {
  auto rng = make_rng(105, 0);
  const Tensor w = rand_tensor(3, 3, rng);
  const Tensor x = rand_tensor(3, 3, rng);

  // loss = sum(w * x) has gradient exactly x (and w on the other side).
  Tape t;
  const NodeId wn = t.leaf(w, true);
  const NodeId xn = t.leaf(x, true);
  t.backward(t.sum_all(t.mul(wn, xn)));
  CHECK(t.grad(wn).d == x.d);
  CHECK(t.grad(xn).d == w.d);
}

TEST_CASE("stop-gradient passes values forward and blocks gradients backward") {
  auto rng = make_rng(106, 0);
  const Tensor x = rand_tensor(2, 3, rng);

  Tape t;
  const NodeId xn = t.leaf(x, true);
  const NodeId blocked = t.stop_gradient(xn);
  CHECK(t.val(blocked).d == x.d);

  // Loss touching x only through the stop-gradient: the gradient is exactly
  // zero (never even allocated).
  t.backward(t.sum_all(t.square(blocked)));
  CHECK(t.grad(xn).empty());

  // Mixed loss: the direct branch contributes 2x, the blocked branch nothing.
  Tape t2;
  const NodeId x2 = t2.leaf(x, true);
  const NodeId loss = t2.add(t2.sum_all(t2.square(t2.stop_gradient(x2))),
                             t2.sum_all(t2.square(x2)));
  t2.backward(loss);
  for (size_t k = 0; k < x.size(); ++k)
    CHECK(t2.grad(x2).d[k] == 2.0 * x.d[k]);
}

TEST_CASE("mlp forward: degenerate nets and tape/plain agreement") {
  MlpSpec spec{.in = 5, .out = 3, .hidden = 8, .layers = 3, .act = Act::elu};
  auto rng = make_rng(107, 0);
  const Tensor x = rand_tensor(6, 5, rng);

  SECTION("zero weights and biased zero output") {
    MlpParams zero;
    for (int l = 0; l < spec.layers; ++l) {
      zero.w.emplace_back(spec.layer_in(l), spec.layer_out(l));
      zero.b.emplace_back(1, spec.layer_out(l));
    }
    const Tensor y = mlp_forward_plain(spec, zero, x);
    for (double v : y.d) CHECK(v == 0.0);
  }

  SECTION("single identity layer passes input through") {
    MlpSpec id{.in = 5, .out = 5, .hidden = 1, .layers = 1, .act = Act::elu};
    MlpParams p;
    p.w.emplace_back(5, 5);
    for (int i = 0; i < 5; ++i) p.w[0].at(i, i) = 1.0;
    p.b.emplace_back(1, 5);
    CHECK(mlp_forward_plain(id, p, x).d == x.d);
  }

  SECTION("tape forward equals plain forward") {
    const MlpParams p = init_mlp(spec, 42);
    const Tensor plain = mlp_forward_plain(spec, p, x);
    Tape t;
    std::vector<NodeId> w, b;
    for (int l = 0; l < spec.layers; ++l) {
      w.push_back(t.leaf(p.w[l], true));
      b.push_back(t.leaf(p.b[l], true));
    }
    const NodeId y = mlp_forward(t, spec, w, b, t.constant(x));
    CHECK(t.val(y).d == plain.d);
  }

  SECTION("full mlp gradient agrees with finite differences") {
    MlpSpec tiny{.in = 3, .out = 2, .hidden = 4, .layers = 2, .act = Act::gelu};
    const MlpParams p = init_mlp(tiny, 7);
    const Tensor xin = rand_tensor(3, 3, rng);
    check_grads({xin, p.w[0], p.b[0], p.w[1], p.b[1]},
                [tiny](Tape& t, const std::vector<NodeId>& in) {
                  return readout(t, mlp_forward(t, tiny, {in[1], in[3]},
                                                {in[2], in[4]}, in[0]));
                });
  }
}

TEST_CASE("batched forward rows equal single-row forwards") {
  MlpSpec spec{.in = 7, .out = 4, .hidden = 16, .layers = 3, .act = Act::elu};
  const MlpParams p = init_mlp(spec, 3);
  auto rng = make_rng(108, 0);
  const Tensor batch = rand_tensor(9, 7, rng);

  SECTION("bit-exact with row-independent kernels") {
    exact_kernels() = true;
    const Tensor full = mlp_forward_plain(spec, p, batch);
    for (int r = 0; r < batch.rows; ++r) {
      Tensor row(1, 7);
      for (int c = 0; c < 7; ++c) row.at(0, c) = batch.at(r, c);
      const Tensor out = mlp_forward_plain(spec, p, row);
      for (int c = 0; c < 4; ++c) CHECK(out.at(0, c) == full.at(r, c));
    }
    exact_kernels() = false;
  }

  SECTION("within 1e-12 on the fast kernels") {
    const Tensor full = mlp_forward_plain(spec, p, batch);
    for (int r = 0; r < batch.rows; ++r) {
      Tensor row(1, 7);
      for (int c = 0; c < 7; ++c) row.at(0, c) = batch.at(r, c);
      const Tensor out = mlp_forward_plain(spec, p, row);
      for (int c = 0; c < 4; ++c)
        CHECK_THAT(out.at(0, c), Catch::Matchers::WithinAbs(full.at(r, c), 1e-12));
    }
  }
}

TEST_CASE("adam updates follow the closed form") {
  Tensor p(1, 3);
  p.d = {1.0, -2.0, 0.5};
  const Tensor p0 = p;

  SECTION("zero gradient leaves parameters unchanged") {
    Adam opt;
    const Tensor g(1, 3);
    opt.step({&p}, {&g}, 1e-3);
    CHECK(p.d == p0.d);
  }

  SECTION("first step moves by -lr * sign(gradient)") {
    Adam opt;
    Tensor g(1, 3);
    g.d = {0.3, -1.7, 2.0};
    const double lr = 1e-3;
    opt.step({&p}, {&g}, lr);
    for (int i = 0; i < 3; ++i) {
      const double expect = p0.d[i] - lr * (g.d[i] > 0 ? 1.0 : -1.0);
      CHECK_THAT(p.d[i], Catch::Matchers::WithinAbs(expect, lr * 1e-4));
    }
  }
}

TEST_CASE("gradient norm and learning-rate schedule") {
  Tensor a(1, 1), b(1, 1);
  a.d = {3.0};
  b.d = {4.0};
  CHECK(global_grad_norm({&a, &b}) == 5.0);
  const Tensor z1(2, 3), z2(4, 1);
  CHECK(global_grad_norm({&z1, &z2}) == 0.0);

  CHECK(cosine_lr(1e-3, 1e-5, 0.0, 50.0) == 1e-3);
  CHECK_THAT(cosine_lr(1e-3, 1e-5, 50.0, 50.0), Catch::Matchers::WithinAbs(1e-5, 1e-12));
  CHECK_THAT(cosine_lr(1e-3, 1e-5, 25.0, 50.0),
             Catch::Matchers::WithinAbs((1e-3 + 1e-5) / 2, 1e-12));
  // Constant-schedule callers simply pass total = 0.
  CHECK(cosine_lr(1e-3, 1e-5, 10.0, 0.0) == 1e-3);
}
