#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>
#include "larp/checkpoint.hpp"
#include "larp/datagen.hpp"
#include "larp/model.hpp"
#include "larp/rng.hpp"
#include "larp/unroll.hpp"

using Catch::Approx;
using namespace larp;

namespace {

// Restores the kernel mode even when a CHECK throws.
struct ExactKernelGuard {
  bool saved = exact_kernels();
  explicit ExactKernelGuard(bool on) { exact_kernels() = on; }
  ~ExactKernelGuard() { exact_kernels() = saved; }
};

struct Batch {
  std::vector<SceneSpec<double>> specs;
  std::vector<SceneState<double>> states;
  std::vector<SceneControl<double>> controls;
};

// Jittered scenes of one scenario with randomized poses, velocities, and
// controls, so every feature slot carries signal.
Batch make_batch(const std::string& scenario, int n, uint64_t seed) {
  DatagenConfig cfg;
  auto rng = make_rng(seed, 77);
  const SceneSpec<double> base = scenario_scene<double>(scenario);
  Batch b;
  for (int k = 0; k < n; ++k) {
    SceneSpec<double> s = detail::jitter_scene(base, cfg.dim_jitter, rng);
    b.states.push_back(detail::random_initial_state(s, cfg, rng));
    b.controls.push_back(detail::random_controls(s, cfg, rng));
    b.specs.push_back(std::move(s));
  }
  return b;
}

std::vector<std::vector<SceneControl<double>>> repeat_controls(
    const std::vector<SceneControl<double>>& c, int steps) {
  return std::vector<std::vector<SceneControl<double>>>(static_cast<size_t>(steps), c);
}

// Non-trivial normalization statistics so the normalize/denormalize paths are
// actually exercised instead of collapsing to the identity.
void randomize_stats(ModelParams& p, uint64_t seed) {
  auto rng = make_rng(seed, 11);
  std::uniform_real_distribution<double> um(-0.5, 0.5), us(0.5, 2.0);
  auto fill = [&](NormStats& st) {
    for (double& m : st.mu) m = um(rng);
    for (double& s : st.sigma) s = us(rng);
  };
  for (TypeParams& tp : p.types) {
    fill(tp.in_stats);
    fill(tp.out_stats);
  }
  fill(p.contact_stats);
}

ModelParams small_model(const SceneSpec<double>& scene, ContactVariant variant,
                        uint64_t seed, int hidden = 16) {
  ModelConfig cfg;
  cfg.dyn_layers = 3;
  cfg.contact_layers = 2;
  cfg.hidden = hidden;
  cfg.variant = variant;
  ModelParams p = init_model(scene, cfg, seed);
  randomize_stats(p, seed + 1);
  return p;
}

void check_link_equal(const LinkState<double>& a, const LinkState<double>& b) {
  CHECK(a.x.x == b.x.x);
  CHECK(a.x.y == b.x.y);
  CHECK(a.x.z == b.x.z);
  CHECK(a.q.w == b.q.w);
  CHECK(a.q.x == b.q.x);
  CHECK(a.q.y == b.q.y);
  CHECK(a.q.z == b.q.z);
  CHECK(a.v.x == b.v.x);
  CHECK(a.v.y == b.v.y);
  CHECK(a.v.z == b.v.z);
  CHECK(a.w.x == b.w.x);
  CHECK(a.w.y == b.w.y);
  CHECK(a.w.z == b.w.z);
}

void check_state_equal(const SceneState<double>& a, const SceneState<double>& b) {
  REQUIRE(a.size() == b.size());
  for (size_t m = 0; m < a.size(); ++m) {
    REQUIRE(a[m].size() == b[m].size());
    for (size_t i = 0; i < a[m].size(); ++i) check_link_equal(a[m][i], b[m][i]);
  }
}

}  // namespace

TEST_CASE("batched stepping matches per-scene stepping exactly in deterministic mode") {
  ExactKernelGuard guard(true);
  const Batch b = make_batch("chain1v2", 3, 42);  // two body types in one scene
  const ModelParams p = small_model(b.specs[0], ContactVariant::feature, 5);

  const std::vector<SceneState<double>> batched =
      model_step_batch(b.specs, b.states, b.controls, p);
  for (size_t k = 0; k < b.specs.size(); ++k)
    check_state_equal(batched[k], model_step(b.specs[k], b.states[k], b.controls[k], p));

  const int steps = 3;
  auto rolled = model_rollout_batch(b.specs, b.states, repeat_controls(b.controls, steps), p);
  for (size_t k = 0; k < b.specs.size(); ++k) {
    const auto single = model_rollout(b.specs[k], b.states[k],
                                      std::vector<SceneControl<double>>(steps, b.controls[k]), p);
    REQUIRE(rolled[k].size() == single.size());
    for (size_t t = 0; t < single.size(); ++t) check_state_equal(rolled[k][t], single[t]);
  }
}

TEST_CASE("tape rollout values match the plain rollout bit for bit") {
  const int steps = 3;
  for (const std::string scenario : {"chain4", "chain2x2", "chain1v2"}) {
    for (const ContactVariant variant : {ContactVariant::feature, ContactVariant::impulse}) {
      for (const bool detach : {true, false}) {
        CAPTURE(scenario, contact_variant_name(variant), detach);
        const Batch b = make_batch(scenario, 2, 99);
        const ModelParams p = small_model(b.specs[0], variant, 7);
        const auto controls = repeat_controls(b.controls, steps);
        const auto plain = model_rollout_batch(b.specs, b.states, controls, p);

        Tape tape;
        const ParamNodes pn = stage_params(tape, p);
        const UnrollContext ctx = make_unroll_context(tape, b.specs, p);
        const TapeState s0 = stage_state(tape, ctx, b.states);
        const auto traj = tape_rollout(tape, ctx, pn, s0, controls, detach);
        REQUIRE(traj.size() == static_cast<size_t>(steps) + 1);
        for (size_t t = 0; t < traj.size(); ++t) {
          const auto got = tape_state_values(tape, ctx, traj[t]);
          for (size_t k = 0; k < b.specs.size(); ++k) check_state_equal(got[k], plain[k][t]);
        }
      }
    }
  }
}

TEST_CASE("detaching contact inputs stops state gradients but not weight gradients") {
  // Impulse variant with a zeroed dynamics network: predicted velocities are
  // exactly the pooled contact outputs, so a velocity loss reaches the start
  // state only through the contact geometry.
  Batch b = make_batch("chain2x2", 2, 1234);
  ModelParams p = small_model(b.specs[0], ContactVariant::impulse, 21);
  for (TypeParams& tp : p.types) {
    for (Tensor& w : tp.mlp.w) std::fill(w.d.begin(), w.d.end(), 0.0);
    for (Tensor& bias : tp.mlp.b) std::fill(bias.d.begin(), bias.d.end(), 0.0);
    for (double& m : tp.out_stats.mu) m = 0.0;
    for (double& s : tp.out_stats.sigma) s = 1.0;
  }
  const auto controls = repeat_controls(b.controls, 2);

  auto run = [&](bool detach, bool& state_grad_nonzero, bool& contact_grad_nonzero) {
    Tape tape;
    const ParamNodes pn = stage_params(tape, p);
    const UnrollContext ctx = make_unroll_context(tape, b.specs, p);
    const TapeState s0 = stage_state(tape, ctx, b.states, /*needs_grad=*/true);
    const auto traj = tape_rollout(tape, ctx, pn, s0, controls, detach);
    NodeId loss = -1;
    for (const GroupStateNodes& g : traj.back())
      for (const GroupLinkNodes& link : g) {
        const NodeId term = tape.add(tape.sum_all(link.v), tape.sum_all(link.w));
        loss = loss < 0 ? term : tape.add(loss, term);
      }
    tape.backward(loss);

    state_grad_nonzero = false;
    for (const GroupStateNodes& g : s0)
      for (const GroupLinkNodes& link : g)
        for (const NodeId id : {link.x, link.q, link.v, link.w})
          for (const double v : tape.grad_ref(id).d)
            if (v != 0.0) state_grad_nonzero = true;
    contact_grad_nonzero = false;
    for (const NodeId id : pn.contact_w)
      for (const double v : tape.grad_ref(id).d)
        if (v != 0.0) contact_grad_nonzero = true;
  };

  bool state_grad = true, contact_grad = false;
  run(true, state_grad, contact_grad);
  CHECK_FALSE(state_grad);  // detached: nothing flows into the start state
  CHECK(contact_grad);      // but the contact weights still learn

  run(false, state_grad, contact_grad);
  CHECK(state_grad);  // full chain: the same loss reaches the state
  CHECK(contact_grad);
}

TEST_CASE("finite differences confirm rollout gradients through the full chain") {
  const int steps = 3;
  Batch b = make_batch("chain2x2", 2, 314);
  ModelParams p = small_model(b.specs[0], ContactVariant::feature, 9, /*hidden=*/8);
  const auto controls = repeat_controls(b.controls, steps);

  // Loss: sum of every predicted position and orientation component over all
  // steps, cheap to recompute plainly for the difference quotients.
  auto plain_loss = [&]() {
    const auto traj = model_rollout_batch(b.specs, b.states, controls, p);
    double s = 0;
    for (const auto& scenes : traj)
      for (size_t t = 1; t < scenes.size(); ++t)
        for (const BodyState<double>& body : scenes[t])
          for (const LinkState<double>& l : body) {
            s += l.x.x + l.x.y + l.x.z;
            s += l.q.w + l.q.x + l.q.y + l.q.z;
          }
    return s;
  };

  Tape tape;
  const ParamNodes pn = stage_params(tape, p);
  const UnrollContext ctx = make_unroll_context(tape, b.specs, p);
  const TapeState s0 = stage_state(tape, ctx, b.states);
  const auto traj = tape_rollout(tape, ctx, pn, s0, controls, /*detach_contact=*/false);
  NodeId loss = -1;
  for (size_t t = 1; t < traj.size(); ++t)
    for (const GroupStateNodes& g : traj[t])
      for (const GroupLinkNodes& link : g) {
        const NodeId term = tape.add(tape.sum_all(link.x), tape.sum_all(link.q));
        loss = loss < 0 ? term : tape.add(loss, term);
      }
  tape.backward(loss);

  auto params = param_list(p);
  const auto names = named_params(p);
  REQUIRE(params.size() == pn.flat.size());

  auto rng = make_rng(2024, 3);
  const double h = 1e-6;
  int checked = 0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& tensor = *params[pi];
    const Tensor& grad = tape.grad_ref(pn.flat[pi]);
    // Two random entries per tensor keeps the FD sweep fast but broad.
    for (int rep = 0; rep < 2; ++rep) {
      const size_t idx = rng() % tensor.d.size();
      const double saved = tensor.d[idx];
      tensor.d[idx] = saved + h;
      const double up = plain_loss();
      tensor.d[idx] = saved - h;
      const double down = plain_loss();
      tensor.d[idx] = saved;
      const double fd = (up - down) / (2 * h);
      const double ad = grad.d[idx];
      CAPTURE(names[pi].first, idx, fd, ad);
      CHECK(std::abs(ad - fd) <= 1e-4 * std::max({std::abs(ad), std::abs(fd), 1e-3}));
      ++checked;
    }
  }
  CHECK(checked >= 20);
}

TEST_CASE("a zero final layer predicts the stored mean motion for one step") {
  const Batch b = make_batch("chain4", 1, 7);
  ModelParams p = small_model(b.specs[0], ContactVariant::feature, 3);
  TypeParams& tp = p.types[0];
  std::fill(tp.mlp.w.back().d.begin(), tp.mlp.w.back().d.end(), 0.0);
  std::fill(tp.mlp.b.back().d.begin(), tp.mlp.b.back().d.end(), 0.0);
  const Vec3<double> v0{0.05, -0.02, 0.01};
  const Vec3<double> w0{0.3, -0.1, 0.2};
  for (int i = 0; i < tp.n_links; ++i) {
    double* mu = tp.out_stats.mu.data() + static_cast<size_t>(i) * vel_dim;
    mu[0] = v0.x;
    mu[1] = v0.y;
    mu[2] = v0.z;
    mu[3] = w0.x;
    mu[4] = w0.y;
    mu[5] = w0.z;
  }

  const SceneState<double> next = model_step(b.specs[0], b.states[0], b.controls[0], p);
  for (size_t i = 0; i < next[0].size(); ++i) {
    const LinkState<double>& s = b.states[0][0][i];
    const LinkState<double>& n = next[0][i];
    CHECK(n.v.x == v0.x);
    CHECK(n.v.y == v0.y);
    CHECK(n.v.z == v0.z);
    CHECK(n.w.x == w0.x);
    CHECK(n.w.y == w0.y);
    CHECK(n.w.z == w0.z);
    CHECK(n.x.x == s.x.x + v0.x * p.dt);
    CHECK(n.x.y == s.x.y + v0.y * p.dt);
    CHECK(n.x.z == s.x.z + v0.z * p.dt);
  }
}

TEST_CASE("predicted quaternions come back unit length") {
  const Batch b = make_batch("chain2x2", 2, 55);
  const ModelParams p = small_model(b.specs[0], ContactVariant::feature, 13);
  const auto traj = model_rollout_batch(b.specs, b.states, repeat_controls(b.controls, 10), p);
  for (const auto& scenes : traj)
    for (const SceneState<double>& state : scenes)
      for (const BodyState<double>& body : state)
        for (const LinkState<double>& l : body) {
          const double norm =
              std::sqrt(l.q.w * l.q.w + l.q.x * l.q.x + l.q.y * l.q.y + l.q.z * l.q.z);
          CHECK(std::abs(norm - 1.0) < 1e-9);
        }
}

TEST_CASE("horizontal translation shifts the prediction and nothing else") {
  // The dynamics features are built from root-relative positions, the world
  // z height, and joint-frame quantities, none of which see a horizontal
  // shift. The contact descriptor does carry world positions, so the claim is
  // scoped to scenes where the contact summary cannot respond: a single body
  // (no partners) and a multi-body scene whose contact network is zeroed.
  std::string scenario = "chain4";
  bool zero_contact = false;
  SECTION("single body") {}
  SECTION("two bodies with a silent contact network") {
    scenario = "chain2x2";
    zero_contact = true;
  }

  const Batch b = make_batch(scenario, 1, 77);
  ModelParams p = small_model(b.specs[0], ContactVariant::feature, 17);
  if (zero_contact) {
    for (Tensor& w : p.contact_mlp.w) std::fill(w.d.begin(), w.d.end(), 0.0);
    for (Tensor& bias : p.contact_mlp.b) std::fill(bias.d.begin(), bias.d.end(), 0.0);
  }
  const Vec3<double> shift{5.25, -3.5, 0.0};

  SceneState<double> moved = b.states[0];
  for (BodyState<double>& body : moved)
    for (LinkState<double>& l : body) l.x += shift;

  const SceneState<double> base = model_step(b.specs[0], b.states[0], b.controls[0], p);
  const SceneState<double> pred = model_step(b.specs[0], moved, b.controls[0], p);
  for (size_t m = 0; m < base.size(); ++m)
    for (size_t i = 0; i < base[m].size(); ++i) {
      const LinkState<double>& a = base[m][i];
      const LinkState<double>& c = pred[m][i];
      CHECK(c.x.x - shift.x == Approx(a.x.x).margin(1e-9));
      CHECK(c.x.y - shift.y == Approx(a.x.y).margin(1e-9));
      CHECK(c.x.z == Approx(a.x.z).margin(1e-9));
      CHECK(c.q.w == Approx(a.q.w).margin(1e-9));
      CHECK(c.q.x == Approx(a.q.x).margin(1e-9));
      CHECK(c.q.y == Approx(a.q.y).margin(1e-9));
      CHECK(c.q.z == Approx(a.q.z).margin(1e-9));
      CHECK(c.v.x == Approx(a.v.x).margin(1e-9));
      CHECK(c.v.y == Approx(a.v.y).margin(1e-9));
      CHECK(c.v.z == Approx(a.v.z).margin(1e-9));
      CHECK(c.w.x == Approx(a.w.x).margin(1e-9));
      CHECK(c.w.y == Approx(a.w.y).margin(1e-9));
      CHECK(c.w.z == Approx(a.w.z).margin(1e-9));
    }
}

TEST_CASE("contact summaries: zero weights, single body, and body relabeling") {
  SECTION("zero contact weights produce exactly zero summaries") {
    const Batch b = make_batch("chain2x2", 2, 5);
    ModelParams p = small_model(b.specs[0], ContactVariant::feature, 23);
    for (Tensor& w : p.contact_mlp.w) std::fill(w.d.begin(), w.d.end(), 0.0);
    for (Tensor& bias : p.contact_mlp.b) std::fill(bias.d.begin(), bias.d.end(), 0.0);
    const ContactSummaries phat = contact_features_batch(b.specs, b.states, p);
    for (const auto& scene : phat)
      for (const auto& body : scene)
        for (const double v : body) CHECK(v == 0.0);
  }

  SECTION("a single body has no partners and zero summaries") {
    const Batch b = make_batch("chain4", 2, 6);
    const ModelParams p = small_model(b.specs[0], ContactVariant::feature, 29);
    const ContactSummaries phat = contact_features_batch(b.specs, b.states, p);
    for (const auto& scene : phat)
      for (const auto& body : scene)
        for (const double v : body) CHECK(v == 0.0);
  }

  SECTION("swapping the two bodies swaps the summaries bit for bit") {
    const Batch b = make_batch("chain2x2", 1, 8);
    const ModelParams p = small_model(b.specs[0], ContactVariant::feature, 31);
    const ContactSummaries orig = contact_features_batch(b.specs, b.states, p);

    std::vector<SceneSpec<double>> specs = {{b.specs[0][1], b.specs[0][0]}};
    std::vector<SceneState<double>> states = {{b.states[0][1], b.states[0][0]}};
    const ContactSummaries swapped = contact_features_batch(specs, states, p);
    CHECK(swapped[0][0] == orig[0][1]);
    CHECK(swapped[0][1] == orig[0][0]);
  }
}

TEST_CASE("checkpoints round-trip through disk at single precision") {
  const SceneSpec<double> scene = scenario_scene<double>("chain1v2");
  ModelParams p = small_model(scene, ContactVariant::impulse, 37);
  p.disp_feature = false;

  const std::filesystem::path dir =
      std::filesystem::temp_directory_path() / "larp-model-roundtrip";
  std::filesystem::remove_all(dir);
  write_model(dir.string(), p);
  const ModelParams r = read_model(dir.string());

  CHECK(r.dt == p.dt);
  CHECK(r.variant == p.variant);
  CHECK(r.disp_feature == p.disp_feature);
  CHECK(r.act == p.act);
  REQUIRE(r.types.size() == p.types.size());
  for (size_t ti = 0; ti < p.types.size(); ++ti) {
    CHECK(r.types[ti].name == p.types[ti].name);
    CHECK(r.types[ti].n_links == p.types[ti].n_links);
    CHECK(r.types[ti].in_stats.mu == p.types[ti].in_stats.mu);
    CHECK(r.types[ti].in_stats.sigma == p.types[ti].in_stats.sigma);
    CHECK(r.types[ti].out_stats.mu == p.types[ti].out_stats.mu);
    CHECK(r.types[ti].out_stats.sigma == p.types[ti].out_stats.sigma);
  }
  CHECK(r.contact_stats.mu == p.contact_stats.mu);
  CHECK(r.contact_stats.sigma == p.contact_stats.sigma);

  // Weights pass through a float32 blob: the read-back value must be the
  // original rounded to single precision, nothing sloppier.
  const auto orig = named_params(p);
  const auto back = named_params(r);
  REQUIRE(orig.size() == back.size());
  for (size_t i = 0; i < orig.size(); ++i) {
    CHECK(orig[i].first == back[i].first);
    REQUIRE(orig[i].second->d.size() == back[i].second->d.size());
    for (size_t k = 0; k < orig[i].second->d.size(); ++k)
      CHECK(back[i].second->d[k] ==
            static_cast<double>(static_cast<float>(orig[i].second->d[k])));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("damaged checkpoints are rejected with a clear error") {
  const SceneSpec<double> scene = scenario_scene<double>("chain2x2");
  const ModelParams p = small_model(scene, ContactVariant::feature, 41);
  const std::filesystem::path dir =
      std::filesystem::temp_directory_path() / "larp-model-damage";

  SECTION("missing directory") {
    std::filesystem::remove_all(dir);
    CHECK_THROWS_WITH(read_model(dir.string()),
                      Catch::Matchers::ContainsSubstring("missing model manifest"));
  }

  SECTION("missing weights blob") {
    std::filesystem::remove_all(dir);
    write_model(dir.string(), p);
    std::filesystem::remove(dir / "weights.f32");
    CHECK_THROWS_WITH(read_model(dir.string()),
                      Catch::Matchers::ContainsSubstring("missing model weights blob"));
    std::filesystem::remove_all(dir);
  }

  SECTION("truncated weights blob") {
    std::filesystem::remove_all(dir);
    write_model(dir.string(), p);
    const auto blob = dir / "weights.f32";
    std::filesystem::resize_file(blob, std::filesystem::file_size(blob) / 2);
    CHECK_THROWS_WITH(read_model(dir.string()),
                      Catch::Matchers::ContainsSubstring("truncated"));
    std::filesystem::remove_all(dir);
  }

  SECTION("non-positive dt") {
    std::filesystem::remove_all(dir);
    write_model(dir.string(), p);
    const auto manifest = dir / "model.txt";
    std::ifstream in(manifest);
    std::stringstream buf;
    buf << in.rdbuf();
    in.close();
    std::string text = buf.str();
    const size_t pos = text.find("\ndt = ");
    REQUIRE(pos != std::string::npos);
    const size_t end = text.find('\n', pos + 1);
    text.replace(pos, end - pos, "\ndt = -1");
    std::ofstream out(manifest, std::ios::trunc);
    out << text;
    out.close();
    CHECK_THROWS_WITH(read_model(dir.string()),
                      Catch::Matchers::ContainsSubstring("non-positive dt"));
    std::filesystem::remove_all(dir);
  }
}

TEST_CASE("rollouts report the step where they diverge") {
  Batch b = make_batch("chain4", 1, 91);
  const ModelParams p = small_model(b.specs[0], ContactVariant::feature, 43);

  SECTION("T = 0 returns only the initial state") {
    const auto traj = model_rollout(b.specs[0], b.states[0], {}, p);
    REQUIRE(traj.size() == 1);
    check_state_equal(traj[0], b.states[0]);
  }

  SECTION("a poisoned state is caught on the first step") {
    b.states[0][0][0].x.x = std::numeric_limits<double>::quiet_NaN();
    const auto controls = std::vector<SceneControl<double>>(5, b.controls[0]);
    try {
      model_rollout(b.specs[0], b.states[0], controls, p);
      FAIL("expected a divergence error");
    } catch (const DivergedError& e) {
      CHECK(e.step == 0);
      CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
  }
}

TEST_CASE("scene and batch validation errors") {
  const Batch b = make_batch("chain2x2", 2, 17);
  const ModelParams p = small_model(b.specs[0], ContactVariant::feature, 47);

  SECTION("a scene with unknown body types is rejected") {
    const ModelParams chain4_model =
        small_model(scenario_scene<double>("chain4"), ContactVariant::feature, 53);
    CHECK_THROWS_WITH(model_step(b.specs[0], b.states[0], b.controls[0], chain4_model),
                      Catch::Matchers::ContainsSubstring("no networks"));
  }

  SECTION("slots of one batch must share the scene topology") {
    auto specs = b.specs;
    specs[1].pop_back();
    auto states = b.states;
    states[1].pop_back();
    auto controls = b.controls;
    controls[1].pop_back();
    CHECK_THROWS_WITH(model_step_batch(specs, states, controls, p),
                      Catch::Matchers::ContainsSubstring("body count"));
  }

  SECTION("the differentiable path additionally pins the joint structure") {
    Tape tape;
    auto specs = b.specs;
    specs[1][0].links[1].parent = -1;
    CHECK_THROWS_WITH(make_unroll_context(tape, specs, p),
                      Catch::Matchers::ContainsSubstring("joint structure"));
  }
}
