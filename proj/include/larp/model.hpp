#pragma once

// The neural capsule-chain simulator. A model owns one dynamics MLP per body
// type (mapping the per-body feature row to one (v, w) prediction per link)
// plus a single pairwise contact MLP whose outputs are sum-pooled over all
// links of all other bodies into a 6-entry summary per receiving link. This
// header holds the parameter containers, initialization, batching helpers,
// and the plain (non-differentiable) double-precision inference path; the
// training path builds the identical computation on an autodiff tape in
// unroll.hpp, and the two are kept bit-for-bit in agreement by construction.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "larp/body.hpp"
#include "larp/features.hpp"
#include "larp/geom.hpp"
#include "larp/nn.hpp"
#include "larp/rng.hpp"
#include "larp/tensor.hpp"

namespace larp {

// How the contact summary p̂ enters the step. `feature` concatenates it into
// the dynamics-network input (the default); `impulse` instead adds it to the
// predicted velocities inside the integrator and zeroes the feature slots.
enum class ContactVariant { feature, impulse };

inline const char* contact_variant_name(ContactVariant v) {
  return v == ContactVariant::feature ? "feature" : "impulse";
}

inline ContactVariant contact_variant_from_name(const std::string& s) {
  if (s == "feature") return ContactVariant::feature;
  if (s == "impulse") return ContactVariant::impulse;
  throw std::invalid_argument("unknown contact variant: " + s);
}

struct ModelConfig {
  int dyn_layers = 12;     // affine layers in each dynamics network
  int contact_layers = 6;  // affine layers in the contact network
  int hidden = 256;
  Act act = Act::elu;
  ContactVariant variant = ContactVariant::feature;
  bool disp_feature = true;  // feed joint displacement to the dynamics net
  double dt = 0.01;          // integration step the model is bound to
};

// Networks and frozen normalization for one body type.
struct TypeParams {
  std::string name;
  int n_links = 0;
  MlpSpec spec;
  MlpParams mlp;
  NormStats in_stats;   // feature normalization (identity until frozen)
  NormStats out_stats;  // output de-normalization: out = sigma*y + mu
};

struct ModelParams {
  std::string layout = feature_layout_version;
  double dt = 0.01;
  ContactVariant variant = ContactVariant::feature;
  bool disp_feature = true;
  Act act = Act::elu;
  std::vector<TypeParams> types;
  MlpSpec contact_spec;
  MlpParams contact_mlp;
  NormStats contact_stats;  // pair-feature normalization (identity until frozen)

  int type_index(const std::string& name) const {
    for (size_t t = 0; t < types.size(); ++t)
      if (types[t].name == name) return static_cast<int>(t);
    return -1;
  }
  const TypeParams& type_for(const std::string& name) const {
    int t = type_index(name);
    if (t < 0) throw std::invalid_argument("model has no networks for body type: " + name);
    return types[static_cast<size_t>(t)];
  }
};

inline NormStats identity_stats(int dim) {
  NormStats st;
  st.mu.assign(static_cast<size_t>(dim), 0.0);
  st.sigma.assign(static_cast<size_t>(dim), 1.0);
  return st;
}

// Fresh model for a scene: one dynamics network per distinct body name (in
// first-appearance order), one shared contact network, identity stats.
inline ModelParams init_model(const SceneSpec<double>& scene, const ModelConfig& cfg,
                              uint64_t seed) {
  if (scene.empty()) throw std::invalid_argument("init_model: empty scene");
  ModelParams p;
  p.dt = cfg.dt;
  p.variant = cfg.variant;
  p.disp_feature = cfg.disp_feature;
  p.act = cfg.act;
  for (const BodySpec<double>& body : scene) {
    const int t = p.type_index(body.name);
    if (t >= 0) {
      if (p.types[static_cast<size_t>(t)].n_links != body.n_links())
        throw std::invalid_argument("init_model: body name reused with a different link count: " +
                                    body.name);
      continue;
    }
    TypeParams tp;
    tp.name = body.name;
    tp.n_links = body.n_links();
    tp.spec = MlpSpec{dyn_feature_dim(tp.n_links), vel_dim * tp.n_links, cfg.hidden,
                      cfg.dyn_layers, cfg.act};
    tp.mlp = init_mlp(tp.spec, derive_seed(seed, 1, p.types.size()));
    tp.in_stats = identity_stats(tp.spec.in);
    tp.out_stats = identity_stats(tp.spec.out);
    p.types.push_back(std::move(tp));
  }
  p.contact_spec = MlpSpec{pair_dim, phat_dim, cfg.hidden, cfg.contact_layers, cfg.act};
  p.contact_mlp = init_mlp(p.contact_spec, derive_seed(seed, 2));
  p.contact_stats = identity_stats(pair_dim);
  return p;
}

// Every trainable tensor in a fixed, documented order: for each body type in
// stored order, each layer's weight then bias; then the contact layers. The
// optimizer, checkpoint writer, and gradient flattening all share this order.
inline std::vector<std::pair<std::string, const Tensor*>> named_params(const ModelParams& p) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (const TypeParams& tp : p.types)
    for (size_t l = 0; l < tp.mlp.w.size(); ++l) {
      const std::string base = "dyn." + tp.name + ".l" + std::to_string(l);
      out.emplace_back(base + ".w", &tp.mlp.w[l]);
      out.emplace_back(base + ".b", &tp.mlp.b[l]);
    }
  for (size_t l = 0; l < p.contact_mlp.w.size(); ++l) {
    const std::string base = "contact.l" + std::to_string(l);
    out.emplace_back(base + ".w", &p.contact_mlp.w[l]);
    out.emplace_back(base + ".b", &p.contact_mlp.b[l]);
  }
  return out;
}

inline std::vector<std::pair<std::string, Tensor*>> named_params(ModelParams& p) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, t] : named_params(static_cast<const ModelParams&>(p)))
    out.emplace_back(name, const_cast<Tensor*>(t));
  return out;
}

inline std::vector<Tensor*> param_list(ModelParams& p) {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_params(p)) out.push_back(t);
  return out;
}

// ---------------------------------------------------------------------------
// Scene batching helpers
// ---------------------------------------------------------------------------

// One ordered (receiving link, other link) pair for the contact network.
struct ContactPair {
  int recv_body = 0, recv_link = 0, other_body = 0, other_link = 0;
};

// All ordered pairs, receiver-major: for each receiving link, the links of
// every other body are consecutive, so the per-link sum pools a contiguous
// block of network outputs. Empty when the scene has fewer than two bodies.
inline std::vector<ContactPair> contact_pairs(const SceneSpec<double>& scene) {
  std::vector<ContactPair> out;
  const int m_count = static_cast<int>(scene.size());
  for (int m = 0; m < m_count; ++m)
    for (int i = 0; i < scene[static_cast<size_t>(m)].n_links(); ++i)
      for (int b = 0; b < m_count; ++b) {
        if (b == m) continue;
        for (int j = 0; j < scene[static_cast<size_t>(b)].n_links(); ++j)
          out.push_back({m, i, b, j});
      }
  return out;
}

// Bodies of one scene grouped by type so each dynamics network runs once per
// step over a stacked row block. Row layout for a group with bodies
// [m_0, m_1, ...] over a batch of B scenes: row = instance * B + batch_slot.
struct TypeGroup {
  int type = 0;  // index into ModelParams::types
  int n_links = 0;
  std::vector<int> bodies;  // scene body indices, in scene order
};

inline std::vector<TypeGroup> group_scene(const SceneSpec<double>& scene,
                                          const ModelParams& p) {
  std::vector<TypeGroup> groups;
  for (size_t m = 0; m < scene.size(); ++m) {
    const int t = p.type_index(scene[m].name);
    if (t < 0)
      throw std::invalid_argument("model has no networks for body type: " + scene[m].name);
    if (p.types[static_cast<size_t>(t)].n_links != scene[m].n_links())
      throw std::invalid_argument("body link count disagrees with the model: " + scene[m].name);
    TypeGroup* g = nullptr;
    for (TypeGroup& cand : groups)
      if (cand.type == t) g = &cand;
    if (!g) {
      groups.push_back(TypeGroup{t, scene[m].n_links(), {}});
      g = &groups.back();
    }
    g->bodies.push_back(static_cast<int>(m));
  }
  return groups;
}

// All batch slots must share one topology (same body names and link counts
// in the same order); shapes, masses, and anchors may differ per slot.
inline void check_batch_topology(const std::vector<SceneSpec<double>>& specs,
                                 const std::vector<SceneState<double>>& states,
                                 const std::vector<SceneControl<double>>& controls) {
  if (specs.empty()) throw std::invalid_argument("empty batch");
  if (states.size() != specs.size() || controls.size() != specs.size())
    throw std::invalid_argument("batch size mismatch between specs, states, and controls");
  const SceneSpec<double>& ref = specs[0];
  for (size_t k = 0; k < specs.size(); ++k) {
    if (specs[k].size() != ref.size())
      throw std::invalid_argument("batch slots disagree on body count");
    for (size_t m = 0; m < ref.size(); ++m) {
      if (specs[k][m].name != ref[m].name || specs[k][m].n_links() != ref[m].n_links())
        throw std::invalid_argument("batch slots disagree on scene topology");
      if (static_cast<int>(states[k][m].size()) != ref[m].n_links() ||
          static_cast<int>(controls[k][m].size()) != ref[m].n_links())
        throw std::invalid_argument("state or control size disagrees with the scene spec");
    }
  }
}

// ---------------------------------------------------------------------------
// Contact summaries (plain path)
// ---------------------------------------------------------------------------

// phat[k][m] holds body m's per-link contact summary in batch slot k:
// n_links * 6 doubles in link order. All zeros when the scene has one body.
using ContactSummaries = std::vector<std::vector<std::vector<double>>>;

// Normalized contact-network input rows for every (pair, batch slot), pair
// major: row = pair_index * batch + slot.
inline Tensor contact_pair_rows(const std::vector<SceneSpec<double>>& specs,
                                const std::vector<SceneState<double>>& states,
                                const std::vector<ContactPair>& pairs,
                                const NormStats& stats) {
  const size_t batch = specs.size();
  Tensor in(static_cast<int>(pairs.size() * batch), pair_dim);
  for (size_t pi = 0; pi < pairs.size(); ++pi) {
    const ContactPair& pr = pairs[pi];
    for (size_t k = 0; k < batch; ++k) {
      const LinkSpec<double>& ospec =
          specs[k][static_cast<size_t>(pr.other_body)].links[static_cast<size_t>(pr.other_link)];
      const LinkSpec<double>& sspec =
          specs[k][static_cast<size_t>(pr.recv_body)].links[static_cast<size_t>(pr.recv_link)];
      const LinkState<double>& os =
          states[k][static_cast<size_t>(pr.other_body)][static_cast<size_t>(pr.other_link)];
      const LinkState<double>& ss =
          states[k][static_cast<size_t>(pr.recv_body)][static_cast<size_t>(pr.recv_link)];
      const ContactInfo<double> info =
          capsule_capsule_contact(os.x, os.q, ospec.shape, ss.x, ss.q, sspec.shape);
      const std::array<double, pair_dim> row =
          encode_contact_pair(contact_phi(ospec, os), contact_phi(sspec, ss), info);
      double* dst = &in.at(static_cast<int>(pi * batch + k), 0);
      for (int c = 0; c < pair_dim; ++c)
        dst[c] = (row[static_cast<size_t>(c)] - stats.mu[static_cast<size_t>(c)]) /
                 stats.sigma[static_cast<size_t>(c)];
    }
  }
  return in;
}

inline ContactSummaries contact_features_batch(const std::vector<SceneSpec<double>>& specs,
                                               const std::vector<SceneState<double>>& states,
                                               const ModelParams& p) {
  const size_t batch = specs.size();
  const SceneSpec<double>& scene = specs[0];
  ContactSummaries phat(batch);
  for (size_t k = 0; k < batch; ++k) {
    phat[k].resize(scene.size());
    for (size_t m = 0; m < scene.size(); ++m)
      phat[k][m].assign(static_cast<size_t>(scene[m].n_links()) * phat_dim, 0.0);
  }
  const std::vector<ContactPair> pairs = contact_pairs(scene);
  if (pairs.empty()) return phat;

  const int rows_per_pair = static_cast<int>(batch);
  const Tensor in = contact_pair_rows(specs, states, pairs, p.contact_stats);
  const Tensor out = mlp_forward_plain(p.contact_spec, p.contact_mlp, in);
  for (size_t pi = 0; pi < pairs.size(); ++pi) {
    const ContactPair& pr = pairs[pi];
    for (size_t k = 0; k < batch; ++k) {
      double* acc = phat[k][static_cast<size_t>(pr.recv_body)].data() +
                    static_cast<size_t>(pr.recv_link) * phat_dim;
      const int r = static_cast<int>(pi) * rows_per_pair + static_cast<int>(k);
      for (int c = 0; c < phat_dim; ++c) acc[c] += out.at(r, c);
    }
  }
  return phat;
}

// ---------------------------------------------------------------------------
// Stepping (plain path)
// ---------------------------------------------------------------------------

// Semi-implicit update of one link from predicted velocities. Shared scalar
// mirror of the batched tape version: identical operations in identical
// order, so the two paths agree bit for bit.
inline LinkState<double> integrate_link(const LinkState<double>& s, const Vec3<double>& v,
                                        const Vec3<double>& w, double dt) {
  LinkState<double> n;
  n.x = {s.x.x + v.x * dt, s.x.y + v.y * dt, s.x.z + v.z * dt};
  const Quat<double> dq = quat_mul(Quat<double>{0, w.x, w.y, w.z}, s.q);
  const double half_dt = 0.5 * dt;
  Quat<double> q{s.q.w + dq.w * half_dt, s.q.x + dq.x * half_dt, s.q.y + dq.y * half_dt,
                 s.q.z + dq.z * half_dt};
  double norm = std::sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z);
  norm = std::max(norm, 1e-12);
  n.q = {q.w / norm, q.x / norm, q.y / norm, q.z / norm};
  n.v = v;
  n.w = w;
  return n;
}

// One model step over a batch of scenes sharing a topology. Per body type the
// feature rows of every (instance, batch slot) are stacked and the dynamics
// network runs once; the contact network runs once over all pairs and slots.
inline std::vector<SceneState<double>> model_step_batch(
    const std::vector<SceneSpec<double>>& specs, const std::vector<SceneState<double>>& states,
    const std::vector<SceneControl<double>>& controls, const ModelParams& p) {
  check_batch_topology(specs, states, controls);
  const size_t batch = specs.size();
  const SceneSpec<double>& scene = specs[0];

  const ContactSummaries phat = contact_features_batch(specs, states, p);
  const bool feed_phat = p.variant == ContactVariant::feature;

  std::vector<SceneState<double>> next(batch);
  for (size_t k = 0; k < batch; ++k) {
    next[k].resize(scene.size());
    for (size_t m = 0; m < scene.size(); ++m)
      next[k][m].resize(static_cast<size_t>(scene[m].n_links()));
  }

  const std::vector<TypeGroup> groups = group_scene(scene, p);
  static const std::vector<double> no_phat;
  for (const TypeGroup& g : groups) {
    const TypeParams& tp = p.types[static_cast<size_t>(g.type)];
    const int rows = static_cast<int>(g.bodies.size() * batch);
    Tensor in(rows, tp.spec.in);
    for (size_t inst = 0; inst < g.bodies.size(); ++inst) {
      const size_t m = static_cast<size_t>(g.bodies[inst]);
      for (size_t k = 0; k < batch; ++k) {
        std::vector<double> row =
            encode_dynamics(specs[k][m], states[k][m], controls[k][m],
                            feed_phat ? phat[k][m] : no_phat, p.disp_feature);
        normalize_row(row, tp.in_stats);
        double* dst = &in.at(static_cast<int>(inst * batch + k), 0);
        for (int c = 0; c < tp.spec.in; ++c) dst[c] = row[static_cast<size_t>(c)];
      }
    }
    const Tensor out = mlp_forward_plain(tp.spec, tp.mlp, in);
    for (size_t inst = 0; inst < g.bodies.size(); ++inst) {
      const size_t m = static_cast<size_t>(g.bodies[inst]);
      for (size_t k = 0; k < batch; ++k) {
        const int r = static_cast<int>(inst * batch + k);
        for (int i = 0; i < g.n_links; ++i) {
          Vec3<double> v, w;
          const int base = i * vel_dim;
          v.x = out.at(r, base + 0) * tp.out_stats.sigma[static_cast<size_t>(base + 0)] +
                tp.out_stats.mu[static_cast<size_t>(base + 0)];
          v.y = out.at(r, base + 1) * tp.out_stats.sigma[static_cast<size_t>(base + 1)] +
                tp.out_stats.mu[static_cast<size_t>(base + 1)];
          v.z = out.at(r, base + 2) * tp.out_stats.sigma[static_cast<size_t>(base + 2)] +
                tp.out_stats.mu[static_cast<size_t>(base + 2)];
          w.x = out.at(r, base + 3) * tp.out_stats.sigma[static_cast<size_t>(base + 3)] +
                tp.out_stats.mu[static_cast<size_t>(base + 3)];
          w.y = out.at(r, base + 4) * tp.out_stats.sigma[static_cast<size_t>(base + 4)] +
                tp.out_stats.mu[static_cast<size_t>(base + 4)];
          w.z = out.at(r, base + 5) * tp.out_stats.sigma[static_cast<size_t>(base + 5)] +
                tp.out_stats.mu[static_cast<size_t>(base + 5)];
          if (p.variant == ContactVariant::impulse) {
            const double* ph = phat[k][m].data() + static_cast<size_t>(i) * phat_dim;
            v.x += ph[0];
            v.y += ph[1];
            v.z += ph[2];
            w.x += ph[3];
            w.y += ph[4];
            w.z += ph[5];
          }
          next[k][m][static_cast<size_t>(i)] =
              integrate_link(states[k][m][static_cast<size_t>(i)], v, w, p.dt);
        }
      }
    }
  }
  for (size_t k = 0; k < batch; ++k)
    if (!is_finite(next[k]))
      throw DivergedError("neural rollout diverged (non-finite state)");
  return next;
}

inline SceneState<double> model_step(const SceneSpec<double>& spec,
                                     const SceneState<double>& state,
                                     const SceneControl<double>& control,
                                     const ModelParams& p) {
  return model_step_batch({spec}, {state}, {control}, p)[0];
}

// T steps over a batch; controls[t][k] drives batch slot k at step t. Returns
// T+1 states per slot (the initial state first). A divergence is reported
// with the zero-based step at which it occurred.
inline std::vector<std::vector<SceneState<double>>> model_rollout_batch(
    const std::vector<SceneSpec<double>>& specs, const std::vector<SceneState<double>>& initial,
    const std::vector<std::vector<SceneControl<double>>>& controls, const ModelParams& p) {
  const size_t batch = specs.size();
  std::vector<std::vector<SceneState<double>>> out(batch);
  for (size_t k = 0; k < batch; ++k) out[k].push_back(initial[k]);
  std::vector<SceneState<double>> cur = initial;
  for (size_t t = 0; t < controls.size(); ++t) {
    if (controls[t].size() != batch)
      throw std::invalid_argument("controls batch size disagrees with the scene batch");
    try {
      cur = model_step_batch(specs, cur, controls[t], p);
    } catch (const DivergedError& e) {
      throw DivergedError("neural rollout diverged at step " + std::to_string(t),
                          static_cast<int>(t));
    }
    for (size_t k = 0; k < batch; ++k) out[k].push_back(cur[k]);
  }
  return out;
}

inline std::vector<SceneState<double>> model_rollout(
    const SceneSpec<double>& spec, const SceneState<double>& initial,
    const std::vector<SceneControl<double>>& controls, const ModelParams& p) {
  std::vector<std::vector<SceneControl<double>>> batched;
  batched.reserve(controls.size());
  for (const SceneControl<double>& c : controls) batched.push_back({c});
  return model_rollout_batch({spec}, {initial}, batched, p)[0];
}

}  // namespace larp
