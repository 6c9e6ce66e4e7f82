#pragma once

// Differentiable multi-step rollouts of the neural simulator.
//
// This header mirrors the plain batched step in model.hpp on the reverse-mode
// tape, operation for operation, so that a tape rollout and a plain rollout
// started from the same state produce bit-identical values while the tape
// additionally yields gradients with respect to the network parameters (and,
// optionally, the initial state). Keeping the two paths exactly equal is what
// lets the test suite validate the cheap plain path against the trainable one.
//
// Piecewise branches of the contact geometry (parallel axes, coincident
// cores) are decided off the tape from forward values and merged with masked
// blends; every division or square root whose unselected branch could be
// degenerate is guarded with a max() so the blend never mixes in a NaN. The
// guards are chosen so the selected branch is numerically unchanged.
//
// By default the inputs of the contact network are detached: each step feeds
// the contact network a constant copy of the current geometry, so gradients
// reach the contact weights but do not flow into earlier states through the
// contact geometry. Passing detach_contact = false keeps the full chain
// differentiable.

#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "larp/autodiff.hpp"
#include "larp/body.hpp"
#include "larp/features.hpp"
#include "larp/model.hpp"
#include "larp/nn.hpp"
#include "larp/tensor.hpp"

namespace larp {

// ---------------------------------------------------------------------------
// Parameter staging
// ---------------------------------------------------------------------------

// Gradient-enabled leaves for every network tensor, shared by all steps of a
// rollout. `flat` lists the leaves in the same order as named_params(), so
// optimizer state lines up with param_list().
struct ParamNodes {
  std::vector<std::vector<NodeId>> dyn_w, dyn_b;  // [type][layer]
  std::vector<NodeId> contact_w, contact_b;       // [layer]
  std::vector<NodeId> flat;
};

inline ParamNodes stage_params(Tape& t, const ModelParams& p) {
  ParamNodes n;
  n.dyn_w.resize(p.types.size());
  n.dyn_b.resize(p.types.size());
  for (size_t ti = 0; ti < p.types.size(); ++ti) {
    const TypeParams& tp = p.types[ti];
    for (size_t l = 0; l < tp.mlp.w.size(); ++l) {
      n.dyn_w[ti].push_back(t.leaf(tp.mlp.w[l], true));
      n.dyn_b[ti].push_back(t.leaf(tp.mlp.b[l], true));
      n.flat.push_back(n.dyn_w[ti].back());
      n.flat.push_back(n.dyn_b[ti].back());
    }
  }
  for (size_t l = 0; l < p.contact_mlp.w.size(); ++l) {
    n.contact_w.push_back(t.leaf(p.contact_mlp.w[l], true));
    n.contact_b.push_back(t.leaf(p.contact_mlp.b[l], true));
    n.flat.push_back(n.contact_w.back());
    n.flat.push_back(n.contact_b.back());
  }
  return n;
}

// Gradient tensors of the staged parameters, in named_params() order.
// Parameters the loss never touched come back as zero tensors.
inline std::vector<const Tensor*> param_grads(Tape& t, const ParamNodes& pn) {
  std::vector<const Tensor*> out;
  out.reserve(pn.flat.size());
  for (NodeId id : pn.flat) out.push_back(&t.grad_ref(id));
  return out;
}

// ---------------------------------------------------------------------------
// Rollout context: constants staged once per tape
// ---------------------------------------------------------------------------

// Per-link constants of one type group. Rows follow the group convention
// row = instance * batch + slot used everywhere in model.hpp.
struct LinkCtx {
  int parent = -1;
  NodeId len = -1, rad = -1;                     // [R,1]
  NodeId anchor_parent = -1, anchor_child = -1;  // [R,3], staged when parent >= 0
};

struct GroupCtx {
  int type = 0;
  int n_links = 0;
  std::vector<int> bodies;  // scene body indices, in scene order
  int rows = 0;             // bodies.size() * batch
  std::vector<LinkCtx> links;
  NodeId in_mu = -1, in_sigma = -1;    // [1, n_links * dyn_link_dim]
  NodeId out_mu = -1, out_sigma = -1;  // [1, n_links * vel_dim]
  NodeId zero1 = -1, zero3 = -1, zero4 = -1, zero6 = -1;  // [R, *]
};

struct BodySlot {
  int group = 0, inst = 0;
};

// Shape constants of the stacked contact pairs, all with one row per
// (pair, slot): row = pair_index * batch + slot. The `_a` side is the other
// link of the ordered pair, `_b` the receiving link, matching the argument
// order of capsule_capsule_contact in the plain path.
struct PairCtx {
  NodeId h_a = -1, h_b = -1;          // core half-lengths
  NodeId neg_h_a = -1, neg_h_b = -1;  // their negations, for clamps
  NodeId r_a = -1, r_b = -1;          // radii
  NodeId r_ab = -1;                   // radius sum
  NodeId len_a = -1, rad_a = -1, mass_a = -1;  // raw descriptor constants
  NodeId len_b = -1, rad_b = -1, mass_b = -1;
};

struct UnrollContext {
  const ModelParams* params = nullptr;
  std::vector<SceneSpec<double>> specs;  // one spec per batch slot
  int batch = 0;
  std::vector<GroupCtx> groups;
  std::vector<BodySlot> slot;  // per scene body index
  std::vector<ContactPair> pairs;
  // Half-open range of pair indices received by [body][link]; pairs are laid
  // out receiver-major, so each range is contiguous.
  std::vector<std::vector<std::pair<int, int>>> recv_range;
  int pair_rows = 0;  // pairs.size() * batch
  PairCtx pc;         // staged only when pairs exist
  NodeId c_mu = -1, c_sigma = -1;  // [1, pair_dim]
  NodeId z_axis = -1;              // [pair_rows, 3] rows of (0, 0, 1)
  NodeId ones = -1;                // [pair_rows, 1]
  NodeId eps_denom = -1;           // [1,1] parallel-axes threshold
  NodeId eps_dist = -1;            // [1,1] coincident-cores threshold
  NodeId eps_d2 = -1;              // [1,1] floor under the distance sqrt
};

namespace detail {

inline NodeId stage_row(Tape& t, const std::vector<double>& v) {
  Tensor x(1, static_cast<int>(v.size()));
  for (size_t c = 0; c < v.size(); ++c) x.at(0, static_cast<int>(c)) = v[c];
  return t.constant(std::move(x));
}

}  // namespace detail

inline UnrollContext make_unroll_context(Tape& t, std::vector<SceneSpec<double>> specs,
                                         const ModelParams& p) {
  if (specs.empty()) throw std::invalid_argument("empty batch");
  const SceneSpec<double>& ref = specs[0];
  for (const SceneSpec<double>& s : specs) {
    if (s.size() != ref.size())
      throw std::invalid_argument("batch slots disagree on body count");
    for (size_t m = 0; m < ref.size(); ++m) {
      if (s[m].name != ref[m].name || s[m].n_links() != ref[m].n_links())
        throw std::invalid_argument("batch slots disagree on scene topology");
      for (int i = 0; i < ref[m].n_links(); ++i)
        if (s[m].links[static_cast<size_t>(i)].parent !=
            ref[m].links[static_cast<size_t>(i)].parent)
          throw std::invalid_argument("batch slots disagree on joint structure");
    }
  }

  UnrollContext ctx;
  ctx.params = &p;
  ctx.batch = static_cast<int>(specs.size());
  ctx.specs = std::move(specs);
  const int B = ctx.batch;
  const SceneSpec<double>& scene = ctx.specs[0];

  const std::vector<TypeGroup> groups = group_scene(scene, p);
  ctx.slot.resize(scene.size());
  ctx.groups.reserve(groups.size());
  for (size_t gi = 0; gi < groups.size(); ++gi) {
    const TypeGroup& g = groups[gi];
    GroupCtx gc;
    gc.type = g.type;
    gc.n_links = g.n_links;
    gc.bodies = g.bodies;
    gc.rows = static_cast<int>(g.bodies.size()) * B;
    for (size_t inst = 0; inst < g.bodies.size(); ++inst)
      ctx.slot[static_cast<size_t>(g.bodies[inst])] =
          BodySlot{static_cast<int>(gi), static_cast<int>(inst)};

    const TypeParams& tp = p.types[static_cast<size_t>(g.type)];
    gc.in_mu = detail::stage_row(t, tp.in_stats.mu);
    gc.in_sigma = detail::stage_row(t, tp.in_stats.sigma);
    gc.out_mu = detail::stage_row(t, tp.out_stats.mu);
    gc.out_sigma = detail::stage_row(t, tp.out_stats.sigma);
    gc.zero1 = t.constant(Tensor(gc.rows, 1));
    gc.zero3 = t.constant(Tensor(gc.rows, 3));
    gc.zero4 = t.constant(Tensor(gc.rows, 4));
    gc.zero6 = t.constant(Tensor(gc.rows, phat_dim));

    gc.links.resize(static_cast<size_t>(g.n_links));
    for (int i = 0; i < g.n_links; ++i) {
      LinkCtx& lc = gc.links[static_cast<size_t>(i)];
      lc.parent = scene[static_cast<size_t>(g.bodies[0])].links[static_cast<size_t>(i)].parent;
      Tensor len(gc.rows, 1), rad(gc.rows, 1);
      Tensor ap(gc.rows, 3), ac(gc.rows, 3);
      for (size_t inst = 0; inst < g.bodies.size(); ++inst) {
        const size_t m = static_cast<size_t>(g.bodies[inst]);
        for (int k = 0; k < B; ++k) {
          const LinkSpec<double>& ls =
              ctx.specs[static_cast<size_t>(k)][m].links[static_cast<size_t>(i)];
          const int r = static_cast<int>(inst) * B + k;
          len.at(r, 0) = ls.shape.length;
          rad.at(r, 0) = ls.shape.radius;
          ap.at(r, 0) = ls.anchor_parent.x;
          ap.at(r, 1) = ls.anchor_parent.y;
          ap.at(r, 2) = ls.anchor_parent.z;
          ac.at(r, 0) = ls.anchor_child.x;
          ac.at(r, 1) = ls.anchor_child.y;
          ac.at(r, 2) = ls.anchor_child.z;
        }
      }
      lc.len = t.constant(std::move(len));
      lc.rad = t.constant(std::move(rad));
      if (lc.parent >= 0) {
        lc.anchor_parent = t.constant(std::move(ap));
        lc.anchor_child = t.constant(std::move(ac));
      }
    }
    ctx.groups.push_back(std::move(gc));
  }

  ctx.pairs = contact_pairs(scene);
  ctx.recv_range.resize(scene.size());
  for (size_t m = 0; m < scene.size(); ++m)
    ctx.recv_range[m].assign(static_cast<size_t>(scene[m].n_links()), {0, 0});
  for (size_t pi = 0; pi < ctx.pairs.size(); ++pi) {
    const ContactPair& pr = ctx.pairs[pi];
    auto& rr = ctx.recv_range[static_cast<size_t>(pr.recv_body)]
                             [static_cast<size_t>(pr.recv_link)];
    if (rr.second == 0) rr.first = static_cast<int>(pi);
    rr.second = static_cast<int>(pi) + 1;
  }

  if (!ctx.pairs.empty()) {
    ctx.pair_rows = static_cast<int>(ctx.pairs.size()) * B;
    ctx.c_mu = detail::stage_row(t, p.contact_stats.mu);
    ctx.c_sigma = detail::stage_row(t, p.contact_stats.sigma);

    Tensor z(ctx.pair_rows, 3), one(ctx.pair_rows, 1);
    Tensor ha(ctx.pair_rows, 1), hb(ctx.pair_rows, 1);
    Tensor ra(ctx.pair_rows, 1), rb(ctx.pair_rows, 1), rab(ctx.pair_rows, 1);
    Tensor la(ctx.pair_rows, 1), da(ctx.pair_rows, 1), ma(ctx.pair_rows, 1);
    Tensor lb(ctx.pair_rows, 1), db(ctx.pair_rows, 1), mb(ctx.pair_rows, 1);
    for (size_t pi = 0; pi < ctx.pairs.size(); ++pi) {
      const ContactPair& pr = ctx.pairs[pi];
      for (int k = 0; k < B; ++k) {
        const SceneSpec<double>& sp = ctx.specs[static_cast<size_t>(k)];
        const LinkSpec<double>& a =
            sp[static_cast<size_t>(pr.other_body)].links[static_cast<size_t>(pr.other_link)];
        const LinkSpec<double>& b =
            sp[static_cast<size_t>(pr.recv_body)].links[static_cast<size_t>(pr.recv_link)];
        const int r = static_cast<int>(pi) * B + k;
        z.at(r, 2) = 1.0;
        one.at(r, 0) = 1.0;
        ha.at(r, 0) = a.shape.length / 2.0;
        hb.at(r, 0) = b.shape.length / 2.0;
        ra.at(r, 0) = a.shape.radius;
        rb.at(r, 0) = b.shape.radius;
        rab.at(r, 0) = a.shape.radius + b.shape.radius;
        la.at(r, 0) = a.shape.length;
        da.at(r, 0) = a.shape.radius;
        ma.at(r, 0) = a.mass;
        lb.at(r, 0) = b.shape.length;
        db.at(r, 0) = b.shape.radius;
        mb.at(r, 0) = b.mass;
      }
    }
    ctx.z_axis = t.constant(std::move(z));
    ctx.ones = t.constant(std::move(one));
    ctx.pc.h_a = t.constant(std::move(ha));
    ctx.pc.h_b = t.constant(std::move(hb));
    ctx.pc.neg_h_a = t.scale(ctx.pc.h_a, -1.0);
    ctx.pc.neg_h_b = t.scale(ctx.pc.h_b, -1.0);
    ctx.pc.r_a = t.constant(std::move(ra));
    ctx.pc.r_b = t.constant(std::move(rb));
    ctx.pc.r_ab = t.constant(std::move(rab));
    ctx.pc.len_a = t.constant(std::move(la));
    ctx.pc.rad_a = t.constant(std::move(da));
    ctx.pc.mass_a = t.constant(std::move(ma));
    ctx.pc.len_b = t.constant(std::move(lb));
    ctx.pc.rad_b = t.constant(std::move(db));
    ctx.pc.mass_b = t.constant(std::move(mb));
    ctx.eps_denom = t.scalar(1e-12);
    ctx.eps_dist = t.scalar(1e-9);
    ctx.eps_d2 = t.scalar(1e-300);
  }
  return ctx;
}

// ---------------------------------------------------------------------------
// State staging
// ---------------------------------------------------------------------------

// One link of one type group on the tape; each tensor has the group's rows.
struct GroupLinkNodes {
  NodeId x = -1;  // [R,3]
  NodeId q = -1;  // [R,4] scalar-first
  NodeId v = -1;  // [R,3]
  NodeId w = -1;  // [R,3]
};

using GroupStateNodes = std::vector<GroupLinkNodes>;  // per link
using TapeState = std::vector<GroupStateNodes>;       // per group

// Load a batch of scene states onto the tape. With needs_grad = true the
// state leaves accumulate gradients, which lets tests measure how much of the
// loss flows back into the starting state.
inline TapeState stage_state(Tape& t, const UnrollContext& ctx,
                             const std::vector<SceneState<double>>& states,
                             bool needs_grad = false) {
  if (static_cast<int>(states.size()) != ctx.batch)
    throw std::invalid_argument("state batch size disagrees with the context");
  TapeState out(ctx.groups.size());
  for (size_t gi = 0; gi < ctx.groups.size(); ++gi) {
    const GroupCtx& g = ctx.groups[gi];
    out[gi].resize(static_cast<size_t>(g.n_links));
    for (int i = 0; i < g.n_links; ++i) {
      Tensor X(g.rows, 3), Q(g.rows, 4), V(g.rows, 3), W(g.rows, 3);
      for (size_t inst = 0; inst < g.bodies.size(); ++inst) {
        const size_t m = static_cast<size_t>(g.bodies[inst]);
        for (int k = 0; k < ctx.batch; ++k) {
          const LinkState<double>& s = states[static_cast<size_t>(k)][m][static_cast<size_t>(i)];
          const int r = static_cast<int>(inst) * ctx.batch + k;
          X.at(r, 0) = s.x.x;
          X.at(r, 1) = s.x.y;
          X.at(r, 2) = s.x.z;
          Q.at(r, 0) = s.q.w;
          Q.at(r, 1) = s.q.x;
          Q.at(r, 2) = s.q.y;
          Q.at(r, 3) = s.q.z;
          V.at(r, 0) = s.v.x;
          V.at(r, 1) = s.v.y;
          V.at(r, 2) = s.v.z;
          W.at(r, 0) = s.w.x;
          W.at(r, 1) = s.w.y;
          W.at(r, 2) = s.w.z;
        }
      }
      out[gi][static_cast<size_t>(i)] =
          GroupLinkNodes{t.leaf(std::move(X), needs_grad), t.leaf(std::move(Q), needs_grad),
                         t.leaf(std::move(V), needs_grad), t.leaf(std::move(W), needs_grad)};
    }
  }
  return out;
}

// Read a tape state back into plain scene states.
inline std::vector<SceneState<double>> tape_state_values(const Tape& t, const UnrollContext& ctx,
                                                         const TapeState& state) {
  std::vector<SceneState<double>> out(static_cast<size_t>(ctx.batch));
  const SceneSpec<double>& scene = ctx.specs[0];
  for (size_t k = 0; k < out.size(); ++k) {
    out[k].resize(scene.size());
    for (size_t m = 0; m < scene.size(); ++m)
      out[k][m].resize(static_cast<size_t>(scene[m].n_links()));
  }
  for (size_t gi = 0; gi < ctx.groups.size(); ++gi) {
    const GroupCtx& g = ctx.groups[gi];
    for (int i = 0; i < g.n_links; ++i) {
      const GroupLinkNodes& n = state[gi][static_cast<size_t>(i)];
      const Tensor& X = t.val(n.x);
      const Tensor& Q = t.val(n.q);
      const Tensor& V = t.val(n.v);
      const Tensor& W = t.val(n.w);
      for (size_t inst = 0; inst < g.bodies.size(); ++inst) {
        const size_t m = static_cast<size_t>(g.bodies[inst]);
        for (int k = 0; k < ctx.batch; ++k) {
          const int r = static_cast<int>(inst) * ctx.batch + k;
          LinkState<double>& s = out[static_cast<size_t>(k)][m][static_cast<size_t>(i)];
          s.x = {X.at(r, 0), X.at(r, 1), X.at(r, 2)};
          s.q = {Q.at(r, 0), Q.at(r, 1), Q.at(r, 2), Q.at(r, 3)};
          s.v = {V.at(r, 0), V.at(r, 1), V.at(r, 2)};
          s.w = {W.at(r, 0), W.at(r, 1), W.at(r, 2)};
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row-wise geometry helpers
// ---------------------------------------------------------------------------

// Row-wise mirror of rotate(q, v): t = u x v + v * q.w, out = v + 2 (u x t).
inline NodeId tape_rotate(Tape& t, NodeId q, NodeId v) {
  const NodeId w = t.slice_cols(q, 0, 1);
  const NodeId u = t.slice_cols(q, 1, 4);
  const NodeId tv = t.add(t.cross_rows(u, v), t.mul(v, w));
  return t.add(v, t.scale(t.cross_rows(u, tv), 2.0));
}

inline NodeId tape_rotate_inverse(Tape& t, NodeId q, NodeId v) {
  const NodeId conj =
      t.concat_cols({t.slice_cols(q, 0, 1), t.scale(t.slice_cols(q, 1, 4), -1.0)});
  return tape_rotate(t, conj, v);
}

// Joint defect vector of a non-root link, matching joint_displacement().
inline NodeId tape_joint_displacement(Tape& t, const UnrollContext& ctx, const TapeState& state,
                                      int group, int link) {
  const GroupCtx& g = ctx.groups[static_cast<size_t>(group)];
  const LinkCtx& lc = g.links[static_cast<size_t>(link)];
  if (lc.parent < 0)
    throw std::invalid_argument("tape_joint_displacement: link has no parent joint");
  const GroupStateNodes& S = state[static_cast<size_t>(group)];
  const GroupLinkNodes& par = S[static_cast<size_t>(lc.parent)];
  const GroupLinkNodes& cur = S[static_cast<size_t>(link)];
  return t.sub(t.add(par.x, tape_rotate(t, par.q, lc.anchor_parent)),
               t.add(cur.x, tape_rotate(t, cur.q, lc.anchor_child)));
}

// ---------------------------------------------------------------------------
// Contact rows on the tape
// ---------------------------------------------------------------------------

// Normalized contact-network inputs, one row per (pair, slot), computed on
// the tape so gradients flow through the collision geometry. Matches
// contact_pair_rows() bit for bit on the forward values.
inline NodeId tape_contact_rows(Tape& t, const UnrollContext& ctx, const TapeState& state) {
  const int B = ctx.batch;
  std::vector<NodeId> gx_a, gq_a, gv_a, gw_a, gx_b, gq_b, gv_b, gw_b;
  for (const ContactPair& pr : ctx.pairs) {
    const BodySlot sa = ctx.slot[static_cast<size_t>(pr.other_body)];
    const BodySlot sb = ctx.slot[static_cast<size_t>(pr.recv_body)];
    const GroupLinkNodes& a =
        state[static_cast<size_t>(sa.group)][static_cast<size_t>(pr.other_link)];
    const GroupLinkNodes& b =
        state[static_cast<size_t>(sb.group)][static_cast<size_t>(pr.recv_link)];
    gx_a.push_back(t.slice_rows(a.x, sa.inst * B, (sa.inst + 1) * B));
    gq_a.push_back(t.slice_rows(a.q, sa.inst * B, (sa.inst + 1) * B));
    gv_a.push_back(t.slice_rows(a.v, sa.inst * B, (sa.inst + 1) * B));
    gw_a.push_back(t.slice_rows(a.w, sa.inst * B, (sa.inst + 1) * B));
    gx_b.push_back(t.slice_rows(b.x, sb.inst * B, (sb.inst + 1) * B));
    gq_b.push_back(t.slice_rows(b.q, sb.inst * B, (sb.inst + 1) * B));
    gv_b.push_back(t.slice_rows(b.v, sb.inst * B, (sb.inst + 1) * B));
    gw_b.push_back(t.slice_rows(b.w, sb.inst * B, (sb.inst + 1) * B));
  }
  const NodeId x_a = t.concat_rows(std::span<const NodeId>(gx_a));
  const NodeId q_a = t.concat_rows(std::span<const NodeId>(gq_a));
  const NodeId v_a = t.concat_rows(std::span<const NodeId>(gv_a));
  const NodeId w_a = t.concat_rows(std::span<const NodeId>(gw_a));
  const NodeId x_b = t.concat_rows(std::span<const NodeId>(gx_b));
  const NodeId q_b = t.concat_rows(std::span<const NodeId>(gq_b));
  const NodeId v_b = t.concat_rows(std::span<const NodeId>(gv_b));
  const NodeId w_b = t.concat_rows(std::span<const NodeId>(gw_b));

  const PairCtx& pc = ctx.pc;
  auto clamp = [&](NodeId x, NodeId lo, NodeId hi) { return t.min(t.max(x, lo), hi); };

  // Closest points of the two capsule cores, mirroring
  // closest_segment_segment(): the parallel/overlap branches are chosen off
  // the tape and blended.
  const NodeId axis_a = tape_rotate(t, q_a, ctx.z_axis);
  const NodeId axis_b = tape_rotate(t, q_b, ctx.z_axis);
  const NodeId r = t.sub(x_a, x_b);
  const NodeId b = t.row_dot(axis_a, axis_b);
  const NodeId c = t.row_dot(axis_a, r);
  const NodeId f = t.row_dot(axis_b, r);
  const NodeId denom = t.sub(ctx.ones, t.mul(b, b));
  const NodeId s_free =
      clamp(t.div(t.sub(t.mul(b, f), c), t.max(denom, ctx.eps_denom)), pc.neg_h_a, pc.h_a);
  const NodeId proj = t.scale(c, -1.0);
  const NodeId reach = t.mul(t.abs(b), pc.h_b);
  const NodeId lo = t.max(pc.neg_h_a, t.sub(proj, reach));
  const NodeId hi = t.min(pc.h_a, t.add(proj, reach));
  const NodeId s_mid = t.scale(t.add(lo, hi), 0.5);
  const NodeId s_proj = clamp(proj, pc.neg_h_a, pc.h_a);

  const Tensor& denom_v = t.val(denom);
  const Tensor& lo_v = t.val(lo);
  const Tensor& hi_v = t.val(hi);
  Tensor skew_mask(ctx.pair_rows, 1), overlap_mask(ctx.pair_rows, 1);
  for (int row = 0; row < ctx.pair_rows; ++row) {
    skew_mask.at(row, 0) = denom_v.at(row, 0) > 1e-12 ? 1.0 : 0.0;
    overlap_mask.at(row, 0) = lo_v.at(row, 0) <= hi_v.at(row, 0) ? 1.0 : 0.0;
  }
  const NodeId s0 = t.blend_rows(skew_mask, s_free, t.blend_rows(overlap_mask, s_mid, s_proj));
  const NodeId tt = clamp(t.add(t.mul(b, s0), f), pc.neg_h_b, pc.h_b);
  const NodeId ss = clamp(t.sub(t.mul(b, tt), c), pc.neg_h_a, pc.h_a);
  const NodeId p_a = t.add(x_a, t.mul(axis_a, ss));
  const NodeId p_b = t.add(x_b, t.mul(axis_b, tt));
  const NodeId diff = t.sub(p_a, p_b);
  const NodeId dist = t.sqrt(t.max(t.row_dot(diff, diff), ctx.eps_d2));

  // Contact frame: normal from the receiver toward the other link, world up
  // when the cores coincide.
  const NodeId n_free = t.div(diff, t.max(dist, ctx.eps_dist));
  const Tensor& dist_v = t.val(dist);
  Tensor apart_mask(ctx.pair_rows, 1);
  for (int row = 0; row < ctx.pair_rows; ++row)
    apart_mask.at(row, 0) = dist_v.at(row, 0) > 1e-9 ? 1.0 : 0.0;
  const NodeId n = t.blend_rows(apart_mask, n_free, ctx.z_axis);
  const NodeId pen = t.sub(pc.r_ab, dist);
  const NodeId p_fl = tape_rotate_inverse(t, q_a, t.sub(t.sub(p_a, t.mul(n, pc.r_a)), x_a));
  const NodeId p_sl = tape_rotate_inverse(t, q_b, t.sub(t.add(p_b, t.mul(n, pc.r_b)), x_b));

  const NodeId phi_o =
      t.concat_cols({x_a, q_a, v_a, w_a, pc.len_a, pc.rad_a, pc.mass_a});
  const NodeId phi_s =
      t.concat_cols({x_b, q_b, v_b, w_b, pc.len_b, pc.rad_b, pc.mass_b});
  const NodeId raw = t.concat_cols({phi_o, phi_s, p_fl, p_sl, n, pen});
  return t.div(t.sub(raw, ctx.c_mu), ctx.c_sigma);
}

// ---------------------------------------------------------------------------
// One step and full rollouts
// ---------------------------------------------------------------------------

inline TapeState tape_step(Tape& t, const UnrollContext& ctx, const ParamNodes& pn,
                           const TapeState& state,
                           const std::vector<SceneControl<double>>& controls,
                           bool detach_contact = true) {
  const ModelParams& p = *ctx.params;
  const int B = ctx.batch;
  if (static_cast<int>(controls.size()) != B)
    throw std::invalid_argument("controls batch size disagrees with the context");

  // Contact summaries pooled per receiving link: [B, phat_dim] per (body, link).
  std::vector<std::vector<NodeId>> pooled;
  if (!ctx.pairs.empty()) {
    const NodeId rows =
        detach_contact
            ? t.constant(contact_pair_rows(ctx.specs, tape_state_values(t, ctx, state),
                                           ctx.pairs, p.contact_stats))
            : tape_contact_rows(t, ctx, state);
    const NodeId fc = mlp_forward(t, p.contact_spec, pn.contact_w, pn.contact_b, rows);
    pooled.resize(ctx.recv_range.size());
    for (size_t m = 0; m < ctx.recv_range.size(); ++m) {
      pooled[m].assign(ctx.recv_range[m].size(), -1);
      for (size_t i = 0; i < ctx.recv_range[m].size(); ++i) {
        const auto [plo, phi] = ctx.recv_range[m][i];
        NodeId acc = t.slice_rows(fc, plo * B, (plo + 1) * B);
        for (int pi = plo + 1; pi < phi; ++pi)
          acc = t.add(acc, t.slice_rows(fc, pi * B, (pi + 1) * B));
        pooled[m][i] = acc;
      }
    }
  }

  const bool feed_phat = p.variant == ContactVariant::feature;
  TapeState next(ctx.groups.size());
  for (size_t gi = 0; gi < ctx.groups.size(); ++gi) {
    const GroupCtx& g = ctx.groups[gi];
    const TypeParams& tp = p.types[static_cast<size_t>(g.type)];
    const GroupStateNodes& S = state[gi];

    // Contact summaries stacked to group rows, one node per link.
    std::vector<NodeId> ph(static_cast<size_t>(g.n_links), g.zero6);
    if (!ctx.pairs.empty())
      for (int i = 0; i < g.n_links; ++i) {
        std::vector<NodeId> parts;
        parts.reserve(g.bodies.size());
        for (int mb : g.bodies)
          parts.push_back(pooled[static_cast<size_t>(mb)][static_cast<size_t>(i)]);
        ph[static_cast<size_t>(i)] =
            parts.size() == 1 ? parts[0] : t.concat_rows(std::span<const NodeId>(parts));
      }

    // Control constants.
    std::vector<NodeId> qt(static_cast<size_t>(g.n_links), g.zero4);
    std::vector<NodeId> tau(static_cast<size_t>(g.n_links), -1);
    for (int i = 0; i < g.n_links; ++i) {
      Tensor QT(g.rows, 4), TAU(g.rows, 3);
      for (size_t inst = 0; inst < g.bodies.size(); ++inst) {
        const size_t m = static_cast<size_t>(g.bodies[inst]);
        for (int k = 0; k < B; ++k) {
          const LinkControl<double>& c =
              controls[static_cast<size_t>(k)][m][static_cast<size_t>(i)];
          const int r = static_cast<int>(inst) * B + k;
          QT.at(r, 0) = c.q_target.w;
          QT.at(r, 1) = c.q_target.x;
          QT.at(r, 2) = c.q_target.y;
          QT.at(r, 3) = c.q_target.z;
          TAU.at(r, 0) = c.torque.x;
          TAU.at(r, 1) = c.torque.y;
          TAU.at(r, 2) = c.torque.z;
        }
      }
      if (g.links[static_cast<size_t>(i)].parent >= 0)
        qt[static_cast<size_t>(i)] = t.constant(std::move(QT));
      tau[static_cast<size_t>(i)] = t.constant(std::move(TAU));
    }

    // Feature rows, per-link blocks in the layout of encode_dynamics().
    std::vector<NodeId> blocks;
    blocks.reserve(static_cast<size_t>(g.n_links) * 11);
    for (int i = 0; i < g.n_links; ++i) {
      const LinkCtx& lc = g.links[static_cast<size_t>(i)];
      const GroupLinkNodes& cur = S[static_cast<size_t>(i)];
      blocks.push_back(t.sub(cur.x, S[0].x));
      blocks.push_back(t.slice_cols(cur.x, 2, 3));
      blocks.push_back(t.quat_to_mat_rows(cur.q));
      blocks.push_back(cur.v);
      blocks.push_back(cur.w);
      blocks.push_back(lc.len);
      blocks.push_back(lc.rad);
      blocks.push_back(p.disp_feature && lc.parent >= 0
                           ? tape_joint_displacement(t, ctx, state, static_cast<int>(gi), i)
                           : g.zero3);
      blocks.push_back(qt[static_cast<size_t>(i)]);
      blocks.push_back(tau[static_cast<size_t>(i)]);
      blocks.push_back(feed_phat ? ph[static_cast<size_t>(i)] : g.zero6);
    }
    const NodeId feat = t.concat_cols(std::span<const NodeId>(blocks));
    const NodeId normed = t.div(t.sub(feat, g.in_mu), g.in_sigma);
    const NodeId y = mlp_forward(t, tp.spec, pn.dyn_w[static_cast<size_t>(g.type)],
                                 pn.dyn_b[static_cast<size_t>(g.type)], normed);
    const NodeId den = t.add(t.mul(y, g.out_sigma), g.out_mu);

    next[gi].resize(static_cast<size_t>(g.n_links));
    for (int i = 0; i < g.n_links; ++i) {
      const GroupLinkNodes& cur = S[static_cast<size_t>(i)];
      NodeId v = t.slice_cols(den, i * vel_dim, i * vel_dim + 3);
      NodeId w = t.slice_cols(den, i * vel_dim + 3, i * vel_dim + 6);
      if (p.variant == ContactVariant::impulse) {
        v = t.add(v, t.slice_cols(ph[static_cast<size_t>(i)], 0, 3));
        w = t.add(w, t.slice_cols(ph[static_cast<size_t>(i)], 3, 6));
      }
      const NodeId nx = t.add(cur.x, t.scale(v, p.dt));
      const NodeId pure = t.concat_cols({g.zero1, w});
      const NodeId dq = t.quat_mul_rows(pure, cur.q);
      const NodeId qr = t.add(cur.q, t.scale(dq, 0.5 * p.dt));
      const NodeId nq = t.normalize_rows(qr, 1e-12);
      next[gi][static_cast<size_t>(i)] = GroupLinkNodes{nx, nq, v, w};
    }
  }
  return next;
}

// Unrolled rollout: returns T+1 tape states, the staged initial state first.
// controls[t][k] drives batch slot k at step t.
inline std::vector<TapeState> tape_rollout(
    Tape& t, const UnrollContext& ctx, const ParamNodes& pn, const TapeState& initial,
    const std::vector<std::vector<SceneControl<double>>>& controls, bool detach_contact = true) {
  std::vector<TapeState> out;
  out.reserve(controls.size() + 1);
  out.push_back(initial);
  for (const std::vector<SceneControl<double>>& c : controls)
    out.push_back(tape_step(t, ctx, pn, out.back(), c, detach_contact));
  return out;
}

}  // namespace larp
