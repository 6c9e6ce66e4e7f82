#pragma once

// Reference rigid-body simulator for articulated capsule chains.
//
// Maximal coordinates, semi-implicit Euler, and an iterated sequential-impulse
// solver: spherical joints are solved as exact 3x3 point constraints, contacts
// (capsule-capsule and capsule-ground) as unilateral normal impulses with
// Coulomb friction. Position drift is removed by projection after integration
// rather than by velocity bias, so the solver never pumps energy into the
// system. This simulator is the ground-truth data source the neural simulator
// is trained against.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "larp/body.hpp"
#include "larp/geom.hpp"
#include "larp/rng.hpp"

namespace larp {

struct SimConfig {
  double dt = 0.01;
  Vec3<double> gravity{0, 0, -9.81};
  bool ground = true;            // ground plane at z = 0
  int solver_iters = 20;
  // All position stabilization happens in post-integration projection passes
  // (velocity constraints carry no bias term, so they never do work against
  // position error). Joints are projected fully, contacts by
  // `contact_correction` per pass outside a `contact_slop` dead zone. Only
  // pairs that were touching before the velocity solve are corrected: a fresh
  // overlap created during the step still carries approach speed, and lifting
  // it before that speed is absorbed would add energy.
  int position_iters = 4;
  double contact_correction = 0.2;
  double contact_slop = 1e-3;    // penetration tolerated before correction [m]
  double friction = 0.8;
  double restitution = 0.0;
  double restitution_threshold = 1.0;  // impact speed below which e = 0 [m/s]
  double kp = 50.0;              // PD servo gains for the joint targets
  double kd = 1.0;
};

// ---------------------------------------------------------------------------
// PD joint servo
// ---------------------------------------------------------------------------

// World-frame torque the servo of joint `i` (non-root) exerts on the child
// link; the parent receives the opposite torque. The error is formed in the
// parent frame: with q_rel = q_p^-1 q_c the remaining rotation to the target
// is q_rel^-1 q_target, and the damping term uses the parent-frame relative
// angular velocity.
template <class T>
inline Vec3<T> pd_joint_torque(const BodySpec<T>& spec, const BodyState<T>& state, int i,
                               const Quat<T>& q_target, T kp, T kd) {
  const LinkState<T>& c = state[i];
  const LinkState<T>& p = state[spec.links[i].parent];
  const Quat<T> q_rel = quat_mul(p.q.conjugate(), c.q);
  const Vec3<T> err = axis_angle(quat_mul(q_rel.conjugate(), q_target));
  const Vec3<T> w_rel = rotate_inverse(p.q, c.w - p.w);
  const Vec3<T> tau_local = err * kp - w_rel * kd;
  return rotate(p.q, tau_local);
}

// ---------------------------------------------------------------------------
// Solver internals
// ---------------------------------------------------------------------------

namespace detail {

inline Mat3<double> skew(const Vec3<double>& v) {
  return Mat3<double>{{0, -v.z, v.y, v.z, 0, -v.x, -v.y, v.x, 0}};
}

inline Mat3<double> mat3_inverse(const Mat3<double>& a) {
  const double* m = a.m;
  Vec3<double> r0{m[4] * m[8] - m[5] * m[7], m[2] * m[7] - m[1] * m[8],
                  m[1] * m[5] - m[2] * m[4]};
  double det = m[0] * r0.x + m[3] * r0.y + m[6] * r0.z;
  double inv = 1.0 / det;
  Mat3<double> out;
  out.m[0] = r0.x * inv;
  out.m[1] = r0.y * inv;
  out.m[2] = r0.z * inv;
  out.m[3] = (m[5] * m[6] - m[3] * m[8]) * inv;
  out.m[4] = (m[0] * m[8] - m[2] * m[6]) * inv;
  out.m[5] = (m[2] * m[3] - m[0] * m[5]) * inv;
  out.m[6] = (m[3] * m[7] - m[4] * m[6]) * inv;
  out.m[7] = (m[1] * m[6] - m[0] * m[7]) * inv;
  out.m[8] = (m[0] * m[4] - m[1] * m[3]) * inv;
  return out;
}

// Mutable per-link view used by the impulse solver.
struct SolverBody {
  Vec3<double> x, v, w;
  Quat<double> q;
  double inv_mass = 0;
  Mat3<double> inv_inertia;  // world frame

  Vec3<double> point_velocity(const Vec3<double>& r) const { return v + w.cross(r); }
  void apply_impulse(const Vec3<double>& p, const Vec3<double>& r) {
    v += p * inv_mass;
    w += inv_inertia * r.cross(p);
  }
};

// Effective-mass matrix of a point-to-point constraint between two bodies
// (b may be null for static geometry such as the ground).
inline Mat3<double> effective_mass(const SolverBody& a, const Vec3<double>& ra,
                                   const SolverBody* b, const Vec3<double>& rb) {
  Mat3<double> k = Mat3<double>::diagonal({a.inv_mass, a.inv_mass, a.inv_mass});
  Mat3<double> sa = skew(ra);
  Mat3<double> ka = sa * a.inv_inertia * sa;
  for (int i = 0; i < 9; ++i) k.m[i] -= ka.m[i];
  if (b) {
    Mat3<double> sb = skew(rb);
    Mat3<double> kb = sb * b->inv_inertia * sb;
    for (int i = 0; i < 9; ++i) {
      k.m[i] -= kb.m[i];
    }
    k.m[0] += b->inv_mass;
    k.m[4] += b->inv_mass;
    k.m[8] += b->inv_mass;
  }
  return k;
}

struct JointConstraint {
  int parent, child;          // flat link indices
  Vec3<double> r_p, r_c;      // world arms from each center of mass
  Mat3<double> k_inv;
};

struct ContactConstraint {
  int a, b;                   // flat link indices; b = -1 means ground
  Vec3<double> r_a, r_b;      // arms to the shared contact point
  Vec3<double> n, t1, t2;     // normal (toward a) and tangent basis
  double mass_n, mass_t1, mass_t2;  // scalar effective masses
  double bias = 0;            // restitution target for the separating speed
  double lambda_n = 0, lambda_t1 = 0, lambda_t2 = 0;
};

// Deterministic orthonormal basis completion around a unit normal.
inline void tangent_basis(const Vec3<double>& n, Vec3<double>& t1, Vec3<double>& t2) {
  Vec3<double> ref = std::abs(n.z) < 0.9 ? Vec3<double>{0, 0, 1} : Vec3<double>{1, 0, 0};
  t1 = n.cross(ref).normalized();
  t2 = n.cross(t1);
}

inline Mat3<double> world_inv_inertia(const LinkSpec<double>& ls, const Quat<double>& q) {
  Vec3<double> inertia = capsule_inertia(ls.mass, ls.shape);
  Mat3<double> r = quat_to_mat(q);
  Mat3<double> inv_local =
      Mat3<double>::diagonal({1.0 / inertia.x, 1.0 / inertia.y, 1.0 / inertia.z});
  return r * inv_local * r.transposed();
}

// Rotate q by a small world-frame rotation vector (first-order update,
// renormalized).
inline void apply_small_rotation(Quat<double>& q, const Vec3<double>& rotvec) {
  Quat<double> dq = quat_mul(Quat<double>{0, rotvec.x, rotvec.y, rotvec.z}, q);
  q = Quat<double>{q.w + dq.w / 2, q.x + dq.x / 2, q.y + dq.y / 2, q.z + dq.z / 2}
          .normalized();
}

struct Pose {
  Vec3<double> x;
  Quat<double> q;
};

struct ContactCandidate {
  int a = -1;
  int b = -1;       // flat link indices; b = -1 means the ground plane
  int feature = 0;  // ground contacts: which core endpoint (+1/-1)
  ContactInfo<double> info;

  std::array<int, 3> key() const { return {a, b, feature}; }
};

// Penetrating contacts for the given flat link poses: every link against the
// ground (both core endpoints are tested, so a horizontal capsule rests on two
// points instead of rocking on one) plus every link pair that is not directly
// joined -- adjacent links overlap at their shared joint by construction.
inline std::vector<ContactCandidate> collect_contacts(const SceneSpec<double>& scene,
                                                      const std::vector<int>& first_of_body,
                                                      const std::vector<Pose>& poses,
                                                      bool ground) {
  std::vector<ContactCandidate> out;
  auto add = [&](int ia, int ib, const ContactInfo<double>& ci) {
    if (ci.penetration > 0) out.push_back({ia, ib, 0, ci});
  };
  if (ground) {
    int flat = 0;
    for (const BodySpec<double>& body : scene)
      for (const LinkSpec<double>& ls : body.links) {
        const Pose& p = poses[flat];
        const Vec3<double> axis = capsule_axis(p.q);
        for (int sign : {1, -1}) {
          Vec3<double> e = p.x + axis * (sign * ls.shape.length / 2);
          double pen = ls.shape.radius - e.z;
          if (pen <= 0) continue;
          ContactInfo<double> ci;
          ci.normal = Vec3<double>{0, 0, 1};
          ci.penetration = pen;
          ci.p_first_world = e - Vec3<double>{0, 0, ls.shape.radius};
          ci.p_second_world = Vec3<double>{e.x, e.y, 0};
          out.push_back({flat, -1, sign, ci});
        }
        ++flat;
      }
  }
  for (size_t b = 0; b < scene.size(); ++b) {
    const int base = first_of_body[b];
    const int n = scene[b].n_links();
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        if (scene[b].links[j].parent == i || scene[b].links[i].parent == j) continue;
        add(base + i, base + j,
            capsule_capsule_contact(poses[base + i].x, poses[base + i].q,
                                    scene[b].links[i].shape, poses[base + j].x,
                                    poses[base + j].q, scene[b].links[j].shape));
      }
    for (size_t b2 = b + 1; b2 < scene.size(); ++b2) {
      const int base2 = first_of_body[b2];
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < scene[b2].n_links(); ++j)
          add(base + i, base2 + j,
              capsule_capsule_contact(poses[base + i].x, poses[base + i].q,
                                      scene[b].links[i].shape, poses[base2 + j].x,
                                      poses[base2 + j].q, scene[b2].links[j].shape));
    }
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// One simulation step
// ---------------------------------------------------------------------------

// Advance the scene by one step of cfg.dt. Controls supply, per link, a PD
// target orientation (ignored on roots) and an external world torque.
inline SceneState<double> ref_step(const SceneSpec<double>& scene,
                                   const SceneState<double>& state,
                                   const SceneControl<double>& control,
                                   const SimConfig& cfg) {
  using detail::ContactConstraint;
  using detail::JointConstraint;
  using detail::SolverBody;

  if (!is_finite(state)) throw DivergedError("non-finite state passed to ref_step");
  if (scene.size() != state.size() || scene.size() != control.size())
    throw std::invalid_argument("scene/state/control body counts disagree");

  // Flatten links into solver bodies.
  std::vector<SolverBody> bodies;
  std::vector<const LinkSpec<double>*> specs;
  std::vector<int> first_of_body(scene.size());
  std::vector<std::pair<size_t, size_t>> link_index;  // flat -> (body, link)
  for (size_t b = 0; b < scene.size(); ++b) {
    first_of_body[b] = static_cast<int>(bodies.size());
    if (scene[b].links.size() != state[b].size() ||
        scene[b].links.size() != control[b].size())
      throw std::invalid_argument("scene/state/control link counts disagree");
    for (size_t i = 0; i < scene[b].links.size(); ++i) {
      const LinkSpec<double>& ls = scene[b].links[i];
      const LinkState<double>& s = state[b][i];
      SolverBody sb;
      sb.x = s.x;
      sb.q = s.q;
      sb.v = s.v;
      sb.w = s.w;
      sb.inv_mass = 1.0 / ls.mass;
      sb.inv_inertia = detail::world_inv_inertia(ls, s.q);
      bodies.push_back(sb);
      specs.push_back(&ls);
      link_index.emplace_back(b, i);
    }
  }

  const double dt = cfg.dt;

  // External and servo forces (explicit part of the semi-implicit step).
  for (size_t b = 0; b < scene.size(); ++b) {
    for (size_t i = 0; i < scene[b].links.size(); ++i) {
      SolverBody& sb = bodies[first_of_body[b] + i];
      sb.v += cfg.gravity * dt;
      sb.w += sb.inv_inertia * control[b][i].torque * dt;
    }
    for (size_t i = 1; i < scene[b].links.size(); ++i) {
      const int parent = scene[b].links[i].parent;
      if (parent < 0) continue;
      SolverBody& bc = bodies[first_of_body[b] + i];
      SolverBody& bp = bodies[first_of_body[b] + parent];
      // The damping half of the servo is applied implicitly: the torque is
      // turned into an angular impulse filtered through (E + dt kd K)^-1 with
      // K the joint's angular effective mass. Explicit damping would be
      // unstable around the capsule's low-inertia spin axis at useful gains.
      Vec3<double> tau = pd_joint_torque(scene[b], state[b], static_cast<int>(i),
                                         control[b][i].q_target, cfg.kp, cfg.kd);
      Mat3<double> a = Mat3<double>::zero();
      for (int k = 0; k < 9; ++k)
        a.m[k] = (cfg.kd * dt) * (bc.inv_inertia.m[k] + bp.inv_inertia.m[k]);
      a.m[0] += 1;
      a.m[4] += 1;
      a.m[8] += 1;
      Vec3<double> impulse = detail::mat3_inverse(a) * (tau * dt);
      bc.w += bc.inv_inertia * impulse;
      bp.w -= bp.inv_inertia * impulse;
    }
  }

  // Joint constraints.
  std::vector<JointConstraint> joints;
  for (size_t b = 0; b < scene.size(); ++b) {
    for (size_t i = 1; i < scene[b].links.size(); ++i) {
      const LinkSpec<double>& ls = scene[b].links[i];
      if (ls.parent < 0) continue;
      JointConstraint jc;
      jc.parent = first_of_body[b] + ls.parent;
      jc.child = first_of_body[b] + static_cast<int>(i);
      const SolverBody& bp = bodies[jc.parent];
      const SolverBody& bc = bodies[jc.child];
      jc.r_p = rotate(bp.q, ls.anchor_parent);
      jc.r_c = rotate(bc.q, ls.anchor_child);
      jc.k_inv = detail::mat3_inverse(
          detail::effective_mass(bodies[jc.parent], jc.r_p, &bodies[jc.child], jc.r_c));
      joints.push_back(jc);
    }
  }

  // Contact constraints from start-of-step poses. The velocity solve only
  // stops approach (plus restitution above the threshold); penetration itself
  // is handled positionally after integration.
  std::vector<detail::Pose> poses(bodies.size());
  for (size_t f = 0; f < bodies.size(); ++f) poses[f] = {bodies[f].x, bodies[f].q};
  std::vector<ContactConstraint> contacts;
  std::vector<std::array<int, 3>> touching;  // pairs eligible for projection
  for (const detail::ContactCandidate& cand :
       detail::collect_contacts(scene, first_of_body, poses, cfg.ground)) {
    touching.push_back(cand.key());
    ContactConstraint cc;
    cc.a = cand.a;
    cc.b = cand.b;
    Vec3<double> point = (cand.info.p_first_world + cand.info.p_second_world) * 0.5;
    cc.r_a = point - bodies[cc.a].x;
    cc.r_b = cc.b >= 0 ? point - bodies[cc.b].x : Vec3<double>{};
    cc.n = cand.info.normal;
    detail::tangent_basis(cc.n, cc.t1, cc.t2);
    const SolverBody* pb = cc.b >= 0 ? &bodies[cc.b] : nullptr;
    Mat3<double> k = detail::effective_mass(bodies[cc.a], cc.r_a, pb, cc.r_b);
    cc.mass_n = 1.0 / cc.n.dot(k * cc.n);
    cc.mass_t1 = 1.0 / cc.t1.dot(k * cc.t1);
    cc.mass_t2 = 1.0 / cc.t2.dot(k * cc.t2);
    if (cfg.restitution > 0) {
      Vec3<double> u = bodies[cc.a].point_velocity(cc.r_a) -
                       (pb ? pb->point_velocity(cc.r_b) : Vec3<double>{});
      double approach = -u.dot(cc.n);
      if (approach > cfg.restitution_threshold) cc.bias = cfg.restitution * approach;
    }
    contacts.push_back(cc);
  }

  // Sequential impulses.
  for (int it = 0; it < cfg.solver_iters; ++it) {
    for (JointConstraint& jc : joints) {
      SolverBody& bp = bodies[jc.parent];
      SolverBody& bc = bodies[jc.child];
      Vec3<double> u = bp.point_velocity(jc.r_p) - bc.point_velocity(jc.r_c);
      Vec3<double> lambda = jc.k_inv * (u * -1.0);
      bp.apply_impulse(lambda, jc.r_p);
      bc.apply_impulse(-lambda, jc.r_c);
    }
    for (ContactConstraint& cc : contacts) {
      SolverBody& ba = bodies[cc.a];
      SolverBody* bb = cc.b >= 0 ? &bodies[cc.b] : nullptr;
      auto rel_velocity = [&]() {
        return ba.point_velocity(cc.r_a) - (bb ? bb->point_velocity(cc.r_b) : Vec3<double>{});
      };
      // Normal: drive separating speed to the bias, impulse stays repulsive.
      {
        double u_n = rel_velocity().dot(cc.n);
        double dl = (cc.bias - u_n) * cc.mass_n;
        double new_l = std::max(0.0, cc.lambda_n + dl);
        dl = new_l - cc.lambda_n;
        cc.lambda_n = new_l;
        ba.apply_impulse(cc.n * dl, cc.r_a);
        if (bb) bb->apply_impulse(cc.n * -dl, cc.r_b);
      }
      // Friction: drive tangential speed to zero inside the Coulomb box.
      const double max_t = cfg.friction * cc.lambda_n;
      for (auto [t, lambda_t, mass_t] :
           {std::tie(cc.t1, cc.lambda_t1, cc.mass_t1), std::tie(cc.t2, cc.lambda_t2, cc.mass_t2)}) {
        double u_t = rel_velocity().dot(t);
        double dl = -u_t * mass_t;
        double new_l = std::clamp(lambda_t + dl, -max_t, max_t);
        dl = new_l - lambda_t;
        lambda_t = new_l;
        ba.apply_impulse(t * dl, cc.r_a);
        if (bb) bb->apply_impulse(t * -dl, cc.r_b);
      }
    }
  }

  // Integrate.
  SceneState<double> next(state.size());
  for (size_t b = 0; b < scene.size(); ++b) {
    next[b].resize(state[b].size());
    for (size_t i = 0; i < state[b].size(); ++i) {
      const SolverBody& sb = bodies[first_of_body[b] + i];
      LinkState<double>& out = next[b][i];
      out.v = sb.v;
      out.w = sb.w;
      out.x = sb.x + sb.v * dt;
      Quat<double> dq = quat_derivative(sb.q, sb.w);
      out.q = Quat<double>{sb.q.w + dq.w * dt, sb.q.x + dq.x * dt, sb.q.y + dq.y * dt,
                           sb.q.z + dq.z * dt}
                  .normalized();
    }
  }

  // Position projection (nonlinear Gauss-Seidel on the integrated state).
  // Velocity-level stabilization alone lets joints stretch visibly under
  // impact impulses and, worse, does work against position error; removing the
  // residual defect from the positions directly keeps joints closed to well
  // under a millimeter without injecting kinetic energy. Contacts are
  // re-detected each pass and corrected one-sided by `contact_correction`
  // outside the `contact_slop` dead zone (only pairs already touching before
  // the velocity solve -- see SimConfig); joints run after contacts in each
  // pass, plus two joint-only sweeps so the step ends with closed joints.
  auto project_contacts = [&]() {
    for (size_t f = 0; f < link_index.size(); ++f) {
      const LinkState<double>& s = next[link_index[f].first][link_index[f].second];
      poses[f] = {s.x, s.q};
    }
    for (const detail::ContactCandidate& cand :
         detail::collect_contacts(scene, first_of_body, poses, cfg.ground)) {
      const double depth = cand.info.penetration - cfg.contact_slop;
      if (depth <= 0) continue;
      if (std::find(touching.begin(), touching.end(), cand.key()) == touching.end())
        continue;
      LinkState<double>& la = next[link_index[cand.a].first][link_index[cand.a].second];
      SolverBody sa;
      sa.inv_mass = 1.0 / specs[cand.a]->mass;
      sa.inv_inertia = detail::world_inv_inertia(*specs[cand.a], la.q);
      const Vec3<double> point =
          (cand.info.p_first_world + cand.info.p_second_world) * 0.5;
      const Vec3<double> n = cand.info.normal;
      const Vec3<double> r_a = point - la.x;
      LinkState<double>* lb = nullptr;
      SolverBody sb;
      Vec3<double> r_b;
      if (cand.b >= 0) {
        lb = &next[link_index[cand.b].first][link_index[cand.b].second];
        sb.inv_mass = 1.0 / specs[cand.b]->mass;
        sb.inv_inertia = detail::world_inv_inertia(*specs[cand.b], lb->q);
        r_b = point - lb->x;
      }
      Mat3<double> k = detail::effective_mass(sa, r_a, lb ? &sb : nullptr, r_b);
      const double lambda = cfg.contact_correction * depth / n.dot(k * n);
      la.x += n * (lambda * sa.inv_mass);
      detail::apply_small_rotation(la.q, sa.inv_inertia * r_a.cross(n * lambda));
      if (lb) {
        lb->x -= n * (lambda * sb.inv_mass);
        detail::apply_small_rotation(lb->q, sb.inv_inertia * (r_b.cross(n * lambda) * -1.0));
      }
    }
  };
  auto project_joints = [&]() {
    for (size_t b = 0; b < scene.size(); ++b) {
      for (size_t i = 1; i < scene[b].links.size(); ++i) {
        const LinkSpec<double>& ls = scene[b].links[i];
        if (ls.parent < 0) continue;
        LinkState<double>& lp = next[b][ls.parent];
        LinkState<double>& lc = next[b][i];
        const Vec3<double> r_p = rotate(lp.q, ls.anchor_parent);
        const Vec3<double> r_c = rotate(lc.q, ls.anchor_child);
        const Vec3<double> defect = (lp.x + r_p) - (lc.x + r_c);

        SolverBody sp, sc;
        sp.inv_mass = 1.0 / scene[b].links[ls.parent].mass;
        sc.inv_mass = 1.0 / ls.mass;
        sp.inv_inertia = detail::world_inv_inertia(scene[b].links[ls.parent], lp.q);
        sc.inv_inertia = detail::world_inv_inertia(ls, lc.q);
        Mat3<double> k = detail::effective_mass(sp, r_p, &sc, r_c);
        Vec3<double> lambda = detail::mat3_inverse(k) * (defect * -1.0);

        lp.x += lambda * sp.inv_mass;
        lc.x -= lambda * sc.inv_mass;
        detail::apply_small_rotation(lp.q, sp.inv_inertia * r_p.cross(lambda));
        detail::apply_small_rotation(lc.q, sc.inv_inertia * (r_c.cross(lambda) * -1.0));
      }
    }
  };
  for (int pass = 0; pass < cfg.position_iters; ++pass) {
    project_contacts();
    project_joints();
  }
  project_joints();
  project_joints();

  if (!is_finite(next)) throw DivergedError("simulation diverged (non-finite result)");
  return next;
}

// Total mechanical energy (kinetic + gravitational potential); useful as a
// solver health indicator since the scheme should never gain energy.
inline double total_energy(const SceneSpec<double>& scene, const SceneState<double>& state,
                           const Vec3<double>& gravity = {0, 0, -9.81}) {
  double e = 0;
  for (size_t b = 0; b < scene.size(); ++b) {
    for (size_t i = 0; i < scene[b].links.size(); ++i) {
      const LinkSpec<double>& ls = scene[b].links[i];
      const LinkState<double>& s = state[b][i];
      Vec3<double> inertia = capsule_inertia(ls.mass, ls.shape);
      Vec3<double> w_local = rotate_inverse(s.q, s.w);
      e += 0.5 * ls.mass * s.v.squared_norm();
      e += 0.5 * (inertia.x * w_local.x * w_local.x + inertia.y * w_local.y * w_local.y +
                  inertia.z * w_local.z * w_local.z);
      e -= ls.mass * gravity.dot(s.x);
    }
  }
  return e;
}

inline Vec3<double> total_linear_momentum(const SceneSpec<double>& scene,
                                          const SceneState<double>& state) {
  Vec3<double> p;
  for (size_t b = 0; b < scene.size(); ++b)
    for (size_t i = 0; i < scene[b].links.size(); ++i)
      p += state[b][i].v * scene[b].links[i].mass;
  return p;
}

}  // namespace larp
