#pragma once

// Feature encodings for the neural simulator: per-link dynamics-network
// inputs, pairwise contact-network inputs, per-dimension normalization
// statistics, and the z-rotation data augmentation.

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "larp/body.hpp"
#include "larp/geom.hpp"

namespace larp {

// Bumped whenever any layout below changes; checkpoints embed it and refuse
// to load under a different version.
inline constexpr const char* feature_layout_version = "larp-layout-v1";

inline constexpr int dyn_link_dim = 37;  // dynamics features per link
inline constexpr int phi_dim = 16;       // per-link contact descriptor
inline constexpr int pair_dim = 42;      // contact-network input per link pair
inline constexpr int phat_dim = 6;       // learned contact feature per link
inline constexpr int vel_dim = 6;        // dynamics-network output per link

// Column offsets inside one link's dynamics-feature block.
namespace dyn_off {
inline constexpr int x_rel = 0;     // position minus root position (3)
inline constexpr int x_z = 3;       // absolute height (1)
inline constexpr int rot = 4;       // row-major world rotation matrix (9)
inline constexpr int v = 13;        // linear velocity (3)
inline constexpr int w = 16;        // angular velocity (3)
inline constexpr int len = 19;      // capsule length (1)
inline constexpr int rad = 20;      // capsule radius (1)
inline constexpr int d = 21;        // joint displacement to parent (3)
inline constexpr int q_target = 24; // PD target quaternion, zeros on roots (4)
inline constexpr int tau = 28;      // external torque (3)
inline constexpr int phat = 31;     // contact feature (6)
}  // namespace dyn_off

inline int dyn_feature_dim(int n_links) { return dyn_link_dim * n_links; }

// Dynamics-network input for one body: the per-link blocks concatenated in
// link order. `phat` supplies the 6 contact-feature entries per link (empty
// means all-zero, e.g. single-body scenes); `disp_feature` zeroes the joint
// displacement block when false (ablation).
inline std::vector<double> encode_dynamics(const BodySpec<double>& spec,
                                           const BodyState<double>& state,
                                           const BodyControl<double>& control,
                                           const std::vector<double>& phat = {},
                                           bool disp_feature = true) {
  const int n = spec.n_links();
  if (static_cast<int>(state.size()) != n || static_cast<int>(control.size()) != n)
    throw std::invalid_argument("encode_dynamics: link count mismatch");
  if (!phat.empty() && static_cast<int>(phat.size()) != n * phat_dim)
    throw std::invalid_argument("encode_dynamics: contact feature size mismatch");
  std::vector<double> out(static_cast<size_t>(dyn_feature_dim(n)), 0.0);
  const Vec3<double> x_root = state[0].x;
  for (int i = 0; i < n; ++i) {
    double* f = out.data() + static_cast<size_t>(i) * dyn_link_dim;
    const LinkState<double>& s = state[i];
    const Vec3<double> rel = s.x - x_root;
    f[dyn_off::x_rel + 0] = rel.x;
    f[dyn_off::x_rel + 1] = rel.y;
    f[dyn_off::x_rel + 2] = rel.z;
    f[dyn_off::x_z] = s.x.z;
    const Mat3<double> r = quat_to_mat(s.q);
    for (int k = 0; k < 9; ++k) f[dyn_off::rot + k] = r.m[k];
    f[dyn_off::v + 0] = s.v.x;
    f[dyn_off::v + 1] = s.v.y;
    f[dyn_off::v + 2] = s.v.z;
    f[dyn_off::w + 0] = s.w.x;
    f[dyn_off::w + 1] = s.w.y;
    f[dyn_off::w + 2] = s.w.z;
    f[dyn_off::len] = spec.links[i].shape.length;
    f[dyn_off::rad] = spec.links[i].shape.radius;
    if (disp_feature && spec.links[i].parent >= 0) {
      const Vec3<double> d = joint_displacement(spec, state, i);
      f[dyn_off::d + 0] = d.x;
      f[dyn_off::d + 1] = d.y;
      f[dyn_off::d + 2] = d.z;
    }
    // Roots have no joint, hence no target: their slots stay zero.
    if (spec.links[i].parent >= 0) {
      const Quat<double>& qt = control[i].q_target;
      f[dyn_off::q_target + 0] = qt.w;
      f[dyn_off::q_target + 1] = qt.x;
      f[dyn_off::q_target + 2] = qt.y;
      f[dyn_off::q_target + 3] = qt.z;
    }
    f[dyn_off::tau + 0] = control[i].torque.x;
    f[dyn_off::tau + 1] = control[i].torque.y;
    f[dyn_off::tau + 2] = control[i].torque.z;
    if (!phat.empty())
      for (int k = 0; k < phat_dim; ++k)
        f[dyn_off::phat + k] = phat[static_cast<size_t>(i) * phat_dim + k];
  }
  return out;
}

// Kinematic fields read back out of an unnormalized dynamics feature vector.
struct DecodedLink {
  Vec3<double> x_rel;  // root-relative position
  Mat3<double> rot;    // world rotation matrix, row-major
  Vec3<double> v;
  Vec3<double> w;
};

inline std::vector<DecodedLink> decode_dynamics(const std::vector<double>& features) {
  if (features.empty() || features.size() % dyn_link_dim != 0)
    throw std::invalid_argument("decode_dynamics: size is not a whole number of link blocks");
  const int n = static_cast<int>(features.size()) / dyn_link_dim;
  std::vector<DecodedLink> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double* f = features.data() + static_cast<size_t>(i) * dyn_link_dim;
    DecodedLink& d = out[static_cast<size_t>(i)];
    d.x_rel = {f[dyn_off::x_rel + 0], f[dyn_off::x_rel + 1], f[dyn_off::x_rel + 2]};
    for (int k = 0; k < 9; ++k) d.rot.m[k] = f[dyn_off::rot + k];
    d.v = {f[dyn_off::v + 0], f[dyn_off::v + 1], f[dyn_off::v + 2]};
    d.w = {f[dyn_off::w + 0], f[dyn_off::w + 1], f[dyn_off::w + 2]};
  }
  return out;
}

// Per-link descriptor fed to the contact network:
// [x (3), q (4), v (3), w (3), length, radius, mass] = 16 entries.
inline std::array<double, phi_dim> contact_phi(const LinkSpec<double>& spec,
                                               const LinkState<double>& s) {
  return {s.x.x, s.x.y, s.x.z,  s.q.w, s.q.x, s.q.y, s.q.z,
          s.v.x, s.v.y, s.v.z,  s.w.x, s.w.y, s.w.z,
          spec.shape.length, spec.shape.radius, spec.mass};
}

// Contact-network input for one ordered link pair: the other body's link
// descriptor first, the receiving link second, then the collision geometry
// (contact point in each link's local frame, world normal pointing from the
// receiver toward the other link, penetration). `info` must come from a
// contact query with the other link as the first argument.
inline std::array<double, pair_dim> encode_contact_pair(
    const std::array<double, phi_dim>& phi_other,
    const std::array<double, phi_dim>& phi_self, const ContactInfo<double>& info) {
  std::array<double, pair_dim> out;
  for (int k = 0; k < phi_dim; ++k) out[k] = phi_other[k];
  for (int k = 0; k < phi_dim; ++k) out[phi_dim + k] = phi_self[k];
  double* c = out.data() + 2 * phi_dim;
  c[0] = info.p_first_local.x;
  c[1] = info.p_first_local.y;
  c[2] = info.p_first_local.z;
  c[3] = info.p_second_local.x;
  c[4] = info.p_second_local.y;
  c[5] = info.p_second_local.z;
  c[6] = info.normal.x;
  c[7] = info.normal.y;
  c[8] = info.normal.z;
  c[9] = info.penetration;
  return out;
}

// ---------------------------------------------------------------------------
// Normalization statistics
// ---------------------------------------------------------------------------

inline constexpr double sigma_floor = 1e-6;

struct NormStats {
  std::vector<double> mu, sigma;

  int dim() const { return static_cast<int>(mu.size()); }
};

// Per-column mean and population standard deviation over a batch of rows,
// with sigma floored so constant columns normalize to zero instead of
// dividing by zero.
inline NormStats compute_norm_stats(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw std::invalid_argument("compute_norm_stats: empty batch");
  const size_t d = rows[0].size();
  NormStats st;
  st.mu.assign(d, 0.0);
  st.sigma.assign(d, 0.0);
  for (const std::vector<double>& r : rows) {
    if (r.size() != d)
      throw std::invalid_argument("compute_norm_stats: ragged batch");
    for (size_t k = 0; k < d; ++k) st.mu[k] += r[k];
  }
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  for (size_t k = 0; k < d; ++k) st.mu[k] *= inv_n;
  for (const std::vector<double>& r : rows)
    for (size_t k = 0; k < d; ++k) {
      const double c = r[k] - st.mu[k];
      st.sigma[k] += c * c;
    }
  for (size_t k = 0; k < d; ++k)
    st.sigma[k] = std::max(std::sqrt(st.sigma[k] * inv_n), sigma_floor);
  return st;
}

inline void normalize_row(std::vector<double>& row, const NormStats& st) {
  for (size_t k = 0; k < row.size(); ++k) row[k] = (row[k] - st.mu[k]) / st.sigma[k];
}

// ---------------------------------------------------------------------------
// z-rotation augmentation
// ---------------------------------------------------------------------------

inline Quat<double> z_rotation(double theta) {
  return Quat<double>{std::cos(theta / 2), 0, 0, std::sin(theta / 2)};
}

// Rotate a state about the world z-axis through the origin: positions and
// velocities rotate, orientations are left-multiplied.
inline void rotate_state_z(SceneState<double>& state, double theta) {
  const Quat<double> rq = z_rotation(theta);
  const Mat3<double> r = quat_to_mat(rq);
  for (BodyState<double>& body : state)
    for (LinkState<double>& s : body) {
      s.x = r * s.x;
      s.v = r * s.v;
      s.w = r * s.w;
      s.q = quat_mul(rq, s.q);
    }
}

// External torques are world-frame and rotate with the scene; PD targets are
// parent-relative and do not.
inline void rotate_control_z(SceneControl<double>& control, double theta) {
  const Mat3<double> r = quat_to_mat(z_rotation(theta));
  for (BodyControl<double>& body : control)
    for (LinkControl<double>& c : body) c.torque = r * c.torque;
}

}  // namespace larp
