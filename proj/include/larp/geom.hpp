#pragma once

// Small fixed-size vector/quaternion math and capsule contact geometry.
// Everything is templated on the scalar type so the same formulas serve the
// double-precision reference simulator and the single-precision inference
// path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace larp {

// ---------------------------------------------------------------------------
// Vec3
// ---------------------------------------------------------------------------

template <class T>
struct Vec3 {
  T x = 0, y = 0, z = 0;

  Vec3() = default;
  Vec3(T x_, T y_, T z_) : x(x_), y(y_), z(z_) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3 operator*(T s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(T s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  Vec3& operator*=(T s) { x *= s; y *= s; z *= s; return *this; }

  T dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  T squared_norm() const { return dot(*this); }
  T norm() const { return std::sqrt(squared_norm()); }
  Vec3 normalized() const {
    T n = norm();
    return n > T(0) ? *this / n : Vec3{0, 0, 0};
  }
};

template <class T>
inline Vec3<T> operator*(T s, const Vec3<T>& v) { return v * s; }

template <class T>
inline bool is_finite(const Vec3<T>& v) {
  return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z);
}

// ---------------------------------------------------------------------------
// Mat3 (row major)
// ---------------------------------------------------------------------------

template <class T>
struct Mat3 {
  T m[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 zero() { return Mat3{{0, 0, 0, 0, 0, 0, 0, 0, 0}}; }
  static Mat3 diagonal(const Vec3<T>& d) {
    return Mat3{{d.x, 0, 0, 0, d.y, 0, 0, 0, d.z}};
  }

  T operator()(int r, int c) const { return m[3 * r + c]; }
  T& operator()(int r, int c) { return m[3 * r + c]; }

  Vec3<T> operator*(const Vec3<T>& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  // R^T v, i.e. the inverse rotation when the matrix is orthonormal.
  Vec3<T> transposed_mul(const Vec3<T>& v) const {
    return {m[0] * v.x + m[3] * v.y + m[6] * v.z,
            m[1] * v.x + m[4] * v.y + m[7] * v.z,
            m[2] * v.x + m[5] * v.y + m[8] * v.z};
  }
  Mat3 operator*(const Mat3& o) const {
    Mat3 r = zero();
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k)
        for (int j = 0; j < 3; ++j)
          r.m[3 * i + j] += m[3 * i + k] * o.m[3 * k + j];
    return r;
  }
  Mat3 transposed() const {
    return Mat3{{m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]}};
  }
};

// ---------------------------------------------------------------------------
// Quaternion (w, x, y, z), Hamilton convention
// ---------------------------------------------------------------------------

template <class T>
struct Quat {
  T w = 1, x = 0, y = 0, z = 0;

  Quat() = default;
  Quat(T w_, T x_, T y_, T z_) : w(w_), x(x_), y(y_), z(z_) {}

  static Quat identity() { return {1, 0, 0, 0}; }
  static Quat from_axis_angle(const Vec3<T>& axis, T angle) {
    T h = angle / T(2);
    Vec3<T> u = axis.normalized() * std::sin(h);
    return {std::cos(h), u.x, u.y, u.z};
  }

  Quat conjugate() const { return {w, -x, -y, -z}; }
  T dot(const Quat& o) const { return w * o.w + x * o.x + y * o.y + z * o.z; }
  T norm() const { return std::sqrt(dot(*this)); }
  Quat normalized() const {
    T n = norm();
    return n > T(0) ? Quat{w / n, x / n, y / n, z / n} : identity();
  }
};

template <class T>
inline bool is_finite(const Quat<T>& q) {
  return std::isfinite(q.w) && std::isfinite(q.x) && std::isfinite(q.y) &&
         std::isfinite(q.z);
}

// Hamilton product a*b: applying b first, then a, when both rotate vectors by
// the sandwich q v q^-1.
template <class T>
inline Quat<T> quat_mul(const Quat<T>& a, const Quat<T>& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

// Rotate v by q without forming the matrix: v + 2 u x (u x v + w v).
template <class T>
inline Vec3<T> rotate(const Quat<T>& q, const Vec3<T>& v) {
  Vec3<T> u{q.x, q.y, q.z};
  Vec3<T> t = u.cross(v) + v * q.w;
  return v + T(2) * u.cross(t);
}

template <class T>
inline Vec3<T> rotate_inverse(const Quat<T>& q, const Vec3<T>& v) {
  return rotate(q.conjugate(), v);
}

template <class T>
inline Mat3<T> quat_to_mat(const Quat<T>& q) {
  T w = q.w, x = q.x, y = q.y, z = q.z;
  return Mat3<T>{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
                  2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
                  2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}};
}

// dq/dt for a world-frame angular velocity: 0.5 * (0, w) * q.
template <class T>
inline Quat<T> quat_derivative(const Quat<T>& q, const Vec3<T>& omega) {
  Quat<T> og{0, omega.x, omega.y, omega.z};
  Quat<T> d = quat_mul(og, q);
  return {d.w / T(2), d.x / T(2), d.y / T(2), d.z / T(2)};
}

// Rotation vector (axis * angle) of q, using the shorter of the two covers.
// Near identity this degrades gracefully to the first-order expansion 2*(x,y,z).
template <class T>
inline Vec3<T> axis_angle(const Quat<T>& q) {
  Quat<T> c = q.w < T(0) ? Quat<T>{-q.w, -q.x, -q.y, -q.z} : q;
  Vec3<T> u{c.x, c.y, c.z};
  T s = u.norm();
  if (s < T(1e-9)) return u * T(2);
  T angle = T(2) * std::atan2(s, c.w);
  return u * (angle / s);
}

// ---------------------------------------------------------------------------
// Capsules
// ---------------------------------------------------------------------------

// A capsule is a segment of length `length` along the local z axis (core
// endpoints at z = +-length/2) inflated by `radius`.
template <class T>
struct Capsule {
  T length = 0;
  T radius = 0;
};

template <class T>
inline Vec3<T> capsule_axis(const Quat<T>& q) {
  return rotate(q, Vec3<T>{0, 0, 1});
}

// Principal moments of a solid capsule of uniform density, in the body frame
// (z is the symmetry axis). Cylinder and the two hemisphere caps are combined
// with the parallel-axis theorem; the caps together contribute as one sphere
// of mass ms, offset by length/2:
//   Izz = mc r^2/2            + ms 2r^2/5
//   Ixx = mc (l^2/12 + r^2/4) + ms (2r^2/5 + l^2/4 + 3 l r / 8)
template <class T>
inline Vec3<T> capsule_inertia(T mass, const Capsule<T>& cap) {
  constexpr T pi = std::numbers::pi_v<T>;
  T r = cap.radius, l = cap.length;
  T vc = pi * r * r * l;                   // cylinder volume
  T vs = T(4.0 / 3.0) * pi * r * r * r;    // sphere (two caps) volume
  T mc = mass * vc / (vc + vs);
  T ms = mass - mc;
  T izz = mc * r * r / T(2) + ms * T(0.4) * r * r;
  T ixx = mc * (l * l / T(12) + r * r / T(4)) +
          ms * (T(0.4) * r * r + l * l / T(4) + T(3.0 / 8.0) * l * r);
  return {ixx, ixx, izz};
}

// ---------------------------------------------------------------------------
// Closest points between two segments
// ---------------------------------------------------------------------------

// Segments are given by center, unit direction and half length; the returned
// parameters are arc lengths in [-h, h] measured from each center.
template <class T>
struct SegmentClosest {
  T s = 0, t = 0;   // parameters on segment a and b
  Vec3<T> p_a, p_b; // closest core points
  T dist = 0;
};

template <class T>
inline SegmentClosest<T> closest_segment_segment(const Vec3<T>& c1, const Vec3<T>& d1, T h1,
                                                 const Vec3<T>& c2, const Vec3<T>& d2, T h2) {
  const Vec3<T> r = c1 - c2;
  const T b = d1.dot(d2);
  const T c = d1.dot(r);
  const T f = d2.dot(r);
  const T denom = T(1) - b * b;

  T s;
  if (denom > T(1e-12)) {
    s = std::clamp((b * f - c) / denom, -h1, h1);
  } else {
    // Parallel axes: every point of the overlap is equally close, so pick the
    // midpoint of segment 2's projection onto segment 1 (clamped to segment 1)
    // to get a stable, symmetric representative. Disjoint projections fall
    // back to the nearest endpoint.
    const T proj = -c;             // parameter of c2 projected on segment 1
    const T lo = std::max(-h1, proj - std::abs(b) * h2);
    const T hi = std::min(h1, proj + std::abs(b) * h2);
    s = lo <= hi ? (lo + hi) / T(2) : std::clamp(proj, -h1, h1);
  }

  T t = std::clamp(b * s + f, -h2, h2);
  // If t was clamped the optimal s for that t may differ; one re-projection
  // yields the exact constrained minimum of the quadratic.
  s = std::clamp(b * t - c, -h1, h1);

  SegmentClosest<T> out;
  out.s = s;
  out.t = t;
  out.p_a = c1 + d1 * s;
  out.p_b = c2 + d2 * t;
  out.dist = (out.p_a - out.p_b).norm();
  return out;
}

// ---------------------------------------------------------------------------
// Contacts
// ---------------------------------------------------------------------------

// Contact geometry between an ordered pair of shapes. The normal is expressed
// in world space and points from the second shape toward the first; the
// surface points are stored both in world space and in each shape's local
// frame. `penetration` is the overlap depth (negative when separated), so the
// pair is touching exactly when it is zero.
template <class T>
struct ContactInfo {
  Vec3<T> p_first_world, p_second_world;
  Vec3<T> p_first_local, p_second_local;
  Vec3<T> normal;
  T penetration = 0;
};

template <class T>
inline ContactInfo<T> capsule_capsule_contact(const Vec3<T>& x_a, const Quat<T>& q_a,
                                              const Capsule<T>& cap_a,
                                              const Vec3<T>& x_b, const Quat<T>& q_b,
                                              const Capsule<T>& cap_b) {
  const Vec3<T> axis_a = capsule_axis(q_a);
  const Vec3<T> axis_b = capsule_axis(q_b);
  const SegmentClosest<T> cp = closest_segment_segment(
      x_a, axis_a, cap_a.length / T(2), x_b, axis_b, cap_b.length / T(2));

  Vec3<T> n;
  if (cp.dist > T(1e-9)) {
    n = (cp.p_a - cp.p_b) / cp.dist;
  } else {
    // Coincident cores: the direction is undefined, use world up so that the
    // result is still deterministic and unit length.
    n = Vec3<T>{0, 0, 1};
  }

  ContactInfo<T> ci;
  ci.normal = n;
  ci.penetration = cap_a.radius + cap_b.radius - cp.dist;
  ci.p_first_world = cp.p_a - n * cap_a.radius;
  ci.p_second_world = cp.p_b + n * cap_b.radius;
  ci.p_first_local = rotate_inverse(q_a, ci.p_first_world - x_a);
  ci.p_second_local = rotate_inverse(q_b, ci.p_second_world - x_b);
  return ci;
}

// Contact of a capsule against the ground plane z = 0. The first shape is the
// capsule, the second is the plane (whose local frame is the world frame), and
// the normal is world up. The deepest core endpoint determines the contact;
// an exactly horizontal capsule deterministically picks the +z-axis endpoint.
template <class T>
inline ContactInfo<T> capsule_ground_contact(const Vec3<T>& x, const Quat<T>& q,
                                             const Capsule<T>& cap) {
  const Vec3<T> axis = capsule_axis(q);
  const T h = cap.length / T(2);
  const Vec3<T> e_pos = x + axis * h;
  const Vec3<T> e_neg = x - axis * h;
  const Vec3<T> e = e_pos.z <= e_neg.z ? e_pos : e_neg;

  ContactInfo<T> ci;
  ci.normal = Vec3<T>{0, 0, 1};
  ci.penetration = cap.radius - e.z;
  ci.p_first_world = e - Vec3<T>{0, 0, cap.radius};
  ci.p_second_world = Vec3<T>{e.x, e.y, 0};
  ci.p_first_local = rotate_inverse(q, ci.p_first_world - x);
  ci.p_second_local = ci.p_second_world;
  return ci;
}

}  // namespace larp
