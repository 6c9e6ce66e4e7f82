#pragma once

// Implementation-independent reference computations ("oracles") the tests
// compare the library against. These deliberately use brute force rather than
// the library's own formulas.

#include <cmath>
#include <limits>

#include "larp/geom.hpp"

namespace oracles {

struct SegmentClosest {
  double dist = 0;
  larp::Vec3<double> p_a, p_b;
};

// Closest distance between two segments by exhaustive grid search with three
// refinement stages (129 x 129 samples each). The squared distance is jointly
// convex over the parameter rectangle, so the best grid cell brackets the true
// minimizer and each stage shrinks the bracket by ~64x; the final parameter
// cell is below 1e-6 of the segment length, making the distance accurate to
// well under 1e-7 for any pair the tests use. Positions are not meaningful in
// flat (parallel-overlap) valleys, so callers should compare distances and
// normals, not parameters.
inline SegmentClosest segment_closest_oracle(const larp::Vec3<double>& c1,
                                             const larp::Vec3<double>& d1, double h1,
                                             const larp::Vec3<double>& c2,
                                             const larp::Vec3<double>& d2, double h2) {
  const int K = 129;
  double lo1 = -h1, hi1 = h1, lo2 = -h2, hi2 = h2;
  double bs = 0, bt = 0;
  double best = std::numeric_limits<double>::infinity();
  for (int stage = 0; stage < 3; ++stage) {
    const double st1 = (hi1 - lo1) / (K - 1);
    const double st2 = (hi2 - lo2) / (K - 1);
    for (int i = 0; i < K; ++i) {
      const double s = lo1 + st1 * i;
      const larp::Vec3<double> p = c1 + d1 * s;
      for (int j = 0; j < K; ++j) {
        const double t = lo2 + st2 * j;
        const double d = (p - (c2 + d2 * t)).squared_norm();
        if (d < best) {
          best = d;
          bs = s;
          bt = t;
        }
      }
    }
    lo1 = std::max(-h1, bs - st1);
    hi1 = std::min(h1, bs + st1);
    lo2 = std::max(-h2, bt - st2);
    hi2 = std::min(h2, bt + st2);
  }
  SegmentClosest out;
  out.p_a = c1 + d1 * bs;
  out.p_b = c2 + d2 * bt;
  out.dist = std::sqrt(best);
  return out;
}

// Capsule inertia by direct Riemann integration of r^2 dm over a bounding box
// grid; normalized so the analytic mass argument is respected exactly.
inline larp::Vec3<double> capsule_inertia_oracle(double mass, double length, double radius,
                                                 int n = 160) {
  const double hx = radius, hz = length / 2 + radius;
  double count = 0, sxx = 0, szz = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < 2 * n; ++k) {
        const double x = (-1 + (2.0 * i + 1) / n) * hx;
        const double y = (-1 + (2.0 * j + 1) / n) * hx;
        const double z = (-1 + (k + 0.5) / n) * hz;
        const double az = std::max(std::abs(z) - length / 2, 0.0);
        if (x * x + y * y + az * az > radius * radius) continue;
        count += 1;
        sxx += y * y + z * z;  // moment about the x axis
        szz += x * x + y * y;  // moment about the symmetry axis
      }
  return {mass * sxx / count, mass * sxx / count, mass * szz / count};
}

}  // namespace oracles
