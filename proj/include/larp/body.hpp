#pragma once

// Articulated capsule bodies: specs (topology, shapes, joint anchors), link
// states, per-link control inputs, and the plain-text scene description file
// the command line tools consume.

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "larp/geom.hpp"

namespace larp {

// Thrown when a simulation rollout stops being physically meaningful (any
// non-finite state entry). `step` is the zero-based step at which the rollout
// broke down, or -1 when the thrower has no step context.
class DivergedError : public std::runtime_error {
 public:
  explicit DivergedError(const std::string& what, int step = -1)
      : std::runtime_error(what), step(step) {}
  int step;
};

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

// One capsule link. `parent` indexes into the owning body's link list (-1 for
// the root). The spherical joint to the parent is the point that satisfies
//   parent_pose * anchor_parent == child_pose * anchor_child
// when the joint is assembled exactly; both anchors are body-local.
template <class T>
struct LinkSpec {
  Capsule<T> shape;
  T mass = 1;
  int parent = -1;
  Vec3<T> anchor_parent;  // attachment point in the parent link frame
  Vec3<T> anchor_child;   // attachment point in this link's frame
};

template <class T>
struct BodySpec {
  std::string name;
  std::vector<LinkSpec<T>> links;
  int n_links() const { return static_cast<int>(links.size()); }
};

template <class T>
using SceneSpec = std::vector<BodySpec<T>>;

// A serial chain hanging downward from link 0: each joint sits at the
// hemisphere centers, i.e. the lower core endpoint of the parent meets the
// upper core endpoint of the child.
template <class T>
inline BodySpec<T> make_chain(const std::string& name, int n_links, T length, T radius,
                              T mass = T(1)) {
  BodySpec<T> body;
  body.name = name;
  body.links.resize(n_links);
  for (int i = 0; i < n_links; ++i) {
    LinkSpec<T>& link = body.links[i];
    link.shape = Capsule<T>{length, radius};
    link.mass = mass;
    link.parent = i - 1;
    if (i > 0) {
      link.anchor_parent = Vec3<T>{0, 0, -length / T(2)};
      link.anchor_child = Vec3<T>{0, 0, length / T(2)};
    }
  }
  return body;
}

// Named scene presets used throughout the tools and tests:
//   chain4    - a single 4-link chain (no inter-body contacts)
//   chain2x2  - two 2-link chains that collide with each other
//   chain1v2  - a 1-link free capsule colliding with a 2-link chain
template <class T>
inline SceneSpec<T> scenario_scene(const std::string& name) {
  const T l = T(0.3), r = T(0.05);
  if (name == "chain4") {
    return {make_chain<T>("chain4", 4, l, r)};
  }
  if (name == "chain2x2") {
    // Both chains carry the same name on purpose: the name identifies the
    // body TYPE, and identically built bodies share one dynamics network.
    return {make_chain<T>("chain2", 2, l, r), make_chain<T>("chain2", 2, l, r)};
  }
  if (name == "chain1v2") {
    return {make_chain<T>("ball", 1, l, r), make_chain<T>("chain2", 2, l, r)};
  }
  throw std::invalid_argument("unknown scenario: " + name);
}

// ---------------------------------------------------------------------------
// States and controls
// ---------------------------------------------------------------------------

template <class T>
struct LinkState {
  Vec3<T> x;             // position, world
  Quat<T> q;             // orientation, world
  Vec3<T> v;             // linear velocity, world
  Vec3<T> w;             // angular velocity, world
};

template <class T>
using BodyState = std::vector<LinkState<T>>;
template <class T>
using SceneState = std::vector<BodyState<T>>;  // [body][link]

// Per-link control: a parent-relative orientation target tracked by the PD
// joint servo (unused on roots) and an external world-frame torque.
template <class T>
struct LinkControl {
  Quat<T> q_target = Quat<T>::identity();
  Vec3<T> torque;
};

template <class T>
using BodyControl = std::vector<LinkControl<T>>;
template <class T>
using SceneControl = std::vector<BodyControl<T>>;

template <class T>
inline bool is_finite(const LinkState<T>& s) {
  return is_finite(s.x) && is_finite(s.q) && is_finite(s.v) && is_finite(s.w);
}

template <class T>
inline bool is_finite(const SceneState<T>& scene) {
  for (const auto& body : scene)
    for (const auto& link : body)
      if (!is_finite(link)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Assembly and joint geometry
// ---------------------------------------------------------------------------

// World position of the joint anchor on the parent side of link `i`.
template <class T>
inline Vec3<T> joint_anchor_parent_world(const BodySpec<T>& spec, const BodyState<T>& state,
                                         int i) {
  const LinkSpec<T>& link = spec.links[i];
  const LinkState<T>& p = state[link.parent];
  return p.x + rotate(p.q, link.anchor_parent);
}

template <class T>
inline Vec3<T> joint_anchor_child_world(const BodySpec<T>& spec, const BodyState<T>& state,
                                        int i) {
  return state[i].x + rotate(state[i].q, spec.links[i].anchor_child);
}

// Joint defect vector: zero when the spherical joint of link `i` is exactly
// assembled. Only valid for non-root links.
template <class T>
inline Vec3<T> joint_displacement(const BodySpec<T>& spec, const BodyState<T>& state, int i) {
  return joint_anchor_parent_world(spec, state, i) -
         joint_anchor_child_world(spec, state, i);
}

// Place all links of a body so every joint is exactly assembled, all links
// share the root orientation, and velocities are those of one rigid body
// moving with the root (v_i = v_root + w x (x_i - x_root), w_i = w_root).
template <class T>
inline BodyState<T> assemble_body(const BodySpec<T>& spec, const LinkState<T>& root) {
  BodyState<T> state(spec.links.size());
  state[0] = root;
  for (size_t i = 1; i < spec.links.size(); ++i) {
    const LinkSpec<T>& link = spec.links[i];
    LinkState<T>& s = state[i];
    s.q = root.q;
    s.x = joint_anchor_parent_world(spec, state, static_cast<int>(i)) -
          rotate(s.q, link.anchor_child);
    s.v = root.v + root.w.cross(s.x - root.x);
    s.w = root.w;
  }
  return state;
}

// ---------------------------------------------------------------------------
// Scene description files
// ---------------------------------------------------------------------------
//
// Line-oriented key=value text. Lists are space separated, per-link vectors
// are flattened (3 values per link). Example:
//
//   format=larp-scene-v1
//   n_bodies=1
//   body0.name=chain4
//   body0.links=4
//   body0.parent=-1 0 1 2
//   body0.length=0.3 0.3 0.3 0.3
//   body0.radius=0.05 0.05 0.05 0.05
//   body0.mass=1 1 1 1
//   body0.anchor_parent=0 0 0  0 0 -0.15  0 0 -0.15  0 0 -0.15
//   body0.anchor_child=0 0 0  0 0 0.15  0 0 0.15  0 0 0.15
//
// Root entries of the anchor lists are ignored (kept for alignment).

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::map<std::string, std::string> parse_kv_file(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty() || trim(line)[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("malformed line (expected key=value): " + line);
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

template <class T>
inline std::vector<T> parse_numbers(const std::string& text, size_t expected,
                                    const std::string& key) {
  std::istringstream ss(text);
  std::vector<T> out;
  T v;
  while (ss >> v) out.push_back(v);
  if (out.size() != expected)
    throw std::runtime_error("key " + key + ": expected " + std::to_string(expected) +
                             " values, got " + std::to_string(out.size()));
  return out;
}

inline const std::string& require_key(const std::map<std::string, std::string>& kv,
                                      const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw std::runtime_error("missing key: " + key);
  return it->second;
}

}  // namespace detail

template <class T>
inline SceneSpec<T> read_scene(std::istream& in) {
  auto kv = detail::parse_kv_file(in);
  if (detail::require_key(kv, "format") != "larp-scene-v1")
    throw std::runtime_error("unsupported scene format: " + kv["format"]);

  int n_bodies = std::stoi(detail::require_key(kv, "n_bodies"));
  SceneSpec<T> scene(n_bodies);
  for (int b = 0; b < n_bodies; ++b) {
    const std::string p = "body" + std::to_string(b) + ".";
    BodySpec<T>& body = scene[b];
    body.name = detail::require_key(kv, p + "name");
    size_t n = std::stoul(detail::require_key(kv, p + "links"));
    auto parent = detail::parse_numbers<int>(detail::require_key(kv, p + "parent"), n, p + "parent");
    auto length = detail::parse_numbers<T>(detail::require_key(kv, p + "length"), n, p + "length");
    auto radius = detail::parse_numbers<T>(detail::require_key(kv, p + "radius"), n, p + "radius");
    auto mass = detail::parse_numbers<T>(detail::require_key(kv, p + "mass"), n, p + "mass");
    auto ap = detail::parse_numbers<T>(detail::require_key(kv, p + "anchor_parent"), 3 * n,
                                       p + "anchor_parent");
    auto ac = detail::parse_numbers<T>(detail::require_key(kv, p + "anchor_child"), 3 * n,
                                       p + "anchor_child");
    body.links.resize(n);
    for (size_t i = 0; i < n; ++i) {
      LinkSpec<T>& link = body.links[i];
      if (parent[i] < -1 || parent[i] >= static_cast<int>(i))
        throw std::runtime_error(p + "parent: link " + std::to_string(i) +
                                 " must reference an earlier link");
      link.parent = parent[i];
      link.shape = Capsule<T>{length[i], radius[i]};
      link.mass = mass[i];
      link.anchor_parent = Vec3<T>{ap[3 * i], ap[3 * i + 1], ap[3 * i + 2]};
      link.anchor_child = Vec3<T>{ac[3 * i], ac[3 * i + 1], ac[3 * i + 2]};
    }
  }
  return scene;
}

template <class T>
inline void write_scene(std::ostream& out, const SceneSpec<T>& scene) {
  out.precision(17);
  out << "format=larp-scene-v1\n";
  out << "n_bodies=" << scene.size() << "\n";
  for (size_t b = 0; b < scene.size(); ++b) {
    const BodySpec<T>& body = scene[b];
    const std::string p = "body" + std::to_string(b) + ".";
    out << p << "name=" << body.name << "\n";
    out << p << "links=" << body.links.size() << "\n";
    auto list = [&](const std::string& key, auto&& get) {
      out << p << key << "=";
      for (size_t i = 0; i < body.links.size(); ++i) out << (i ? " " : "") << get(body.links[i]);
      out << "\n";
    };
    auto vec_list = [&](const std::string& key, auto&& get) {
      out << p << key << "=";
      for (size_t i = 0; i < body.links.size(); ++i) {
        Vec3<T> v = get(body.links[i]);
        out << (i ? " " : "") << v.x << " " << v.y << " " << v.z;
      }
      out << "\n";
    };
    list("parent", [](const LinkSpec<T>& l) { return l.parent; });
    list("length", [](const LinkSpec<T>& l) { return l.shape.length; });
    list("radius", [](const LinkSpec<T>& l) { return l.shape.radius; });
    list("mass", [](const LinkSpec<T>& l) { return l.mass; });
    vec_list("anchor_parent", [](const LinkSpec<T>& l) { return l.anchor_parent; });
    vec_list("anchor_child", [](const LinkSpec<T>& l) { return l.anchor_child; });
  }
}

template <class T>
inline SceneSpec<T> read_scene_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scene file: " + path);
  return read_scene<T>(in);
}

template <class T>
inline void write_scene_file(const std::string& path, const SceneSpec<T>& scene) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write scene file: " + path);
  write_scene(out, scene);
}

}  // namespace larp
