#pragma once

// Trajectory dataset container and its on-disk format.
//
// A dataset directory holds:
//   manifest.txt  - key = value lines (format version, counts, dt)
//   scene.txt     - the base scene (names, topology, canonical dimensions)
//   specs.f32     - per-sequence capsule dimensions [seq][body][link][9]
//                   fields: length, radius, mass, anchor_parent, anchor_child
//   states.f32    - [seq][t in 0..seq_len][body][link][13]
//                   fields: x (3), q (4), v (3), w (3)
//   controls.f32  - [seq][t in 0..seq_len-1][body][link][7]
//                   fields: Q target (4), torque (3)
// Blobs are little-endian 32-bit floats; states store seq_len+1 timesteps
// (the initial state plus one per step), controls one per step.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "larp/body.hpp"

namespace larp {

static_assert(std::endian::native == std::endian::little,
              "dataset blobs are little-endian and written by memory dump");

inline constexpr const char* dataset_format_version = "larp-dataset-v1";
inline constexpr int state_fields = 13;
inline constexpr int control_fields = 7;
inline constexpr int spec_fields = 9;

struct Dataset {
  SceneSpec<double> base_scene;  // topology and canonical dimensions
  int n_sequences = 0;
  int seq_len = 0;  // simulation steps; states hold seq_len + 1 entries
  double dt = 0.01;
  std::vector<float> specs;     // [seq][body][link][spec_fields]
  std::vector<float> states;    // [seq][t][body][link][state_fields]
  std::vector<float> controls;  // [seq][t][body][link][control_fields]

  int n_links_total() const {
    int n = 0;
    for (const auto& b : base_scene) n += b.n_links();
    return n;
  }
  size_t spec_stride() const { return static_cast<size_t>(n_links_total()) * spec_fields; }
  size_t state_stride() const { return static_cast<size_t>(n_links_total()) * state_fields; }
  size_t control_stride() const {
    return static_cast<size_t>(n_links_total()) * control_fields;
  }

  // The scene a given sequence was simulated with: base topology with that
  // sequence's capsule dimensions.
  SceneSpec<double> scene_for(int seq) const {
    SceneSpec<double> scene = base_scene;
    const float* p = specs.data() + static_cast<size_t>(seq) * spec_stride();
    for (auto& body : scene)
      for (auto& link : body.links) {
        link.shape.length = p[0];
        link.shape.radius = p[1];
        link.mass = p[2];
        link.anchor_parent = {p[3], p[4], p[5]};
        link.anchor_child = {p[6], p[7], p[8]};
        p += spec_fields;
      }
    return scene;
  }

  SceneState<double> state_at(int seq, int t) const {
    const float* p = states.data() +
                     (static_cast<size_t>(seq) * (seq_len + 1) + t) * state_stride();
    SceneState<double> out(base_scene.size());
    for (size_t b = 0; b < base_scene.size(); ++b) {
      out[b].resize(base_scene[b].links.size());
      for (auto& s : out[b]) {
        s.x = {p[0], p[1], p[2]};
        s.q = {p[3], p[4], p[5], p[6]};
        s.v = {p[7], p[8], p[9]};
        s.w = {p[10], p[11], p[12]};
        p += state_fields;
      }
    }
    return out;
  }

  SceneControl<double> control_at(int seq, int t) const {
    const float* p = controls.data() +
                     (static_cast<size_t>(seq) * seq_len + t) * control_stride();
    SceneControl<double> out(base_scene.size());
    for (size_t b = 0; b < base_scene.size(); ++b) {
      out[b].resize(base_scene[b].links.size());
      for (auto& c : out[b]) {
        c.q_target = {p[0], p[1], p[2], p[3]};
        c.torque = {p[4], p[5], p[6]};
        p += control_fields;
      }
    }
    return out;
  }

  void append_spec(const SceneSpec<double>& scene) {
    for (const auto& body : scene)
      for (const auto& link : body.links) {
        specs.push_back(static_cast<float>(link.shape.length));
        specs.push_back(static_cast<float>(link.shape.radius));
        specs.push_back(static_cast<float>(link.mass));
        for (const auto& a : {link.anchor_parent, link.anchor_child}) {
          specs.push_back(static_cast<float>(a.x));
          specs.push_back(static_cast<float>(a.y));
          specs.push_back(static_cast<float>(a.z));
        }
      }
  }
  void append_state(const SceneState<double>& state) {
    for (const auto& body : state)
      for (const auto& s : body) {
        for (double v : {s.x.x, s.x.y, s.x.z, s.q.w, s.q.x, s.q.y, s.q.z,
                         s.v.x, s.v.y, s.v.z, s.w.x, s.w.y, s.w.z})
          states.push_back(static_cast<float>(v));
      }
  }
  void append_control(const SceneControl<double>& control) {
    for (const auto& body : control)
      for (const auto& c : body) {
        for (double v : {c.q_target.w, c.q_target.x, c.q_target.y, c.q_target.z,
                         c.torque.x, c.torque.y, c.torque.z})
          controls.push_back(static_cast<float>(v));
      }
  }

  size_t expected_specs() const {
    return static_cast<size_t>(n_sequences) * spec_stride();
  }
  size_t expected_states() const {
    return static_cast<size_t>(n_sequences) * (seq_len + 1) * state_stride();
  }
  size_t expected_controls() const {
    return static_cast<size_t>(n_sequences) * seq_len * control_stride();
  }
};

namespace detail {

inline void write_blob(const std::filesystem::path& path, const std::vector<float>& v) {
  std::FILE* f = std::fopen(path.string().c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  if (!v.empty() && std::fwrite(v.data(), sizeof(float), v.size(), f) != v.size()) {
    std::fclose(f);
    throw std::runtime_error("short write: " + path.string());
  }
  std::fclose(f);
}

// Reads exactly `expected` floats; rejects both truncated and oversized blobs
// before allocating anything based on the expectation.
inline std::vector<float> read_blob(const std::filesystem::path& path, size_t expected) {
  std::error_code ec;
  const auto bytes = std::filesystem::file_size(path, ec);
  if (ec) throw std::runtime_error("missing dataset blob: " + path.string());
  if (bytes < expected * sizeof(float))
    throw std::runtime_error("dataset blob truncated: " + path.string());
  if (bytes != expected * sizeof(float))
    throw std::runtime_error("dataset blob size disagrees with manifest: " +
                             path.string());
  std::vector<float> v(expected);
  std::FILE* f = std::fopen(path.string().c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  const size_t got = expected ? std::fread(v.data(), sizeof(float), expected, f) : 0;
  std::fclose(f);
  if (got != expected)
    throw std::runtime_error("dataset blob truncated: " + path.string());
  return v;
}

}  // namespace detail

inline void write_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream out(fs::path(dir) / "manifest.txt");
    out.precision(17);
    out << "format = " << dataset_format_version << "\n";
    out << "n_sequences = " << ds.n_sequences << "\n";
    out << "seq_len = " << ds.seq_len << "\n";
    out << "dt = " << ds.dt << "\n";
    out << "scene = scene.txt\n";
  }
  write_scene_file((fs::path(dir) / "scene.txt").string(), ds.base_scene);
  detail::write_blob(fs::path(dir) / "specs.f32", ds.specs);
  detail::write_blob(fs::path(dir) / "states.f32", ds.states);
  detail::write_blob(fs::path(dir) / "controls.f32", ds.controls);
}

inline Dataset read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.txt");
  if (!in) throw std::runtime_error("missing dataset manifest in " + dir);
  auto kv = detail::parse_kv_file(in);
  if (detail::require_key(kv, "format") != dataset_format_version)
    throw std::runtime_error("dataset format version mismatch (have " +
                             kv["format"] + ", want " + dataset_format_version + ")");
  Dataset ds;
  ds.n_sequences = std::stoi(detail::require_key(kv, "n_sequences"));
  ds.seq_len = std::stoi(detail::require_key(kv, "seq_len"));
  ds.dt = std::stod(detail::require_key(kv, "dt"));
  if (ds.n_sequences < 0 || ds.seq_len < 0)
    throw std::runtime_error("dataset manifest has negative counts");
  ds.base_scene =
      read_scene_file<double>((fs::path(dir) / detail::require_key(kv, "scene")).string());
  ds.specs = detail::read_blob(fs::path(dir) / "specs.f32", ds.expected_specs());
  ds.states = detail::read_blob(fs::path(dir) / "states.f32", ds.expected_states());
  ds.controls = detail::read_blob(fs::path(dir) / "controls.f32", ds.expected_controls());
  return ds;
}

}  // namespace larp
