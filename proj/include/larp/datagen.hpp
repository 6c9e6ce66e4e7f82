#pragma once

// Training-data generation: randomized capsule-chain scenes rolled out with
// the reference simulator. Each sequence jitters capsule dimensions, throws
// the bodies with randomized poses and velocities, holds constant PD targets,
// and kicks the root links with a brief external torque to diversify motion.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include "larp/dataset.hpp"
#include "larp/refsim.hpp"
#include "larp/rng.hpp"

namespace larp {

struct DatagenConfig {
  std::string scenario = "chain4";
  int n_sequences = 16;
  int n_steps = 100;
  uint64_t seed = 0;
  double dim_jitter = 0.3;        // relative jitter on length/radius/mass
  double torque_mag = 15.0;       // peak external torque on each root [N m]
  int torque_steps = 10;          // steps the kick lasts
  double target_angle_max = 1.0;  // PD target rotation magnitude [rad]
  double drop_height_min = 0.8;
  double drop_height_max = 1.6;
  double throw_speed_max = 2.0;   // horizontal closing speed for 2-body scenes
  double spin_max = 2.0;          // initial angular velocity magnitude
  int max_attempts = 20;          // per-sequence retries on divergence
  SimConfig sim;
};

struct DatagenResult {
  Dataset data;
  int retries = 0;  // sequences that needed regeneration after divergence
};

namespace detail {

inline Vec3<double> random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3<double> v{n(rng), n(rng), n(rng)};
  double len = v.norm();
  return len > 1e-12 ? v * (1.0 / len) : Vec3<double>{0, 0, 1};
}

inline Quat<double> random_quat(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Quat<double> q{n(rng), n(rng), n(rng), n(rng)};
  return q.normalized();
}

// Scale capsule dimensions by independent factors; anchors stay glued to the
// capsule ends by scaling each anchor with its own link's length factor
// (anchor_parent lives on the parent link, anchor_child on the link itself).
inline SceneSpec<double> jitter_scene(const SceneSpec<double>& base, double jitter,
                                      std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(1.0 - jitter, 1.0 + jitter);
  SceneSpec<double> scene = base;
  for (auto& body : scene) {
    std::vector<double> length_scale(body.links.size(), 1.0);
    for (size_t i = 0; i < body.links.size(); ++i) {
      const double s = u(rng);
      length_scale[i] = s;
      body.links[i].shape.length *= s;
      body.links[i].shape.radius *= u(rng);
      body.links[i].mass *= u(rng);
    }
    for (size_t i = 0; i < body.links.size(); ++i) {
      const int parent = body.links[i].parent;
      if (parent < 0) continue;
      body.links[i].anchor_parent = body.links[i].anchor_parent * length_scale[parent];
      body.links[i].anchor_child = body.links[i].anchor_child * length_scale[i];
    }
  }
  return scene;
}

inline SceneState<double> random_initial_state(const SceneSpec<double>& scene,
                                               const DatagenConfig& cfg,
                                               std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uh(cfg.drop_height_min, cfg.drop_height_max);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  SceneState<double> state(scene.size());
  const bool colliding = scene.size() > 1;
  for (size_t b = 0; b < scene.size(); ++b) {
    LinkState<double> root;
    // Multi-body scenes start separated on x and get thrown at each other so
    // collisions actually happen inside the rollout window.
    const double side = (b % 2 == 0) ? -1.0 : 1.0;
    root.x = {colliding ? side * (0.5 + 0.2 * u(rng)) : 0.3 * u(rng), 0.3 * u(rng),
              uh(rng)};
    root.q = random_quat(rng);
    root.v = {0.3 * u(rng), 0.3 * u(rng), 0.3 * u(rng)};
    if (colliding) {
      std::uniform_real_distribution<double> us(0.5 * cfg.throw_speed_max,
                                                cfg.throw_speed_max);
      root.v.x = -side * us(rng);
    }
    root.w = random_unit(rng) * (cfg.spin_max * std::abs(u(rng)));
    state[b] = assemble_body(scene[b], root);
  }
  return state;
}

// Constant per-sequence controls: every joint holds one random PD target; the
// root link of each body gets a constant torque kick for the first few steps
// (applied by the caller via the time index).
inline SceneControl<double> random_controls(const SceneSpec<double>& scene,
                                            const DatagenConfig& cfg,
                                            std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SceneControl<double> control(scene.size());
  for (size_t b = 0; b < scene.size(); ++b) {
    control[b].resize(scene[b].links.size());
    for (size_t i = 0; i < scene[b].links.size(); ++i) {
      LinkControl<double>& c = control[b][i];
      if (scene[b].links[i].parent >= 0)
        c.q_target = Quat<double>::from_axis_angle(random_unit(rng),
                                                   cfg.target_angle_max * u(rng));
      if (scene[b].links[i].parent < 0)
        c.torque = random_unit(rng) * (cfg.torque_mag * u(rng));
    }
  }
  return control;
}

}  // namespace detail

inline DatagenResult generate_dataset(const DatagenConfig& cfg) {
  if (cfg.n_sequences <= 0 || cfg.n_steps <= 0)
    throw std::invalid_argument("generate_dataset: counts must be positive");
  DatagenResult result;
  Dataset& ds = result.data;
  ds.base_scene = scenario_scene<double>(cfg.scenario);
  ds.n_sequences = cfg.n_sequences;
  ds.seq_len = cfg.n_steps;
  ds.dt = cfg.sim.dt;
  ds.specs.reserve(ds.expected_specs());
  ds.states.reserve(ds.expected_states());
  ds.controls.reserve(ds.expected_controls());

  for (int seq = 0; seq < cfg.n_sequences; ++seq) {
    bool done = false;
    for (int attempt = 0; attempt < cfg.max_attempts && !done; ++attempt) {
      // Independent stream per (sequence, attempt): sequences can be
      // generated in any order or count and still match bit for bit.
      auto rng = make_rng(cfg.seed, static_cast<uint64_t>(seq), attempt);
      SceneSpec<double> scene = detail::jitter_scene(ds.base_scene, cfg.dim_jitter, rng);
      SceneState<double> state = detail::random_initial_state(scene, cfg, rng);
      SceneControl<double> control = detail::random_controls(scene, cfg, rng);
      SceneControl<double> idle = control;
      for (auto& body : idle)
        for (auto& c : body) c.torque = Vec3<double>{};

      std::vector<SceneState<double>> traj;
      traj.reserve(cfg.n_steps + 1);
      traj.push_back(state);
      try {
        for (int t = 0; t < cfg.n_steps; ++t) {
          state = ref_step(scene, state,
                           t < cfg.torque_steps ? control : idle, cfg.sim);
          traj.push_back(state);
        }
      } catch (const DivergedError&) {
        ++result.retries;
        continue;
      }
      ds.append_spec(scene);
      for (const auto& s : traj) ds.append_state(s);
      for (int t = 0; t < cfg.n_steps; ++t)
        ds.append_control(t < cfg.torque_steps ? control : idle);
      done = true;
    }
    if (!done)
      throw std::runtime_error("generate_dataset: sequence " + std::to_string(seq) +
                               " kept diverging");
  }
  return result;
}

}  // namespace larp
