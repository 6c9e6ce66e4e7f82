// Dataset container, on-disk round trips, and trajectory generation.

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "larp/datagen.hpp"
#include "larp/dataset.hpp"

using namespace larp;
namespace fs = std::filesystem;

namespace {

// Fresh scratch directory per test run; removed on destruction.
struct ScratchDir {
  fs::path path;
  explicit ScratchDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("larp_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~ScratchDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

DatagenConfig tiny_config(const std::string& scenario, int n_seq, int n_steps,
                          uint64_t seed) {
  DatagenConfig cfg;
  cfg.scenario = scenario;
  cfg.n_sequences = n_seq;
  cfg.n_steps = n_steps;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("generated datasets have consistent shapes and finite contents") {
  const DatagenResult result = generate_dataset(tiny_config("chain4", 3, 20, 7));
  const Dataset& ds = result.data;

  CHECK(ds.n_sequences == 3);
  CHECK(ds.seq_len == 20);
  CHECK(ds.n_links_total() == 4);
  CHECK(ds.specs.size() == ds.expected_specs());
  CHECK(ds.states.size() == ds.expected_states());
  CHECK(ds.controls.size() == ds.expected_controls());
  // One state more than there are steps: the initial state is stored too.
  CHECK(ds.states.size() ==
        static_cast<size_t>(3) * 21 * ds.state_stride());

  for (float v : ds.states) CHECK(std::isfinite(v));
  for (float v : ds.specs) CHECK(std::isfinite(v));

  // Capsule dimensions are jittered around the canonical scene, each within
  // the configured +-30% band and not all equal to it.
  int changed = 0;
  for (int seq = 0; seq < ds.n_sequences; ++seq) {
    const SceneSpec<double> scene = ds.scene_for(seq);
    REQUIRE(scene.size() == ds.base_scene.size());
    for (size_t b = 0; b < scene.size(); ++b)
      for (size_t i = 0; i < scene[b].links.size(); ++i) {
        const auto& link = scene[b].links[i];
        const auto& base = ds.base_scene[b].links[i];
        CHECK(link.shape.length >= 0.69 * base.shape.length);
        CHECK(link.shape.length <= 1.31 * base.shape.length);
        CHECK(link.mass >= 0.69 * base.mass);
        CHECK(link.mass <= 1.31 * base.mass);
        if (link.shape.length != base.shape.length) ++changed;
        // Anchors stay glued to the capsule ends after jitter: assembling the
        // body must still produce exactly zero joint displacement, which only
        // holds if anchors were rescaled together with the capsule lengths.
        if (link.parent >= 0) {
          const double half = 0.5 * link.shape.length;
          CHECK(std::abs(std::abs(link.anchor_child.z) - half) < half * 0.01);
        }
      }
  }
  CHECK(changed > 0);
}

TEST_CASE("sequence generation is independent per sequence and seed-stable") {
  // The first sequences of a longer run must equal a shorter run bit for bit,
  // so datasets can be grown without invalidating earlier work.
  const Dataset big = generate_dataset(tiny_config("chain2x2", 4, 15, 42)).data;
  const Dataset small = generate_dataset(tiny_config("chain2x2", 2, 15, 42)).data;

  REQUIRE(small.specs.size() == small.expected_specs());
  CHECK(std::equal(small.specs.begin(), small.specs.end(), big.specs.begin()));
  CHECK(std::equal(small.states.begin(), small.states.end(), big.states.begin()));
  CHECK(std::equal(small.controls.begin(), small.controls.end(),
                   big.controls.begin()));

  // A different seed must actually change the data.
  const Dataset other = generate_dataset(tiny_config("chain2x2", 2, 15, 43)).data;
  CHECK(other.states != small.states);

  // Identical seeds reproduce identical datasets.
  const Dataset again = generate_dataset(tiny_config("chain2x2", 4, 15, 42)).data;
  CHECK(again.states == big.states);
  CHECK(again.specs == big.specs);
  CHECK(again.controls == big.controls);
}

TEST_CASE("generated controls follow the torque-kick and constant-target scheme") {
  DatagenConfig cfg = tiny_config("chain4", 2, 25, 11);
  cfg.torque_steps = 10;
  const Dataset ds = generate_dataset(cfg).data;

  for (int seq = 0; seq < ds.n_sequences; ++seq) {
    const SceneControl<double> first = ds.control_at(seq, 0);
    for (int t = 0; t < ds.seq_len; ++t) {
      const SceneControl<double> c = ds.control_at(seq, t);
      for (size_t b = 0; b < c.size(); ++b)
        for (size_t i = 0; i < c[b].size(); ++i) {
          const bool root = ds.base_scene[b].links[i].parent < 0;
          // Joint targets are constant over the whole sequence.
          CHECK(c[b][i].q_target.w == first[b][i].q_target.w);
          CHECK(c[b][i].q_target.x == first[b][i].q_target.x);
          if (root) {
            // Roots carry the kick torque for the first steps, then nothing.
            if (t >= cfg.torque_steps) CHECK(c[b][i].torque.norm() == 0.0);
          } else {
            CHECK(c[b][i].torque.norm() == 0.0);
          }
        }
    }
    // The kick itself is nonzero for at least one root.
    double kick = 0;
    for (const auto& body : first) kick += body[0].torque.norm();
    CHECK(kick > 0.0);
  }
}

TEST_CASE("stored trajectories replay the simulator to float precision") {
  DatagenConfig cfg = tiny_config("chain1v2", 1, 12, 3);
  const Dataset ds = generate_dataset(cfg).data;
  const SceneSpec<double> scene = ds.scene_for(0);

  // Re-run the simulator from the stored initial state with stored controls.
  // States were rounded to float on storage, so the replay drifts a little;
  // over a short horizon it must stay close.
  SceneState<double> state = ds.state_at(0, 0);
  for (int t = 0; t < ds.seq_len; ++t) {
    state = ref_step(scene, state, ds.control_at(0, t), cfg.sim);
    const SceneState<double> stored = ds.state_at(0, t + 1);
    for (size_t b = 0; b < state.size(); ++b)
      for (size_t i = 0; i < state[b].size(); ++i) {
        CHECK_THAT((state[b][i].x - stored[b][i].x).norm(),
                   Catch::Matchers::WithinAbs(0.0, 2e-3));
      }
  }
}

TEST_CASE("dataset round-trips through disk bit for bit") {
  ScratchDir dir("roundtrip");
  const Dataset ds = generate_dataset(tiny_config("chain2x2", 2, 10, 99)).data;
  write_dataset(ds, dir.str());

  const Dataset back = read_dataset(dir.str());
  CHECK(back.n_sequences == ds.n_sequences);
  CHECK(back.seq_len == ds.seq_len);
  CHECK(back.dt == ds.dt);
  CHECK(back.specs == ds.specs);
  CHECK(back.states == ds.states);
  CHECK(back.controls == ds.controls);

  REQUIRE(back.base_scene.size() == ds.base_scene.size());
  for (size_t b = 0; b < ds.base_scene.size(); ++b) {
    CHECK(back.base_scene[b].name == ds.base_scene[b].name);
    REQUIRE(back.base_scene[b].links.size() == ds.base_scene[b].links.size());
    for (size_t i = 0; i < ds.base_scene[b].links.size(); ++i) {
      CHECK(back.base_scene[b].links[i].parent == ds.base_scene[b].links[i].parent);
      CHECK(back.base_scene[b].links[i].shape.length ==
            ds.base_scene[b].links[i].shape.length);
    }
  }
}

TEST_CASE("an empty dataset is written and read back without error") {
  ScratchDir dir("empty");
  Dataset ds;
  ds.base_scene = scenario_scene<double>("chain4");
  ds.n_sequences = 0;
  ds.seq_len = 10;
  write_dataset(ds, dir.str());
  const Dataset back = read_dataset(dir.str());
  CHECK(back.n_sequences == 0);
  CHECK(back.states.empty());
}

TEST_CASE("dataset reader rejects damaged directories with specific errors") {
  ScratchDir dir("damage");
  const Dataset ds = generate_dataset(tiny_config("chain4", 1, 5, 5)).data;
  write_dataset(ds, dir.str());

  SECTION("missing blob") {
    fs::remove(dir.path / "states.f32");
    CHECK_THROWS_WITH(read_dataset(dir.str()),
                      Catch::Matchers::ContainsSubstring("missing"));
  }
  SECTION("truncated blob") {
    fs::resize_file(dir.path / "states.f32",
                    fs::file_size(dir.path / "states.f32") - 8);
    CHECK_THROWS_WITH(read_dataset(dir.str()),
                      Catch::Matchers::ContainsSubstring("truncated"));
  }
  SECTION("oversized blob") {
    std::ofstream f(dir.path / "states.f32",
                    std::ios::binary | std::ios::app);
    const float extra[2] = {0.f, 0.f};
    f.write(reinterpret_cast<const char*>(extra), sizeof extra);
    f.close();
    CHECK_THROWS_WITH(read_dataset(dir.str()),
                      Catch::Matchers::ContainsSubstring("disagrees"));
  }
  SECTION("format version mismatch") {
    std::ifstream in(dir.path / "manifest.txt");
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    in.close();
    const auto pos = text.find(dataset_format_version);
    REQUIRE(pos != std::string::npos);
    text.replace(pos, std::string(dataset_format_version).size(), "larp-dataset-v0");
    std::ofstream out(dir.path / "manifest.txt");
    out << text;
    out.close();
    CHECK_THROWS_WITH(read_dataset(dir.str()),
                      Catch::Matchers::ContainsSubstring("version"));
  }
  SECTION("missing manifest") {
    fs::remove(dir.path / "manifest.txt");
    CHECK_THROWS(read_dataset(dir.str()));
  }
}

TEST_CASE("multi-body scenes are generated on closing courses") {
  const Dataset ds = generate_dataset(tiny_config("chain1v2", 4, 5, 21)).data;
  for (int seq = 0; seq < ds.n_sequences; ++seq) {
    const SceneState<double> s0 = ds.state_at(seq, 0);
    REQUIRE(s0.size() == 2);
    const double x0 = s0[0][0].x.x;
    const double x1 = s0[1][0].x.x;
    // Bodies start on opposite sides and move toward each other.
    CHECK(x0 * x1 < 0.0);
    CHECK((x0 < x1 ? s0[0][0].v.x > 0 : s0[0][0].v.x < 0));
    CHECK((x0 < x1 ? s0[1][0].v.x < 0 : s0[1][0].v.x > 0));
  }
}

TEST_CASE("degenerate generation requests are rejected") {
  CHECK_THROWS(generate_dataset(tiny_config("chain4", 0, 10, 1)));
  CHECK_THROWS(generate_dataset(tiny_config("chain4", 2, 0, 1)));
  CHECK_THROWS(generate_dataset(tiny_config("nope", 2, 10, 1)));
}
