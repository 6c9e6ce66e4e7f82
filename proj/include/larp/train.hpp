#pragma once
// Training loop for the neural simulator. Stored trajectories are cut into
// fixed-length windows; each update unrolls the model from the window's first
// state on the differentiation tape, penalizes position, rotation and joint
// errors against the stored states, and applies Adam under a global
// gradient-norm safeguard. Normalization statistics are frozen from the first
// batch before any update. A held-out slice of sequences provides validation
// scores, per-epoch metrics stream to CSV, and a retrain driver picks the
// best of several independently seeded runs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "larp/dataset.hpp"
#include "larp/features.hpp"
#include "larp/model.hpp"
#include "larp/nn.hpp"
#include "larp/rng.hpp"
#include "larp/unroll.hpp"

namespace larp {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

// What the first loss term matches: next-state positions, or next-state
// linear and angular velocities. Rotation and joint terms are unaffected.
enum class LossMode { position, velocity };

inline const char* loss_mode_name(LossMode m) {
  return m == LossMode::position ? "position" : "velocity";
}

inline LossMode loss_mode_from_name(const std::string& s) {
  if (s == "position") return LossMode::position;
  if (s == "velocity") return LossMode::velocity;
  throw std::invalid_argument("unknown loss mode: " + s);
}

enum class LrSchedule { cosine, constant };

inline const char* lr_schedule_name(LrSchedule s) {
  return s == LrSchedule::cosine ? "cosine" : "constant";
}

inline LrSchedule lr_schedule_from_name(const std::string& s) {
  if (s == "cosine") return LrSchedule::cosine;
  if (s == "constant") return LrSchedule::constant;
  throw std::invalid_argument("unknown lr schedule: " + s);
}

struct TrainConfig {
  ModelConfig model;

  int n_h = 20;         // unroll length in steps; 1 is teacher forcing
  int stride = 0;       // window start spacing; 0 means n_h (non-overlapping)
  int batch_size = 256;
  int epochs = 50;

  double lr = 1e-3;
  double lr_min = 1e-5;
  LrSchedule lr_schedule = LrSchedule::cosine;

  double w_p = 1.0;   // position (or velocity) term weight
  double w_r = 1.0;   // rotation term weight
  double w_d = 0.1;   // joint-displacement term weight

  double grad_threshold = 0.3;           // global gradient-norm limit
  GradRule grad_rule = GradRule::drop;   // what to do above the limit

  LossMode loss_mode = LossMode::position;
  bool disp_loss = true;      // include the joint-displacement term
  bool stopgrad = true;       // block gradients into contact-network inputs
  bool augment = true;        // random z-rotation per training batch

  double val_fraction = 0.05; // trailing share of sequences held out
  uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

// One training subsequence: states t0 .. t0+n_h of sequence `seq`.
struct Window {
  int seq = 0;
  int t0 = 0;
};

// All windows of length n_h whose states lie inside one stored sequence,
// starting every `stride` steps, for each listed sequence. A sequence of
// `seq_len` steps holds seq_len + 1 states, so starts run while
// t0 + n_h <= seq_len; windows never span two sequences.
inline std::vector<Window> make_windows(const Dataset& ds, int n_h, int stride,
                                        const std::vector<int>& seqs) {
  if (n_h < 1) throw std::invalid_argument("make_windows: window length must be positive");
  if (stride < 1) throw std::invalid_argument("make_windows: stride must be positive");
  std::vector<Window> out;
  for (int s : seqs) {
    if (s < 0 || s >= ds.n_sequences)
      throw std::invalid_argument("make_windows: sequence index out of range");
    for (int t0 = 0; t0 + n_h <= ds.seq_len; t0 += stride) out.push_back({s, t0});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean per-link-step loss terms. `pos` holds the squared position error in
// position mode and the squared velocity error (linear plus angular) in
// velocity mode; `rot` is 1 - |q . q_ref|; `disp` is the squared joint
// defect of the predicted states. All three are means over every link of
// every body, window and step, roots included (their joint defect is zero).
struct LossTerms {
  double pos = 0, rot = 0, disp = 0, total = 0;
};

// Running sums behind LossTerms, so batches of different sizes combine into
// one mean exactly.
struct LossSums {
  double pos = 0, rot = 0, disp = 0;
  std::int64_t link_steps = 0;
};

inline void accumulate_loss_step(LossSums& acc, const SceneSpec<double>& spec,
                                 const SceneState<double>& predicted,
                                 const SceneState<double>& target, LossMode mode,
                                 bool disp_loss) {
  for (size_t m = 0; m < spec.size(); ++m) {
    const BodySpec<double>& bs = spec[m];
    for (int i = 0; i < bs.n_links(); ++i) {
      const LinkState<double>& ph = predicted[m][static_cast<size_t>(i)];
      const LinkState<double>& th = target[m][static_cast<size_t>(i)];
      if (mode == LossMode::position) {
        acc.pos += (ph.x - th.x).squared_norm();
      } else {
        acc.pos += (ph.v - th.v).squared_norm() + (ph.w - th.w).squared_norm();
      }
      acc.rot += 1.0 - std::abs(ph.q.dot(th.q));
      if (disp_loss && bs.links[static_cast<size_t>(i)].parent >= 0)
        acc.disp += joint_displacement(bs, predicted[m], i).squared_norm();
      ++acc.link_steps;
    }
  }
}

inline LossTerms finalize_loss(const LossSums& s, double w_p, double w_r, double w_d,
                               bool disp_loss) {
  LossTerms out;
  if (s.link_steps == 0) {
    out.pos = out.rot = out.disp = out.total = std::numeric_limits<double>::infinity();
    return out;
  }
  const double inv = 1.0 / static_cast<double>(s.link_steps);
  out.pos = s.pos * inv;
  out.rot = s.rot * inv;
  out.disp = disp_loss ? s.disp * inv : 0.0;
  out.total = w_p * out.pos + w_r * out.rot + w_d * out.disp;
  return out;
}

// The same loss assembled on the tape, over a full unrolled batch.
struct TapeLoss {
  NodeId total = -1;                // [1,1]
  NodeId pos = -1, rot = -1, disp = -1;  // [1,1] each
  std::int64_t link_steps = 0;
};

// traj holds T+1 states (the staged initial state first); targets[j][k] is
// the stored state after step j+1 for batch slot k. Terms are normalized by
// the total number of link-steps across the batch, matching
// accumulate_loss_step / finalize_loss.
inline TapeLoss tape_rollout_loss(Tape& t, const UnrollContext& ctx,
                                  const std::vector<TapeState>& traj,
                                  const std::vector<std::vector<SceneState<double>>>& targets,
                                  const TrainConfig& cfg) {
  const int T = static_cast<int>(targets.size());
  if (static_cast<int>(traj.size()) != T + 1)
    throw std::invalid_argument("tape_rollout_loss: trajectory/target length mismatch");
  const int B = ctx.batch;

  NodeId pos_sum = t.scalar(0.0);
  NodeId rot_abs_sum = t.scalar(0.0);
  NodeId disp_sum = t.scalar(0.0);
  std::int64_t link_steps = 0;

  for (int j = 1; j <= T; ++j) {
    const std::vector<SceneState<double>>& tgt = targets[static_cast<size_t>(j - 1)];
    if (static_cast<int>(tgt.size()) != B)
      throw std::invalid_argument("tape_rollout_loss: target batch size mismatch");
    const TapeState& state = traj[static_cast<size_t>(j)];
    for (size_t gi = 0; gi < ctx.groups.size(); ++gi) {
      const GroupCtx& g = ctx.groups[gi];
      for (int i = 0; i < g.n_links; ++i) {
        const GroupLinkNodes& nodes = state[gi][static_cast<size_t>(i)];
        Tensor TQ(g.rows, 4);
        Tensor TA(g.rows, 3), TB(g.rows, 3);  // position, or velocity pair
        for (size_t inst = 0; inst < g.bodies.size(); ++inst)
          for (int k = 0; k < B; ++k) {
            const LinkState<double>& s =
                tgt[static_cast<size_t>(k)][static_cast<size_t>(g.bodies[inst])]
                   [static_cast<size_t>(i)];
            const int r = static_cast<int>(inst) * B + k;
            TQ.at(r, 0) = s.q.w;
            TQ.at(r, 1) = s.q.x;
            TQ.at(r, 2) = s.q.y;
            TQ.at(r, 3) = s.q.z;
            const Vec3<double>& a = cfg.loss_mode == LossMode::position ? s.x : s.v;
            TA.at(r, 0) = a.x;
            TA.at(r, 1) = a.y;
            TA.at(r, 2) = a.z;
            if (cfg.loss_mode == LossMode::velocity) {
              TB.at(r, 0) = s.w.x;
              TB.at(r, 1) = s.w.y;
              TB.at(r, 2) = s.w.z;
            }
          }
        if (cfg.loss_mode == LossMode::position) {
          const NodeId d = t.sub(nodes.x, t.constant(std::move(TA)));
          pos_sum = t.add(pos_sum, t.sum_all(t.square(d)));
        } else {
          const NodeId dv = t.sub(nodes.v, t.constant(std::move(TA)));
          const NodeId dw = t.sub(nodes.w, t.constant(std::move(TB)));
          pos_sum = t.add(pos_sum, t.add(t.sum_all(t.square(dv)), t.sum_all(t.square(dw))));
        }
        const NodeId dots = t.row_dot(nodes.q, t.constant(std::move(TQ)));
        rot_abs_sum = t.add(rot_abs_sum, t.sum_all(t.abs(dots)));
        if (cfg.disp_loss && g.links[static_cast<size_t>(i)].parent >= 0) {
          const NodeId dh = tape_joint_displacement(t, ctx, state, static_cast<int>(gi), i);
          disp_sum = t.add(disp_sum, t.sum_all(t.square(dh)));
        }
        link_steps += g.rows;
      }
    }
  }

  if (link_steps == 0) throw std::invalid_argument("tape_rollout_loss: empty batch");
  const double inv = 1.0 / static_cast<double>(link_steps);
  TapeLoss out;
  out.link_steps = link_steps;
  out.pos = t.scale(pos_sum, inv);
  // mean(1 - |dot|) = 1 - sum(|dot|) / count
  out.rot = t.add_const(t.scale(rot_abs_sum, -inv), 1.0);
  out.disp = cfg.disp_loss ? t.scale(disp_sum, inv) : t.scalar(0.0);
  out.total = t.add(t.add(t.scale(out.pos, cfg.w_p), t.scale(out.rot, cfg.w_r)),
                    t.scale(out.disp, cfg.w_d));
  return out;
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

namespace detail {

struct TrainBatch {
  std::vector<SceneSpec<double>> specs;                     // [k]
  std::vector<SceneState<double>> initial;                  // [k]
  std::vector<std::vector<SceneControl<double>>> controls;  // [step][k]
  std::vector<std::vector<SceneState<double>>> targets;     // [step][k]
};

inline TrainBatch load_batch(const Dataset& ds, std::span<const Window> wins, int n_h) {
  TrainBatch b;
  const int K = static_cast<int>(wins.size());
  b.specs.reserve(static_cast<size_t>(K));
  b.initial.reserve(static_cast<size_t>(K));
  b.controls.assign(static_cast<size_t>(n_h), std::vector<SceneControl<double>>(static_cast<size_t>(K)));
  b.targets.assign(static_cast<size_t>(n_h), std::vector<SceneState<double>>(static_cast<size_t>(K)));
  for (int k = 0; k < K; ++k) {
    const Window& w = wins[static_cast<size_t>(k)];
    b.specs.push_back(ds.scene_for(w.seq));
    b.initial.push_back(ds.state_at(w.seq, w.t0));
    for (int j = 0; j < n_h; ++j) {
      b.controls[static_cast<size_t>(j)][static_cast<size_t>(k)] = ds.control_at(w.seq, w.t0 + j);
      b.targets[static_cast<size_t>(j)][static_cast<size_t>(k)] = ds.state_at(w.seq, w.t0 + j + 1);
    }
  }
  return b;
}

// Rotate every state and control of the batch about the world z axis by the
// same angle. Targets rotate with the inputs, so the loss is evaluated in a
// consistently rotated frame.
inline void augment_batch(TrainBatch& b, double theta) {
  for (SceneState<double>& s : b.initial) rotate_state_z(s, theta);
  for (auto& step : b.targets)
    for (SceneState<double>& s : step) rotate_state_z(s, theta);
  for (auto& step : b.controls)
    for (SceneControl<double>& c : step) rotate_control_z(c, theta);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Normalization statistics
// ---------------------------------------------------------------------------

// Computes and installs normalization statistics from one batch of stored
// windows: dynamics inputs from each window's first state (contact-feature
// slots stay at identity — those inputs are produced by the network and fed
// unnormalized), output statistics from the velocities of the next stored
// state, and contact-input statistics from the raw pair rows of the first
// state. Called once before the first update; the statistics never move
// again.
inline void freeze_stats(ModelParams& p, const Dataset& ds, std::span<const Window> batch) {
  if (batch.empty()) throw std::invalid_argument("freeze_stats: empty batch");
  std::vector<std::vector<std::vector<double>>> in_rows(p.types.size());
  std::vector<std::vector<std::vector<double>>> out_rows(p.types.size());
  std::vector<std::vector<double>> pair_rows;

  for (const Window& w : batch) {
    const SceneSpec<double> spec = ds.scene_for(w.seq);
    const SceneState<double> s0 = ds.state_at(w.seq, w.t0);
    const SceneState<double> s1 = ds.state_at(w.seq, w.t0 + 1);
    const SceneControl<double> u0 = ds.control_at(w.seq, w.t0);
    for (size_t m = 0; m < spec.size(); ++m) {
      const size_t ti = static_cast<size_t>(p.type_index(spec[m].name));
      in_rows[ti].push_back(encode_dynamics(spec[m], s0[m], u0[m], {}, p.disp_feature));
      std::vector<double> vr;
      vr.reserve(s1[m].size() * static_cast<size_t>(vel_dim));
      for (const LinkState<double>& ls : s1[m]) {
        vr.insert(vr.end(), {ls.v.x, ls.v.y, ls.v.z, ls.w.x, ls.w.y, ls.w.z});
      }
      out_rows[ti].push_back(std::move(vr));
    }
    const std::vector<ContactPair> pairs = contact_pairs(spec);
    if (!pairs.empty()) {
      const Tensor raw = contact_pair_rows({spec}, {s0}, pairs, identity_stats(pair_dim));
      for (int r = 0; r < raw.rows; ++r) {
        std::vector<double> row(static_cast<size_t>(pair_dim));
        for (int c = 0; c < pair_dim; ++c) row[static_cast<size_t>(c)] = raw.at(r, c);
        pair_rows.push_back(std::move(row));
      }
    }
  }

  for (size_t ti = 0; ti < p.types.size(); ++ti) {
    if (in_rows[ti].empty()) continue;  // type absent from this batch: identity
    TypeParams& tp = p.types[ti];
    tp.in_stats = compute_norm_stats(in_rows[ti]);
    for (int i = 0; i < tp.n_links; ++i)
      for (int c = 0; c < phat_dim; ++c) {
        const size_t k = static_cast<size_t>(i * dyn_link_dim + dyn_off::phat + c);
        tp.in_stats.mu[k] = 0.0;
        tp.in_stats.sigma[k] = 1.0;
      }
    tp.out_stats = compute_norm_stats(out_rows[ti]);
  }
  p.contact_stats = pair_rows.empty() ? identity_stats(pair_dim) : compute_norm_stats(pair_rows);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  LossTerms train;
  LossTerms val;
  int val_diverged = 0;    // validation windows excluded after divergence
  int dropped = 0;         // training batches skipped by the gradient rule
};

inline constexpr const char* train_metrics_version = "larp-train-metrics-v1";

inline void write_metrics_csv(const std::vector<EpochMetrics>& log, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write metrics file: " + path);
  f << "# " << train_metrics_version << "\n";
  f << "epoch,lr,train_pos,train_rot,train_disp,train_total,"
       "val_pos,val_rot,val_disp,val_total,val_diverged,dropped_batches\n";
  f.precision(17);
  for (const EpochMetrics& m : log) {
    f << m.epoch << ',' << m.lr << ',' << m.train.pos << ',' << m.train.rot << ','
      << m.train.disp << ',' << m.train.total << ',' << m.val.pos << ',' << m.val.rot << ','
      << m.val.disp << ',' << m.val.total << ',' << m.val_diverged << ',' << m.dropped << '\n';
  }
  if (!f) throw std::runtime_error("failed writing metrics file: " + path);
}

// Thrown when a training loss stops being finite; carries where.
struct TrainAbort : std::runtime_error {
  int epoch = 0, batch = 0, step = 0;
  Window window;
  TrainAbort(int e, int b, Window w, int s)
      : std::runtime_error("training aborted: non-finite loss at epoch " + std::to_string(e) +
                           ", batch " + std::to_string(b) + " (window seq=" +
                           std::to_string(w.seq) + " t0=" + std::to_string(w.t0) +
                           ", unroll step " + std::to_string(s) + ")"),
        epoch(e),
        batch(b),
        step(s),
        window(w) {}
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochMetrics> log;
  // Selection score: validation total of the last epoch, or the training
  // total when no sequences were held out.
  double score = std::numeric_limits<double>::infinity();
  int train_windows = 0;
  int val_windows = 0;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace detail {

// Validation pass: plain batched rollouts over the held-out windows,
// unaugmented. Windows whose rollout leaves the finite range are excluded
// from the mean and counted.
inline LossSums eval_windows(const Dataset& ds, const ModelParams& p,
                             const std::vector<Window>& wins, const TrainConfig& cfg,
                             int& diverged) {
  LossSums acc;
  const int K = static_cast<int>(wins.size());
  for (int lo = 0; lo < K; lo += cfg.batch_size) {
    const int hi = std::min(lo + cfg.batch_size, K);
    const std::span<const Window> chunk(wins.data() + lo, static_cast<size_t>(hi - lo));
    const TrainBatch b = load_batch(ds, chunk, cfg.n_h);
    auto score_one = [&](int k, const std::vector<SceneState<double>>& roll) {
      for (int j = 0; j < cfg.n_h; ++j)
        accumulate_loss_step(acc, b.specs[static_cast<size_t>(k)],
                             roll[static_cast<size_t>(j + 1)],
                             b.targets[static_cast<size_t>(j)][static_cast<size_t>(k)],
                             cfg.loss_mode, cfg.disp_loss);
    };
    try {
      const auto rolls = model_rollout_batch(b.specs, b.initial, b.controls, p);
      for (int k = 0; k < hi - lo; ++k) score_one(k, rolls[static_cast<size_t>(k)]);
    } catch (const DivergedError&) {
      // Rerun the chunk one window at a time so one bad window does not
      // discard its neighbours.
      for (int k = 0; k < hi - lo; ++k) {
        std::vector<std::vector<SceneControl<double>>> ctrl(static_cast<size_t>(cfg.n_h));
        for (int j = 0; j < cfg.n_h; ++j)
          ctrl[static_cast<size_t>(j)] = {b.controls[static_cast<size_t>(j)][static_cast<size_t>(k)]};
        try {
          const auto roll = model_rollout_batch({b.specs[static_cast<size_t>(k)]},
                                                {b.initial[static_cast<size_t>(k)]}, ctrl, p);
          score_one(k, roll[0]);
        } catch (const DivergedError&) {
          ++diverged;
        }
      }
    }
  }
  return acc;
}

}  // namespace detail

inline TrainResult train_model(const Dataset& ds, const TrainConfig& cfg,
                               std::ostream* progress = nullptr) {
  if (ds.n_sequences <= 0 || ds.seq_len <= 0)
    throw std::invalid_argument("train_model: empty dataset");
  if (cfg.n_h < 1) throw std::invalid_argument("train_model: unroll length must be positive");
  if (cfg.n_h > ds.seq_len)
    throw std::invalid_argument("train_model: unroll length exceeds sequence length");
  if (cfg.batch_size < 1) throw std::invalid_argument("train_model: batch size must be positive");
  if (cfg.epochs < 0) throw std::invalid_argument("train_model: negative epoch count");
  if (cfg.stride < 0) throw std::invalid_argument("train_model: negative stride");
  if (!(cfg.lr > 0)) throw std::invalid_argument("train_model: learning rate must be positive");
  if (!(cfg.val_fraction >= 0 && cfg.val_fraction < 1))
    throw std::invalid_argument("train_model: validation fraction must be in [0, 1)");
  if (!(cfg.grad_threshold > 0))
    throw std::invalid_argument("train_model: gradient threshold must be positive");

  // Trailing sequences become the validation split.
  int n_val = static_cast<int>(std::lround(cfg.val_fraction * ds.n_sequences));
  n_val = std::clamp(n_val, 0, ds.n_sequences - 1);
  std::vector<int> train_seqs, val_seqs;
  for (int s = 0; s < ds.n_sequences - n_val; ++s) train_seqs.push_back(s);
  for (int s = ds.n_sequences - n_val; s < ds.n_sequences; ++s) val_seqs.push_back(s);

  const int stride = cfg.stride > 0 ? cfg.stride : cfg.n_h;
  std::vector<Window> windows = make_windows(ds, cfg.n_h, stride, train_seqs);
  const std::vector<Window> val_windows = make_windows(ds, cfg.n_h, stride, val_seqs);
  if (windows.empty()) throw std::invalid_argument("train_model: no training windows");

  TrainResult result;
  result.train_windows = static_cast<int>(windows.size());
  result.val_windows = static_cast<int>(val_windows.size());
  result.params = init_model(ds.base_scene, cfg.model, derive_seed(cfg.seed, 1));
  ModelParams& params = result.params;
  params.dt = ds.dt;  // the model learns the dataset's step

  // Epoch-0 batch order is fixed before statistics are frozen, so the
  // statistics batch is exactly the first batch trained on.
  {
    auto rng = make_rng(cfg.seed, 2, 0);
    std::shuffle(windows.begin(), windows.end(), rng);
  }
  const size_t stats_count = std::min(windows.size(), static_cast<size_t>(cfg.batch_size));
  freeze_stats(params, ds, std::span<const Window>(windows.data(), stats_count));

  std::vector<Tensor*> plist = param_list(params);
  Adam adam;
  auto rng_aug = make_rng(cfg.seed, 3);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (epoch > 0) {
      auto rng = make_rng(cfg.seed, 2, static_cast<uint64_t>(epoch));
      std::shuffle(windows.begin(), windows.end(), rng);
    }
    const double lr = cfg.lr_schedule == LrSchedule::cosine
                          ? cosine_lr(cfg.lr, cfg.lr_min, static_cast<double>(epoch),
                                      static_cast<double>(std::max(cfg.epochs - 1, 1)))
                          : cfg.lr;

    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr;
    double sum_pos = 0, sum_rot = 0, sum_disp = 0;
    std::int64_t sum_links = 0;

    const int K = static_cast<int>(windows.size());
    int batch_index = 0;
    for (int lo = 0; lo < K; lo += cfg.batch_size, ++batch_index) {
      const int hi = std::min(lo + cfg.batch_size, K);
      const std::span<const Window> chunk(windows.data() + lo, static_cast<size_t>(hi - lo));
      detail::TrainBatch batch = detail::load_batch(ds, chunk, cfg.n_h);
      if (cfg.augment) detail::augment_batch(batch, angle(rng_aug));

      Tape tape;
      const ParamNodes pn = stage_params(tape, params);
      const UnrollContext ctx = make_unroll_context(tape, batch.specs, params);
      const TapeState s0 = stage_state(tape, ctx, batch.initial);
      const std::vector<TapeState> traj =
          tape_rollout(tape, ctx, pn, s0, batch.controls, cfg.stopgrad);
      const TapeLoss loss = tape_rollout_loss(tape, ctx, traj, batch.targets, cfg);

      const double total = tape.val(loss.total).d[0];
      if (!std::isfinite(total)) {
        // Name the first window whose rollout left the finite range.
        for (int j = 1; j <= cfg.n_h; ++j) {
          const auto vals = tape_state_values(tape, ctx, traj[static_cast<size_t>(j)]);
          for (size_t k = 0; k < vals.size(); ++k)
            if (!is_finite(vals[k])) throw TrainAbort(epoch, batch_index, chunk[k], j);
        }
        throw TrainAbort(epoch, batch_index, chunk[0], -1);
      }

      const double links = static_cast<double>(loss.link_steps);
      sum_pos += tape.val(loss.pos).d[0] * links;
      sum_rot += tape.val(loss.rot).d[0] * links;
      sum_disp += tape.val(loss.disp).d[0] * links;
      sum_links += loss.link_steps;

      tape.backward(loss.total);
      std::vector<Tensor*> grads;
      grads.reserve(pn.flat.size());
      for (NodeId id : pn.flat) grads.push_back(&tape.grad_ref(id));
      const std::vector<const Tensor*> gview(grads.begin(), grads.end());
      const double norm = global_grad_norm(gview);
      if (norm > cfg.grad_threshold) {
        if (cfg.grad_rule == GradRule::drop) {
          ++em.dropped;
          continue;
        }
        const double f = cfg.grad_threshold / norm;
        for (Tensor* g : grads)
          for (double& v : g->d) v *= f;
      }
      adam.step(plist, gview, lr);
    }

    if (sum_links > 0) {
      LossSums train_sums{sum_pos, sum_rot, sum_disp, sum_links};
      em.train = finalize_loss(train_sums, cfg.w_p, cfg.w_r, cfg.w_d, cfg.disp_loss);
      // The tape terms were already means with the disp term zeroed when
      // disabled, so undo finalize's averaging of raw sums.
      em.train.pos = sum_pos / static_cast<double>(sum_links);
      em.train.rot = sum_rot / static_cast<double>(sum_links);
      em.train.disp = sum_disp / static_cast<double>(sum_links);
      em.train.total = cfg.w_p * em.train.pos + cfg.w_r * em.train.rot + cfg.w_d * em.train.disp;
    }

    if (!val_windows.empty()) {
      const LossSums vs = detail::eval_windows(ds, params, val_windows, cfg, em.val_diverged);
      em.val = finalize_loss(vs, cfg.w_p, cfg.w_r, cfg.w_d, cfg.disp_loss);
    }

    result.log.push_back(em);
    if (progress) {
      (*progress) << "epoch " << (epoch + 1) << "/" << cfg.epochs << "  lr " << lr
                  << "  train " << em.train.total;
      if (!val_windows.empty())
        (*progress) << "  val " << em.val.total << "  diverged " << em.val_diverged;
      (*progress) << "  dropped " << em.dropped << std::endl;
    }
  }

  if (!result.log.empty())
    result.score = val_windows.empty() ? result.log.back().train.total
                                       : result.log.back().val.total;
  return result;
}

// ---------------------------------------------------------------------------
// Retrain driver
// ---------------------------------------------------------------------------

struct RetrainResult {
  TrainResult best;
  int best_attempt = 0;
  std::vector<double> scores;  // one per attempt, in attempt order
};

// Trains `attempts` models from independently derived seeds (attempt 0 uses
// the configured seed itself) and keeps the one with the lowest selection
// score.
inline RetrainResult train_best_of(const Dataset& ds, const TrainConfig& cfg, int attempts,
                                   std::ostream* progress = nullptr) {
  if (attempts < 1) throw std::invalid_argument("train_best_of: attempts must be positive");
  RetrainResult out;
  double best = std::numeric_limits<double>::infinity();
  for (int a = 0; a < attempts; ++a) {
    TrainConfig c = cfg;
    if (a > 0) c.seed = derive_seed(cfg.seed, 0x52545259u, static_cast<uint64_t>(a));
    if (progress) (*progress) << "attempt " << (a + 1) << "/" << attempts << std::endl;
    TrainResult r = train_model(ds, c, progress);
    out.scores.push_back(r.score);
    if (r.score < best || a == 0) {
      best = r.score;
      out.best_attempt = a;
      out.best = std::move(r);
    }
  }
  return out;
}

}  // namespace larp
