#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "bip/amp.hpp"
#include "bip/checkpoint.hpp"
#include "bip/errors.hpp"
#include "bip/linalg.hpp"
#include "bip/nn.hpp"
#include "bip/refgen.hpp"
#include "bip/rng.hpp"
#include "bip/sim.hpp"
#include "bip/terrain.hpp"

namespace bip::trainer {

inline constexpr std::size_t kProprioDim = 17;
inline constexpr std::size_t kPrivDim = 13;
inline constexpr std::size_t kTerrainDim = terrain::kScanPoints;  // 11
inline constexpr std::size_t kActionDim = 4;
inline constexpr std::size_t kTerrainLatentDim = 16;
inline constexpr std::size_t kPrivLatentDim = 8;
inline constexpr std::size_t kLatentDim = kTerrainLatentDim + kPrivLatentDim;  // 24
inline constexpr std::size_t kTrunkInDim = kProprioDim + kLatentDim;           // 41

// fixed input scaling so raw physical magnitudes land near unit scale
inline constexpr double kAngVelScale = 0.25;
inline constexpr double kJointVelScale = 0.05;
inline constexpr double kForceScale = 0.01;

// ---------------------------------------------------------------------------
// Observations

/// Proprioceptive observation (17): projected gravity (2), base linear
/// velocity in the body frame (2), base angular velocity (1), joint
/// positions (4), joint velocities (4), previous action (4).
inline Vec build_proprio(const sim::SimState& st, const Vec& prev_action) {
  if (prev_action.size() != kActionDim)
    throw ShapeError("build_proprio: previous action must have 4 entries");
  Vec o(kProprioDim);
  const double th = st.q[2];
  const double ct = std::cos(th), s = std::sin(th);
  o[0] = -s;  // world gravity direction (0,-1) rotated into the body frame
  o[1] = -ct;
  const double vx = st.qd[0], vz = st.qd[1];
  o[2] = vx * ct - vz * s;  // body-frame linear velocity
  o[3] = vx * s + vz * ct;
  o[4] = st.qd[2] * kAngVelScale;
  for (std::size_t i = 0; i < kActionDim; ++i) {
    o[5 + i] = st.q[3 + i];
    o[9 + i] = st.qd[3 + i] * kJointVelScale;
    o[13 + i] = prev_action[i];
  }
  return o;
}

/// Privileged observation (13): friction (1), restitution (1), per-foot
/// contact force (4), external trunk force (2), per-body collision flags (5).
inline Vec build_privileged(const sim::SimState& st, const sim::DomainParams& dom) {
  Vec o(kPrivDim);
  o[0] = dom.friction;
  o[1] = dom.restitution;
  for (int f = 0; f < 2; ++f)
    for (int c = 0; c < 2; ++c)
      o[2 + 2 * static_cast<std::size_t>(f) + static_cast<std::size_t>(c)] =
          st.foot_force[static_cast<std::size_t>(f)][static_cast<std::size_t>(c)] * kForceScale;
  o[6] = st.ext_force[0] * kForceScale;
  o[7] = st.ext_force[1] * kForceScale;
  for (std::size_t i = 0; i < 5; ++i) o[8 + i] = st.body_contact[i] ? 1.0 : 0.0;
  return o;
}

/// Terrain observation (11): relative height scan around the base.
inline Vec build_terrain_obs(const terrain::HeightField& field, const sim::SimState& st) {
  return terrain::height_scan(field, st.q[0], st.q[1]);
}

// ---------------------------------------------------------------------------
// Teacher policy

struct TeacherPolicy {
  nn::Mlp terrain_enc;  // 11 -> [128, 64] -> 16
  nn::Mlp priv_enc;     // 13 -> [128, 64] -> 8
  nn::Mlp trunk;        // 41 -> [256, 128, 64], elu throughout
  nn::Mlp action_head;  // 64 -> 4 linear
  nn::Mlp value_head;   // 64 -> 1 linear
  Vec log_std;          // 4

  void check() const {
    if (terrain_enc.in_dim() != kTerrainDim || terrain_enc.out_dim() != kTerrainLatentDim ||
        priv_enc.in_dim() != kPrivDim || priv_enc.out_dim() != kPrivLatentDim ||
        trunk.in_dim() != kTrunkInDim || action_head.in_dim() != trunk.out_dim() ||
        action_head.out_dim() != kActionDim || value_head.in_dim() != trunk.out_dim() ||
        value_head.out_dim() != 1 || log_std.size() != kActionDim)
      throw ShapeError("TeacherPolicy: inconsistent component shapes");
  }
};

inline TeacherPolicy make_teacher(Rng& rng) {
  TeacherPolicy p;
  p.terrain_enc = nn::make_mlp("t_enc", {kTerrainDim, 128, 64, kTerrainLatentDim},
                               nn::Activation::Elu, rng);
  p.priv_enc = nn::make_mlp("p_enc", {kPrivDim, 128, 64, kPrivLatentDim},
                            nn::Activation::Elu, rng);
  p.trunk = nn::make_mlp("trunk", {kTrunkInDim, 256, 128, 64}, nn::Activation::Elu, rng);
  p.trunk.layers.back().act = nn::Activation::Elu;  // output is a hidden feature
  p.action_head = nn::make_mlp("a_head", {64, kActionDim}, nn::Activation::Elu, rng, 0.01);
  p.value_head = nn::make_mlp("v_head", {64, 1}, nn::Activation::Elu, rng);
  p.log_std.assign(kActionDim, -1.0);
  p.check();
  return p;
}

struct TeacherEval {
  Vec le, lp, mean;
  double value = 0.0;
  nn::Tape t_te, t_pe, t_trunk, t_ah, t_vh;
};

inline TeacherEval teacher_forward(const TeacherPolicy& p, const Vec& proprio, const Vec& priv,
                                   const Vec& terr) {
  if (proprio.size() != kProprioDim || priv.size() != kPrivDim || terr.size() != kTerrainDim)
    throw ShapeError("teacher_forward: observation dimension mismatch");
  TeacherEval e;
  auto [le, t_te] = nn::forward(p.terrain_enc, terr);
  auto [lp, t_pe] = nn::forward(p.priv_enc, priv);
  Vec trunk_in;
  trunk_in.reserve(kTrunkInDim);
  trunk_in.insert(trunk_in.end(), proprio.begin(), proprio.end());
  trunk_in.insert(trunk_in.end(), le.begin(), le.end());
  trunk_in.insert(trunk_in.end(), lp.begin(), lp.end());
  auto [h, t_trunk] = nn::forward(p.trunk, trunk_in);
  auto [mean, t_ah] = nn::forward(p.action_head, h);
  auto [v, t_vh] = nn::forward(p.value_head, h);
  e.le = std::move(le);
  e.lp = std::move(lp);
  e.mean = std::move(mean);
  e.value = v[0];
  e.t_te = std::move(t_te);
  e.t_pe = std::move(t_pe);
  e.t_trunk = std::move(t_trunk);
  e.t_ah = std::move(t_ah);
  e.t_vh = std::move(t_vh);
  return e;
}

struct TeacherOut {
  Vec le, lp, mean;
  double value = 0.0;
};

/// Tape-free forward pass for rollouts and evaluation.
inline TeacherOut teacher_act(const TeacherPolicy& p, const Vec& proprio, const Vec& priv,
                              const Vec& terr) {
  if (proprio.size() != kProprioDim || priv.size() != kPrivDim || terr.size() != kTerrainDim)
    throw ShapeError("teacher_act: observation dimension mismatch");
  TeacherOut o;
  o.le = nn::forward_only(p.terrain_enc, terr);
  o.lp = nn::forward_only(p.priv_enc, priv);
  Vec trunk_in;
  trunk_in.reserve(kTrunkInDim);
  trunk_in.insert(trunk_in.end(), proprio.begin(), proprio.end());
  trunk_in.insert(trunk_in.end(), o.le.begin(), o.le.end());
  trunk_in.insert(trunk_in.end(), o.lp.begin(), o.lp.end());
  const Vec h = nn::forward_only(p.trunk, trunk_in);
  o.mean = nn::forward_only(p.action_head, h);
  o.value = nn::forward_only(p.value_head, h)[0];
  return o;
}

struct TeacherGrad {
  nn::Grad te, pe, trunk, ah, vh;
  Vec log_std;

  static TeacherGrad zeros_like(const TeacherPolicy& p) {
    TeacherGrad g;
    g.te = nn::Grad::zeros_like(p.terrain_enc);
    g.pe = nn::Grad::zeros_like(p.priv_enc);
    g.trunk = nn::Grad::zeros_like(p.trunk);
    g.ah = nn::Grad::zeros_like(p.action_head);
    g.vh = nn::Grad::zeros_like(p.value_head);
    g.log_std.assign(kActionDim, 0.0);
    return g;
  }

  void add(const TeacherGrad& o, double s = 1.0) {
    te.add(o.te, s);
    pe.add(o.pe, s);
    trunk.add(o.trunk, s);
    ah.add(o.ah, s);
    vh.add(o.vh, s);
    for (std::size_t i = 0; i < log_std.size(); ++i) log_std[i] += s * o.log_std[i];
  }

  void scale(double s) {
    te.scale(s);
    pe.scale(s);
    trunk.scale(s);
    ah.scale(s);
    vh.scale(s);
    for (auto& v : log_std) v *= s;
  }

  bool finite() const {
    return te.finite() && pe.finite() && trunk.finite() && vh.finite() && ah.finite() &&
           all_finite(log_std);
  }
};

/// Backpropagates output cotangents through the whole teacher graph and
/// accumulates parameter gradients into acc (log_std handled by the caller).
inline void teacher_backward(const TeacherPolicy& p, const TeacherEval& e, const Vec& dmean,
                             double dvalue, TeacherGrad& acc) {
  Vec dh = nn::backward_acc(p.action_head, e.t_ah, dmean, acc.ah);
  const Vec dh2 = nn::backward_acc(p.value_head, e.t_vh, {dvalue}, acc.vh);
  axpy(1.0, dh2, dh);
  const Vec din = nn::backward_acc(p.trunk, e.t_trunk, dh, acc.trunk);
  const Vec dle(din.begin() + kProprioDim, din.begin() + kProprioDim + kTerrainLatentDim);
  const Vec dlp(din.begin() + kProprioDim + kTerrainLatentDim, din.end());
  nn::backward_acc(p.terrain_enc, e.t_te, dle, acc.te);
  nn::backward_acc(p.priv_enc, e.t_pe, dlp, acc.pe);
}

// ---------------------------------------------------------------------------
// Stochastic action

inline double gaussian_log_prob(const Vec& mean, const Vec& log_std, const Vec& raw) {
  if (mean.size() != raw.size() || log_std.size() != raw.size())
    throw ShapeError("gaussian_log_prob: dimension mismatch");
  double lp = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double s = std::exp(log_std[i]);
    const double z = (raw[i] - mean[i]) / s;
    lp += -0.5 * z * z - log_std[i] - 0.5 * std::log(2.0 * M_PI);
  }
  return lp;
}

struct ActionSample {
  Vec action;  // clipped to the command bounds
  Vec raw;     // pre-clip Gaussian sample (used for likelihood ratios)
  double log_prob = 0.0;
};

inline ActionSample sample_action(const Vec& mean, const Vec& log_std, Rng& rng, double bound) {
  if (!all_finite(mean) || !all_finite(log_std))
    throw NumericError("sample_action: non-finite distribution parameters");
  ActionSample s;
  s.raw.resize(mean.size());
  for (std::size_t i = 0; i < mean.size(); ++i)
    s.raw[i] = mean[i] + std::exp(log_std[i]) * rng.normal();
  s.log_prob = gaussian_log_prob(mean, log_std, s.raw);
  s.action = s.raw;
  for (auto& a : s.action) a = std::clamp(a, -bound, bound);
  return s;
}

// ---------------------------------------------------------------------------
// Rewards

inline double task_reward(double cmd_vx, double vx, double cmd_w, double w, double omega_v,
                          double omega_w) {
  if (omega_v < 0.0 || omega_w < 0.0) throw ConfigError("task_reward: weights must be >= 0");
  return omega_v * std::exp(-std::abs(cmd_vx - vx)) + omega_w * std::exp(-std::abs(cmd_w - w));
}

struct RegCoefs {
  double action_rate = 0.01;
  double torque = 2e-4;
  double vertical = 1.0;
  double limit = 5.0;
};

inline double regularization_reward(const Vec& action, const Vec& prev_action,
                                    const std::array<double, kActionDim>& tau, double vz,
                                    const std::array<double, kActionDim>& q_joints,
                                    const sim::RobotModel& m, const RegCoefs& c = {}) {
  double da2 = 0.0, tau2 = 0.0, lim2 = 0.0;
  for (std::size_t i = 0; i < kActionDim; ++i) {
    const double d = action[i] - prev_action[i];
    da2 += d * d;
    tau2 += tau[i] * tau[i];
    const bool thigh = (i % 2 == 0);  // joints ordered LT, LC, RT, RC
    const double lo = thigh ? m.thigh_lo : m.calf_lo;
    const double hi = thigh ? m.thigh_hi : m.calf_hi;
    const double viol = std::max({0.0, q_joints[i] - hi, lo - q_joints[i]});
    lim2 += viol * viol;
  }
  return -c.action_rate * da2 - c.torque * tau2 - c.vertical * vz * vz - c.limit * lim2;
}

inline double compose_reward(double r_task, double r_style, double r_reg) {
  return r_task + r_style + r_reg;
}

// ---------------------------------------------------------------------------
// Generalized advantage estimation

inline std::pair<Vec, Vec> gae(const Vec& rewards, const Vec& values,
                               const std::vector<std::uint8_t>& dones, double gamma,
                               double lam) {
  const std::size_t n = rewards.size();
  if (values.size() != n + 1 || dones.size() != n)
    throw ShapeError("gae: values must have length n+1 and dones length n");
  Vec adv(n, 0.0), ret(n, 0.0);
  double a = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double cont = dones[i] ? 0.0 : 1.0;
    const double delta = rewards[i] + gamma * values[i + 1] * cont - values[i];
    a = delta + gamma * lam * cont * a;
    adv[i] = a;
    ret[i] = a + values[i];
  }
  return {adv, ret};
}

// ---------------------------------------------------------------------------
// Environment

struct EnvConfig {
  terrain::Kind kind = terrain::Kind::Flat;
  double difficulty = 0.0;
  double terrain_length = 40.0;
  double cmd_vx_lo = 0.5, cmd_vx_hi = 0.5;
  double cmd_w_lo = 0.0, cmd_w_hi = 0.0;
  sim::DomainRanges dom_ranges;
  bool randomize_domain = true;
  int max_steps = 1000;
  double control_dt = 0.02;
  double init_noise = 0.03;
  // Fraction of resets drawn from the demonstration dataset (reference state
  // initialization); only effective when the env carries a dataset pointer.
  double rsi_prob = 0.5;
};

struct Env {
  sim::RobotModel model;
  EnvConfig cfg;
  terrain::HeightField field;
  sim::DomainParams dom;
  sim::SimState st;
  double cmd_vx = 0.0, cmd_w = 0.0;
  Vec prev_action = Vec(kActionDim, 0.0);
  amp::AmpState prev_amp;
  int steps_in_episode = 0;
  std::uint64_t episode_counter = 0;
  // Demonstration states for reference state initialization; starting
  // episodes mid-gait keeps the standing fixed point from becoming the
  // dominant optimum. Null (the default) falls back to the nominal pose.
  const refgen::AmpDataset* rsi_data = nullptr;
  Rng rng{0};
};

inline void reset_env(Env& e) {
  e.episode_counter += 1;
  const auto tseed = e.rng.uniform_index(std::numeric_limits<std::uint32_t>::max());
  e.field = terrain::generate_terrain(e.cfg.kind, e.cfg.difficulty,
                                      static_cast<std::uint64_t>(tseed), e.cfg.terrain_length);
  if (e.cfg.randomize_domain) {
    const auto dseed = e.rng.uniform_index(std::numeric_limits<std::uint32_t>::max());
    e.dom = sim::randomize_domain(static_cast<std::uint64_t>(dseed), e.cfg.dom_ranges);
  } else {
    e.dom = sim::DomainParams{};
  }
  e.cmd_vx = e.cfg.cmd_vx_lo + (e.cfg.cmd_vx_hi - e.cfg.cmd_vx_lo) * e.rng.uniform();
  e.cmd_w = e.cfg.cmd_w_lo + (e.cfg.cmd_w_hi - e.cfg.cmd_w_lo) * e.rng.uniform();
  e.st = sim::initial_state(e.model, e.field, 0.0);
  if (e.rsi_data && !e.rsi_data->transitions.empty() && e.rng.uniform() < e.cfg.rsi_prob) {
    const auto& frame =
        e.rsi_data->transitions[e.rng.uniform_index(e.rsi_data->transitions.size())].s.v;
    for (std::size_t i = 0; i < kActionDim; ++i) {
      e.st.q[3 + i] = frame[i];
      e.st.qd[3 + i] = frame[4 + i];
    }
    e.st.qd[0] = frame[8];
    e.st.qd[1] = frame[9];
    e.st.qd[2] = frame[10];
    e.st.q[2] = 0.0;
    e.st.q[1] = terrain::height_at(e.field, e.st.q[0]) + frame[11];
  }
  for (std::size_t i = 0; i < kActionDim; ++i)
    e.st.q[3 + i] += e.cfg.init_noise * e.rng.normal();
  e.prev_action.assign(kActionDim, 0.0);
  e.prev_amp = amp::build_amp_state(e.st, e.field);
  e.steps_in_episode = 0;
}

inline Env make_env(const sim::RobotModel& model, const EnvConfig& cfg, std::uint64_t seed) {
  Env e;
  e.model = model;
  e.cfg = cfg;
  e.rng = Rng(seed);
  reset_env(e);
  return e;
}

struct EnvStepResult {
  double r_task = 0.0, r_style = 0.0, r_reg = 0.0, reward = 0.0;
  bool done = false;
  sim::TerminationReason reason = sim::TerminationReason::None;
  int episode_length = 0;  // set when done
  amp::AmpTransition transition;
};

/// Applies one policy action at the control rate, computes the composed
/// reward, and resets the environment when the episode ends.
inline EnvStepResult env_step(Env& e, const Vec& action, const nn::Mlp* disc,
                              double style_scale, bool auto_reset = true) {
  if (action.size() != kActionDim) throw ShapeError("env_step: action must have 4 entries");
  EnvStepResult r;
  sim::PdCommand cmd;
  for (std::size_t i = 0; i < kActionDim; ++i)
    cmd.offsets[i] = std::clamp(action[i], -e.model.cmd_offset_bound, e.model.cmd_offset_bound);

  std::array<double, kActionDim> qj{}, qdj{}, tau{};
  for (std::size_t i = 0; i < kActionDim; ++i) {
    qj[i] = e.st.q[3 + i];
    qdj[i] = e.st.qd[3 + i];
  }
  tau = sim::pd_torque(cmd, qj, qdj, e.model.kp * e.dom.kp_scale, e.model.kd * e.dom.kd_scale,
                       e.model);

  bool diverged = false;
  try {
    e.st = sim::step(e.st, cmd, e.model, e.dom, e.field, e.cfg.control_dt);
  } catch (const NumericError&) {
    diverged = true;
  }
  e.steps_in_episode += 1;

  if (diverged) {
    // state is unusable; emit a degenerate but finite transition
    r.transition = {e.prev_amp, e.prev_amp, amp::Source::Agent};
  } else {
    const auto next_amp = amp::build_amp_state(e.st, e.field);
    r.transition = {e.prev_amp, next_amp, amp::Source::Agent};
    e.prev_amp = next_amp;
    r.r_task = task_reward(e.cmd_vx, e.st.qd[0], e.cmd_w, e.st.qd[2], 1.0, 0.5);
    if (disc != nullptr)
      r.r_style = style_scale * amp::style_reward(amp::discriminator_score(*disc, r.transition));
    std::array<double, kActionDim> qj2{};
    for (std::size_t i = 0; i < kActionDim; ++i) qj2[i] = e.st.q[3 + i];
    r.r_reg = regularization_reward(action, e.prev_action, tau, e.st.qd[1], qj2, e.model);
  }
  r.reward = compose_reward(r.r_task, r.r_style, r.r_reg);
  e.prev_action = action;

  const auto term = diverged ? sim::Termination{true, sim::TerminationReason::Diverged}
                             : sim::check_termination(e.st, e.model, e.dom, e.field);
  if (term.terminated || e.steps_in_episode >= e.cfg.max_steps) {
    r.done = true;
    r.reason = term.reason;
    r.episode_length = e.steps_in_episode;
    if (auto_reset) reset_env(e);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Rollouts

struct RolloutBuffer {
  std::size_t n_envs = 0, n_steps = 0;
  std::vector<Vec> proprio, priv, terr, raw_action;
  Vec log_prob, value, reward, r_task, r_style, r_reg;
  std::vector<std::uint8_t> done;
  Vec bootstrap;  // per-env value of the state after the last step
  std::vector<amp::AmpTransition> transitions;
  std::vector<int> finished_episode_lengths;

  std::size_t idx(std::size_t env, std::size_t t) const { return env * n_steps + t; }
  std::size_t size() const { return n_envs * n_steps; }

  bool finite() const {
    return all_finite(log_prob) && all_finite(value) && all_finite(reward) &&
           all_finite(bootstrap);
  }
};

inline RolloutBuffer collect_rollouts(std::vector<Env>& envs, const TeacherPolicy& policy,
                                      const nn::Mlp* disc, std::size_t n_steps,
                                      double style_scale = 1.0) {
  if (envs.empty() || n_steps == 0) throw ConfigError("collect_rollouts: empty rollout shape");
  RolloutBuffer b;
  b.n_envs = envs.size();
  b.n_steps = n_steps;
  const std::size_t n = b.size();
  b.proprio.resize(n);
  b.priv.resize(n);
  b.terr.resize(n);
  b.raw_action.resize(n);
  b.log_prob.resize(n);
  b.value.resize(n);
  b.reward.resize(n);
  b.r_task.resize(n);
  b.r_style.resize(n);
  b.r_reg.resize(n);
  b.done.resize(n);
  b.bootstrap.resize(b.n_envs);
  b.transitions.reserve(n);

  // the policy is evaluated for all envs of one timestep as a single batch
  const auto eval_batch = [&](bool store, std::size_t t, Mat& mean_out, Vec& value_out) {
    Mat xo(b.n_envs, kProprioDim), xp(b.n_envs, kPrivDim), xt(b.n_envs, kTerrainDim);
    for (std::size_t ei = 0; ei < b.n_envs; ++ei) {
      const Env& e = envs[ei];
      const Vec po = build_proprio(e.st, e.prev_action);
      const Vec pv = build_privileged(e.st, e.dom);
      const Vec te = build_terrain_obs(e.field, e.st);
      std::copy(po.begin(), po.end(), xo.row(ei));
      std::copy(pv.begin(), pv.end(), xp.row(ei));
      std::copy(te.begin(), te.end(), xt.row(ei));
      if (store) {
        const std::size_t k = b.idx(ei, t);
        b.proprio[k] = po;
        b.priv[k] = pv;
        b.terr[k] = te;
      }
    }
    const Mat le = nn::forward_batch(policy.terrain_enc, xt).first;
    const Mat lp = nn::forward_batch(policy.priv_enc, xp).first;
    Mat xtr(b.n_envs, kTrunkInDim);
    for (std::size_t ei = 0; ei < b.n_envs; ++ei) {
      std::copy(xo.row(ei), xo.row(ei) + kProprioDim, xtr.row(ei));
      std::copy(le.row(ei), le.row(ei) + kTerrainLatentDim, xtr.row(ei) + kProprioDim);
      std::copy(lp.row(ei), lp.row(ei) + kPrivLatentDim,
                xtr.row(ei) + kProprioDim + kTerrainLatentDim);
    }
    const Mat h = nn::forward_batch(policy.trunk, xtr).first;
    mean_out = nn::forward_batch(policy.action_head, h).first;
    const Mat v = nn::forward_batch(policy.value_head, h).first;
    value_out.resize(b.n_envs);
    for (std::size_t ei = 0; ei < b.n_envs; ++ei) value_out[ei] = v(ei, 0);
  };

  b.transitions.resize(n);
  Mat mean;
  Vec value;
  for (std::size_t t = 0; t < n_steps; ++t) {
    eval_batch(true, t, mean, value);
    for (std::size_t ei = 0; ei < b.n_envs; ++ei) {
      Env& e = envs[ei];
      const std::size_t k = b.idx(ei, t);
      const Vec mu(mean.row(ei), mean.row(ei) + kActionDim);
      const auto s = sample_action(mu, policy.log_std, e.rng, e.model.cmd_offset_bound);
      const auto res = env_step(e, s.action, disc, style_scale);
      b.raw_action[k] = s.raw;
      b.log_prob[k] = s.log_prob;
      b.value[k] = value[ei];
      b.reward[k] = res.reward;
      b.r_task[k] = res.r_task;
      b.r_style[k] = res.r_style;
      b.r_reg[k] = res.r_reg;
      b.done[k] = res.done ? 1 : 0;
      b.transitions[k] = res.transition;
      if (res.done) b.finished_episode_lengths.push_back(res.episode_length);
    }
  }
  // bootstrap values of the states the rollout stopped in
  eval_batch(false, 0, mean, value);
  b.bootstrap = value;
  if (!b.finite()) throw NumericError("collect_rollouts: non-finite rollout data");
  return b;
}

// ---------------------------------------------------------------------------
// PPO

struct PpoConfig {
  double clip = 0.2;
  double gamma = 0.99;
  double lam = 0.95;
  double lr = 3e-4;
  double entropy_coef = 0.005;
  double value_coef = 0.5;
  int epochs = 5;
  int minibatches = 4;
  double log_std_lo = -4.0;
  double log_std_hi = 1.0;
};

struct PpoStats {
  double kl = 0.0;
  double clip_fraction = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
};

/// Mean PPO loss and its exact parameter gradient over the given sample
/// indices. Exposed separately so the gradient can be finite-difference
/// checked end to end.
inline std::pair<double, TeacherGrad> ppo_minibatch_loss(
    const TeacherPolicy& policy, const RolloutBuffer& b, const std::vector<std::size_t>& idxs,
    const Vec& advantages, const Vec& returns, const PpoConfig& cfg, PpoStats* stats = nullptr) {
  if (idxs.empty()) throw ConfigError("ppo_minibatch_loss: empty minibatch");
  TeacherGrad g = TeacherGrad::zeros_like(policy);
  const double inv_n = 1.0 / static_cast<double>(idxs.size());
  double loss = 0.0;
  double kl = 0.0, clipped = 0.0, ploss = 0.0, vloss = 0.0;
  const double half_log_2pie = 0.5 * std::log(2.0 * M_PI * std::exp(1.0));
  double entropy = 0.0;
  for (double ls : policy.log_std) entropy += ls + half_log_2pie;

  // batched forward over the whole minibatch
  const std::size_t nb = idxs.size();
  Mat xo(nb, kProprioDim), xp(nb, kPrivDim), xt(nb, kTerrainDim);
  for (std::size_t s = 0; s < nb; ++s) {
    const std::size_t k = idxs[s];
    std::copy(b.proprio[k].begin(), b.proprio[k].end(), &xo(s, 0));
    std::copy(b.priv[k].begin(), b.priv[k].end(), &xp(s, 0));
    std::copy(b.terr[k].begin(), b.terr[k].end(), &xt(s, 0));
  }
  auto [le, t_te] = nn::forward_batch(policy.terrain_enc, xt);
  auto [lp, t_pe] = nn::forward_batch(policy.priv_enc, xp);
  Mat xtr(nb, kTrunkInDim);
  for (std::size_t s = 0; s < nb; ++s) {
    std::copy(&xo(s, 0), &xo(s, 0) + kProprioDim, &xtr(s, 0));
    std::copy(&le(s, 0), &le(s, 0) + kTerrainLatentDim, &xtr(s, kProprioDim));
    std::copy(&lp(s, 0), &lp(s, 0) + kPrivLatentDim,
              &xtr(s, kProprioDim + kTerrainLatentDim));
  }
  auto [hidden, t_tr] = nn::forward_batch(policy.trunk, xtr);
  auto [mean, t_ah] = nn::forward_batch(policy.action_head, hidden);
  auto [value, t_vh] = nn::forward_batch(policy.value_head, hidden);

  Mat dmean(nb, kActionDim), dvalue(nb, 1);
  for (std::size_t s = 0; s < nb; ++s) {
    const std::size_t k = idxs[s];
    double logp = 0.0;
    for (std::size_t i = 0; i < kActionDim; ++i) {
      const double sd = std::exp(policy.log_std[i]);
      const double z = (b.raw_action[k][i] - mean(s, i)) / sd;
      logp += -0.5 * z * z - policy.log_std[i] - 0.5 * std::log(2.0 * M_PI);
    }
    const double ratio = std::exp(logp - b.log_prob[k]);
    const double a = advantages[k];
    const bool clip_active = (a >= 0.0 && ratio > 1.0 + cfg.clip) ||
                             (a < 0.0 && ratio < 1.0 - cfg.clip);
    const double surr = clip_active
                            ? std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * a
                            : ratio * a;
    const double verr = value(s, 0) - returns[k];
    loss += inv_n * (-surr + cfg.value_coef * verr * verr - cfg.entropy_coef * entropy);
    ploss += inv_n * -surr;
    vloss += inv_n * verr * verr;
    kl += inv_n * (b.log_prob[k] - logp);
    if (clip_active) clipped += inv_n;

    // d loss / d logp flows only through the unclipped branch
    const double dlogp = clip_active ? 0.0 : inv_n * -ratio * a;
    for (std::size_t i = 0; i < kActionDim; ++i) {
      const double s2 = std::exp(2.0 * policy.log_std[i]);
      const double diff = b.raw_action[k][i] - mean(s, i);
      dmean(s, i) = dlogp * diff / s2;
      g.log_std[i] += dlogp * (diff * diff / s2 - 1.0) - inv_n * cfg.entropy_coef;
    }
    dvalue(s, 0) = inv_n * 2.0 * cfg.value_coef * verr;
  }

  Mat dh = nn::backward_batch_acc(policy.action_head, t_ah, dmean, g.ah);
  const Mat dh2 = nn::backward_batch_acc(policy.value_head, t_vh, dvalue, g.vh);
  for (std::size_t i = 0; i < dh.data().size(); ++i) dh.data()[i] += dh2.data()[i];
  const Mat dxtr = nn::backward_batch_acc(policy.trunk, t_tr, dh, g.trunk);
  Mat dle(nb, kTerrainLatentDim), dlp(nb, kPrivLatentDim);
  for (std::size_t s = 0; s < nb; ++s) {
    std::copy(dxtr.row(s) + kProprioDim, dxtr.row(s) + kProprioDim + kTerrainLatentDim, &dle(s, 0));
    std::copy(dxtr.row(s) + kProprioDim + kTerrainLatentDim,
              dxtr.row(s) + kProprioDim + kTerrainLatentDim + kPrivLatentDim, &dlp(s, 0));
  }
  nn::backward_batch_acc(policy.terrain_enc, t_te, dle, g.te);
  nn::backward_batch_acc(policy.priv_enc, t_pe, dlp, g.pe);
  if (stats != nullptr) {
    stats->kl = kl;
    stats->clip_fraction = clipped;
    stats->policy_loss = ploss;
    stats->value_loss = vloss;
    stats->entropy = entropy;
  }
  return {loss, std::move(g)};
}

struct TeacherAdam {
  nn::AdamState te, pe, trunk, ah, vh;
  Vec m_ls, v_ls;
  long step_ls = 0;

  static TeacherAdam make(const TeacherPolicy& p, double lr) {
    TeacherAdam a;
    a.te = nn::AdamState::make(p.terrain_enc, lr);
    a.pe = nn::AdamState::make(p.priv_enc, lr);
    a.trunk = nn::AdamState::make(p.trunk, lr);
    a.ah = nn::AdamState::make(p.action_head, lr);
    a.vh = nn::AdamState::make(p.value_head, lr);
    a.m_ls.assign(kActionDim, 0.0);
    a.v_ls.assign(kActionDim, 0.0);
    return a;
  }
};

inline void teacher_adam_step(TeacherPolicy& p, const TeacherGrad& g, TeacherAdam& a,
                              const PpoConfig& cfg) {
  if (!g.finite()) throw NumericError("teacher_adam_step: non-finite gradient");
  nn::adam_step(p.terrain_enc, g.te, a.te);
  nn::adam_step(p.priv_enc, g.pe, a.pe);
  nn::adam_step(p.trunk, g.trunk, a.trunk);
  nn::adam_step(p.action_head, g.ah, a.ah);
  nn::adam_step(p.value_head, g.vh, a.vh);
  a.step_ls += 1;
  const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(a.step_ls));
  const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(a.step_ls));
  for (std::size_t i = 0; i < kActionDim; ++i) {
    a.m_ls[i] = 0.9 * a.m_ls[i] + 0.1 * g.log_std[i];
    a.v_ls[i] = 0.999 * a.v_ls[i] + 0.001 * g.log_std[i] * g.log_std[i];
    p.log_std[i] -= a.te.lr * (a.m_ls[i] / bc1) / (std::sqrt(a.v_ls[i] / bc2) + 1e-8);
    p.log_std[i] = std::clamp(p.log_std[i], cfg.log_std_lo, cfg.log_std_hi);
  }
}

/// Computes per-env GAE with bootstrap, normalizes advantages over the
/// batch, then runs clipped-surrogate epochs over shuffled minibatches.
inline PpoStats ppo_update(TeacherPolicy& policy, const RolloutBuffer& b, TeacherAdam& adam,
                           const PpoConfig& cfg, Rng& rng) {
  if (!b.finite()) throw NumericError("ppo_update: non-finite rollout data");
  const std::size_t n = b.size();
  Vec advantages(n), returns(n);
  for (std::size_t ei = 0; ei < b.n_envs; ++ei) {
    Vec r(b.n_steps), v(b.n_steps + 1);
    std::vector<std::uint8_t> d(b.n_steps);
    for (std::size_t t = 0; t < b.n_steps; ++t) {
      const std::size_t k = b.idx(ei, t);
      r[t] = b.reward[k];
      v[t] = b.value[k];
      d[t] = b.done[k];
    }
    v[b.n_steps] = b.bootstrap[ei];
    auto [adv, ret] = gae(r, v, d, cfg.gamma, cfg.lam);
    for (std::size_t t = 0; t < b.n_steps; ++t) {
      advantages[b.idx(ei, t)] = adv[t];
      returns[b.idx(ei, t)] = ret[t];
    }
  }
  double mu = 0.0;
  for (double a : advantages) mu += a;
  mu /= static_cast<double>(n);
  double var = 0.0;
  for (double a : advantages) var += (a - mu) * (a - mu);
  const double sd = std::sqrt(var / static_cast<double>(n));
  for (auto& a : advantages) a = (a - mu) / (sd + 1e-8);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  PpoStats stats;
  int n_updates = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // seeded Fisher-Yates shuffle
    for (std::size_t i = n; i-- > 1;) {
      const auto j = rng.uniform_index(i + 1);
      std::swap(order[i], order[static_cast<std::size_t>(j)]);
    }
    const std::size_t mb = std::max<std::size_t>(
        1, n / static_cast<std::size_t>(std::max(1, cfg.minibatches)));
    for (std::size_t start = 0; start + mb <= n; start += mb) {
      std::vector<std::size_t> idxs(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(start + mb));
      PpoStats mstats;
      auto [loss, g] = ppo_minibatch_loss(policy, b, idxs, advantages, returns, cfg, &mstats);
      if (!std::isfinite(loss)) throw NumericError("ppo_update: non-finite loss");
      teacher_adam_step(policy, g, adam, cfg);
      stats.kl += mstats.kl;
      stats.clip_fraction += mstats.clip_fraction;
      stats.policy_loss += mstats.policy_loss;
      stats.value_loss += mstats.value_loss;
      stats.entropy += mstats.entropy;
      ++n_updates;
    }
  }
  if (n_updates > 0) {
    const double inv = 1.0 / n_updates;
    stats.kl *= inv;
    stats.clip_fraction *= inv;
    stats.policy_loss *= inv;
    stats.value_loss *= inv;
    stats.entropy *= inv;
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Checkpointing

inline std::vector<NamedArray> teacher_arrays(const TeacherPolicy& p) {
  std::vector<NamedArray> arrays;
  append_mlp_arrays(arrays, p.terrain_enc);
  append_mlp_arrays(arrays, p.priv_enc);
  append_mlp_arrays(arrays, p.trunk);
  append_mlp_arrays(arrays, p.action_head);
  append_mlp_arrays(arrays, p.value_head);
  arrays.push_back({"log_std", 1, kActionDim, "param", p.log_std});
  return arrays;
}

inline void save_teacher(const std::string& path, const TeacherPolicy& p) {
  save_checkpoint(path, teacher_arrays(p));
}

inline TeacherPolicy load_teacher(const std::string& path) {
  const auto arrays = load_checkpoint(path);
  TeacherPolicy p;
  p.terrain_enc = mlp_from_arrays(arrays, "t_enc");
  p.priv_enc = mlp_from_arrays(arrays, "p_enc");
  p.trunk = mlp_from_arrays(arrays, "trunk");
  p.action_head = mlp_from_arrays(arrays, "a_head");
  p.value_head = mlp_from_arrays(arrays, "v_head");
  p.log_std = find_array(arrays, "log_std").data;
  p.check();
  return p;
}

// ---------------------------------------------------------------------------
// Teacher training loop

struct TrainConfig {
  int iterations = 2000;
  int n_envs = 64;
  int n_steps = 100;
  double style_scale = 1.0;
  int disc_updates = 2;
  int disc_batch = 256;
  double disc_lr = 1e-4;
  double alpha_gp = 10.0;
  std::size_t agent_buffer_capacity = 100000;
  PpoConfig ppo;
  EnvConfig env;
  std::uint64_t seed = 0;
  std::string log_path;         // training-log CSV; empty = no log
  std::string checkpoint_path;  // teacher checkpoint; empty = no checkpoint
  int checkpoint_every = 500;
  // optional early stop once rolling metrics clear both thresholds (0 = off)
  double stop_ep_len = 0.0;
  double stop_style = 0.0;
};

struct TrainResult {
  int iterations_run = 0;
  double mean_episode_length = 0.0;
  double mean_style = 0.0;
  double mean_task = 0.0;
  TeacherPolicy policy;
  nn::Mlp discriminator;
};

inline double mean_of(const std::deque<double>& d) {
  if (d.empty()) return 0.0;
  double s = 0.0;
  for (double v : d) s += v;
  return s / static_cast<double>(d.size());
}

inline TrainResult train_teacher(const refgen::AmpDataset& demo, const TrainConfig& cfg) {
  if (cfg.n_envs <= 0 || cfg.n_steps <= 0 || cfg.iterations <= 0)
    throw ConfigError("train_teacher: rollout shape and iteration count must be positive");
  Rng rng(cfg.seed);
  TrainResult out;
  out.policy = make_teacher(rng);
  out.discriminator = amp::make_discriminator(rng);
  auto adam = TeacherAdam::make(out.policy, cfg.ppo.lr);
  auto disc_adam = nn::AdamState::make(out.discriminator, cfg.disc_lr);
  amp::AgentTransitionBuffer agent_buf(cfg.agent_buffer_capacity);

  sim::RobotModel model;
  std::vector<Env> envs;
  envs.reserve(static_cast<std::size_t>(cfg.n_envs));
  for (int i = 0; i < cfg.n_envs; ++i) {
    Env e;
    e.model = model;
    e.cfg = cfg.env;
    e.rsi_data = &demo;
    e.rng = Rng(cfg.seed * 7919 + static_cast<std::uint64_t>(i) + 1);
    reset_env(e);
    envs.push_back(std::move(e));
  }

  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path);
    if (!log) throw IoError("train_teacher: cannot open log file " + cfg.log_path);
    log << "iteration,mean_task,mean_style,mean_reg,mean_episode_length,disc_demo_score,"
           "disc_agent_score,kl,clip_fraction,entropy\n";
  }

  std::deque<double> ep_len_window;   // last completed episode lengths
  std::deque<double> style_window;    // per-iteration mean style reward
  char row[512];

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    auto buf = collect_rollouts(envs, out.policy, &out.discriminator,
                                static_cast<std::size_t>(cfg.n_steps), cfg.style_scale);
    for (const auto& tr : buf.transitions) agent_buf.push(tr);

    double demo_score = 0.0, agent_score = 0.0;
    for (int u = 0; u < cfg.disc_updates; ++u) {
      const auto db = demo.sample(static_cast<std::size_t>(cfg.disc_batch), rng);
      const auto ab = agent_buf.sample(static_cast<std::size_t>(cfg.disc_batch), rng);
      auto [dloss, dgrad] = amp::discriminator_loss(out.discriminator, db, ab, cfg.alpha_gp);
      nn::adam_step(out.discriminator, dgrad, disc_adam);
      if (u == cfg.disc_updates - 1) {
        for (const auto& tr : db)
          demo_score += amp::discriminator_score(out.discriminator, tr) / cfg.disc_batch;
        for (const auto& tr : ab)
          agent_score += amp::discriminator_score(out.discriminator, tr) / cfg.disc_batch;
      }
    }

    const auto stats = ppo_update(out.policy, buf, adam, cfg.ppo, rng);

    const double inv_n = 1.0 / static_cast<double>(buf.size());
    double mtask = 0.0, mstyle = 0.0, mreg = 0.0;
    for (std::size_t k = 0; k < buf.size(); ++k) {
      mtask += buf.r_task[k] * inv_n;
      mstyle += buf.r_style[k] * inv_n;
      mreg += buf.r_reg[k] * inv_n;
    }
    for (int len : buf.finished_episode_lengths) {
      ep_len_window.push_back(static_cast<double>(len));
      if (ep_len_window.size() > 64) ep_len_window.pop_front();
    }
    style_window.push_back(mstyle);
    if (style_window.size() > 10) style_window.pop_front();
    const double mean_len = mean_of(ep_len_window);

    out.iterations_run = iter + 1;
    out.mean_episode_length = mean_len;
    out.mean_style = mean_of(style_window);
    out.mean_task = mtask;

    if (log.is_open()) {
      std::snprintf(row, sizeof(row),
                    "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", iter, mtask,
                    mstyle, mreg, mean_len, demo_score, agent_score, stats.kl,
                    stats.clip_fraction, stats.entropy);
      log << row;
    }
    if (!cfg.checkpoint_path.empty() &&
        ((iter + 1) % cfg.checkpoint_every == 0 || iter + 1 == cfg.iterations))
      save_teacher(cfg.checkpoint_path, out.policy);

    if (cfg.stop_ep_len > 0.0 && cfg.stop_style > 0.0 && ep_len_window.size() >= 32 &&
        mean_len >= cfg.stop_ep_len && out.mean_style >= cfg.stop_style) {
      if (!cfg.checkpoint_path.empty()) save_teacher(cfg.checkpoint_path, out.policy);
      break;
    }
  }
  if (log.is_open() && !log) throw IoError("train_teacher: log write failed");
  return out;
}

}  // namespace bip::trainer
