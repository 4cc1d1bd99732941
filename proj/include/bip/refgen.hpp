#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bip/amp.hpp"
#include "bip/errors.hpp"
#include "bip/linalg.hpp"
#include "bip/sim.hpp"
#include "bip/terrain.hpp"

namespace bip::refgen {

struct ReachError : std::runtime_error {
  explicit ReachError(const std::string& msg) : std::runtime_error(msg) {}
};

struct OptimizationFailed : NumericError {
  OptimizationFailed(const std::string& msg, double defect, double violation)
      : NumericError(msg), best_defect(defect), best_violation(violation) {}
  double best_defect;
  double best_violation;
};

// ---------------------------------------------------------------------------
// Gait schedules

struct PhaseInterval {
  bool stance = true;
  double duration = 0.0;
};

struct GaitSchedule {
  double duration = 2.4;  // s
  std::array<std::vector<PhaseInterval>, 2> phases;  // per foot, ordered
  double command_vx = 0.0;                           // m/s

  void validate() const {
    if (!(duration > 0.0)) throw ConfigError("GaitSchedule: duration must be positive");
    for (const auto& foot : phases) {
      if (foot.empty()) throw ConfigError("GaitSchedule: empty phase list");
      double sum = 0.0;
      for (const auto& p : foot) {
        if (!(p.duration > 0.0)) throw ConfigError("GaitSchedule: phase durations must be positive");
        sum += p.duration;
      }
      if (std::abs(sum - duration) > 1e-9)
        throw ConfigError("GaitSchedule: phase durations must sum to the total duration");
    }
  }

  bool in_stance(int foot, double t) const {
    t = std::clamp(t, 0.0, duration - 1e-12);
    double acc = 0.0;
    for (const auto& p : phases[static_cast<std::size_t>(foot)]) {
      acc += p.duration;
      if (t < acc) return p.stance;
    }
    return phases[static_cast<std::size_t>(foot)].back().stance;
  }
};

inline GaitSchedule make_stand(double duration) {
  GaitSchedule s;
  s.duration = duration;
  s.command_vx = 0.0;
  s.phases[0] = {{true, duration}};
  s.phases[1] = {{true, duration}};
  return s;
}

/// Periodic schedule: each foot is in stance for the first duty fraction
/// of its (phase-shifted) period.
inline GaitSchedule make_periodic(double duration, double period, double duty, double vx) {
  GaitSchedule s;
  s.duration = duration;
  s.command_vx = vx;
  const std::array<double, 2> offsets{0.0, 0.5 * period};
  for (int foot = 0; foot < 2; ++foot) {
    const double off = offsets[static_cast<std::size_t>(foot)];
    // closed-form breakpoints: stance windows are
    // [n*period - off, n*period - off + duty*period) for integer n
    std::vector<double> cuts{0.0, duration};
    const int n_lo = static_cast<int>(std::floor(off / period)) - 1;
    const int n_hi = static_cast<int>(std::ceil((duration + off) / period)) + 1;
    for (int n = n_lo; n <= n_hi; ++n) {
      for (double b : {n * period - off, n * period - off + duty * period})
        if (b > 1e-9 && b < duration - 1e-9) cuts.push_back(b);
    }
    std::sort(cuts.begin(), cuts.end());
    auto stance_at = [&](double t) {
      const double u = t + off;
      const double ph = u - period * std::floor(u / period);
      return ph < duty * period;
    };
    auto& list = s.phases[static_cast<std::size_t>(foot)];
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
      const double seg = cuts[i + 1] - cuts[i];
      if (seg < 1e-9) continue;
      const bool st = stance_at(0.5 * (cuts[i] + cuts[i + 1]));  // midpoint: no boundary ambiguity
      if (!list.empty() && list.back().stance == st)
        list.back().duration += seg;
      else
        list.push_back({st, seg});
    }
  }
  s.validate();
  return s;
}

inline GaitSchedule make_walk(double vx, double duration = 2.4) {
  return make_periodic(duration, 0.6, 0.65, vx);
}

inline GaitSchedule make_run(double vx, double duty, double duration = 2.4) {
  return make_periodic(duration, 0.5, duty, vx);
}

// ---------------------------------------------------------------------------
// Inverse kinematics (two-link planar leg, knee-backward branch)

struct JointPair {
  double thigh = 0.0;
  double calf = 0.0;
};

inline JointPair inverse_kinematics(const sim::RobotModel& m, double hip_x, double hip_z,
                                    double theta, const std::array<double, 2>& foot) {
  const double l1 = m.thigh_length, l2 = m.calf_length;
  const double dx = foot[0] - hip_x;
  const double dz = foot[1] - hip_z;
  const double r = std::hypot(dx, dz);
  if (r > l1 + l2 + 1e-9)
    throw ReachError("inverse_kinematics: target at distance " + std::to_string(r) +
                     " exceeds leg length " + std::to_string(l1 + l2));
  if (r < std::abs(l1 - l2) - 1e-9)
    throw ReachError("inverse_kinematics: target too close to the hip");
  double c = (r * r - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
  c = std::clamp(c, -1.0, 1.0);
  const double q_calf = -std::acos(c);  // knee-backward branch
  const double gamma = std::atan2(dx, -dz);
  const double beta = std::atan2(l2 * std::sin(q_calf), l1 + l2 * std::cos(q_calf));
  const double q_thigh = gamma - beta - theta;
  return {q_thigh, q_calf};
}

// ---------------------------------------------------------------------------
// SRBD trajectory optimization

struct SrbdParams {
  double mass = 0.0;
  double inertia = 0.0;       // about COM
  double com_offset_z = 0.0;  // COM height above the hip at nominal pose
};

inline SrbdParams srbd_params(const sim::RobotModel& m) {
  Vec q(sim::kNq, 0.0);
  for (std::size_t i = 0; i < sim::kNumJoints; ++i) q[3 + i] = m.nominal_joints[i];
  const auto kin = sim::detail::kinematics(q, m, sim::DomainParams{});
  SrbdParams p;
  double mz = 0.0;
  for (std::size_t b = 0; b < sim::detail::Kinematics::kNumBodies; ++b) {
    p.mass += kin.mass[b];
    mz += kin.mass[b] * kin.pos[b][1];
  }
  const double com_z = mz / p.mass;
  for (std::size_t b = 0; b < sim::detail::Kinematics::kNumBodies; ++b) {
    const double d2 = (kin.pos[b][0]) * (kin.pos[b][0]) +
                      (kin.pos[b][1] - com_z) * (kin.pos[b][1] - com_z);
    p.inertia += kin.inertia[b] + kin.mass[b] * d2;
  }
  p.com_offset_z = com_z;  // q was built with the hip at the origin
  return p;
}

struct SrbdTrajectory {
  double dt = 1.0 / 30.0;
  std::vector<double> t;
  std::vector<std::array<double, 3>> base;  // x, z, theta at knots
  std::array<std::vector<std::array<double, 2>>, 2> foot;
  std::array<std::vector<std::array<double, 2>>, 2> force;
  std::array<std::vector<bool>, 2> stance;
  double max_dynamics_defect = 0.0;
  double max_constraint_violation = 0.0;
  GaitSchedule schedule;
  terrain::HeightField field;

  double duration() const { return t.empty() ? 0.0 : t.back(); }
};

struct OptimizeOptions {
  double knot_rate = 30.0;  // collocation points per second
  int max_iters = 250;
  double defect_tol = 5e-4;
  double z_ref = 0.38;        // hip height target
  double swing_height = 0.06;  // foot lift
  double mu = 0.7;
  double reach_margin = 0.015;
  double max_speed = 2.0;
  // residual weights
  double w_dyn = 100.0;
  double w_stance = 100.0;
  double w_swing_force = 100.0;
  double w_cone = 100.0;
  double w_track = 2.0;
  double w_z = 2.0;
  double w_theta = 2.0;
  double w_pin = 100.0;
  double w_swing_z = 30.0;
  double w_foot_acc = 2.0;
  double w_force_smooth = 0.02;
  double w_reach = 100.0;
  double w_foot_center = 0.05;
};

namespace detail {

// variable layout per knot
inline constexpr int kVarsPerKnot = 11;
inline constexpr int kX = 0, kZ = 1, kTh = 2;
inline constexpr int kPx[2] = {3, 5};
inline constexpr int kPz[2] = {4, 6};
inline constexpr int kFx[2] = {7, 9};
inline constexpr int kFz[2] = {8, 10};

struct Row {
  double r = 0.0;
  std::vector<std::pair<int, double>> j;
};

struct Problem {
  const sim::RobotModel* model;
  const GaitSchedule* sched;
  const terrain::HeightField* field;
  const OptimizeOptions* opt;
  SrbdParams srbd;
  int n_knots;
  double dt;
  std::vector<std::array<bool, 2>> stance;  // per knot

  int idx(int k, int v) const { return k * kVarsPerKnot + v; }
};

/// Foothold sequence and swing interpolation used for the initial guess.
inline std::array<double, 2> guess_foot(const Problem& pb, int foot, double t) {
  const auto& ph = pb.sched->phases[static_cast<std::size_t>(foot)];
  std::vector<std::array<double, 2>> intervals;  // (start, end) of stance
  double acc = 0.0;
  for (const auto& p : ph) {
    if (p.stance) intervals.push_back({acc, acc + p.duration});
    acc += p.duration;
  }
  const double v = pb.sched->command_vx;
  auto hold_x = [&](const std::array<double, 2>& iv) { return v * 0.5 * (iv[0] + iv[1]); };
  const double ground = pb.model->foot_radius;
  if (intervals.empty()) return {v * t, ground};
  for (std::size_t i = 0; i < intervals.size(); ++i) {
    if (t <= intervals[i][1]) {
      if (t >= intervals[i][0]) return {hold_x(intervals[i]), ground};
      // swing toward interval i
      const double prev_x = (i == 0) ? 0.0 : hold_x(intervals[i - 1]);
      const double t0 = (i == 0) ? 0.0 : intervals[i - 1][1];
      const double s = (t - t0) / std::max(1e-9, intervals[i][0] - t0);
      const double x = prev_x + (hold_x(intervals[i]) - prev_x) * 0.5 * (1.0 - std::cos(M_PI * s));
      return {x, ground + pb.opt->swing_height * std::sin(M_PI * s)};
    }
  }
  return {hold_x(intervals.back()), ground};
}

inline std::vector<Row> build_residuals(const Problem& pb, const Vec& v) {
  const auto& o = *pb.opt;
  const double dt = pb.dt;
  const double inv_dt2 = 1.0 / (dt * dt);
  const double m = pb.srbd.mass;
  const double inertia = pb.srbd.inertia;
  const double c0 = pb.srbd.com_offset_z;
  const int n = pb.n_knots;
  std::vector<Row> rows;
  rows.reserve(static_cast<std::size_t>(n) * 20);

  auto add = [&](double r, std::initializer_list<std::pair<int, double>> j) {
    rows.push_back({r, std::vector<std::pair<int, double>>(j)});
  };

  // pin the starting base position
  add(o.w_pin * v[pb.idx(0, kX)], {{pb.idx(0, kX), o.w_pin}});

  for (int k = 0; k < n; ++k) {
    const double t = k * dt;
    const double x = v[pb.idx(k, kX)];
    const double z = v[pb.idx(k, kZ)];
    const double th = v[pb.idx(k, kTh)];

    // command tracking and posture regularizers
    if (k + 1 < n) {
      const double r = o.w_track * ((v[pb.idx(k + 1, kX)] - x) / dt - pb.sched->command_vx);
      add(r, {{pb.idx(k + 1, kX), o.w_track / dt}, {pb.idx(k, kX), -o.w_track / dt}});
    }
    add(o.w_z * (z - (terrain::height_at(*pb.field, x) + o.z_ref)), {{pb.idx(k, kZ), o.w_z}});
    add(o.w_theta * th, {{pb.idx(k, kTh), o.w_theta}});

    for (int f = 0; f < 2; ++f) {
      const bool st = pb.stance[static_cast<std::size_t>(k)][static_cast<std::size_t>(f)];
      const double px = v[pb.idx(k, kPx[f])];
      const double pz = v[pb.idx(k, kPz[f])];
      const double fx = v[pb.idx(k, kFx[f])];
      const double fz = v[pb.idx(k, kFz[f])];

      if (st) {
        // foot on the ground, zero slip, admissible force
        const double ground = terrain::height_at(*pb.field, px) + pb.model->foot_radius;
        add(o.w_stance * (pz - ground), {{pb.idx(k, kPz[f]), o.w_stance}});
        if (k + 1 < n && pb.stance[static_cast<std::size_t>(k + 1)][static_cast<std::size_t>(f)]) {
          for (int c = 0; c < 2; ++c) {
            const int vi = (c == 0) ? kPx[f] : kPz[f];
            add(o.w_stance * (v[pb.idx(k + 1, vi)] - v[pb.idx(k, vi)]),
                {{pb.idx(k + 1, vi), o.w_stance}, {pb.idx(k, vi), -o.w_stance}});
          }
        }
        if (fz < 0.0) add(-o.w_cone * fz, {{pb.idx(k, kFz[f]), -o.w_cone}});
        const double cone = std::abs(fx) - o.mu * fz;
        if (cone > 0.0) {
          const double sg = fx >= 0.0 ? 1.0 : -1.0;
          add(o.w_cone * cone,
              {{pb.idx(k, kFx[f]), o.w_cone * sg}, {pb.idx(k, kFz[f]), -o.w_cone * o.mu}});
        }
      } else {
        // swing: zero force, height profile, weak centering
        add(o.w_swing_force * fx, {{pb.idx(k, kFx[f]), o.w_swing_force}});
        add(o.w_swing_force * fz, {{pb.idx(k, kFz[f]), o.w_swing_force}});
        const auto target = guess_foot(pb, f, t);
        add(o.w_swing_z * (pz - target[1]), {{pb.idx(k, kPz[f]), o.w_swing_z}});
        add(o.w_foot_center * (px - x),
            {{pb.idx(k, kPx[f]), o.w_foot_center}, {pb.idx(k, kX), -o.w_foot_center}});
      }

      // kinematic reach (soft hinge)
      const double dx = px - x, dz = pz - z;
      const double dist = std::hypot(dx, dz);
      const double limit = pb.model->thigh_length + pb.model->calf_length - o.reach_margin;
      if (dist > limit && dist > 1e-9) {
        const double ux = dx / dist, uz = dz / dist;
        add(o.w_reach * (dist - limit), {{pb.idx(k, kPx[f]), o.w_reach * ux},
                                         {pb.idx(k, kPz[f]), o.w_reach * uz},
                                         {pb.idx(k, kX), -o.w_reach * ux},
                                         {pb.idx(k, kZ), -o.w_reach * uz}});
      }

      // smoothness
      if (k + 1 < n) {
        for (int c = 0; c < 2; ++c) {
          const int vi = (c == 0) ? kFx[f] : kFz[f];
          add(o.w_force_smooth * (v[pb.idx(k + 1, vi)] - v[pb.idx(k, vi)]),
              {{pb.idx(k + 1, vi), o.w_force_smooth}, {pb.idx(k, vi), -o.w_force_smooth}});
        }
      }
      if (k >= 1 && k + 1 < n) {
        for (int c = 0; c < 2; ++c) {
          const int vi = (c == 0) ? kPx[f] : kPz[f];
          add(o.w_foot_acc *
                  (v[pb.idx(k + 1, vi)] - 2.0 * v[pb.idx(k, vi)] + v[pb.idx(k - 1, vi)]),
              {{pb.idx(k + 1, vi), o.w_foot_acc},
               {pb.idx(k, vi), -2.0 * o.w_foot_acc},
               {pb.idx(k - 1, vi), o.w_foot_acc}});
        }
      }
    }

    // SRBD dynamics defects at interior knots
    if (k >= 1 && k + 1 < n) {
      const double xdd = (v[pb.idx(k + 1, kX)] - 2.0 * x + v[pb.idx(k - 1, kX)]) * inv_dt2;
      const double zdd = (v[pb.idx(k + 1, kZ)] - 2.0 * z + v[pb.idx(k - 1, kZ)]) * inv_dt2;
      const double thdd = (v[pb.idx(k + 1, kTh)] - 2.0 * th + v[pb.idx(k - 1, kTh)]) * inv_dt2;
      double sum_fx = 0.0, sum_fz = 0.0, torque = 0.0;
      Row rx, rz, rt;
      auto addj = [](Row& row, int i, double d) { row.j.push_back({i, d}); };
      for (int c = -1; c <= 1; ++c) {
        const double w2 = (c == 0 ? -2.0 : 1.0) * inv_dt2;
        addj(rx, pb.idx(k + c, kX), pb.opt->w_dyn * m * w2);
        addj(rz, pb.idx(k + c, kZ), pb.opt->w_dyn * m * w2);
        addj(rt, pb.idx(k + c, kTh), pb.opt->w_dyn * inertia * w2);
      }
      const double com_x = x;
      const double com_z = z + c0;
      for (int f = 0; f < 2; ++f) {
        if (!pb.stance[static_cast<std::size_t>(k)][static_cast<std::size_t>(f)]) continue;
        const double px = v[pb.idx(k, kPx[f])];
        const double pz = v[pb.idx(k, kPz[f])];
        const double fx = v[pb.idx(k, kFx[f])];
        const double fz = v[pb.idx(k, kFz[f])];
        sum_fx += fx;
        sum_fz += fz;
        torque += (px - com_x) * fz - (pz - com_z) * fx;
        addj(rx, pb.idx(k, kFx[f]), -pb.opt->w_dyn);
        addj(rz, pb.idx(k, kFz[f]), -pb.opt->w_dyn);
        addj(rt, pb.idx(k, kPx[f]), -pb.opt->w_dyn * fz);
        addj(rt, pb.idx(k, kFz[f]), -pb.opt->w_dyn * (px - com_x));
        addj(rt, pb.idx(k, kPz[f]), pb.opt->w_dyn * fx);
        addj(rt, pb.idx(k, kFx[f]), pb.opt->w_dyn * (pz - com_z));
        addj(rt, pb.idx(k, kX), pb.opt->w_dyn * fz);
        addj(rt, pb.idx(k, kZ), -pb.opt->w_dyn * fx);
      }
      rx.r = pb.opt->w_dyn * (m * xdd - sum_fx);
      rz.r = pb.opt->w_dyn * (m * zdd - sum_fz + m * sim::kGravity);
      rt.r = pb.opt->w_dyn * (inertia * thdd - torque);
      rows.push_back(std::move(rx));
      rows.push_back(std::move(rz));
      rows.push_back(std::move(rt));
    }
  }
  return rows;
}

inline double cost_of(const std::vector<Row>& rows) {
  double c = 0.0;
  for (const auto& r : rows) c += r.r * r.r;
  return c;
}

/// Direct re-evaluation of the physical residuals (unweighted, SI).
inline std::pair<double, double> evaluate_defects(const Problem& pb, const Vec& v) {
  const double inv_dt2 = 1.0 / (pb.dt * pb.dt);
  const double m = pb.srbd.mass;
  double defect = 0.0, violation = 0.0;
  for (int k = 0; k < pb.n_knots; ++k) {
    for (int f = 0; f < 2; ++f) {
      const bool st = pb.stance[static_cast<std::size_t>(k)][static_cast<std::size_t>(f)];
      const double fx = v[pb.idx(k, kFx[f])];
      const double fz = v[pb.idx(k, kFz[f])];
      if (st) {
        violation = std::max(violation, -fz);
        violation = std::max(violation, std::abs(fx) - pb.opt->mu * fz);
        const double ground =
            terrain::height_at(*pb.field, v[pb.idx(k, kPx[f])]) + pb.model->foot_radius;
        violation = std::max(violation, std::abs(v[pb.idx(k, kPz[f])] - ground));
      } else {
        violation = std::max(violation, std::abs(fx));
        violation = std::max(violation, std::abs(fz));
      }
    }
    if (k < 1 || k + 1 >= pb.n_knots) continue;
    double sum_fx = 0.0, sum_fz = 0.0, torque = 0.0;
    const double com_x = v[pb.idx(k, kX)];
    const double com_z = v[pb.idx(k, kZ)] + pb.srbd.com_offset_z;
    for (int f = 0; f < 2; ++f) {
      if (!pb.stance[static_cast<std::size_t>(k)][static_cast<std::size_t>(f)]) continue;
      const double fx = v[pb.idx(k, kFx[f])];
      const double fz = v[pb.idx(k, kFz[f])];
      sum_fx += fx;
      sum_fz += fz;
      torque += (v[pb.idx(k, kPx[f])] - com_x) * fz - (v[pb.idx(k, kPz[f])] - com_z) * fx;
    }
    const double xdd =
        (v[pb.idx(k + 1, kX)] - 2.0 * v[pb.idx(k, kX)] + v[pb.idx(k - 1, kX)]) * inv_dt2;
    const double zdd =
        (v[pb.idx(k + 1, kZ)] - 2.0 * v[pb.idx(k, kZ)] + v[pb.idx(k - 1, kZ)]) * inv_dt2;
    const double thdd =
        (v[pb.idx(k + 1, kTh)] - 2.0 * v[pb.idx(k, kTh)] + v[pb.idx(k - 1, kTh)]) * inv_dt2;
    defect = std::max(defect, std::abs(m * xdd - sum_fx));
    defect = std::max(defect, std::abs(m * zdd - sum_fz + m * sim::kGravity));
    defect = std::max(defect, std::abs(pb.srbd.inertia * thdd - torque));
  }
  return {defect, violation};
}

}  // namespace detail

/// Solves the phase-based SRBD trajectory optimization with damped
/// Gauss-Newton on a soft-constrained least-squares transcription.
inline SrbdTrajectory optimize_gait(const sim::RobotModel& model, const GaitSchedule& schedule,
                                    const terrain::HeightField& field,
                                    const OptimizeOptions& opt = {}) {
  schedule.validate();
  if (std::abs(schedule.command_vx) > opt.max_speed)
    throw ConfigError("optimize_gait: command speed outside the supported envelope");

  detail::Problem pb;
  pb.model = &model;
  pb.sched = &schedule;
  pb.field = &field;
  pb.opt = &opt;
  pb.srbd = srbd_params(model);
  pb.dt = 1.0 / opt.knot_rate;
  pb.n_knots = static_cast<int>(std::lround(schedule.duration * opt.knot_rate)) + 1;
  pb.stance.resize(static_cast<std::size_t>(pb.n_knots));
  for (int k = 0; k < pb.n_knots; ++k)
    for (int f = 0; f < 2; ++f)
      pb.stance[static_cast<std::size_t>(k)][static_cast<std::size_t>(f)] =
          schedule.in_stance(f, k * pb.dt);

  const int nv = pb.n_knots * detail::kVarsPerKnot;
  Vec v(static_cast<std::size_t>(nv), 0.0);
  // initial guess
  for (int k = 0; k < pb.n_knots; ++k) {
    const double t = k * pb.dt;
    v[pb.idx(k, detail::kX)] = schedule.command_vx * t;
    v[pb.idx(k, detail::kZ)] =
        terrain::height_at(field, schedule.command_vx * t) + opt.z_ref;
    int n_stance = 0;
    for (int f = 0; f < 2; ++f)
      if (pb.stance[static_cast<std::size_t>(k)][static_cast<std::size_t>(f)]) ++n_stance;
    for (int f = 0; f < 2; ++f) {
      const auto fp = detail::guess_foot(pb, f, t);
      v[pb.idx(k, detail::kPx[f])] = fp[0];
      v[pb.idx(k, detail::kPz[f])] = terrain::height_at(field, fp[0]) + fp[1];
      if (pb.stance[static_cast<std::size_t>(k)][static_cast<std::size_t>(f)])
        v[pb.idx(k, detail::kFz[f])] = pb.srbd.mass * sim::kGravity / n_stance;
    }
  }

  // damped Gauss-Newton (Levenberg-Marquardt style lambda adaptation)
  double lambda = 1e-4;
  auto rows = detail::build_residuals(pb, v);
  double cost = detail::cost_of(rows);
  double prev_cost = cost;
  for (int iter = 0; iter < opt.max_iters; ++iter) {
    Mat h(static_cast<std::size_t>(nv), static_cast<std::size_t>(nv));
    Vec g(static_cast<std::size_t>(nv), 0.0);
    for (const auto& row : rows) {
      for (const auto& [i, di] : row.j) {
        g[static_cast<std::size_t>(i)] += di * row.r;
        for (const auto& [jx, dj] : row.j)
          if (jx >= i) h(static_cast<std::size_t>(i), static_cast<std::size_t>(jx)) += di * dj;
      }
    }
    for (int i = 0; i < nv; ++i)
      for (int jx = 0; jx < i; ++jx)
        h(static_cast<std::size_t>(i), static_cast<std::size_t>(jx)) =
            h(static_cast<std::size_t>(jx), static_cast<std::size_t>(i));

    bool accepted = false;
    for (int attempt = 0; attempt < 8; ++attempt) {
      Mat hl = h;
      for (int i = 0; i < nv; ++i)
        hl(static_cast<std::size_t>(i), static_cast<std::size_t>(i)) += lambda;
      Vec delta;
      try {
        Vec ng(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) ng[i] = -g[i];
        // residuals couple knots k-1..k+1 only, so the normal matrix is
        // banded with half-bandwidth 3 * kVarsPerKnot - 1
        delta = cholesky_solve_banded(hl, ng, 3 * detail::kVarsPerKnot - 1);
      } catch (const NumericError&) {
        lambda *= 10.0;
        continue;
      }
      Vec v_try = v;
      axpy(1.0, delta, v_try);
      auto rows_try = detail::build_residuals(pb, v_try);
      const double cost_try = detail::cost_of(rows_try);
      if (cost_try < cost) {
        v = std::move(v_try);
        rows = std::move(rows_try);
        cost = cost_try;
        lambda = std::max(1e-10, lambda * 0.3);
        accepted = true;
        break;
      }
      lambda *= 10.0;
    }
    // run to stationarity: stop only once the cost has plateaued and the
    // physical residuals are inside tolerance
    const bool plateaued = accepted && (prev_cost - cost) < 1e-12 * (1.0 + cost);
    prev_cost = cost;
    if (plateaued || (!accepted && lambda > 1e12)) {
      const auto [defect, violation] = detail::evaluate_defects(pb, v);
      if (defect < opt.defect_tol && violation < 1e-4) break;
      if (!accepted && lambda > 1e12) break;
    }
  }

  // exact projection: swing forces to zero, stance forces into the cone
  for (int k = 0; k < pb.n_knots; ++k) {
    for (int f = 0; f < 2; ++f) {
      double& fx = v[pb.idx(k, detail::kFx[f])];
      double& fz = v[pb.idx(k, detail::kFz[f])];
      if (!pb.stance[static_cast<std::size_t>(k)][static_cast<std::size_t>(f)]) {
        fx = 0.0;
        fz = 0.0;
      } else {
        fz = std::max(0.0, fz);
        fx = std::clamp(fx, -opt.mu * fz, opt.mu * fz);
      }
    }
  }

  const auto [defect, violation] = detail::evaluate_defects(pb, v);
  if (defect > 1e-3)
    throw OptimizationFailed("optimize_gait: did not converge (max dynamics defect " +
                                 std::to_string(defect) + ", max constraint violation " +
                                 std::to_string(violation) + ")",
                             defect, violation);

  SrbdTrajectory out;
  out.dt = pb.dt;
  out.schedule = schedule;
  out.field = field;
  out.max_dynamics_defect = defect;
  out.max_constraint_violation = violation;
  out.t.resize(static_cast<std::size_t>(pb.n_knots));
  out.base.resize(static_cast<std::size_t>(pb.n_knots));
  for (int f = 0; f < 2; ++f) {
    out.foot[static_cast<std::size_t>(f)].resize(static_cast<std::size_t>(pb.n_knots));
    out.force[static_cast<std::size_t>(f)].resize(static_cast<std::size_t>(pb.n_knots));
    out.stance[static_cast<std::size_t>(f)].resize(static_cast<std::size_t>(pb.n_knots));
  }
  for (int k = 0; k < pb.n_knots; ++k) {
    out.t[static_cast<std::size_t>(k)] = k * pb.dt;
    out.base[static_cast<std::size_t>(k)] = {v[pb.idx(k, detail::kX)], v[pb.idx(k, detail::kZ)],
                                             v[pb.idx(k, detail::kTh)]};
    for (int f = 0; f < 2; ++f) {
      out.foot[static_cast<std::size_t>(f)][static_cast<std::size_t>(k)] = {
          v[pb.idx(k, detail::kPx[f])], v[pb.idx(k, detail::kPz[f])]};
      out.force[static_cast<std::size_t>(f)][static_cast<std::size_t>(k)] = {
          v[pb.idx(k, detail::kFx[f])], v[pb.idx(k, detail::kFz[f])]};
      out.stance[static_cast<std::size_t>(f)][static_cast<std::size_t>(k)] =
          pb.stance[static_cast<std::size_t>(k)][static_cast<std::size_t>(f)];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Joint-space reference trajectories

struct ReferenceFrame {
  double t = 0.0;
  std::array<double, 4> q{};   // LT, LC, RT, RC
  std::array<double, 4> qd{};
  std::array<double, 2> v{};   // base linear velocity
  double w = 0.0;              // base angular velocity
  double h = 0.0;              // base height above terrain
};

struct ReferenceTrajectory {
  std::string clip_id;
  double rate = 50.0;  // Hz
  std::vector<ReferenceFrame> frames;
};

/// Samples a converged SRBD trajectory at the control rate and converts
/// foot targets to joint space with IK; velocities come from central
/// finite differences of the sampled positions.
inline ReferenceTrajectory to_reference(const SrbdTrajectory& traj, const sim::RobotModel& model,
                                        double rate, const std::string& clip_id = "clip") {
  ReferenceTrajectory ref;
  ref.clip_id = clip_id;
  ref.rate = rate;
  const auto n_frames = static_cast<std::size_t>(std::lround(traj.duration() * rate));
  if (n_frames < 3) throw ConfigError("to_reference: trajectory too short");

  auto interp = [&](const std::vector<std::array<double, 2>>& knots, double t) {
    const double s = t / traj.dt;
    const auto i = std::min(static_cast<std::size_t>(s), knots.size() - 2);
    const double f = s - static_cast<double>(i);
    return std::array<double, 2>{knots[i][0] * (1.0 - f) + knots[i + 1][0] * f,
                                 knots[i][1] * (1.0 - f) + knots[i + 1][1] * f};
  };
  auto interp3 = [&](double t) {
    const double s = t / traj.dt;
    const auto i = std::min(static_cast<std::size_t>(s), traj.base.size() - 2);
    const double f = s - static_cast<double>(i);
    std::array<double, 3> out{};
    for (int c = 0; c < 3; ++c) out[static_cast<std::size_t>(c)] =
        traj.base[i][static_cast<std::size_t>(c)] * (1.0 - f) +
        traj.base[i + 1][static_cast<std::size_t>(c)] * f;
    return out;
  };

  std::vector<std::array<double, 3>> base(n_frames);
  ref.frames.resize(n_frames);
  for (std::size_t i = 0; i < n_frames; ++i) {
    const double t = static_cast<double>(i) / rate;
    base[i] = interp3(t);
    ReferenceFrame& fr = ref.frames[i];
    fr.t = t;
    fr.h = base[i][1] - terrain::height_at(traj.field, base[i][0]);
    for (int f = 0; f < 2; ++f) {
      const auto foot = interp(traj.foot[static_cast<std::size_t>(f)], t);
      try {
        const auto jp = inverse_kinematics(model, base[i][0], base[i][1], base[i][2], foot);
        fr.q[2 * static_cast<std::size_t>(f)] = jp.thigh;
        fr.q[2 * static_cast<std::size_t>(f) + 1] = jp.calf;
      } catch (const ReachError& e) {
        throw ReachError("to_reference: frame " + std::to_string(i) + ": " + e.what());
      }
    }
  }
  // velocities by central differences (one-sided at the ends)
  const double inv_2h = 0.5 * rate;
  for (std::size_t i = 0; i < n_frames; ++i) {
    const std::size_t ip = std::min(i + 1, n_frames - 1);
    const std::size_t im = (i == 0) ? 0 : i - 1;
    const double scale = (ip == im) ? 0.0 : rate / static_cast<double>(ip - im);
    ReferenceFrame& fr = ref.frames[i];
    for (std::size_t jx = 0; jx < 4; ++jx)
      fr.qd[jx] = (ref.frames[ip].q[jx] - ref.frames[im].q[jx]) * scale;
    fr.v[0] = (base[ip][0] - base[im][0]) * scale;
    fr.v[1] = (base[ip][1] - base[im][1]) * scale;
    fr.w = (base[ip][2] - base[im][2]) * scale;
  }
  (void)inv_2h;
  return ref;
}

inline amp::AmpState frame_amp_state(const ReferenceFrame& f) {
  return amp::assemble_amp_state(f.q, f.qd, f.v[0], f.v[1], f.w, f.h);
}

/// Pooled demo transitions with a seeded uniform sampler. Transitions
/// never pair frames across clips.
struct AmpDataset {
  std::vector<amp::AmpTransition> transitions;

  std::vector<amp::AmpTransition> sample(std::size_t n, Rng& rng) const {
    if (transitions.empty()) throw ConfigError("AmpDataset: empty dataset");
    std::vector<amp::AmpTransition> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      out.push_back(transitions[rng.uniform_index(transitions.size())]);
    return out;
  }
};

inline AmpDataset build_dataset(const std::vector<ReferenceTrajectory>& refs) {
  if (refs.empty()) throw ConfigError("build_dataset: no reference trajectories");
  AmpDataset ds;
  for (const auto& ref : refs) {
    for (std::size_t i = 0; i + 1 < ref.frames.size(); ++i) {
      ds.transitions.push_back({frame_amp_state(ref.frames[i]),
                                frame_amp_state(ref.frames[i + 1]), amp::Source::Demo});
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Reference dataset file: one CSV record per frame, full-precision floats.
// Column order: clip_id,t,q0,q1,q2,q3,qd0,qd1,qd2,qd3,vx,vz,w,h

inline void write_reference_csv(const std::string& path,
                                const std::vector<ReferenceTrajectory>& refs) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open reference file for writing: " + path);
  out << "clip_id,t,q0,q1,q2,q3,qd0,qd1,qd2,qd3,vx,vz,w,h\n";
  char buf[512];
  for (const auto& ref : refs) {
    for (const auto& f : ref.frames) {
      std::snprintf(buf, sizeof(buf),
                    "%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,"
                    "%.17g\n",
                    ref.clip_id.c_str(), f.t, f.q[0], f.q[1], f.q[2], f.q[3], f.qd[0], f.qd[1],
                    f.qd[2], f.qd[3], f.v[0], f.v[1], f.w, f.h);
      out << buf;
    }
  }
  if (!out) throw IoError("reference file write failed: " + path);
}

inline std::vector<ReferenceTrajectory> read_reference_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open reference file: " + path);
  std::string line;
  std::getline(in, line);  // header
  std::vector<ReferenceTrajectory> refs;
  std::map<std::string, std::size_t> index;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string clip;
    std::getline(ss, clip, ',');
    std::array<double, 13> vals{};
    for (auto& val : vals) {
      std::string tok;
      if (!std::getline(ss, tok, ',')) throw DataError("reference file: short record in " + path);
      val = std::stod(tok);
    }
    auto it = index.find(clip);
    if (it == index.end()) {
      index[clip] = refs.size();
      refs.push_back({clip, 50.0, {}});
      it = index.find(clip);
    }
    ReferenceFrame f;
    f.t = vals[0];
    for (std::size_t i = 0; i < 4; ++i) f.q[i] = vals[1 + i];
    for (std::size_t i = 0; i < 4; ++i) f.qd[i] = vals[5 + i];
    f.v = {vals[9], vals[10]};
    f.w = vals[11];
    f.h = vals[12];
    refs[it->second].frames.push_back(f);
  }
  for (auto& ref : refs) {
    if (ref.frames.size() >= 2) ref.rate = 1.0 / (ref.frames[1].t - ref.frames[0].t);
  }
  return refs;
}

}  // namespace bip::refgen
