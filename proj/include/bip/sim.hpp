#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bip/errors.hpp"
#include "bip/linalg.hpp"
#include "bip/rng.hpp"
#include "bip/terrain.hpp"

namespace bip::sim {

// Planar 5-link biped: trunk + 2 x {thigh, calf}, point feet.
//
// Generalized coordinates q = [x, z, theta, qLT, qLC, qRT, qRC]:
//   (x, z)  hip position in the world (both legs share the hip point)
//   theta   trunk pitch, zero upright, positive leaning forward (+x)
//   q*T     thigh angle relative to the trunk, zero straight down
//   q*C     calf angle relative to the thigh (knee), negative = backward
//
// Dimension mapping from the 3D 12-DoF quadruped-in-biped-mode model:
//   12 actuated joints        -> 4  (2 per leg: thigh pitch, knee)
//   base pose SE(3)           -> (x, z, theta)
//   o^p R^48                  -> R^17   (see trainer.hpp)
//   s^p R^45                  -> R^13
//   o^e R^187 height grid     -> R^11 1D scan (see terrain.hpp)
//   S^AMP R^31                -> R^12   (see amp.hpp)

inline constexpr std::size_t kNq = 7;
inline constexpr std::size_t kNumJoints = 4;
inline constexpr double kGravity = 9.81;

struct RobotModel {
  // masses (kg); the front-leg mass of the source quadruped is lumped
  // into the trunk
  double trunk_mass = 6.0;
  double thigh_mass = 1.0;
  double calf_mass = 0.5;
  // lengths (m)
  double trunk_length = 0.2;
  double thigh_length = 0.2;
  double calf_length = 0.2;
  // inertias about COM (kg m^2), slender-rod defaults
  double trunk_inertia = 6.0 * 0.04 / 12.0;
  double thigh_inertia = 1.0 * 0.04 / 12.0;
  double calf_inertia = 0.5 * 0.04 / 12.0;
  double foot_radius = 0.02;

  // joint limits (rad): thigh, calf
  double thigh_lo = -1.3, thigh_hi = 1.8;
  double calf_lo = -2.6, calf_hi = -0.05;
  double torque_limit = 33.5;  // N m
  std::array<double, kNumJoints> nominal_joints{0.3, -0.6, 0.3, -0.6};  // LT, LC, RT, RC
  double cmd_offset_bound = 1.0;  // rad, PdCommand clip

  // PD gains (before domain scaling)
  double kp = 20.0;
  double kd = 0.5;

  // penalty contact
  double contact_kn = 1e4;   // N/m
  double contact_cn = 100.0;  // N s/m at restitution 0
  double contact_kt = 500.0;  // N s/m tangential stiction regularization

  double fall_pitch_threshold = 1.5;  // rad
  double substep_dt = 1e-3;           // s

  double total_mass() const { return trunk_mass + 2.0 * (thigh_mass + calf_mass); }

  void validate() const {
    if (trunk_mass <= 0 || thigh_mass <= 0 || calf_mass <= 0)
      throw ConfigError("RobotModel: masses must be positive");
    if (trunk_length <= 0 || thigh_length <= 0 || calf_length <= 0)
      throw ConfigError("RobotModel: lengths must be positive");
    if (trunk_inertia <= 0 || thigh_inertia <= 0 || calf_inertia <= 0)
      throw ConfigError("RobotModel: inertias must be positive");
    if (thigh_lo >= thigh_hi || calf_lo >= calf_hi)
      throw ConfigError("RobotModel: joint limits inverted");
  }
};

struct PushEvent {
  double t_start = 0.0;
  std::array<double, 2> force{0.0, 0.0};  // N
  double duration = 0.0;                  // s
};

struct DomainParams {
  double mass_scale = 1.0;
  double payload_mass = 0.0;      // kg
  double payload_offset_x = 0.0;  // m, trunk frame
  double friction = 1.0;
  double restitution = 0.0;
  double kp_scale = 1.0;
  double kd_scale = 1.0;
  std::vector<PushEvent> push_schedule;
};

struct DomainRanges {
  std::pair<double, double> mass_scale{0.8, 1.2};
  std::pair<double, double> payload_mass{0.0, 3.0};
  std::pair<double, double> payload_offset{-0.1, 0.1};
  std::pair<double, double> friction{0.05, 2.75};
  std::pair<double, double> restitution{0.0, 1.0};
  std::pair<double, double> kp_scale{0.8, 1.2};
  std::pair<double, double> kd_scale{0.8, 1.2};
};

/// Uniform sample of every randomized field; deterministic per seed.
inline DomainParams randomize_domain(std::uint64_t seed, const DomainRanges& ranges) {
  auto check = [](const std::pair<double, double>& r, const char* name) {
    if (r.first > r.second) throw ConfigError(std::string("DomainRanges: lo > hi for ") + name);
  };
  check(ranges.mass_scale, "mass_scale");
  check(ranges.payload_mass, "payload_mass");
  check(ranges.payload_offset, "payload_offset");
  check(ranges.friction, "friction");
  check(ranges.restitution, "restitution");
  check(ranges.kp_scale, "kp_scale");
  check(ranges.kd_scale, "kd_scale");
  Rng rng(seed ^ 0x5eedd0);
  DomainParams d;
  d.mass_scale = rng.uniform(ranges.mass_scale.first, ranges.mass_scale.second);
  d.payload_mass = rng.uniform(ranges.payload_mass.first, ranges.payload_mass.second);
  d.payload_offset_x = rng.uniform(ranges.payload_offset.first, ranges.payload_offset.second);
  d.friction = rng.uniform(ranges.friction.first, ranges.friction.second);
  d.restitution = rng.uniform(ranges.restitution.first, ranges.restitution.second);
  d.kp_scale = rng.uniform(ranges.kp_scale.first, ranges.kp_scale.second);
  d.kd_scale = rng.uniform(ranges.kd_scale.first, ranges.kd_scale.second);
  return d;
}

/// Target joint-position offsets added to the nominal pose.
struct PdCommand {
  std::array<double, kNumJoints> offsets{};

  static PdCommand clipped(const std::array<double, kNumJoints>& raw, const RobotModel& m) {
    PdCommand c;
    for (std::size_t i = 0; i < kNumJoints; ++i)
      c.offsets[i] = std::clamp(raw[i], -m.cmd_offset_bound, m.cmd_offset_bound);
    return c;
  }
};

struct SimState {
  Vec q = Vec(kNq, 0.0);
  Vec qd = Vec(kNq, 0.0);
  double time = 0.0;
  std::array<bool, 2> foot_contact{};                       // L, R
  std::array<std::array<double, 2>, 2> foot_force{};        // (fx, fz) per foot
  std::array<bool, 5> body_contact{};                       // trunk, LT, LC, RT, RC
  std::array<double, 2> ext_force{};                        // active trunk force
  std::array<double, 2> push_force{};                       // set by apply_push
  double push_until = 0.0;

  bool finite() const {
    return all_finite(q) && all_finite(qd) && std::isfinite(time);
  }
};

namespace detail {

inline std::array<double, 2> dir(double a) { return {std::sin(a), -std::cos(a)}; }
inline std::array<double, 2> ddir(double a) { return {std::cos(a), std::sin(a)}; }

/// Positions and Jacobians of all bodies at configuration q.
struct Kinematics {
  // body order: trunk, payload, Lthigh, Lcalf, Rthigh, Rcalf
  static constexpr std::size_t kNumBodies = 6;
  std::array<double, kNumBodies> mass{};
  std::array<double, kNumBodies> inertia{};
  std::array<std::array<double, 2>, kNumBodies> pos{};      // COM positions
  std::array<std::array<std::array<double, kNq>, 2>, kNumBodies> jac{};  // 2 x 7 each
  std::array<std::array<double, kNq>, kNumBodies> jw{};     // angular rows
  std::array<std::array<double, 2>, 2> foot_pos{};          // L, R
  std::array<std::array<std::array<double, kNq>, 2>, 2> foot_jac{};
  std::array<std::array<double, 2>, 2> knee_pos{};
  std::array<double, 2> trunk_top{};
};

inline Kinematics kinematics(const Vec& q, const RobotModel& m, const DomainParams& dom) {
  Kinematics k;
  const double x = q[0], z = q[1], th = q[2];
  const double ct = std::cos(th), st = std::sin(th);
  const double l1 = m.thigh_length, l2 = m.calf_length;
  const double ch = m.trunk_length / 2.0;  // trunk COM height above hip

  k.mass = {m.trunk_mass * dom.mass_scale, dom.payload_mass,
            m.thigh_mass * dom.mass_scale, m.calf_mass * dom.mass_scale,
            m.thigh_mass * dom.mass_scale, m.calf_mass * dom.mass_scale};
  k.inertia = {m.trunk_inertia * dom.mass_scale, 0.0,
               m.thigh_inertia * dom.mass_scale, m.calf_inertia * dom.mass_scale,
               m.thigh_inertia * dom.mass_scale, m.calf_inertia * dom.mass_scale};

  // trunk COM: hip + R(th) (0, ch)
  k.pos[0] = {x - ch * st, z + ch * ct};
  k.jac[0][0][0] = 1.0;
  k.jac[0][1][1] = 1.0;
  k.jac[0][0][2] = -ch * ct;
  k.jac[0][1][2] = -ch * st;
  k.jw[0][2] = 1.0;
  k.trunk_top = {x - m.trunk_length * st, z + m.trunk_length * ct};

  // payload: hip + R(th) (px, ch)
  const double px = dom.payload_offset_x;
  k.pos[1] = {x + px * ct - ch * st, z + px * st + ch * ct};
  k.jac[1][0][0] = 1.0;
  k.jac[1][1][1] = 1.0;
  k.jac[1][0][2] = -px * st - ch * ct;
  k.jac[1][1][2] = px * ct - ch * st;
  k.jw[1][2] = 1.0;

  for (int side = 0; side < 2; ++side) {
    const std::size_t jT = 3 + 2 * static_cast<std::size_t>(side);
    const std::size_t jC = jT + 1;
    const std::size_t bT = 2 + 2 * static_cast<std::size_t>(side);
    const std::size_t bC = bT + 1;
    const double aT = th + q[jT];
    const double aC = aT + q[jC];
    const auto dT = dir(aT), dC = dir(aC);
    const auto gT = ddir(aT), gC = ddir(aC);

    // thigh COM: hip + (l1/2) dir(aT)
    for (int r = 0; r < 2; ++r) {
      k.pos[bT][r] = (r == 0 ? x : z) + 0.5 * l1 * dT[r];
      k.jac[bT][r][r] = 1.0;
      k.jac[bT][r][2] = 0.5 * l1 * gT[r];
      k.jac[bT][r][jT] = 0.5 * l1 * gT[r];
    }
    k.jw[bT][2] = 1.0;
    k.jw[bT][jT] = 1.0;

    // calf COM: hip + l1 dir(aT) + (l2/2) dir(aC)
    for (int r = 0; r < 2; ++r) {
      k.pos[bC][r] = (r == 0 ? x : z) + l1 * dT[r] + 0.5 * l2 * dC[r];
      k.jac[bC][r][r] = 1.0;
      k.jac[bC][r][2] = l1 * gT[r] + 0.5 * l2 * gC[r];
      k.jac[bC][r][jT] = l1 * gT[r] + 0.5 * l2 * gC[r];
      k.jac[bC][r][jC] = 0.5 * l2 * gC[r];
    }
    k.jw[bC][2] = 1.0;
    k.jw[bC][jT] = 1.0;
    k.jw[bC][jC] = 1.0;

    k.knee_pos[side] = {x + l1 * dT[0], z + l1 * dT[1]};
    k.foot_pos[side] = {x + l1 * dT[0] + l2 * dC[0], z + l1 * dT[1] + l2 * dC[1]};
    for (int r = 0; r < 2; ++r) {
      k.foot_jac[side][r][r] = 1.0;
      k.foot_jac[side][r][2] = l1 * gT[r] + l2 * gC[r];
      k.foot_jac[side][r][jT] = l1 * gT[r] + l2 * gC[r];
      k.foot_jac[side][r][jC] = l2 * gC[r];
    }
  }
  return k;
}

inline Mat mass_matrix(const Vec& q, const RobotModel& m, const DomainParams& dom) {
  const Kinematics k = kinematics(q, m, dom);
  Mat M(kNq, kNq);
  for (std::size_t b = 0; b < Kinematics::kNumBodies; ++b) {
    const double mb = k.mass[b];
    const double Ib = k.inertia[b];
    if (mb == 0.0 && Ib == 0.0) continue;
    for (std::size_t i = 0; i < kNq; ++i) {
      for (std::size_t j = i; j < kNq; ++j) {
        double v = mb * (k.jac[b][0][i] * k.jac[b][0][j] + k.jac[b][1][i] * k.jac[b][1][j]) +
                   Ib * k.jw[b][i] * k.jw[b][j];
        M(i, j) += v;
      }
    }
  }
  for (std::size_t i = 0; i < kNq; ++i)
    for (std::size_t j = 0; j < i; ++j) M(i, j) = M(j, i);
  return M;
}

// --- flat closed-form dynamics kernels for the integrator hot loop -------
// Mathematically identical to the Kinematics-based routines above, but
// without building Jacobian tables or heap matrices.

using M7 = std::array<double, kNq * kNq>;

/// Per-configuration geometry shared by the fast kernels.
struct FastGeom {
  double m_tr, i_tr, m_pl, m_th, i_th, m_cf, i_cf;
  std::array<double, 2> a_tr;              // trunk theta-column
  std::array<double, 2> a_pl;              // payload theta-column
  std::array<std::array<double, 2>, 2> t;  // thigh COM offset vectors
  std::array<std::array<double, 2>, 2> c1; // knee offset vectors
  std::array<std::array<double, 2>, 2> c2; // calf COM offset from knee
};

inline FastGeom fast_geom(const Vec& q, const RobotModel& m, const DomainParams& dom) {
  FastGeom g;
  const double th = q[2];
  const double ct = std::cos(th), st = std::sin(th);
  const double l1 = m.thigh_length, l2 = m.calf_length;
  const double ch = m.trunk_length / 2.0;
  g.m_tr = m.trunk_mass * dom.mass_scale;
  g.i_tr = m.trunk_inertia * dom.mass_scale;
  g.m_pl = dom.payload_mass;
  g.m_th = m.thigh_mass * dom.mass_scale;
  g.i_th = m.thigh_inertia * dom.mass_scale;
  g.m_cf = m.calf_mass * dom.mass_scale;
  g.i_cf = m.calf_inertia * dom.mass_scale;
  g.a_tr = {-ch * ct, -ch * st};
  const double px = dom.payload_offset_x;
  g.a_pl = {-px * st - ch * ct, px * ct - ch * st};
  for (int s = 0; s < 2; ++s) {
    const std::size_t jT = 3 + 2 * static_cast<std::size_t>(s);
    const double aT = th + q[jT];
    const double aC = aT + q[jT + 1];
    const double cT = std::cos(aT), sT = std::sin(aT);
    const double cC = std::cos(aC), sC = std::sin(aC);
    g.t[static_cast<std::size_t>(s)] = {0.5 * l1 * cT, 0.5 * l1 * sT};
    g.c1[static_cast<std::size_t>(s)] = {l1 * cT, l1 * sT};
    g.c2[static_cast<std::size_t>(s)] = {0.5 * l2 * cC, 0.5 * l2 * sC};
  }
  return g;
}

inline M7 mass_matrix7(const FastGeom& g) {
  M7 mm{};
  auto at = [&mm](std::size_t i, std::size_t j) -> double& { return mm[i * kNq + j]; };
  const double m_lin = g.m_tr + g.m_pl + 2.0 * (g.m_th + g.m_cf);
  at(0, 0) = m_lin;
  at(1, 1) = m_lin;
  at(0, 2) = g.m_tr * g.a_tr[0] + g.m_pl * g.a_pl[0];
  at(1, 2) = g.m_tr * g.a_tr[1] + g.m_pl * g.a_pl[1];
  at(2, 2) = g.m_tr * (g.a_tr[0] * g.a_tr[0] + g.a_tr[1] * g.a_tr[1]) + g.i_tr +
             g.m_pl * (g.a_pl[0] * g.a_pl[0] + g.a_pl[1] * g.a_pl[1]);
  for (std::size_t s = 0; s < 2; ++s) {
    const std::size_t jT = 3 + 2 * s, jC = jT + 1;
    const auto& t = g.t[s];
    const std::array<double, 2> e{g.c1[s][0] + g.c2[s][0], g.c1[s][1] + g.c2[s][1]};
    const auto& c2 = g.c2[s];
    const double tt = g.m_th * (t[0] * t[0] + t[1] * t[1]) + g.i_th;
    const double ee = g.m_cf * (e[0] * e[0] + e[1] * e[1]) + g.i_cf;
    const double ec = g.m_cf * (e[0] * c2[0] + e[1] * c2[1]) + g.i_cf;
    const double cc = g.m_cf * (c2[0] * c2[0] + c2[1] * c2[1]) + g.i_cf;
    at(0, 2) += g.m_th * t[0] + g.m_cf * e[0];
    at(1, 2) += g.m_th * t[1] + g.m_cf * e[1];
    at(0, jT) = g.m_th * t[0] + g.m_cf * e[0];
    at(1, jT) = g.m_th * t[1] + g.m_cf * e[1];
    at(0, jC) = g.m_cf * c2[0];
    at(1, jC) = g.m_cf * c2[1];
    at(2, 2) += tt + ee;
    at(2, jT) = tt + ee;
    at(2, jC) = ec;
    at(jT, jT) = tt + ee;
    at(jT, jC) = ec;
    at(jC, jC) = cc;
  }
  for (std::size_t i = 0; i < kNq; ++i)
    for (std::size_t j = 0; j < i; ++j) mm[i * kNq + j] = mm[j * kNq + i];
  return mm;
}

inline M7 mass_matrix7(const Vec& q, const RobotModel& m, const DomainParams& dom) {
  return mass_matrix7(fast_geom(q, m, dom));
}

inline double kinetic_energy7(const FastGeom& g, const std::array<double, kNq>& u) {
  double tkin = 0.5 * g.i_tr * u[2] * u[2];
  auto body = [&](double mass, double vx, double vz) { tkin += 0.5 * mass * (vx * vx + vz * vz); };
  body(g.m_tr, u[0] + g.a_tr[0] * u[2], u[1] + g.a_tr[1] * u[2]);
  body(g.m_pl, u[0] + g.a_pl[0] * u[2], u[1] + g.a_pl[1] * u[2]);
  for (std::size_t s = 0; s < 2; ++s) {
    const std::size_t jT = 3 + 2 * s, jC = jT + 1;
    const double wT = u[2] + u[jT];
    const double wC = wT + u[jC];
    body(g.m_th, u[0] + g.t[s][0] * wT, u[1] + g.t[s][1] * wT);
    body(g.m_cf, u[0] + g.c1[s][0] * wT + g.c2[s][0] * wC,
         u[1] + g.c1[s][1] * wT + g.c2[s][1] * wC);
    tkin += 0.5 * g.i_th * wT * wT + 0.5 * g.i_cf * wC * wC;
  }
  return tkin;
}

inline double kinetic_energy7(const Vec& q, const std::array<double, kNq>& u,
                              const RobotModel& m, const DomainParams& dom) {
  return kinetic_energy7(fast_geom(q, m, dom), u);
}

inline std::array<double, kNq> gravity_force7(const FastGeom& g, double gravity) {
  std::array<double, kNq> out{};
  out[1] = -gravity * (g.m_tr + g.m_pl + 2.0 * (g.m_th + g.m_cf));
  out[2] = -gravity * (g.m_tr * g.a_tr[1] + g.m_pl * g.a_pl[1]);
  for (std::size_t s = 0; s < 2; ++s) {
    const std::size_t jT = 3 + 2 * s, jC = jT + 1;
    const double ez = g.c1[s][1] + g.c2[s][1];
    const double leg = g.m_th * g.t[s][1] + g.m_cf * ez;
    out[2] -= gravity * leg;
    out[jT] = -gravity * leg;
    out[jC] = -gravity * g.m_cf * g.c2[s][1];
  }
  return out;
}

inline std::array<double, kNq> gravity_force7(const Vec& q, const RobotModel& m,
                                              const DomainParams& dom, double gravity) {
  return gravity_force7(fast_geom(q, m, dom), gravity);
}

/// Exact inertia bias dT/dq_k = 1/2 u . (dM/dq_k) u at fixed velocity u.
/// Only the angle coordinates contribute; x and z components are zero.
inline std::array<double, kNq> inertia_bias7(const FastGeom& g,
                                             const std::array<double, kNq>& u) {
  std::array<double, kNq> out{};
  auto perp = [](const std::array<double, 2>& v) { return std::array<double, 2>{-v[1], v[0]}; };
  // trunk and payload rotate with theta only
  {
    const auto da = perp(g.a_tr);
    const double vx = u[0] + g.a_tr[0] * u[2], vz = u[1] + g.a_tr[1] * u[2];
    out[2] += g.m_tr * (vx * da[0] + vz * da[1]) * u[2];
  }
  {
    const auto da = perp(g.a_pl);
    const double vx = u[0] + g.a_pl[0] * u[2], vz = u[1] + g.a_pl[1] * u[2];
    out[2] += g.m_pl * (vx * da[0] + vz * da[1]) * u[2];
  }
  for (std::size_t s = 0; s < 2; ++s) {
    const std::size_t jT = 3 + 2 * s, jC = jT + 1;
    const double wT = u[2] + u[jT];
    const double wC = wT + u[jC];
    const auto tp = perp(g.t[s]);
    const auto c1p = perp(g.c1[s]);
    const auto c2p = perp(g.c2[s]);
    // thigh: v = u_xy + t wT, and t rotates with both theta and q_jT
    {
      const double vx = u[0] + g.t[s][0] * wT, vz = u[1] + g.t[s][1] * wT;
      const double d = g.m_th * (vx * tp[0] + vz * tp[1]) * wT;
      out[2] += d;
      out[jT] += d;
    }
    // calf: v = u_xy + c1 wT + c2 wC; c1 rotates with theta/q_jT, c2 with all three
    {
      const double vx = u[0] + g.c1[s][0] * wT + g.c2[s][0] * wC;
      const double vz = u[1] + g.c1[s][1] * wT + g.c2[s][1] * wC;
      const double d1 = g.m_cf * (vx * c1p[0] + vz * c1p[1]) * wT;
      const double d2 = g.m_cf * (vx * c2p[0] + vz * c2p[1]) * wC;
      out[2] += d1 + d2;
      out[jT] += d1 + d2;
      out[jC] += d2;
    }
  }
  return out;
}

/// In-place Cholesky solve of the 7x7 SPD system.
inline std::array<double, kNq> solve7(M7 a, std::array<double, kNq> b) {
  for (std::size_t j = 0; j < kNq; ++j) {
    double d = a[j * kNq + j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j * kNq + k] * a[j * kNq + k];
    if (!(d > 0.0) || !std::isfinite(d)) throw NumericError("solve7: mass matrix not SPD");
    const double ljj = std::sqrt(d);
    a[j * kNq + j] = ljj;
    for (std::size_t i = j + 1; i < kNq; ++i) {
      double s = a[i * kNq + j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i * kNq + k] * a[j * kNq + k];
      a[i * kNq + j] = s / ljj;
    }
  }
  for (std::size_t i = 0; i < kNq; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= a[i * kNq + k] * b[k];
    b[i] = s / a[i * kNq + i];
  }
  for (std::size_t ii = kNq; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t k = ii + 1; k < kNq; ++k) s -= a[k * kNq + ii] * b[k];
    b[ii] = s / a[ii * kNq + ii];
  }
  return b;
}

inline std::array<double, kNq> matvec7(const M7& a, const std::array<double, kNq>& x) {
  std::array<double, kNq> y{};
  for (std::size_t i = 0; i < kNq; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < kNq; ++j) s += a[i * kNq + j] * x[j];
    y[i] = s;
  }
  return y;
}

}  // namespace detail

inline double kinetic_energy(const Vec& q, const Vec& qd, const RobotModel& m,
                             const DomainParams& dom) {
  const Mat M = detail::mass_matrix(q, m, dom);
  return 0.5 * dot(qd, matvec(M, qd));
}

inline double potential_energy(const Vec& q, const RobotModel& m, const DomainParams& dom,
                               double gravity = kGravity) {
  const auto k = detail::kinematics(q, m, dom);
  double v = 0.0;
  for (std::size_t b = 0; b < detail::Kinematics::kNumBodies; ++b)
    v += k.mass[b] * gravity * k.pos[b][1];
  return v;
}

/// Total linear momentum (p_x, p_z) and angular momentum about the world
/// origin. p_theta = M qd row 2 is the angular momentum about the hip, so
/// the origin value is p_theta + x p_z - z p_x.
inline std::array<double, 3> momentum(const SimState& s, const RobotModel& m,
                                      const DomainParams& dom) {
  const Mat M = detail::mass_matrix(s.q, m, dom);
  const Vec p = matvec(M, s.qd);
  return {p[0], p[1], p[2] + s.q[0] * p[1] - s.q[1] * p[0]};
}

/// tau = kp (q_nominal + cmd - q_joints) - kd qd_joints, clipped to the
/// torque limits.
inline std::array<double, kNumJoints> pd_torque(const PdCommand& cmd,
                                                const std::array<double, kNumJoints>& q_joints,
                                                const std::array<double, kNumJoints>& qd_joints,
                                                double kp, double kd, const RobotModel& m) {
  std::array<double, kNumJoints> tau{};
  for (std::size_t i = 0; i < kNumJoints; ++i) {
    const double target = m.nominal_joints[i] + cmd.offsets[i];
    tau[i] = kp * (target - q_joints[i]) - kd * qd_joints[i];
    tau[i] = std::clamp(tau[i], -m.torque_limit, m.torque_limit);
  }
  return tau;
}

/// Penalty contact: normal spring-damper (damping fades with restitution),
/// tangential viscous force clamped to the friction cone.
inline std::array<double, 2> contact_force(double penetration, double penetration_rate,
                                           double tangential_velocity, double mu,
                                           double restitution, const RobotModel& m) {
  if (penetration <= 0.0) return {0.0, 0.0};
  const double cn = m.contact_cn * (1.0 - restitution);
  const double fz = std::max(0.0, m.contact_kn * penetration + cn * penetration_rate);
  const double limit = mu * fz;
  const double fx = -std::clamp(m.contact_kt * tangential_velocity, -limit, limit);
  return {fx, fz};
}

/// Schedules a trunk-COM force for the given duration starting now.
inline void apply_push(SimState& s, const std::array<double, 2>& force, double duration) {
  if (!(duration > 0.0)) throw ConfigError("apply_push: duration must be positive");
  s.push_force = force;
  s.push_until = s.time + duration;
}

namespace detail {

/// Generalized gravity force -dV/dq at configuration q.
inline Vec gravity_force(const Vec& q, const RobotModel& m, const DomainParams& dom,
                         double gravity) {
  const Kinematics k = kinematics(q, m, dom);
  Vec g(kNq, 0.0);
  for (std::size_t b = 0; b < Kinematics::kNumBodies; ++b) {
    const double w = k.mass[b] * gravity;
    if (w == 0.0) continue;
    for (std::size_t i = 0; i < kNq; ++i) g[i] -= w * k.jac[b][1][i];
  }
  return g;
}

/// One implicit-midpoint substep in momentum form. gen_force carries the
/// explicit external forces (PD torques, contact, pushes) evaluated at
/// the start of the substep; gravity and the inertia bias are taken at
/// the midpoint, which keeps the step second order and conserves the
/// free-system momentum maps to solver tolerance.
inline void integrate_substep(Vec& q, Vec& qd, const Vec& gen_force, const RobotModel& m,
                              const DomainParams& dom, double h, double gravity) {
  std::array<double, kNq> u0{};
  for (std::size_t i = 0; i < kNq; ++i) u0[i] = qd[i];
  const std::array<double, kNq> p0 = matvec7(mass_matrix7(q, m, dom), u0);

  Vec q_next = q;
  axpy(h, qd, q_next);
  std::array<double, kNq> p_next = p0;
  std::array<double, kNq> u = u0;  // midpoint velocity M(q_m)^-1 p_m

  Vec q_m(kNq);
  for (int iter = 0; iter < 12; ++iter) {
    std::array<double, kNq> p_m{};
    for (std::size_t i = 0; i < kNq; ++i) {
      q_m[i] = 0.5 * (q[i] + q_next[i]);
      p_m[i] = 0.5 * (p0[i] + p_next[i]);
    }
    const FastGeom geom = fast_geom(q_m, m, dom);
    const auto u_new = solve7(mass_matrix7(geom), p_m);

    std::array<double, kNq> rhs = gravity_force7(geom, gravity);
    const auto bias = inertia_bias7(geom, u_new);
    for (std::size_t i = 0; i < kNq; ++i) rhs[i] += gen_force[i] + bias[i];
    for (std::size_t i = 0; i < kNq; ++i) {
      p_next[i] = p0[i] + h * rhs[i];
      q_next[i] = q[i] + h * u_new[i];
    }

    double delta = 0.0;
    for (std::size_t i = 0; i < kNq; ++i) delta = std::max(delta, std::abs(u_new[i] - u[i]));
    u = u_new;
    if (delta < 1e-13) break;
  }
  q = q_next;
  const auto u_end = solve7(mass_matrix7(q, m, dom), p_next);
  for (std::size_t i = 0; i < kNq; ++i) qd[i] = u_end[i];
}

}  // namespace detail

/// Non-foot collision probe points per body (trunk, LT, LC, RT, RC).
inline std::array<bool, 5> body_contacts(const Vec& q, const RobotModel& m,
                                         const DomainParams& dom,
                                         const terrain::HeightField& field) {
  const auto k = detail::kinematics(q, m, dom);
  std::array<bool, 5> flags{};
  auto below = [&](const std::array<double, 2>& p) {
    return p[1] <= terrain::height_at(field, p[0]);
  };
  const std::array<double, 2> hip{q[0], q[1]};
  flags[0] = below(hip) || below(k.pos[0]) || below(k.trunk_top);
  for (int side = 0; side < 2; ++side) {
    flags[1 + 2 * side] = below(k.pos[2 + 2 * side]) || below(k.knee_pos[side]);
    // calf midpoint only; the foot end is supposed to touch
    flags[2 + 2 * side] = below(k.pos[3 + 2 * side]);
  }
  return flags;
}

struct StepOptions {
  double gravity = kGravity;
};

/// Advances the state by dt (the 50 Hz control period) with fine
/// symplectic substeps. Throws NumericError if the state diverges.
inline SimState step(const SimState& state, const PdCommand& cmd, const RobotModel& m,
                     const DomainParams& dom, const terrain::HeightField& field, double dt,
                     const StepOptions& opt = {}) {
  if (!(dt > 0.0)) throw ConfigError("step: dt must be positive");
  if (!state.finite()) throw NumericError("step: non-finite input state");
  SimState s = state;
  const int n_sub = std::max(1, static_cast<int>(std::lround(dt / m.substep_dt)));
  const double h = dt / n_sub;
  const double kp = m.kp * dom.kp_scale;
  const double kd = m.kd * dom.kd_scale;

  std::array<std::array<double, 2>, 2> mean_force{};
  std::array<bool, 2> any_contact{};

  for (int sub = 0; sub < n_sub; ++sub) {
    const auto kin = detail::kinematics(s.q, m, dom);

    Vec Q(kNq, 0.0);  // gravity is handled inside the integrator
    // PD torques
    std::array<double, kNumJoints> qj{}, qdj{};
    for (std::size_t i = 0; i < kNumJoints; ++i) {
      qj[i] = s.q[3 + i];
      qdj[i] = s.qd[3 + i];
    }
    const auto tau = pd_torque(cmd, qj, qdj, kp, kd, m);
    for (std::size_t i = 0; i < kNumJoints; ++i) Q[3 + i] += tau[i];

    // foot contact
    for (int side = 0; side < 2; ++side) {
      const auto& fp = kin.foot_pos[side];
      const double ground = terrain::height_at(field, fp[0]);
      const double pen = ground - (fp[1] - m.foot_radius);
      std::array<double, 2> fv{};
      for (std::size_t i = 0; i < kNq; ++i) {
        fv[0] += kin.foot_jac[side][0][i] * s.qd[i];
        fv[1] += kin.foot_jac[side][1][i] * s.qd[i];
      }
      const auto f = contact_force(pen, -fv[1], fv[0], dom.friction, dom.restitution, m);
      if (f[1] > 0.0) {
        any_contact[static_cast<std::size_t>(side)] = true;
        for (std::size_t i = 0; i < kNq; ++i)
          Q[i] += kin.foot_jac[side][0][i] * f[0] + kin.foot_jac[side][1][i] * f[1];
      }
      mean_force[static_cast<std::size_t>(side)][0] += f[0] / n_sub;
      mean_force[static_cast<std::size_t>(side)][1] += f[1] / n_sub;
    }

    // external pushes: apply_push force plus any scheduled events
    std::array<double, 2> ext{};
    if (s.time < s.push_until) {
      ext[0] += s.push_force[0];
      ext[1] += s.push_force[1];
    }
    for (const auto& ev : dom.push_schedule) {
      if (s.time >= ev.t_start && s.time < ev.t_start + ev.duration) {
        ext[0] += ev.force[0];
        ext[1] += ev.force[1];
      }
    }
    if (ext[0] != 0.0 || ext[1] != 0.0) {
      for (std::size_t i = 0; i < kNq; ++i)
        Q[i] += kin.jac[0][0][i] * ext[0] + kin.jac[0][1][i] * ext[1];
    }
    s.ext_force = ext;

    detail::integrate_substep(s.q, s.qd, Q, m, dom, h, opt.gravity);
    s.time += h;
  }

  s.foot_force = mean_force;
  s.foot_contact = any_contact;
  s.body_contact = body_contacts(s.q, m, dom, field);
  if (!s.finite()) throw NumericError("step: simulation diverged");
  return s;
}

enum class TerminationReason { None, BodyContact, Fall, Diverged };

struct Termination {
  bool terminated = false;
  TerminationReason reason = TerminationReason::None;
};

inline Termination check_termination(const SimState& s, const RobotModel& m,
                                     const DomainParams& dom,
                                     const terrain::HeightField& field) {
  if (!s.finite()) return {true, TerminationReason::Diverged};
  const auto flags = body_contacts(s.q, m, dom, field);
  for (bool f : flags)
    if (f) return {true, TerminationReason::BodyContact};
  if (std::abs(s.q[2]) > m.fall_pitch_threshold) return {true, TerminationReason::Fall};
  return {false, TerminationReason::None};
}

inline const char* termination_name(TerminationReason r) {
  switch (r) {
    case TerminationReason::None: return "none";
    case TerminationReason::BodyContact: return "body_contact";
    case TerminationReason::Fall: return "fall";
    case TerminationReason::Diverged: return "diverged";
  }
  return "none";
}

/// Foot position for a given base pose and leg joints (FK used by both
/// the simulator and the reference pipeline).
inline std::array<double, 2> foot_position(const RobotModel& m, double hip_x, double hip_z,
                                           double theta, double q_thigh, double q_calf) {
  const double aT = theta + q_thigh;
  const double aC = aT + q_calf;
  return {hip_x + m.thigh_length * std::sin(aT) + m.calf_length * std::sin(aC),
          hip_z - m.thigh_length * std::cos(aT) - m.calf_length * std::cos(aC)};
}

/// Nominal standing state with both feet resting on the terrain.
inline SimState initial_state(const RobotModel& m, const terrain::HeightField& field,
                              double x0 = 0.0) {
  SimState s;
  s.q[0] = x0;
  for (std::size_t i = 0; i < kNumJoints; ++i) s.q[3 + i] = m.nominal_joints[i];
  const auto foot = foot_position(m, 0.0, 0.0, 0.0, m.nominal_joints[0], m.nominal_joints[1]);
  s.q[1] = terrain::height_at(field, x0) - foot[1] + m.foot_radius;
  return s;
}

}  // namespace bip::sim
