#include <doctest.h>

#include <cmath>

#include "bip/sim.hpp"

using namespace bip;
using namespace bip::sim;

namespace {

terrain::HeightField flat() {
  return terrain::generate_terrain(terrain::Kind::Flat, 0.0, 0, 20.0);
}

RobotModel passive_model() {
  RobotModel m;
  m.kp = 0.0;
  m.kd = 0.0;
  return m;
}

/// State floating far above the ground, optionally moving.
SimState airborne_state(const RobotModel& m) {
  SimState s;
  s.q = {0.0, 10.0, 0.0, m.nominal_joints[0], m.nominal_joints[1], m.nominal_joints[2],
         m.nominal_joints[3]};
  return s;
}

}  // namespace

TEST_CASE("pd_torque nominal gains and 0.1 rad error") {
  RobotModel m;
  PdCommand cmd;
  std::array<double, 4> qj = m.nominal_joints;
  for (auto& q : qj) q -= 0.1;  // 0.1 rad position error
  std::array<double, 4> qdj{};
  auto tau = pd_torque(cmd, qj, qdj, 20.0, 0.5, m);
  for (double t : tau) CHECK(t == doctest::Approx(2.0));
}

TEST_CASE("pd_torque damping only") {
  RobotModel m;
  PdCommand cmd;
  std::array<double, 4> qj = m.nominal_joints;
  std::array<double, 4> qdj{1.0, 1.0, 1.0, 1.0};
  auto tau = pd_torque(cmd, qj, qdj, 20.0, 0.5, m);
  for (double t : tau) CHECK(t == doctest::Approx(-0.5));
}

TEST_CASE("pd_torque gain at the lower randomization bound") {
  CHECK(0.8 * 20.0 == doctest::Approx(16.0));
  RobotModel m;
  PdCommand cmd;
  std::array<double, 4> qj = m.nominal_joints;
  for (auto& q : qj) q -= 1.0;
  std::array<double, 4> qdj{};
  auto tau = pd_torque(cmd, qj, qdj, 16.0, 0.5, m);
  for (double t : tau) CHECK(t == doctest::Approx(16.0));
}

TEST_CASE("pd_torque clips to the torque limit") {
  RobotModel m;
  PdCommand cmd;
  std::array<double, 4> qj = m.nominal_joints;
  for (auto& q : qj) q -= 10.0;
  std::array<double, 4> qdj{};
  auto tau = pd_torque(cmd, qj, qdj, 20.0, 0.5, m);
  for (double t : tau) CHECK(t == doctest::Approx(m.torque_limit));
}

TEST_CASE("contact_force: no penetration gives zero") {
  RobotModel m;
  auto f = contact_force(-0.01, 1.0, 2.0, 0.5, 0.0, m);
  CHECK(f[0] == 0.0);
  CHECK(f[1] == 0.0);
}

TEST_CASE("contact_force: spring law") {
  RobotModel m;  // kn = 1e4
  auto f = contact_force(0.001, 0.0, 0.0, 0.5, 0.0, m);
  CHECK(f[1] == doctest::Approx(10.0));
}

TEST_CASE("contact_force: friction cone clamp") {
  RobotModel m;
  // tangential demand kt*v = 500*0.2 = 100 N, cone limit mu*Fz = 5 N
  auto f = contact_force(0.001, 0.0, 0.2, 0.5, 0.0, m);
  CHECK(f[1] == doctest::Approx(10.0));
  CHECK(f[0] == doctest::Approx(-5.0));
}

TEST_CASE("step: free fall velocity increment is exact") {
  RobotModel m = passive_model();
  auto field = flat();
  SimState s = airborne_state(m);
  const double dt = 0.02;
  SimState s2 = step(s, PdCommand{}, m, DomainParams{}, field, dt);
  CHECK(s2.qd[1] == doctest::Approx(-9.81 * dt).epsilon(1e-12));
}

TEST_CASE("step: zero gravity, zero torque advances q by qd*dt") {
  RobotModel m = passive_model();
  auto field = flat();
  SimState s = airborne_state(m);
  s.qd[0] = 0.7;
  s.qd[1] = -0.3;
  StepOptions opt;
  opt.gravity = 0.0;
  const double dt = 0.02;
  SimState s2 = step(s, PdCommand{}, m, DomainParams{}, field, dt, opt);
  CHECK(s2.q[0] == doctest::Approx(0.7 * dt).epsilon(1e-12));
  CHECK(s2.q[1] == doctest::Approx(10.0 - 0.3 * dt).epsilon(1e-12));
  for (std::size_t i = 0; i < kNq; ++i) CHECK(s2.qd[i] == doctest::Approx(s.qd[i]).epsilon(1e-12));
}

TEST_CASE("step: trajectory matches a 10x finer-substep reference") {
  RobotModel m = passive_model();
  auto field = flat();
  SimState a = airborne_state(m);
  a.q[1] = 50.0;  // keep clear of the ground for the whole second
  a.q[2] = 0.3;
  a.qd[2] = 1.0;
  a.qd[3] = -0.5;
  SimState b = a;
  RobotModel fine = m;
  fine.substep_dt = m.substep_dt / 10.0;
  for (int i = 0; i < 50; ++i) {
    a = step(a, PdCommand{}, m, DomainParams{}, field, 0.02);
    b = step(b, PdCommand{}, fine, DomainParams{}, field, 0.02);
  }
  CHECK(std::abs(a.q[2] - b.q[2]) < 1e-3);
  CHECK(std::abs(a.q[3] - b.q[3]) < 1e-3);
  CHECK(std::abs(a.q[4] - b.q[4]) < 1e-3);
}

TEST_CASE("momentum conservation without gravity, torque, or contact") {
  RobotModel m = passive_model();
  auto field = flat();
  SimState s = airborne_state(m);
  s.qd = {0.4, -0.2, 0.9, 1.3, -0.7, 0.5, 0.2};
  StepOptions opt;
  opt.gravity = 0.0;
  const auto p0 = momentum(s, m, DomainParams{});
  const int n_steps = 25;  // 500 substeps
  for (int i = 0; i < n_steps; ++i) s = step(s, PdCommand{}, m, DomainParams{}, field, 0.02, opt);
  const auto p1 = momentum(s, m, DomainParams{});
  const double per_step = 1e-10 * 20 * n_steps;  // budget per substep
  CHECK(std::abs(p1[0] - p0[0]) < per_step);
  CHECK(std::abs(p1[1] - p0[1]) < per_step);
  CHECK(std::abs(p1[2] - p0[2]) < per_step);
}

TEST_CASE("energy of an undamped contact-free swing grows less than 1% over 1 s") {
  RobotModel m = passive_model();
  auto field = flat();
  SimState s = airborne_state(m);
  s.q[1] = 50.0;
  s.qd[2] = 0.8;
  s.qd[3] = -1.0;
  s.qd[5] = 0.6;
  DomainParams dom;
  const double z_ref = 0.0;
  const double e0 = kinetic_energy(s.q, s.qd, m, dom) + potential_energy(s.q, m, dom);
  double e_max = e0;
  for (int i = 0; i < 50; ++i) {
    s = step(s, PdCommand{}, m, dom, field, 0.02);
    const double e = kinetic_energy(s.q, s.qd, m, dom) + potential_energy(s.q, m, dom);
    e_max = std::max(e_max, e);
  }
  CHECK((e_max - e0) / std::abs(e0) < 0.01);
  (void)z_ref;
}

TEST_CASE("friction cone holds at every contact step") {
  RobotModel m;
  auto field = flat();
  DomainParams dom;
  dom.friction = 0.6;
  SimState s = initial_state(m, field);
  s.qd[0] = 0.5;
  Rng rng(99);
  for (int i = 0; i < 200; ++i) {
    PdCommand cmd;
    for (auto& o : cmd.offsets) o = rng.uniform(-0.3, 0.3);
    s = step(s, cmd, m, dom, field, 0.02);
    for (int side = 0; side < 2; ++side) {
      CHECK(s.foot_force[side][1] >= 0.0);
      CHECK(std::abs(s.foot_force[side][0]) <= dom.friction * s.foot_force[side][1] + 1e-9);
    }
    if (check_termination(s, m, dom, field).terminated) break;
  }
}

TEST_CASE("step is deterministic") {
  RobotModel m;
  auto field = flat();
  SimState s = initial_state(m, field);
  PdCommand cmd;
  cmd.offsets = {0.1, -0.2, 0.05, 0.0};
  SimState a = step(s, cmd, m, DomainParams{}, field, 0.02);
  SimState b = step(s, cmd, m, DomainParams{}, field, 0.02);
  CHECK(a.q == b.q);
  CHECK(a.qd == b.qd);
}

TEST_CASE("termination: nominal standing pose is fine") {
  RobotModel m;
  auto field = flat();
  SimState s = initial_state(m, field);
  auto t = check_termination(s, m, DomainParams{}, field);
  CHECK_FALSE(t.terminated);
}

TEST_CASE("termination: trunk at terrain height is body contact") {
  RobotModel m;
  auto field = flat();
  SimState s = initial_state(m, field);
  s.q[1] = 0.0;  // hip dropped to the ground
  auto t = check_termination(s, m, DomainParams{}, field);
  CHECK(t.terminated);
  CHECK(t.reason == TerminationReason::BodyContact);
}

TEST_CASE("termination: pitch beyond the fall threshold") {
  RobotModel m;
  auto field = flat();
  SimState s = initial_state(m, field);
  s.q[2] = 1.6;
  auto t = check_termination(s, m, DomainParams{}, field);
  CHECK(t.terminated);
  CHECK(t.reason == TerminationReason::Fall);
}

TEST_CASE("termination: non-finite state reports divergence") {
  RobotModel m;
  auto field = flat();
  SimState s = initial_state(m, field);
  s.qd[3] = std::nan("");
  auto t = check_termination(s, m, DomainParams{}, field);
  CHECK(t.terminated);
  CHECK(t.reason == TerminationReason::Diverged);
}

TEST_CASE("randomize_domain samples stay inside the declared ranges") {
  DomainRanges r;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    auto d = randomize_domain(seed, r);
    CHECK(d.mass_scale >= 0.8);
    CHECK(d.mass_scale <= 1.2);
    CHECK(d.payload_mass >= 0.0);
    CHECK(d.payload_mass <= 3.0);
    CHECK(d.payload_offset_x >= -0.1);
    CHECK(d.payload_offset_x <= 0.1);
    CHECK(d.friction >= 0.05);
    CHECK(d.friction <= 2.75);
    CHECK(d.restitution >= 0.0);
    CHECK(d.restitution <= 1.0);
    CHECK(d.kp_scale >= 0.8);
    CHECK(d.kp_scale <= 1.2);
    CHECK(d.kd_scale >= 0.8);
    CHECK(d.kd_scale <= 1.2);
  }
}

TEST_CASE("randomize_domain is deterministic and handles degenerate ranges") {
  DomainRanges r;
  auto a = randomize_domain(7, r);
  auto b = randomize_domain(7, r);
  CHECK(a.friction == b.friction);
  CHECK(a.payload_mass == b.payload_mass);

  DomainRanges fixed;
  fixed.friction = {0.9, 0.9};
  auto c = randomize_domain(123, fixed);
  CHECK(c.friction == 0.9);

  DomainRanges bad;
  bad.friction = {2.0, 1.0};
  CHECK_THROWS_AS(randomize_domain(0, bad), ConfigError);
}

TEST_CASE("apply_push: impulse-momentum on a free-floating robot") {
  RobotModel m = passive_model();
  auto field = flat();
  SimState s = airborne_state(m);
  StepOptions opt;
  opt.gravity = 0.0;
  const double m_tot = m.total_mass();
  apply_push(s, {10.0 * m_tot, 0.0}, 0.1);
  for (int i = 0; i < 5; ++i) s = step(s, PdCommand{}, m, DomainParams{}, field, 0.02, opt);
  const auto p = momentum(s, m, DomainParams{});
  CHECK(p[0] / m_tot == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("apply_push: zero force leaves the trajectory unchanged") {
  RobotModel m;
  auto field = flat();
  SimState a = initial_state(m, field);
  SimState b = a;
  apply_push(b, {0.0, 0.0}, 0.1);
  for (int i = 0; i < 10; ++i) {
    a = step(a, PdCommand{}, m, DomainParams{}, field, 0.02);
    b = step(b, PdCommand{}, m, DomainParams{}, field, 0.02);
  }
  CHECK(a.q == b.q);
  CHECK(a.qd == b.qd);
}

TEST_CASE("apply_push rejects non-positive duration") {
  RobotModel m;
  auto field = flat();
  SimState s = initial_state(m, field);
  CHECK_THROWS_AS(apply_push(s, {1.0, 0.0}, 0.0), ConfigError);
}

// A passive PD hold cannot balance a point-foot planar biped; the state
// must stay finite and the fall must be detected cleanly, not diverge.
TEST_CASE("passive standing stays finite and terminates cleanly") {
  RobotModel m;
  auto field = flat();
  DomainParams dom;
  SimState s = initial_state(m, field);
  int survived = 0;
  for (int i = 0; i < 500; ++i) {
    s = step(s, PdCommand{}, m, dom, field, 0.02);
    REQUIRE(s.finite());
    auto t = check_termination(s, m, dom, field);
    if (t.terminated) {
      CHECK((t.reason == TerminationReason::Fall || t.reason == TerminationReason::BodyContact));
      break;
    }
    ++survived;
  }
  CHECK(survived >= 10);
}

TEST_CASE("fast dynamics kernels agree with the Jacobian-based reference") {
  RobotModel m;
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    DomainParams dom;
    dom.mass_scale = 0.8 + 0.4 * rng.uniform();
    dom.payload_mass = 2.0 * rng.uniform();
    dom.payload_offset_x = 0.2 * (rng.uniform() - 0.5);
    Vec q(kNq), qd(kNq);
    for (auto& v : q) v = rng.normal();
    for (auto& v : qd) v = rng.normal();

    const Mat ref = detail::mass_matrix(q, m, dom);
    const auto fast = detail::mass_matrix7(q, m, dom);
    for (std::size_t i = 0; i < kNq; ++i)
      for (std::size_t j = 0; j < kNq; ++j)
        CHECK(fast[i * kNq + j] == doctest::Approx(ref(i, j)).epsilon(1e-12));

    std::array<double, kNq> u{};
    for (std::size_t i = 0; i < kNq; ++i) u[i] = qd[i];
    CHECK(detail::kinetic_energy7(q, u, m, dom) ==
          doctest::Approx(kinetic_energy(q, qd, m, dom)).epsilon(1e-12));

    const Vec gref = detail::gravity_force(q, m, dom, kGravity);
    const auto gfast = detail::gravity_force7(q, m, dom, kGravity);
    for (std::size_t i = 0; i < kNq; ++i)
      CHECK(gfast[i] == doctest::Approx(gref[i]).epsilon(1e-12));

    // solve7 inverts the same system as the dense path
    const auto x = detail::solve7(fast, u);
    const auto back = detail::matvec7(fast, x);
    for (std::size_t i = 0; i < kNq; ++i)
      CHECK(back[i] == doctest::Approx(qd[i]).epsilon(1e-9));

    // analytic inertia bias dT/dq_k matches central finite differences
    const auto bias = detail::inertia_bias7(detail::fast_geom(q, m, dom), u);
    CHECK(bias[0] == 0.0);
    CHECK(bias[1] == 0.0);
    const double hfd = 1e-6;
    for (std::size_t k = 2; k < kNq; ++k) {
      Vec qp = q, qm2 = q;
      qp[k] += hfd;
      qm2[k] -= hfd;
      const double fd = (kinetic_energy(qp, qd, m, dom) - kinetic_energy(qm2, qd, m, dom)) /
                        (2.0 * hfd);
      CHECK(bias[k] == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}
