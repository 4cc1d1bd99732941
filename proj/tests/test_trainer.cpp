#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "bip/trainer.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace bip;

namespace {

// Small teacher (tiny hidden layers, same interface dims) for gradient checks.
trainer::TeacherPolicy tiny_teacher(Rng& rng) {
  trainer::TeacherPolicy p;
  p.terrain_enc = nn::make_mlp("t_enc", {trainer::kTerrainDim, 6, trainer::kTerrainLatentDim},
                               nn::Activation::Tanh, rng);
  p.priv_enc = nn::make_mlp("p_enc", {trainer::kPrivDim, 6, trainer::kPrivLatentDim},
                            nn::Activation::Tanh, rng);
  p.trunk = nn::make_mlp("trunk", {trainer::kTrunkInDim, 8}, nn::Activation::Tanh, rng);
  p.trunk.layers.back().act = nn::Activation::Tanh;
  p.action_head = nn::make_mlp("a_head", {8, trainer::kActionDim}, nn::Activation::Tanh, rng);
  p.value_head = nn::make_mlp("v_head", {8, 1}, nn::Activation::Tanh, rng);
  p.log_std.assign(trainer::kActionDim, -0.5);
  p.check();
  return p;
}

std::vector<double*> teacher_param_ptrs(trainer::TeacherPolicy& p) {
  std::vector<double*> out;
  for (nn::Mlp* net : {&p.terrain_enc, &p.priv_enc, &p.trunk, &p.action_head, &p.value_head}) {
    const auto ptrs = testutil::param_ptrs(*net);
    out.insert(out.end(), ptrs.begin(), ptrs.end());
  }
  for (auto& v : p.log_std) out.push_back(&v);
  return out;
}

Vec teacher_grad_flat(const trainer::TeacherGrad& g) {
  Vec out;
  for (const nn::Grad* gr : {&g.te, &g.pe, &g.trunk, &g.ah, &g.vh}) {
    const Vec f = testutil::flatten_grad(*gr);
    out.insert(out.end(), f.begin(), f.end());
  }
  out.insert(out.end(), g.log_std.begin(), g.log_std.end());
  return out;
}

// Synthetic rollout buffer with random observations and arbitrary old
// log-probs, sufficient to exercise every term of the PPO loss.
trainer::RolloutBuffer synthetic_buffer(const trainer::TeacherPolicy& p, std::size_t n_envs,
                                        std::size_t n_steps, Rng& rng) {
  trainer::RolloutBuffer b;
  b.n_envs = n_envs;
  b.n_steps = n_steps;
  const std::size_t n = n_envs * n_steps;
  b.proprio.resize(n);
  b.priv.resize(n);
  b.terr.resize(n);
  b.raw_action.resize(n);
  b.log_prob.resize(n);
  b.value.resize(n);
  b.reward.resize(n);
  b.r_task.assign(n, 0.0);
  b.r_style.assign(n, 0.0);
  b.r_reg.assign(n, 0.0);
  b.done.assign(n, 0);
  b.bootstrap.assign(n_envs, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    b.proprio[k].resize(trainer::kProprioDim);
    for (auto& v : b.proprio[k]) v = 0.5 * rng.normal();
    b.priv[k].resize(trainer::kPrivDim);
    for (auto& v : b.priv[k]) v = 0.5 * rng.normal();
    b.terr[k].resize(trainer::kTerrainDim);
    for (auto& v : b.terr[k]) v = 0.5 * rng.normal();
    const auto ev = trainer::teacher_forward(p, b.proprio[k], b.priv[k], b.terr[k]);
    const auto s = trainer::sample_action(ev.mean, p.log_std, rng, 1.0);
    b.raw_action[k] = s.raw;
    // perturbed old log-prob so the ratio is not exactly 1
    b.log_prob[k] = s.log_prob + 0.05 * rng.normal();
    b.value[k] = ev.value;
    b.reward[k] = rng.normal();
  }
  return b;
}

}  // namespace

TEST_CASE("gae reproduces the hand-worked two-step example") {
  // gamma=0.9, lambda=0.8, r=[1,1], V=0 everywhere:
  // A_1 = 1, A_0 = 1 + 0.9*0.8*1 = 1.72, returns equal advantages.
  const auto [adv, ret] = trainer::gae({1.0, 1.0}, {0.0, 0.0, 0.0}, {0, 0}, 0.9, 0.8);
  CHECK(adv[1] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(adv[0] == doctest::Approx(1.72).epsilon(1e-15));
  CHECK(ret[0] == doctest::Approx(1.72).epsilon(1e-15));
  CHECK(ret[1] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("gae respects episode boundaries and validates shapes") {
  const auto [adv, ret] = trainer::gae({1.0, 1.0}, {0.0, 5.0, 7.0}, {1, 0}, 0.9, 0.8);
  // done after step 0: no bootstrap through V_1 and no credit from A_1
  CHECK(adv[0] == doctest::Approx(1.0));
  CHECK(adv[1] == doctest::Approx(1.0 + 0.9 * 7.0 - 5.0));
  CHECK_THROWS_AS(trainer::gae({1.0}, {0.0}, {0}, 0.9, 0.8), ShapeError);
  CHECK_THROWS_AS(trainer::gae({1.0}, {0.0, 0.0}, {0, 0}, 0.9, 0.8), ShapeError);
}

TEST_CASE("gae with lambda=1 and no dones equals discounted return minus value") {
  Rng rng(3);
  const std::size_t n = 40;
  Vec r(n), v(n + 1);
  for (auto& x : r) x = rng.normal();
  for (auto& x : v) x = rng.normal();
  std::vector<std::uint8_t> dones(n, 0);
  const double gamma = 0.97;
  const auto [adv, ret] = trainer::gae(r, v, dones, gamma, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    double g = std::pow(gamma, static_cast<double>(n - i)) * v[n];
    for (std::size_t j = n; j-- > i;) {
      // accumulate r_j * gamma^{j-i}
    }
    g = v[n];
    for (std::size_t j = n; j-- > i;) g = r[j] + gamma * g;
    CHECK(std::abs(adv[i] - (g - v[i])) < 1e-10);
  }
}

TEST_CASE("sample_action log-prob and clipping behave as specified") {
  Rng rng(7);
  const Vec mean = {0.1, -0.2, 0.3, 2.5};
  const Vec log_std = {-0.5, -1.0, 0.0, -2.0};

  SUBCASE("log-prob of the mean is the analytic maximum density") {
    double expect = 0.0;
    for (double ls : log_std) expect += -ls - 0.5 * std::log(2.0 * M_PI);
    CHECK(trainer::gaussian_log_prob(mean, log_std, mean) ==
          doctest::Approx(expect).epsilon(1e-14));
  }
  SUBCASE("degenerate variance collapses the sample onto the mean") {
    const Vec tight(4, -30.0);
    const auto s = trainer::sample_action(mean, tight, rng, 10.0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(s.raw[i] - mean[i]) < 1e-9);
  }
  SUBCASE("log-prob is computed from the raw sample, before clipping") {
    const auto s = trainer::sample_action(mean, log_std, rng, 0.5);
    for (double a : s.action) CHECK(std::abs(a) <= 0.5 + 1e-15);
    CHECK(s.log_prob ==
          doctest::Approx(trainer::gaussian_log_prob(mean, log_std, s.raw)).epsilon(1e-14));
    // mean[3]=2.5 with tiny std: action saturates at the bound, raw does not
    Rng r2(1);
    const auto s2 = trainer::sample_action(mean, {-5, -5, -5, -5}, r2, 0.5);
    CHECK(s2.action[3] == doctest::Approx(0.5));
    CHECK(s2.raw[3] > 2.0);
  }
  SUBCASE("seeded sampling is reproducible") {
    Rng a(42), b(42);
    const auto sa = trainer::sample_action(mean, log_std, a, 1.0);
    const auto sb = trainer::sample_action(mean, log_std, b, 1.0);
    CHECK(sa.raw == sb.raw);
    CHECK(sa.log_prob == sb.log_prob);
  }
  SUBCASE("non-finite parameters are rejected") {
    Vec bad = mean;
    bad[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(trainer::sample_action(bad, log_std, rng, 1.0), NumericError);
  }
}

TEST_CASE("task reward matches the exponential tracking form") {
  CHECK(trainer::task_reward(1.0, 1.0, 0.0, 0.0, 1.0, 0.5) == doctest::Approx(1.5));
  CHECK(trainer::task_reward(1.0, 0.0, 0.0, 0.0, 1.0, 0.5) ==
        doctest::Approx(std::exp(-1.0) + 0.5));
  CHECK(trainer::task_reward(0.5, 1.5, 1.0, -1.0, 1.0, 0.5) ==
        doctest::Approx(std::exp(-1.0) + 0.5 * std::exp(-2.0)));
  // symmetric in the error sign
  CHECK(trainer::task_reward(1.0, 1.3, 0.0, 0.0, 1.0, 0.5) ==
        doctest::Approx(trainer::task_reward(1.0, 0.7, 0.0, 0.0, 1.0, 0.5)));
  CHECK_THROWS_AS(trainer::task_reward(0, 0, 0, 0, -1.0, 0.5), ConfigError);
}

TEST_CASE("regularization reward penalizes each term with its coefficient") {
  sim::RobotModel m;
  const Vec zero(4, 0.0);
  const std::array<double, 4> no_tau{};
  const std::array<double, 4> q_ok{0.3, -0.6, 0.3, -0.6};
  // each term in isolation
  CHECK(trainer::regularization_reward({1, 0, 0, 0}, zero, no_tau, 0.0, q_ok, m) ==
        doctest::Approx(-0.01));
  CHECK(trainer::regularization_reward(zero, zero, {2, 0, 0, 0}, 0.0, q_ok, m) ==
        doctest::Approx(-2e-4 * 4.0));
  CHECK(trainer::regularization_reward(zero, zero, no_tau, 0.5, q_ok, m) ==
        doctest::Approx(-0.25));
  // thigh limit hi = 1.8: violation 0.2 -> -5 * 0.04
  CHECK(trainer::regularization_reward(zero, zero, no_tau, 0.0, {2.0, -0.6, 0.3, -0.6}, m) ==
        doctest::Approx(-5.0 * 0.04));
  // inside the limits there is no limit penalty
  CHECK(trainer::regularization_reward(zero, zero, no_tau, 0.0, q_ok, m) == doctest::Approx(0.0));
  // compose is a plain sum
  CHECK(trainer::compose_reward(1.5, 0.75, -0.1) == doctest::Approx(2.15));
}

TEST_CASE("observation builders produce the documented layouts") {
  sim::RobotModel m;
  const auto field = terrain::generate_terrain(terrain::Kind::Flat, 0.0, 0, 40.0);
  auto st = sim::initial_state(m, field, 0.0);
  st.qd[0] = 1.0;
  st.qd[2] = 2.0;
  const Vec prev = {0.1, 0.2, 0.3, 0.4};

  SUBCASE("proprio: gravity, body velocity, joints, previous action") {
    const Vec o = trainer::build_proprio(st, prev);
    REQUIRE(o.size() == trainer::kProprioDim);
    CHECK(o[0] == doctest::Approx(0.0));  // level trunk: gravity is (0, -1)
    CHECK(o[1] == doctest::Approx(-1.0));
    CHECK(o[2] == doctest::Approx(1.0));  // body-frame forward velocity
    CHECK(o[4] == doctest::Approx(2.0 * trainer::kAngVelScale));
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(o[5 + i] == doctest::Approx(st.q[3 + i]));
      CHECK(o[13 + i] == doctest::Approx(prev[i]));
    }
    // pitching the trunk rotates the projected gravity
    auto st2 = st;
    st2.q[2] = M_PI / 2.0;
    const Vec o2 = trainer::build_proprio(st2, prev);
    CHECK(o2[0] == doctest::Approx(-1.0));
    CHECK(o2[1] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK_THROWS_AS(trainer::build_proprio(st, {0.0, 0.0}), ShapeError);
  }
  SUBCASE("privileged: friction, restitution, forces, collision flags") {
    sim::DomainParams dom;
    dom.friction = 0.6;
    dom.restitution = 0.2;
    st.foot_force = {{{1.0, 90.0}, {-2.0, 50.0}}};
    st.ext_force = {30.0, 0.0};
    st.body_contact = {false, true, false, false, true};
    const Vec o = trainer::build_privileged(st, dom);
    REQUIRE(o.size() == trainer::kPrivDim);
    CHECK(o[0] == doctest::Approx(0.6));
    CHECK(o[1] == doctest::Approx(0.2));
    CHECK(o[3] == doctest::Approx(90.0 * trainer::kForceScale));
    CHECK(o[4] == doctest::Approx(-2.0 * trainer::kForceScale));
    CHECK(o[6] == doctest::Approx(30.0 * trainer::kForceScale));
    CHECK(o[8] == 0.0);
    CHECK(o[9] == 1.0);
    CHECK(o[12] == 1.0);
  }
  SUBCASE("terrain observation is the 11-point relative height scan") {
    const Vec o = trainer::build_terrain_obs(field, st);
    REQUIRE(o.size() == trainer::kTerrainDim);
    for (double v : o) CHECK(v == doctest::Approx(st.q[1]));  // flat ground at z=0
  }
}

TEST_CASE("teacher policy has the specified latent structure") {
  Rng rng(0);
  auto p = trainer::make_teacher(rng);
  CHECK(p.terrain_enc.out_dim() == 16);
  CHECK(p.priv_enc.out_dim() == 8);
  CHECK(p.trunk.in_dim() == 41);
  CHECK(p.action_head.out_dim() == 4);
  CHECK(p.value_head.out_dim() == 1);
  CHECK(p.log_std.size() == 4);

  Vec proprio(trainer::kProprioDim), priv(trainer::kPrivDim), terr(trainer::kTerrainDim, 0.0);
  for (auto& v : proprio) v = rng.normal();
  for (auto& v : priv) v = rng.normal();
  const auto e0 = trainer::teacher_forward(p, proprio, priv, terr);
  CHECK(e0.le.size() == 16);
  CHECK(e0.lp.size() == 8);
  CHECK(e0.mean.size() == 4);

  // perturbing the terrain observation changes the terrain latent only
  Vec terr2 = terr;
  terr2[5] += 0.3;
  const auto e1 = trainer::teacher_forward(p, proprio, priv, terr2);
  double dle = 0.0;
  for (std::size_t i = 0; i < 16; ++i) dle += std::abs(e1.le[i] - e0.le[i]);
  CHECK(dle > 1e-6);
  for (std::size_t i = 0; i < 8; ++i) CHECK(e1.lp[i] == e0.lp[i]);

  // perturbing the privileged observation changes the privileged latent only
  Vec priv2 = priv;
  priv2[0] += 0.3;
  const auto e2 = trainer::teacher_forward(p, proprio, priv2, terr);
  for (std::size_t i = 0; i < 16; ++i) CHECK(e2.le[i] == e0.le[i]);
  double dlp = 0.0;
  for (std::size_t i = 0; i < 8; ++i) dlp += std::abs(e2.lp[i] - e0.lp[i]);
  CHECK(dlp > 1e-6);

  CHECK_THROWS_AS(trainer::teacher_forward(p, priv, priv, terr), ShapeError);
}

TEST_CASE("ppo surrogate at ratio one reduces to the mean advantage") {
  Rng rng(11);
  auto p = tiny_teacher(rng);
  auto b = synthetic_buffer(p, 2, 8, rng);
  // make the stored log-probs exact so every ratio is exactly 1
  for (std::size_t k = 0; k < b.size(); ++k) {
    const auto ev = trainer::teacher_forward(p, b.proprio[k], b.priv[k], b.terr[k]);
    b.log_prob[k] = trainer::gaussian_log_prob(ev.mean, p.log_std, b.raw_action[k]);
  }
  Vec adv(b.size()), ret(b.size(), 0.0);
  double mean_adv = 0.0;
  for (std::size_t k = 0; k < b.size(); ++k) {
    adv[k] = rng.normal();
    mean_adv += adv[k] / static_cast<double>(b.size());
  }
  trainer::PpoConfig cfg;
  cfg.value_coef = 0.0;
  cfg.entropy_coef = 0.0;
  std::vector<std::size_t> idxs(b.size());
  std::iota(idxs.begin(), idxs.end(), std::size_t{0});
  trainer::PpoStats stats;
  const auto [loss, g] = trainer::ppo_minibatch_loss(p, b, idxs, adv, ret, cfg, &stats);
  CHECK(loss == doctest::Approx(-mean_adv).epsilon(1e-12));
  CHECK(stats.kl == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(stats.clip_fraction == 0.0);
}

TEST_CASE("ppo loss gradient matches central finite differences") {
  Rng rng(5);
  auto p = tiny_teacher(rng);
  auto b = synthetic_buffer(p, 2, 6, rng);
  Vec adv(b.size()), ret(b.size());
  for (std::size_t k = 0; k < b.size(); ++k) {
    adv[k] = rng.normal();
    ret[k] = rng.normal();
  }
  std::vector<std::size_t> idxs(b.size());
  std::iota(idxs.begin(), idxs.end(), std::size_t{0});
  trainer::PpoConfig cfg;  // all three loss terms active

  const auto [loss, g] = trainer::ppo_minibatch_loss(p, b, idxs, adv, ret, cfg);
  const Vec analytic = teacher_grad_flat(g);
  const auto ptrs = teacher_param_ptrs(p);
  REQUIRE(ptrs.size() == analytic.size());

  Vec fd(ptrs.size());
  const double h = 1e-6;
  for (std::size_t i = 0; i < ptrs.size(); ++i) {
    const double orig = *ptrs[i];
    *ptrs[i] = orig + h;
    const double lp = trainer::ppo_minibatch_loss(p, b, idxs, adv, ret, cfg).first;
    *ptrs[i] = orig - h;
    const double lm = trainer::ppo_minibatch_loss(p, b, idxs, adv, ret, cfg).first;
    *ptrs[i] = orig;
    fd[i] = (lp - lm) / (2.0 * h);
  }
  CHECK(testutil::max_rel_err(analytic, fd, 1e-7) < 1e-4);
}

TEST_CASE("ppo_update with zero advantages and zero coefficients is a no-op") {
  Rng rng(9);
  auto p = tiny_teacher(rng);
  auto b = synthetic_buffer(p, 2, 8, rng);
  // zero rewards, zero values, zero bootstrap: all advantages are exactly 0
  std::fill(b.reward.begin(), b.reward.end(), 0.0);
  std::fill(b.value.begin(), b.value.end(), 0.0);
  std::fill(b.bootstrap.begin(), b.bootstrap.end(), 0.0);
  trainer::PpoConfig cfg;
  cfg.value_coef = 0.0;
  cfg.entropy_coef = 0.0;
  auto adam = trainer::TeacherAdam::make(p, cfg.lr);
  const auto before = p;
  Rng upd(1);
  trainer::ppo_update(p, b, adam, cfg, upd);
  const auto pa = teacher_param_ptrs(p);
  auto before_copy = before;
  const auto pb = teacher_param_ptrs(before_copy);
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i] == *pb[i]);
}

TEST_CASE("ppo_update rejects non-finite data") {
  Rng rng(13);
  auto p = tiny_teacher(rng);
  auto b = synthetic_buffer(p, 1, 8, rng);
  b.log_prob[3] = std::numeric_limits<double>::infinity();
  trainer::PpoConfig cfg;
  auto adam = trainer::TeacherAdam::make(p, cfg.lr);
  Rng upd(1);
  CHECK_THROWS_AS(trainer::ppo_update(p, b, adam, cfg, upd), NumericError);
}

TEST_CASE("environment stepping, termination, and reset") {
  sim::RobotModel m;
  trainer::EnvConfig ec;
  ec.randomize_domain = false;
  ec.init_noise = 0.0;
  ec.max_steps = 20;
  auto e = trainer::make_env(m, ec, 123);
  CHECK(e.cmd_vx == doctest::Approx(0.5));
  CHECK(e.steps_in_episode == 0);

  // standing with zero offsets keeps the robot alive for the whole horizon;
  // the episode ends via truncation and the env resets itself
  const Vec hold(4, 0.0);
  int done_at = -1;
  int ep_len = 0;
  for (int t = 0; t < 25; ++t) {
    const auto r = trainer::env_step(e, hold, nullptr, 1.0);
    CHECK(std::isfinite(r.reward));
    CHECK(r.r_style == 0.0);  // no discriminator attached
    if (r.done && done_at < 0) {
      done_at = t;
      ep_len = r.episode_length;
    }
  }
  CHECK(done_at == 19);
  CHECK(ep_len == 20);
  CHECK(e.steps_in_episode < 20);  // reset happened

  // tipping the trunk past the fall threshold terminates immediately
  auto e2 = trainer::make_env(m, ec, 7);
  e2.st.q[2] = 2.0;
  const auto r2 = trainer::env_step(e2, hold, nullptr, 1.0);
  CHECK(r2.done);
  CHECK(r2.reason == sim::TerminationReason::Fall);
  CHECK(e2.steps_in_episode == 0);  // env reset itself
}

TEST_CASE("collect_rollouts fills the buffer and a frozen discriminator gives style 1") {
  sim::RobotModel m;
  trainer::EnvConfig ec;
  ec.randomize_domain = false;
  Rng rng(0);
  auto p = tiny_teacher(rng);

  // single linear layer 24 -> 1 with zero weights and bias 1: D(x) = 1
  nn::Mlp disc;
  nn::Layer l;
  l.name = "d.l0";
  l.act = nn::Activation::Linear;
  l.w = Mat(1, 24);
  l.b = Vec(1, 1.0);
  disc.layers.push_back(l);

  std::vector<trainer::Env> envs;
  envs.push_back(trainer::make_env(m, ec, 1));
  envs.push_back(trainer::make_env(m, ec, 2));
  auto b = trainer::collect_rollouts(envs, p, &disc, 10, 1.0);
  REQUIRE(b.size() == 20);
  CHECK(b.transitions.size() == 20);
  for (std::size_t k = 0; k < b.size(); ++k) {
    CHECK(b.proprio[k].size() == trainer::kProprioDim);
    CHECK(b.priv[k].size() == trainer::kPrivDim);
    CHECK(b.terr[k].size() == trainer::kTerrainDim);
    CHECK(b.r_style[k] == doctest::Approx(1.0));  // style reward 1 every step
    CHECK(std::isfinite(b.log_prob[k]));
  }
  CHECK(b.bootstrap.size() == 2);

  // determinism: identical seeds give identical rewards
  std::vector<trainer::Env> envs2;
  envs2.push_back(trainer::make_env(m, ec, 1));
  envs2.push_back(trainer::make_env(m, ec, 2));
  auto b2 = trainer::collect_rollouts(envs2, p, &disc, 10, 1.0);
  CHECK(b.reward == b2.reward);
  CHECK(b.log_prob == b2.log_prob);
}

TEST_CASE("teacher checkpoint round trip preserves behavior") {
  Rng rng(21);
  auto p = trainer::make_teacher(rng);
  const std::string path = "teacher_roundtrip.ckpt";
  trainer::save_teacher(path, p);
  const auto q = trainer::load_teacher(path);
  Vec proprio(trainer::kProprioDim), priv(trainer::kPrivDim), terr(trainer::kTerrainDim);
  for (auto& v : proprio) v = rng.normal();
  for (auto& v : priv) v = rng.normal();
  for (auto& v : terr) v = rng.normal();
  const auto a = trainer::teacher_forward(p, proprio, priv, terr);
  const auto b = trainer::teacher_forward(q, proprio, priv, terr);
  CHECK(a.mean == b.mean);
  CHECK(a.value == b.value);
  CHECK(p.log_std == q.log_std);
  std::remove(path.c_str());
  CHECK_THROWS_AS(trainer::load_teacher("does_not_exist.ckpt"), IoError);
}

TEST_CASE("short training run logs a deterministic csv") {
  // two iterations with a tiny env count: exercises the full loop
  // (rollouts, discriminator updates, ppo, logging) end to end
  sim::RobotModel model;
  auto clip = refgen::make_walk(0.5);
  refgen::OptimizeOptions opt;
  const auto flat = terrain::generate_terrain(terrain::Kind::Flat, 0.0, 0, 20.0);
  const auto traj = refgen::optimize_gait(model, clip, flat, opt);
  const auto ref = refgen::to_reference(traj, model, 50.0, "walk");
  const auto demo = refgen::build_dataset({ref});

  trainer::TrainConfig cfg;
  cfg.iterations = 2;
  cfg.n_envs = 4;
  cfg.n_steps = 12;
  cfg.disc_batch = 16;
  cfg.env.randomize_domain = false;
  cfg.seed = 0;
  cfg.log_path = "train_smoke_a.csv";
  const auto ra = trainer::train_teacher(demo, cfg);
  CHECK(ra.iterations_run == 2);
  cfg.log_path = "train_smoke_b.csv";
  const auto rb = trainer::train_teacher(demo, cfg);

  std::ifstream fa("train_smoke_a.csv"), fb("train_smoke_b.csv");
  REQUIRE(fa);
  REQUIRE(fb);
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  const std::string ca = sa.str(), cb = sb.str();
  CHECK(ca == cb);
  CHECK(ca.substr(0, 9) == "iteration");
  // two data rows after the header
  CHECK(std::count(ca.begin(), ca.end(), '\n') == 3);
  std::remove("train_smoke_a.csv");
  std::remove("train_smoke_b.csv");
}
