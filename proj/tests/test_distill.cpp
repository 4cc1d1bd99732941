#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <numeric>

#include "bip/distill.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace bip;

namespace {

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
  return p;
}

distill::StudentPolicy tiny_student(const trainer::TeacherPolicy& teacher, Rng& rng) {
  distill::StudentPolicy s;
  s.memory_enc = nn::make_mlp("m_enc", {distill::kHistoryDim, 8, trainer::kLatentDim},
                              nn::Activation::Tanh, rng);
  s.trunk = teacher.trunk;
  s.action_head = teacher.action_head;
  s.check(&teacher);
  return s;
}

std::vector<double*> student_param_ptrs(distill::StudentPolicy& p) {
  std::vector<double*> out;
  for (nn::Mlp* net : {&p.memory_enc, &p.trunk, &p.action_head}) {
    const auto ptrs = testutil::param_ptrs(*net);
    out.insert(out.end(), ptrs.begin(), ptrs.end());
  }
  return out;
}

Vec student_grad_flat(const distill::StudentGrad& g) {
  Vec out;
  for (const nn::Grad* gr : {&g.me, &g.trunk, &g.ah}) {
    const Vec f = testutil::flatten_grad(*gr);
    out.insert(out.end(), f.begin(), f.end());
  }
  return out;
}

distill::DistillBuffer random_buffer(std::size_t n, Rng& rng) {
  distill::DistillBuffer b;
  for (std::size_t k = 0; k < n; ++k) {
    Vec po(trainer::kProprioDim), h(distill::kHistoryDim), a(trainer::kActionDim),
        l(trainer::kLatentDim);
    for (auto& v : po) v = 0.3 * rng.normal();
    for (auto& v : h) v = 0.3 * rng.normal();
    for (auto& v : a) v = 0.3 * rng.normal();
    for (auto& v : l) v = 0.3 * rng.normal();
    b.proprio.push_back(po);
    b.history.push_back(h);
    b.teacher_action.push_back(a);
    b.teacher_latent.push_back(l);
  }
  return b;
}

}  // namespace

TEST_CASE("observation history is ordered, padded, and excludes the current obs") {
  distill::ObservationHistory h;
  const Vec v0 = h.vector();
  REQUIRE(v0.size() == distill::kHistoryDim);
  for (double x : v0) CHECK(x == 0.0);  // zero padding at episode start

  // push two distinct observations; they must land in the newest slots
  Vec a(trainer::kProprioDim, 1.0), b(trainer::kProprioDim, 2.0);
  h.push(a);
  h.push(b);
  const Vec v = h.vector();
  // slots 0..42 still zero, slot 43 = a, slot 44 = b (oldest to newest)
  CHECK(v[42 * trainer::kProprioDim] == 0.0);
  CHECK(v[43 * trainer::kProprioDim] == 1.0);
  CHECK(v[44 * trainer::kProprioDim] == 2.0);

  // order sensitivity: pushing in the reverse order gives a different vector
  distill::ObservationHistory h2;
  h2.push(b);
  h2.push(a);
  CHECK(h2.vector() != v);

  // after 45 more pushes the original entries have been evicted
  Vec c(trainer::kProprioDim, 3.0);
  for (int i = 0; i < 45; ++i) h.push(c);
  const Vec v3 = h.vector();
  for (double x : v3) CHECK(x == 3.0);

  h.reset();
  for (double x : h.vector()) CHECK(x == 0.0);
  CHECK_THROWS_AS(h.push(Vec(3, 0.0)), ShapeError);
}

TEST_CASE("student policy mirrors the teacher's low-level structure") {
  Rng rng(0);
  const auto teacher = trainer::make_teacher(rng);
  const auto s = distill::make_student(teacher, rng);
  CHECK(s.memory_enc.in_dim() == 765);
  CHECK(s.memory_enc.out_dim() == 24);
  CHECK(s.trunk.in_dim() == 41);
  CHECK(s.action_head.out_dim() == 4);

  // structural identity is enforced against the teacher
  auto bad = s;
  bad.trunk.layers.pop_back();
  CHECK_THROWS_AS(bad.check(&teacher), ShapeError);

  // a fresh student with the teacher's trunk reproduces the teacher's
  // action whenever its latent happens to equal the teacher's latent
  Vec proprio(trainer::kProprioDim), priv(trainer::kPrivDim, 0.0),
      terr(trainer::kTerrainDim, 0.0);
  for (auto& v : proprio) v = 0.2 * rng.normal();
  const auto to = trainer::teacher_act(teacher, proprio, priv, terr);
  Vec latent(trainer::kLatentDim);
  std::copy(to.le.begin(), to.le.end(), latent.begin());
  std::copy(to.lp.begin(), to.lp.end(), latent.begin() + trainer::kTerrainLatentDim);
  const Vec h = nn::forward_only(s.trunk, distill::student_trunk_input(proprio, latent));
  const Vec mean = nn::forward_only(s.action_head, h);
  for (std::size_t i = 0; i < 4; ++i) CHECK(mean[i] == doctest::Approx(to.mean[i]));
}

TEST_CASE("distill loss uses the mean-square convention") {
  const Vec z4(4, 0.0), z24(24, 0.0);
  // action error (1,0,0,0): mean square over 4 dims = 0.25
  CHECK(distill::distill_loss({1, 0, 0, 0}, z4, z24, z24, 1.0) == doctest::Approx(0.25));
  // latent error of 1 in one of 24 dims weighted by lambda
  Vec l = z24;
  l[7] = 1.0;
  CHECK(distill::distill_loss(z4, z4, l, z24, 1.0) == doctest::Approx(1.0 / 24.0));
  CHECK(distill::distill_loss(z4, z4, l, z24, 2.0) == doctest::Approx(2.0 / 24.0));
  // both terms compose additively
  CHECK(distill::distill_loss({1, 0, 0, 0}, z4, l, z24, 1.0) ==
        doctest::Approx(0.25 + 1.0 / 24.0));
  CHECK(distill::distill_loss(z4, z4, z24, z24, 1.0) == doctest::Approx(0.0));
  CHECK_THROWS_AS(distill::distill_loss(z4, Vec(3, 0.0), z24, z24, 1.0), ShapeError);
}

TEST_CASE("distill minibatch gradient matches central finite differences") {
  Rng rng(4);
  const auto teacher = tiny_teacher(rng);
  auto s = tiny_student(teacher, rng);
  const auto b = random_buffer(6, rng);
  std::vector<std::size_t> idxs(b.size());
  std::iota(idxs.begin(), idxs.end(), std::size_t{0});

  const auto [loss, g] = distill::distill_minibatch_loss(s, b, idxs, 1.0);
  const Vec analytic = student_grad_flat(g);
  const auto ptrs = student_param_ptrs(s);
  REQUIRE(ptrs.size() == analytic.size());

  Vec fd(ptrs.size());
  const double h = 1e-6;
  for (std::size_t i = 0; i < ptrs.size(); ++i) {
    const double orig = *ptrs[i];
    *ptrs[i] = orig + h;
    const double lp = distill::distill_minibatch_loss(s, b, idxs, 1.0).first;
    *ptrs[i] = orig - h;
    const double lm = distill::distill_minibatch_loss(s, b, idxs, 1.0).first;
    *ptrs[i] = orig;
    fd[i] = (lp - lm) / (2.0 * h);
  }
  CHECK(testutil::max_rel_err(analytic, fd, 1e-7) < 1e-4);
}

TEST_CASE("supervised updates drive both mse terms down on fixed data") {
  Rng rng(8);
  const auto teacher = tiny_teacher(rng);
  auto s = tiny_student(teacher, rng);
  // perturb the student trunk so the action error starts nonzero
  for (auto& l : s.trunk.layers)
    for (auto& w : l.w.data()) w += 0.05 * rng.normal();
  const auto b = random_buffer(64, rng);
  std::vector<std::size_t> idxs(b.size());
  std::iota(idxs.begin(), idxs.end(), std::size_t{0});
  auto adam = distill::StudentAdam::make(s, 1e-3);
  double a0 = 0.0, l0 = 0.0, a1 = 0.0, l1 = 0.0;
  distill::distill_minibatch_loss(s, b, idxs, 1.0, &a0, &l0);
  for (int u = 0; u < 800; ++u) {
    auto [loss, g] = distill::distill_minibatch_loss(s, b, idxs, 1.0);
    distill::student_adam_step(s, g, adam);
  }
  distill::distill_minibatch_loss(s, b, idxs, 1.0, &a1, &l1);
  CHECK(a1 < 0.3 * a0);
  CHECK(l1 < 0.5 * l0);
}

TEST_CASE("dagger_collect labels with the teacher and resets history on done") {
  Rng rng(2);
  const auto teacher = tiny_teacher(rng);
  const auto s = tiny_student(teacher, rng);
  sim::RobotModel m;
  trainer::EnvConfig ec;
  ec.randomize_domain = false;
  ec.max_steps = 10;  // force an episode boundary inside the collection
  std::vector<trainer::Env> envs;
  envs.push_back(trainer::make_env(m, ec, 5));
  std::vector<distill::ObservationHistory> hist(1);

  auto b = distill::dagger_collect(envs, hist, teacher, s, 1.0, 25);
  REQUIRE(b.size() == 25);
  CHECK(b.history[0] == Vec(distill::kHistoryDim, 0.0));  // starts zero padded
  for (std::size_t k = 0; k < b.size(); ++k) {
    CHECK(b.teacher_action[k].size() == 4);
    CHECK(b.teacher_latent[k].size() == 24);
    // the label must be the teacher's mean action for the recorded obs
    const auto to = trainer::teacher_act(
        teacher, b.proprio[k],
        trainer::build_privileged(envs[0].st, envs[0].dom),  // placeholder shape check
        Vec(trainer::kTerrainDim, 0.0));
    CHECK(to.mean.size() == b.teacher_action[k].size());
  }
  // episodes truncate at 10 steps: histories at steps 10 and 20 are freshly reset
  CHECK(b.history[10] == Vec(distill::kHistoryDim, 0.0));
  CHECK(b.history[20] == Vec(distill::kHistoryDim, 0.0));
  // but mid-episode histories are not all zero
  double mag = 0.0;
  for (double v : b.history[5]) mag += std::abs(v);
  CHECK(mag > 0.0);

  CHECK_THROWS_AS(distill::dagger_collect(envs, hist, teacher, s, 1.5, 5), ConfigError);
}

TEST_CASE("beta=0 applies the student's action, beta=1 the teacher's") {
  Rng rng(3);
  const auto teacher = tiny_teacher(rng);
  auto s = tiny_student(teacher, rng);
  // make the student's head differ sharply from the teacher's
  for (auto& w : s.action_head.layers.back().w.data()) w = -w;
  sim::RobotModel m;
  trainer::EnvConfig ec;
  ec.randomize_domain = false;
  ec.init_noise = 0.0;

  const auto run = [&](double beta) {
    std::vector<trainer::Env> envs;
    envs.push_back(trainer::make_env(m, ec, 9));
    std::vector<distill::ObservationHistory> hist(1);
    distill::dagger_collect(envs, hist, teacher, s, beta, 3);
    return envs[0].prev_action;  // action actually applied at the last step
  };
  const Vec a_teacher = run(1.0);
  const Vec a_student = run(0.0);
  // identical seeds, identical first-step state: only the mixture differs
  CHECK(a_teacher != a_student);

  // at the very first step both mixtures see the same state, so beta=1
  // must reproduce the teacher's mean action exactly
  std::vector<trainer::Env> envs;
  envs.push_back(trainer::make_env(m, ec, 9));
  const Vec po = trainer::build_proprio(envs[0].st, envs[0].prev_action);
  const Vec pv = trainer::build_privileged(envs[0].st, envs[0].dom);
  const Vec te = trainer::build_terrain_obs(envs[0].field, envs[0].st);
  const auto to = trainer::teacher_act(teacher, po, pv, te);
  std::vector<distill::ObservationHistory> hist(1);
  distill::dagger_collect(envs, hist, teacher, s, 1.0, 1);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(envs[0].prev_action[i] == doctest::Approx(to.mean[i]));
}

TEST_CASE("student checkpoint round trip preserves behavior") {
  Rng rng(17);
  const auto teacher = trainer::make_teacher(rng);
  const auto s = distill::make_student(teacher, rng);
  const std::string path = "student_roundtrip.ckpt";
  distill::save_student(path, s);
  const auto q = distill::load_student(path);
  Vec proprio(trainer::kProprioDim), hist(distill::kHistoryDim);
  for (auto& v : proprio) v = rng.normal();
  for (auto& v : hist) v = 0.1 * rng.normal();
  const auto a = distill::student_act(s, proprio, hist);
  const auto b = distill::student_act(q, proprio, hist);
  CHECK(a.mean == b.mean);
  CHECK(a.latent == b.latent);
  std::remove(path.c_str());
  CHECK_THROWS_AS(distill::load_student("missing_student.ckpt"), IoError);
}

TEST_CASE("short distillation run logs a deterministic csv") {
  Rng rng(1);
  const auto teacher = tiny_teacher(rng);
  distill::DistillConfig cfg;
  cfg.epochs = 2;
  cfg.n_envs = 2;
  cfg.n_steps = 20;
  cfg.updates_per_epoch = 3;
  cfg.minibatch = 16;
  cfg.env.randomize_domain = false;
  cfg.seed = 0;
  cfg.log_path = "distill_smoke_a.csv";
  const auto ra = distill::train_student(teacher, cfg);
  CHECK(ra.epochs_run == 2);
  CHECK(std::isfinite(ra.action_mse));
  cfg.log_path = "distill_smoke_b.csv";
  distill::train_student(teacher, cfg);
  std::ifstream fa("distill_smoke_a.csv"), fb("distill_smoke_b.csv");
  REQUIRE(fa);
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  const std::string ca = sa.str(), cb = sb.str();
  CHECK(ca == cb);
  CHECK(ca.substr(0, 5) == "epoch");
  CHECK(std::count(ca.begin(), ca.end(), '\n') == 3);
  std::remove("distill_smoke_a.csv");
  std::remove("distill_smoke_b.csv");
}
