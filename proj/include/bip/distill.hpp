#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "bip/checkpoint.hpp"
#include "bip/errors.hpp"
#include "bip/linalg.hpp"
#include "bip/nn.hpp"
#include "bip/rng.hpp"
#include "bip/trainer.hpp"

namespace bip::distill {

inline constexpr std::size_t kHistoryLen = 45;  // past steps, current obs excluded
inline constexpr std::size_t kHistoryDim = kHistoryLen * trainer::kProprioDim;  // 765

// ---------------------------------------------------------------------------
// Observation history

/// Ring buffer of the last 45 proprioceptive observations. The flattened
/// vector is ordered oldest to newest and zero-padded at episode start;
/// the current observation is never part of it.
class ObservationHistory {
 public:
  ObservationHistory() { reset(); }

  void reset() {
    data_.assign(kHistoryDim, 0.0);
    head_ = 0;
  }

  void push(const Vec& proprio) {
    if (proprio.size() != trainer::kProprioDim)
      throw ShapeError("ObservationHistory: observation must have 17 entries");
    std::copy(proprio.begin(), proprio.end(),
              data_.begin() + static_cast<std::ptrdiff_t>(head_ * trainer::kProprioDim));
    head_ = (head_ + 1) % kHistoryLen;
  }

  /// Flattened history, slot 0 = oldest, slot 44 = most recent.
  Vec vector() const {
    Vec out(kHistoryDim);
    for (std::size_t i = 0; i < kHistoryLen; ++i) {
      const std::size_t slot = (head_ + i) % kHistoryLen;
      std::copy(data_.begin() + static_cast<std::ptrdiff_t>(slot * trainer::kProprioDim),
                data_.begin() + static_cast<std::ptrdiff_t>((slot + 1) * trainer::kProprioDim),
                out.begin() + static_cast<std::ptrdiff_t>(i * trainer::kProprioDim));
    }
    return out;
  }

 private:
  Vec data_;
  std::size_t head_ = 0;
};

// ---------------------------------------------------------------------------
// Student policy

struct StudentPolicy {
  nn::Mlp memory_enc;   // 765 -> [256, 128] -> 24
  nn::Mlp trunk;        // structurally identical to the teacher trunk
  nn::Mlp action_head;  // structurally identical to the teacher action head

  void check(const trainer::TeacherPolicy* teacher = nullptr) const {
    if (memory_enc.in_dim() != kHistoryDim || memory_enc.out_dim() != trainer::kLatentDim ||
        trunk.in_dim() != trainer::kTrunkInDim || action_head.in_dim() != trunk.out_dim() ||
        action_head.out_dim() != trainer::kActionDim)
      throw ShapeError("StudentPolicy: inconsistent component shapes");
    if (teacher != nullptr) {
      const auto same_shape = [](const nn::Mlp& a, const nn::Mlp& b) {
        if (a.layers.size() != b.layers.size()) return false;
        for (std::size_t i = 0; i < a.layers.size(); ++i)
          if (a.layers[i].in_dim() != b.layers[i].in_dim() ||
              a.layers[i].out_dim() != b.layers[i].out_dim() ||
              a.layers[i].act != b.layers[i].act)
            return false;
        return true;
      };
      if (!same_shape(trunk, teacher->trunk) ||
          !same_shape(action_head, teacher->action_head))
        throw ShapeError("StudentPolicy: trunk/head not structurally identical to teacher");
    }
  }
};

/// Fresh student: the low-level trunk and action head start as copies of
/// the teacher's, the memory encoder is trained from scratch to reproduce
/// the teacher's latent from proprioceptive history.
inline StudentPolicy make_student(const trainer::TeacherPolicy& teacher, Rng& rng) {
  StudentPolicy s;
  s.memory_enc = nn::make_mlp("m_enc", {kHistoryDim, 256, 128, trainer::kLatentDim},
                              nn::Activation::Elu, rng);
  s.trunk = teacher.trunk;
  s.action_head = teacher.action_head;
  s.check(&teacher);
  return s;
}

struct StudentOut {
  Vec latent;  // 24, the reconstruction of the teacher's (l^e, l^p)
  Vec mean;    // 4
};

inline Vec student_trunk_input(const Vec& proprio, const Vec& latent) {
  Vec in;
  in.reserve(trainer::kTrunkInDim);
  in.insert(in.end(), proprio.begin(), proprio.end());
  in.insert(in.end(), latent.begin(), latent.end());
  return in;
}

inline StudentOut student_act(const StudentPolicy& p, const Vec& proprio, const Vec& history) {
  if (proprio.size() != trainer::kProprioDim || history.size() != kHistoryDim)
    throw ShapeError("student_act: observation dimension mismatch");
  StudentOut o;
  o.latent = nn::forward_only(p.memory_enc, history);
  const Vec h = nn::forward_only(p.trunk, student_trunk_input(proprio, o.latent));
  o.mean = nn::forward_only(p.action_head, h);
  return o;
}

struct StudentGrad {
  nn::Grad me, trunk, ah;

  static StudentGrad zeros_like(const StudentPolicy& p) {
    StudentGrad g;
    g.me = nn::Grad::zeros_like(p.memory_enc);
    g.trunk = nn::Grad::zeros_like(p.trunk);
    g.ah = nn::Grad::zeros_like(p.action_head);
    return g;
  }

  bool finite() const { return me.finite() && trunk.finite() && ah.finite(); }
};

// ---------------------------------------------------------------------------
// Loss

/// Imitation loss: mean-square action error plus lambda_rec times the
/// mean-square latent reconstruction error. Mean-square is over the
/// coordinate dimension, so an action error of (1,0,0,0) contributes 0.25.
inline double distill_loss(const Vec& action_student, const Vec& action_teacher,
                           const Vec& latent_student, const Vec& latent_teacher,
                           double lambda_rec) {
  if (action_student.size() != action_teacher.size() ||
      latent_student.size() != latent_teacher.size())
    throw ShapeError("distill_loss: dimension mismatch");
  if (action_student.empty() || latent_student.empty())
    throw ShapeError("distill_loss: empty inputs");
  double a = 0.0, l = 0.0;
  for (std::size_t i = 0; i < action_student.size(); ++i) {
    const double d = action_student[i] - action_teacher[i];
    a += d * d;
  }
  for (std::size_t i = 0; i < latent_student.size(); ++i) {
    const double d = latent_student[i] - latent_teacher[i];
    l += d * d;
  }
  return a / static_cast<double>(action_student.size()) +
         lambda_rec * l / static_cast<double>(latent_student.size());
}

// ---------------------------------------------------------------------------
// DAgger data collection

struct DistillBuffer {
  std::vector<Vec> proprio, history;
  std::vector<Vec> teacher_action;  // teacher mean action (the label)
  std::vector<Vec> teacher_latent;  // teacher (l^e, l^p) concatenated

  std::size_t size() const { return proprio.size(); }
};

/// Rolls the environments forward applying beta * teacher + (1-beta) *
/// student mean actions; the teacher's action and latent are recorded as
/// labels at every step regardless of who acted.
inline DistillBuffer dagger_collect(std::vector<trainer::Env>& envs,
                                    std::vector<ObservationHistory>& histories,
                                    const trainer::TeacherPolicy& teacher,
                                    const StudentPolicy& student, double beta,
                                    std::size_t n_steps) {
  if (envs.empty() || envs.size() != histories.size())
    throw ConfigError("dagger_collect: env/history count mismatch");
  if (beta < 0.0 || beta > 1.0) throw ConfigError("dagger_collect: beta must be in [0,1]");
  DistillBuffer b;
  const std::size_t n = envs.size() * n_steps;
  b.proprio.reserve(n);
  b.history.reserve(n);
  b.teacher_action.reserve(n);
  b.teacher_latent.reserve(n);
  for (std::size_t t = 0; t < n_steps; ++t) {
    for (std::size_t ei = 0; ei < envs.size(); ++ei) {
      trainer::Env& e = envs[ei];
      const Vec po = trainer::build_proprio(e.st, e.prev_action);
      const Vec pv = trainer::build_privileged(e.st, e.dom);
      const Vec te = trainer::build_terrain_obs(e.field, e.st);
      const Vec hist = histories[ei].vector();
      const auto to = trainer::teacher_act(teacher, po, pv, te);
      const auto so = student_act(student, po, hist);
      Vec latent(trainer::kLatentDim);
      std::copy(to.le.begin(), to.le.end(), latent.begin());
      std::copy(to.lp.begin(), to.lp.end(), latent.begin() + trainer::kTerrainLatentDim);
      b.proprio.push_back(po);
      b.history.push_back(hist);
      b.teacher_action.push_back(to.mean);
      b.teacher_latent.push_back(std::move(latent));
      Vec action(trainer::kActionDim);
      for (std::size_t i = 0; i < trainer::kActionDim; ++i)
        action[i] = beta * to.mean[i] + (1.0 - beta) * so.mean[i];
      const auto res = trainer::env_step(e, action, nullptr, 0.0);
      if (res.done) {
        histories[ei].reset();
      } else {
        histories[ei].push(po);
      }
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Supervised update

/// Mean distillation loss over the given samples and its exact parameter
/// gradient; batched for speed, exposed for finite-difference checks.
inline std::pair<double, StudentGrad> distill_minibatch_loss(
    const StudentPolicy& p, const DistillBuffer& b, const std::vector<std::size_t>& idxs,
    double lambda_rec, double* action_mse = nullptr, double* latent_mse = nullptr) {
  if (idxs.empty()) throw ConfigError("distill_minibatch_loss: empty minibatch");
  const std::size_t nb = idxs.size();
  const double inv_n = 1.0 / static_cast<double>(nb);
  StudentGrad g = StudentGrad::zeros_like(p);

  Mat xh(nb, kHistoryDim);
  for (std::size_t s = 0; s < nb; ++s)
    std::copy(b.history[idxs[s]].begin(), b.history[idxs[s]].end(), xh.row(s));
  auto [latent, t_me] = nn::forward_batch(p.memory_enc, xh);
  Mat xtr(nb, trainer::kTrunkInDim);
  for (std::size_t s = 0; s < nb; ++s) {
    const Vec& po = b.proprio[idxs[s]];
    std::copy(po.begin(), po.end(), xtr.row(s));
    std::copy(latent.row(s), latent.row(s) + trainer::kLatentDim,
              xtr.row(s) + trainer::kProprioDim);
  }
  auto [hidden, t_tr] = nn::forward_batch(p.trunk, xtr);
  auto [mean, t_ah] = nn::forward_batch(p.action_head, hidden);

  double loss = 0.0, amse = 0.0, lmse = 0.0;
  Mat dmean(nb, trainer::kActionDim), dlat_direct(nb, trainer::kLatentDim);
  for (std::size_t s = 0; s < nb; ++s) {
    const std::size_t k = idxs[s];
    double a = 0.0, l = 0.0;
    for (std::size_t i = 0; i < trainer::kActionDim; ++i) {
      const double d = mean(s, i) - b.teacher_action[k][i];
      a += d * d;
      dmean(s, i) = inv_n * 2.0 * d / static_cast<double>(trainer::kActionDim);
    }
    for (std::size_t i = 0; i < trainer::kLatentDim; ++i) {
      const double d = latent(s, i) - b.teacher_latent[k][i];
      l += d * d;
      dlat_direct(s, i) =
          inv_n * lambda_rec * 2.0 * d / static_cast<double>(trainer::kLatentDim);
    }
    a /= static_cast<double>(trainer::kActionDim);
    l /= static_cast<double>(trainer::kLatentDim);
    amse += inv_n * a;
    lmse += inv_n * l;
    loss += inv_n * (a + lambda_rec * l);
  }
  if (action_mse != nullptr) *action_mse = amse;
  if (latent_mse != nullptr) *latent_mse = lmse;

  const Mat dh = nn::backward_batch_acc(p.action_head, t_ah, dmean, g.ah);
  const Mat dxtr = nn::backward_batch_acc(p.trunk, t_tr, dh, g.trunk);
  // the latent receives gradient both directly and through the trunk input
  Mat dlat(nb, trainer::kLatentDim);
  for (std::size_t s = 0; s < nb; ++s)
    for (std::size_t i = 0; i < trainer::kLatentDim; ++i)
      dlat(s, i) = dlat_direct(s, i) + dxtr(s, trainer::kProprioDim + i);
  nn::backward_batch_acc(p.memory_enc, t_me, dlat, g.me);
  return {loss, std::move(g)};
}

struct StudentAdam {
  nn::AdamState me, trunk, ah;

  static StudentAdam make(const StudentPolicy& p, double lr) {
    StudentAdam a;
    a.me = nn::AdamState::make(p.memory_enc, lr);
    a.trunk = nn::AdamState::make(p.trunk, lr);
    a.ah = nn::AdamState::make(p.action_head, lr);
    return a;
  }
};

inline void student_adam_step(StudentPolicy& p, const StudentGrad& g, StudentAdam& a) {
  if (!g.finite()) throw NumericError("student_adam_step: non-finite gradient");
  nn::adam_step(p.memory_enc, g.me, a.me);
  nn::adam_step(p.trunk, g.trunk, a.trunk);
  nn::adam_step(p.action_head, g.ah, a.ah);
}

// ---------------------------------------------------------------------------
// Checkpointing

inline std::vector<NamedArray> student_arrays(const StudentPolicy& p) {
  std::vector<NamedArray> arrays;
  append_mlp_arrays(arrays, p.memory_enc);
  append_mlp_arrays(arrays, p.trunk);
  append_mlp_arrays(arrays, p.action_head);
  return arrays;
}

inline void save_student(const std::string& path, const StudentPolicy& p) {
  save_checkpoint(path, student_arrays(p));
}

inline StudentPolicy load_student(const std::string& path) {
  const auto arrays = load_checkpoint(path);
  StudentPolicy p;
  p.memory_enc = mlp_from_arrays(arrays, "m_enc");
  p.trunk = mlp_from_arrays(arrays, "trunk");
  p.action_head = mlp_from_arrays(arrays, "a_head");
  p.check();
  return p;
}

// ---------------------------------------------------------------------------
// Training loop

struct DistillConfig {
  int epochs = 30;
  int n_envs = 16;
  int n_steps = 200;       // samples per env per epoch
  int updates_per_epoch = 60;
  int minibatch = 512;
  double lr = 1e-3;
  double lambda_rec = 1.0;
  trainer::EnvConfig env;
  std::uint64_t seed = 0;
  std::string log_path;
  std::string checkpoint_path;
};

struct DistillResult {
  StudentPolicy student;
  double action_mse = 0.0;
  double latent_mse = 0.0;
  int epochs_run = 0;
};

inline std::pair<double, double> buffer_mse(const StudentPolicy& p, const DistillBuffer& b,
                                            double lambda_rec) {
  std::vector<std::size_t> all(b.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  double amse = 0.0, lmse = 0.0;
  distill_minibatch_loss(p, b, all, lambda_rec, &amse, &lmse);
  return {amse, lmse};
}

/// DAgger-style distillation: per epoch, collect on-policy-mixture data
/// with the current beta (annealed linearly from 1 to 0), then run
/// supervised minibatch updates against the teacher labels.
inline DistillResult train_student(const trainer::TeacherPolicy& teacher,
                                   const DistillConfig& cfg) {
  if (cfg.epochs <= 0 || cfg.n_envs <= 0 || cfg.n_steps <= 0)
    throw ConfigError("train_student: epochs and rollout shape must be positive");
  Rng rng(cfg.seed ^ 0x5be7a9d1u);
  DistillResult out;
  out.student = make_student(teacher, rng);
  auto adam = StudentAdam::make(out.student, cfg.lr);

  sim::RobotModel model;
  std::vector<trainer::Env> envs;
  std::vector<ObservationHistory> histories(static_cast<std::size_t>(cfg.n_envs));
  for (int i = 0; i < cfg.n_envs; ++i)
    envs.push_back(trainer::make_env(model, cfg.env,
                                     cfg.seed * 104729 + static_cast<std::uint64_t>(i) + 1));

  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path);
    if (!log) throw IoError("train_student: cannot open log file " + cfg.log_path);
    log << "epoch,action_mse,latent_mse,beta\n";
  }

  char row[256];
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double beta =
        cfg.epochs > 1 ? 1.0 - static_cast<double>(epoch) / (cfg.epochs - 1) : 0.0;
    auto buf = dagger_collect(envs, histories, teacher, out.student, beta,
                              static_cast<std::size_t>(cfg.n_steps));
    const std::size_t n = buf.size();
    const std::size_t mb = std::min<std::size_t>(n, static_cast<std::size_t>(cfg.minibatch));
    for (int u = 0; u < cfg.updates_per_epoch; ++u) {
      std::vector<std::size_t> idxs(mb);
      for (auto& i : idxs) i = rng.uniform_index(n);
      auto [loss, g] = distill_minibatch_loss(out.student, buf, idxs, cfg.lambda_rec);
      if (!std::isfinite(loss)) throw NumericError("train_student: non-finite loss");
      student_adam_step(out.student, g, adam);
    }
    const auto [amse, lmse] = buffer_mse(out.student, buf, cfg.lambda_rec);
    out.action_mse = amse;
    out.latent_mse = lmse;
    out.epochs_run = epoch + 1;
    if (log.is_open()) {
      std::snprintf(row, sizeof(row), "%d,%.17g,%.17g,%.17g\n", epoch, amse, lmse, beta);
      log << row;
    }
  }
  if (!cfg.checkpoint_path.empty()) save_student(cfg.checkpoint_path, out.student);
  if (log.is_open() && !log) throw IoError("train_student: log write failed");
  return out;
}

}  // namespace bip::distill
