#pragma once

// Run configuration, evaluation metrics (tracking accuracy, success rate,
// push test), episode logging, SVG plots, and the file formats shared by the
// command-line tool.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bip/distill.hpp"
#include "bip/errors.hpp"
#include "bip/refgen.hpp"
#include "bip/trainer.hpp"

namespace bip::harness {

inline constexpr int kSchemaVersion = 1;

/// Shortest round-trippable decimal form, shared by every CSV writer so that
/// identical runs produce byte-identical files.
inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Config file parsing: flat "dotted.key = value" lines, '#' comments.

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

class ConfigMap {
 public:
  static ConfigMap parse(const std::string& text) {
    ConfigMap m;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      const std::string val = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
      if (!m.kv_.emplace(key, val).second)
        throw ConfigError("config: duplicate key '" + key + "'");
    }
    return m;
  }

  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& def) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    used_.insert(key);
    return it->second;
  }

  double get_double(const std::string& key, double def) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    used_.insert(key);
    return to_double(key, it->second);
  }

  int get_int(const std::string& key, int def) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    used_.insert(key);
    try {
      std::size_t pos = 0;
      const int v = std::stoi(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config: key '" + key + "' expects an integer, got '" + it->second + "'");
    }
  }

  std::uint64_t get_uint64(const std::string& key, std::uint64_t def) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    used_.insert(key);
    try {
      std::size_t pos = 0;
      const std::uint64_t v = std::stoull(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config: key '" + key + "' expects an unsigned integer, got '" +
                        it->second + "'");
    }
  }

  bool get_bool(const std::string& key, bool def) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    used_.insert(key);
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config: key '" + key + "' expects true/false, got '" + it->second + "'");
  }

  std::vector<std::string> get_list(const std::string& key,
                                    const std::vector<std::string>& def) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    used_.insert(key);
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(it->second);
    while (std::getline(in, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    if (out.empty()) throw ConfigError("config: key '" + key + "' expects a non-empty list");
    return out;
  }

  /// Keys that were present but never consumed by a getter.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : kv_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

 private:
  static double to_double(const std::string& key, const std::string& s) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config: key '" + key + "' expects a number, got '" + s + "'");
    }
  }

  std::map<std::string, std::string> kv_;
  mutable std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// RunConfig: everything a CLI run needs, with the ledgered defaults.

struct RunConfig {
  std::uint64_t seed = 0;

  // reference generation
  double refgen_duration = 2.4;  // s per clip
  double refgen_rate_hz = 50.0;

  // teacher training; env block shared with distillation
  trainer::TrainConfig train;
  std::string demo_path;  // reference CSV consumed by train-teacher

  // distillation (environment copied from the train block)
  distill::DistillConfig distill;

  // evaluation sweep
  std::vector<terrain::Kind> eval_terrains = {
      terrain::Kind::UniformNoise, terrain::Kind::Wave, terrain::Kind::SteppingStones,
      terrain::Kind::Slope,        terrain::Kind::Stairs, terrain::Kind::Obstacles};
  std::vector<double> eval_speeds = {0.5, 1.0, 1.5, 2.0};
  int eval_episodes = 50;
  int eval_horizon = 1000;  // 20 s at 50 Hz
  double eval_difficulty = 0.5;
  bool eval_randomize_domain = false;
  std::string eval_policy = "teacher";  // "teacher" or "student"

  // push test
  double push_impulse = 10.0;  // N*s before the planar-mass scaling
  double push_time = 2.0;
  double push_duration = 0.1;
  double push_cmd_vx = 0.5;
  int push_trials = 10;
  int push_horizon = 250;  // 5 s at 50 Hz
};

inline RunConfig config_from_map(const ConfigMap& cm) {
  const int sv = cm.get_int("schema_version", kSchemaVersion);
  if (sv != kSchemaVersion)
    throw ConfigError("config: unsupported schema_version " + std::to_string(sv));

  RunConfig c;
  c.seed = cm.get_uint64("seed", c.seed);

  c.refgen_duration = cm.get_double("refgen.duration", c.refgen_duration);
  c.refgen_rate_hz = cm.get_double("refgen.rate_hz", c.refgen_rate_hz);
  if (c.refgen_duration <= 0.0 || c.refgen_rate_hz <= 0.0)
    throw ConfigError("config: refgen duration and rate must be positive");

  trainer::EnvConfig& e = c.train.env;
  e.kind = terrain::kind_from_name(cm.get_string("env.terrain", terrain::kind_name(e.kind)));
  e.difficulty = cm.get_double("env.difficulty", e.difficulty);
  e.terrain_length = cm.get_double("env.terrain_length", e.terrain_length);
  e.cmd_vx_lo = cm.get_double("env.cmd_vx_lo", e.cmd_vx_lo);
  e.cmd_vx_hi = cm.get_double("env.cmd_vx_hi", e.cmd_vx_hi);
  e.cmd_w_lo = cm.get_double("env.cmd_w_lo", e.cmd_w_lo);
  e.cmd_w_hi = cm.get_double("env.cmd_w_hi", e.cmd_w_hi);
  e.randomize_domain = cm.get_bool("env.randomize_domain", e.randomize_domain);
  e.max_steps = cm.get_int("env.max_steps", e.max_steps);
  e.init_noise = cm.get_double("env.init_noise", e.init_noise);
  e.rsi_prob = cm.get_double("env.rsi_prob", e.rsi_prob);
  if (e.rsi_prob < 0.0 || e.rsi_prob > 1.0)
    throw ConfigError("config: env.rsi_prob must be in [0, 1]");
  if (e.cmd_vx_lo > e.cmd_vx_hi || e.cmd_w_lo > e.cmd_w_hi)
    throw ConfigError("config: command range lo must be <= hi");
  if (e.difficulty < 0.0 || e.difficulty > 1.0)
    throw ConfigError("config: env.difficulty must be in [0, 1]");
  if (e.max_steps <= 0 || e.terrain_length <= 0.0)
    throw ConfigError("config: env.max_steps and env.terrain_length must be positive");

  trainer::TrainConfig& t = c.train;
  t.iterations = cm.get_int("train.iterations", t.iterations);
  t.n_envs = cm.get_int("train.n_envs", t.n_envs);
  t.n_steps = cm.get_int("train.n_steps", t.n_steps);
  t.style_scale = cm.get_double("train.style_scale", t.style_scale);
  t.disc_updates = cm.get_int("train.disc_updates", t.disc_updates);
  t.disc_batch = cm.get_int("train.disc_batch", t.disc_batch);
  t.disc_lr = cm.get_double("train.disc_lr", t.disc_lr);
  t.alpha_gp = cm.get_double("train.alpha_gp", t.alpha_gp);
  t.checkpoint_every = cm.get_int("train.checkpoint_every", t.checkpoint_every);
  t.stop_ep_len = cm.get_double("train.stop_ep_len", t.stop_ep_len);
  t.stop_style = cm.get_double("train.stop_style", t.stop_style);
  if (t.iterations <= 0 || t.n_envs <= 0 || t.n_steps <= 0)
    throw ConfigError("config: train iteration and rollout counts must be positive");
  c.demo_path = cm.get_string("train.demo_path", c.demo_path);

  trainer::PpoConfig& p = t.ppo;
  p.lr = cm.get_double("train.ppo.lr", p.lr);
  p.clip = cm.get_double("train.ppo.clip", p.clip);
  p.gamma = cm.get_double("train.ppo.gamma", p.gamma);
  p.lam = cm.get_double("train.ppo.lam", p.lam);
  p.entropy_coef = cm.get_double("train.ppo.entropy_coef", p.entropy_coef);
  p.value_coef = cm.get_double("train.ppo.value_coef", p.value_coef);
  p.epochs = cm.get_int("train.ppo.epochs", p.epochs);
  p.minibatches = cm.get_int("train.ppo.minibatches", p.minibatches);
  if (p.gamma < 0.0 || p.gamma > 1.0 || p.lam < 0.0 || p.lam > 1.0)
    throw ConfigError("config: train.ppo.gamma and lam must be in [0, 1]");
  if (p.epochs <= 0 || p.minibatches <= 0)
    throw ConfigError("config: train.ppo.epochs and minibatches must be positive");

  distill::DistillConfig& d = c.distill;
  d.epochs = cm.get_int("distill.epochs", d.epochs);
  d.n_envs = cm.get_int("distill.n_envs", d.n_envs);
  d.n_steps = cm.get_int("distill.n_steps", d.n_steps);
  d.updates_per_epoch = cm.get_int("distill.updates_per_epoch", d.updates_per_epoch);
  d.minibatch = cm.get_int("distill.minibatch", d.minibatch);
  d.lr = cm.get_double("distill.lr", d.lr);
  d.lambda_rec = cm.get_double("distill.lambda_rec", d.lambda_rec);
  if (d.epochs <= 0 || d.n_envs <= 0 || d.n_steps <= 0 || d.minibatch <= 0)
    throw ConfigError("config: distill shape parameters must be positive");
  if (d.lambda_rec < 0.0) throw ConfigError("config: distill.lambda_rec must be >= 0");
  d.env = e;  // distillation runs in the training environment

  std::vector<std::string> terr_def;
  for (const auto k : c.eval_terrains) terr_def.push_back(terrain::kind_name(k));
  c.eval_terrains.clear();
  for (const auto& name : cm.get_list("eval.terrains", terr_def))
    c.eval_terrains.push_back(terrain::kind_from_name(name));
  std::vector<std::string> speed_def;
  for (const double s : c.eval_speeds) speed_def.push_back(fmt(s));
  c.eval_speeds.clear();
  for (const auto& s : cm.get_list("eval.speeds", speed_def)) {
    try {
      c.eval_speeds.push_back(std::stod(s));
    } catch (const std::exception&) {
      throw ConfigError("config: eval.speeds entry '" + s + "' is not a number");
    }
  }
  c.eval_episodes = cm.get_int("eval.n_episodes", c.eval_episodes);
  c.eval_horizon = cm.get_int("eval.horizon", c.eval_horizon);
  c.eval_difficulty = cm.get_double("eval.difficulty", c.eval_difficulty);
  c.eval_randomize_domain = cm.get_bool("eval.randomize_domain", c.eval_randomize_domain);
  c.eval_policy = cm.get_string("eval.policy", c.eval_policy);
  if (c.eval_episodes < 1) throw ConfigError("config: eval.n_episodes must be >= 1");
  if (c.eval_horizon < 1) throw ConfigError("config: eval.horizon must be >= 1");
  if (c.eval_difficulty < 0.0 || c.eval_difficulty > 1.0)
    throw ConfigError("config: eval.difficulty must be in [0, 1]");
  if (c.eval_policy != "teacher" && c.eval_policy != "student")
    throw ConfigError("config: eval.policy must be 'teacher' or 'student'");

  c.push_impulse = cm.get_double("push.impulse", c.push_impulse);
  c.push_time = cm.get_double("push.time", c.push_time);
  c.push_duration = cm.get_double("push.duration", c.push_duration);
  c.push_cmd_vx = cm.get_double("push.cmd_vx", c.push_cmd_vx);
  c.push_trials = cm.get_int("push.trials", c.push_trials);
  c.push_horizon = cm.get_int("push.horizon", c.push_horizon);
  if (c.push_impulse < 0.0 || c.push_duration <= 0.0 || c.push_time < 0.0)
    throw ConfigError("config: push impulse/time must be >= 0 and duration > 0");
  if (c.push_trials < 1 || c.push_horizon < 1)
    throw ConfigError("config: push.trials and push.horizon must be >= 1");

  const auto leftovers = cm.unused();
  if (!leftovers.empty()) throw ConfigError("config: unknown key '" + leftovers.front() + "'");
  return c;
}

inline RunConfig parse_config(const std::string& text) {
  return config_from_map(ConfigMap::parse(text));
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

/// Fully resolved snapshot; parsing it back yields an identical RunConfig.
inline std::string config_to_text(const RunConfig& c) {
  std::ostringstream o;
  const auto kd = [&](const char* k, double v) { o << k << " = " << fmt(v) << "\n"; };
  const auto ki = [&](const char* k, long long v) { o << k << " = " << v << "\n"; };
  const auto kb = [&](const char* k, bool v) { o << k << " = " << (v ? "true" : "false") << "\n"; };
  const auto ks = [&](const char* k, const std::string& v) {
    if (!v.empty()) o << k << " = " << v << "\n";
  };
  o << "schema_version = " << kSchemaVersion << "\n";
  ki("seed", static_cast<long long>(c.seed));
  kd("refgen.duration", c.refgen_duration);
  kd("refgen.rate_hz", c.refgen_rate_hz);
  const trainer::EnvConfig& e = c.train.env;
  o << "env.terrain = " << terrain::kind_name(e.kind) << "\n";
  kd("env.difficulty", e.difficulty);
  kd("env.terrain_length", e.terrain_length);
  kd("env.cmd_vx_lo", e.cmd_vx_lo);
  kd("env.cmd_vx_hi", e.cmd_vx_hi);
  kd("env.cmd_w_lo", e.cmd_w_lo);
  kd("env.cmd_w_hi", e.cmd_w_hi);
  kb("env.randomize_domain", e.randomize_domain);
  ki("env.max_steps", e.max_steps);
  kd("env.init_noise", e.init_noise);
  kd("env.rsi_prob", e.rsi_prob);
  const trainer::TrainConfig& t = c.train;
  ki("train.iterations", t.iterations);
  ki("train.n_envs", t.n_envs);
  ki("train.n_steps", t.n_steps);
  kd("train.style_scale", t.style_scale);
  ki("train.disc_updates", t.disc_updates);
  ki("train.disc_batch", t.disc_batch);
  kd("train.disc_lr", t.disc_lr);
  kd("train.alpha_gp", t.alpha_gp);
  ki("train.checkpoint_every", t.checkpoint_every);
  kd("train.stop_ep_len", t.stop_ep_len);
  kd("train.stop_style", t.stop_style);
  ks("train.demo_path", c.demo_path);
  const trainer::PpoConfig& p = t.ppo;
  kd("train.ppo.lr", p.lr);
  kd("train.ppo.clip", p.clip);
  kd("train.ppo.gamma", p.gamma);
  kd("train.ppo.lam", p.lam);
  kd("train.ppo.entropy_coef", p.entropy_coef);
  kd("train.ppo.value_coef", p.value_coef);
  ki("train.ppo.epochs", p.epochs);
  ki("train.ppo.minibatches", p.minibatches);
  const distill::DistillConfig& d = c.distill;
  ki("distill.epochs", d.epochs);
  ki("distill.n_envs", d.n_envs);
  ki("distill.n_steps", d.n_steps);
  ki("distill.updates_per_epoch", d.updates_per_epoch);
  ki("distill.minibatch", d.minibatch);
  kd("distill.lr", d.lr);
  kd("distill.lambda_rec", d.lambda_rec);
  std::string terrs;
  for (const auto k : c.eval_terrains)
    terrs += (terrs.empty() ? "" : ",") + std::string(terrain::kind_name(k));
  o << "eval.terrains = " << terrs << "\n";
  std::string speeds;
  for (const double s : c.eval_speeds) speeds += (speeds.empty() ? "" : ",") + fmt(s);
  o << "eval.speeds = " << speeds << "\n";
  ki("eval.n_episodes", c.eval_episodes);
  ki("eval.horizon", c.eval_horizon);
  kd("eval.difficulty", c.eval_difficulty);
  kb("eval.randomize_domain", c.eval_randomize_domain);
  o << "eval.policy = " << c.eval_policy << "\n";
  kd("push.impulse", c.push_impulse);
  kd("push.time", c.push_time);
  kd("push.duration", c.push_duration);
  kd("push.cmd_vx", c.push_cmd_vx);
  ki("push.trials", c.push_trials);
  ki("push.horizon", c.push_horizon);
  return o.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write file: " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Episode logging

struct EpisodeStep {
  double t = 0.0;
  double cmd_vx = 0.0, cmd_w = 0.0;
  double vx = 0.0, vz = 0.0, w = 0.0;  // base velocities and yaw rate
  std::array<double, 4> q{}, qd{};     // joints LT, LC, RT, RC
  std::array<double, 2> foot_fx{}, foot_fz{};
  double r_task = 0.0, r_style = 0.0, r_reg = 0.0;
};

struct EpisodeLog {
  std::vector<EpisodeStep> steps;
  sim::TerminationReason reason = sim::TerminationReason::None;
  bool completed = false;  // reached the horizon without terminating
};

// ---------------------------------------------------------------------------
// Deterministic policy wrappers shared by every evaluation entry point

class Actor {
 public:
  virtual ~Actor() = default;
  virtual void reset() {}
  virtual Vec act(const trainer::Env& e) = 0;
};

class TeacherActor final : public Actor {
 public:
  explicit TeacherActor(const trainer::TeacherPolicy& p) : p_(&p) {}
  Vec act(const trainer::Env& e) override {
    return trainer::teacher_act(*p_, trainer::build_proprio(e.st, e.prev_action),
                                trainer::build_privileged(e.st, e.dom),
                                trainer::build_terrain_obs(e.field, e.st))
        .mean;
  }

 private:
  const trainer::TeacherPolicy* p_;
};

class StudentActor final : public Actor {
 public:
  explicit StudentActor(const distill::StudentPolicy& p) : p_(&p) {}
  void reset() override { hist_.reset(); }
  Vec act(const trainer::Env& e) override {
    const Vec po = trainer::build_proprio(e.st, e.prev_action);
    Vec a = distill::student_act(*p_, po, hist_.vector()).mean;
    hist_.push(po);
    return a;
  }

 private:
  const distill::StudentPolicy* p_;
  distill::ObservationHistory hist_;
};

/// Runs one episode with the deterministic (mean) action of the actor and
/// records the full per-step log.  The environment is left in its terminal
/// state; callers create a fresh env per episode.
inline EpisodeLog run_episode(trainer::Env& e, Actor& actor, int horizon,
                              const nn::Mlp* disc = nullptr, double style_scale = 0.0) {
  if (horizon <= 0) throw ConfigError("run_episode: horizon must be positive");
  e.cfg.max_steps = horizon;
  actor.reset();
  EpisodeLog log;
  log.steps.reserve(static_cast<std::size_t>(horizon));
  for (int i = 0; i < horizon; ++i) {
    Vec a = actor.act(e);
    for (double& x : a) x = std::clamp(x, -e.model.cmd_offset_bound, e.model.cmd_offset_bound);
    const auto res = trainer::env_step(e, a, disc, style_scale, /*auto_reset=*/false);
    if (res.done && res.reason == sim::TerminationReason::Diverged) {
      // the post-step state is unusable; end the log at the last valid step
      log.reason = res.reason;
      return log;
    }
    EpisodeStep s;
    s.t = (i + 1) * e.cfg.control_dt;
    s.cmd_vx = e.cmd_vx;
    s.cmd_w = e.cmd_w;
    s.vx = e.st.qd[0];
    s.vz = e.st.qd[1];
    s.w = e.st.qd[2];
    for (std::size_t j = 0; j < 4; ++j) {
      s.q[j] = e.st.q[3 + j];
      s.qd[j] = e.st.qd[3 + j];
    }
    for (std::size_t f = 0; f < 2; ++f) {
      s.foot_fx[f] = e.st.foot_force[f][0];
      s.foot_fz[f] = e.st.foot_force[f][1];
    }
    s.r_task = res.r_task;
    s.r_style = res.r_style;
    s.r_reg = res.r_reg;
    log.steps.push_back(s);
    if (res.done) {
      log.reason = res.reason;
      log.completed = (res.reason == sim::TerminationReason::None);
      break;
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// Metrics

/// 100 * mean_t exp(-|cmd_vx - vx|), the exp-kernel tracking accuracy.
inline double tracking_accuracy(const EpisodeLog& log) {
  if (log.steps.empty()) throw DataError("tracking_accuracy: empty episode log");
  double s = 0.0;
  for (const auto& st : log.steps) s += std::exp(-std::abs(st.cmd_vx - st.vx));
  return 100.0 * s / static_cast<double>(log.steps.size());
}

/// Percentage of episodes that reach the horizon without terminating.
inline double success_rate(const std::vector<EpisodeLog>& logs, int horizon) {
  if (logs.empty()) throw DataError("success_rate: empty episode list");
  if (horizon <= 0) throw ConfigError("success_rate: horizon must be positive");
  std::size_t ok = 0;
  for (const auto& l : logs)
    if (l.completed && l.steps.size() >= static_cast<std::size_t>(horizon)) ++ok;
  return 100.0 * static_cast<double>(ok) / static_cast<double>(logs.size());
}

// ---------------------------------------------------------------------------
// Push test

struct PushConfig {
  double cmd_vx = 0.5;
  double impulse = 10.0;  // N*s, scaled by (planar mass / 12.5 kg) before use
  double t_push = 2.0;
  double duration = 0.1;
  int horizon = 250;            // 5 s at 50 Hz
  double recover_tol = 0.2;     // m/s
  double recover_window = 2.0;  // s after the push ends
  double smooth_window = 0.5;   // s of velocity averaging for the recovery check
};

struct PushResult {
  EpisodeLog log;
  bool recovered = false;
  double applied_impulse = 0.0;  // N*s after mass scaling
};

/// Runs the policy on flat ground at the commanded speed and applies a
/// forward impulse at t_push.  Recovered means the episode never terminates
/// and the smooth_window-averaged forward velocity returns to within
/// recover_tol of its own pre-push baseline (the same average taken just
/// before the push) inside recover_window seconds after the push ends.
/// Measuring against the policy's own steady state isolates push rejection
/// from tracking quality.
inline PushResult run_push_test(Actor& actor, const sim::RobotModel& model, const PushConfig& cfg,
                                std::uint64_t seed) {
  if (cfg.duration <= 0.0 || cfg.t_push < 0.0 || cfg.impulse < 0.0)
    throw ConfigError("run_push_test: impulse and times must be >= 0, duration > 0");
  if (cfg.horizon <= 0) throw ConfigError("run_push_test: horizon must be positive");
  trainer::EnvConfig ec;
  ec.kind = terrain::Kind::Flat;
  ec.difficulty = 0.0;
  ec.cmd_vx_lo = ec.cmd_vx_hi = cfg.cmd_vx;
  ec.cmd_w_lo = ec.cmd_w_hi = 0.0;
  ec.randomize_domain = false;
  ec.max_steps = cfg.horizon;
  trainer::Env e = trainer::make_env(model, ec, seed);

  PushResult r;
  r.applied_impulse = cfg.impulse * (model.total_mass() / 12.5);
  if (r.applied_impulse > 0.0)
    e.dom.push_schedule.push_back(
        {cfg.t_push, {r.applied_impulse / cfg.duration, 0.0}, cfg.duration});

  r.log = run_episode(e, actor, cfg.horizon);
  if (!r.log.completed) return r;
  if (r.applied_impulse == 0.0) {
    r.recovered = true;
    return r;
  }
  const double dt = ec.control_dt;
  const double t_end = cfg.t_push + cfg.duration;
  const std::size_t smooth = std::max<std::size_t>(1, std::llround(cfg.smooth_window / dt));
  const auto smoothed_at = [&](std::size_t k) {
    const std::size_t n = std::min(smooth, k + 1);
    double v = 0.0;
    for (std::size_t j = k + 1 - n; j <= k; ++j) v += r.log.steps[j].vx;
    return v / static_cast<double>(n);
  };
  double baseline = cfg.cmd_vx;  // fallback when the push starts immediately
  for (std::size_t k = 0; k < r.log.steps.size(); ++k) {
    if (r.log.steps[k].t > cfg.t_push) break;
    baseline = smoothed_at(k);
  }
  for (std::size_t k = 0; k < r.log.steps.size(); ++k) {
    const double t = r.log.steps[k].t;
    if (t <= t_end || t > t_end + cfg.recover_window) continue;
    if (std::abs(smoothed_at(k) - baseline) <= cfg.recover_tol) {
      r.recovered = true;
      break;
    }
  }
  return r;
}

inline std::vector<PushResult> run_push_trials(Actor& actor, const sim::RobotModel& model,
                                               const PushConfig& cfg, std::uint64_t base_seed,
                                               int trials) {
  if (trials < 1) throw ConfigError("run_push_trials: trials must be >= 1");
  std::vector<PushResult> out;
  out.reserve(static_cast<std::size_t>(trials));
  for (int i = 0; i < trials; ++i)
    out.push_back(run_push_test(actor, model, cfg, base_seed * 6151 + i + 1));
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation sweep

struct SweepCell {
  terrain::Kind kind = terrain::Kind::Flat;
  double speed_mps = 0.0;
  double acc_pct = 0.0;
  double succ_pct = 0.0;
  int n_episodes = 0;
};

struct SweepConfig {
  std::vector<terrain::Kind> terrains;
  std::vector<double> speeds;
  int n_episodes = 50;
  int horizon = 1000;
  double difficulty = 0.5;
  bool randomize_domain = false;
};

inline std::vector<SweepCell> eval_sweep(Actor& actor, const sim::RobotModel& model,
                                         const SweepConfig& cfg, std::uint64_t seed) {
  if (cfg.n_episodes < 1) throw ConfigError("eval_sweep: n_episodes must be >= 1");
  if (cfg.terrains.empty() || cfg.speeds.empty())
    throw ConfigError("eval_sweep: terrains and speeds must be non-empty");
  std::vector<SweepCell> rows;
  rows.reserve(cfg.terrains.size() * cfg.speeds.size());
  std::uint64_t cell = 0;
  for (const auto kind : cfg.terrains) {
    for (const double speed : cfg.speeds) {
      trainer::EnvConfig ec;
      ec.kind = kind;
      ec.difficulty = cfg.difficulty;
      ec.cmd_vx_lo = ec.cmd_vx_hi = speed;
      ec.cmd_w_lo = ec.cmd_w_hi = 0.0;
      ec.randomize_domain = cfg.randomize_domain;
      ec.max_steps = cfg.horizon;
      std::vector<EpisodeLog> logs;
      logs.reserve(static_cast<std::size_t>(cfg.n_episodes));
      double acc = 0.0;
      for (int i = 0; i < cfg.n_episodes; ++i) {
        trainer::Env e =
            trainer::make_env(model, ec, seed * 1000003 + cell * 131 + static_cast<std::uint64_t>(i) + 1);
        logs.push_back(run_episode(e, actor, cfg.horizon));
        if (!logs.back().steps.empty()) acc += tracking_accuracy(logs.back());
      }
      SweepCell row;
      row.kind = kind;
      row.speed_mps = speed;
      row.acc_pct = acc / cfg.n_episodes;
      row.succ_pct = success_rate(logs, cfg.horizon);
      row.n_episodes = cfg.n_episodes;
      rows.push_back(row);
      ++cell;
    }
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepCell>& rows) {
  std::ostringstream o;
  o << "terrain,speed_mps,acc_pct,succ_pct,n_episodes\n";
  for (const auto& r : rows)
    o << terrain::kind_name(r.kind) << ',' << fmt(r.speed_mps) << ',' << fmt(r.acc_pct) << ','
      << fmt(r.succ_pct) << ',' << r.n_episodes << '\n';
  return o.str();
}

inline void write_sweep_csv(const std::string& path, const std::vector<SweepCell>& rows) {
  write_text_file(path, sweep_csv(rows));
}

// ---------------------------------------------------------------------------
// Episode CSV and SVG plots

inline std::string episode_csv(const EpisodeLog& log) {
  std::ostringstream o;
  o << "time,cmd_vx,cmd_w,vx,vz,yaw_rate,q_lt,q_lc,q_rt,q_rc,"
       "qd_lt,qd_lc,qd_rt,qd_rc,foot0_fx,foot0_fz,foot1_fx,foot1_fz,"
       "r_task,r_style,r_reg\n";
  for (const auto& s : log.steps) {
    o << fmt(s.t) << ',' << fmt(s.cmd_vx) << ',' << fmt(s.cmd_w) << ',' << fmt(s.vx) << ','
      << fmt(s.vz) << ',' << fmt(s.w);
    for (std::size_t j = 0; j < 4; ++j) o << ',' << fmt(s.q[j]);
    for (std::size_t j = 0; j < 4; ++j) o << ',' << fmt(s.qd[j]);
    o << ',' << fmt(s.foot_fx[0]) << ',' << fmt(s.foot_fz[0]) << ',' << fmt(s.foot_fx[1]) << ','
      << fmt(s.foot_fz[1]);
    o << ',' << fmt(s.r_task) << ',' << fmt(s.r_style) << ',' << fmt(s.r_reg) << '\n';
  }
  o << "# termination=" << termination_name(log.reason) << '\n';
  return o.str();
}

inline void write_episode_csv(const std::string& path, const EpisodeLog& log) {
  write_text_file(path, episode_csv(log));
}

namespace detail {

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string label_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

}  // namespace detail

/// Minimal deterministic SVG line chart: one polyline per series over a
/// shared x axis, with min/max tick labels and a text legend.
inline std::string svg_line_chart(const std::string& title, const Vec& x,
                                  const std::vector<std::pair<std::string, Vec>>& series,
                                  const std::string& x_label, const std::string& y_label) {
  if (x.empty() || series.empty())
    throw DataError("svg_line_chart: need at least one point and one series");
  for (const auto& [name, y] : series)
    if (y.size() != x.size()) throw ShapeError("svg_line_chart: series '" + name + "' length");

  const double w = 720.0, h = 360.0, ml = 64.0, mr = 16.0, mt = 40.0, mb = 44.0;
  const double pw = w - ml - mr, ph = h - mt - mb;
  double xmin = x.front(), xmax = x.back();
  if (xmax <= xmin) xmax = xmin + 1.0;
  double ymin = series.front().second.front(), ymax = ymin;
  for (const auto& [name, y] : series)
    for (const double v : y) {
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
  if (ymax <= ymin) {
    ymin -= 1.0;
    ymax += 1.0;
  } else {
    const double pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;
  }
  const auto px = [&](double v) { return ml + pw * (v - xmin) / (xmax - xmin); };
  const auto py = [&](double v) { return mt + ph * (1.0 - (v - ymin) / (ymax - ymin)); };

  static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" viewBox=\"0 0 " << w << ' ' << h << "\">\n";
  o << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
  o << "<text x=\"" << detail::svg_num(w / 2) << "\" y=\"20\" text-anchor=\"middle\" "
       "font-family=\"sans-serif\" font-size=\"14\">"
    << title << "</text>\n";
  o << "<rect x=\"" << detail::svg_num(ml) << "\" y=\"" << detail::svg_num(mt) << "\" width=\""
    << detail::svg_num(pw) << "\" height=\"" << detail::svg_num(ph)
    << "\" fill=\"none\" stroke=\"#333\"/>\n";
  // axis extent labels
  o << "<text x=\"" << detail::svg_num(ml) << "\" y=\"" << detail::svg_num(h - 24)
    << "\" font-family=\"sans-serif\" font-size=\"11\">" << detail::label_num(xmin)
    << "</text>\n";
  o << "<text x=\"" << detail::svg_num(w - mr) << "\" y=\"" << detail::svg_num(h - 24)
    << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
    << detail::label_num(xmax) << "</text>\n";
  o << "<text x=\"" << detail::svg_num(ml - 6) << "\" y=\"" << detail::svg_num(h - mb)
    << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
    << detail::label_num(ymin) << "</text>\n";
  o << "<text x=\"" << detail::svg_num(ml - 6) << "\" y=\"" << detail::svg_num(mt + 10)
    << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
    << detail::label_num(ymax) << "</text>\n";
  o << "<text x=\"" << detail::svg_num(ml + pw / 2) << "\" y=\"" << detail::svg_num(h - 8)
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << x_label
    << "</text>\n";
  o << "<text x=\"14\" y=\"" << detail::svg_num(mt + ph / 2)
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 "
    << detail::svg_num(mt + ph / 2) << ")\">" << y_label << "</text>\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    const char* color = kPalette[si % 5];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    const Vec& y = series[si].second;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (i) o << ' ';
      o << detail::svg_num(px(x[i])) << ',' << detail::svg_num(py(y[i]));
    }
    o << "\"/>\n";
    o << "<text x=\"" << detail::svg_num(ml + 8 + 130.0 * static_cast<double>(si)) << "\" y=\""
      << detail::svg_num(mt - 6) << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\""
      << color << "\">" << series[si].first << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

/// Writes, per episode i: episode_<i>.csv, velocity_<i>.svg,
/// contact_forces_<i>.svg, and rewards_<i>.svg in out_dir.
inline void emit_plots(const std::vector<EpisodeLog>& logs, const std::string& out_dir) {
  if (logs.empty()) throw DataError("emit_plots: empty episode list");
  for (std::size_t i = 0; i < logs.size(); ++i) {
    const EpisodeLog& log = logs[i];
    if (log.steps.empty()) throw DataError("emit_plots: episode " + std::to_string(i) + " is empty");
    const std::string sfx = "_" + std::to_string(i);
    write_episode_csv(out_dir + "/episode" + sfx + ".csv", log);
    const std::size_t n = log.steps.size();
    Vec t(n), cmd_vx(n), vx(n), cmd_w(n), w(n), f0(n), f1(n), rt(n), rs(n), rr(n);
    for (std::size_t k = 0; k < n; ++k) {
      const auto& s = log.steps[k];
      t[k] = s.t;
      cmd_vx[k] = s.cmd_vx;
      vx[k] = s.vx;
      cmd_w[k] = s.cmd_w;
      w[k] = s.w;
      f0[k] = s.foot_fz[0];
      f1[k] = s.foot_fz[1];
      rt[k] = s.r_task;
      rs[k] = s.r_style;
      rr[k] = s.r_reg;
    }
    write_text_file(out_dir + "/velocity" + sfx + ".svg",
                    svg_line_chart("Base velocity tracking", t,
                                   {{"cmd vx", cmd_vx}, {"vx", vx}, {"cmd yaw", cmd_w}, {"yaw rate", w}},
                                   "time [s]", "velocity"));
    write_text_file(out_dir + "/contact_forces" + sfx + ".svg",
                    svg_line_chart("Foot contact forces", t, {{"left Fz", f0}, {"right Fz", f1}},
                                   "time [s]", "force [N]"));
    write_text_file(out_dir + "/rewards" + sfx + ".svg",
                    svg_line_chart("Reward components", t,
                                   {{"task", rt}, {"style", rs}, {"regularization", rr}},
                                   "time [s]", "reward"));
  }
}

}  // namespace bip::harness
