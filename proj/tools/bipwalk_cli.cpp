// bipwalk: reference generation, teacher training, distillation, and
// evaluation for the planar bipedal locomotion stack.
//
// Exit codes: 0 success, 1 config error, 2 numeric/training failure,
// 3 I/O error.

#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bip/harness.hpp"

namespace {

using namespace bip;

struct CliArgs {
  std::string config;      // config file; empty = defaults
  std::string out = ".";   // output directory
  std::string checkpoint;  // input checkpoint
  std::uint64_t seed = 0;
  bool seed_set = false;
};

harness::RunConfig resolve_config(const CliArgs& a) {
  harness::RunConfig cfg =
      a.config.empty() ? harness::parse_config("") : harness::load_config(a.config);
  if (a.seed_set) cfg.seed = a.seed;
  return cfg;
}

void prepare_out_dir(const std::string& out, const harness::RunConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory: " + out);
  harness::write_text_file(out + "/resolved_config.txt", harness::config_to_text(cfg));
}

// The demonstration set: a walk and two runs, matching the reference corpus
// the discriminator is trained against.
std::vector<refgen::ReferenceTrajectory> make_reference_clips(const sim::RobotModel& model,
                                                              const harness::RunConfig& cfg) {
  const auto flat = terrain::generate_terrain(terrain::Kind::Flat, 0.0, 0, 20.0);
  const double dur = cfg.refgen_duration;
  const double rate = cfg.refgen_rate_hz;
  std::vector<refgen::ReferenceTrajectory> refs;
  refs.push_back(refgen::to_reference(
      refgen::optimize_gait(model, refgen::make_walk(0.5, dur), flat, {}), model, rate, "walk05"));
  refs.push_back(refgen::to_reference(
      refgen::optimize_gait(model, refgen::make_run(1.5, 0.4, dur), flat, {}), model, rate,
      "run15"));
  refs.push_back(refgen::to_reference(
      refgen::optimize_gait(model, refgen::make_run(2.0, 0.35, dur), flat, {}), model, rate,
      "run20"));
  return refs;
}

std::string demo_path_of(const CliArgs& a, const harness::RunConfig& cfg) {
  return cfg.demo_path.empty() ? a.out + "/reference.csv" : cfg.demo_path;
}

int cmd_refgen(const CliArgs& a) {
  const harness::RunConfig cfg = resolve_config(a);
  prepare_out_dir(a.out, cfg);
  sim::RobotModel model;
  const auto refs = make_reference_clips(model, cfg);
  refgen::write_reference_csv(a.out + "/reference.csv", refs);
  std::size_t frames = 0;
  for (const auto& r : refs) frames += r.frames.size();
  std::printf("refgen: wrote %zu clips (%zu frames) to %s/reference.csv\n", refs.size(), frames,
              a.out.c_str());
  return 0;
}

int cmd_train_teacher(const CliArgs& a) {
  harness::RunConfig cfg = resolve_config(a);
  prepare_out_dir(a.out, cfg);
  const auto refs = refgen::read_reference_csv(demo_path_of(a, cfg));
  const auto demo = refgen::build_dataset(refs);
  cfg.train.seed = cfg.seed;
  cfg.train.log_path = a.out + "/training_log.csv";
  cfg.train.checkpoint_path = a.out + "/teacher.ckpt";
  const auto res = trainer::train_teacher(demo, cfg.train);
  std::printf(
      "train-teacher: %d iterations, mean episode length %.1f, mean style %.3f, "
      "checkpoint %s/teacher.ckpt\n",
      res.iterations_run, res.mean_episode_length, res.mean_style, a.out.c_str());
  return 0;
}

int cmd_distill_student(const CliArgs& a) {
  harness::RunConfig cfg = resolve_config(a);
  if (a.checkpoint.empty())
    throw ConfigError("distill-student: --checkpoint (teacher) is required");
  prepare_out_dir(a.out, cfg);
  const auto teacher = trainer::load_teacher(a.checkpoint);
  cfg.distill.seed = cfg.seed;
  cfg.distill.log_path = a.out + "/distill_log.csv";
  cfg.distill.checkpoint_path = a.out + "/student.ckpt";
  const auto res = distill::train_student(teacher, cfg.distill);
  std::printf(
      "distill-student: %d epochs, action MSE %.5f, latent MSE %.5f, "
      "checkpoint %s/student.ckpt\n",
      res.epochs_run, res.action_mse, res.latent_mse, a.out.c_str());
  return 0;
}

// Owning holder so eval/push-test/plot can run either policy kind.
struct LoadedActor {
  trainer::TeacherPolicy teacher;
  distill::StudentPolicy student;
  std::unique_ptr<harness::Actor> actor;
};

LoadedActor load_actor(const CliArgs& a, const harness::RunConfig& cfg) {
  if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required for this command");
  LoadedActor out;
  if (cfg.eval_policy == "teacher") {
    out.teacher = trainer::load_teacher(a.checkpoint);
    out.actor = std::make_unique<harness::TeacherActor>(out.teacher);
  } else {
    out.student = distill::load_student(a.checkpoint);
    out.actor = std::make_unique<harness::StudentActor>(out.student);
  }
  return out;
}

int cmd_eval(const CliArgs& a) {
  const harness::RunConfig cfg = resolve_config(a);
  prepare_out_dir(a.out, cfg);
  auto loaded = load_actor(a, cfg);
  sim::RobotModel model;
  harness::SweepConfig sc;
  sc.terrains = cfg.eval_terrains;
  sc.speeds = cfg.eval_speeds;
  sc.n_episodes = cfg.eval_episodes;
  sc.horizon = cfg.eval_horizon;
  sc.difficulty = cfg.eval_difficulty;
  sc.randomize_domain = cfg.eval_randomize_domain;
  const auto rows = harness::eval_sweep(*loaded.actor, model, sc, cfg.seed);
  harness::write_sweep_csv(a.out + "/eval_sweep.csv", rows);
  std::printf("eval: %zu cells x %d episodes written to %s/eval_sweep.csv\n", rows.size(),
              sc.n_episodes, a.out.c_str());
  return 0;
}

int cmd_push_test(const CliArgs& a) {
  const harness::RunConfig cfg = resolve_config(a);
  prepare_out_dir(a.out, cfg);
  auto loaded = load_actor(a, cfg);
  sim::RobotModel model;
  harness::PushConfig pc;
  pc.cmd_vx = cfg.push_cmd_vx;
  pc.impulse = cfg.push_impulse;
  pc.t_push = cfg.push_time;
  pc.duration = cfg.push_duration;
  pc.horizon = cfg.push_horizon;
  const auto trials = harness::run_push_trials(*loaded.actor, model, pc, cfg.seed,
                                               cfg.push_trials);
  std::string csv = "trial,recovered,applied_impulse_ns,steps,termination\n";
  int recovered = 0;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const auto& t = trials[i];
    recovered += t.recovered ? 1 : 0;
    csv += std::to_string(i) + ',' + (t.recovered ? "1" : "0") + ',' +
           harness::fmt(t.applied_impulse) + ',' + std::to_string(t.log.steps.size()) + ',' +
           sim::termination_name(t.log.reason) + '\n';
  }
  harness::write_text_file(a.out + "/push_test.csv", csv);
  harness::emit_plots({trials.front().log}, a.out);
  std::printf("push-test: %d/%zu trials recovered, results in %s/push_test.csv\n", recovered,
              trials.size(), a.out.c_str());
  return 0;
}

int cmd_plot(const CliArgs& a) {
  const harness::RunConfig cfg = resolve_config(a);
  prepare_out_dir(a.out, cfg);
  auto loaded = load_actor(a, cfg);
  sim::RobotModel model;
  trainer::EnvConfig ec = cfg.train.env;
  ec.max_steps = cfg.eval_horizon;
  trainer::Env e = trainer::make_env(model, ec, cfg.seed);
  const auto log = harness::run_episode(e, *loaded.actor, cfg.eval_horizon);
  harness::emit_plots({log}, a.out);
  std::printf("plot: %zu-step episode (%s) plotted to %s\n", log.steps.size(),
              sim::termination_name(log.reason), a.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"planar bipedal locomotion: reference generation, training, evaluation"};
  app.require_subcommand(1);

  CliArgs args;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", args.config, "config file (key = value lines)");
    sub->add_option("--out", args.out, "output directory");
    sub->add_option("--checkpoint", args.checkpoint, "input checkpoint file");
    sub->add_option("--seed", args.seed, "override the config seed")
        ->each([&](const std::string&) { args.seed_set = true; });
  };

  CLI::App* refgen = app.add_subcommand("refgen", "generate the reference gait dataset");
  CLI::App* train = app.add_subcommand("train-teacher", "train the privileged teacher");
  CLI::App* dist = app.add_subcommand("distill-student", "distill the deployable student");
  CLI::App* ev = app.add_subcommand("eval", "terrain x speed evaluation sweep");
  CLI::App* push = app.add_subcommand("push-test", "impulse-recovery test");
  CLI::App* plot = app.add_subcommand("plot", "run one episode and emit SVG plots");
  for (CLI::App* sub : {refgen, train, dist, ev, push, plot}) add_common(sub);

  CLI11_PARSE(app, argc, argv);

  try {
    if (refgen->parsed()) return cmd_refgen(args);
    if (train->parsed()) return cmd_train_teacher(args);
    if (dist->parsed()) return cmd_distill_student(args);
    if (ev->parsed()) return cmd_eval(args);
    if (push->parsed()) return cmd_push_test(args);
    if (plot->parsed()) return cmd_plot(args);
  } catch (const bip::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const bip::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 1;
  } catch (const bip::IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return 3;
  } catch (const bip::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
