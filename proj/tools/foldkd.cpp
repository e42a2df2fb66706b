#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "foldkd/binio.hpp"
#include "foldkd/checkpoint.hpp"
#include "foldkd/config.hpp"
#include "foldkd/dataset.hpp"
#include "foldkd/distill.hpp"
#include "foldkd/encoder.hpp"
#include "foldkd/errors.hpp"
#include "foldkd/eval.hpp"
#include "foldkd/teacher.hpp"

namespace fs = std::filesystem;
using namespace foldkd;

namespace {

enum Exit { kOk = 0, kGateFailed = 1, kConfigError = 2, kIoError = 3 };

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string preset;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "key=value config file");
  cmd->add_option("--seed", c.seed, "global seed");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--preset", c.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--set", c.sets, "override, e.g. --set teacher.lr=3e-4")->allow_extra_args(false);
}

cfg::RunConfig load_config(const Common& c, const std::string& command) {
  std::vector<cfg::Assignment> file, overrides;
  if (!c.config_path.empty()) {
    if (!fs::exists(c.config_path)) throw ConfigError("config file '" + c.config_path + "' does not exist");
    file = cfg::parse_text(io::read_file(c.config_path));
  }
  for (const auto& s : c.sets) overrides.push_back(cfg::parse_assignment(s));
  if (c.seed) overrides.emplace_back("seed", std::to_string(*c.seed));
  if (!c.out.empty()) overrides.emplace_back("out", c.out);
  auto rc = cfg::resolve(c.preset, file, overrides);
  std::error_code ec;
  fs::create_directories(rc.out, ec);
  if (ec) throw IoError("cannot create output directory '" + rc.out + "': " + ec.message());
  io::write_file_atomic(rc.out_file(command + ".config"), rc.resolved());
  return rc;
}

void require(const std::string& path, const std::string& what, const std::string& hint) {
  if (!fs::exists(path)) throw ConfigError("missing " + what + " '" + path + "' (" + hint + ")");
}

data::Dataset load_dataset_for(const cfg::RunConfig& rc) {
  require(rc.dataset_path(), "dataset", "run collect first");
  auto ds = data::load_dataset(rc.dataset_path());
  if (ds.task.id != rc.task)
    throw ConfigError("dataset '" + rc.dataset_path() + "' is for task " + std::string(sim::task_name(ds.task.id)) +
                      ", config says " + std::string(sim::task_name(rc.task)));
  return ds;
}

// Image datasets are large; keep only the first `n` episodes.
void keep_first(data::Dataset& ds, std::size_t n) {
  if (ds.trajectories.size() <= n) return;
  ds.trajectories.resize(n);
  ds.compute_stats();
}

double expert_mean(const data::Dataset& ds) {
  double s = 0.0;
  for (const auto& t : ds.trajectories) s += t.meta.final_normalized;
  return s / static_cast<double>(ds.trajectories.size());
}

int gate(bool pass, const std::string& what) {
  std::cout << "gate: " << what << ": " << (pass ? "PASS" : "FAIL") << '\n';
  return pass ? kOk : kGateFailed;
}

std::string fmt3(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.3f", v);
  return b;
}

int cmd_collect(const Common& c) {
  const auto rc = load_config(c, "collect");
  data::CollectOptions opts;
  opts.gamma = rc.data.gamma;
  opts.store_observations = rc.data.store_observations;
  std::vector<std::uint64_t> discarded;
  const auto ds = data::collect(rc.task_spec(), rc.data.episodes, rc.stage_seed("collect"), opts, &discarded);
  data::save_dataset(ds, rc.dataset_path());
  std::cout << "wrote " << ds.trajectories.size() << " episodes (" << discarded.size() << " diverged and replaced) to "
            << rc.dataset_path() << '\n';
  const double m = expert_mean(ds);
  return gate(m >= rc.data.gate, "expert mean " + fmt3(m) + " >= " + fmt3(rc.data.gate));
}

int cmd_train_teacher(const Common& c) {
  const auto rc = load_config(c, "train-teacher");
  const auto ds = load_dataset_for(rc);
  const auto spec = rc.task_spec();
  model::DtModel teacher(rc.model_config(), rc.stage_seed("teacher-init"));
  teacher.normalizer() = train::make_normalizer(ds, rc.teacher.target_percentile);
  auto schedule = rc.teacher.schedule;
  schedule.seed = rc.stage_seed("teacher-train");
  train::Trainer trainer(teacher, schedule);
  train::TrainHooks hooks;
  hooks.metrics_path = rc.out_file("teacher_metrics.csv");
  hooks.checkpoint_path = rc.teacher_path();
  train::train_offline(teacher, trainer, ds, schedule, hooks);
  ckpt::save(ckpt::pack_model(teacher, ckpt::Kind::Teacher, &trainer.optimizer(), trainer.steps_done()),
             rc.out_file("teacher_offline.ckpt"));

  const std::uint64_t eval_seed = rc.stage_seed("eval");
  eval::DtPolicy offline_policy(teacher, "teacher-offline", teacher.normalizer().target_return);
  const auto offline = eval::evaluate(offline_policy, spec, rc.eval.trials, 0.0, eval_seed);

  train::ReplayBuffer buffer(rc.teacher.buffer_capacity ? rc.teacher.buffer_capacity : ds.trajectories.size());
  buffer.seed_offline(ds.trajectories);
  const auto online = train::finetune_online(teacher, trainer, buffer, schedule, spec, hooks);
  ckpt::save(ckpt::pack_model(teacher, ckpt::Kind::Teacher, &trainer.optimizer(), trainer.steps_done()),
             rc.teacher_path());
  const auto final_rep = train::evaluate_teacher(teacher, spec, rc.eval.trials, eval_seed);

  const auto table = eval::report_table({offline, final_rep});
  io::write_file_atomic(rc.out_file("teacher_eval.csv"), table.csv);
  std::cout << table.text;
  if (!online.agent_fraction.empty())
    std::cout << "replay buffer agent share: " << fmt3(online.agent_fraction.back()) << '\n';
  const double expert = expert_mean(ds);
  return gate(offline.mean >= rc.teacher.gate_ratio * expert,
              "offline teacher " + fmt3(offline.mean) + " >= " + fmt3(rc.teacher.gate_ratio) + " x expert " +
                  fmt3(expert));
}

int cmd_train_encoder(const Common& c) {
  const auto rc = load_config(c, "train-encoder");
  auto ds = load_dataset_for(rc);
  if (ds.trajectories.empty() || !ds.trajectories.front().has_observations())
    throw ConfigError("dataset '" + rc.dataset_path() + "' has no images (collect with data.store_observations=true)");
  keep_first(ds, rc.encoder.max_episodes);
  auto ecfg = rc.encoder.model;
  ecfg.state_dim = rc.task_spec().state_dim();
  vision::EncoderModel enc(ecfg, rc.stage_seed("encoder-init"));
  auto tcfg = rc.encoder.train;
  tcfg.seed = rc.stage_seed("encoder-train");
  const auto curves = vision::train_encoder(enc, ds, rc.encoder.augment, tcfg);
  const bool aug = rc.encoder.augment.enabled;
  ckpt::save(vision::pack_encoder(enc), rc.encoder_path(aug));

  std::string csv = "epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < curves.train_loss.size(); ++e)
    csv += std::to_string(e + 1) + "," + ckpt::format_double(curves.train_loss[e]) + "," +
           ckpt::format_double(curves.val_loss[e]) + "\n";
  const std::string tag = aug ? "" : "_noaug";
  io::write_file_atomic(rc.out_file("encoder_curves" + tag + ".csv"), csv);
  std::string rm = "coordinate,val_rmse,state_std\n";
  for (std::size_t j = 0; j < curves.val_rmse.size(); ++j) {
    rm += std::to_string(j) + "," + ckpt::format_double(curves.val_rmse[j]) + "," +
          ckpt::format_double(curves.state_std[j]) + "\n";
    std::cout << "coord " << j << ": rmse " << curves.val_rmse[j] << ", std " << curves.state_std[j] << '\n';
  }
  io::write_file_atomic(rc.out_file("encoder_rmse" + tag + ".csv"), rm);
  bool finite = true;
  for (double v : curves.val_rmse) finite = finite && std::isfinite(v);
  return gate(finite && curves.val_loss.back() < curves.val_loss.front(),
              "validation loss " + fmt3(curves.val_loss.front()) + " -> " + fmt3(curves.val_loss.back()));
}

int cmd_distill(const Common& c) {
  const auto rc = load_config(c, "distill");
  auto run = rc.distill.run;
  run.seed = rc.stage_seed("distill");
  const std::string enc_path = rc.encoder_path(run.use_augmented_encoder);
  require(rc.teacher_path(), "teacher checkpoint", "run train-teacher first");
  require(enc_path, "encoder checkpoint", "run train-encoder first");
  const auto teacher = ckpt::unpack_model(ckpt::load(rc.teacher_path(), ckpt::Kind::Teacher));
  const auto enc = vision::unpack_encoder(ckpt::load(enc_path, ckpt::Kind::Encoder));
  const auto spec = rc.task_spec();
  std::optional<data::Dataset> expert;
  if (!run.use_distillation) {
    expert = load_dataset_for(rc);
    keep_first(*expert, rc.encoder.max_episodes);
  }
  distill::DistillHooks hooks;
  hooks.curve_path = rc.out_file("distill_" + run.variant() + ".csv");
  hooks.checkpoint_path = rc.student_path();
  const auto res = distill::run_distillation(run, teacher, enc, spec, expert ? &*expert : nullptr, hooks);

  const std::uint64_t eval_seed = rc.stage_seed("eval");
  eval::DtPolicy student(res.student, "student-" + run.variant(), teacher.normalizer().target_return, &enc);
  const auto srep = eval::evaluate(student, spec, rc.eval.trials, 0.0, eval_seed);
  const auto trep = train::evaluate_teacher(teacher, spec, rc.eval.trials, eval_seed);
  const auto table = eval::report_table({trep, srep});
  io::write_file_atomic(rc.out_file("distill_" + run.variant() + "_eval.csv"), table.csv);
  std::cout << table.text;
  return gate(srep.mean >= rc.distill.gate_ratio * trep.mean,
              "student " + fmt3(srep.mean) + " >= " + fmt3(rc.distill.gate_ratio) + " x teacher " + fmt3(trep.mean));
}

struct PolicyArgs {
  std::vector<std::string> checkpoints;
  std::string encoder;
  std::string builtin;  // expert | random
};

// Owns whatever a policy points into.
struct LoadedPolicies {
  std::vector<std::unique_ptr<model::DtModel>> models;
  std::vector<std::unique_ptr<vision::EncoderModel>> encoders;
  std::vector<std::unique_ptr<eval::Policy>> policies;
};

// Teacher checkpoints act on true states; student checkpoints go through
// render -> encode.
LoadedPolicies load_policies(const cfg::RunConfig& rc, const PolicyArgs& a) {
  LoadedPolicies out;
  if (a.builtin == "expert") out.policies.push_back(std::make_unique<eval::ExpertPolicy>());
  if (a.builtin == "random") out.policies.push_back(std::make_unique<eval::RandomPolicy>());
  std::vector<std::string> paths = a.checkpoints;
  if (paths.empty() && a.builtin.empty()) paths.push_back(rc.student_path());
  for (const auto& p : paths) {
    require(p, "checkpoint", "pass --checkpoint");
    const auto ck = ckpt::load(p);
    if (ck.kind == ckpt::Kind::Encoder) throw ConfigError("'" + p + "' is an encoder checkpoint, not a policy");
    auto m = std::make_unique<model::DtModel>(ckpt::unpack_model(ck));
    const std::string id = fs::path(p).stem().string();
    const vision::EncoderModel* enc = nullptr;
    if (ck.kind == ckpt::Kind::Student) {
      const std::string ep = a.encoder.empty() ? rc.encoder_path(rc.distill.run.use_augmented_encoder) : a.encoder;
      require(ep, "encoder checkpoint", "a student needs the encoder it was distilled with; pass --encoder");
      out.encoders.push_back(
          std::make_unique<vision::EncoderModel>(vision::unpack_encoder(ckpt::load(ep, ckpt::Kind::Encoder))));
      enc = out.encoders.back().get();
    }
    out.policies.push_back(std::make_unique<eval::DtPolicy>(*m, id, m->normalizer().target_return, enc));
    out.models.push_back(std::move(m));
  }
  return out;
}

void add_policy_args(CLI::App* cmd, PolicyArgs& a) {
  cmd->add_option("--checkpoint", a.checkpoints, "teacher or student checkpoint(s)");
  cmd->add_option("--encoder", a.encoder, "encoder checkpoint for students");
  cmd->add_option("--policy", a.builtin, "built-in policy")->check(CLI::IsMember({"expert", "random"}));
}

int cmd_eval(const Common& c, const PolicyArgs& a) {
  const auto rc = load_config(c, "eval");
  auto loaded = load_policies(rc, a);
  std::vector<eval::EvalReport> reps;
  for (auto& p : loaded.policies)
    reps.push_back(eval::evaluate(*p, rc.task_spec(), rc.eval.trials, rc.eval.sigma, rc.stage_seed("eval")));
  const auto table = eval::report_table(reps);
  io::write_file_atomic(rc.out_file("eval.csv"), table.csv);
  std::cout << table.text;
  return kOk;
}

int cmd_sweep(const Common& c, const PolicyArgs& a) {
  const auto rc = load_config(c, "sweep");
  auto loaded = load_policies(rc, a);
  std::vector<eval::Policy*> ps;
  for (auto& p : loaded.policies) ps.push_back(p.get());
  const auto sweep = eval::noise_sweep(ps, rc.task_spec(), rc.eval.noise_grid, rc.eval.trials, rc.stage_seed("eval"));
  io::write_file_atomic(rc.out_file("sweep.csv"), eval::sweep_csv(sweep));
  std::vector<eval::EvalReport> all;
  for (const auto& row : sweep.reports) all.insert(all.end(), row.begin(), row.end());
  std::cout << eval::report_table(all).text;
  return kOk;
}

int cmd_report(const Common& c, const std::vector<std::string>& inputs) {
  const auto rc = load_config(c, "report");
  std::vector<eval::EvalReport> all;
  for (const auto& p : inputs) {
    require(p, "report", "pass CSV files written by eval, train-teacher or distill");
    auto reps = eval::load_report_csv(io::read_file(p));
    all.insert(all.end(), reps.begin(), reps.end());
  }
  const auto table = eval::report_table(all);
  io::write_file_atomic(rc.out_file("report.csv"), table.csv);
  io::write_file_atomic(rc.out_file("report.txt"), table.text);
  std::cout << table.text;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"foldkd: teacher-student policy distillation for cloth folding"};
  app.require_subcommand(1);
  Common common;
  PolicyArgs pargs;
  std::vector<std::string> report_inputs;

  auto* collect = app.add_subcommand("collect", "record expert episodes");
  auto* teacher = app.add_subcommand("train-teacher", "offline training, then online fine-tuning");
  auto* encoder = app.add_subcommand("train-encoder", "image -> state regressor");
  auto* distill = app.add_subcommand("distill", "teacher -> image student");
  auto* evalc = app.add_subcommand("eval", "evaluate policies");
  auto* sweep = app.add_subcommand("sweep", "evaluate policies over a state-noise grid");
  auto* report = app.add_subcommand("report", "merge report CSVs into one table");
  for (auto* cmd : {collect, teacher, encoder, distill, evalc, sweep, report}) add_common(cmd, common);
  add_policy_args(evalc, pargs);
  add_policy_args(sweep, pargs);
  report->add_option("inputs", report_inputs, "report CSV files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (collect->parsed()) return cmd_collect(common);
    if (teacher->parsed()) return cmd_train_teacher(common);
    if (encoder->parsed()) return cmd_train_encoder(common);
    if (distill->parsed()) return cmd_distill(common);
    if (evalc->parsed()) return cmd_eval(common, pargs);
    if (sweep->parsed()) return cmd_sweep(common, pargs);
    if (report->parsed()) return cmd_report(common, report_inputs);
  } catch (const ConfigError& e) {
    spdlog::error("configuration error: {}", e.what());
    return kConfigError;
  } catch (const ArchitectureError& e) {
    spdlog::error("configuration error: {}", e.what());
    return kConfigError;
  } catch (const FormatError& e) {
    spdlog::error("format error: {}", e.what());
    return kIoError;
  } catch (const IoError& e) {
    spdlog::error("I/O error: {}", e.what());
    return kIoError;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kGateFailed;
  }
  return kOk;
}
