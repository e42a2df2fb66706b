// Acceptance run for criteria 1-14. Prints one PASS/FAIL line per criterion
// and exits non-zero if any fails.
//
//   acceptance            all criteria
//   acceptance 9 11       a subset (shared artifacts are built as needed)
//
// FOLDKD_ACCEPTANCE_CACHE=<dir> keeps datasets, teachers, encoders and
// students between runs. Only meant for development; the recorded run
// starts empty.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "foldkd/binio.hpp"
#include "foldkd/checkpoint.hpp"
#include "foldkd/config.hpp"
#include "foldkd/dataset.hpp"
#include "foldkd/distill.hpp"
#include "foldkd/encoder.hpp"
#include "foldkd/eval.hpp"
#include "foldkd/ops.hpp"
#include "foldkd/teacher.hpp"
#include "gradcheck.hpp"

namespace fs = std::filesystem;
using namespace foldkd;

namespace {

constexpr std::size_t kSeeds = 5;
constexpr std::size_t kTrials = 100;
const sim::TaskId kTasks[] = {sim::TaskId::FoldFree, sim::TaskId::FoldPinned};

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

std::string fmt(const char* f, double v) {
  char b[64];
  std::snprintf(b, sizeof b, f, v);
  return b;
}

std::string param_bytes(const ad::ParamMap& p) {
  std::string out;
  for (const auto& [name, t] : p) {
    out += name;
    const auto d = t.data();
    out.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
  }
  return out;
}

// Trained models still hold the gradients of their last training step.
std::string grad_bytes(const ad::ParamMap& p) {
  std::string out;
  for (const auto& [name, t] : p) {
    const auto g = t.grad();
    out.append(reinterpret_cast<const char*>(g.data()), g.size() * sizeof(double));
  }
  return out;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

void note(const std::string& s) { std::printf("    %s\n", s.c_str()); std::fflush(stdout); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// Shared artifacts, built once per run with the CLI's desk settings and seeds.

struct StudentRun {
  std::unique_ptr<model::DtModel> student;
  std::vector<distill::CurveRow> curve;
  double final_mean = 0.0;
  double cpu = 0.0;
};

struct TaskArtifacts {
  std::optional<data::Dataset> states;
  std::optional<data::Dataset> images;
  std::unique_ptr<model::DtModel> teacher_offline, teacher;
  double teacher_cpu = 0.0;
  std::unique_ptr<vision::EncoderModel> enc_aug, enc_noaug;
  std::optional<eval::EvalReport> expert, teacher_offline_eval, teacher_eval;
};

class Artifacts {
 public:
  Artifacts() {
    if (const char* c = std::getenv("FOLDKD_ACCEPTANCE_CACHE")) {
      cache_ = c;
      fs::create_directories(cache_);
    }
  }

  cfg::RunConfig config(sim::TaskId task) const {
    auto rc = cfg::RunConfig::make(cfg::Preset::Desk);
    rc.task = task;
    return rc;
  }
  std::uint64_t eval_seed(sim::TaskId task) const { return config(task).stage_seed("eval"); }

  TaskArtifacts& at(sim::TaskId t) { return tasks_[static_cast<int>(t)]; }

  const data::Dataset& states(sim::TaskId task) {
    auto& a = at(task);
    if (!a.states) {
      const auto rc = config(task);
      const std::string path = cached("states_" + name(task) + ".bin");
      if (!path.empty() && fs::exists(path)) {
        a.states = data::load_dataset(path);
      } else {
        data::CollectOptions o;
        o.store_observations = false;
        a.states = data::collect(rc.task_spec(), rc.data.episodes, rc.stage_seed("collect"), o);
        if (!path.empty()) data::save_dataset(*a.states, path);
      }
    }
    return *a.states;
  }

  // The first encoder.max_episodes episodes of the same collection, with images.
  const data::Dataset& images(sim::TaskId task) {
    auto& a = at(task);
    if (!a.images) {
      const auto rc = config(task);
      const std::string path = cached("images_" + name(task) + ".bin");
      if (!path.empty() && fs::exists(path)) {
        a.images = data::load_dataset(path);
      } else {
        a.images = data::collect(rc.task_spec(), rc.encoder.max_episodes, rc.stage_seed("collect"));
        if (!path.empty()) data::save_dataset(*a.images, path);
      }
    }
    return *a.images;
  }
  void drop_images(sim::TaskId task) { at(task).images.reset(); }

  // Offline training then online fine-tuning, as train-teacher does.
  TaskArtifacts& teachers(sim::TaskId task) {
    auto& a = at(task);
    if (a.teacher) return a;
    const std::string off = cached("teacher_offline_" + name(task) + ".ckpt");
    const std::string fin = cached("teacher_" + name(task) + ".ckpt");
    const std::string cpu = cached("teacher_" + name(task) + ".cpu");
    if (!fin.empty() && fs::exists(fin) && fs::exists(off) && fs::exists(cpu)) {
      a.teacher_offline = std::make_unique<model::DtModel>(ckpt::unpack_model(ckpt::load(off)));
      a.teacher = std::make_unique<model::DtModel>(ckpt::unpack_model(ckpt::load(fin)));
      a.teacher_cpu = std::stod(io::read_file(cpu));
      return a;
    }
    const auto& ds = states(task);
    const auto rc = config(task);
    const double t0 = cpu_seconds();
    auto m = std::make_unique<model::DtModel>(rc.model_config(), rc.stage_seed("teacher-init"));
    m->normalizer() = train::make_normalizer(ds, rc.teacher.target_percentile);
    auto schedule = rc.teacher.schedule;
    schedule.seed = rc.stage_seed("teacher-train");
    train::Trainer trainer(*m, schedule);
    train::train_offline(*m, trainer, ds, schedule);
    a.teacher_offline = std::make_unique<model::DtModel>(m->clone());
    train::ReplayBuffer buffer(ds.trajectories.size());
    buffer.seed_offline(ds.trajectories);
    train::finetune_online(*m, trainer, buffer, schedule, rc.task_spec());
    a.teacher = std::move(m);
    a.teacher_cpu = cpu_seconds() - t0;
    note("teacher " + name(task) + ": " + fmt("%.0f s CPU", a.teacher_cpu));
    if (!fin.empty()) {
      ckpt::save(ckpt::pack_model(*a.teacher_offline, ckpt::Kind::Teacher), off);
      ckpt::save(ckpt::pack_model(*a.teacher, ckpt::Kind::Teacher), fin);
      io::write_file_atomic(cpu, std::to_string(a.teacher_cpu));
    }
    return a;
  }

  const model::DtModel& teacher(sim::TaskId task) { return *teachers(task).teacher; }

  const vision::EncoderModel& encoder(sim::TaskId task, bool augmented) {
    auto& a = at(task);
    auto& slot = augmented ? a.enc_aug : a.enc_noaug;
    if (slot) return *slot;
    const std::string path = cached("encoder_" + name(task) + (augmented ? "" : "_noaug") + ".ckpt");
    if (!path.empty() && fs::exists(path)) {
      slot = std::make_unique<vision::EncoderModel>(vision::unpack_encoder(ckpt::load(path)));
      return *slot;
    }
    auto rc = config(task);
    auto ecfg = rc.encoder.model;
    ecfg.state_dim = rc.task_spec().state_dim();
    slot = std::make_unique<vision::EncoderModel>(ecfg, rc.stage_seed("encoder-init"));
    auto aug = rc.encoder.augment;
    aug.enabled = augmented;
    auto tcfg = rc.encoder.train;
    tcfg.seed = rc.stage_seed("encoder-train");
    const double t0 = cpu_seconds();
    vision::train_encoder(*slot, images(task), aug, tcfg);
    note("encoder " + name(task) + (augmented ? " (augmented)" : " (no augmentation)") + ": " +
         fmt("%.0f s CPU", cpu_seconds() - t0));
    if (!path.empty()) ckpt::save(vision::pack_encoder(*slot), path);
    return *slot;
  }

  eval::EvalReport expert_eval(sim::TaskId task) {
    auto& a = at(task);
    if (!a.expert) {
      eval::ExpertPolicy p;
      a.expert = eval::evaluate(p, sim::TaskSpec::make(task), kTrials, 0.0, eval_seed(task));
    }
    return *a.expert;
  }

  // Distillation run `seed_index` of a variant; final score over kTrials.
  StudentRun& student(sim::TaskId task, const distill::DistillConfig& flags, double sigma,
                      std::size_t seed_index) {
    const std::string key = name(task) + "_" + flags.variant() + "_s" + fmt("%g", sigma) + "_" +
                            std::to_string(seed_index);
    auto it = students_.find(key);
    if (it != students_.end()) return it->second;
    StudentRun run;
    const auto rc = config(task);
    auto cfg = rc.distill.run;
    cfg.use_augmented_encoder = flags.use_augmented_encoder;
    cfg.use_weight_copy = flags.use_weight_copy;
    cfg.use_distillation = flags.use_distillation;
    cfg.sigma = sigma;
    cfg.seed = derive_seed(rc.stage_seed("distill"), static_cast<std::uint64_t>(seed_index));
    const auto& enc = encoder(task, cfg.use_augmented_encoder);
    const auto& teach = teacher(task);

    const std::string ck = cached("student_" + key + ".ckpt");
    if (!ck.empty() && fs::exists(ck)) {
      run.student = std::make_unique<model::DtModel>(ckpt::unpack_model(ckpt::load(ck)));
      std::istringstream in(io::read_file(cached("student_" + key + ".txt")));
      in >> run.final_mean >> run.cpu;
      distill::CurveRow r;
      char comma;
      while (in >> r.epoch >> comma >> r.loss >> comma >> r.eval_mean >> comma >> r.eval_std) run.curve.push_back(r);
      return students_.emplace(key, std::move(run)).first->second;
    }

    const double t0 = cpu_seconds();
    const data::Dataset* expert = cfg.use_distillation ? nullptr : &images(task);
    auto res = distill::run_distillation(cfg, teach, enc, rc.task_spec(), expert);
    run.curve = res.curve;
    run.student = std::make_unique<model::DtModel>(std::move(res.student));
    eval::DtPolicy p(*run.student, "student", teach.normalizer().target_return, &enc);
    run.final_mean = eval::evaluate(p, rc.task_spec(), kTrials, 0.0, eval_seed(task)).mean;
    run.cpu = cpu_seconds() - t0;
    note("distill " + key + ": " + fmt("%.3f", run.final_mean) + fmt(" (%.0f s CPU)", run.cpu));
    if (!ck.empty()) {
      ckpt::save(ckpt::pack_model(*run.student, ckpt::Kind::Student), ck);
      std::ostringstream out;
      out.precision(17);
      out << run.final_mean << ' ' << run.cpu << '\n';
      for (const auto& r : run.curve)
        out << r.epoch << ',' << r.loss << ',' << r.eval_mean << ',' << r.eval_std << '\n';
      io::write_file_atomic(cached("student_" + key + ".txt"), out.str());
    }
    return students_.emplace(key, std::move(run)).first->second;
  }

  static std::string name(sim::TaskId t) { return std::string(sim::task_name(t)); }

 private:
  std::string cached(const std::string& file) const { return cache_.empty() ? "" : (fs::path(cache_) / file).string(); }

  std::string cache_;
  std::map<int, TaskArtifacts> tasks_;
  std::map<std::string, StudentRun> students_;
};

// Mean curve over the seeds of one configuration.
std::vector<double> mean_curve(const std::vector<StudentRun*>& runs) {
  std::vector<double> out(runs.front()->curve.size(), 0.0);
  for (const auto* r : runs)
    for (std::size_t e = 0; e < out.size(); ++e) out[e] += r->curve[e].eval_mean / static_cast<double>(runs.size());
  return out;
}

// ---------------------------------------------------------------------------

model::TokenBatch random_window(const model::DtConfig& cfg, std::size_t B, std::mt19937_64& rng) {
  const std::size_t K = cfg.context;
  auto batch = model::TokenBatch::empty(B, K, cfg);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> u(-0.95, 0.95);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t skip = rng() % K;
    const std::size_t t0 = rng() % (cfg.max_episode_len - K + 1);
    for (std::size_t t = 0; t < K; ++t) {
      const std::size_t r = b * K + t;
      batch.returns_to_go[r] = -3.0 + nd(rng);
      for (std::size_t j = 0; j < cfg.state_dim; ++j) batch.states[r * cfg.state_dim + j] = 0.2 + 0.1 * nd(rng);
      for (std::size_t j = 0; j < cfg.action_dim; ++j) batch.actions[r * cfg.action_dim + j] = u(rng);
      batch.timesteps[r] = t0 + t;
      batch.valid[r] = t >= skip;
    }
  }
  return batch;
}

Outcome c1_gradients() {
  const double t0 = cpu_seconds();
  double worst_op = 0.0, worst_model = 0.0;
  std::string worst_name;
  const auto cfg = model::DtConfig::desk(8, 3);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& [name, err] : testing::op_gradient_errors(seed))
      if (err > worst_op) {
        worst_op = err;
        worst_name = name;
      }

    // Full desk transformer, dropout on, entropy term included.
    model::DtModel m(cfg, 1000 + seed);
    m.normalizer().state_mean.assign(8, 0.2);
    m.normalizer().state_std.assign(8, 0.1);
    m.normalizer().return_scale = 5.0;
    std::mt19937_64 rng(seed);
    const auto batch = random_window(cfg, 2, rng);
    auto f = [&] {
      Rng r(77 + seed);
      model::ForwardOptions fo;
      fo.train = true;
      fo.rng = &r;
      return model::loss_total(m, batch, r, fo);
    };
    ad::zero_grad(m.params());
    ad::backward(f());
    // A few coordinates of every tensor plus random directions through all of them.
    std::vector<double> analytic, numeric;
    const double h = 1e-5;
    for (auto& [name, t] : m.params()) {
      auto data = t.mutable_data();
      for (int k = 0; k < 3; ++k) {
        const std::size_t i = rng() % data.size();
        const double orig = data[i];
        ad::NoGradGuard guard;
        data[i] = orig + h;
        const double fp = f().item();
        data[i] = orig - h;
        const double fm = f().item();
        data[i] = orig;
        analytic.push_back(t.grad()[i]);
        numeric.push_back((fp - fm) / (2 * h));
      }
    }
    worst_model = std::max(worst_model, testing::relative_error(analytic, numeric));
    for (int d = 0; d < 2; ++d) {
      std::normal_distribution<double> nd(0.0, 1.0);
      std::map<std::string, std::vector<double>> dir;
      double dot = 0.0;
      for (auto& [name, t] : m.params()) {
        auto& v = dir[name];
        v.resize(t.numel());
        for (std::size_t i = 0; i < v.size(); ++i) {
          v[i] = nd(rng);
          dot += v[i] * t.grad()[i];
        }
      }
      auto shift = [&](double s) {
        for (auto& [name, t] : m.params()) {
          auto data = t.mutable_data();
          for (std::size_t i = 0; i < data.size(); ++i) data[i] += s * dir[name][i];
        }
      };
      const auto saved = param_bytes(m.params());
      std::map<std::string, std::vector<double>> orig;
      for (auto& [name, t] : m.params()) orig[name].assign(t.data().begin(), t.data().end());
      auto restore = [&] {
        for (auto& [name, t] : m.params()) std::copy(orig[name].begin(), orig[name].end(), t.mutable_data().begin());
      };
      ad::NoGradGuard guard;
      shift(h);
      const double fp = f().item();
      restore();
      shift(-h);
      const double fm = f().item();
      restore();
      if (param_bytes(m.params()) != saved) return {false, "parameter restore failed"};
      const double num = (fp - fm) / (2 * h);
      const double rel = std::abs(num - dot) / std::max({std::abs(num), std::abs(dot), 1e-10});
      worst_model = std::max(worst_model, rel);
    }
  }
  const double cpu = cpu_seconds() - t0;
  const bool pass = worst_op < 1e-4 && worst_model < 1e-3 && cpu < 60.0;
  return {pass, "worst op rel err " + fmt("%.2e", worst_op) + " (" + worst_name + "), transformer " +
                    fmt("%.2e", worst_model) + ", 20 seeds, " + fmt("%.1f s CPU", cpu)};
}

Outcome c2_causality() {
  const auto cfg = model::DtConfig::desk(8, 3);
  model::DtModel m(cfg, 5);
  m.normalizer().state_mean.assign(8, 0.2);
  m.normalizer().state_std.assign(8, 0.1);
  m.normalizer().return_scale = 5.0;
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::size_t checks = 0, broken = 0;
  for (int w = 0; w < 100; ++w) {
    auto base = random_window(cfg, 1, rng);
    std::fill(base.valid.begin(), base.valid.end(), 1);
    const auto out = m.forward(base);
    const std::size_t K = cfg.context;
    for (std::size_t t = 0; t < K; ++t) {
      auto p = base;
      // the action at t and every token after t
      for (std::size_t j = 0; j < 3; ++j) p.actions[t * 3 + j] = std::tanh(nd(rng));
      for (std::size_t u = t + 1; u < K; ++u) {
        p.returns_to_go[u] += nd(rng);
        for (std::size_t j = 0; j < 8; ++j) p.states[u * 8 + j] += nd(rng);
        for (std::size_t j = 0; j < 3; ++j) p.actions[u * 3 + j] = std::tanh(nd(rng));
        p.timesteps[u] = rng() % cfg.max_episode_len;
      }
      const auto q = m.forward(p);
      for (std::size_t s = 0; s <= t; ++s)
        for (std::size_t j = 0; j < 3; ++j) {
          ++checks;
          if (q.mean.at(s * 3 + j) != out.mean.at(s * 3 + j) || q.log_std.at(s * 3 + j) != out.log_std.at(s * 3 + j))
            ++broken;
        }
    }
  }
  return {broken == 0, std::to_string(broken) + " of " + std::to_string(checks) + " earlier predictions changed, 100 windows"};
}

Outcome c3_identity(Artifacts& art) {
  const auto& teacher = art.teacher(sim::TaskId::FoldFree);
  const auto student = distill::init_student(teacher, true, 99);
  const auto& norm = teacher.normalizer();
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> a(-0.95, 0.95);
  std::size_t same = 0;
  for (int i = 0; i < 100; ++i) {
    model::History h(norm.target_return);
    const std::size_t steps = 1 + rng() % 50;
    for (std::size_t t = 0; t < steps; ++t) {
      std::vector<double> s(8);
      for (std::size_t j = 0; j < 8; ++j) s[j] = norm.state_mean[j] + norm.state_std[j] * nd(rng);
      h.observe(s);  // the oracle encoder reports the true state
      if (t + 1 < steps) {
        const std::vector<double> act{a(rng), a(rng), a(rng)};
        h.record(act, -0.01 * std::abs(nd(rng)));
      }
    }
    if (model::act(student, h, true) == model::act(teacher, h, true)) ++same;
  }
  return {same == 100, std::to_string(same) + "/100 histories give bitwise-identical greedy actions"};
}

Outcome c4_freeze(Artifacts& art) {
  const auto task = sim::TaskId::FoldFree;
  const auto& teacher = art.teacher(task);
  const auto& enc = art.encoder(task, true);
  const auto t_before = param_bytes(teacher.params());
  const auto e_before = param_bytes(enc.params());
  const auto grads_before = grad_bytes(teacher.params()) + grad_bytes(enc.params());
  auto cfg = art.config(task).distill.run;
  cfg.seed = 4;
  auto student = distill::init_student(teacher, true, cfg.seed);
  const auto pool = distill::collect_paired(student, teacher, enc, sim::TaskSpec::make(task),
                                            eval::trial_seeds(derive_seed(cfg.seed, "freeze"), 10));
  distill::Distiller d(student, cfg);
  for (int i = 0; i < 1000; ++i) d.step(pool);
  const bool t_same = param_bytes(teacher.params()) == t_before;
  const bool e_same = param_bytes(enc.params()) == e_before;
  const bool untouched = grad_bytes(teacher.params()) + grad_bytes(enc.params()) == grads_before;
  const bool moved = param_bytes(student.params()) != t_before;
  return {t_same && e_same && untouched && moved,
          std::string("after 1000 steps: teacher bytes ") + (t_same ? "unchanged" : "CHANGED") + ", encoder bytes " +
              (e_same ? "unchanged" : "CHANGED") + ", frozen grad buffers " + (untouched ? "untouched" : "WRITTEN") +
              ", student " + (moved ? "moved" : "did not move")};
}

Outcome c5_loss_decomposition() {
  auto cfg = model::DtConfig::desk(8, 3);
  const bool default_present = model::DtConfig{}.entropy_weight == 0.1 &&
                               cfg::RunConfig::make(cfg::Preset::Desk).get("model.entropy_weight") == "0.1" &&
                               cfg::RunConfig::make(cfg::Preset::Paper).get("model.entropy_weight") == "0.1";
  cfg.entropy_weight = 0.0;
  std::size_t equal = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    model::DtModel m(cfg, seed);
    m.normalizer().state_mean.assign(8, 0.2);
    m.normalizer().state_std.assign(8, 0.1);
    std::mt19937_64 rng(seed);
    const auto batch = random_window(cfg, 4, rng);
    Rng r(seed);
    if (model::loss_total(m, batch, r).item() == model::loss_ce(m, batch).item()) ++equal;
  }
  return {equal == 20 && default_present,
          std::to_string(equal) + "/20 batches with weight 0 give loss_total == loss_ce exactly; default weight 0.1 " +
              (default_present ? "present" : "MISSING")};
}

Outcome c6_return_to_go(Artifacts& art) {
  std::size_t trajectories = 0, steps = 0, bad = 0;
  for (auto task : kTasks) {
    const auto& ds = art.states(task);
    if (ds.trajectories.size() != 500) return {false, "dataset has " + std::to_string(ds.trajectories.size()) + " episodes"};
    for (const auto& tr : ds.trajectories) {
      ++trajectories;
      const std::size_t H = tr.length();
      for (std::size_t t = 0; t < H; ++t) {
        ++steps;
        const double next = t + 1 < H ? tr.returns_to_go[t + 1] : 0.0;
        const double expect = t + 1 < H ? tr.rewards[t] + ds.gamma * next : tr.rewards[t];
        if (tr.returns_to_go[t] != expect) ++bad;
      }
    }
  }
  return {bad == 0, std::to_string(bad) + " mismatches over " + std::to_string(steps) + " steps of " +
                        std::to_string(trajectories) + " trajectories (two 500-episode datasets)"};
}

Outcome c7_expert(Artifacts& art) {
  const double t0 = cpu_seconds();
  std::string d;
  bool pass = true;
  for (auto task : kTasks) {
    const auto r = art.expert_eval(task);
    pass = pass && r.mean >= 0.85;
    d += Artifacts::name(task) + " " + fmt("%.3f", r.mean) + ", ";
  }
  const double cpu = cpu_seconds() - t0;
  pass = pass && cpu < 120.0;
  return {pass, d + "100 trials each, " + fmt("%.1f s CPU", cpu)};
}

Outcome c8_teacher(Artifacts& art) {
  bool pass = true;
  double cpu = 0.0;
  std::string d;
  for (auto task : kTasks) {
    auto& a = art.teachers(task);
    cpu += a.teacher_cpu;
    const auto spec = sim::TaskSpec::make(task);
    const auto expert = art.expert_eval(task);
    const auto off = train::evaluate_teacher(*a.teacher_offline, spec, kTrials, art.eval_seed(task));
    const auto fin = train::evaluate_teacher(*a.teacher, spec, kTrials, art.eval_seed(task));
    a.teacher_offline_eval = off;
    a.teacher_eval = fin;
    pass = pass && off.mean >= 0.8 * expert.mean && fin.mean >= off.mean - 0.02;
    d += Artifacts::name(task) + ": offline " + fmt("%.3f", off.mean) + " (" + fmt("%.2f", off.mean / expert.mean) +
         "x expert), fine-tuned " + fmt("%.3f", fin.mean) + "; ";
  }
  pass = pass && cpu < 20 * 60.0;
  return {pass, d + fmt("training %.0f s CPU", cpu)};
}

Outcome c9_distill_ratio(Artifacts& art) {
  bool pass = true;
  double cpu = 0.0;
  std::string d;
  for (auto task : kTasks) {
    const double ratio = task == sim::TaskId::FoldFree ? 0.7 : 0.9;
    std::vector<double> finals;
    for (std::size_t s = 0; s < kSeeds; ++s) {
      auto& run = art.student(task, distill::DistillConfig::ours(), 0.0, s);
      finals.push_back(run.final_mean);
      cpu += run.cpu;
    }
    const double teacher =
        train::evaluate_teacher(art.teacher(task), sim::TaskSpec::make(task), kTrials, art.eval_seed(task)).mean;
    const double student = mean_of(finals);
    pass = pass && student >= ratio * teacher;
    d += Artifacts::name(task) + ": student " + fmt("%.3f", student) + " / teacher " + fmt("%.3f", teacher) + " = " +
         fmt("%.2f", student / teacher) + fmt(" (need %.1f); ", ratio);
  }
  pass = pass && cpu < 20 * 60.0;
  return {pass, d + "5 seeds x 100 trials, " + fmt("%.0f s CPU", cpu)};
}

Outcome c10_convergence(Artifacts& art) {
  bool pass = true;
  std::string d;
  for (auto task : kTasks) {
    std::vector<StudentRun*> runs;
    for (std::size_t s = 0; s < kSeeds; ++s) runs.push_back(&art.student(task, distill::DistillConfig::ours(), 0.0, s));
    const auto curve = mean_curve(runs);
    const double slope = distill::tail_slope(curve, 10);
    pass = pass && curve.size() == 60 && slope < 0.002;
    d += Artifacts::name(task) + fmt(": last-10 slope %+.4f/epoch", slope) + fmt(" over %.0f epochs; ", static_cast<double>(curve.size()));
  }
  return {pass, d + "seed-averaged curves"};
}

Outcome c11_ablation(Artifacts& art) {
  const auto task = sim::TaskId::FoldFree;
  auto finals = [&](const distill::DistillConfig& flags) {
    std::vector<double> v;
    for (std::size_t s = 0; s < kSeeds; ++s) v.push_back(art.student(task, flags, 0.0, s).final_mean);
    return mean_of(v);
  };
  const double ours = finals(distill::DistillConfig::ours());
  const double no_aug = finals(distill::DistillConfig::no_aug());
  const double no_pre = finals(distill::DistillConfig::no_pretrain());
  art.drop_images(sim::TaskId::FoldPinned);
  const double no_dis = finals(distill::DistillConfig::no_distill());
  const bool pass = ours >= no_aug && ours > no_pre && ours > no_dis;
  return {pass, "fold-free, 5 seeds: ours " + fmt("%.3f", ours) + ", no-aug " + fmt("%.3f", no_aug) + ", no-pretrain " +
                    fmt("%.3f", no_pre) + ", no-distill " + fmt("%.3f", no_dis)};
}

Outcome c12_noise(Artifacts& art) {
  const auto task = sim::TaskId::FoldFree;
  const auto spec = sim::TaskSpec::make(task);
  const auto& enc = art.encoder(task, true);
  const double target = art.teacher(task).normalizer().target_return;
  const double sigma = 1e-3;
  std::vector<double> drop_clean, drop_noisy, final_clean, final_noisy;
  std::vector<StudentRun*> noisy_runs;
  for (std::size_t s = 0; s < kSeeds; ++s) {
    auto& clean = art.student(task, distill::DistillConfig::ours(), 0.0, s);
    auto& noisy = art.student(task, distill::DistillConfig::ours(), sigma, s);
    noisy_runs.push_back(&noisy);
    final_clean.push_back(clean.final_mean);
    final_noisy.push_back(noisy.final_mean);
    const std::uint64_t seeds = derive_seed(art.eval_seed(task), static_cast<std::uint64_t>(100 + s));
    auto drop = [&](const model::DtModel& m) {
      eval::DtPolicy p(m, "s", target, &enc);
      return eval::evaluate(p, spec, 10, 0.0, seeds).mean - eval::evaluate(p, spec, 10, sigma, seeds).mean;
    };
    drop_clean.push_back(drop(*clean.student));
    drop_noisy.push_back(drop(*noisy.student));
  }
  const double dc = mean_of(drop_clean), dn = mean_of(drop_noisy);
  const double slope = distill::tail_slope(mean_curve(noisy_runs), 10);
  const double gap = std::abs(mean_of(final_noisy) - mean_of(final_clean));
  const bool pass = dn < dc && slope < 0.002 && gap <= 0.05;
  return {pass, "drop at eval sigma 1e-3: sigma-trained " + fmt("%+.4f", dn) + " vs clean-trained " + fmt("%+.4f", dc) +
                    "; sigma-trained slope " + fmt("%+.4f", slope) + ", final " + fmt("%.3f", mean_of(final_noisy)) +
                    " vs " + fmt("%.3f", mean_of(final_clean)) + " (gap " + fmt("%.3f", gap) + ")"};
}

Outcome c13_encoder(Artifacts& art) {
  bool pass = true;
  std::string d;
  for (auto task : kTasks) {
    const auto rc = art.config(task);
    const auto spec = rc.task_spec();
    const auto& enc = art.encoder(task, true);
    const auto& ds = art.images(task);
    auto tcfg = rc.encoder.train;
    tcfg.seed = rc.stage_seed("encoder-train");
    const auto split = vision::split_episodes(ds.trajectories.size(), tcfg.val_fraction, tcfg.seed);

    // Held-out per-coordinate RMSE against the population std of the same states.
    std::vector<double> se(8, 0.0), sum(8, 0.0), sq(8, 0.0);
    std::size_t n = 0;
    std::vector<std::pair<std::size_t, std::size_t>> frames;
    for (auto e : split.val) {
      const auto& tr = ds.trajectories[e];
      for (std::size_t t = 0; t < tr.length(); ++t) {
        const auto est = vision::encode(enc, tr.observation(t));
        const auto s = tr.state(t);
        for (std::size_t j = 0; j < 8; ++j) {
          se[j] += (est[j] - s[j]) * (est[j] - s[j]);
          sum[j] += s[j];
          sq[j] += s[j] * s[j];
        }
        ++n;
        frames.emplace_back(e, t);
      }
    }
    std::string coords;
    double mse_all = 0.0;
    std::size_t ok = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      const double rmse = std::sqrt(se[j] / static_cast<double>(n));
      const double m = sum[j] / static_cast<double>(n);
      const double sd = std::sqrt(std::max(0.0, sq[j] / static_cast<double>(n) - m * m));
      mse_all += se[j] / static_cast<double>(n) / 8.0;
      if (rmse < 0.25 * sd) ++ok;
      coords += fmt(" %.3f", sd > 0 ? rmse / sd : INFINITY);
    }
    const double val_rmse = std::sqrt(mse_all);

    // Flip consistency on 100 held-out frames spread over the split.
    double flip_se = 0.0;
    const std::size_t m = std::min<std::size_t>(100, frames.size());
    for (std::size_t k = 0; k < m; ++k) {
      const auto [e, t] = frames[k * frames.size() / m];
      const auto img = ds.trajectories[e].observation(t);
      const auto a = vision::encode(enc, vision::flip_image(img));
      const auto b = vision::flip_state(vision::encode(enc, img), spec);
      for (std::size_t j = 0; j < 8; ++j) flip_se += (a[j] - b[j]) * (a[j] - b[j]);
    }
    const double flip_rmse = std::sqrt(flip_se / static_cast<double>(m * 8));
    pass = pass && ok == 8 && flip_rmse <= val_rmse;
    d += Artifacts::name(task) + ": " + std::to_string(ok) + "/8 coords under 0.25 std (rmse/std" + coords +
         "), flip " + fmt("%.4f", flip_rmse) + " vs val " + fmt("%.4f m", val_rmse) + "; ";
  }
  return {pass, d + "20 epochs"};
}

Outcome c14_determinism(Artifacts& art) {
  const auto task = sim::TaskId::FoldFree;
  const auto& ds = art.states(task);
  const auto rc = art.config(task);
  const auto dir = fs::temp_directory_path() / "foldkd_acceptance";
  fs::create_directories(dir);

  // (a) identical seeds, identical logs
  auto metrics = [&](const std::string& file) {
    model::DtModel m(rc.model_config(), rc.stage_seed("teacher-init"));
    m.normalizer() = train::make_normalizer(ds);
    auto s = rc.teacher.schedule;
    s.offline_steps = 200;
    s.eval_interval = 100;
    s.eval_trials = 5;
    s.seed = 7;
    train::Trainer tr(m, s);
    train::TrainHooks hooks;
    hooks.metrics_path = (dir / file).string();
    train::train_offline(m, tr, ds, s, hooks);
    return io::read_file(hooks.metrics_path);
  };
  const bool logs_same = metrics("a.csv") == metrics("b.csv");
  auto curve = [&](const std::string& file) {
    auto cfg = rc.distill.run;
    cfg.epochs = 2;
    cfg.seed = 9;
    distill::DistillHooks hooks;
    hooks.curve_path = (dir / file).string();
    distill::run_distillation(cfg, art.teacher(task), art.encoder(task, true), rc.task_spec(), nullptr, hooks);
    return io::read_file(hooks.curve_path);
  };
  const bool curves_same = curve("c.csv") == curve("d.csv");

  // (b) save -> load -> save, every checkpoint kind
  bool roundtrip = true;
  auto check_file = [&](const ckpt::Checkpoint& c) {
    const auto p = (dir / "rt.ckpt").string();
    ckpt::save(c, p);
    const auto first = io::read_file(p);
    ckpt::save(ckpt::load(p), p);
    roundtrip = roundtrip && io::read_file(p) == first;
  };

  // (c) 500 + checkpoint + 500 == 1000
  auto schedule = rc.teacher.schedule;
  schedule.offline_steps = 1000;
  schedule.eval_interval = 1000;
  schedule.eval_trials = 1;
  schedule.seed = 21;
  model::DtModel full(rc.model_config(), 5);
  full.normalizer() = train::make_normalizer(ds);
  train::Trainer t_full(full, schedule);
  train::train_offline(full, t_full, ds, schedule);

  auto half_schedule = schedule;
  half_schedule.offline_steps = 500;
  model::DtModel half(rc.model_config(), 5);
  half.normalizer() = train::make_normalizer(ds);
  train::Trainer t_half(half, half_schedule);
  train::train_offline(half, t_half, ds, half_schedule);
  const auto path = (dir / "half.ckpt").string();
  const auto half_ck = ckpt::pack_model(half, ckpt::Kind::Teacher, &t_half.optimizer(), t_half.steps_done());
  check_file(half_ck);
  check_file(ckpt::pack_model(art.teacher(task), ckpt::Kind::Teacher));
  check_file(vision::pack_encoder(art.encoder(task, true)));
  check_file(ckpt::pack_model(*art.student(task, distill::DistillConfig::ours(), 0.0, 0).student, ckpt::Kind::Student));
  ckpt::save(half_ck, path);
  const auto stored = ckpt::load(path, ckpt::Kind::Teacher);
  auto resumed = ckpt::unpack_model(stored);
  train::Trainer t_res(resumed, schedule);
  t_res.restore(*stored.optimizer, stored.optimizer->step);
  train::train_offline(resumed, t_res, ds, schedule);
  const bool resume_same =
      ckpt::serialize(ckpt::pack_model(resumed, ckpt::Kind::Teacher, &t_res.optimizer(), t_res.steps_done())) ==
      ckpt::serialize(ckpt::pack_model(full, ckpt::Kind::Teacher, &t_full.optimizer(), t_full.steps_done()));
  fs::remove_all(dir);

  const bool pass = logs_same && curves_same && roundtrip && resume_same;
  auto yn = [](bool b) { return b ? std::string("yes") : std::string("NO"); };
  return {pass, "identical metrics logs " + yn(logs_same) + ", identical distill curves " + yn(curves_same) +
                    ", byte-identical checkpoint round trips " + yn(roundtrip) + ", resume 500+500 == 1000 bitwise " +
                    yn(resume_same)};
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::warn);
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  if (wanted.empty())
    for (int i = 1; i <= 14; ++i) wanted.insert(i);

  Artifacts art;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", [] { return c1_gradients(); }},
      {"causality", [] { return c2_causality(); }},
      {"identity at init", [&] { return c3_identity(art); }},
      {"freeze contract", [&] { return c4_freeze(art); }},
      {"loss decomposition", [] { return c5_loss_decomposition(); }},
      {"return-to-go recurrence", [&] { return c6_return_to_go(art); }},
      {"expert gate", [&] { return c7_expert(art); }},
      {"teacher training", [&] { return c8_teacher(art); }},
      {"distillation ratio", [&] { return c9_distill_ratio(art); }},
      {"convergence speed", [&] { return c10_convergence(art); }},
      {"ablation ordering", [&] { return c11_ablation(art); }},
      {"noise robustness", [&] { return c12_noise(art); }},
      {"encoder quality", [&] { return c13_encoder(art); }},
      {"determinism and persistence", [&] { return c14_determinism(art); }},
  };

  int failed = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted.count(id)) continue;
    ++ran;
    Outcome o;
    const auto w0 = std::chrono::steady_clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - w0).count();
    if (!o.pass) ++failed;
    std::printf("%s criterion %d (%s): %s [%.0f s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                o.detail.c_str(), wall);
    std::fflush(stdout);
  }
  std::printf("acceptance: %d of %d criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
