#include "foldkd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <spdlog/spdlog.h>

#include "foldkd/checkpoint.hpp"
#include "foldkd/binio.hpp"
#include "foldkd/errors.hpp"
#include "foldkd/ops.hpp"

namespace foldkd::distill {

DistillConfig DistillConfig::ours() { return {}; }

DistillConfig DistillConfig::no_aug() {
  DistillConfig c;
  c.use_augmented_encoder = false;
  return c;
}

DistillConfig DistillConfig::no_pretrain() {
  DistillConfig c;
  c.use_weight_copy = false;
  return c;
}

DistillConfig DistillConfig::no_distill() {
  DistillConfig c;
  c.use_weight_copy = false;
  c.use_distillation = false;
  return c;
}

std::string DistillConfig::variant() const {
  if (!use_distillation) return "no-distill";
  if (!use_augmented_encoder) return use_weight_copy ? "no-aug" : "no-aug-no-pretrain";
  if (!use_weight_copy) return "no-pretrain";
  return "ours";
}

void DistillConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("distill: " + m); };
  if (epochs == 0) fail("epochs must be >= 1");
  if (steps_per_epoch == 0) fail("steps_per_epoch must be >= 1");
  if (use_distillation && episodes_per_epoch == 0) fail("episodes_per_epoch must be >= 1");
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (eval_trials == 0) fail("eval_trials must be >= 1");
  if (!(lr > 0.0)) fail("lr must be > 0");
  if (!(sigma >= 0.0)) fail("sigma must be >= 0");
  if (!(grad_clip > 0.0)) fail("grad_clip must be > 0");
}

model::DtModel init_student(const model::DtModel& teacher, bool use_weight_copy, std::uint64_t seed) {
  model::DtModel student(teacher.config(), derive_seed(seed, "student-init"));
  if (use_weight_copy)
    model::copy_weights(teacher, student);
  else
    student.normalizer() = teacher.normalizer();
  return student;
}

void relabel(const model::DtModel& teacher, PairedRollout& r) {
  const std::size_t H = r.length(), ds = r.state_dim, da = r.action_dim;
  if (H == 0) {
    r.teacher_actions.clear();
    return;
  }
  // Replays the rollout into one growing history and snapshots it per step,
  // so each label is exactly what act() would return at that point.
  std::vector<model::History> snaps;
  snaps.reserve(H);
  model::History h(r.returns_to_go[0]);
  for (std::size_t t = 0; t < H; ++t) {
    if (t > 0) {
      const double reward = r.returns_to_go[t - 1] - r.returns_to_go[t];
      h.record(std::span<const double>(r.actions.data() + (t - 1) * da, da), reward);
    }
    h.observe(std::span<const double>(r.true_states.data() + t * ds, ds));
    snaps.push_back(h);
  }
  std::vector<const model::History*> ptrs;
  for (const auto& s : snaps) ptrs.push_back(&s);
  const auto labels = model::act_batch(teacher, ptrs, true);
  r.teacher_actions.clear();
  for (const auto& a : labels) r.teacher_actions.insert(r.teacher_actions.end(), a.begin(), a.end());
}

std::vector<PairedRollout> collect_paired(const model::DtModel& student, const model::DtModel& teacher,
                                          const vision::EncoderModel& encoder,
                                          const sim::TaskSpec& task,
                                          std::span<const std::uint64_t> seeds) {
  eval::DtPolicy policy(student, "student", teacher.normalizer().target_return, &encoder);
  const auto recs = eval::run_episodes(policy, task, seeds);
  std::vector<PairedRollout> out;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto& rec = recs[i];
    const auto& h = policy.history(i);
    PairedRollout r;
    r.seed = rec.seed;
    r.state_dim = task.state_dim();
    r.action_dim = task.action_dim();
    const std::size_t H = rec.rewards.size();  // steps with a recorded outcome
    r.true_states.assign(rec.states.begin(), rec.states.begin() + H * r.state_dim);
    for (std::size_t t = 0; t < H; ++t) {
      const auto s = h.state(t);
      r.estimated_states.insert(r.estimated_states.end(), s.begin(), s.end());
    }
    r.actions = rec.actions;
    r.returns_to_go.assign(h.returns_to_go().begin(), h.returns_to_go().begin() + H);
    relabel(teacher, r);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<PairedRollout> expert_rollouts(const data::Dataset& ds, const vision::EncoderModel& encoder) {
  std::vector<PairedRollout> out;
  for (const auto& tr : ds.trajectories) {
    if (!tr.has_observations()) throw ConfigError("no-distill: expert dataset has no stored images");
    PairedRollout r;
    r.seed = tr.meta.seed;
    r.state_dim = tr.state_dim;
    r.action_dim = tr.action_dim;
    r.true_states = tr.states;
    std::vector<std::span<const double>> views;
    for (std::size_t t = 0; t < tr.length(); ++t) views.push_back(tr.observation(t));
    for (const auto& s : vision::encode_batch(encoder, views))
      r.estimated_states.insert(r.estimated_states.end(), s.begin(), s.end());
    r.actions = tr.actions;
    r.returns_to_go = tr.returns_to_go;
    r.teacher_actions = tr.actions;
    out.push_back(std::move(r));
  }
  return out;
}

model::TokenBatch sample_student_batch(std::span<const PairedRollout> rollouts,
                                       const model::DtConfig& cfg, std::size_t batch, double sigma,
                                       Rng& rng) {
  if (rollouts.empty()) throw ContractError("distill: no rollouts to sample from");
  const std::size_t K = cfg.context, ds = cfg.state_dim, da = cfg.action_dim;
  auto out = model::TokenBatch::empty(batch, K, cfg);
  out.targets.assign(batch * K * da, 0.0);
  std::uniform_int_distribution<std::size_t> pick(0, rollouts.size() - 1);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& r = rollouts[pick(rng)];
    if (r.length() == 0) throw ContractError("distill: empty rollout");
    if (r.teacher_actions.size() != r.length() * da)
      throw ContractError("distill: rollout has not been relabelled");
    const auto end = std::uniform_int_distribution<std::size_t>(0, r.length() - 1)(rng);
    for (std::size_t i = 0; i < K; ++i) {
      const auto t = static_cast<std::ptrdiff_t>(end + i + 1) - static_cast<std::ptrdiff_t>(K);
      if (t < 0) continue;
      const auto u = static_cast<std::size_t>(t);
      const std::size_t slot = b * K + i;
      out.returns_to_go[slot] = r.returns_to_go[u];
      std::copy_n(r.estimated_states.begin() + u * ds, ds, out.states.begin() + slot * ds);
      std::copy_n(r.actions.begin() + u * da, da, out.actions.begin() + slot * da);
      std::copy_n(r.teacher_actions.begin() + u * da, da, out.targets.begin() + slot * da);
      out.timesteps[slot] = u;
      out.valid[slot] = 1;
    }
  }
  if (sigma > 0.0) {
    std::normal_distribution<double> nd(0.0, sigma);
    for (std::size_t r = 0; r < out.rows(); ++r)
      if (out.valid[r])
        for (std::size_t j = 0; j < ds; ++j) out.states[r * ds + j] += nd(rng);
  }
  return out;
}

Distiller::Distiller(model::DtModel& student, const DistillConfig& cfg) : student_(student), cfg_(cfg) {
  cfg_.validate();
  ad::OptimizerConfig oc;
  oc.lr = cfg.lr;
  oc.weight_decay = cfg.weight_decay;
  opt_ = ad::AdamW(oc);
}

double Distiller::step(std::span<const PairedRollout> rollouts) {
  Rng rng(derive_seed(derive_seed(cfg_.seed, "distill-step"), step_));
  const auto batch = sample_student_batch(rollouts, student_.config(), cfg_.batch_size, cfg_.sigma, rng);
  model::ForwardOptions fo;
  fo.train = true;
  fo.rng = &rng;
  const auto loss = model::nll_loss(student_.forward(batch, fo), batch);
  const double l = loss.item();
  if (!std::isfinite(l)) throw NumericError("distill loss is not finite at step " + std::to_string(step_));
  ad::zero_grad(student_.params());
  ad::backward(loss);
  ad::clip_grad_norm(student_.params(), cfg_.grad_clip);
  opt_.step(student_.params());
  ++step_;
  return l;
}

std::string curve_csv(std::span<const CurveRow> rows) {
  std::ostringstream os;
  os << "epoch,loss,eval_mean,eval_std\n";
  for (const auto& r : rows)
    os << r.epoch << ',' << ckpt::format_double(r.loss) << ',' << ckpt::format_double(r.eval_mean) << ','
       << ckpt::format_double(r.eval_std) << '\n';
  return os.str();
}

DistillResult run_distillation(const DistillConfig& cfg, const model::DtModel& teacher,
                               const vision::EncoderModel& encoder, const sim::TaskSpec& task,
                               const data::Dataset* expert, const DistillHooks& hooks) {
  cfg.validate();
  if (teacher.config().state_dim != task.state_dim() || teacher.config().action_dim != task.action_dim())
    throw ConfigError("distill: teacher does not match the task dimensions");
  if (encoder.config().state_dim != task.state_dim())
    throw ConfigError("distill: encoder output does not match the task state size");
  DistillResult res{init_student(teacher, cfg.use_weight_copy, cfg.seed), {}, 0};
  model::DtModel& student = res.student;
  Distiller distiller(student, cfg);

  std::vector<PairedRollout> pool;
  if (!cfg.use_distillation) {
    if (!expert) throw ConfigError("no-distill needs the expert dataset");
    if (expert->task.id != task.id) throw ConfigError("no-distill: expert dataset is for another task");
    pool = expert_rollouts(*expert, encoder);
  }
  const double target = teacher.normalizer().target_return;
  const std::uint64_t collect_base = derive_seed(cfg.seed, "distill-collect");
  const std::uint64_t eval_base = derive_seed(cfg.seed, "distill-eval");

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.use_distillation) {
      std::vector<std::uint64_t> seeds;
      for (std::size_t i = 0; i < cfg.episodes_per_epoch; ++i)
        seeds.push_back(derive_seed(collect_base, static_cast<std::uint64_t>(epoch * cfg.episodes_per_epoch + i)));
      for (auto& r : collect_paired(student, teacher, encoder, task, seeds))
        if (r.length() > 0) pool.push_back(std::move(r));
      res.rollouts_collected = pool.size();
    }
    double sum = 0.0;
    for (std::size_t k = 0; k < cfg.steps_per_epoch; ++k) sum += distiller.step(pool);

    eval::DtPolicy policy(student, "student", target, &encoder);
    const auto rep = eval::evaluate(policy, task, cfg.eval_trials, 0.0, eval_base);
    res.curve.push_back({epoch + 1, sum / static_cast<double>(cfg.steps_per_epoch), rep.mean, rep.std});
    spdlog::info("distill [{}] epoch {}: loss {:.4f}, eval {:.3f} +- {:.3f}", cfg.variant(), epoch + 1,
                 res.curve.back().loss, rep.mean, rep.std);
    if (!hooks.curve_path.empty()) io::write_file_atomic(hooks.curve_path, curve_csv(res.curve));
    if (!hooks.checkpoint_path.empty())
      ckpt::save(ckpt::pack_model(student, ckpt::Kind::Student, &distiller.optimizer(), distiller.steps_done()),
                 hooks.checkpoint_path);
  }
  return res;
}

double tail_slope(std::span<const double> values, std::size_t n) {
  if (n < 2 || values.size() < n) throw ContractError("tail_slope: need at least two points");
  const auto tail = values.subspan(values.size() - n);
  const double xm = (static_cast<double>(n) - 1.0) / 2.0;
  double ym = 0.0;
  for (double v : tail) ym += v;
  ym /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = static_cast<double>(i) - xm;
    sxy += dx * (tail[i] - ym);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

}  // namespace foldkd::distill
