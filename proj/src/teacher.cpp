#include "foldkd/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <spdlog/spdlog.h>

#include "foldkd/checkpoint.hpp"
#include "foldkd/errors.hpp"

namespace foldkd::train {

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("replay buffer: capacity must be >= 1");
}

void ReplayBuffer::seed_offline(const std::vector<data::Trajectory>& trajectories) {
  if (!items_.empty()) throw ContractError("replay buffer: already seeded");
  if (trajectories.size() > capacity_)
    throw ConfigError("replay buffer: " + std::to_string(trajectories.size()) +
                      " offline trajectories exceed capacity " + std::to_string(capacity_));
  items_ = trajectories;
  from_agent_.assign(items_.size(), false);
  cursor_ = 0;
}

void ReplayBuffer::insert(data::Trajectory t) {
  ++inserted_;
  if (items_.size() < capacity_) {
    items_.push_back(std::move(t));
    from_agent_.push_back(true);
    return;
  }
  items_[cursor_] = std::move(t);
  from_agent_[cursor_] = true;
  cursor_ = (cursor_ + 1) % capacity_;
  ++replacements_;
}

std::size_t ReplayBuffer::agent_count() const {
  return static_cast<std::size_t>(std::count(from_agent_.begin(), from_agent_.end(), true));
}

double ReplayBuffer::agent_fraction() const {
  return items_.empty() ? 0.0 : static_cast<double>(agent_count()) / static_cast<double>(items_.size());
}

void TrainSchedule::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("schedule: " + m); };
  if (offline_steps == 0) fail("offline_steps must be >= 1");
  if (rollouts_per_iteration == 0) fail("rollouts_per_iteration must be >= 1");
  if (steps_per_iteration == 0) fail("steps_per_iteration must be >= 1");
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (eval_interval == 0) fail("eval_interval must be >= 1");
  if (eval_trials == 0) fail("eval_trials must be >= 1");
  if (!(lr > 0.0)) fail("lr must be > 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(grad_clip > 0.0)) fail("grad_clip must be > 0");
}

TrainSchedule TrainSchedule::paper() {
  TrainSchedule s;
  s.offline_steps = 5000;
  s.batch_size = 64;
  s.lr = 1e-4;
  s.warmup_steps = 0;
  return s;
}

model::Normalizer make_normalizer(const data::Dataset& ds, double target_percentile) {
  if (ds.trajectories.empty()) throw ConfigError("normalizer: empty dataset");
  model::Normalizer n;
  n.state_mean = ds.state_stats.mean;
  n.state_std = ds.state_stats.std;
  for (double& v : n.state_std) v = std::max(v, kStateStdFloor);
  double scale = 0.0;
  for (const auto& tr : ds.trajectories)
    for (double r : tr.returns_to_go) scale = std::max(scale, std::abs(r));
  n.return_scale = scale > 0.0 ? scale : 1.0;
  auto returns = ds.episode_returns();
  std::sort(returns.begin(), returns.end());
  n.target_return = eval::percentile(returns, target_percentile);
  return n;
}

model::TokenBatch sample_batch(std::span<const data::Trajectory> trajs, const model::DtConfig& cfg,
                               std::size_t batch, Rng& rng) {
  if (trajs.empty()) throw ContractError("sample_batch: no trajectories");
  const std::size_t K = cfg.context, ds = cfg.state_dim, da = cfg.action_dim;
  auto out = model::TokenBatch::empty(batch, K, cfg);
  std::uniform_int_distribution<std::size_t> pick(0, trajs.size() - 1);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& tr = trajs[pick(rng)];
    if (tr.length() == 0) throw ContractError("sample_batch: empty trajectory");
    if (tr.state_dim != ds || tr.action_dim != da)
      throw DimensionError("sample_batch: trajectory dims differ from the model");
    const auto end = std::uniform_int_distribution<std::size_t>(0, tr.length() - 1)(rng);
    for (std::size_t i = 0; i < K; ++i) {
      const auto t = static_cast<std::ptrdiff_t>(end + i + 1) - static_cast<std::ptrdiff_t>(K);
      if (t < 0) continue;
      const auto u = static_cast<std::size_t>(t);
      const std::size_t slot = b * K + i;
      out.returns_to_go[slot] = tr.returns_to_go[u];
      std::copy_n(tr.states.begin() + u * ds, ds, out.states.begin() + slot * ds);
      std::copy_n(tr.actions.begin() + u * da, da, out.actions.begin() + slot * da);
      out.timesteps[slot] = u;
      out.valid[slot] = 1;
    }
  }
  return out;
}

std::string metrics_csv_header() { return "step,loss,eval_mean,eval_std"; }

std::string metrics_csv_line(const MetricsRow& r) {
  std::string s = std::to_string(r.step) + "," + ckpt::format_double(r.loss) + ",";
  if (r.eval_mean) s += ckpt::format_double(*r.eval_mean);
  s += ",";
  if (r.eval_std) s += ckpt::format_double(*r.eval_std);
  return s;
}

Trainer::Trainer(model::DtModel& model, const TrainSchedule& schedule)
    : model_(model), schedule_(schedule) {
  schedule_.validate();
  ad::OptimizerConfig oc;
  oc.lr = schedule.lr;
  oc.weight_decay = schedule.weight_decay;
  opt_ = ad::AdamW(oc);
}

void Trainer::restore(const ad::OptimizerState& state, std::uint64_t step) {
  opt_.load_state(state);
  step_ = step;
}

double Trainer::step(std::span<const data::Trajectory> trajectories) {
  Rng rng(derive_seed(derive_seed(schedule_.seed, "teacher-step"), step_));
  const auto batch = sample_batch(trajectories, model_.config(), schedule_.batch_size, rng);
  model::ForwardOptions fo;
  fo.train = true;
  fo.rng = &rng;
  const auto parts = model::compute_loss(model_, batch, rng, fo);
  const double loss = parts.total.item();
  if (!std::isfinite(loss))
    throw NumericError("training loss is not finite at step " + std::to_string(step_));
  ad::zero_grad(model_.params());
  ad::backward(parts.total);
  ad::clip_grad_norm(model_.params(), schedule_.grad_clip);
  double lr = schedule_.lr;
  if (schedule_.warmup_steps > 0 && step_ < schedule_.warmup_steps)
    lr *= static_cast<double>(step_ + 1) / static_cast<double>(schedule_.warmup_steps);
  opt_.config().lr = lr;
  opt_.step(model_.params());
  ++step_;
  return loss;
}

eval::EvalReport evaluate_teacher(const model::DtModel& model, const sim::TaskSpec& task,
                                  std::size_t trials, std::uint64_t seed_base) {
  eval::DtPolicy policy(model, "teacher", model.normalizer().target_return);
  return eval::evaluate(policy, task, trials, 0.0, seed_base);
}

data::Trajectory to_trajectory(const eval::EpisodeRecord& rec, const sim::TaskSpec& task) {
  data::Trajectory t;
  t.meta.seed = rec.seed;
  t.meta.task = task.id;
  t.meta.stiffness = rec.stiffness;
  t.meta.final_normalized = rec.final_normalized;
  t.state_dim = task.state_dim();
  t.action_dim = task.action_dim();
  t.states = rec.states;
  t.actions = rec.actions;
  t.rewards = rec.rewards;
  t.returns_to_go = data::returns_to_go(rec.rewards, 1.0);
  return t;
}

namespace {

class MetricsSink {
 public:
  MetricsSink(const std::string& path, bool fresh) : path_(path) {
    if (path_.empty()) return;
    std::ofstream out(path_, fresh ? std::ios::trunc : std::ios::app);
    if (!out) throw IoError("cannot open metrics log '" + path_ + "'");
    if (fresh) out << metrics_csv_header() << '\n';
  }
  void write(const MetricsRow& row) {
    if (path_.empty()) return;
    std::ofstream out(path_, std::ios::app);
    out << metrics_csv_line(row) << '\n';
    if (!out) throw IoError("write failed for metrics log '" + path_ + "'");
  }

 private:
  std::string path_;
};

eval::EvalReport run_eval(const TrainHooks& hooks, const model::DtModel& model,
                          const TrainSchedule& s, const sim::TaskSpec& task, std::uint64_t step) {
  if (hooks.evaluator) return hooks.evaluator(model, step);
  return evaluate_teacher(model, task, s.eval_trials, derive_seed(s.seed, "teacher-eval"));
}

void save_checkpoint(const TrainHooks& hooks, const model::DtModel& model, const Trainer& trainer) {
  if (hooks.checkpoint_path.empty()) return;
  ckpt::save(ckpt::pack_model(model, ckpt::Kind::Teacher, &trainer.optimizer(), trainer.steps_done()),
             hooks.checkpoint_path);
}

}  // namespace

TrainLog train_offline(model::DtModel& model, Trainer& trainer, const data::Dataset& dataset,
                       const TrainSchedule& schedule, const TrainHooks& hooks) {
  schedule.validate();
  if (dataset.trajectories.empty()) throw ConfigError("train_offline: empty dataset");
  if (dataset.state_dim() != model.config().state_dim ||
      dataset.action_dim() != model.config().action_dim)
    throw ConfigError("train_offline: dataset dims " + std::to_string(dataset.state_dim()) + "/" +
                      std::to_string(dataset.action_dim()) + " do not match the model");
  TrainLog log;
  MetricsSink sink(hooks.metrics_path, trainer.steps_done() == 0);
  while (trainer.steps_done() < schedule.offline_steps) {
    MetricsRow row;
    row.loss = trainer.step(dataset.trajectories);
    row.step = trainer.steps_done();
    if (row.step % schedule.eval_interval == 0 || row.step == schedule.offline_steps) {
      auto rep = run_eval(hooks, model, schedule, dataset.task, row.step);
      row.eval_mean = rep.mean;
      row.eval_std = rep.std;
      spdlog::info("offline step {}: loss {:.4f}, eval {:.3f} +- {:.3f}", row.step, row.loss, rep.mean,
                   rep.std);
      log.evals.push_back(std::move(rep));
      save_checkpoint(hooks, model, trainer);
    }
    sink.write(row);
    log.rows.push_back(row);
  }
  return log;
}

OnlineLog finetune_online(model::DtModel& model, Trainer& trainer, ReplayBuffer& buffer,
                          const TrainSchedule& schedule, const sim::TaskSpec& task,
                          const TrainHooks& hooks) {
  schedule.validate();
  if (buffer.size() == 0) throw ConfigError("finetune_online: buffer is empty");
  OnlineLog out;
  if (schedule.online_iterations == 0) return out;
  MetricsSink sink(hooks.metrics_path, false);
  auto first = run_eval(hooks, model, schedule, task, trainer.steps_done());
  double best = first.mean_return;
  const std::uint64_t rollout_base = derive_seed(schedule.seed, "online-rollouts");
  for (std::size_t it = 0; it < schedule.online_iterations; ++it) {
    out.target_returns.push_back(best);
    eval::DtPolicy policy(model, "teacher-online", best, nullptr, false,
                          derive_seed(rollout_base, static_cast<std::uint64_t>(it)));
    std::vector<std::uint64_t> seeds;
    for (std::size_t r = 0; r < schedule.rollouts_per_iteration; ++r)
      seeds.push_back(derive_seed(rollout_base, static_cast<std::uint64_t>(
                                                    1000000 + it * schedule.rollouts_per_iteration + r)));
    for (const auto& rec : eval::run_episodes(policy, task, seeds))
      if (!rec.diverged) buffer.insert(to_trajectory(rec, task));
    out.agent_fraction.push_back(buffer.agent_fraction());

    for (std::size_t k = 0; k < schedule.steps_per_iteration; ++k) {
      MetricsRow row;
      row.loss = trainer.step(buffer.trajectories());
      row.step = trainer.steps_done();
      if (k + 1 == schedule.steps_per_iteration) {
        auto rep = run_eval(hooks, model, schedule, task, row.step);
        row.eval_mean = rep.mean;
        row.eval_std = rep.std;
        best = std::max(best, rep.mean_return);
        spdlog::info("online iteration {}: loss {:.4f}, eval {:.3f} +- {:.3f}, agent share {:.2f}",
                     it + 1, row.loss, rep.mean, rep.std, buffer.agent_fraction());
        out.log.evals.push_back(std::move(rep));
        save_checkpoint(hooks, model, trainer);
      }
      sink.write(row);
      out.log.rows.push_back(row);
    }
  }
  return out;
}

}  // namespace foldkd::train
