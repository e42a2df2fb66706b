#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "foldkd/dataset.hpp"
#include "foldkd/dt_model.hpp"
#include "foldkd/eval.hpp"
#include "foldkd/optim.hpp"

namespace foldkd::train {

// Fixed-capacity trajectory store. Once full, each insert overwrites the
// oldest entry, so offline trajectories leave first in their original order.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  void seed_offline(const std::vector<data::Trajectory>& trajectories);
  void insert(data::Trajectory agent_trajectory);

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t inserted() const { return inserted_; }
  std::size_t replacements() const { return replacements_; }
  std::size_t agent_count() const;
  double agent_fraction() const;
  std::span<const data::Trajectory> trajectories() const { return items_; }

 private:
  std::size_t capacity_;
  std::vector<data::Trajectory> items_;
  std::vector<bool> from_agent_;
  std::size_t cursor_ = 0;
  std::size_t inserted_ = 0;
  std::size_t replacements_ = 0;
};

struct TrainSchedule {
  std::size_t offline_steps = 1500;
  std::size_t online_iterations = 20;
  std::size_t rollouts_per_iteration = 10;
  std::size_t steps_per_iteration = 100;
  std::size_t batch_size = 32;
  std::size_t eval_interval = 500;
  std::size_t eval_trials = 20;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;
  std::size_t warmup_steps = 75;  // linear lr ramp
  std::uint64_t seed = 0;

  static TrainSchedule desk() { return {}; }
  // 5000 steps of batch 64 at lr 1e-4, no warmup.
  static TrainSchedule paper();

  // Throws ConfigError.
  void validate() const;
};

// Input std floor in metres. A pixel spans about 2 cm, so coordinates that
// vary less than this cannot be read from images; without the floor the
// student sees encoder error on a near-constant coordinate as a huge input.
inline constexpr double kStateStdFloor = 0.01;

// Normalizer from dataset statistics; the conditioning target is the given
// percentile of episode returns, returns are scaled by the largest |R|.
model::Normalizer make_normalizer(const data::Dataset& ds, double target_percentile = 0.9);

// B windows: a trajectory uniformly, then a window end uniformly within it.
// Windows that start before step 0 are left-padded with invalid slots.
model::TokenBatch sample_batch(std::span<const data::Trajectory> trajectories,
                               const model::DtConfig& cfg, std::size_t batch, Rng& rng);

struct MetricsRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  std::optional<double> eval_mean;
  std::optional<double> eval_std;
  bool operator==(const MetricsRow&) const = default;
};

std::string metrics_csv_header();
std::string metrics_csv_line(const MetricsRow& row);

// Optimizer + step counter. Each step draws its batch and dropout masks
// from derive_seed(seed, step), so a restored trainer continues bitwise.
class Trainer {
 public:
  Trainer(model::DtModel& model, const TrainSchedule& schedule);

  // One gradient step on windows from `trajectories`; returns the loss.
  // Throws NumericError on a non-finite loss before touching parameters.
  double step(std::span<const data::Trajectory> trajectories);

  std::uint64_t steps_done() const { return step_; }
  ad::AdamW& optimizer() { return opt_; }
  const ad::AdamW& optimizer() const { return opt_; }
  void restore(const ad::OptimizerState& state, std::uint64_t step);

 private:
  model::DtModel& model_;
  TrainSchedule schedule_;
  ad::AdamW opt_;
  std::uint64_t step_ = 0;
};

struct TrainHooks {
  std::string metrics_path;     // CSV appended per row when set
  std::string checkpoint_path;  // last good state, rewritten at each eval
  // Evaluation used at eval intervals; defaults to greedy rollouts on the
  // dataset task conditioned on the normalizer target.
  std::function<eval::EvalReport(const model::DtModel&, std::uint64_t step)> evaluator;
};

struct TrainLog {
  std::vector<MetricsRow> rows;
  std::vector<eval::EvalReport> evals;
};

// Runs until trainer.steps_done() == schedule.offline_steps (so a restored
// trainer resumes). Evaluates every eval_interval steps and at the end.
TrainLog train_offline(model::DtModel& model, Trainer& trainer, const data::Dataset& dataset,
                       const TrainSchedule& schedule, const TrainHooks& hooks = {});

struct OnlineLog {
  TrainLog log;
  std::vector<double> agent_fraction;  // after each iteration's inserts
  std::vector<double> target_returns;  // rollout conditioning per iteration
};

// Per iteration: stochastic rollouts conditioned on the best evaluation
// return seen so far, FIFO insertion, gradient steps on the buffer, greedy
// evaluation.
OnlineLog finetune_online(model::DtModel& model, Trainer& trainer, ReplayBuffer& buffer,
                          const TrainSchedule& schedule, const sim::TaskSpec& task,
                          const TrainHooks& hooks = {});

// Default evaluator: greedy teacher rollouts.
eval::EvalReport evaluate_teacher(const model::DtModel& model, const sim::TaskSpec& task,
                                  std::size_t trials, std::uint64_t seed_base);

// An agent rollout as a dataset trajectory (returns-to-go with gamma 1).
data::Trajectory to_trajectory(const eval::EpisodeRecord& rec, const sim::TaskSpec& task);

}  // namespace foldkd::train
