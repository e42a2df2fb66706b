#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "foldkd/chain_env.hpp"
#include "foldkd/dt_model.hpp"
#include "foldkd/encoder.hpp"
#include "foldkd/expert.hpp"
#include "foldkd/rng.hpp"
#include "foldkd/score.hpp"

namespace foldkd::eval {

using foldkd::normalized_performance;

// A controller driven in lockstep over several environments. `envs` lists
// the environment slots still running; `noise` holds one stream per slot.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::string id() const = 0;
  // Throws ConfigError when the policy cannot drive this task.
  virtual void check(const sim::TaskSpec& task) const { (void)task; }
  virtual void begin(std::size_t n_envs) = 0;
  virtual std::vector<std::vector<double>> act(std::span<const sim::ChainState* const> states,
                                               std::span<const std::size_t> envs,
                                               const sim::TaskSpec& task,
                                               std::span<Rng> noise) = 0;
  virtual void feedback(std::size_t env, std::span<const double> action, double reward) {
    (void)env, (void)action, (void)reward;
  }
  // Std of Gaussian noise added to estimated states (image policies only).
  virtual void set_state_noise(double sigma) { (void)sigma; }
};

class RandomPolicy : public Policy {
 public:
  std::string id() const override { return "random"; }
  void begin(std::size_t) override {}
  std::vector<std::vector<double>> act(std::span<const sim::ChainState* const> states,
                                       std::span<const std::size_t> envs, const sim::TaskSpec& task,
                                       std::span<Rng> noise) override;
};

class ExpertPolicy : public Policy {
 public:
  explicit ExpertPolicy(data::ExpertTuning tuning = {}) : tuning_(tuning) {}
  std::string id() const override { return "expert"; }
  void begin(std::size_t n) override { memory_.assign(n, {}); }
  std::vector<std::vector<double>> act(std::span<const sim::ChainState* const> states,
                                       std::span<const std::size_t> envs, const sim::TaskSpec& task,
                                       std::span<Rng> noise) override;

 private:
  data::ExpertTuning tuning_;
  std::vector<data::ExpertMemory> memory_;
};

// Decision-transformer controller. Without an encoder it reads the true
// reduced state (teacher); with one it sees only rendered images (student).
class DtPolicy : public Policy {
 public:
  DtPolicy(const model::DtModel& model, std::string id, double target_return,
           const vision::EncoderModel* encoder = nullptr, bool greedy = true,
           std::uint64_t sample_seed = 0);

  std::string id() const override { return id_; }
  void check(const sim::TaskSpec& task) const override;
  void begin(std::size_t n) override;
  std::vector<std::vector<double>> act(std::span<const sim::ChainState* const> states,
                                       std::span<const std::size_t> envs, const sim::TaskSpec& task,
                                       std::span<Rng> noise) override;
  void feedback(std::size_t env, std::span<const double> action, double reward) override;
  void set_state_noise(double sigma) override { sigma_ = sigma; }

  // What the model saw, per environment slot of the last batch.
  const model::History& history(std::size_t env) const { return histories_.at(env); }
  bool image_based() const { return encoder_ != nullptr; }

 private:
  const model::DtModel& model_;
  std::string id_;
  double target_;
  const vision::EncoderModel* encoder_;
  bool greedy_;
  double sigma_ = 0.0;
  Rng sampler_;
  std::vector<model::History> histories_;
};

struct EpisodeRecord {
  std::uint64_t seed = 0;
  std::vector<double> states;        // true reduced states, per step
  std::vector<double> actions;
  std::vector<double> rewards;
  std::vector<double> observations;  // rendered images, when requested
  double stiffness = 0.0;
  double final_normalized = 0.0;  // 0 for a diverged episode
  bool diverged = false;
};

struct RunOptions {
  bool record_observations = false;
  double state_noise = 0.0;
};

// Runs one episode per seed in lockstep. Reset uses the seed directly; the
// per-episode noise stream is derived from it, so any two runs over the same
// seeds replay identical episodes.
std::vector<EpisodeRecord> run_episodes(Policy& policy, const sim::TaskSpec& task,
                                        std::span<const std::uint64_t> seeds,
                                        const RunOptions& opts = {});

// Trial i resets from derive_seed(seed_base, i).
std::vector<std::uint64_t> trial_seeds(std::uint64_t seed_base, std::size_t n);

struct EvalReport {
  std::string policy_id;
  sim::TaskId task = sim::TaskId::FoldFree;
  double sigma = 0.0;
  std::uint64_t seed_base = 0;
  std::size_t n_trials = 0;
  std::vector<double> values;  // per-trial end-of-episode normalized performance
  double mean = 0.0;
  double std = 0.0;  // population
  double p25 = 0.0;
  double median = 0.0;
  double p75 = 0.0;
  std::size_t diverged = 0;
  double mean_return = 0.0;  // undiscounted episode return, averaged
  bool operator==(const EvalReport&) const = default;
};

// Linear interpolation between closest ranks, q in [0, 1]; `sorted` must be
// ascending and non-empty.
double percentile(std::span<const double> sorted, double q);
EvalReport summarize(std::vector<double> values, std::string policy_id, sim::TaskId task,
                     double sigma, std::uint64_t seed_base);

// Greedy rollouts; throws ConfigError for n_trials == 0 or a policy that
// does not fit the task.
EvalReport evaluate(Policy& policy, const sim::TaskSpec& task, std::size_t n_trials, double sigma,
                    std::uint64_t seed_base);

inline const std::vector<double> kDefaultNoiseGrid{0.0, 1e-5, 1e-4, 3e-4, 1e-3};

struct NoiseSweep {
  std::vector<double> grid;
  // reports[m][g]: model m at grid[g]; every cell shares the seed base.
  std::vector<std::vector<EvalReport>> reports;
};

NoiseSweep noise_sweep(std::span<Policy* const> models, const sim::TaskSpec& task,
                       const std::vector<double>& grid, std::size_t n_trials,
                       std::uint64_t seed_base);

struct Table {
  std::string text;
  std::string csv;
};
// Rows sorted by task, then policy id, then sigma.
Table report_table(std::vector<EvalReport> reports);
std::vector<EvalReport> load_report_csv(std::string_view csv);

std::string sweep_csv(const NoiseSweep& sweep);

}  // namespace foldkd::eval
