#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "foldkd/chain_env.hpp"
#include "foldkd/expert.hpp"

namespace foldkd::data {

struct EpisodeMeta {
  std::uint64_t seed = 0;
  sim::TaskId task = sim::TaskId::FoldFree;
  double stiffness = 0.0;
  double final_normalized = 0.0;  // normalized performance at the last step
  bool operator==(const EpisodeMeta&) const = default;
};

// One episode, row-major per step. Step t pairs the state and image seen
// before acting with the action taken and the reward of the resulting state.
struct Trajectory {
  EpisodeMeta meta;
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  std::vector<double> states;        // H x state_dim
  std::vector<double> actions;       // H x action_dim
  std::vector<double> rewards;       // H
  std::vector<double> returns_to_go; // H
  std::vector<double> observations;  // H x Observation::kSize, or empty

  std::size_t length() const { return rewards.size(); }
  bool has_observations() const { return !observations.empty(); }
  std::span<const double> state(std::size_t t) const {
    return {states.data() + t * state_dim, state_dim};
  }
  std::span<const double> action(std::size_t t) const {
    return {actions.data() + t * action_dim, action_dim};
  }
  std::span<const double> observation(std::size_t t) const {
    return {observations.data() + t * sim::Observation::kSize, sim::Observation::kSize};
  }
  double total_return() const { return returns_to_go.empty() ? 0.0 : returns_to_go[0]; }
  bool operator==(const Trajectory&) const = default;
};

// Per-dimension mean and standard deviation (population, floored).
struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
  bool operator==(const NormStats&) const = default;
};

inline constexpr double kStdFloor = 1e-6;

struct Dataset {
  sim::TaskSpec task;
  double gamma = 1.0;
  std::vector<Trajectory> trajectories;
  NormStats state_stats;
  NormStats action_stats;
  NormStats return_stats;  // over every returns-to-go entry

  std::size_t state_dim() const { return task.state_dim(); }
  std::size_t action_dim() const { return task.action_dim(); }
  std::size_t transitions() const;
  // Recomputes the three statistics over the whole collection.
  void compute_stats();
  std::vector<double> episode_returns() const;
  bool operator==(const Dataset&) const;
};

// R_t = sum_{u >= t} gamma^(u - t) r_u, evaluated by the backward recurrence.
std::vector<double> returns_to_go(std::span<const double> rewards, double gamma);

NormStats compute_norm_stats(std::span<const double> rows, std::size_t dim);

struct CollectOptions {
  double gamma = 1.0;
  bool store_observations = true;
  ExpertTuning tuning;
  // Upper bound on re-rolls caused by diverged episodes.
  std::size_t max_rerolls = 1000;
};

// Records one expert episode from reset(task, seed).
Trajectory record_expert_episode(const sim::TaskSpec& task, std::uint64_t seed,
                                 const CollectOptions& opts);

// Deterministic in (task, n_episodes, seed). Episode k uses the seed derived
// from (seed, k); episodes that diverge are dropped, logged, and replaced by
// the next derived seed (their seeds are appended to `discarded` if given).
// Trajectories are ordered by episode seed.
Dataset collect(const sim::TaskSpec& task, std::size_t n_episodes, std::uint64_t seed,
                const CollectOptions& opts = {},
                std::vector<std::uint64_t>* discarded = nullptr);

// Binary container: magic, u32 version, header (task spec, gamma, counts,
// dims), then float64 payload per trajectory. Little-endian throughout.
std::string serialize_dataset(const Dataset& ds);
Dataset deserialize_dataset(std::string_view bytes);
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace foldkd::data
