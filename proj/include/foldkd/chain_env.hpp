#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace foldkd::sim {

struct Vec2 {
  double x = 0.0;
  double z = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, z + o.z}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, z - o.z}; }
  Vec2 operator*(double s) const { return {x * s, z * s}; }
  Vec2& operator+=(Vec2 o) {
    x += o.x;
    z += o.z;
    return *this;
  }
  Vec2& operator-=(Vec2 o) {
    x -= o.x;
    z -= o.z;
    return *this;
  }
  double dot(Vec2 o) const { return x * o.x + z * o.z; }
  double norm() const { return std::sqrt(x * x + z * z); }
  bool operator==(const Vec2&) const = default;
};

enum class TaskId : std::uint32_t { FoldFree = 0, FoldPinned = 1 };

std::string_view task_name(TaskId id);
// Accepts "fold-free" / "fold-pinned"; throws ConfigError otherwise.
TaskId parse_task(std::string_view name);

// Physical and scoring constants of one folding task. Distances in metres,
// time in seconds.
struct TaskSpec {
  TaskId id = TaskId::FoldFree;
  std::size_t n_particles = 24;
  std::size_t n_pickers = 1;
  double spacing = 0.02;
  double particle_mass = 0.01;
  double stiffness = 40.0;       // structural springs, nominal
  double bend_stiffness = 2.0;   // second-neighbour springs
  double spring_damping = 0.05;  // axial, N s / m
  double air_drag = 0.5;         // 1/s
  double gravity = 9.81;
  double table_friction = 0.3;   // tangential velocity fraction removed per contact substep
  double max_stretch = 0.1;      // strain limit on structural springs
  double dt = 0.01;              // substep length
  std::size_t substeps = 4;
  std::size_t horizon = 50;
  double stiffness_range = 0.25;  // +- fraction sampled per episode
  double max_picker_step = 0.05;
  double grasp_radius_factor = 1.5;
  double displacement_weight = 0.2;

  static TaskSpec fold_free();
  static TaskSpec fold_pinned();
  static TaskSpec make(TaskId id);

  double chain_length() const { return spacing * static_cast<double>(n_particles - 1); }
  double workspace_center_x() const { return 0.5 * chain_length(); }
  double grasp_radius() const { return grasp_radius_factor * spacing; }
  std::size_t state_dim() const { return 6 + 2 * n_pickers; }
  std::size_t action_dim() const { return 3 * n_pickers; }
  // Score of the analytic perfect fold: second half lying exactly on the
  // first half, first half undisturbed.
  double optimal_score() const { return 0.0; }
  // Throws ConfigError on an unusable spec.
  void validate() const;
  bool operator==(const TaskSpec&) const = default;
};

// Picker-visible workspace. Pickers are clamped to it; the renderer uses the
// same box (extended slightly below the table).
struct Workspace {
  double x_min, x_max, z_min, z_max;
};
Workspace workspace(const TaskSpec& task);
Workspace view_box(const TaskSpec& task);

// Full simulator state; this is the privileged information.
struct ChainState {
  std::vector<Vec2> positions;
  std::vector<Vec2> velocities;
  std::vector<Vec2> rest_positions;  // reset layout, reference for displacement
  std::vector<Vec2> pickers;
  std::vector<bool> gripping;
  std::vector<std::optional<std::size_t>> grasped;
  std::vector<std::size_t> pinned;
  double stiffness = 0.0;  // this episode's sample
  std::size_t t = 0;       // control steps taken

  bool is_pinned(std::size_t i) const;
  bool operator==(const ChainState&) const = default;
};

// Per picker (dx, dz, grip), each in [-1, 1]; grip > 0 grasps or holds.
struct Action {
  std::vector<double> values;

  static Action noop(std::size_t n_pickers);
  double dx(std::size_t p) const { return values.at(3 * p); }
  double dz(std::size_t p) const { return values.at(3 * p + 1); }
  double grip(std::size_t p) const { return values.at(3 * p + 2); }
};

// Keypoints: first endpoint, midpoint, last endpoint, then picker positions,
// each as (x, z).
using ReducedState = std::vector<double>;

struct Observation {
  static constexpr std::size_t kHeight = 32;
  static constexpr std::size_t kWidth = 32;
  static constexpr std::size_t kChannels = 3;
  static constexpr std::size_t kSize = kHeight * kWidth * kChannels;

  // Row-major HWC; row 0 is the top of the view.
  std::vector<double> pixels = std::vector<double>(kSize, 0.0);

  double at(std::size_t row, std::size_t col, std::size_t ch) const {
    return pixels[(row * kWidth + col) * kChannels + ch];
  }
  bool operator==(const Observation&) const = default;
};

ChainState reset(const TaskSpec& task, std::uint64_t seed);

struct StepResult {
  ChainState state;
  double reward = 0.0;
};

// Advances one control step. Throws ContractError on out-of-range actions
// and SimulationDiverged if the integration produces non-finite values.
StepResult step(const ChainState& state, const Action& action, const TaskSpec& task);

ReducedState reduced_state(const ChainState& state);
Observation render(const ChainState& state, const TaskSpec& task);

// Raw task score: -(fold alignment) - beta * (anchored-half displacement).
double performance(const ChainState& state, const TaskSpec& task);
// Components of performance(), exposed for tests and diagnostics.
double fold_alignment(const ChainState& state);
double anchor_displacement(const ChainState& state);

double kinetic_energy(const ChainState& state, const TaskSpec& task);

// Analytic configurations used to pin down s_opt and scoring semantics.
ChainState perfect_fold(const TaskSpec& task);
ChainState mirrored_fold(const TaskSpec& task);

}  // namespace foldkd::sim
