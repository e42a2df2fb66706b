#include "foldkd/expert.hpp"

#include <algorithm>
#include <numbers>

namespace foldkd::data {

namespace {

using sim::Vec2;

sim::Action move_towards(const sim::ChainState& state, const sim::TaskSpec& task,
                         Vec2 goal, double grip, double sat) {
  sim::Action a = sim::Action::noop(task.n_pickers);
  const Vec2 d = goal - state.pickers[0];
  a.values[0] = std::clamp(d.x / task.max_picker_step, -sat, sat);
  a.values[1] = std::clamp(d.z / task.max_picker_step, -sat, sat);
  a.values[2] = grip;
  return a;
}

}  // namespace

sim::Action expert_policy(const sim::ChainState& state, const sim::TaskSpec& task,
                          ExpertMemory& memory, const ExpertTuning& tuning) {
  const double sat = tuning.saturation;
  const Vec2 picker = state.pickers[0];
  const Vec2 free_end = state.positions.back();
  const std::size_t n = state.rest_positions.size();
  const Vec2 centre =
      (state.rest_positions[(n - 1) / 2] + state.rest_positions[n / 2]) * 0.5;
  const double radius = 0.5 * task.chain_length() * tuning.arc_radius_factor;
  const std::size_t m = std::max<std::size_t>(tuning.arc_waypoints, 2);
  const auto arc_point = [&](std::size_t k) {
    const double th = std::numbers::pi * static_cast<double>(k) / static_cast<double>(m);
    return Vec2{centre.x + radius * std::cos(th),
                std::max(tuning.lower_height,
                         radius * tuning.arc_height_factor * std::sin(th))};
  };
  const auto reached = [&](Vec2 goal) {
    return (goal - picker).norm() <= tuning.waypoint_tolerance;
  };

  // Phases advance as soon as their exit condition holds, possibly several
  // in one call.
  for (;;) {
    switch (memory.phase) {
      case ExpertPhase::Approach:
        if ((free_end - picker).norm() <= 0.5 * task.grasp_radius()) {
          memory.phase = ExpertPhase::Grasp;
          continue;
        }
        return move_towards(state, task, free_end, -sat, sat);
      case ExpertPhase::Grasp:
        if (state.grasped[0]) {
          memory.phase = ExpertPhase::Lift;
          memory.waypoint = 1;
          continue;
        }
        return move_towards(state, task, picker, sat, sat);
      case ExpertPhase::Lift:
      case ExpertPhase::Traverse: {
        if (memory.waypoint >= m) {
          memory.phase = ExpertPhase::Lower;
          continue;
        }
        const Vec2 goal = arc_point(memory.waypoint);
        if (reached(goal)) {
          ++memory.waypoint;
          if (2 * memory.waypoint > m) memory.phase = ExpertPhase::Traverse;
          continue;
        }
        return move_towards(state, task, goal, sat, sat);
      }
      case ExpertPhase::Lower: {
        const Vec2 goal = arc_point(m);
        if (reached(goal)) {
          memory.phase = ExpertPhase::Release;
          continue;
        }
        return move_towards(state, task, goal, sat, sat);
      }
      case ExpertPhase::Release:
        if (!state.gripping[0]) {
          memory.phase = ExpertPhase::Done;
          continue;
        }
        return move_towards(state, task, picker, -sat, sat);
      case ExpertPhase::Done:
        return move_towards(state, task, picker, -sat, sat);
    }
  }
}

}  // namespace foldkd::data
