#pragma once

#include "foldkd/chain_env.hpp"

namespace foldkd::data {

enum class ExpertPhase : int {
  Approach = 0,
  Grasp,
  Lift,
  Traverse,
  Lower,
  Release,
  Done,
};

// Per-episode memory of the scripted expert. The phase index only moves
// forward within an episode.
struct ExpertMemory {
  ExpertPhase phase = ExpertPhase::Approach;
  std::size_t waypoint = 0;  // index along the carry arc
};

struct ExpertTuning {
  std::size_t arc_waypoints = 12;  // carry path: half circle about the midpoint
  double arc_radius_factor = 1.0;   // radius as a fraction of half the chain
  double arc_height_factor = 1.0;   // vertical stretch of the arc
  double lower_height = 0.01;
  double saturation = 0.9;           // magnitude of a full-speed command
  double waypoint_tolerance = 0.004;
};

// Waypoint state machine with privileged access to the full chain state:
// approach the free end, grasp, lift and carry it along an arc over the
// anchored half, lower, release. Output components lie in [-saturation, saturation].
sim::Action expert_policy(const sim::ChainState& state, const sim::TaskSpec& task,
                          ExpertMemory& memory, const ExpertTuning& tuning = {});

}  // namespace foldkd::data
