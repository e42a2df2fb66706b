#include "foldkd/chain_env.hpp"

#include <algorithm>
#include <limits>

#include "foldkd/errors.hpp"
#include "foldkd/rng.hpp"

namespace foldkd::sim {

namespace {

constexpr double kViewHalfWidth = 0.35;
constexpr double kViewBottom = -0.02;
constexpr double kViewTop = 0.33;
constexpr double kPickerHomeHeight = 0.20;
constexpr std::size_t kStrainIterations = 4;

struct Spring {
  std::size_t a, b;
  double rest, k;
};

std::vector<Spring> springs_for(const TaskSpec& task, double stiffness) {
  std::vector<Spring> out;
  const std::size_t n = task.n_particles;
  const double bend = task.bend_stiffness * stiffness / task.stiffness;
  for (std::size_t i = 0; i + 1 < n; ++i)
    out.push_back({i, i + 1, task.spacing, stiffness});
  for (std::size_t i = 0; i + 2 < n; ++i)
    out.push_back({i, i + 2, 2.0 * task.spacing, bend});
  return out;
}

bool finite(Vec2 v) { return std::isfinite(v.x) && std::isfinite(v.z); }

Vec2 clamp_to(Vec2 p, const Workspace& w) {
  return {std::clamp(p.x, w.x_min, w.x_max), std::clamp(p.z, w.z_min, w.z_max)};
}

// Distance from point p to segment ab.
double segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = ab.dot(ab);
  double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return (p - (a + ab * t)).norm();
}

struct Raster {
  Workspace view;
  double to_u(double x) const {
    return (x - view.x_min) / (view.x_max - view.x_min) *
           static_cast<double>(Observation::kWidth);
  }
  double to_v(double z) const {
    return (view.z_max - z) / (view.z_max - view.z_min) *
           static_cast<double>(Observation::kHeight);
  }
};

// Bilinear splat: distributes unit mass over the four nearest pixel centres.
void splat(Observation& obs, std::size_t ch, double u, double v) {
  const double fu = u - 0.5, fv = v - 0.5;
  const double c0 = std::floor(fu), r0 = std::floor(fv);
  const double a = fu - c0, b = fv - r0;
  const double w[2][2] = {{(1 - a) * (1 - b), a * (1 - b)}, {(1 - a) * b, a * b}};
  for (int dr = 0; dr < 2; ++dr)
    for (int dc = 0; dc < 2; ++dc) {
      const double r = r0 + dr, c = c0 + dc;
      if (r < 0 || c < 0 || r >= Observation::kHeight || c >= Observation::kWidth)
        continue;
      const auto idx = (static_cast<std::size_t>(r) * Observation::kWidth +
                        static_cast<std::size_t>(c)) *
                           Observation::kChannels +
                       ch;
      obs.pixels[idx] = std::min(1.0, obs.pixels[idx] + w[dr][dc]);
    }
}

}  // namespace

std::string_view task_name(TaskId id) {
  switch (id) {
    case TaskId::FoldFree:
      return "fold-free";
    case TaskId::FoldPinned:
      return "fold-pinned";
  }
  return "unknown";
}

TaskId parse_task(std::string_view name) {
  if (name == "fold-free") return TaskId::FoldFree;
  if (name == "fold-pinned") return TaskId::FoldPinned;
  throw ConfigError("unknown task '" + std::string(name) +
                    "' (expected fold-free or fold-pinned)");
}

TaskSpec TaskSpec::fold_free() { return TaskSpec{}; }

TaskSpec TaskSpec::fold_pinned() {
  TaskSpec t;
  t.id = TaskId::FoldPinned;
  return t;
}

TaskSpec TaskSpec::make(TaskId id) {
  return id == TaskId::FoldFree ? fold_free() : fold_pinned();
}

void TaskSpec::validate() const {
  if (n_particles < 3) throw ConfigError("task: n_particles must be >= 3");
  if (n_pickers < 1 || n_pickers > 2) throw ConfigError("task: n_pickers must be 1 or 2");
  if (horizon < 1) throw ConfigError("task: horizon must be >= 1");
  if (substeps < 1 || dt <= 0.0) throw ConfigError("task: dt and substeps must be positive");
  if (spacing <= 0.0 || particle_mass <= 0.0 || stiffness <= 0.0)
    throw ConfigError("task: spacing, mass and stiffness must be positive");
  if (stiffness_range < 0.0 || stiffness_range >= 1.0)
    throw ConfigError("task: stiffness_range must be in [0, 1)");
}

Workspace view_box(const TaskSpec& task) {
  const double c = task.workspace_center_x();
  return {c - kViewHalfWidth, c + kViewHalfWidth, kViewBottom, kViewTop};
}

Workspace workspace(const TaskSpec& task) {
  auto w = view_box(task);
  w.z_min = 0.0;
  return w;
}

bool ChainState::is_pinned(std::size_t i) const {
  return std::find(pinned.begin(), pinned.end(), i) != pinned.end();
}

Action Action::noop(std::size_t n_pickers) {
  return Action{std::vector<double>(3 * n_pickers, 0.0)};
}

ChainState reset(const TaskSpec& task, std::uint64_t seed) {
  task.validate();
  ChainState s;
  const std::size_t n = task.n_particles;
  s.positions.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    s.positions[i] = {task.spacing * static_cast<double>(i), 0.0};
  s.velocities.assign(n, Vec2{});
  s.rest_positions = s.positions;

  const double c = task.workspace_center_x();
  for (std::size_t p = 0; p < task.n_pickers; ++p) {
    const double offset =
        0.1 * (static_cast<double>(p) - 0.5 * static_cast<double>(task.n_pickers - 1));
    s.pickers.push_back({c + offset, kPickerHomeHeight});
  }
  s.gripping.assign(task.n_pickers, false);
  s.grasped.assign(task.n_pickers, std::nullopt);
  if (task.id == TaskId::FoldPinned) s.pinned.push_back(0);

  Rng rng(derive_seed(seed, "chain-reset"));
  std::uniform_real_distribution<double> u(1.0 - task.stiffness_range,
                                           1.0 + task.stiffness_range);
  s.stiffness = task.stiffness * u(rng);
  return s;
}

StepResult step(const ChainState& state, const Action& action, const TaskSpec& task) {
  if (action.values.size() != task.action_dim()) {
    throw ContractError("step: action has " + std::to_string(action.values.size()) +
                        " components, task expects " + std::to_string(task.action_dim()));
  }
  for (double v : action.values) {
    if (!(v >= -1.0 && v <= 1.0)) {
      throw ContractError("step: action component " + std::to_string(v) +
                          " outside [-1, 1]");
    }
  }

  ChainState s = state;
  const std::size_t n = s.positions.size();
  const Workspace ws = workspace(task);

  // Grip update happens before motion so a grasp made this step is carried.
  for (std::size_t p = 0; p < task.n_pickers; ++p) {
    if (action.grip(p) > 0.0) {
      s.gripping[p] = true;
      if (s.grasped[p]) continue;
      double best = task.grasp_radius();
      std::optional<std::size_t> pick;
      for (std::size_t i = 0; i < n; ++i) {
        if (s.is_pinned(i)) continue;
        bool taken = false;
        for (std::size_t q = 0; q < task.n_pickers; ++q)
          taken = taken || (q != p && s.grasped[q] == i);
        if (taken) continue;
        const double d = (s.positions[i] - s.pickers[p]).norm();
        if (d <= best) {
          best = d;
          pick = i;
        }
      }
      s.grasped[p] = pick;
    } else {
      s.gripping[p] = false;
      s.grasped[p].reset();
    }
  }

  std::vector<Vec2> start = s.pickers, target(task.n_pickers);
  for (std::size_t p = 0; p < task.n_pickers; ++p) {
    target[p] = clamp_to(
        start[p] + Vec2{action.dx(p), action.dz(p)} * task.max_picker_step, ws);
  }

  std::vector<double> inv_mass(n, 1.0 / task.particle_mass);
  for (auto i : s.pinned) inv_mass[i] = 0.0;
  for (const auto& g : s.grasped)
    if (g) inv_mass[*g] = 0.0;

  const auto springs = springs_for(task, s.stiffness);
  const double h = task.dt;
  const double steps = static_cast<double>(task.substeps);
  std::vector<Vec2> force(n);

  for (std::size_t sub = 1; sub <= task.substeps; ++sub) {
    const double frac = static_cast<double>(sub) / steps;
    for (std::size_t i = 0; i < n; ++i) {
      force[i] = Vec2{0.0, -task.gravity * task.particle_mass} -
                 s.velocities[i] * (task.air_drag * task.particle_mass);
    }
    for (const auto& sp : springs) {
      const Vec2 d = s.positions[sp.b] - s.positions[sp.a];
      const double len = d.norm();
      if (len <= 1e-12) continue;
      const Vec2 dir = d * (1.0 / len);
      const double rel_v = (s.velocities[sp.b] - s.velocities[sp.a]).dot(dir);
      const double f = sp.k * (len - sp.rest) + task.spring_damping * rel_v;
      force[sp.a] += dir * f;
      force[sp.b] -= dir * f;
    }

    for (std::size_t i = 0; i < n; ++i) {
      if (inv_mass[i] == 0.0) continue;
      s.velocities[i] += force[i] * (h * inv_mass[i]);
      s.positions[i] += s.velocities[i] * h;
    }
    for (std::size_t p = 0; p < task.n_pickers; ++p) {
      if (!s.grasped[p]) continue;
      const auto i = *s.grasped[p];
      s.positions[i] = start[p] + (target[p] - start[p]) * frac;
      s.velocities[i] = (target[p] - start[p]) * (1.0 / (steps * h));
    }
    for (auto i : s.pinned) {
      s.positions[i] = s.rest_positions[i];
      s.velocities[i] = {};
    }

    // Strain limiting on structural springs; inelastic along the spring.
    for (std::size_t it = 0; it < kStrainIterations; ++it) {
      for (std::size_t i = 0; i + 1 < n; ++i) {
        const double wa = inv_mass[i], wb = inv_mass[i + 1];
        if (wa + wb == 0.0) continue;
        const Vec2 d = s.positions[i + 1] - s.positions[i];
        const double len = d.norm();
        const double limit = task.spacing * (1.0 + task.max_stretch);
        if (len <= limit) continue;
        const Vec2 dir = d * (1.0 / len);
        const double excess = len - limit;
        s.positions[i] += dir * (excess * wa / (wa + wb));
        s.positions[i + 1] -= dir * (excess * wb / (wa + wb));
        const double sep = (s.velocities[i + 1] - s.velocities[i]).dot(dir);
        if (sep > 0.0) {
          s.velocities[i] += dir * (sep * wa / (wa + wb));
          s.velocities[i + 1] -= dir * (sep * wb / (wa + wb));
        }
      }
    }

    for (std::size_t i = 0; i < n; ++i) {
      if (inv_mass[i] == 0.0) continue;
      if (s.positions[i].z < 0.0) {
        s.positions[i].z = 0.0;
        if (s.velocities[i].z < 0.0) s.velocities[i].z = 0.0;
        s.velocities[i].x *= 1.0 - task.table_friction;
      }
    }
  }
  s.pickers = target;

  for (std::size_t i = 0; i < n; ++i) {
    if (!finite(s.positions[i]) || !finite(s.velocities[i])) {
      throw SimulationDiverged("simulation diverged at particle " + std::to_string(i) +
                               " (stiffness " + std::to_string(s.stiffness) +
                               ", dt " + std::to_string(task.dt) + ")");
    }
  }
  ++s.t;
  const double r = performance(s, task);
  return {std::move(s), r};
}

ReducedState reduced_state(const ChainState& state) {
  const std::size_t n = state.positions.size();
  const Vec2 first = state.positions.front();
  const Vec2 last = state.positions.back();
  const Vec2 mid = (n % 2 == 1)
                       ? state.positions[n / 2]
                       : (state.positions[n / 2 - 1] + state.positions[n / 2]) * 0.5;
  ReducedState out{first.x, first.z, mid.x, mid.z, last.x, last.z};
  for (const auto& p : state.pickers) {
    out.push_back(p.x);
    out.push_back(p.z);
  }
  return out;
}

Observation render(const ChainState& state, const TaskSpec& task) {
  Observation obs;
  const Raster r{view_box(task)};
  constexpr auto W = Observation::kWidth;
  constexpr auto H = Observation::kHeight;
  constexpr double kLineRadius = 1.0;  // in pixels

  for (std::size_t i = 0; i + 1 < state.positions.size(); ++i) {
    const Vec2 a{r.to_u(state.positions[i].x), r.to_v(state.positions[i].z)};
    const Vec2 b{r.to_u(state.positions[i + 1].x), r.to_v(state.positions[i + 1].z)};
    const double c_lo = std::floor(std::min(a.x, b.x) - kLineRadius - 0.5);
    const double c_hi = std::ceil(std::max(a.x, b.x) + kLineRadius);
    const double r_lo = std::floor(std::min(a.z, b.z) - kLineRadius - 0.5);
    const double r_hi = std::ceil(std::max(a.z, b.z) + kLineRadius);
    const auto c0 = static_cast<long>(std::max(0.0, c_lo));
    const auto c1 = static_cast<long>(std::min<double>(W - 1, c_hi));
    const auto r0 = static_cast<long>(std::max(0.0, r_lo));
    const auto r1 = static_cast<long>(std::min<double>(H - 1, r_hi));
    for (long row = r0; row <= r1; ++row)
      for (long col = c0; col <= c1; ++col) {
        const Vec2 centre{static_cast<double>(col) + 0.5, static_cast<double>(row) + 0.5};
        const double v = std::clamp(1.0 - segment_distance(centre, a, b) / kLineRadius, 0.0, 1.0);
        double& px = obs.pixels[(static_cast<std::size_t>(row) * W + col) * 3 + 0];
        px = std::max(px, v);
      }
  }
  for (const auto& p : state.pickers) splat(obs, 1, r.to_u(p.x), r.to_v(p.z));
  for (auto i : state.pinned)
    splat(obs, 2, r.to_u(state.positions[i].x), r.to_v(state.positions[i].z));
  for (const auto& g : state.grasped)
    if (g) splat(obs, 2, r.to_u(state.positions[*g].x), r.to_v(state.positions[*g].z));
  return obs;
}

double fold_alignment(const ChainState& state) {
  const std::size_t n = state.positions.size();
  const std::size_t pairs = n / 2;
  double s = 0.0;
  for (std::size_t i = 0; i < pairs; ++i)
    s += (state.positions[i] - state.positions[n - 1 - i]).norm();
  return s / static_cast<double>(pairs);
}

double anchor_displacement(const ChainState& state) {
  const std::size_t pairs = state.positions.size() / 2;
  double s = 0.0;
  for (std::size_t i = 0; i < pairs; ++i)
    s += (state.positions[i] - state.rest_positions[i]).norm();
  return s / static_cast<double>(pairs);
}

double performance(const ChainState& state, const TaskSpec& task) {
  return -fold_alignment(state) - task.displacement_weight * anchor_displacement(state);
}

double kinetic_energy(const ChainState& state, const TaskSpec& task) {
  double e = 0.0;
  for (const auto& v : state.velocities) e += 0.5 * task.particle_mass * v.dot(v);
  return e;
}

ChainState perfect_fold(const TaskSpec& task) {
  ChainState s = reset(task, 0);
  s.stiffness = task.stiffness;
  const std::size_t n = s.positions.size();
  for (std::size_t i = 0; i < n / 2; ++i) s.positions[n - 1 - i] = s.rest_positions[i];
  return s;
}

ChainState mirrored_fold(const TaskSpec& task) {
  ChainState s = reset(task, 0);
  s.stiffness = task.stiffness;
  const std::size_t n = s.positions.size();
  for (std::size_t i = 0; i < n / 2; ++i) s.positions[i] = s.rest_positions[n - 1 - i];
  return s;
}

}  // namespace foldkd::sim
