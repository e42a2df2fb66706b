#include "foldkd/dataset.hpp"

#include <algorithm>
#include <cmath>

#include <spdlog/spdlog.h>

#include "foldkd/binio.hpp"
#include "foldkd/errors.hpp"
#include "foldkd/rng.hpp"
#include "foldkd/score.hpp"

namespace foldkd::data {

namespace {

constexpr char kMagic[8] = {'F', 'K', 'D', 'D', 'A', 'T', 'A', '\0'};
constexpr std::uint32_t kVersion = 1;

void write_task(io::Writer& w, const sim::TaskSpec& t) {
  w.u32(static_cast<std::uint32_t>(t.id));
  w.u64(t.n_particles);
  w.u64(t.n_pickers);
  w.u64(t.substeps);
  w.u64(t.horizon);
  for (double v : {t.spacing, t.particle_mass, t.stiffness, t.bend_stiffness,
                   t.spring_damping, t.air_drag, t.gravity, t.table_friction,
                   t.max_stretch, t.dt, t.stiffness_range, t.max_picker_step,
                   t.grasp_radius_factor, t.displacement_weight})
    w.f64(v);
}

sim::TaskSpec read_task(io::Reader& r) {
  sim::TaskSpec t;
  const auto id = r.u32();
  if (id > 1) r.fail("unknown task id " + std::to_string(id));
  t.id = static_cast<sim::TaskId>(id);
  t.n_particles = r.u64();
  t.n_pickers = r.u64();
  t.substeps = r.u64();
  t.horizon = r.u64();
  for (double* v : {&t.spacing, &t.particle_mass, &t.stiffness, &t.bend_stiffness,
                    &t.spring_damping, &t.air_drag, &t.gravity, &t.table_friction,
                    &t.max_stretch, &t.dt, &t.stiffness_range, &t.max_picker_step,
                    &t.grasp_radius_factor, &t.displacement_weight})
    *v = r.f64();
  try {
    t.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("invalid task spec in header (") + e.what() + ")");
  }
  return t;
}

}  // namespace

std::size_t Dataset::transitions() const {
  std::size_t n = 0;
  for (const auto& tr : trajectories) n += tr.length();
  return n;
}

std::vector<double> Dataset::episode_returns() const {
  std::vector<double> out;
  out.reserve(trajectories.size());
  for (const auto& tr : trajectories) out.push_back(tr.total_return());
  return out;
}

bool Dataset::operator==(const Dataset& o) const {
  return task == o.task && gamma == o.gamma && trajectories == o.trajectories &&
         state_stats == o.state_stats && action_stats == o.action_stats &&
         return_stats == o.return_stats;
}

NormStats compute_norm_stats(std::span<const double> rows, std::size_t dim) {
  NormStats st{std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)};
  const std::size_t n = dim ? rows.size() / dim : 0;
  if (n == 0) return st;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < dim; ++d) st.mean[d] += rows[i * dim + d];
  for (auto& m : st.mean) m /= static_cast<double>(n);
  std::vector<double> var(dim, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < dim; ++d) {
      const double c = rows[i * dim + d] - st.mean[d];
      var[d] += c * c;
    }
  for (std::size_t d = 0; d < dim; ++d)
    st.std[d] = std::max(std::sqrt(var[d] / static_cast<double>(n)), kStdFloor);
  return st;
}

void Dataset::compute_stats() {
  std::vector<double> s, a, r;
  for (const auto& tr : trajectories) {
    s.insert(s.end(), tr.states.begin(), tr.states.end());
    a.insert(a.end(), tr.actions.begin(), tr.actions.end());
    r.insert(r.end(), tr.returns_to_go.begin(), tr.returns_to_go.end());
  }
  state_stats = compute_norm_stats(s, state_dim());
  action_stats = compute_norm_stats(a, action_dim());
  return_stats = compute_norm_stats(r, 1);
}

std::vector<double> returns_to_go(std::span<const double> rewards, double gamma) {
  std::vector<double> out(rewards.size());
  double acc = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    acc = rewards[t] + gamma * acc;
    out[t] = acc;
  }
  return out;
}

Trajectory record_expert_episode(const sim::TaskSpec& task, std::uint64_t seed,
                                 const CollectOptions& opts) {
  Trajectory tr;
  tr.state_dim = task.state_dim();
  tr.action_dim = task.action_dim();
  sim::ChainState s = sim::reset(task, seed);
  const double s0 = sim::performance(s, task);
  tr.meta = {seed, task.id, s.stiffness, 0.0};
  ExpertMemory memory;
  for (std::size_t t = 0; t < task.horizon; ++t) {
    const auto rs = sim::reduced_state(s);
    tr.states.insert(tr.states.end(), rs.begin(), rs.end());
    if (opts.store_observations) {
      const auto obs = sim::render(s, task);
      tr.observations.insert(tr.observations.end(), obs.pixels.begin(), obs.pixels.end());
    }
    const auto a = expert_policy(s, task, memory, opts.tuning);
    tr.actions.insert(tr.actions.end(), a.values.begin(), a.values.end());
    auto res = sim::step(s, a, task);
    tr.rewards.push_back(res.reward);
    s = std::move(res.state);
  }
  tr.returns_to_go = returns_to_go(tr.rewards, opts.gamma);
  tr.meta.final_normalized = normalized_performance(sim::performance(s, task), s0,
                                                    task.optimal_score());
  return tr;
}

Dataset collect(const sim::TaskSpec& task, std::size_t n_episodes, std::uint64_t seed,
                const CollectOptions& opts, std::vector<std::uint64_t>* discarded) {
  if (n_episodes < 1) throw ContractError("collect: n_episodes must be >= 1");
  task.validate();
  Dataset ds;
  ds.task = task;
  ds.gamma = opts.gamma;
  const std::uint64_t stream = derive_seed(seed, "collect");
  std::size_t rerolls = 0;
  for (std::uint64_t k = 0; ds.trajectories.size() < n_episodes; ++k) {
    const std::uint64_t ep_seed = derive_seed(stream, k);
    try {
      ds.trajectories.push_back(record_expert_episode(task, ep_seed, opts));
    } catch (const SimulationDiverged& e) {
      spdlog::warn("collect: discarding episode seed {}: {}", ep_seed, e.what());
      if (discarded) discarded->push_back(ep_seed);
      if (++rerolls > opts.max_rerolls) {
        throw SimulationDiverged("collect: more than " + std::to_string(opts.max_rerolls) +
                                 " diverged episodes; check stiffness and dt");
      }
    }
  }
  std::sort(ds.trajectories.begin(), ds.trajectories.end(),
            [](const Trajectory& a, const Trajectory& b) { return a.meta.seed < b.meta.seed; });
  ds.compute_stats();
  return ds;
}

std::string serialize_dataset(const Dataset& ds) {
  io::Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kVersion);
  write_task(w, ds.task);
  w.f64(ds.gamma);
  const bool obs = !ds.trajectories.empty() && ds.trajectories[0].has_observations();
  w.u8(obs ? 1 : 0);
  w.u64(ds.state_dim());
  w.u64(ds.action_dim());
  w.u64(obs ? sim::Observation::kSize : 0);
  w.u64(ds.trajectories.size());
  for (const auto& tr : ds.trajectories) {
    if (tr.has_observations() != obs)
      throw ContractError("serialize_dataset: mixed observation storage");
    w.u64(tr.meta.seed);
    w.u32(static_cast<std::uint32_t>(tr.meta.task));
    w.f64(tr.meta.stiffness);
    w.f64(tr.meta.final_normalized);
    w.u64(tr.length());
    w.f64s(tr.states);
    w.f64s(tr.actions);
    w.f64s(tr.rewards);
    w.f64s(tr.returns_to_go);
    w.f64s(tr.observations);
  }
  return w.take();
}

Dataset deserialize_dataset(std::string_view bytes) {
  io::Reader r(bytes, "dataset");
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (!std::equal(magic, magic + 8, kMagic)) {
    throw FormatError("dataset: bad magic bytes at byte offset 0");
  }
  const auto version = r.u32();
  if (version != kVersion)
    r.fail("unsupported version " + std::to_string(version) + " (expected " +
           std::to_string(kVersion) + ")");
  Dataset ds;
  ds.task = read_task(r);
  ds.gamma = r.f64();
  const bool obs = r.u8() != 0;
  const auto ds_dim = r.u64(), da_dim = r.u64(), obs_size = r.u64(), count = r.u64();
  if (ds_dim != ds.state_dim() || da_dim != ds.action_dim())
    r.fail("dimension mismatch with task spec");
  if (obs_size != (obs ? sim::Observation::kSize : 0)) r.fail("bad observation size");
  for (std::uint64_t i = 0; i < count; ++i) {
    Trajectory tr;
    tr.state_dim = ds_dim;
    tr.action_dim = da_dim;
    tr.meta.seed = r.u64();
    const auto task = r.u32();
    if (task > 1) r.fail("unknown task id in trajectory");
    tr.meta.task = static_cast<sim::TaskId>(task);
    tr.meta.stiffness = r.f64();
    tr.meta.final_normalized = r.f64();
    const auto h = r.u64();
    tr.states = r.f64s(h * ds_dim);
    tr.actions = r.f64s(h * da_dim);
    tr.rewards = r.f64s(h);
    tr.returns_to_go = r.f64s(h);
    tr.observations = r.f64s(h * obs_size);
    ds.trajectories.push_back(std::move(tr));
  }
  if (!r.done()) r.fail("trailing bytes after last trajectory");
  ds.compute_stats();
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  io::write_file_atomic(path, serialize_dataset(ds));
}

Dataset load_dataset(const std::string& path) {
  return deserialize_dataset(io::read_file(path));
}

}  // namespace foldkd::data
