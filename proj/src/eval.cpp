#include "foldkd/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "foldkd/checkpoint.hpp"
#include "foldkd/errors.hpp"

namespace foldkd::eval {

std::vector<std::vector<double>> RandomPolicy::act(std::span<const sim::ChainState* const>,
                                                   std::span<const std::size_t> envs,
                                                   const sim::TaskSpec& task, std::span<Rng> noise) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<std::vector<double>> out;
  for (auto e : envs) {
    std::vector<double> a(task.action_dim());
    for (auto& v : a) v = u(noise[e]);
    out.push_back(std::move(a));
  }
  return out;
}

std::vector<std::vector<double>> ExpertPolicy::act(std::span<const sim::ChainState* const> states,
                                                   std::span<const std::size_t> envs,
                                                   const sim::TaskSpec& task, std::span<Rng>) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < envs.size(); ++i)
    out.push_back(data::expert_policy(*states[i], task, memory_.at(envs[i]), tuning_).values);
  return out;
}

DtPolicy::DtPolicy(const model::DtModel& model, std::string id, double target_return,
                   const vision::EncoderModel* encoder, bool greedy, std::uint64_t sample_seed)
    : model_(model),
      id_(std::move(id)),
      target_(target_return),
      encoder_(encoder),
      greedy_(greedy),
      sampler_(derive_seed(sample_seed, "policy-sample")) {}

void DtPolicy::check(const sim::TaskSpec& task) const {
  const auto& c = model_.config();
  if (c.state_dim != task.state_dim() || c.action_dim != task.action_dim())
    throw ConfigError("policy '" + id_ + "' expects state/action dims " + std::to_string(c.state_dim) +
                      "/" + std::to_string(c.action_dim) + ", task has " +
                      std::to_string(task.state_dim()) + "/" + std::to_string(task.action_dim()));
  if (encoder_ && encoder_->config().state_dim != c.state_dim)
    throw ConfigError("policy '" + id_ + "': encoder output does not match the model state size");
}

void DtPolicy::begin(std::size_t n) { histories_.assign(n, model::History(target_)); }

std::vector<std::vector<double>> DtPolicy::act(std::span<const sim::ChainState* const> states,
                                               std::span<const std::size_t> envs,
                                               const sim::TaskSpec& task, std::span<Rng> noise) {
  std::vector<std::vector<double>> inputs;
  if (encoder_) {
    std::vector<sim::Observation> images;
    for (const auto* s : states) images.push_back(sim::render(*s, task));
    std::vector<std::span<const double>> views;
    for (const auto& im : images) views.emplace_back(im.pixels);
    inputs = vision::encode_batch(*encoder_, views);
    if (sigma_ > 0.0) {
      std::normal_distribution<double> nd(0.0, sigma_);
      for (std::size_t i = 0; i < envs.size(); ++i)
        for (auto& v : inputs[i]) v += nd(noise[envs[i]]);
    }
  } else {
    for (const auto* s : states) inputs.push_back(sim::reduced_state(*s));
  }
  std::vector<const model::History*> hs;
  for (std::size_t i = 0; i < envs.size(); ++i) {
    auto& h = histories_.at(envs[i]);
    h.observe(inputs[i]);
    hs.push_back(&h);
  }
  return model::act_batch(model_, hs, greedy_, greedy_ ? nullptr : &sampler_);
}

void DtPolicy::feedback(std::size_t env, std::span<const double> action, double reward) {
  histories_.at(env).record(action, reward);
}

std::vector<std::uint64_t> trial_seeds(std::uint64_t seed_base, std::size_t n) {
  std::vector<std::uint64_t> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = derive_seed(seed_base, static_cast<std::uint64_t>(i));
  return s;
}

std::vector<EpisodeRecord> run_episodes(Policy& policy, const sim::TaskSpec& task,
                                        std::span<const std::uint64_t> seeds,
                                        const RunOptions& opts) {
  policy.check(task);
  policy.set_state_noise(opts.state_noise);
  const std::size_t n = seeds.size();
  std::vector<EpisodeRecord> recs(n);
  std::vector<sim::ChainState> envs;
  std::vector<Rng> noise;
  std::vector<double> s0(n);
  for (std::size_t i = 0; i < n; ++i) {
    envs.push_back(sim::reset(task, seeds[i]));
    noise.emplace_back(derive_seed(seeds[i], "episode-noise"));
    recs[i].seed = seeds[i];
    recs[i].stiffness = envs[i].stiffness;
    s0[i] = sim::performance(envs[i], task);
  }
  policy.begin(n);
  std::vector<bool> live(n, true);
  for (std::size_t t = 0; t < task.horizon; ++t) {
    std::vector<std::size_t> idx;
    std::vector<const sim::ChainState*> ptrs;
    for (std::size_t i = 0; i < n; ++i)
      if (live[i]) {
        idx.push_back(i);
        ptrs.push_back(&envs[i]);
      }
    if (idx.empty()) break;
    const auto actions = policy.act(ptrs, idx, task, noise);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto i = idx[k];
      auto& r = recs[i];
      const auto rs = sim::reduced_state(envs[i]);
      r.states.insert(r.states.end(), rs.begin(), rs.end());
      if (opts.record_observations) {
        const auto obs = sim::render(envs[i], task);
        r.observations.insert(r.observations.end(), obs.pixels.begin(), obs.pixels.end());
      }
      try {
        auto res = sim::step(envs[i], sim::Action{actions[k]}, task);
        envs[i] = std::move(res.state);
        r.actions.insert(r.actions.end(), actions[k].begin(), actions[k].end());
        r.rewards.push_back(res.reward);
        policy.feedback(i, actions[k], res.reward);
      } catch (const SimulationDiverged& e) {
        spdlog::warn("episode seed {} diverged at step {}: {}", seeds[i], t, e.what());
        r.diverged = true;
        live[i] = false;
        r.states.resize(r.rewards.size() * task.state_dim());
        if (opts.record_observations) r.observations.resize(r.rewards.size() * sim::Observation::kSize);
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    recs[i].final_normalized =
        recs[i].diverged ? 0.0
                         : normalized_performance(sim::performance(envs[i], task), s0[i],
                                                  task.optimal_score());
  return recs;
}

double percentile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ContractError("percentile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

EvalReport summarize(std::vector<double> values, std::string policy_id, sim::TaskId task,
                     double sigma, std::uint64_t seed_base) {
  if (values.empty()) throw ContractError("summarize: no trials");
  EvalReport r;
  r.policy_id = std::move(policy_id);
  r.task = task;
  r.sigma = sigma;
  r.seed_base = seed_base;
  r.n_trials = values.size();
  const double n = static_cast<double>(values.size());
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(ss / n);
  auto sorted = values;
  std::sort(sorted.begin(), sorted.end());
  r.p25 = percentile(sorted, 0.25);
  r.median = percentile(sorted, 0.5);
  r.p75 = percentile(sorted, 0.75);
  r.values = std::move(values);
  return r;
}

EvalReport evaluate(Policy& policy, const sim::TaskSpec& task, std::size_t n_trials, double sigma,
                    std::uint64_t seed_base) {
  if (n_trials == 0) throw ConfigError("evaluate: n_trials must be >= 1");
  if (!(sigma >= 0.0)) throw ConfigError("evaluate: sigma must be >= 0");
  const auto seeds = trial_seeds(seed_base, n_trials);
  RunOptions opts;
  opts.state_noise = sigma;
  const auto recs = run_episodes(policy, task, seeds, opts);
  std::vector<double> values;
  std::size_t diverged = 0;
  double ret = 0.0;
  for (const auto& r : recs) {
    values.push_back(r.final_normalized);
    diverged += r.diverged;
    ret += std::accumulate(r.rewards.begin(), r.rewards.end(), 0.0);
  }
  auto rep = summarize(std::move(values), policy.id(), task.id, sigma, seed_base);
  rep.diverged = diverged;
  rep.mean_return = ret / static_cast<double>(recs.size());
  return rep;
}

NoiseSweep noise_sweep(std::span<Policy* const> models, const sim::TaskSpec& task,
                       const std::vector<double>& grid, std::size_t n_trials,
                       std::uint64_t seed_base) {
  if (models.empty()) throw ConfigError("noise_sweep: no models");
  if (grid.empty()) throw ConfigError("noise_sweep: empty sigma grid");
  if (!std::is_sorted(grid.begin(), grid.end()) || grid.front() < 0.0)
    throw ConfigError("noise_sweep: sigma grid must be ascending and non-negative");
  NoiseSweep s;
  s.grid = grid;
  for (auto* m : models) {
    std::vector<EvalReport> row;
    for (double sigma : grid) row.push_back(evaluate(*m, task, n_trials, sigma, seed_base));
    s.reports.push_back(std::move(row));
  }
  return s;
}

namespace {

std::string fmt3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

double parse_double(std::string_view s) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw FormatError("report csv: bad number '" + std::string(s) + "'");
  return v;
}

std::uint64_t parse_u64(std::string_view s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw FormatError("report csv: bad integer '" + std::string(s) + "'");
  return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const auto next = s.find(sep, pos);
    out.push_back(s.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return out;
}

constexpr const char* kCsvHeader = "task,policy,sigma,seed_base,n_trials,diverged,mean_return,mean,std,p25,median,p75,values";

}  // namespace

Table report_table(std::vector<EvalReport> reports) {
  if (reports.empty()) throw ContractError("report_table: no reports");
  std::stable_sort(reports.begin(), reports.end(), [](const EvalReport& a, const EvalReport& b) {
    const auto ta = sim::task_name(a.task), tb = sim::task_name(b.task);
    if (ta != tb) return ta < tb;
    if (a.policy_id != b.policy_id) return a.policy_id < b.policy_id;
    return a.sigma < b.sigma;
  });
  std::ostringstream text, csv;
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %-20s %-8s %-15s %-7s %-7s %-7s %s\n", "task", "policy",
                "sigma", "mean+-std", "p25", "median", "p75", "trials");
  text << line;
  csv << kCsvHeader << '\n';
  for (const auto& r : reports) {
    if (r.policy_id.find_first_of(",\n") != std::string::npos)
      throw ContractError("report_table: policy id '" + r.policy_id + "' contains a separator");
    const std::string ms = fmt3(r.mean) + "+-" + fmt3(r.std);
    std::snprintf(line, sizeof line, "%-12s %-20s %-8g %-15s %-7s %-7s %-7s %zu\n",
                  std::string(sim::task_name(r.task)).c_str(), r.policy_id.c_str(), r.sigma, ms.c_str(),
                  fmt3(r.p25).c_str(), fmt3(r.median).c_str(), fmt3(r.p75).c_str(), r.n_trials);
    text << line;
    csv << sim::task_name(r.task) << ',' << r.policy_id << ',' << ckpt::format_double(r.sigma) << ','
        << r.seed_base << ',' << r.n_trials << ',' << r.diverged << ','
        << ckpt::format_double(r.mean_return) << ',' << ckpt::format_double(r.mean)
        << ',' << ckpt::format_double(r.std) << ',' << ckpt::format_double(r.p25) << ','
        << ckpt::format_double(r.median) << ',' << ckpt::format_double(r.p75) << ',';
    for (std::size_t i = 0; i < r.values.size(); ++i)
      csv << (i ? ";" : "") << ckpt::format_double(r.values[i]);
    csv << '\n';
  }
  return {text.str(), csv.str()};
}

std::vector<EvalReport> load_report_csv(std::string_view csv) {
  auto lines = split(csv, '\n');
  if (lines.empty() || lines[0] != kCsvHeader) throw FormatError("report csv: unexpected header");
  std::vector<EvalReport> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = split(lines[i], ',');
    if (f.size() != 13)
      throw FormatError("report csv: line " + std::to_string(i + 1) + " has " + std::to_string(f.size()) +
                        " fields");
    EvalReport r;
    r.task = sim::parse_task(f[0]);
    r.policy_id = std::string(f[1]);
    r.sigma = parse_double(f[2]);
    r.seed_base = parse_u64(f[3]);
    r.n_trials = parse_u64(f[4]);
    r.diverged = parse_u64(f[5]);
    r.mean_return = parse_double(f[6]);
    r.mean = parse_double(f[7]);
    r.std = parse_double(f[8]);
    r.p25 = parse_double(f[9]);
    r.median = parse_double(f[10]);
    r.p75 = parse_double(f[11]);
    if (!f[12].empty())
      for (auto v : split(f[12], ';')) r.values.push_back(parse_double(v));
    out.push_back(std::move(r));
  }
  return out;
}

std::string sweep_csv(const NoiseSweep& sweep) {
  std::ostringstream os;
  os << "policy,sigma,mean,std,p25,median,p75\n";
  for (const auto& row : sweep.reports)
    for (const auto& r : row)
      os << r.policy_id << ',' << ckpt::format_double(r.sigma) << ',' << ckpt::format_double(r.mean)
         << ',' << ckpt::format_double(r.std) << ',' << ckpt::format_double(r.p25) << ','
         << ckpt::format_double(r.median) << ',' << ckpt::format_double(r.p75) << '\n';
  return os.str();
}

}  // namespace foldkd::eval
