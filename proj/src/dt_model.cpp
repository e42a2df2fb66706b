#include "foldkd/dt_model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "foldkd/errors.hpp"
#include "foldkd/ops.hpp"

namespace foldkd::model {

using ad::Tensor;

namespace {

constexpr double kActionLimit = 1.0 - 1e-9;

std::string block(std::size_t i) { return "block" + std::to_string(i) + "."; }

Tensor uniform_param(ad::Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(ad::numel_of(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor normal_param(ad::Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<double> v(ad::numel_of(shape));
  for (auto& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

struct Builder {
  ad::ParamMap& params;
  Rng& rng;

  void linear(const std::string& name, std::size_t in, std::size_t out) {
    params[name + ".weight"] = uniform_param({in, out}, in, rng);
    params[name + ".bias"] = uniform_param({out}, in, rng);
  }
  void norm(const std::string& name, std::size_t d) {
    params[name + ".gamma"] = Tensor::full({d}, 1.0, true);
    params[name + ".beta"] = Tensor::zeros({d}, true);
  }
};

const Tensor& get(const ad::ParamMap& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw ContractError("missing parameter '" + name + "'");
  return it->second;
}

Tensor linear(const ad::ParamMap& p, const std::string& name, const Tensor& x) {
  return ad::add_bias(ad::matmul(x, get(p, name + ".weight")), get(p, name + ".bias"));
}

Tensor norm(const ad::ParamMap& p, const std::string& name, const Tensor& x) {
  return ad::layer_norm(x, get(p, name + ".gamma"), get(p, name + ".beta"));
}

Tensor maybe_dropout(const Tensor& x, double rate, const ForwardOptions& opts) {
  if (!opts.train || rate <= 0.0) return x;
  if (!opts.rng) throw ContractError("forward: training mode needs an rng");
  return ad::dropout(x, rate, *opts.rng);
}

std::size_t valid_count(const TokenBatch& batch) {
  return static_cast<std::size_t>(std::count(batch.valid.begin(), batch.valid.end(), 1));
}

// Per-element weights that average over valid slots after summing over
// action dims.
Tensor slot_weights(const TokenBatch& batch, std::size_t da, const char* what) {
  const std::size_t n = valid_count(batch);
  if (n == 0) throw ContractError(std::string(what) + ": batch has no valid positions");
  std::vector<double> w(batch.rows() * da, 0.0);
  for (std::size_t r = 0; r < batch.rows(); ++r)
    if (batch.valid[r])
      for (std::size_t j = 0; j < da; ++j) w[r * da + j] = 1.0 / static_cast<double>(n);
  return Tensor::from({batch.rows(), da}, std::move(w));
}

}  // namespace

DtConfig DtConfig::desk(std::size_t state_dim, std::size_t action_dim) {
  DtConfig c;
  c.state_dim = state_dim;
  c.action_dim = action_dim;
  return c;
}

DtConfig DtConfig::paper(std::size_t state_dim, std::size_t action_dim) {
  DtConfig c = desk(state_dim, action_dim);
  c.embed_dim = 256;
  c.n_layers = 10;
  c.n_heads = 16;
  c.context = 30;
  c.max_episode_len = 100;
  return c;
}

void DtConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
  if (state_dim == 0 || action_dim == 0) fail("state_dim and action_dim must be positive");
  if (embed_dim == 0 || n_heads == 0 || embed_dim % n_heads != 0)
    fail("embed_dim " + std::to_string(embed_dim) + " not divisible by n_heads " +
         std::to_string(n_heads));
  if (n_layers == 0) fail("n_layers must be >= 1");
  if (context == 0) fail("context must be >= 1");
  if (max_episode_len == 0) fail("max_episode_len must be >= 1");
  if (mlp_ratio == 0) fail("mlp_ratio must be >= 1");
  if (!(entropy_weight >= 0.0)) fail("entropy_weight must be >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
}

std::vector<std::string> DtConfig::differences(const DtConfig& o) const {
  std::vector<std::string> out;
  auto cmp = [&](const char* name, auto a, auto b) {
    if (a != b) out.push_back(std::string(name) + " (" + std::to_string(a) + " vs " +
                              std::to_string(b) + ")");
  };
  cmp("state_dim", state_dim, o.state_dim);
  cmp("action_dim", action_dim, o.action_dim);
  cmp("embed_dim", embed_dim, o.embed_dim);
  cmp("n_layers", n_layers, o.n_layers);
  cmp("n_heads", n_heads, o.n_heads);
  cmp("context", context, o.context);
  cmp("max_episode_len", max_episode_len, o.max_episode_len);
  cmp("mlp_ratio", mlp_ratio, o.mlp_ratio);
  cmp("entropy_weight", entropy_weight, o.entropy_weight);
  cmp("dropout", dropout, o.dropout);
  return out;
}

TokenBatch TokenBatch::empty(std::size_t batch, std::size_t context, const DtConfig& cfg) {
  TokenBatch b;
  b.batch = batch;
  b.context = context;
  const std::size_t n = batch * context;
  b.returns_to_go.assign(n, 0.0);
  b.states.assign(n * cfg.state_dim, 0.0);
  b.actions.assign(n * cfg.action_dim, 0.0);
  b.timesteps.assign(n, 0);
  b.valid.assign(n, 0);
  return b;
}

void TokenBatch::validate(const DtConfig& cfg) const {
  const std::size_t n = rows();
  auto check = [&](const char* what, std::size_t got, std::size_t want) {
    if (got != want)
      throw DimensionError(std::string("token batch: ") + what + " has " +
                           std::to_string(got) + " values, expected " + std::to_string(want));
  };
  if (batch == 0 || context == 0) throw DimensionError("token batch: empty batch");
  if (context > cfg.context)
    throw DimensionError("token batch: window of " + std::to_string(context) +
                         " exceeds model context " + std::to_string(cfg.context));
  check("returns_to_go", returns_to_go.size(), n);
  check("states", states.size(), n * cfg.state_dim);
  check("actions", actions.size(), n * cfg.action_dim);
  check("timesteps", timesteps.size(), n);
  check("valid", valid.size(), n);
  if (!targets.empty()) check("targets", targets.size(), n * cfg.action_dim);
}

std::size_t expected_parameter_count(const DtConfig& c) {
  const std::size_t d = c.embed_dim, h = c.mlp_ratio * d;
  std::size_t n = 0;
  n += (1 + 1) * d;                       // return embedder
  n += (c.state_dim + 1) * d;             // state embedder
  n += (c.action_dim + 1) * d;            // action embedder
  n += c.max_episode_len * d;             // timestep table
  n += 2 * d;                             // embedding norm
  const std::size_t per_layer = 2 * d               // ln1
                                + 4 * (d * d + d)   // q, k, v, out
                                + 2 * d             // ln2
                                + (d * h + h)       // mlp in
                                + (h * d + d);      // mlp out
  n += c.n_layers * per_layer;
  n += 2 * d;                             // final norm
  n += 2 * (d * c.action_dim + c.action_dim);  // mean and log-std heads
  return n;
}

DtModel::DtModel(DtConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(seed, "dt-init"));
  Builder b{params_, rng};
  const std::size_t d = config_.embed_dim;
  b.linear("embed.return", 1, d);
  b.linear("embed.state", config_.state_dim, d);
  b.linear("embed.action", config_.action_dim, d);
  params_["embed.timestep"] = normal_param({config_.max_episode_len, d}, 0.02, rng);
  b.norm("embed.norm", d);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    const auto p = block(i);
    b.norm(p + "ln1", d);
    b.linear(p + "attn.query", d, d);
    b.linear(p + "attn.key", d, d);
    b.linear(p + "attn.value", d, d);
    b.linear(p + "attn.out", d, d);
    b.norm(p + "ln2", d);
    b.linear(p + "mlp.in", d, config_.mlp_ratio * d);
    b.linear(p + "mlp.out", config_.mlp_ratio * d, d);
  }
  b.norm("final.norm", d);
  b.linear("head.mean", d, config_.action_dim);
  b.linear("head.log_std", d, config_.action_dim);

  norm_.state_mean.assign(config_.state_dim, 0.0);
  norm_.state_std.assign(config_.state_dim, 1.0);
}

DtModel DtModel::clone() const {
  DtModel m = *this;
  for (auto& [name, t] : m.params_) t = t.clone();
  return m;
}

PolicyOutput DtModel::forward(const TokenBatch& batch, const ForwardOptions& opts) const {
  batch.validate(config_);
  const auto& p = params_;
  const std::size_t B = batch.batch, K = batch.context, n = B * K;
  const std::size_t ds = config_.state_dim, da = config_.action_dim;
  const std::size_t T = 3 * K;

  std::vector<double> rtg(n), states(n * ds);
  for (std::size_t r = 0; r < n; ++r) {
    rtg[r] = batch.returns_to_go[r] / norm_.return_scale;
    for (std::size_t j = 0; j < ds; ++j)
      states[r * ds + j] =
          (batch.states[r * ds + j] - norm_.state_mean[j]) / norm_.state_std[j];
  }
  std::vector<std::size_t> steps(n);
  for (std::size_t r = 0; r < n; ++r)
    steps[r] = std::min(batch.timesteps[r], config_.max_episode_len - 1);

  const Tensor time = ad::gather_rows(get(p, "embed.timestep"), steps);
  const Tensor er = ad::add(linear(p, "embed.return", Tensor::from({n, 1}, std::move(rtg))), time);
  const Tensor es = ad::add(linear(p, "embed.state", Tensor::from({n, ds}, std::move(states))), time);
  const Tensor ea = ad::add(
      linear(p, "embed.action", Tensor::from({n, da}, {batch.actions.begin(), batch.actions.end()})),
      time);

  // Interleave to (R_t, s_t, a_t) per step: token b*3K + 3t + kind.
  std::vector<std::size_t> order(3 * n), state_rows(n);
  std::vector<std::uint8_t> key_valid(3 * n);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < K; ++t) {
      const std::size_t slot = b * K + t;
      for (std::size_t kind = 0; kind < 3; ++kind) {
        order[b * T + 3 * t + kind] = kind * n + slot;
        key_valid[b * T + 3 * t + kind] = batch.valid[slot];
      }
      state_rows[slot] = b * T + 3 * t + 1;
    }
  Tensor x = ad::gather_rows(ad::concat_rows({er, es, ea}), order);
  x = maybe_dropout(norm(p, "embed.norm", x), config_.dropout, opts);

  if (opts.attention) opts.attention->clear();
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    const auto pre = block(i);
    const Tensor h = norm(p, pre + "ln1", x);
    const Tensor w = ad::concat_cols({get(p, pre + "attn.query.weight"),
                                      get(p, pre + "attn.key.weight"),
                                      get(p, pre + "attn.value.weight")});
    const Tensor bias = ad::reshape(
        ad::concat_cols({ad::reshape(get(p, pre + "attn.query.bias"), {1, config_.embed_dim}),
                         ad::reshape(get(p, pre + "attn.key.bias"), {1, config_.embed_dim}),
                         ad::reshape(get(p, pre + "attn.value.bias"), {1, config_.embed_dim})}),
        {3 * config_.embed_dim});
    const Tensor qkv = ad::add_bias(ad::matmul(h, w), bias);
    std::vector<double> probs;
    Tensor a = ad::causal_attention(qkv, B, T, config_.n_heads, key_valid,
                                    opts.attention ? &probs : nullptr);
    if (opts.attention) opts.attention->push_back(std::move(probs));
    a = linear(p, pre + "attn.out", a);
    x = ad::add(x, maybe_dropout(a, config_.dropout, opts));
    Tensor m = ad::gelu(linear(p, pre + "mlp.in", norm(p, pre + "ln2", x)));
    m = linear(p, pre + "mlp.out", m);
    x = ad::add(x, maybe_dropout(m, config_.dropout, opts));
  }
  x = norm(p, "final.norm", x);
  const Tensor hs = ad::gather_rows(x, state_rows);
  return {linear(p, "head.mean", hs),
          ad::clamp(linear(p, "head.log_std", hs), kLogStdMin, kLogStdMax)};
}

Tensor nll_loss(const PolicyOutput& out, const TokenBatch& batch) {
  const std::size_t n = batch.rows();
  const std::size_t da = out.mean.dim(1);
  const Tensor w = slot_weights(batch, da, "nll_loss");
  const auto targets = batch.target_values();
  std::vector<double> u(n * da), c(n * da);
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < n * da; ++i) {
    const double a = std::clamp(targets[i], -kTargetClamp, kTargetClamp);
    u[i] = std::atanh(a);
    // -log p(a) = -log N(atanh a) + log(1 - a^2)
    c[i] = half_log_2pi + std::log1p(-a * a);
  }
  const Tensor z = ad::mul(ad::sub(Tensor::from({n, da}, std::move(u)), out.mean),
                           ad::exp(ad::scale(out.log_std, -1.0)));
  Tensor per = ad::add(ad::add(ad::scale(ad::mul(z, z), 0.5), out.log_std),
                       Tensor::from({n, da}, std::move(c)));
  return ad::sum(ad::mul(per, w));
}

Tensor entropy(const PolicyOutput& out, const TokenBatch& batch, Rng& rng) {
  const std::size_t n = batch.rows();
  const std::size_t da = out.mean.dim(1);
  const Tensor w = slot_weights(batch, da, "entropy");
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> eps(n * da);
  for (auto& e : eps) e = nd(rng);
  const Tensor pre = ad::add(out.mean, ad::mul(ad::exp(out.log_std), Tensor::from({n, da}, std::move(eps))));
  const double gauss_const = 0.5 * (1.0 + std::log(2.0 * std::numbers::pi));
  Tensor per = ad::add(ad::add_scalar(out.log_std, gauss_const), ad::log1m_tanh_sq(pre));
  return ad::sum(ad::mul(per, w));
}

LossParts compute_loss(const DtModel& model, const TokenBatch& batch, Rng& rng,
                       const ForwardOptions& opts) {
  const auto out = model.forward(batch, opts);
  LossParts parts;
  parts.ce = nll_loss(out, batch);
  const double lambda = model.config().entropy_weight;
  if (lambda == 0.0) {
    parts.total = parts.ce;
    return parts;
  }
  parts.entropy = entropy(out, batch, rng);
  parts.total = ad::sub(parts.ce, ad::scale(parts.entropy, lambda));
  return parts;
}

Tensor loss_ce(const DtModel& model, const TokenBatch& batch, const ForwardOptions& opts) {
  return nll_loss(model.forward(batch, opts), batch);
}

Tensor loss_total(const DtModel& model, const TokenBatch& batch, Rng& rng,
                  const ForwardOptions& opts) {
  return compute_loss(model, batch, rng, opts).total;
}

void copy_weights(const DtModel& src, DtModel& dst, ad::AdamW* dst_optimizer) {
  const auto diff = src.config().differences(dst.config());
  if (!diff.empty()) {
    std::string msg = "copy_weights: configs differ in";
    for (const auto& d : diff) msg += " " + d + ";";
    msg.pop_back();
    throw ArchitectureError(msg);
  }
  for (auto& [name, t] : dst.params()) {
    const auto& s = get(src.params(), name);
    std::copy(s.data().begin(), s.data().end(), t.mutable_data().begin());
    t.zero_grad();
  }
  dst.normalizer() = src.normalizer();
  if (dst_optimizer) dst_optimizer->reset();
}

void History::observe(std::span<const double> state) {
  if (states_.size() != actions_.size())
    throw ContractError("History::observe: previous state has no recorded action");
  states_.emplace_back(state.begin(), state.end());
  rtg_.push_back(next_rtg_);
}

void History::record(std::span<const double> action, double reward) {
  if (actions_.size() + 1 != states_.size())
    throw ContractError("History::record: no state awaiting an action");
  actions_.emplace_back(action.begin(), action.end());
  next_rtg_ -= reward;
}

void History::fill(TokenBatch& batch, std::size_t b, const DtConfig& cfg) const {
  const std::size_t K = batch.context;
  const std::size_t n = std::min(states_.size(), K);
  const std::size_t first = states_.size() - n;
  const std::size_t ds = cfg.state_dim, da = cfg.action_dim;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t t = first + i;
    const std::size_t slot = b * K + (K - n + i);
    if (states_[t].size() != ds)
      throw DimensionError("History: state has " + std::to_string(states_[t].size()) +
                           " values, model expects " + std::to_string(ds));
    batch.returns_to_go[slot] = rtg_[t];
    std::copy(states_[t].begin(), states_[t].end(), batch.states.begin() + slot * ds);
    if (t < actions_.size()) {
      if (actions_[t].size() != da) throw DimensionError("History: action size mismatch");
      std::copy(actions_[t].begin(), actions_[t].end(), batch.actions.begin() + slot * da);
    }
    batch.timesteps[slot] = t;
    batch.valid[slot] = 1;
  }
}

TokenWindow History::window(const DtConfig& cfg) const {
  auto w = TokenBatch::empty(1, cfg.context, cfg);
  fill(w, 0, cfg);
  return w;
}

std::vector<std::vector<double>> act_batch(const DtModel& model,
                                           std::span<const History* const> histories,
                                           bool greedy, Rng* rng) {
  const auto& cfg = model.config();
  if (histories.empty()) return {};
  if (!greedy && !rng) throw ContractError("act: sampling needs an rng");
  auto batch = TokenBatch::empty(histories.size(), cfg.context, cfg);
  for (std::size_t b = 0; b < histories.size(); ++b) {
    if (histories[b]->steps() == 0) throw ContractError("act: history has no observed state");
    histories[b]->fill(batch, b, cfg);
  }
  ad::NoGradGuard guard;
  const auto out = model.forward(batch);
  const std::size_t da = cfg.action_dim;
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<std::vector<double>> actions(histories.size(), std::vector<double>(da));
  for (std::size_t b = 0; b < histories.size(); ++b) {
    const std::size_t row = b * cfg.context + cfg.context - 1;
    for (std::size_t j = 0; j < da; ++j) {
      double x = out.mean.at(row * da + j);
      if (!greedy) x += std::exp(out.log_std.at(row * da + j)) * nd(*rng);
      actions[b][j] = std::clamp(std::tanh(x), -kActionLimit, kActionLimit);
    }
  }
  return actions;
}

std::vector<double> act(const DtModel& model, const History& history, bool greedy, Rng* rng) {
  const History* h = &history;
  return act_batch(model, std::span<const History* const>(&h, 1), greedy, rng)[0];
}

}  // namespace foldkd::model
