#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "foldkd/optim.hpp"
#include "foldkd/rng.hpp"
#include "foldkd/tensor.hpp"

namespace foldkd::model {

struct DtConfig {
  std::size_t state_dim = 8;
  std::size_t action_dim = 3;
  std::size_t embed_dim = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t context = 10;
  std::size_t max_episode_len = 50;
  std::size_t mlp_ratio = 4;
  double entropy_weight = 0.1;
  double dropout = 0.1;

  static DtConfig desk(std::size_t state_dim, std::size_t action_dim);
  // 256 wide, 10 layers, 16 heads, context 30, episodes of 100 steps.
  static DtConfig paper(std::size_t state_dim, std::size_t action_dim);

  // Throws ConfigError.
  void validate() const;
  // Names of fields that differ, e.g. {"n_layers (4 vs 2)"}.
  std::vector<std::string> differences(const DtConfig& other) const;
  bool operator==(const DtConfig&) const = default;
};

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kTargetClamp = 1.0 - 1e-6;

// Input scaling carried with the weights so a checkpoint is self-contained.
struct Normalizer {
  std::vector<double> state_mean;
  std::vector<double> state_std;
  double return_scale = 1.0;   // returns-to-go are divided by this
  double target_return = 0.0;  // default conditioning value for rollouts
  bool operator==(const Normalizer&) const = default;
};

// B windows of K steps each, flattened row-major as [b][t][...]. States are
// in raw units; the model normalizes them. Invalid slots (left padding) are
// hidden from every attention query and ignored by the losses.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t context = 0;
  std::vector<double> returns_to_go;  // B*K
  std::vector<double> states;         // B*K*state_dim
  std::vector<double> actions;        // B*K*action_dim, token inputs
  std::vector<std::size_t> timesteps; // B*K
  std::vector<std::uint8_t> valid;    // B*K
  // Supervision targets per slot; when empty the input actions are used.
  std::vector<double> targets;

  static TokenBatch empty(std::size_t batch, std::size_t context, const DtConfig& cfg);
  std::size_t rows() const { return batch * context; }
  std::span<const double> target_values() const { return targets.empty() ? actions : targets; }
  // Throws DimensionError on inconsistent sizes.
  void validate(const DtConfig& cfg) const;
};
using TokenWindow = TokenBatch;

struct PolicyOutput {
  ad::Tensor mean;     // [B*K x action_dim], pre-tanh
  ad::Tensor log_std;  // [B*K x action_dim], clamped
};

struct ForwardOptions {
  bool train = false;  // enables dropout (needs rng)
  Rng* rng = nullptr;
  // When set, receives one [batch][head][3K][3K] attention block per layer.
  std::vector<std::vector<double>>* attention = nullptr;
};

class DtModel {
 public:
  DtModel(DtConfig config, std::uint64_t seed);

  const DtConfig& config() const { return config_; }
  ad::ParamMap& params() { return params_; }
  const ad::ParamMap& params() const { return params_; }
  Normalizer& normalizer() { return norm_; }
  const Normalizer& normalizer() const { return norm_; }
  std::size_t parameter_count() const { return ad::parameter_count(params_); }

  PolicyOutput forward(const TokenBatch& batch, const ForwardOptions& opts = {}) const;

  // Independent copy of parameters and normalizer.
  DtModel clone() const;

 private:
  DtConfig config_;
  ad::ParamMap params_;
  Normalizer norm_;
};

// Closed-form parameter count for a config.
std::size_t expected_parameter_count(const DtConfig& cfg);

// Mean over valid slots of the tanh-squashed Gaussian negative
// log-likelihood (summed over action dims). Targets are clamped to
// +-(1 - 1e-6). Throws ContractError if no slot is valid.
ad::Tensor nll_loss(const PolicyOutput& out, const TokenBatch& batch);
// Mean over valid slots of the policy entropy: Gaussian closed form plus the
// tanh correction from one reparameterized sample drawn from `rng`.
ad::Tensor entropy(const PolicyOutput& out, const TokenBatch& batch, Rng& rng);

struct LossParts {
  ad::Tensor ce;
  ad::Tensor entropy;  // undefined when the weight is zero
  ad::Tensor total;    // ce - weight * entropy
};
LossParts compute_loss(const DtModel& model, const TokenBatch& batch, Rng& rng,
                       const ForwardOptions& opts = {});

ad::Tensor loss_ce(const DtModel& model, const TokenBatch& batch,
                   const ForwardOptions& opts = {});
// With entropy_weight == 0 this is exactly loss_ce.
ad::Tensor loss_total(const DtModel& model, const TokenBatch& batch, Rng& rng,
                      const ForwardOptions& opts = {});

// Bitwise copy of every parameter and the normalizer. Throws
// ArchitectureError listing the differing config fields. If dst_optimizer
// is given its state is reset.
void copy_weights(const DtModel& src, DtModel& dst, ad::AdamW* dst_optimizer = nullptr);

// Rolling episode record used to build inference windows. The conditioning
// return starts at the target and drops by each observed reward.
class History {
 public:
  explicit History(double target_return) : target_(target_return), next_rtg_(target_return) {}

  void observe(std::span<const double> state);
  void record(std::span<const double> action, double reward);

  std::size_t steps() const { return states_.size(); }
  double target_return() const { return target_; }
  // Conditioning value for the next state to be observed.
  double return_to_go() const { return next_rtg_; }
  std::span<const double> returns_to_go() const { return rtg_; }
  std::span<const double> state(std::size_t t) const { return states_.at(t); }
  std::span<const double> action(std::size_t t) const { return actions_.at(t); }
  // Latest min(steps, K) steps right-aligned in a K window; the action slot
  // of the newest step is zero.
  TokenWindow window(const DtConfig& cfg) const;
  // Appends this history's window as row `b` of `batch`.
  void fill(TokenBatch& batch, std::size_t b, const DtConfig& cfg) const;

 private:
  double target_;
  double next_rtg_;
  std::vector<std::vector<double>> states_;
  std::vector<std::vector<double>> actions_;
  std::vector<double> rtg_;
};

// tanh(mean) when greedy, tanh(mean + std * noise) otherwise, read from the
// newest step of each history. Outputs are kept within +-(1 - 1e-9) so that
// they stay strictly inside (-1, 1) even where tanh rounds to 1.
std::vector<double> act(const DtModel& model, const History& history, bool greedy,
                        Rng* rng = nullptr);
std::vector<std::vector<double>> act_batch(const DtModel& model,
                                           std::span<const History* const> histories,
                                           bool greedy, Rng* rng = nullptr);

}  // namespace foldkd::model
