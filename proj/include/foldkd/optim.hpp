#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "foldkd/tensor.hpp"

namespace foldkd::ad {

// Ordered by name so iteration (and therefore every update) is deterministic.
using ParamMap = std::map<std::string, Tensor>;

struct OptimizerConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Scale each tensor's step by ||p|| / ||update|| (layer-wise trust ratio).
  bool trust_ratio = false;
  bool operator==(const OptimizerConfig&) const = default;
};

struct OptimizerState {
  OptimizerConfig config;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
  bool operator==(const OptimizerState&) const = default;
};

// Bias-corrected adaptive moments with decoupled weight decay
// (p <- p - lr*wd*p alongside the adaptive step).
class AdamW {
 public:
  explicit AdamW(OptimizerConfig config = {}) { state_.config = config; }

  // Parameters without a populated grad are treated as having zero grad.
  // Throws NumericError naming the parameter on a non-finite gradient.
  void step(ParamMap& params);

  const OptimizerState& state() const { return state_; }
  void load_state(OptimizerState state) { state_ = std::move(state); }
  void reset() {
    auto cfg = state_.config;
    state_ = {};
    state_.config = cfg;
  }
  OptimizerConfig& config() { return state_.config; }

 private:
  OptimizerState state_;
};

void zero_grad(ParamMap& params);
// Global L2 norm over all populated grads.
double grad_norm(const ParamMap& params);
// Rescales grads so the global norm is at most max_norm; returns the
// pre-clip norm.
double clip_grad_norm(ParamMap& params, double max_norm);
std::size_t parameter_count(const ParamMap& params);

}  // namespace foldkd::ad
