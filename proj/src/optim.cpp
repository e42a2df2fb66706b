#include "foldkd/optim.hpp"

#include <cmath>

#include "foldkd/errors.hpp"

namespace foldkd::ad {

void AdamW::step(ParamMap& params) {
  const auto& cfg = state_.config;
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in parameter '" + name + "'");
      }
    }
  }
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);

  std::vector<double> update;
  for (auto& [name, p] : params) {
    const std::size_t n = p.numel();
    auto& m = state_.first_moment[name];
    auto& v = state_.second_moment[name];
    if (m.size() != n) m.assign(n, 0.0);
    if (v.size() != n) v.assign(n, 0.0);
    auto w = p.mutable_data();
    const auto g = p.grad();
    const bool has = !g.empty();

    update.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      update[i] = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
    }
    if (cfg.trust_ratio) {
      double pn = 0.0, un = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        update[i] += cfg.weight_decay * w[i];
        pn += w[i] * w[i];
        un += update[i] * update[i];
      }
      const double ratio =
          (pn > 0.0 && un > 0.0) ? std::sqrt(pn) / std::sqrt(un) : 1.0;
      for (std::size_t i = 0; i < n; ++i) w[i] -= cfg.lr * ratio * update[i];
    } else {
      for (std::size_t i = 0; i < n; ++i)
        w[i] -= cfg.lr * update[i] + cfg.lr * cfg.weight_decay * w[i];
    }
  }
}

void zero_grad(ParamMap& params) {
  for (auto& [_, p] : params) p.zero_grad();
}

double grad_norm(const ParamMap& params) {
  double s = 0.0;
  for (const auto& [_, p] : params)
    for (double g : p.grad()) s += g * g;
  return std::sqrt(s);
}

double clip_grad_norm(ParamMap& params, double max_norm) {
  const double norm = grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& [_, p] : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.mutable_grad()) g *= f;
    }
  }
  return norm;
}

std::size_t parameter_count(const ParamMap& params) {
  std::size_t n = 0;
  for (const auto& [_, p] : params) n += p.numel();
  return n;
}

}  // namespace foldkd::ad
