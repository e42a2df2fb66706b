#pragma once

// Central finite-difference oracle shared by the unit and acceptance tests.
// It only perturbs leaf data and re-evaluates the forward function, so it is
// independent of every backward rule it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "foldkd/ops.hpp"
#include "foldkd/tensor.hpp"

namespace foldkd::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
};

// Relative error between two gradient vectors, normalised by the larger
// norm so that near-zero components do not dominate.
inline double relative_error(const std::vector<double>& a,
                             const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-10});
  return std::sqrt(diff) / denom;
}

inline std::vector<double> numeric_grad(const std::function<ad::Tensor()>& f,
                                        ad::Tensor& input, double h) {
  std::vector<double> g(input.numel());
  auto data = input.mutable_data();
  ad::NoGradGuard guard;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double orig = data[i];
    data[i] = orig + h;
    const double fp = f().item();
    data[i] = orig - h;
    const double fm = f().item();
    data[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Compares analytic and numeric gradients of scalar f with respect to every
// tensor in `inputs` (all must be requires_grad leaves).
inline GradCheckResult grad_check(const std::function<ad::Tensor()>& f,
                                  std::vector<ad::Tensor> inputs,
                                  double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  ad::backward(f());
  GradCheckResult r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> analytic(inputs[k].grad().begin(), inputs[k].grad().end());
    const auto numeric = numeric_grad(f, inputs[k], h);
    const double e = relative_error(analytic, numeric);
    if (e > r.max_rel_error) {
      r.max_rel_error = e;
      r.worst_input = k;
    }
  }
  return r;
}

inline ad::Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng,
                                double scale = 1.0, bool requires_grad = true) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(ad::numel_of(shape));
  for (auto& x : v) x = nd(rng);
  return ad::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// sum(y * R) for a fixed random R, so every output element carries weight.
inline ad::Tensor project(const ad::Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(y, random_tensor(y.shape(), rng, 1.0, false)));
}

// Moves values off the kinks of piecewise ops so central differences
// do not straddle them.
inline ad::Tensor away_from(std::vector<double> kinks, ad::Shape shape, std::mt19937_64& rng) {
  auto t = random_tensor(std::move(shape), rng);
  for (double& v : t.mutable_data())
    for (double k : kinks)
      if (std::abs(v - k) < 1e-2) v = k + 0.05;
  return t;
}

// Worst relative error per differentiable op on random inputs.
inline std::vector<std::pair<std::string, double>> op_gradient_errors(std::uint64_t seed) {
  using namespace ad;
  std::mt19937_64 rng(seed);
  std::vector<std::pair<std::string, double>> out;
  const auto check = [&](const char* name, const std::function<Tensor()>& f, std::vector<Tensor> in) {
    out.emplace_back(name, grad_check(f, std::move(in)).max_rel_error);
  };
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  auto m = random_tensor({4, 2}, rng);
  auto v = random_tensor({4}, rng);
  auto pos = random_tensor({3, 4}, rng);
  for (double& p : pos.mutable_data()) p = std::abs(p) + 0.5;
  auto kinked = away_from({0.0, -0.5, 0.5}, {3, 4}, rng);

  check("matmul", [&] { return project(matmul(a, m), seed); }, {a, m});
  check("add", [&] { return project(add(a, b), seed); }, {a, b});
  check("sub", [&] { return project(sub(a, b), seed); }, {a, b});
  check("mul", [&] { return project(mul(a, b), seed); }, {a, b});
  check("add_bias", [&] { return project(add_bias(a, v), seed); }, {a, v});
  check("scale", [&] { return project(scale(a, -1.7), seed); }, {a});
  check("add_scalar", [&] { return project(add_scalar(a, 0.3), seed); }, {a});
  check("tanh", [&] { return project(ad::tanh(a), seed); }, {a});
  check("relu", [&] { return project(relu(kinked), seed); }, {kinked});
  check("gelu", [&] { return project(gelu(a), seed); }, {a});
  check("exp", [&] { return project(ad::exp(a), seed); }, {a});
  check("log", [&] { return project(ad::log(pos), seed); }, {pos});
  check("clamp", [&] { return project(clamp(kinked, -0.5, 0.5), seed); }, {kinked});
  check("log1m_tanh_sq", [&] { return project(log1m_tanh_sq(scale(a, 3.0)), seed); }, {a});
  auto g = random_tensor({4}, rng);
  auto bt = random_tensor({4}, rng);
  check("layer_norm", [&] { return project(layer_norm(a, g, bt), seed); }, {a, g, bt});
  const std::vector<std::size_t> rows{2, 0, 2, 1};
  check("gather_rows", [&] { return project(gather_rows(a, rows), seed); }, {a});
  check("concat_rows", [&] { return project(concat_rows({a, b}), seed); }, {a, b});
  auto narrow = random_tensor({3, 2}, rng);
  check("concat_cols", [&] { return project(concat_cols({a, narrow, b}), seed); }, {a, narrow, b});
  check("reshape", [&] { return project(reshape(a, {2, 6}), seed); }, {a});
  check("transpose", [&] { return project(transpose(a), seed); }, {a});
  check("sum", [&] { return sum(mul(a, a)); }, {a});
  check("mean", [&] { return mean(mul(a, b)); }, {a, b});
  check("softmax0", [&] { return project(softmax(a, 0), seed); }, {a});
  check("softmax1", [&] { return project(softmax(a, 1), seed); }, {a});
  check("dropout", [&] {
    std::mt19937_64 mask_rng(seed + 100);
    return project(dropout(a, 0.3, mask_rng), seed);
  }, {a});

  auto img = random_tensor({2, 2, 5, 5}, rng);
  auto ker = random_tensor({3, 2, 3, 3}, rng);
  auto kb = random_tensor({3}, rng);
  check("conv2d", [&] { return project(conv2d(img, ker, kb, 2, 1), seed); }, {img, ker, kb});

  auto qkv = random_tensor({2 * 5, 3 * 4}, rng);
  const std::vector<std::uint8_t> mask{0, 1, 1, 1, 1, 0, 0, 1, 1, 1};
  check("causal_attention", [&] { return project(causal_attention(qkv, 2, 5, 2, mask), seed); }, {qkv});
  return out;
}

}  // namespace foldkd::testing
