#include "foldkd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "foldkd/errors.hpp"

namespace foldkd::ad {

namespace {

using detail::make_result;

void require(bool ok, const char* op, const Tensor& a) {
  if (!ok) {
    throw DimensionError(std::string(op) + ": invalid shape " +
                         shape_str(a.shape()));
  }
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// C[m x n] += A[m x k] . B[k x n]
void gemm_acc(std::size_t m, std::size_t k, std::size_t n, const double* __restrict a,
              const double* __restrict b, double* __restrict c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* __restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[k x n] += A[m x k]^T . B[m x n]
void gemm_tn_acc(std::size_t m, std::size_t k, std::size_t n, const double* __restrict a,
                 const double* __restrict b, double* __restrict c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* __restrict bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      double* __restrict cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

std::vector<double> transposed(const double* a, std::size_t rows,
                               std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

// C[m x n] += A[m x k] . B[n x k]^T
void gemm_nt_acc(std::size_t m, std::size_t k, std::size_t n, const double* a,
                 const double* b, double* c) {
  const auto bt = transposed(b, n, k);
  gemm_acc(m, k, n, a, bt.data(), c);
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
  return make_result(x.shape(), std::move(out), {x}, [deriv](Node& o) {
    Node& a = *o.parents[0];
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      a.grad[i] += o.grad[i] * deriv(a.data[i], o.data[i]);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) +
                         " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  gemm_acc(m, k, n, a.data().data(), b.data().data(), out.data());
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& o) {
    Node& na = *o.parents[0];
    Node& nb = *o.parents[1];
    if (na.requires_grad)
      gemm_nt_acc(m, n, k, o.grad.data(), nb.data.data(), na.grad.data());
    if (nb.requires_grad)
      gemm_tn_acc(m, k, n, na.data.data(), o.grad.data(), nb.grad.data());
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& o) {
    for (auto& p : o.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < o.grad.size(); ++i) p->grad[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& o) {
    Node& na = *o.parents[0];
    Node& nb = *o.parents[1];
    if (na.requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) na.grad[i] += o.grad[i];
    if (nb.requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) nb.grad[i] -= o.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& o) {
    Node& na = *o.parents[0];
    Node& nb = *o.parents[1];
    if (na.requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        na.grad[i] += o.grad[i] * nb.data[i];
    if (nb.requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        nb.grad[i] += o.grad[i] * na.data[i];
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() == 0 || bias.rank() != 1 ||
      x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: cannot broadcast " +
                         shape_str(bias.shape()) + " onto " +
                         shape_str(x.shape()));
  }
  const std::size_t n = bias.dim(0);
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bd[j];
  return make_result(x.shape(), std::move(out), {x, bias}, [rows, n](Node& o) {
    Node& nx = *o.parents[0];
    Node& nb = *o.parents[1];
    if (nx.requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) nx.grad[i] += o.grad[i];
    if (nb.requires_grad)
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) nb.grad[j] += o.grad[r * n + j];
  });
}

Tensor scale(const Tensor& x, double c) {
  return unary(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary(
      x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  const auto xs = x.data();
  auto t = std::make_shared<std::vector<double>>(xs.size());
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double v = xs[i];
    const double z = k * (v + c * v * v * v);
    // tanh through exp, which is several times cheaper than std::tanh here.
    const double e = 1.0 - 2.0 / (std::exp(2.0 * std::abs(z)) + 1.0);
    (*t)[i] = z < 0.0 ? -e : e;
    out[i] = 0.5 * v * (1.0 + (*t)[i]);
  }
  return make_result(x.shape(), std::move(out), {x}, [t](Node& o) {
    Node& a = *o.parents[0];
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const double v = a.data[i], ti = (*t)[i];
      a.grad[i] += o.grad[i] * (0.5 * (1.0 + ti) +
                                0.5 * v * (1.0 - ti * ti) * k * (1.0 + 3.0 * c * v * v));
    }
  });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive input " + std::to_string(v));
  }
  return unary(
      x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor log1m_tanh_sq(const Tensor& x) {
  // 1 - tanh^2(x) = 4 e^{-2|x|} / (1 + e^{-2|x|})^2
  return unary(
      x,
      [](double v) {
        const double a = std::abs(v);
        return 2.0 * (std::log(2.0) - a - std::log1p(std::exp(-2.0 * a)));
      },
      [](double v, double) { return -2.0 * std::tanh(v); });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.rank() == 0 || gamma.rank() != 1 || beta.rank() != 1 ||
      gamma.dim(0) != x.shape().back() || beta.dim(0) != x.shape().back()) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) +
                         " with gamma " + shape_str(gamma.shape()) +
                         " and beta " + shape_str(beta.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const auto xd = x.data();
  const auto g = gamma.data();
  const auto b = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * inv;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * g[j] + b[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [rows, n, xhat, inv_std](Node& o) {
        Node& nx = *o.parents[0];
        Node& ng = *o.parents[1];
        Node& nb = *o.parents[2];
        std::vector<double> dh(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gy = o.grad.data() + r * n;
          const double* h = xhat->data() + r * n;
          if (ng.requires_grad)
            for (std::size_t j = 0; j < n; ++j) ng.grad[j] += gy[j] * h[j];
          if (nb.requires_grad)
            for (std::size_t j = 0; j < n; ++j) nb.grad[j] += gy[j];
          if (!nx.requires_grad) continue;
          double sum_dh = 0.0, sum_dh_h = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            dh[j] = gy[j] * ng.data[j];
            sum_dh += dh[j];
            sum_dh_h += dh[j] * h[j];
          }
          const double inv = (*inv_std)[r];
          const double dn = static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            nx.grad[r * n + j] +=
                inv / dn * (dn * dh[j] - sum_dh - h[j] * sum_dh_h);
          }
        }
      });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require(x.rank() == 2, "gather_rows", x);
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(rows.size() * c);
  const auto xd = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= r) {
      throw DimensionError("gather_rows: index " + std::to_string(rows[i]) +
                           " out of range for " + shape_str(x.shape()));
    }
    std::copy_n(xd.data() + rows[i] * c, c, out.data() + i * c);
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  return make_result({rows.size(), c}, std::move(out), {x}, [idx, c](Node& o) {
    Node& nx = *o.parents[0];
    for (std::size_t i = 0; i < idx->size(); ++i) {
      double* dst = nx.grad.data() + (*idx)[i] * c;
      const double* src = o.grad.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].rank() == 2 ? parts[0].dim(1) : 0;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != c) {
      throw DimensionError("concat_rows: cannot stack " +
                           shape_str(p.shape()) + " under " +
                           shape_str(parts[0].shape()));
    }
    total += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(total * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result({total, c}, std::move(out), parts, [](Node& o) {
    std::size_t offset = 0;
    for (auto& p : o.parents) {
      const std::size_t n = p->data.size();
      if (p->requires_grad)
        for (std::size_t i = 0; i < n; ++i) p->grad[i] += o.grad[offset + i];
      offset += n;
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts[0].rank() == 2 ? parts[0].dim(0) : 0;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != r) {
      throw DimensionError("concat_cols: cannot join " + shape_str(p.shape()) +
                           " beside " + shape_str(parts[0].shape()));
    }
    total += p.dim(1);
  }
  std::vector<double> out(r * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.dim(1);
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.data().data() + i * c, c, out.data() + i * total + offset);
    offset += c;
  }
  return make_result({r, total}, std::move(out), parts, [r, total](Node& o) {
    std::size_t offset = 0;
    for (auto& p : o.parents) {
      const std::size_t c = p->shape[1];
      if (p->requires_grad)
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            p->grad[i * c + j] += o.grad[i * total + offset + j];
      offset += c;
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) +
                         " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& o) {
    Node& nx = *o.parents[0];
    for (std::size_t i = 0; i < o.grad.size(); ++i) nx.grad[i] += o.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  require(x.rank() == 2, "transpose", x);
  const std::size_t r = x.dim(0), c = x.dim(1);
  auto out = transposed(x.data().data(), r, c);
  return make_result({c, r}, std::move(out), {x}, [r, c](Node& o) {
    Node& nx = *o.parents[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) nx.grad[i * c + j] += o.grad[j * r + i];
  });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t pad) {
  if (x.rank() != 4 || weight.rank() != 4 || bias.rank() != 1 ||
      weight.dim(1) != x.dim(1) || bias.dim(0) != weight.dim(0) ||
      stride == 0) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) +
                         " with kernel " + shape_str(weight.shape()) +
                         " and bias " + shape_str(bias.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (h + 2 * pad < kh || w + 2 * pad < kw) {
    throw DimensionError("conv2d: kernel " + shape_str(weight.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
  const std::size_t patch = c * kh * kw;
  const std::size_t positions = n * ho * wo;

  // cols[pos x patch]: one receptive field per output position.
  auto cols = std::make_shared<std::vector<double>>(positions * patch, 0.0);
  const auto xd = x.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double* row = cols->data() + ((b * ho + oy) * wo + ox) * patch;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                            static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                              static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              row[(ch * kh + ky) * kw + kx] =
                  xd[((b * c + ch) * h + iy) * w + ix];
            }
          }
      }

  // out_t[pos x o] = cols . weight^T
  std::vector<double> out_t(positions * o, 0.0);
  gemm_nt_acc(positions, patch, o, cols->data(), weight.data().data(),
              out_t.data());
  std::vector<double> out(n * o * ho * wo);
  const auto bd = bias.data();
  const std::size_t hw = ho * wo;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t q = 0; q < hw; ++q)
      for (std::size_t oc = 0; oc < o; ++oc)
        out[(b * o + oc) * hw + q] = out_t[(b * hw + q) * o + oc] + bd[oc];

  return make_result(
      {n, o, ho, wo}, std::move(out), {x, weight, bias},
      [=](Node& nd) {
        Node& nx = *nd.parents[0];
        Node& nw = *nd.parents[1];
        Node& nb = *nd.parents[2];
        std::vector<double> g_t(positions * o);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t q = 0; q < hw; ++q)
            for (std::size_t oc = 0; oc < o; ++oc)
              g_t[(b * hw + q) * o + oc] = nd.grad[(b * o + oc) * hw + q];
        if (nb.requires_grad)
          for (std::size_t p = 0; p < positions; ++p)
            for (std::size_t oc = 0; oc < o; ++oc) nb.grad[oc] += g_t[p * o + oc];
        if (nw.requires_grad) {
          // dW[o x patch] += g_t^T . cols
          gemm_tn_acc(positions, o, patch, g_t.data(), cols->data(),
                      nw.grad.data());
        }
        if (nx.requires_grad) {
          std::vector<double> dcols(positions * patch, 0.0);
          gemm_acc(positions, o, patch, g_t.data(), nw.data.data(),
                   dcols.data());
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t oy = 0; oy < ho; ++oy)
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const double* row =
                    dcols.data() + ((b * ho + oy) * wo + ox) * patch;
                for (std::size_t ch = 0; ch < c; ++ch)
                  for (std::size_t ky = 0; ky < kh; ++ky) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                      const auto ix =
                          static_cast<std::ptrdiff_t>(ox * stride + kx) -
                          static_cast<std::ptrdiff_t>(pad);
                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                      nx.grad[((b * c + ch) * h + iy) * w + ix] +=
                          row[(ch * kh + ky) * kw + kx];
                    }
                  }
              }
        }
      });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, {x}, [](Node& o) {
    Node& nx = *o.parents[0];
    const double g = o.grad[0];
    for (auto& v : nx.grad) v += g;
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank() || x.dim(axis) == 0) {
    throw DimensionError("softmax: axis " + std::to_string(axis) +
                         " invalid for " + shape_str(x.shape()));
  }
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const auto xd = x.data();
  for (double v : xd) {
    if (std::isnan(v)) throw NumericError("softmax: NaN input");
  }
  std::vector<double> out(x.numel());
  for (std::size_t a = 0; a < outer; ++a)
    for (std::size_t b = 0; b < inner; ++b) {
      const std::size_t base = a * len * inner + b;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xd[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  return make_result(x.shape(), std::move(out), {x},
                     [outer, inner, len](Node& o) {
                       Node& nx = *o.parents[0];
                       for (std::size_t a = 0; a < outer; ++a)
                         for (std::size_t b = 0; b < inner; ++b) {
                           const std::size_t base = a * len * inner + b;
                           double dot = 0.0;
                           for (std::size_t j = 0; j < len; ++j)
                             dot += o.grad[base + j * inner] * o.data[base + j * inner];
                           for (std::size_t j = 0; j < len; ++j) {
                             const std::size_t k = base + j * inner;
                             nx.grad[k] += o.data[k] * (o.grad[k] - dot);
                           }
                         }
                     });
}

Tensor causal_attention(const Tensor& qkv, std::size_t batch, std::size_t seq,
                        std::size_t heads, std::span<const std::uint8_t> key_valid,
                        std::vector<double>* probs) {
  if (qkv.rank() != 2 || qkv.dim(0) != batch * seq || heads == 0 ||
      qkv.dim(1) % (3 * heads) != 0) {
    throw DimensionError("causal_attention: packed input " +
                         shape_str(qkv.shape()) + " incompatible with batch " +
                         std::to_string(batch) + ", seq " + std::to_string(seq) +
                         ", heads " + std::to_string(heads));
  }
  if (!key_valid.empty() && key_valid.size() != batch * seq) {
    throw DimensionError("causal_attention: mask length " +
                         std::to_string(key_valid.size()) + " != " +
                         std::to_string(batch * seq));
  }
  const std::size_t d = qkv.dim(1) / 3;
  const std::size_t dh = d / heads;
  const std::size_t stride = 3 * d;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto in = qkv.data();

  auto valid = std::make_shared<std::vector<std::uint8_t>>(batch * seq * seq, 0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < seq; ++i) {
      bool any = false;
      for (std::size_t j = 0; j <= i; ++j) {
        const bool ok = key_valid.empty() || key_valid[b * seq + j] != 0;
        (*valid)[(b * seq + i) * seq + j] = ok;
        any = any || ok;
      }
      if (!any) (*valid)[(b * seq + i) * seq + i] = 1;
    }

  auto p = std::make_shared<std::vector<double>>(batch * heads * seq * seq, 0.0);
  std::vector<double> out(batch * seq * d, 0.0);
  std::vector<double> row(seq);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t qo = hd * dh, ko = d + hd * dh, vo = 2 * d + hd * dh;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* q = in.data() + (b * seq + i) * stride + qo;
        const std::uint8_t* ok = valid->data() + (b * seq + i) * seq;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          if (!ok[j]) continue;
          const double* k = in.data() + (b * seq + j) * stride + ko;
          double s = 0.0;
          for (std::size_t t = 0; t < dh; ++t) s += q[t] * k[t];
          row[j] = s * sc;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          if (!ok[j]) continue;
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        double* pr = p->data() + ((b * heads + hd) * seq + i) * seq;
        double* o = out.data() + (b * seq + i) * d + hd * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          if (!ok[j]) continue;
          pr[j] = row[j] / z;
          const double* v = in.data() + (b * seq + j) * stride + vo;
          for (std::size_t t = 0; t < dh; ++t) o[t] += pr[j] * v[t];
        }
      }
    }
  if (probs) *probs = *p;

  return make_result(
      {batch * seq, d}, std::move(out), {qkv},
      [=](Node& nd) {
        Node& nx = *nd.parents[0];
        const auto& x = nx.data;
        std::vector<double> dp(seq);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t hd = 0; hd < heads; ++hd) {
            const std::size_t qo = hd * dh, ko = d + hd * dh, vo = 2 * d + hd * dh;
            for (std::size_t i = 0; i < seq; ++i) {
              const double* go = nd.grad.data() + (b * seq + i) * d + hd * dh;
              const double* pr = p->data() + ((b * heads + hd) * seq + i) * seq;
              const std::uint8_t* ok = valid->data() + (b * seq + i) * seq;
              double dot = 0.0;
              for (std::size_t j = 0; j <= i; ++j) {
                if (!ok[j]) continue;
                const double* v = x.data() + (b * seq + j) * stride + vo;
                double* gv = nx.grad.data() + (b * seq + j) * stride + vo;
                double s = 0.0;
                for (std::size_t t = 0; t < dh; ++t) {
                  s += go[t] * v[t];
                  gv[t] += pr[j] * go[t];
                }
                dp[j] = s;
                dot += pr[j] * s;
              }
              const double* q = x.data() + (b * seq + i) * stride + qo;
              double* gq = nx.grad.data() + (b * seq + i) * stride + qo;
              for (std::size_t j = 0; j <= i; ++j) {
                if (!ok[j]) continue;
                const double ds = pr[j] * (dp[j] - dot) * sc;
                const double* k = x.data() + (b * seq + j) * stride + ko;
                double* gk = nx.grad.data() + (b * seq + j) * stride + ko;
                for (std::size_t t = 0; t < dh; ++t) {
                  gq[t] += ds * k[t];
                  gk[t] += ds * q[t];
                }
              }
            }
          }
      });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout: p must be < 1");
  // Keep when the top 53 bits, read as a fraction, fall below 1 - p.
  const auto threshold = static_cast<std::uint64_t>((1.0 - p) * 9007199254740992.0);
  std::vector<double> mask(x.numel());
  const double s = 1.0 / (1.0 - p);
  for (auto& m : mask) m = (rng() >> 11) < threshold ? s : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

}  // namespace foldkd::ad
