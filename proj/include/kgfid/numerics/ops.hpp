#pragma once

// Differentiable primitives. Every op validates shapes, rejects non-finite
// results and, when grad mode is on, records its backward rule on the tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "kgfid/numerics/flops.hpp"
#include "kgfid/numerics/tensor.hpp"

namespace kgfid::ops {

namespace detail {

using kgfid::detail::make_result;
using kgfid::detail::Node;
using NodePtr = std::shared_ptr<Node>;

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

/// c[m,n] = a[m,k] * b[k,n]. Each output element sums its k products in
/// ascending order starting from zero, independent of m, so a row's result
/// does not depend on which other rows share the batch.
inline void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

/// Accumulating variant: c += a * b.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

inline std::vector<double> transposed(const double* a, std::size_t m, std::size_t n) {
  std::vector<double> t(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  return t;
}

template <typename F>
Tensor unary(const Tensor& x, F f, const char* op, std::function<void(Node&)> bw) {
  std::vector<double> out(x.size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result(x.shape(), std::move(out), {x.node()}, std::move(bw), op);
}

}  // namespace detail

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return detail::make_result(
      std::move(shape), x.values(), {x.node()},
      [](detail::Node& self) {
        auto& g = self.inputs[0]->grad;
        if (g.empty()) return;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      },
      "reshape");
}

inline Tensor transpose(const Tensor& x) {
  detail::require_matrix(x, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  return detail::make_result(
      {n, m}, detail::transposed(x.data().data(), m, n), {x.node()},
      [m, n](detail::Node& self) {
        auto& g = self.inputs[0]->grad;
        if (g.empty()) return;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
      },
      "transpose");
}

/// [m,k] x [k,n] -> [m,n]; counts 2*m*n*k FLOPs under the current scope.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  detail::gemm(a.data().data(), b.data().data(), out.data(), m, k, n);
  count_flops(2ULL * m * n * k);
  return detail::make_result(
      {m, n}, std::move(out), {a.node(), b.node()},
      [m, k, n](detail::Node& self) {
        auto& an = *self.inputs[0];
        auto& bn = *self.inputs[1];
        if (an.requires_grad) {
          // dA = dC * B^T
          auto bt = detail::transposed(bn.value.data(), k, n);
          detail::gemm_acc(self.grad.data(), bt.data(), an.grad.data(), m, n, k);
        }
        if (bn.requires_grad) {
          // dB = A^T * dC
          auto at = detail::transposed(an.value.data(), m, k);
          detail::gemm_acc(at.data(), self.grad.data(), bn.grad.data(), k, m, n);
        }
      },
      "matmul");
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(
      a.shape(), std::move(out), {a.node(), b.node()},
      [](detail::Node& self) {
        for (auto& in : self.inputs) {
          if (!in->requires_grad) continue;
          for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
        }
      },
      "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(
      a.shape(), std::move(out), {a.node(), b.node()},
      [](detail::Node& self) {
        auto& an = *self.inputs[0];
        auto& bn = *self.inputs[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (an.requires_grad) an.grad[i] += self.grad[i];
          if (bn.requires_grad) bn.grad[i] -= self.grad[i];
        }
      },
      "sub");
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(
      a.shape(), std::move(out), {a.node(), b.node()},
      [](detail::Node& self) {
        auto& an = *self.inputs[0];
        auto& bn = *self.inputs[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (an.requires_grad) an.grad[i] += self.grad[i] * bn.value[i];
          if (bn.requires_grad) bn.grad[i] += self.grad[i] * an.value[i];
        }
      },
      "mul");
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary(
      a, [s](double v) { return v * s; }, "scale",
      [s](detail::Node& self) {
        auto& g = self.inputs[0]->grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
      });
}

/// x[m,n] + b[n] broadcast over rows.
inline Tensor add_row(const Tensor& x, const Tensor& b) {
  const std::size_t n = x.cols(), m = x.rows();
  if (b.size() != n) {
    throw ShapeError("add_row: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + b[j];
  return detail::make_result(
      x.shape(), std::move(out), {x.node(), b.node()},
      [m, n](detail::Node& self) {
        auto& xn = *self.inputs[0];
        auto& bn = *self.inputs[1];
        if (xn.requires_grad)
          for (std::size_t i = 0; i < m * n; ++i) xn.grad[i] += self.grad[i];
        if (bn.requires_grad)
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) bn.grad[j] += self.grad[i * n + j];
      },
      "add_row");
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result(
      {1}, {s}, {x.node()},
      [](detail::Node& self) {
        auto& g = self.inputs[0]->grad;
        for (auto& v : g) v += self.grad[0];
      },
      "sum");
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, "relu",
      [](detail::Node& self) {
        auto& in = *self.inputs[0];
        for (std::size_t i = 0; i < in.grad.size(); ++i)
          if (in.value[i] > 0.0) in.grad[i] += self.grad[i];
      });
}

inline Tensor elu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : std::expm1(v); }, "elu",
      [](detail::Node& self) {
        auto& in = *self.inputs[0];
        for (std::size_t i = 0; i < in.grad.size(); ++i)
          in.grad[i] += self.grad[i] * (in.value[i] > 0.0 ? 1.0 : std::exp(in.value[i]));
      });
}

inline Tensor leaky_relu(const Tensor& x, double slope) {
  return detail::unary(
      x, [slope](double v) { return v > 0.0 ? v : slope * v; }, "leaky_relu",
      [slope](detail::Node& self) {
        auto& in = *self.inputs[0];
        for (std::size_t i = 0; i < in.grad.size(); ++i)
          in.grad[i] += self.grad[i] * (in.value[i] > 0.0 ? 1.0 : slope);
      });
}

namespace detail {

/// Row softmax with max subtraction; `mask` (optional, row-major like x)
/// zeroes disallowed entries. Throws MaskError on an all-masked row.
inline std::vector<double> softmax_forward(std::span<const double> x, std::size_t m, std::size_t n,
                                           const std::vector<std::uint8_t>* mask) {
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x.data() + i * n;
    double* oi = out.data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!mask || (*mask)[i * n + j]) mx = std::max(mx, xi[j]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw MaskError("softmax row " + std::to_string(i) + " has no unmasked entry");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !(*mask)[i * n + j]) continue;
      oi[j] = std::exp(xi[j] - mx);
      z += oi[j];
    }
    for (std::size_t j = 0; j < n; ++j) oi[j] /= z;
  }
  return out;
}

inline void softmax_backward(Node& self, std::size_t m, std::size_t n) {
  auto& in = *self.inputs[0];
  for (std::size_t i = 0; i < m; ++i) {
    const double* p = self.value.data() + i * n;
    const double* g = self.grad.data() + i * n;
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
    for (std::size_t j = 0; j < n; ++j) in.grad[i * n + j] += p[j] * (g[j] - dot);
  }
}

}  // namespace detail

/// Softmax over the last dimension.
inline Tensor softmax_rows(const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  return detail::make_result(x.shape(), detail::softmax_forward(x.data(), m, n, nullptr),
                             {x.node()},
                             [m, n](detail::Node& self) { detail::softmax_backward(self, m, n); },
                             "softmax_rows");
}

/// Softmax over allowed entries only; disallowed entries are exactly zero.
inline Tensor masked_softmax_rows(const Tensor& x, const std::vector<std::uint8_t>& mask) {
  const std::size_t m = x.rows(), n = x.cols();
  if (mask.size() != x.size()) throw ShapeError("masked_softmax_rows: mask size mismatch");
  return detail::make_result(x.shape(), detail::softmax_forward(x.data(), m, n, &mask),
                             {x.node()},
                             [m, n](detail::Node& self) { detail::softmax_backward(self, m, n); },
                             "masked_softmax_rows");
}

inline Tensor log_softmax_rows(const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x.data().data() + i * n;
    const double mx = *std::max_element(xi, xi + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xi[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xi[j] - lz;
  }
  return detail::make_result(
      x.shape(), std::move(out), {x.node()},
      [m, n](detail::Node& self) {
        auto& in = *self.inputs[0];
        for (std::size_t i = 0; i < m; ++i) {
          double gs = 0.0;
          for (std::size_t j = 0; j < n; ++j) gs += self.grad[i * n + j];
          for (std::size_t j = 0; j < n; ++j)
            in.grad[i * n + j] += self.grad[i * n + j] - std::exp(self.value[i * n + j]) * gs;
        }
      },
      "log_softmax_rows");
}

inline constexpr double kLayerNormEps = 1e-6;

/// Normalizes each position over the last dimension H, then applies
/// gain and bias (both [H]).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = kLayerNormEps) {
  const std::size_t h = x.cols(), m = x.rows();
  if (gain.size() != h || bias.size() != h) {
    throw ShapeError("layer_norm: width " + std::to_string(h) + " vs gain " +
                     shape_str(gain.shape()) + ", bias " + shape_str(bias.shape()));
  }
  std::vector<double> out(x.size()), xhat(x.size()), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x.data().data() + i * h;
    double mu = 0.0;
    for (std::size_t j = 0; j < h; ++j) mu += xi[j];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(h);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < h; ++j) {
      xhat[i * h + j] = (xi[j] - mu) * inv_std[i];
      out[i * h + j] = gain[j] * xhat[i * h + j] + bias[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [m, h, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& xn = *self.inputs[0];
        auto& gn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        std::vector<double> dxhat(h);
        for (std::size_t i = 0; i < m; ++i) {
          const double* dy = self.grad.data() + i * h;
          const double* xh = xhat.data() + i * h;
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < h; ++j) {
            dxhat[j] = dy[j] * gn.value[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
            if (gn.requires_grad) gn.grad[j] += dy[j] * xh[j];
            if (bn.requires_grad) bn.grad[j] += dy[j];
          }
          mean_d /= static_cast<double>(h);
          mean_dx /= static_cast<double>(h);
          if (xn.requires_grad)
            for (std::size_t j = 0; j < h; ++j)
              xn.grad[i * h + j] += inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
      },
      "layer_norm");
}

/// -sum(target * log_softmax(logits)). `target` must be a distribution.
inline Tensor cross_entropy(const Tensor& logits, const Tensor& target) {
  if (logits.size() != target.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  double tsum = 0.0;
  for (double t : target.data()) {
    if (t < 0.0) throw NumericError("cross_entropy: target has a negative entry");
    tsum += t;
  }
  if (std::abs(tsum - 1.0) > 1e-9) {
    throw NumericError("cross_entropy: target sums to " + std::to_string(tsum) + ", expected 1");
  }
  const std::size_t n = logits.size();
  const double mx = *std::max_element(logits.data().begin(), logits.data().end());
  double z = 0.0;
  for (double v : logits.data()) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (target[i] != 0.0) loss -= target[i] * (logits[i] - lz);
  return detail::make_result(
      {1}, {loss}, {logits.node(), target.node()},
      [n, lz, tsum](detail::Node& self) {
        auto& ln = *self.inputs[0];
        auto& tn = *self.inputs[1];
        const double g = self.grad[0];
        for (std::size_t i = 0; i < n; ++i) {
          if (ln.requires_grad) ln.grad[i] += g * (std::exp(ln.value[i] - lz) * tsum - tn.value[i]);
          if (tn.requires_grad) tn.grad[i] -= g * (ln.value[i] - lz);
        }
      },
      "cross_entropy");
}

/// Mean over rows of -log softmax(logits[r])[targets[r]].
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& targets) {
  const std::size_t m = logits.rows(), n = logits.cols();
  if (targets.size() != m) throw ShapeError("cross_entropy_rows: one target per row required");
  std::vector<double> probs(m * n);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= n) throw ShapeError("cross_entropy_rows: target id out of range");
    const double* xi = logits.data().data() + i * n;
    const double mx = *std::max_element(xi, xi + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xi[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] = std::exp(xi[j] - lz);
    loss -= xi[targets[i]] - lz;
  }
  loss /= static_cast<double>(m);
  return detail::make_result(
      {1}, {loss}, {logits.node()},
      [m, n, targets, probs = std::move(probs)](detail::Node& self) {
        auto& in = *self.inputs[0];
        const double g = self.grad[0] / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j)
            in.grad[i * n + j] += g * (probs[i * n + j] - (j == targets[i] ? 1.0 : 0.0));
      },
      "cross_entropy_rows");
}

/// Rows of `table` [V,H] selected by `ids` -> [ids.size(), H].
inline Tensor embedding(const Tensor& table, const std::vector<std::size_t>& ids) {
  detail::require_matrix(table, "embedding");
  const std::size_t v = table.dim(0), h = table.dim(1);
  std::vector<double> out(ids.size() * h);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= v) throw ShapeError("embedding id " + std::to_string(ids[r]) + " out of range");
    std::copy_n(table.data().data() + ids[r] * h, h, out.data() + r * h);
  }
  return detail::make_result(
      {ids.size(), h}, std::move(out), {table.node()},
      [ids, h](detail::Node& self) {
        auto& g = self.inputs[0]->grad;
        for (std::size_t r = 0; r < ids.size(); ++r)
          for (std::size_t j = 0; j < h; ++j) g[ids[r] * h + j] += self.grad[r * h + j];
      },
      "embedding");
}

/// Rows of a matrix by index (repeats allowed).
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  detail::require_matrix(x, "gather_rows");
  const std::size_t m = x.dim(0);
  for (auto r : rows)
    if (r >= m) throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range");
  return embedding(x, rows);
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<std::shared_ptr<detail::Node>> inputs;
  for (const auto& p : parts) {
    if (p.cols() != n) throw ShapeError("concat_rows: column mismatch");
    m += p.rows();
    inputs.push_back(p.node());
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_result(
      {m, n}, std::move(out), std::move(inputs),
      [](detail::Node& self) {
        std::size_t off = 0;
        for (auto& in : self.inputs) {
          if (in->requires_grad)
            for (std::size_t i = 0; i < in->value.size(); ++i) in->grad[i] += self.grad[off + i];
          off += in->value.size();
        }
      },
      "concat_rows");
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::shared_ptr<detail::Node>> inputs;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rows() != m) throw ShapeError("concat_cols: row mismatch");
    n += p.cols();
    widths.push_back(p.cols());
    inputs.push_back(p.node());
  }
  std::vector<double> out(m * n);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p.data().data() + i * w, w, out.data() + i * n + c0);
    c0 += w;
  }
  return detail::make_result(
      {m, n}, std::move(out), std::move(inputs),
      [m, n, widths](detail::Node& self) {
        std::size_t c = 0;
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
          auto& in = *self.inputs[k];
          const std::size_t w = widths[k];
          if (in.requires_grad)
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < w; ++j) in.grad[i * w + j] += self.grad[i * n + c + j];
          c += w;
        }
      },
      "concat_cols");
}

/// out[i][j] = col[i] + row[j], for vectors of length m and n.
inline Tensor outer_add(const Tensor& col, const Tensor& row) {
  const std::size_t m = col.size(), n = row.size();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = col[i] + row[j];
  return detail::make_result(
      {m, n}, std::move(out), {col.node(), row.node()},
      [m, n](detail::Node& self) {
        auto& cn = *self.inputs[0];
        auto& rn = *self.inputs[1];
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            if (cn.requires_grad) cn.grad[i] += self.grad[i * n + j];
            if (rn.requires_grad) rn.grad[j] += self.grad[i * n + j];
          }
      },
      "outer_add");
}

/// Row i of a sparse pattern lists cols[offsets[i] .. offsets[i+1]).
struct SparseRows {
  std::vector<std::size_t> offsets{0};
  std::vector<std::uint32_t> cols;

  std::size_t rows() const { return offsets.size() - 1; }
};

/// out_i = sum_j alpha_ij z_j over the pattern row of i, with
/// alpha_i = softmax_j(leaky_relu(dst_i + src_j)). Equals the dense masked
/// form with O(edges) work.
inline Tensor graph_attention(const Tensor& z, const Tensor& src, const Tensor& dst, const SparseRows& pattern,
                              double negative_slope) {
  detail::require_matrix(z, "graph_attention");
  const std::size_t n = z.rows(), d = z.cols();
  if (src.size() != n || dst.size() != n || pattern.rows() != n) {
    throw ShapeError("graph_attention: " + std::to_string(n) + " nodes vs src " + shape_str(src.shape()) +
                     ", dst " + shape_str(dst.shape()) + ", pattern rows " + std::to_string(pattern.rows()));
  }
  const auto& off = pattern.offsets;
  const auto& cols = pattern.cols;
  for (std::size_t i = 0; i < n; ++i) {
    if (off[i + 1] <= off[i]) throw ShapeError("graph_attention: node " + std::to_string(i) + " has no inputs");
  }
  std::vector<double> alpha(cols.size()), pre(cols.size()), out(n * d, 0.0);
  const auto zv = z.data();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t e = off[i]; e < off[i + 1]; ++e) {
      pre[e] = dst[i] + src[cols[e]];
      const double l = pre[e] > 0.0 ? pre[e] : negative_slope * pre[e];
      alpha[e] = l;
      mx = std::max(mx, l);
    }
    double sum = 0.0;
    for (std::size_t e = off[i]; e < off[i + 1]; ++e) sum += alpha[e] = std::exp(alpha[e] - mx);
    for (std::size_t e = off[i]; e < off[i + 1]; ++e) {
      alpha[e] /= sum;
      const double* zj = zv.data() + cols[e] * d;
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] += alpha[e] * zj[c];
    }
  }
  count_flops(2ULL * cols.size() * d);
  return detail::make_result(
      {n, d}, std::move(out), {z.node(), src.node(), dst.node()},
      [n, d, pattern, alpha = std::move(alpha), pre = std::move(pre), negative_slope](detail::Node& self) {
        auto& zn = *self.inputs[0];
        auto& sn = *self.inputs[1];
        auto& dn = *self.inputs[2];
        const auto& off = pattern.offsets;
        const auto& cols = pattern.cols;
        std::vector<double> dalpha(cols.size());
        for (std::size_t i = 0; i < n; ++i) {
          const double* gi = self.grad.data() + i * d;
          double dot = 0.0;
          for (std::size_t e = off[i]; e < off[i + 1]; ++e) {
            const double* zj = zn.value.data() + cols[e] * d;
            double a = 0.0;
            for (std::size_t c = 0; c < d; ++c) a += gi[c] * zj[c];
            dalpha[e] = a;
            dot += alpha[e] * a;
            if (zn.requires_grad) {
              double* gz = zn.grad.data() + cols[e] * d;
              for (std::size_t c = 0; c < d; ++c) gz[c] += alpha[e] * gi[c];
            }
          }
          for (std::size_t e = off[i]; e < off[i + 1]; ++e) {
            const double g = alpha[e] * (dalpha[e] - dot) * (pre[e] > 0.0 ? 1.0 : negative_slope);
            if (dn.requires_grad) dn.grad[i] += g;
            if (sn.requires_grad) sn.grad[cols[e]] += g;
          }
        }
      },
      "graph_attention");
}

/// Attention visibility for `batch` independent blocks of [tq, tk].
/// allowed[(b * tq + i) * tk + j] says whether query i of block b may see key j.
struct AttentionMask {
  std::size_t batch = 1;
  std::size_t tq = 0;
  std::size_t tk = 0;
  std::vector<std::uint8_t> allowed;

  static AttentionMask all(std::size_t batch, std::size_t tq, std::size_t tk) {
    return {batch, tq, tk, std::vector<std::uint8_t>(batch * tq * tk, 1)};
  }

  /// Self-attention over padded sequences: key j visible iff key_valid[b*t+j].
  static AttentionMask key_padding(std::size_t batch, std::size_t t,
                                   const std::vector<std::uint8_t>& key_valid) {
    return cross(batch, t, t, key_valid);
  }

  static AttentionMask cross(std::size_t batch, std::size_t tq, std::size_t tk,
                             const std::vector<std::uint8_t>& key_valid) {
    if (key_valid.size() != batch * tk) throw ShapeError("attention mask: key_valid size mismatch");
    AttentionMask m{batch, tq, tk, std::vector<std::uint8_t>(batch * tq * tk)};
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < tq; ++i)
        for (std::size_t j = 0; j < tk; ++j)
          m.allowed[(b * tq + i) * tk + j] = key_valid[b * tk + j];
    return m;
  }

  static AttentionMask causal(std::size_t t) {
    AttentionMask m{1, t, t, std::vector<std::uint8_t>(t * t, 0)};
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j <= i; ++j) m.allowed[i * t + j] = 1;
    return m;
  }

  bool operator()(std::size_t b, std::size_t i, std::size_t j) const {
    return allowed[(b * tq + i) * tk + j] != 0;
  }
};

/// Scaled dot-product attention split into `heads` heads, computed
/// independently for each of mask.batch blocks. q: [batch*tq, H],
/// k and v: [batch*tk, H]. Masked keys get exactly zero weight; a query row
/// with no visible key raises MaskError. Counts 4*tq*tk*H FLOPs per block
/// (the QK^T and PV products) as attention.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                        const AttentionMask& mask) {
  detail::require_matrix(q, "attention");
  detail::require_matrix(k, "attention");
  detail::require_matrix(v, "attention");
  const std::size_t B = mask.batch, tq = mask.tq, tk = mask.tk, h = q.dim(1);
  if (heads == 0 || h % heads != 0) {
    throw ShapeError("attention: head count " + std::to_string(heads) + " does not divide width " +
                     std::to_string(h));
  }
  if (q.dim(0) != B * tq || k.dim(0) != B * tk || v.dim(0) != B * tk || k.dim(1) != h ||
      v.dim(1) != h) {
    throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                     ", v " + shape_str(v.shape()) + " incompatible with mask blocks");
  }
  if (mask.allowed.size() != B * tq * tk) throw ShapeError("attention: mask size mismatch");
  for (std::size_t r = 0; r < B * tq; ++r) {
    const auto* row = mask.allowed.data() + r * tk;
    if (std::none_of(row, row + tk, [](std::uint8_t a) { return a != 0; })) {
      throw MaskError("attention: query row " + std::to_string(r) + " has every key masked");
    }
  }
  const std::size_t dh = h / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> probs(B * heads * tq * tk, 0.0);
  std::vector<double> out(B * tq * h, 0.0);
  std::vector<double> srow(tk);
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t c0 = hd * dh;
      for (std::size_t i = 0; i < tq; ++i) {
        const double* qi = Q + (b * tq + i) * h + c0;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < tk; ++j) {
          if (!mask(b, i, j)) continue;
          const double* kj = K + (b * tk + j) * h + c0;
          double s = 0.0;
          for (std::size_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
          srow[j] = s * sc;
          mx = std::max(mx, srow[j]);
        }
        double* p = probs.data() + ((b * heads + hd) * tq + i) * tk;
        double z = 0.0;
        for (std::size_t j = 0; j < tk; ++j) {
          if (!mask(b, i, j)) continue;
          p[j] = std::exp(srow[j] - mx);
          z += p[j];
        }
        double* oi = out.data() + (b * tq + i) * h + c0;
        for (std::size_t j = 0; j < tk; ++j) {
          if (p[j] == 0.0) continue;
          p[j] /= z;
          const double* vj = V + (b * tk + j) * h + c0;
          for (std::size_t d = 0; d < dh; ++d) oi[d] += p[j] * vj[d];
        }
      }
    }
  }
  count_flops(FlopKind::kAttention, 4ULL * B * tq * tk * h);
  return detail::make_result(
      {B * tq, h}, std::move(out), {q.node(), k.node(), v.node()},
      [B, tq, tk, h, heads, dh, sc, probs = std::move(probs)](detail::Node& self) {
        auto& qn = *self.inputs[0];
        auto& kn = *self.inputs[1];
        auto& vn = *self.inputs[2];
        std::vector<double> dp(tk), ds(tk);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t hd = 0; hd < heads; ++hd) {
            const std::size_t c0 = hd * dh;
            for (std::size_t i = 0; i < tq; ++i) {
              const double* p = probs.data() + ((b * heads + hd) * tq + i) * tk;
              const double* go = self.grad.data() + (b * tq + i) * h + c0;
              double dot = 0.0;
              for (std::size_t j = 0; j < tk; ++j) {
                if (p[j] == 0.0) {
                  dp[j] = 0.0;
                  continue;
                }
                const std::size_t kr = (b * tk + j) * h + c0;
                double s = 0.0;
                for (std::size_t d = 0; d < dh; ++d) s += go[d] * vn.value[kr + d];
                dp[j] = s;
                dot += p[j] * s;
                if (vn.requires_grad)
                  for (std::size_t d = 0; d < dh; ++d) vn.grad[kr + d] += p[j] * go[d];
              }
              const std::size_t qr = (b * tq + i) * h + c0;
              for (std::size_t j = 0; j < tk; ++j) {
                if (p[j] == 0.0) continue;
                const double dsj = p[j] * (dp[j] - dot) * sc;
                const std::size_t kr = (b * tk + j) * h + c0;
                if (qn.requires_grad)
                  for (std::size_t d = 0; d < dh; ++d) qn.grad[qr + d] += dsj * kn.value[kr + d];
                if (kn.requires_grad)
                  for (std::size_t d = 0; d < dh; ++d) kn.grad[kr + d] += dsj * qn.value[qr + d];
              }
            }
          }
        }
      },
      "attention");
}

}  // namespace kgfid::ops
