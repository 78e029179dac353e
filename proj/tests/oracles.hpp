#pragma once

// Reference implementations written with plain loops over std::vector<double>. They share no
// code with the library and exist only to cross-check it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

// Dense Sinkhorn, uniform marginals, run until the max marginal violation is below tol.
inline Matrix sinkhorn(const Matrix& cost, double lambda, double tol, int max_iters) {
  const std::size_t n = cost.size(), m = cost[0].size();
  Matrix k(n, std::vector<double>(m));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) k[i][j] = std::exp(-lambda * cost[i][j]);
  std::vector<double> u(n, 1.0), v(m, 1.0);
  const double r = 1.0 / n, c = 1.0 / m;
  Matrix plan(n, std::vector<double>(m));
  for (int it = 0; it < max_iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < m; ++j) s += k[i][j] * v[j];
      u[i] = r / s;
    }
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += k[i][j] * u[i];
      v[j] = c / s;
    }
    double worst = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < m; ++j) s += u[i] * k[i][j] * v[j];
      worst = std::max(worst, std::abs(s - r));
    }
    if (worst < tol) break;
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) plan[i][j] = u[i] * k[i][j] * v[j];
  return plan;
}

// out = softmax(q k^T / sqrt(dk)) v with q = x'' wq, k = x' wk, v = x' wv for one batch item.
inline Matrix attention(const Matrix& xq, const Matrix& xc, const Matrix& wq, const Matrix& wk, const Matrix& wv,
                        Matrix* weights = nullptr) {
  auto mul = [](const Matrix& a, const Matrix& b) {
    Matrix o(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t t = 0; t < b.size(); ++t)
        for (std::size_t j = 0; j < b[0].size(); ++j) o[i][j] += a[i][t] * b[t][j];
    return o;
  };
  const auto q = mul(xq, wq), k = mul(xc, wk), v = mul(xc, wv);
  const double scale = std::sqrt(static_cast<double>(wk[0].size()));
  const std::size_t n = q.size();
  Matrix w(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double d = 0;
      for (std::size_t t = 0; t < q[0].size(); ++t) d += q[i][t] * k[j][t];
      w[i][j] = d / scale;
      mx = std::max(mx, w[i][j]);
    }
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (w[i][j] = std::exp(w[i][j] - mx));
    for (std::size_t j = 0; j < n; ++j) w[i][j] /= z;
  }
  if (weights) *weights = w;
  return mul(w, v);
}

// Pixel-counting IoU; both empty -> 1.
inline double iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  long inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] && b[i]) ++inter;
    if (a[i] || b[i]) ++uni;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline Matrix random_matrix(std::mt19937_64& rng, std::size_t n, std::size_t m, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Matrix a(n, std::vector<double>(m));
  for (auto& row : a)
    for (auto& x : row) x = d(rng);
  return a;
}

}  // namespace oracle
