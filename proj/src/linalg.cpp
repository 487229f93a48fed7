#include "tpsalign/linalg.hpp"

#include <cmath>
#include <cstring>

#include "tpsalign/common.hpp"

namespace tpsalign {

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  std::memset(c, 0, sizeof(double) * static_cast<size_t>(m * n));
  matmul_acc(a, b, c, m, k, n);
}

void matmul_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  std::memset(c, 0, sizeof(double) * static_cast<size_t>(m * n));
  matmul_tn_acc(a, b, c, m, k, n);
}

void matmul_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const double api = ap[i];
      double* ci = c + i * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  std::memset(c, 0, sizeof(double) * static_cast<size_t>(m * n));
  matmul_nt_acc(a, b, c, m, k, n);
}

void matmul_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

LuFactor::LuFactor(const double* a, int64_t n) : n_(n), lu_(a, a + n * n), perm_(n) {
  double max_abs = 0.0;
  for (int64_t i = 0; i < n * n; ++i) max_abs = std::max(max_abs, std::fabs(lu_[i]));
  const double pivot_floor = 1e-12 * std::max(max_abs, 1e-300);

  for (int64_t i = 0; i < n; ++i) perm_[i] = i;

  for (int64_t col = 0; col < n; ++col) {
    int64_t piv = col;
    double piv_abs = std::fabs(lu_[col * n + col]);
    for (int64_t r = col + 1; r < n; ++r) {
      const double cand = std::fabs(lu_[r * n + col]);
      if (cand > piv_abs) {
        piv_abs = cand;
        piv = r;
      }
    }
    if (!(piv_abs >= pivot_floor))
      throw NumericError("singular system: pivot below threshold in LU factorization");
    if (piv != col) {
      for (int64_t j = 0; j < n; ++j) std::swap(lu_[col * n + j], lu_[piv * n + j]);
      std::swap(perm_[col], perm_[piv]);
    }
    const double inv_piv = 1.0 / lu_[col * n + col];
    for (int64_t r = col + 1; r < n; ++r) {
      const double factor = lu_[r * n + col] * inv_piv;
      lu_[r * n + col] = factor;
      if (factor != 0.0)
        for (int64_t j = col + 1; j < n; ++j) lu_[r * n + j] -= factor * lu_[col * n + j];
    }
  }
}

void LuFactor::solve(const double* b, double* x, int64_t m) const {
  const int64_t n = n_;
  // Apply the row permutation to B.
  for (int64_t i = 0; i < n; ++i)
    std::memcpy(x + i * m, b + perm_[i] * m, sizeof(double) * static_cast<size_t>(m));
  // Forward substitution with unit-diagonal L.
  for (int64_t i = 0; i < n; ++i)
    for (int64_t p = 0; p < i; ++p) {
      const double l = lu_[i * n + p];
      if (l != 0.0)
        for (int64_t j = 0; j < m; ++j) x[i * m + j] -= l * x[p * m + j];
    }
  // Back substitution with U.
  for (int64_t i = n - 1; i >= 0; --i) {
    for (int64_t p = i + 1; p < n; ++p) {
      const double u = lu_[i * n + p];
      if (u != 0.0)
        for (int64_t j = 0; j < m; ++j) x[i * m + j] -= u * x[p * m + j];
    }
    const double inv = 1.0 / lu_[i * n + i];
    for (int64_t j = 0; j < m; ++j) x[i * m + j] *= inv;
  }
}

void transpose(const double* a, double* out, int64_t m, int64_t n) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
}

Tensor solve_linear(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.extent(0) != a.extent(1)) throw ConfigError("solve_linear: A must be square");
  const int64_t n = a.extent(0);
  if (b.rank() != 2 || b.extent(0) != n) throw ConfigError("solve_linear: B row count must equal n");
  const int64_t m = b.extent(1);
  LuFactor lu(a.data(), n);
  Tensor x({n, m});
  lu.solve(b.data(), x.data(), m);
  x.ensure_finite("solve_linear result");
  return x;
}

}  // namespace tpsalign
