#pragma once

#include <vector>

#include "tpsalign/tensor.hpp"

namespace tpsalign {

// C(m x n) = A(m x k) * B(k x n), row-major raw buffers. C is overwritten.
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

// C(m x n) += A(m x k) * B(k x n).
void matmul_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

// C(m x n) = A^T(k x m) * B(k x n): A is stored k x m.
void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void matmul_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

// C(m x n) = A(m x k) * B^T(n x k): B is stored n x k.
void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void matmul_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

// OUT(n x m) = A^T where A is stored m x n.
void transpose(const double* a, double* out, int64_t m, int64_t n);

// LU factorization with partial pivoting of a square matrix, reusable for
// repeated solves against the same system. Throws NumericError at
// factorization time when a pivot magnitude falls below
// 1e-12 * max-abs entry of the input matrix.
class LuFactor {
 public:
  LuFactor(const double* a, int64_t n);

  int64_t dim() const { return n_; }

  // Solves A X = B for X (n x m). B and X are row-major; X is overwritten.
  void solve(const double* b, double* x, int64_t m) const;

 private:
  int64_t n_ = 0;
  std::vector<double> lu_;
  std::vector<int64_t> perm_;
};

// Solves A X = B with partial pivoting. A is n x n, B is n x m.
Tensor solve_linear(const Tensor& a, const Tensor& b);

}  // namespace tpsalign
