#include <cmath>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "tpsalign/grad_check.hpp"
#include "tpsalign/linalg.hpp"
#include "tpsalign/rng.hpp"
#include "tpsalign/tensor.hpp"

using namespace tpsalign;

TEST_CASE("tensor shape and access") {
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.numel() == 6);
  t.at(1, 2) = 5.0;
  CHECK(t[5] == 5.0);
  t.reshape({3, 2});
  CHECK(t.at(2, 1) == 5.0);
  CHECK_THROWS_AS(t.reshape({4, 2}), ConfigError);

  Tensor f = Tensor::full({2, 2}, 1.5);
  CHECK(f.at(0, 0) == 1.5);
  CHECK(f.at(1, 1) == 1.5);

  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), ConfigError);
}

TEST_CASE("tensor finiteness guards") {
  Tensor t = Tensor::zeros({3});
  CHECK(t.all_finite());
  t[1] = std::nan("");
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_AS(t.ensure_finite("unit"), NumericError);
}

TEST_CASE("tensor dump round-trips 17 significant digits") {
  Tensor t = Tensor::from_values({2}, {0.1, 1.0 / 3.0});
  std::istringstream in(t.dump_string());
  std::string label;
  int64_t e;
  in >> label >> e;
  CHECK(label == "shape:");
  CHECK(e == 2);
  double a, b;
  in >> a >> b;
  CHECK(a == 0.1);
  CHECK(b == 1.0 / 3.0);
}

TEST_CASE("axpy and dot") {
  Tensor x = Tensor::from_values({3}, {1.0, 2.0, 3.0});
  Tensor y = Tensor::from_values({3}, {10.0, 20.0, 30.0});
  axpy(0.5, x, y);
  CHECK(y[0] == doctest::Approx(10.5));
  CHECK(y[2] == doctest::Approx(31.5));
  CHECK(dot(x, x) == doctest::Approx(14.0));
}

TEST_CASE("matmul variants agree with the naive triple loop") {
  Rng rng(7);
  const int64_t m = 5, k = 4, n = 6;
  std::vector<double> a(m * k), b(k * n);
  for (auto& v : a) v = rng.normal();
  for (auto& v : b) v = rng.normal();

  std::vector<double> want(m * n, 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      for (int64_t p = 0; p < k; ++p) want[i * n + j] += a[i * k + p] * b[p * n + j];

  std::vector<double> c(m * n, 1e9);
  matmul(a.data(), b.data(), c.data(), m, k, n);
  for (int64_t i = 0; i < m * n; ++i) CHECK(c[i] == doctest::Approx(want[i]));

  // A^T path: store A transposed (k x m) and ask for A^T * B.
  std::vector<double> at(k * m);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
  std::vector<double> c2(m * n, -3.0);
  matmul_tn(at.data(), b.data(), c2.data(), m, k, n);
  for (int64_t i = 0; i < m * n; ++i) CHECK(c2[i] == doctest::Approx(want[i]));

  // B^T path: store B transposed (n x k).
  std::vector<double> bt(n * k);
  for (int64_t p = 0; p < k; ++p)
    for (int64_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  std::vector<double> c3(m * n, 42.0);
  matmul_nt(a.data(), bt.data(), c3.data(), m, k, n);
  for (int64_t i = 0; i < m * n; ++i) CHECK(c3[i] == doctest::Approx(want[i]));

  // Accumulating forms add on top.
  matmul_acc(a.data(), b.data(), c.data(), m, k, n);
  for (int64_t i = 0; i < m * n; ++i) CHECK(c[i] == doctest::Approx(2.0 * want[i]));
}

TEST_CASE("solve_linear identity and diagonal") {
  Tensor eye = Tensor::zeros({3, 3});
  for (int64_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  Tensor b = Tensor::from_values({3, 1}, {4.0, -2.0, 9.0});
  Tensor x = solve_linear(eye, b);
  for (int64_t i = 0; i < 3; ++i) CHECK(x.at(i, 0) == doctest::Approx(b.at(i, 0)));

  Tensor diag = Tensor::zeros({3, 3});
  diag.at(0, 0) = 2.0;
  diag.at(1, 1) = -4.0;
  diag.at(2, 2) = 0.5;
  x = solve_linear(diag, b);
  CHECK(x.at(0, 0) == doctest::Approx(2.0));
  CHECK(x.at(1, 0) == doctest::Approx(0.5));
  CHECK(x.at(2, 0) == doctest::Approx(18.0));
}

TEST_CASE("solve_linear recovers a random solution") {
  Rng rng(123);
  const int64_t n = 10;
  Tensor a({n, n});
  for (int64_t i = 0; i < n * n; ++i) a[i] = rng.normal();
  // Diagonal boost keeps the sample well conditioned.
  for (int64_t i = 0; i < n; ++i) a.at(i, i) += 4.0;
  Tensor x_true({n, 2});
  for (int64_t i = 0; i < n * 2; ++i) x_true[i] = rng.uniform(-2.0, 2.0);
  Tensor b({n, 2});
  matmul(a.data(), x_true.data(), b.data(), n, n, 2);

  Tensor x = solve_linear(a, b);
  double err = 0.0;
  for (int64_t i = 0; i < n * 2; ++i) err = std::max(err, std::abs(x[i] - x_true[i]));
  CHECK(err < 1e-8);
}

TEST_CASE("solve_linear residual stays small on random systems") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(mix_seed(99, seed));
    const int64_t n = 8;
    Tensor a({n, n});
    for (int64_t i = 0; i < n * n; ++i) a[i] = rng.normal();
    for (int64_t i = 0; i < n; ++i) a.at(i, i) += 3.0;
    Tensor b({n, 1});
    for (int64_t i = 0; i < n; ++i) b[i] = rng.normal();
    Tensor x = solve_linear(a, b);
    Tensor r({n, 1});
    matmul(a.data(), x.data(), r.data(), n, n, 1);
    for (int64_t i = 0; i < n; ++i) CHECK(std::abs(r[i] - b[i]) < 1e-9);
  }
}

TEST_CASE("singular system is rejected") {
  Tensor a = Tensor::from_values({2, 2}, {1.0, 2.0, 2.0, 4.0});
  Tensor b = Tensor::from_values({2, 1}, {1.0, 1.0});
  CHECK_THROWS_AS(solve_linear(a, b), NumericError);
}

TEST_CASE("LuFactor reuses one factorization for many right-hand sides") {
  Rng rng(5);
  const int64_t n = 6;
  std::vector<double> a(n * n);
  for (auto& v : a) v = rng.normal();
  for (int64_t i = 0; i < n; ++i) a[i * n + i] += 3.0;
  LuFactor lu(a.data(), n);
  CHECK(lu.dim() == n);
  for (int rep = 0; rep < 3; ++rep) {
    std::vector<double> b(n), x(n), r(n, 0.0);
    for (auto& v : b) v = rng.uniform(-1.0, 1.0);
    lu.solve(b.data(), x.data(), 1);
    matmul(a.data(), x.data(), r.data(), n, n, 1);
    for (int64_t i = 0; i < n; ++i) CHECK(r[i] == doctest::Approx(b[i]).epsilon(1e-10));
  }
}

TEST_CASE("finite_diff_check validates simple closed forms") {
  // f(x) = sum x_i^2, grad = 2x.
  std::vector<double> pt = {0.5, -1.0, 2.0};
  auto f = [](const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return s;
  };
  std::vector<double> g = {1.0, -2.0, 4.0};
  GradReport rep = finite_diff_check(f, pt, g, 1e-5, 1e-6, "sumsq");
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-8);

  // Constant function has zero gradient.
  auto c = [](const std::vector<double>&) { return 3.0; };
  std::vector<double> zg = {0.0, 0.0, 0.0};
  CHECK(finite_diff_check(c, pt, zg, 1e-5, 1e-9, "const").pass);

  // f = sum x log x on positive inputs, grad = 1 + log x.
  std::vector<double> pos = {0.3, 1.7, 2.2};
  auto xlogx = [](const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * std::log(v);
    return s;
  };
  std::vector<double> gl(3);
  for (int i = 0; i < 3; ++i) gl[i] = 1.0 + std::log(pos[i]);
  CHECK(finite_diff_check(xlogx, pos, gl, 1e-6, 1e-7, "xlogx").pass);

  // A wrong gradient must fail.
  std::vector<double> bad = {1.0, -2.0, 4.5};
  CHECK_FALSE(finite_diff_check(f, pt, bad, 1e-5, 1e-6, "bad").pass);
}

TEST_CASE("finite_diff_check rejects invalid arguments") {
  auto f = [](const std::vector<double>& x) { return x[0]; };
  std::vector<double> pt = {1.0};
  std::vector<double> g = {1.0};
  CHECK_THROWS_AS(finite_diff_check(f, pt, g, 0.0, 1e-6), ConfigError);
  std::vector<double> g2 = {1.0, 0.0};
  CHECK_THROWS_AS(finite_diff_check(f, pt, g2, 1e-5, 1e-6), ConfigError);
}

TEST_CASE("rng streams are deterministic and seed-separated") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const double va = a.uniform();
    CHECK(va == b.uniform());
    CHECK(va >= 0.0);
    CHECK(va < 1.0);
  }
  bool differs = false;
  Rng a2(42);
  for (int i = 0; i < 16; ++i) differs |= (a2.uniform() != c.uniform());
  CHECK(differs);

  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
  CHECK(mix_seed(1, 2) == mix_seed(1, 2));
}

TEST_CASE("rng normal moments are sane") {
  Rng rng(2024);
  const int n = 20000;
  double mean = 0.0, m2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    mean += v;
    m2 += v * v;
  }
  mean /= n;
  m2 /= n;
  CHECK(std::abs(mean) < 0.03);
  CHECK(std::abs(m2 - 1.0) < 0.05);
}

TEST_CASE("rng shuffle is a permutation") {
  Rng rng(9);
  std::vector<int> xs(17);
  for (int i = 0; i < 17; ++i) xs[i] = i;
  rng.shuffle(xs);
  std::vector<bool> seen(17, false);
  for (int v : xs) {
    CHECK(!seen[v]);
    seen[v] = true;
  }
}
