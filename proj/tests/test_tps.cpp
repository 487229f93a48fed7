#include <array>
#include <cmath>
#include <utility>
#include <vector>

#include "doctest.h"
#include "tpsalign/grad_check.hpp"
#include "tpsalign/rng.hpp"
#include "tpsalign/tps.hpp"

using namespace tpsalign;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int64_t> shape, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Random control configuration with a minimum pairwise separation, so the
// interpolation system stays comfortably non-degenerate.
Tensor random_separated_points(Rng& rng, int64_t k, double min_dist = 0.2) {
  Tensor pts({k, 2});
  for (int64_t i = 0; i < k; ++i) {
    for (int attempt = 0;; ++attempt) {
      REQUIRE(attempt < 10000);
      const double x = rng.uniform(-1.0, 1.0);
      const double y = rng.uniform(-1.0, 1.0);
      bool ok = true;
      for (int64_t j = 0; j < i; ++j) {
        const double dx = x - pts.at(j, 0), dy = y - pts.at(j, 1);
        if (dx * dx + dy * dy < min_dist * min_dist) {
          ok = false;
          break;
        }
      }
      if (ok) {
        pts.at(i, 0) = x;
        pts.at(i, 1) = y;
        break;
      }
    }
  }
  return pts;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.numel() == b.numel());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("control point grids") {
  Tensor g4 = control_point_grid(4);
  CHECK(g4.shape() == std::vector<int64_t>({4, 2}));
  CHECK(g4.at(0, 0) == -1.0);
  CHECK(g4.at(0, 1) == -1.0);
  CHECK(g4.at(1, 0) == 1.0);
  CHECK(g4.at(1, 1) == -1.0);
  CHECK(g4.at(3, 0) == 1.0);
  CHECK(g4.at(3, 1) == 1.0);

  Tensor g9 = control_point_grid(9);
  CHECK(g9.at(4, 0) == doctest::Approx(0.0));
  CHECK(g9.at(4, 1) == doctest::Approx(0.0));
  CHECK(g9.at(5, 0) == doctest::Approx(1.0));
  CHECK(g9.at(5, 1) == doctest::Approx(0.0));

  CHECK_THROWS_AS(control_point_grid(5), ConfigError);
  CHECK_THROWS_AS(control_point_grid(2), ConfigError);
}

TEST_CASE("patch centers follow the documented convention") {
  Tensor c = patch_centers(2, 2);
  CHECK(c.at(0, 0) == doctest::Approx(-0.5));
  CHECK(c.at(0, 1) == doctest::Approx(-0.5));
  CHECK(c.at(1, 0) == doctest::Approx(0.5));
  CHECK(c.at(1, 1) == doctest::Approx(-0.5));
  CHECK(c.at(2, 0) == doctest::Approx(-0.5));
  CHECK(c.at(2, 1) == doctest::Approx(0.5));

  Tensor c41 = patch_centers(4, 1);
  CHECK(c41.at(0, 0) == doctest::Approx(0.0));
  CHECK(c41.at(0, 1) == doctest::Approx(-0.75));
  CHECK(c41.at(3, 1) == doctest::Approx(0.75));
}

TEST_CASE("tps kernel closed forms") {
  CHECK(tps_kernel(1.0) == 0.0);
  CHECK(tps_kernel(0.0) == 0.0);
  CHECK(tps_kernel(std::sqrt(std::exp(1.0))) == doctest::Approx(std::exp(1.0)).epsilon(1e-12));
  // Finite and tiny just above zero.
  CHECK(std::isfinite(tps_kernel(1e-8)));
  CHECK(std::abs(tps_kernel(1e-8)) < 1e-13);
  CHECK(tps_kernel_grad_factor(0.0) == 0.0);
  CHECK(std::isfinite(tps_kernel_grad_factor(1e-16)));

  // dU/dr = 2r (log r^2 + 1) against central differences.
  for (double r : {0.3, 0.7, 1.3}) {
    const double h = 1e-6;
    const double num = (tps_kernel(r + h) - tps_kernel(r - h)) / (2.0 * h);
    const double ana = 2.0 * r * (std::log(r * r) + 1.0);
    CHECK(num == doctest::Approx(ana).epsilon(1e-7));
  }
}

TEST_CASE("rotate_points known values") {
  Tensor p = Tensor::from_values({1, 2}, {1.0, 0.0});
  Tensor r0 = rotate_points(p, 0.0);
  CHECK(r0.at(0, 0) == 1.0);
  CHECK(r0.at(0, 1) == 0.0);

  Tensor r90 = rotate_points(p, kPi / 2.0);
  CHECK(r90.at(0, 0) == doctest::Approx(0.0));
  CHECK(r90.at(0, 1) == doctest::Approx(1.0));

  Tensor r45 = rotate_points(p, kPi / 4.0);
  CHECK(r45.at(0, 0) == doctest::Approx(0.70710678).epsilon(1e-8));
  CHECK(r45.at(0, 1) == doctest::Approx(0.70710678).epsilon(1e-8));

  // Norm preserving on random points.
  Rng rng(3);
  Tensor pts = random_tensor(rng, {6, 2});
  Tensor rot = rotate_points(pts, 1.234);
  for (int64_t i = 0; i < 6; ++i) {
    const double n0 = std::hypot(pts.at(i, 0), pts.at(i, 1));
    const double n1 = std::hypot(rot.at(i, 0), rot.at(i, 1));
    CHECK(n1 == doctest::Approx(n0).epsilon(1e-12));
  }
}

TEST_CASE("rotate_points backward matches finite differences") {
  Rng rng(11);
  Tensor pts = random_tensor(rng, {5, 2});
  Tensor cot = random_tensor(rng, {5, 2});
  const double theta0 = 0.7;

  std::vector<double> point(pts.values());
  point.push_back(theta0);
  auto f = [&](const std::vector<double>& x) {
    Tensor p({5, 2}, std::vector<double>(x.begin(), x.begin() + 10));
    Tensor r = rotate_points(p, x[10]);
    return dot(r, cot);
  };
  Tensor d_pts = Tensor::zeros({5, 2});
  const double d_theta = rotate_points_backward(pts, theta0, cot, d_pts);
  std::vector<double> grad(d_pts.values());
  grad.push_back(d_theta);
  GradReport rep = finite_diff_check(f, point, grad, 1e-5, 1e-7, "rotate_points");
  CHECK(rep.pass);
}

TEST_CASE("solve_tps identity configuration") {
  Tensor grid = control_point_grid(9);
  TpsSolution sol = solve_tps(grid, grid);
  CHECK(sol.affine.at(0, 0) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(sol.affine.at(0, 1) == doctest::Approx(0.0).epsilon(1e-10));
  CHECK(sol.affine.at(0, 2) == doctest::Approx(0.0).epsilon(1e-10));
  CHECK(sol.affine.at(1, 0) == doctest::Approx(0.0).epsilon(1e-10));
  CHECK(sol.affine.at(1, 1) == doctest::Approx(1.0).epsilon(1e-10));
  for (int64_t i = 0; i < 9; ++i) {
    CHECK(std::abs(sol.weights.at(i, 0)) <= 1e-10);
    CHECK(std::abs(sol.weights.at(i, 1)) <= 1e-10);
  }

  Tensor out = evaluate_warp(sol, grid);
  CHECK(max_abs_diff(out, grid) <= 1e-9);
}

TEST_CASE("solve_tps pure rotation is exactly affine") {
  Tensor targets = Tensor::from_values(
      {4, 2}, {-0.5, -0.5, 0.5, -0.5, -0.5, 0.5, 0.5, 0.5});
  Tensor basis = rotate_points(targets, -kPi / 2.0);
  TpsSolution sol = solve_tps(basis, targets);

  // The warp undoes the -90 degree rotation, so its linear part is R(+90).
  CHECK(std::abs(sol.affine.at(0, 0) - 0.0) <= 1e-8);
  CHECK(std::abs(sol.affine.at(0, 1) - (-1.0)) <= 1e-8);
  CHECK(std::abs(sol.affine.at(1, 0) - 1.0) <= 1e-8);
  CHECK(std::abs(sol.affine.at(1, 1) - 0.0) <= 1e-8);
  CHECK(std::abs(sol.affine.at(0, 2)) <= 1e-8);
  CHECK(std::abs(sol.affine.at(1, 2)) <= 1e-8);
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(std::abs(sol.weights.at(i, 0)) <= 1e-8);
    CHECK(std::abs(sol.weights.at(i, 1)) <= 1e-8);
  }

  // Warping arbitrary points agrees with rotate_points.
  Rng rng(17);
  Tensor pts = random_tensor(rng, {20, 2});
  Tensor warped = evaluate_warp(sol, pts);
  Tensor direct = rotate_points(pts, kPi / 2.0);
  CHECK(max_abs_diff(warped, direct) <= 1e-8);
}

TEST_CASE("solve_tps rejects degenerate configurations") {
  Tensor dup = Tensor::from_values(
      {4, 2}, {0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0});
  Tensor targets = control_point_grid(4);
  CHECK_THROWS_AS(solve_tps(dup, targets), NumericError);

  // Collinear points make the P block rank deficient.
  Tensor line({5, 2});
  for (int64_t i = 0; i < 5; ++i) {
    line.at(i, 0) = -1.0 + 0.5 * static_cast<double>(i);
    line.at(i, 1) = 0.3 * line.at(i, 0) + 0.1;
  }
  Rng rng(4);
  Tensor t5 = random_separated_points(rng, 5);
  CHECK_THROWS_AS(solve_tps(line, t5), NumericError);

  CHECK_THROWS_AS(solve_tps(Tensor::from_values({2, 2}, {0., 0., 1., 1.}),
                            Tensor::from_values({2, 2}, {0., 0., 1., 1.})),
                  ConfigError);
}

TEST_CASE("tps interpolation exactness and side conditions") {
  for (int64_t k : {4, 9, 16}) {
    for (uint64_t seed = 0; seed < 8; ++seed) {
      Rng rng(mix_seed(k, seed));
      Tensor basis = random_separated_points(rng, k);
      Tensor targets = random_tensor(rng, {k, 2});
      TpsSolution sol = solve_tps(basis, targets);

      Tensor at_basis = evaluate_warp(sol, basis);
      CHECK(max_abs_diff(at_basis, targets) <= 1e-8);

      double sw0 = 0, sw1 = 0, swx0 = 0, swx1 = 0, swy0 = 0, swy1 = 0;
      for (int64_t i = 0; i < k; ++i) {
        sw0 += sol.weights.at(i, 0);
        sw1 += sol.weights.at(i, 1);
        swx0 += sol.weights.at(i, 0) * basis.at(i, 0);
        swx1 += sol.weights.at(i, 1) * basis.at(i, 0);
        swy0 += sol.weights.at(i, 0) * basis.at(i, 1);
        swy1 += sol.weights.at(i, 1) * basis.at(i, 1);
      }
      for (double v : {sw0, sw1, swx0, swx1, swy0, swy1}) {
        CHECK(std::abs(v) <= 1e-8);
      }
    }
  }
}

TEST_CASE("affine closure on random invertible maps") {
  Rng rng(21);
  for (int rep = 0; rep < 10; ++rep) {
    Tensor targets = control_point_grid(9);
    // Random affine with a determinant bounded away from zero.
    double a, b, c, d;
    do {
      a = rng.uniform(-1.5, 1.5);
      b = rng.uniform(-1.5, 1.5);
      c = rng.uniform(-1.5, 1.5);
      d = rng.uniform(-1.5, 1.5);
    } while (std::abs(a * d - b * c) < 0.3);
    const double tx = rng.uniform(-0.5, 0.5), ty = rng.uniform(-0.5, 0.5);

    Tensor basis({9, 2});
    for (int64_t i = 0; i < 9; ++i) {
      const double x = targets.at(i, 0), y = targets.at(i, 1);
      basis.at(i, 0) = a * x + b * y + tx;
      basis.at(i, 1) = c * x + d * y + ty;
    }
    TpsSolution sol = solve_tps(basis, targets);
    for (int64_t i = 0; i < 9; ++i) {
      CHECK(std::abs(sol.weights.at(i, 0)) <= 1e-8);
      CHECK(std::abs(sol.weights.at(i, 1)) <= 1e-8);
    }
    // Recovered affine is the inverse map.
    const double det = a * d - b * c;
    const double ia = d / det, ib = -b / det, ic = -c / det, id = a / det;
    const double itx = -(ia * tx + ib * ty), ity = -(ic * tx + id * ty);
    CHECK(sol.affine.at(0, 0) == doctest::Approx(ia).epsilon(1e-8));
    CHECK(sol.affine.at(0, 1) == doctest::Approx(ib).epsilon(1e-8));
    CHECK(sol.affine.at(1, 0) == doctest::Approx(ic).epsilon(1e-8));
    CHECK(sol.affine.at(1, 1) == doctest::Approx(id).epsilon(1e-8));
    CHECK(std::abs(sol.affine.at(0, 2) - itx) <= 1e-8);
    CHECK(std::abs(sol.affine.at(1, 2) - ity) <= 1e-8);
  }
}

TEST_CASE("solve_tps backward matches finite differences") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(mix_seed(31, seed));
    const int64_t k = 4;
    Tensor basis = random_separated_points(rng, k, 0.4);
    Tensor targets = random_tensor(rng, {k, 2});
    Tensor c_aff = random_tensor(rng, {2, 3});
    Tensor c_w = random_tensor(rng, {k, 2});

    std::vector<double> point;
    point.insert(point.end(), basis.values().begin(), basis.values().end());
    point.insert(point.end(), targets.values().begin(), targets.values().end());

    auto f = [&](const std::vector<double>& x) {
      Tensor b({k, 2}, std::vector<double>(x.begin(), x.begin() + 2 * k));
      Tensor t({k, 2}, std::vector<double>(x.begin() + 2 * k, x.end()));
      TpsSolution s = solve_tps(b, t);
      return dot(s.affine, c_aff) + dot(s.weights, c_w);
    };

    TpsSolution sol = solve_tps(basis, targets);
    Tensor d_basis = Tensor::zeros({k, 2});
    Tensor d_targets = Tensor::zeros({k, 2});
    solve_tps_backward(sol, c_aff, c_w, &d_basis, &d_targets);
    std::vector<double> grad;
    grad.insert(grad.end(), d_basis.values().begin(), d_basis.values().end());
    grad.insert(grad.end(), d_targets.values().begin(), d_targets.values().end());

    GradReport rep = finite_diff_check(f, point, grad, 1e-5, 1e-4, "solve_tps");
    CHECK_MESSAGE(rep.pass, "seed ", seed, " max rel err ", rep.max_rel_err);
  }
}

TEST_CASE("evaluate_warp backward matches finite differences") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(mix_seed(47, seed));
    const int64_t k = 4, n = 3;
    TpsSolution sol;
    sol.basis = random_separated_points(rng, k, 0.4);
    sol.affine = random_tensor(rng, {2, 3});
    sol.weights = random_tensor(rng, {k, 2}, -0.2, 0.2);
    Tensor pts = random_tensor(rng, {n, 2});
    Tensor cot = random_tensor(rng, {n, 2});

    // Pack affine, weights, points, basis into one parameter vector.
    std::vector<double> point;
    for (const Tensor* t : {&sol.affine, &sol.weights, &pts, &sol.basis}) {
      point.insert(point.end(), t->values().begin(), t->values().end());
    }
    auto f = [&](const std::vector<double>& x) {
      TpsSolution s;
      auto it = x.begin();
      s.affine = Tensor({2, 3}, std::vector<double>(it, it + 6));
      it += 6;
      s.weights = Tensor({k, 2}, std::vector<double>(it, it + 2 * k));
      it += 2 * k;
      Tensor p({n, 2}, std::vector<double>(it, it + 2 * n));
      it += 2 * n;
      s.basis = Tensor({k, 2}, std::vector<double>(it, it + 2 * k));
      return dot(evaluate_warp(s, p), cot);
    };

    Tensor d_aff = Tensor::zeros({2, 3});
    Tensor d_w = Tensor::zeros({k, 2});
    Tensor d_p = Tensor::zeros({n, 2});
    Tensor d_b = Tensor::zeros({k, 2});
    evaluate_warp_backward(sol, pts, cot, &d_aff, &d_w, &d_p, &d_b);
    std::vector<double> grad;
    for (const Tensor* t : {&d_aff, &d_w, &d_p, &d_b}) {
      grad.insert(grad.end(), t->values().begin(), t->values().end());
    }
    GradReport rep = finite_diff_check(f, point, grad, 1e-5, 1e-4, "evaluate_warp");
    CHECK_MESSAGE(rep.pass, "seed ", seed, " max rel err ", rep.max_rel_err);
  }
}

TEST_CASE("bilinear sampling at nodes, midpoints, and borders") {
  Rng rng(5);
  const int64_t h = 3, w = 4, d = 2;
  Tensor f = random_tensor(rng, {h, w, d});
  Tensor centers = patch_centers(h, w);

  Tensor at_nodes = bilinear_sample(f, centers);
  for (int64_t p = 0; p < h * w; ++p) {
    for (int64_t t = 0; t < d; ++t) {
      CHECK(at_nodes.at(p, t) == doctest::Approx(f[p * d + t]).epsilon(1e-14));
    }
  }

  // Midpoint of two horizontally adjacent centers.
  Tensor mid({1, 2});
  mid.at(0, 0) = 0.5 * (centers.at(0, 0) + centers.at(1, 0));
  mid.at(0, 1) = centers.at(0, 1);
  Tensor vm = bilinear_sample(f, mid);
  for (int64_t t = 0; t < d; ++t) {
    CHECK(vm.at(0, t) ==
          doctest::Approx(0.5 * (f.at(0, 0, t) + f.at(0, 1, t))).epsilon(1e-12));
  }

  // Far outside clamps to the nearest border patch.
  Tensor far = Tensor::from_values({2, 2}, {-9.0, -9.0, 9.0, 0.0});
  Tensor vf = bilinear_sample(f, far);
  for (int64_t t = 0; t < d; ++t) {
    CHECK(vf.at(0, t) == f.at(0, 0, t));
    // (9, 0): x clamps to the last column, y = 0 is the middle row.
    CHECK(vf.at(1, t) == doctest::Approx(f.at(1, 3, t)).epsilon(1e-12));
  }

  // Rank-3 coords keep the spatial layout.
  Tensor c3 = centers;
  c3.reshape({h, w, 2});
  Tensor out3 = bilinear_sample(f, c3);
  CHECK(out3.shape() == std::vector<int64_t>({h, w, d}));
}

TEST_CASE("bilinear backward matches finite differences") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(mix_seed(53, seed));
    const int64_t h = 3, w = 3, d = 2, n = 4;
    Tensor f = random_tensor(rng, {h, w, d});
    // Coordinates strictly inside cells: at least 5e-3 from every lattice
    // line in index space (bilinear is only piecewise smooth).
    Tensor coords({n, 2});
    for (int64_t i = 0; i < n; ++i) {
      const double gx = rng.uniform(0.1, static_cast<double>(w) - 1.1);
      const double gy = rng.uniform(0.1, static_cast<double>(h) - 1.1);
      const double fx = gx - std::floor(gx), fy = gy - std::floor(gy);
      if (fx < 5e-3 || fx > 1 - 5e-3 || fy < 5e-3 || fy > 1 - 5e-3) {
        coords.at(i, 0) = (2.0 * (std::floor(gx) + 0.4) + 1.0) / w - 1.0;
        coords.at(i, 1) = (2.0 * (std::floor(gy) + 0.4) + 1.0) / h - 1.0;
      } else {
        coords.at(i, 0) = (2.0 * gx + 1.0) / w - 1.0;
        coords.at(i, 1) = (2.0 * gy + 1.0) / h - 1.0;
      }
    }
    Tensor cot = random_tensor(rng, {n, d});

    std::vector<double> point;
    point.insert(point.end(), f.values().begin(), f.values().end());
    point.insert(point.end(), coords.values().begin(), coords.values().end());
    auto fn = [&](const std::vector<double>& x) {
      Tensor ff({h, w, d}, std::vector<double>(x.begin(), x.begin() + h * w * d));
      Tensor cc({n, 2}, std::vector<double>(x.begin() + h * w * d, x.end()));
      return dot(bilinear_sample(ff, cc), cot);
    };
    Tensor d_f = Tensor::zeros({h, w, d});
    Tensor d_c = Tensor::zeros({n, 2});
    bilinear_sample_backward(f, coords, cot, &d_f, &d_c);
    std::vector<double> grad;
    grad.insert(grad.end(), d_f.values().begin(), d_f.values().end());
    grad.insert(grad.end(), d_c.values().begin(), d_c.values().end());
    GradReport rep = finite_diff_check(fn, point, grad, 1e-6, 1e-4, "bilinear");
    CHECK_MESSAGE(rep.pass, "seed ", seed, " max rel err ", rep.max_rel_err);
  }
}

TEST_CASE("predict_rotation basics") {
  Rng rng(7);
  Tensor f = random_tensor(rng, {2, 2, 3});
  Tensor w0 = Tensor::zeros({3});
  CHECK(predict_rotation(f, w0, 0.0) == 0.0);

  // Saturated pre-activation approaches pi/2 from below.
  const double theta = predict_rotation(f, w0, 10.0);
  CHECK(theta <= kPi / 2.0);
  CHECK(theta > (kPi / 2.0) * 0.9999999);

  // Bound holds for wild inputs.
  Tensor wbig = Tensor::full({3}, 1e6);
  CHECK(std::abs(predict_rotation(f, wbig, -1e7)) <= kPi / 2.0);

  // Finite difference on the head weights.
  Tensor w = random_tensor(rng, {3});
  std::vector<double> point(w.values());
  auto fn = [&](const std::vector<double>& x) {
    Tensor ww({3}, x);
    return predict_rotation(f, ww, 0.25);
  };
  Tensor d_w = Tensor::zeros({3});
  double d_b = 0.0;
  predict_rotation_backward(f, w, 0.25, 1.0, nullptr, &d_w, &d_b);
  GradReport rep = finite_diff_check(fn, point, d_w.values(), 1e-5, 1e-5,
                                     "predict_rotation");
  CHECK(rep.pass);
}

TEST_CASE("ltps eta=0 is a bit-exact identity") {
  Rng rng(9);
  Tensor f = random_tensor(rng, {4, 4, 3});
  ControlPointSet cps = ControlPointSet::regular(4);
  Tensor head_w = random_tensor(rng, {3});
  auto [out, state] = ltps_forward(f, cps, head_w, 0.3, 0.0);
  CHECK(out.values() == f.values());
  CHECK(state.enabled);
  CHECK(std::abs(state.theta) <= kPi / 2.0);
}

TEST_CASE("ltps identity warp scales features by 1+eta") {
  Rng rng(13);
  Tensor f = random_tensor(rng, {4, 2, 3});
  ControlPointSet cps = ControlPointSet::regular(4);
  Tensor w0 = Tensor::zeros({3});
  auto [out, state] = ltps_forward(f, cps, w0, 0.0, 0.25);
  CHECK(state.theta == 0.0);
  for (int64_t i = 0; i < f.numel(); ++i) {
    CHECK(std::abs(out[i] - 1.25 * f[i]) <= 1e-10);
  }
}

TEST_CASE("ltps 90 degree warp permutes a 2x2 grid") {
  Rng rng(15);
  Tensor f = random_tensor(rng, {2, 2, 3});
  ControlPointSet cps = ControlPointSet::regular(4);
  Tensor out = fixed_angle_forward(f, cps, kPi / 2.0, 1.0);
  // F_ltps = out - F must be the 90-degree patch permutation:
  // (0,0)<-(0,1), (0,1)<-(1,1), (1,0)<-(0,0), (1,1)<-(1,0).
  for (int64_t t = 0; t < 3; ++t) {
    CHECK(std::abs(out.at(0, 0, t) - f.at(0, 0, t) - f.at(0, 1, t)) <= 1e-8);
    CHECK(std::abs(out.at(0, 1, t) - f.at(0, 1, t) - f.at(1, 1, t)) <= 1e-8);
    CHECK(std::abs(out.at(1, 0, t) - f.at(1, 0, t) - f.at(0, 0, t)) <= 1e-8);
    CHECK(std::abs(out.at(1, 1, t) - f.at(1, 1, t) - f.at(1, 0, t)) <= 1e-8);
  }
}

TEST_CASE("original tps freezes geometry") {
  Rng rng(19);
  Tensor f = random_tensor(rng, {4, 2, 3});
  ControlPointSet cps = ControlPointSet::regular(4);
  Tensor out = original_tps_forward(f, cps, 0.5);
  for (int64_t i = 0; i < f.numel(); ++i) {
    CHECK(std::abs(out[i] - 1.5 * f[i]) <= 1e-10);
  }

  // Identical to the learned path when the head is exactly zero, including
  // with a jittered source.
  ControlPointSet jit = ControlPointSet::regular(4);
  for (int64_t i = 0; i < jit.source.numel(); ++i) {
    jit.source[i] += rng.uniform(-0.1, 0.1);
  }
  Tensor w0 = Tensor::zeros({3});
  auto [learned, st] = ltps_forward(f, jit, w0, 0.0, 0.5);
  Tensor frozen = original_tps_forward(f, jit, 0.5);
  CHECK(learned.values() == frozen.values());

  // Frozen source receives no gradient and is not registered.
  LtpsBlock block("t", 4, 4, 2, 3, 0.5, RotationMode::kOriginal, 0.0, false, false);
  block.source().value = jit.source;
  LtpsBlock::Cache cache;
  Tensor o = block.forward(f, &cache);
  Tensor d_f = Tensor::zeros({4, 2, 3});
  block.backward(cache, random_tensor(rng, {4, 2, 3}), 0.0, &d_f);
  for (int64_t i = 0; i < block.source().grad.numel(); ++i) {
    CHECK(block.source().grad[i] == 0.0);
  }
  ParamRefs refs;
  block.collect_params(refs);
  CHECK(refs.empty());
}

TEST_CASE("fixed angle mode keeps source learnable and matches the angle") {
  LtpsBlock block("t", 4, 4, 4, 2, 0.3, RotationMode::kFixed, kPi / 6.0, false, false);
  ParamRefs refs;
  block.collect_params(refs);
  REQUIRE(refs.size() == 1);
  CHECK(refs[0]->name == "t.source");

  Rng rng(23);
  Tensor f = random_tensor(rng, {4, 4, 2});
  LtpsBlock::Cache cache;
  block.forward(f, &cache);
  CHECK(cache.theta == doctest::Approx(kPi / 6.0));
}

namespace {

// Shared scalar-projection gradcheck for a block configuration. Checks
// d(loss)/d(inputs) for F, source, head weights, head bias and eta, where
// loss = <C, F_final> + c_theta * theta. Configurations whose sampling
// coordinates fall within eps of a bilinear cell boundary or the clamp border
// are rejected (the sampler is only piecewise smooth there).
bool ltps_gradcheck_one(uint64_t seed, bool forward_warp, double* max_err) {
  Rng rng(mix_seed(forward_warp ? 88 : 77, seed));
  const int64_t h = 4, w = 4, d = 3, k = 4;
  Tensor f = random_tensor(rng, {h, w, d});
  Tensor src_jitter = random_tensor(rng, {k, 2}, -0.12, 0.12);
  Tensor head_w = random_tensor(rng, {d}, -0.6, 0.6);
  const double head_b = rng.uniform(-0.9, 0.9);
  const double eta = 0.7;

  auto build = [&](const std::vector<double>& x) {
    LtpsBlock block("g", k, h, w, d, x[2 * k + d + 1], RotationMode::kLearned,
                    0.0, forward_warp, true);
    for (int64_t i = 0; i < 2 * k; ++i) {
      block.source().value[i] = control_point_grid(k)[i] + x[i];
    }
    for (int64_t i = 0; i < d; ++i) block.head_weight().value[i] = x[2 * k + i];
    block.head_bias().value[0] = x[2 * k + d];
    return block;
  };

  std::vector<double> point;
  point.insert(point.end(), src_jitter.values().begin(), src_jitter.values().end());
  point.insert(point.end(), head_w.values().begin(), head_w.values().end());
  point.push_back(head_b);
  point.push_back(eta);
  point.insert(point.end(), f.values().begin(), f.values().end());

  // Reject configurations whose sampling coordinates sit near a kink line of
  // the sampler: the clamp borders (index 0 and dim-1) and, in the interior,
  // the integer lattice between cells. Coordinates beyond the border are in a
  // constant (clamped) region and are smooth, so they stay.
  {
    LtpsBlock block = build(point);
    LtpsBlock::Cache cache;
    block.forward(f, &cache);
    const double tol = 5e-3;
    for (int64_t p = 0; p < h * w; ++p) {
      const double gx = ((cache.coords.at(p, 0) + 1.0) * w - 1.0) * 0.5;
      const double gy = ((cache.coords.at(p, 1) + 1.0) * h - 1.0) * 0.5;
      const std::array<std::pair<double, int64_t>, 2> gs = {
          std::pair<double, int64_t>{gx, w}, {gy, h}};
      for (const auto& [g, dim] : gs) {
        const double hi = static_cast<double>(dim - 1);
        if (std::abs(g) < tol || std::abs(g - hi) < tol) return false;
        if (g > 0.0 && g < hi) {
          const double fr = g - std::floor(g);
          if (fr < tol || fr > 1.0 - tol) return false;
        }
      }
    }
  }

  Tensor cot = random_tensor(rng, {h, w, d});
  const double c_theta = rng.uniform(-1.0, 1.0);

  auto fn = [&](const std::vector<double>& x) {
    LtpsBlock block = build(x);
    Tensor ff({h, w, d},
              std::vector<double>(x.begin() + 2 * k + d + 2, x.end()));
    LtpsBlock::Cache cache;
    Tensor out = block.forward(ff, &cache);
    return dot(out, cot) + c_theta * cache.theta;
  };

  LtpsBlock block = build(point);
  LtpsBlock::Cache cache;
  Tensor out = block.forward(f, &cache);
  Tensor d_f = Tensor::zeros({h, w, d});
  block.backward(cache, cot, c_theta, &d_f);

  std::vector<double> grad;
  grad.insert(grad.end(), block.source().grad.values().begin(),
              block.source().grad.values().end());
  grad.insert(grad.end(), block.head_weight().grad.values().begin(),
              block.head_weight().grad.values().end());
  grad.push_back(block.head_bias().grad[0]);
  grad.push_back(block.eta_param().grad[0]);
  grad.insert(grad.end(), d_f.values().begin(), d_f.values().end());

  GradReport rep = finite_diff_check(fn, point, grad, 1e-5, 1e-4, "ltps");
  *max_err = rep.max_rel_err;
  return rep.pass;
}

}  // namespace

TEST_CASE("ltps block backward matches finite differences") {
  int passed = 0;
  for (uint64_t seed = 1; seed <= 20 && passed < 5; ++seed) {
    double max_err = 0.0;
    const bool ok = ltps_gradcheck_one(seed, false, &max_err);
    if (!ok && max_err == 0.0) continue;  // config rejected near a kink
    CHECK_MESSAGE(ok, "seed ", seed, " max rel err ", max_err);
    if (ok) ++passed;
  }
  CHECK(passed >= 5);
}

TEST_CASE("ltps flipped warp direction backward matches finite differences") {
  int passed = 0;
  for (uint64_t seed = 1; seed <= 20 && passed < 3; ++seed) {
    double max_err = 0.0;
    const bool ok = ltps_gradcheck_one(seed, true, &max_err);
    if (!ok && max_err == 0.0) continue;
    CHECK_MESSAGE(ok, "seed ", seed, " max rel err ", max_err);
    if (ok) ++passed;
  }
  CHECK(passed >= 3);
}

TEST_CASE("forward and backward warp directions are mutual inverses on the grid") {
  // With the same rotated source, composing the two directions at the control
  // points returns the originals.
  ControlPointSet cps = ControlPointSet::regular(9);
  Tensor rot = rotate_points(cps.source, 0.4);
  TpsSolution back = solve_tps(cps.target, rot);   // canonical -> rotated
  TpsSolution fwd = solve_tps(rot, cps.target);    // rotated -> canonical
  Tensor once = evaluate_warp(back, cps.target);
  CHECK(max_abs_diff(once, rot) <= 1e-8);
  Tensor round = evaluate_warp(fwd, once);
  CHECK(max_abs_diff(round, cps.target) <= 1e-7);
}
