#include "tpsalign/tps.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "tpsalign/common.hpp"

namespace tpsalign {

namespace {

int64_t isqrt_exact(int64_t k) {
  auto r = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(k))));
  if (r * r != k) return -1;
  return r;
}

}  // namespace

Tensor control_point_grid(int64_t k) {
  const int64_t side = isqrt_exact(k);
  if (side < 2) {
    throw ConfigError("control_point_grid: K must be a perfect square >= 4, got " +
                      std::to_string(k));
  }
  Tensor grid({k, 2});
  for (int64_t i = 0; i < side; ++i) {
    const double y = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(side - 1);
    for (int64_t j = 0; j < side; ++j) {
      const double x = -1.0 + 2.0 * static_cast<double>(j) / static_cast<double>(side - 1);
      grid.at(i * side + j, 0) = x;
      grid.at(i * side + j, 1) = y;
    }
  }
  return grid;
}

Tensor patch_centers(int64_t h, int64_t w) {
  if (h < 1 || w < 1) throw ConfigError("patch_centers: grid must be at least 1x1");
  Tensor c({h * w, 2});
  for (int64_t i = 0; i < h; ++i) {
    const double y = -1.0 + static_cast<double>(2 * i + 1) / static_cast<double>(h);
    for (int64_t j = 0; j < w; ++j) {
      const double x = -1.0 + static_cast<double>(2 * j + 1) / static_cast<double>(w);
      c.at(i * w + j, 0) = x;
      c.at(i * w + j, 1) = y;
    }
  }
  return c;
}

double tps_kernel_r2(double r2) {
  if (r2 <= 0.0) return 0.0;
  return r2 * std::log(r2);
}

double tps_kernel(double r) { return tps_kernel_r2(r * r); }

double tps_kernel_grad_factor(double r2) {
  if (r2 <= 0.0) return 0.0;
  return 2.0 * (std::log(r2) + 1.0);
}

Tensor rotate_points(const Tensor& pts, double theta) {
  if (pts.rank() != 2 || pts.shape(1) != 2) {
    throw ConfigError("rotate_points: expected N x 2 points");
  }
  const double c = std::cos(theta), s = std::sin(theta);
  Tensor out(pts.shape());
  for (int64_t i = 0; i < pts.shape(0); ++i) {
    const double x = pts.at(i, 0), y = pts.at(i, 1);
    out.at(i, 0) = c * x - s * y;
    out.at(i, 1) = s * x + c * y;
  }
  return out;
}

double rotate_points_backward(const Tensor& pts, double theta,
                              const Tensor& d_rot, Tensor& d_pts) {
  if (d_rot.shape() != pts.shape() || d_pts.shape() != pts.shape()) {
    throw ConfigError("rotate_points_backward: shape mismatch");
  }
  const double c = std::cos(theta), s = std::sin(theta);
  double d_theta = 0.0;
  for (int64_t i = 0; i < pts.shape(0); ++i) {
    const double x = pts.at(i, 0), y = pts.at(i, 1);
    const double gx = d_rot.at(i, 0), gy = d_rot.at(i, 1);
    // out = (cx - sy, sx + cy)
    d_pts.at(i, 0) += c * gx + s * gy;
    d_pts.at(i, 1) += -s * gx + c * gy;
    d_theta += gx * (-s * x - c * y) + gy * (c * x - s * y);
  }
  return d_theta;
}

TpsSolution solve_tps(const Tensor& basis, const Tensor& targets) {
  if (basis.rank() != 2 || basis.shape(1) != 2) {
    throw ConfigError("solve_tps: basis must be K x 2");
  }
  if (targets.shape() != basis.shape()) {
    throw ConfigError("solve_tps: targets must match basis shape");
  }
  const int64_t k = basis.shape(0);
  if (k < 3) throw ConfigError("solve_tps: need at least 3 control points");

  for (int64_t i = 0; i < k; ++i) {
    for (int64_t j = i + 1; j < k; ++j) {
      const double dx = basis.at(i, 0) - basis.at(j, 0);
      const double dy = basis.at(i, 1) - basis.at(j, 1);
      if (dx * dx + dy * dy < 1e-18) {
        throw NumericError("solve_tps: degenerate configuration, basis points " +
                           std::to_string(i) + " and " + std::to_string(j) +
                           " coincide");
      }
    }
  }

  const int64_t n = k + 3;
  Tensor m = Tensor::zeros({n, n});
  for (int64_t i = 0; i < k; ++i) {
    for (int64_t j = 0; j < k; ++j) {
      if (i == j) {
        m.at(i, j) = kTpsRidge;
        continue;
      }
      const double dx = basis.at(i, 0) - basis.at(j, 0);
      const double dy = basis.at(i, 1) - basis.at(j, 1);
      m.at(i, j) = tps_kernel_r2(dx * dx + dy * dy);
    }
    m.at(i, k + 0) = basis.at(i, 0);
    m.at(i, k + 1) = basis.at(i, 1);
    m.at(i, k + 2) = 1.0;
    m.at(k + 0, i) = basis.at(i, 0);
    m.at(k + 1, i) = basis.at(i, 1);
    m.at(k + 2, i) = 1.0;
  }

  Tensor rhs = Tensor::zeros({n, 2});
  for (int64_t i = 0; i < k; ++i) {
    rhs.at(i, 0) = targets.at(i, 0);
    rhs.at(i, 1) = targets.at(i, 1);
  }

  auto factor = std::make_shared<LuFactor>(m.data(), n);
  Tensor stacked({n, 2});
  factor->solve(rhs.data(), stacked.data(), 2);
  stacked.ensure_finite("tps solution");

  TpsSolution sol;
  sol.basis = basis;
  sol.stacked = stacked;
  sol.factor = std::move(factor);
  sol.weights = Tensor({k, 2});
  for (int64_t i = 0; i < k; ++i) {
    sol.weights.at(i, 0) = stacked.at(i, 0);
    sol.weights.at(i, 1) = stacked.at(i, 1);
  }
  // The solve produces C with rows (row of P) x (output coord); the affine
  // matrix applies to column vectors [x, y, 1], so A = C^T.
  sol.affine = Tensor({2, 3});
  for (int64_t r = 0; r < 3; ++r) {
    sol.affine.at(0, r) = stacked.at(k + r, 0);
    sol.affine.at(1, r) = stacked.at(k + r, 1);
  }
  return sol;
}

void solve_tps_backward(const TpsSolution& sol, const Tensor& d_affine,
                        const Tensor& d_weights, Tensor* d_basis,
                        Tensor* d_targets) {
  const int64_t k = sol.basis.shape(0);
  const int64_t n = k + 3;
  if (!sol.factor) throw ConfigError("solve_tps_backward: solution has no retained factor");
  if (d_affine.shape() != std::vector<int64_t>({2, 3}) ||
      d_weights.shape() != std::vector<int64_t>({k, 2})) {
    throw ConfigError("solve_tps_backward: gradient shape mismatch");
  }

  // Stack the incoming gradient in the layout of the raw solution, then pull
  // it back through the (symmetric) system matrix: lambda = M^{-1} d_stacked.
  Tensor d_stacked = Tensor::zeros({n, 2});
  for (int64_t i = 0; i < k; ++i) {
    d_stacked.at(i, 0) = d_weights.at(i, 0);
    d_stacked.at(i, 1) = d_weights.at(i, 1);
  }
  for (int64_t r = 0; r < 3; ++r) {
    d_stacked.at(k + r, 0) = d_affine.at(0, r);
    d_stacked.at(k + r, 1) = d_affine.at(1, r);
  }
  Tensor lambda({n, 2});
  sol.factor->solve(d_stacked.data(), lambda.data(), 2);
  lambda.ensure_finite("tps solve backward");

  if (d_targets) {
    if (d_targets->shape() != std::vector<int64_t>({k, 2})) {
      throw ConfigError("solve_tps_backward: d_targets shape mismatch");
    }
    for (int64_t i = 0; i < k; ++i) {
      d_targets->at(i, 0) += lambda.at(i, 0);
      d_targets->at(i, 1) += lambda.at(i, 1);
    }
  }

  if (d_basis) {
    if (d_basis->shape() != std::vector<int64_t>({k, 2})) {
      throw ConfigError("solve_tps_backward: d_basis shape mismatch");
    }
    // d_M = -lambda S^T; only entries that depend on the basis matter: the
    // kernel block (via pairwise distances) and the two coordinate columns of
    // the P blocks. G(i,j) below is d_M(i,j).
    const Tensor& s = sol.stacked;
    auto g = [&](int64_t i, int64_t j) {
      return -(lambda.at(i, 0) * s.at(j, 0) + lambda.at(i, 1) * s.at(j, 1));
    };
    for (int64_t i = 0; i < k; ++i) {
      double gx = 0.0, gy = 0.0;
      for (int64_t j = 0; j < k; ++j) {
        if (j == i) continue;
        const double dx = sol.basis.at(i, 0) - sol.basis.at(j, 0);
        const double dy = sol.basis.at(i, 1) - sol.basis.at(j, 1);
        const double f = tps_kernel_grad_factor(dx * dx + dy * dy);
        const double coeff = (g(i, j) + g(j, i)) * f;
        gx += coeff * dx;
        gy += coeff * dy;
      }
      gx += g(i, k + 0) + g(k + 0, i);
      gy += g(i, k + 1) + g(k + 1, i);
      d_basis->at(i, 0) += gx;
      d_basis->at(i, 1) += gy;
    }
  }
}

Tensor evaluate_warp(const TpsSolution& sol, const Tensor& points) {
  if (points.rank() != 2 || points.shape(1) != 2) {
    throw ConfigError("evaluate_warp: expected N x 2 points");
  }
  const int64_t k = sol.basis.shape(0);
  const int64_t npts = points.shape(0);
  const Tensor& a = sol.affine;
  Tensor out({npts, 2});
  for (int64_t p = 0; p < npts; ++p) {
    const double x = points.at(p, 0), y = points.at(p, 1);
    double ox = a.at(0, 0) * x + a.at(0, 1) * y + a.at(0, 2);
    double oy = a.at(1, 0) * x + a.at(1, 1) * y + a.at(1, 2);
    for (int64_t i = 0; i < k; ++i) {
      const double dx = x - sol.basis.at(i, 0);
      const double dy = y - sol.basis.at(i, 1);
      const double u = tps_kernel_r2(dx * dx + dy * dy);
      ox += sol.weights.at(i, 0) * u;
      oy += sol.weights.at(i, 1) * u;
    }
    out.at(p, 0) = ox;
    out.at(p, 1) = oy;
  }
  return out;
}

void evaluate_warp_backward(const TpsSolution& sol, const Tensor& points,
                            const Tensor& d_out, Tensor* d_affine,
                            Tensor* d_weights, Tensor* d_points,
                            Tensor* d_basis) {
  const int64_t k = sol.basis.shape(0);
  const int64_t npts = points.shape(0);
  if (d_out.shape() != std::vector<int64_t>({npts, 2})) {
    throw ConfigError("evaluate_warp_backward: d_out shape mismatch");
  }
  const Tensor& a = sol.affine;
  for (int64_t p = 0; p < npts; ++p) {
    const double x = points.at(p, 0), y = points.at(p, 1);
    const double tx = d_out.at(p, 0), ty = d_out.at(p, 1);
    if (d_affine) {
      d_affine->at(0, 0) += tx * x;
      d_affine->at(0, 1) += tx * y;
      d_affine->at(0, 2) += tx;
      d_affine->at(1, 0) += ty * x;
      d_affine->at(1, 1) += ty * y;
      d_affine->at(1, 2) += ty;
    }
    double px = a.at(0, 0) * tx + a.at(1, 0) * ty;
    double py = a.at(0, 1) * tx + a.at(1, 1) * ty;
    for (int64_t i = 0; i < k; ++i) {
      const double dx = x - sol.basis.at(i, 0);
      const double dy = y - sol.basis.at(i, 1);
      const double r2 = dx * dx + dy * dy;
      const double u = tps_kernel_r2(r2);
      const double wdot = sol.weights.at(i, 0) * tx + sol.weights.at(i, 1) * ty;
      if (d_weights) {
        d_weights->at(i, 0) += tx * u;
        d_weights->at(i, 1) += ty * u;
      }
      const double f = tps_kernel_grad_factor(r2) * wdot;
      px += f * dx;
      py += f * dy;
      if (d_basis) {
        d_basis->at(i, 0) -= f * dx;
        d_basis->at(i, 1) -= f * dy;
      }
    }
    if (d_points) {
      d_points->at(p, 0) += px;
      d_points->at(p, 1) += py;
    }
  }
}

namespace {

struct BilinearCell {
  int64_t i0, i1, j0, j1;
  double fx, fy;
  bool x_interior, y_interior;
};

BilinearCell locate(double x, double y, int64_t h, int64_t w) {
  BilinearCell c;
  double gx = ((x + 1.0) * static_cast<double>(w) - 1.0) * 0.5;
  double gy = ((y + 1.0) * static_cast<double>(h) - 1.0) * 0.5;
  c.x_interior = gx > 0.0 && gx < static_cast<double>(w - 1);
  c.y_interior = gy > 0.0 && gy < static_cast<double>(h - 1);
  gx = std::clamp(gx, 0.0, static_cast<double>(w - 1));
  gy = std::clamp(gy, 0.0, static_cast<double>(h - 1));
  c.j0 = static_cast<int64_t>(gx);
  c.i0 = static_cast<int64_t>(gy);
  c.j0 = std::min(c.j0, w - 1);
  c.i0 = std::min(c.i0, h - 1);
  c.j1 = std::min(c.j0 + 1, w - 1);
  c.i1 = std::min(c.i0 + 1, h - 1);
  c.fx = gx - static_cast<double>(c.j0);
  c.fy = gy - static_cast<double>(c.i0);
  return c;
}

}  // namespace

namespace {

// coords may arrive as N x 2 or H' x W' x 2; both are row-major lists of
// (x, y) pairs underneath.
int64_t coord_count(const Tensor& coords) {
  if (coords.rank() == 2 && coords.shape(1) == 2) return coords.shape(0);
  if (coords.rank() == 3 && coords.shape(2) == 2) {
    return coords.shape(0) * coords.shape(1);
  }
  throw ConfigError("bilinear_sample: coords must be N x 2 or H x W x 2");
}

}  // namespace

Tensor bilinear_sample(const Tensor& f, const Tensor& coords) {
  if (f.rank() != 3) throw ConfigError("bilinear_sample: features must be H x W x D");
  const int64_t h = f.shape(0), w = f.shape(1), d = f.shape(2);
  const int64_t npts = coord_count(coords);
  Tensor out({npts, d});
  const double* fd = f.data();
  const double* cd = coords.data();
  double* od = out.data();
  for (int64_t p = 0; p < npts; ++p) {
    const BilinearCell c = locate(cd[p * 2 + 0], cd[p * 2 + 1], h, w);
    const double w00 = (1.0 - c.fy) * (1.0 - c.fx);
    const double w01 = (1.0 - c.fy) * c.fx;
    const double w10 = c.fy * (1.0 - c.fx);
    const double w11 = c.fy * c.fx;
    const double* f00 = fd + (c.i0 * w + c.j0) * d;
    const double* f01 = fd + (c.i0 * w + c.j1) * d;
    const double* f10 = fd + (c.i1 * w + c.j0) * d;
    const double* f11 = fd + (c.i1 * w + c.j1) * d;
    double* o = od + p * d;
    for (int64_t t = 0; t < d; ++t) {
      o[t] = w00 * f00[t] + w01 * f01[t] + w10 * f10[t] + w11 * f11[t];
    }
  }
  if (coords.rank() == 3) out.reshape({coords.shape(0), coords.shape(1), d});
  return out;
}

void bilinear_sample_backward(const Tensor& f, const Tensor& coords,
                              const Tensor& d_out, Tensor* d_f,
                              Tensor* d_coords) {
  const int64_t h = f.shape(0), w = f.shape(1), d = f.shape(2);
  const int64_t npts = coord_count(coords);
  if (d_out.numel() != npts * d) {
    throw ConfigError("bilinear_sample_backward: d_out shape mismatch");
  }
  if (d_coords && d_coords->numel() != npts * 2) {
    throw ConfigError("bilinear_sample_backward: d_coords shape mismatch");
  }
  const double* fd = f.data();
  const double* cd = coords.data();
  for (int64_t p = 0; p < npts; ++p) {
    const BilinearCell c = locate(cd[p * 2 + 0], cd[p * 2 + 1], h, w);
    const double w00 = (1.0 - c.fy) * (1.0 - c.fx);
    const double w01 = (1.0 - c.fy) * c.fx;
    const double w10 = c.fy * (1.0 - c.fx);
    const double w11 = c.fy * c.fx;
    const double* g = d_out.data() + p * d;
    if (d_f) {
      double* g00 = d_f->data() + (c.i0 * w + c.j0) * d;
      double* g01 = d_f->data() + (c.i0 * w + c.j1) * d;
      double* g10 = d_f->data() + (c.i1 * w + c.j0) * d;
      double* g11 = d_f->data() + (c.i1 * w + c.j1) * d;
      for (int64_t t = 0; t < d; ++t) {
        g00[t] += w00 * g[t];
        g01[t] += w01 * g[t];
        g10[t] += w10 * g[t];
        g11[t] += w11 * g[t];
      }
    }
    if (d_coords) {
      const double* f00 = fd + (c.i0 * w + c.j0) * d;
      const double* f01 = fd + (c.i0 * w + c.j1) * d;
      const double* f10 = fd + (c.i1 * w + c.j0) * d;
      const double* f11 = fd + (c.i1 * w + c.j1) * d;
      double dfx = 0.0, dfy = 0.0;
      for (int64_t t = 0; t < d; ++t) {
        dfx += g[t] * ((1.0 - c.fy) * (f01[t] - f00[t]) + c.fy * (f11[t] - f10[t]));
        dfy += g[t] * ((1.0 - c.fx) * (f10[t] - f00[t]) + c.fx * (f11[t] - f01[t]));
      }
      if (c.x_interior) {
        d_coords->data()[p * 2 + 0] += dfx * static_cast<double>(w) * 0.5;
      }
      if (c.y_interior) {
        d_coords->data()[p * 2 + 1] += dfy * static_cast<double>(h) * 0.5;
      }
    }
  }
}

ControlPointSet ControlPointSet::regular(int64_t k) {
  ControlPointSet cps;
  cps.target = control_point_grid(k);
  cps.source = cps.target;
  cps.k = k;
  return cps;
}

double predict_rotation(const Tensor& f, const Tensor& w, double b) {
  if (f.rank() != 3) throw ConfigError("predict_rotation: features must be H x W x D");
  const int64_t hw = f.shape(0) * f.shape(1);
  const int64_t d = f.shape(2);
  if (w.numel() != d) throw ConfigError("predict_rotation: head width mismatch");
  f.ensure_finite("predict_rotation input");
  double z = b;
  const double* fd = f.data();
  for (int64_t t = 0; t < d; ++t) {
    double s = 0.0;
    for (int64_t p = 0; p < hw; ++p) s += fd[p * d + t];
    z += w[t] * (s / static_cast<double>(hw));
  }
  return (kPi / 2.0) * std::tanh(z);
}

void predict_rotation_backward(const Tensor& f, const Tensor& w, double b,
                               double d_theta, Tensor* d_f, Tensor* d_w,
                               double* d_b) {
  const int64_t hw = f.shape(0) * f.shape(1);
  const int64_t d = f.shape(2);
  double z = b;
  const double* fd = f.data();
  for (int64_t t = 0; t < d; ++t) {
    double s = 0.0;
    for (int64_t p = 0; p < hw; ++p) s += fd[p * d + t];
    z += w[t] * (s / static_cast<double>(hw));
  }
  const double th = std::tanh(z);
  const double dz = d_theta * (kPi / 2.0) * (1.0 - th * th);
  if (d_b) *d_b += dz;
  if (d_w) {
    for (int64_t t = 0; t < d; ++t) {
      double s = 0.0;
      for (int64_t p = 0; p < hw; ++p) s += fd[p * d + t];
      (*d_w)[t] += dz * (s / static_cast<double>(hw));
    }
  }
  if (d_f) {
    const double inv = 1.0 / static_cast<double>(hw);
    for (int64_t p = 0; p < hw; ++p) {
      for (int64_t t = 0; t < d; ++t) {
        d_f->data()[p * d + t] += dz * w[t] * inv;
      }
    }
  }
}

RotationMode rotation_mode_from_string(const std::string& s) {
  if (s == "learned") return RotationMode::kLearned;
  if (s == "fixed") return RotationMode::kFixed;
  if (s == "original") return RotationMode::kOriginal;
  throw ConfigError("unknown rotation mode '" + s +
                    "' (expected learned, fixed or original)");
}

std::string rotation_mode_to_string(RotationMode m) {
  switch (m) {
    case RotationMode::kLearned: return "learned";
    case RotationMode::kFixed: return "fixed";
    case RotationMode::kOriginal: return "original";
  }
  throw ConfigError("invalid rotation mode value");
}

LtpsBlock::LtpsBlock(std::string name_prefix, int64_t k, int64_t h, int64_t w,
                     int64_t dim, double eta, RotationMode mode,
                     double fixed_angle, bool forward_warp, bool eta_trainable)
    : k_(k),
      h_(h),
      w_(w),
      dim_(dim),
      mode_(mode),
      fixed_angle_(fixed_angle),
      forward_warp_(forward_warp),
      eta_trainable_(eta_trainable) {
  target_ = control_point_grid(k);
  source_ = Param(name_prefix + ".source", target_);
  head_w_ = Param(name_prefix + ".rot_w", Tensor::zeros({dim}));
  head_b_ = Param(name_prefix + ".rot_b", Tensor::zeros({1}));
  eta_ = Param(name_prefix + ".eta", Tensor::full({1}, eta));

  if (!forward_warp_) {
    // Factor the canonical-grid system once and precompute the kernel matrix
    // of the warp at the patch centers.
    const int64_t n = k_ + 3;
    Tensor m = Tensor::zeros({n, n});
    for (int64_t i = 0; i < k_; ++i) {
      for (int64_t j = 0; j < k_; ++j) {
        if (i == j) {
          m.at(i, j) = kTpsRidge;
          continue;
        }
        const double dx = target_.at(i, 0) - target_.at(j, 0);
        const double dy = target_.at(i, 1) - target_.at(j, 1);
        m.at(i, j) = tps_kernel_r2(dx * dx + dy * dy);
      }
      m.at(i, k_ + 0) = target_.at(i, 0);
      m.at(i, k_ + 1) = target_.at(i, 1);
      m.at(i, k_ + 2) = 1.0;
      m.at(k_ + 0, i) = target_.at(i, 0);
      m.at(k_ + 1, i) = target_.at(i, 1);
      m.at(k_ + 2, i) = 1.0;
    }
    target_factor_ = std::make_shared<LuFactor>(m.data(), n);

    const Tensor centers = patch_centers(h_, w_);
    q_ = Tensor({h_ * w_, n});
    for (int64_t p = 0; p < h_ * w_; ++p) {
      const double x = centers.at(p, 0), y = centers.at(p, 1);
      for (int64_t i = 0; i < k_; ++i) {
        const double dx = x - target_.at(i, 0);
        const double dy = y - target_.at(i, 1);
        q_.at(p, i) = tps_kernel_r2(dx * dx + dy * dy);
      }
      q_.at(p, k_ + 0) = x;
      q_.at(p, k_ + 1) = y;
      q_.at(p, k_ + 2) = 1.0;
    }
  }
}

void LtpsBlock::init(Rng& rng) {
  if (mode_ == RotationMode::kLearned) {
    const double scale = 0.01 / std::sqrt(static_cast<double>(dim_));
    for (int64_t i = 0; i < dim_; ++i) head_w_.value[i] = rng.normal(0.0, scale);
    head_b_.value[0] = 0.0;
  }
}

void LtpsBlock::collect_params(ParamRefs& out) {
  if (mode_ != RotationMode::kOriginal) out.push_back(&source_);
  if (mode_ == RotationMode::kLearned) {
    out.push_back(&head_w_);
    out.push_back(&head_b_);
  }
  if (eta_trainable_) out.push_back(&eta_);
}

double LtpsBlock::predict_theta(const Tensor& meanpool, double* z) const {
  switch (mode_) {
    case RotationMode::kFixed:
      *z = 0.0;
      return fixed_angle_;
    case RotationMode::kOriginal:
      *z = 0.0;
      return 0.0;
    case RotationMode::kLearned:
      break;
  }
  double acc = head_b_.value[0];
  for (int64_t i = 0; i < dim_; ++i) acc += head_w_.value[i] * meanpool[i];
  *z = acc;
  return (kPi / 2.0) * std::tanh(acc);
}

Tensor LtpsBlock::forward(const Tensor& f, Cache* cache) const {
  if (f.shape() != std::vector<int64_t>({h_, w_, dim_})) {
    throw ConfigError("ltps forward: feature shape mismatch");
  }
  const int64_t hw = h_ * w_;

  Tensor meanpool = Tensor::zeros({dim_});
  for (int64_t p = 0; p < hw; ++p) {
    const double* row = f.data() + p * dim_;
    for (int64_t t = 0; t < dim_; ++t) meanpool[t] += row[t];
  }
  for (int64_t t = 0; t < dim_; ++t) meanpool[t] /= static_cast<double>(hw);

  double z = 0.0;
  const double theta = predict_theta(meanpool, &z);
  Tensor rotated = rotate_points(source_.value, theta);

  TpsSolution sol;
  Tensor coords({hw, 2});
  if (!forward_warp_) {
    // Canonical grid -> rotated source; the system matrix is fixed.
    const int64_t n = k_ + 3;
    Tensor rhs = Tensor::zeros({n, 2});
    for (int64_t i = 0; i < k_; ++i) {
      rhs.at(i, 0) = rotated.at(i, 0);
      rhs.at(i, 1) = rotated.at(i, 1);
    }
    Tensor stacked({n, 2});
    target_factor_->solve(rhs.data(), stacked.data(), 2);
    stacked.ensure_finite("ltps solve");
    sol.basis = target_;
    sol.stacked = stacked;
    sol.factor = target_factor_;
    sol.weights = Tensor({k_, 2});
    for (int64_t i = 0; i < k_; ++i) {
      sol.weights.at(i, 0) = stacked.at(i, 0);
      sol.weights.at(i, 1) = stacked.at(i, 1);
    }
    sol.affine = Tensor({2, 3});
    for (int64_t r = 0; r < 3; ++r) {
      sol.affine.at(0, r) = stacked.at(k_ + r, 0);
      sol.affine.at(1, r) = stacked.at(k_ + r, 1);
    }
    matmul(q_.data(), stacked.data(), coords.data(), hw, k_ + 3, 2);
  } else {
    // Flipped direction: rotated source -> canonical grid. The kernel centers
    // move every step, so nothing can be cached.
    sol = solve_tps(rotated, target_);
    const Tensor centers = patch_centers(h_, w_);
    coords = evaluate_warp(sol, centers);
  }

  Tensor f_ltps = bilinear_sample(f, coords);
  const double eta = eta_.value[0];
  Tensor out = f;
  double* od = out.data();
  const double* ld = f_ltps.data();
  for (int64_t i = 0; i < hw * dim_; ++i) od[i] += eta * ld[i];

  if (cache) {
    cache->f = f;
    cache->meanpool = std::move(meanpool);
    cache->z = z;
    cache->theta = theta;
    cache->rotated = std::move(rotated);
    cache->sol = std::move(sol);
    cache->coords = std::move(coords);
    cache->f_ltps = std::move(f_ltps);
  }
  return out;
}

void LtpsBlock::backward(const Cache& cache, const Tensor& d_final,
                         double d_theta_extra, Tensor* d_f) {
  const int64_t hw = h_ * w_;
  if (d_final.shape() != std::vector<int64_t>({h_, w_, dim_})) {
    throw ConfigError("ltps backward: gradient shape mismatch");
  }
  const double eta = eta_.value[0];

  if (d_f) {
    double* dfd = d_f->data();
    const double* g = d_final.data();
    for (int64_t i = 0; i < hw * dim_; ++i) dfd[i] += g[i];
  }
  if (eta_trainable_) {
    double acc = 0.0;
    const double* g = d_final.data();
    const double* l = cache.f_ltps.data();
    for (int64_t i = 0; i < hw * dim_; ++i) acc += g[i] * l[i];
    eta_.grad[0] += acc;
  }

  Tensor d_fltps({hw, dim_});
  {
    double* t = d_fltps.data();
    const double* g = d_final.data();
    for (int64_t i = 0; i < hw * dim_; ++i) t[i] = eta * g[i];
  }

  Tensor d_coords = Tensor::zeros({hw, 2});
  bilinear_sample_backward(cache.f, cache.coords, d_fltps, d_f, &d_coords);

  Tensor d_rot = Tensor::zeros({k_, 2});
  if (!forward_warp_) {
    // coords = Q S, so d_S = Q^T d_coords; S = M^{-1} [rot; 0] with constant
    // symmetric M, so d_rot is the first K rows of M^{-1} d_S.
    const int64_t n = k_ + 3;
    Tensor d_stacked = Tensor::zeros({n, 2});
    matmul_tn_acc(q_.data(), d_coords.data(), d_stacked.data(), n, hw, 2);
    Tensor lambda({n, 2});
    target_factor_->solve(d_stacked.data(), lambda.data(), 2);
    for (int64_t i = 0; i < k_; ++i) {
      d_rot.at(i, 0) = lambda.at(i, 0);
      d_rot.at(i, 1) = lambda.at(i, 1);
    }
  } else {
    const Tensor centers = patch_centers(h_, w_);
    Tensor d_affine = Tensor::zeros({2, 3});
    Tensor d_weights = Tensor::zeros({k_, 2});
    evaluate_warp_backward(cache.sol, centers, d_coords, &d_affine, &d_weights,
                           nullptr, &d_rot);
    solve_tps_backward(cache.sol, d_affine, d_weights, &d_rot, nullptr);
  }

  double d_theta = d_theta_extra;
  if (mode_ == RotationMode::kOriginal) {
    Tensor sink = Tensor::zeros({k_, 2});
    rotate_points_backward(source_.value, cache.theta, d_rot, sink);
  } else {
    d_theta += rotate_points_backward(source_.value, cache.theta, d_rot,
                                      source_.grad);
  }

  if (mode_ == RotationMode::kLearned) {
    const double th = std::tanh(cache.z);
    const double dz = d_theta * (kPi / 2.0) * (1.0 - th * th);
    for (int64_t t = 0; t < dim_; ++t) {
      head_w_.grad[t] += dz * cache.meanpool[t];
    }
    head_b_.grad[0] += dz;
    if (d_f) {
      const double inv = 1.0 / static_cast<double>(hw);
      double* dfd = d_f->data();
      for (int64_t p = 0; p < hw; ++p) {
        double* row = dfd + p * dim_;
        for (int64_t t = 0; t < dim_; ++t) {
          row[t] += dz * head_w_.value[t] * inv;
        }
      }
    }
  }
}

namespace {

std::pair<Tensor, LtpsState> run_block(const Tensor& f, const ControlPointSet& cps,
                                       const Tensor* head_w, double head_b,
                                       double eta, RotationMode mode,
                                       double fixed_angle) {
  if (f.rank() != 3) throw ConfigError("ltps: features must be H x W x D");
  LtpsBlock block("ltps", cps.k, f.shape(0), f.shape(1), f.shape(2), eta, mode,
                  fixed_angle, /*forward_warp=*/false, /*eta_trainable=*/false);
  block.source().value = cps.source;
  if (mode == RotationMode::kLearned) {
    if (!head_w || head_w->numel() != f.shape(2)) {
      throw ConfigError("ltps: rotation head width mismatch");
    }
    block.head_weight().value = *head_w;
    block.head_bias().value[0] = head_b;
  }
  LtpsBlock::Cache cache;
  Tensor out = block.forward(f, &cache);
  LtpsState state;
  state.layer_index = 0;
  state.theta = cache.theta;
  state.eta = eta;
  state.enabled = true;
  return {std::move(out), state};
}

}  // namespace

std::pair<Tensor, LtpsState> ltps_forward(const Tensor& f,
                                          const ControlPointSet& cps,
                                          const Tensor& head_w, double head_b,
                                          double eta) {
  return run_block(f, cps, &head_w, head_b, eta, RotationMode::kLearned, 0.0);
}

Tensor original_tps_forward(const Tensor& f, const ControlPointSet& cps,
                            double eta) {
  return run_block(f, cps, nullptr, 0.0, eta, RotationMode::kOriginal, 0.0)
      .first;
}

Tensor fixed_angle_forward(const Tensor& f, const ControlPointSet& cps,
                           double theta_fixed, double eta) {
  if (std::abs(theta_fixed) > kPi / 2.0 + 1e-12) {
    throw ConfigError("fixed_angle_forward: |theta| must be at most pi/2");
  }
  return run_block(f, cps, nullptr, 0.0, eta, RotationMode::kFixed, theta_fixed)
      .first;
}

}  // namespace tpsalign
