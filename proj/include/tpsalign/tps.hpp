#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "tpsalign/linalg.hpp"
#include "tpsalign/param.hpp"
#include "tpsalign/rng.hpp"
#include "tpsalign/tensor.hpp"

namespace tpsalign {

// Ridge term added to the kernel block of the interpolation system. Keeps the
// solve well posed when a predicted rotation drives control points close
// together, while leaving exact affine configurations reproducible to within
// 1e-8.
inline constexpr double kTpsRidge = 1e-10;

// Regular sqrt(K) x sqrt(K) grid spanning [-1,1]^2 inclusive, row-major with x
// varying fastest. K must be a perfect square with K >= 4.
Tensor control_point_grid(int64_t k);

// Normalized centers of an H x W patch grid, (H*W) x 2 rows of (x, y),
// row-major over the grid: x_j = -1 + (2j+1)/W, y_i = -1 + (2i+1)/H.
Tensor patch_centers(int64_t h, int64_t w);

// U(r) = r^2 log(r^2), with U(0) = 0.
double tps_kernel(double r);
double tps_kernel_r2(double r2);
// dU/dp = tps_kernel_grad_factor(r2) * (p - b); the factor is 2(log r^2 + 1),
// defined as 0 at r = 0 (the kernel is stationary there).
double tps_kernel_grad_factor(double r2);

// Row vectors rotated by theta: out_i = p_i R(theta)^T.
Tensor rotate_points(const Tensor& pts, double theta);
// Accumulates d_pts and returns the scalar contribution to d_theta.
double rotate_points_backward(const Tensor& pts, double theta,
                              const Tensor& d_rot, Tensor& d_pts);

struct TpsSolution {
  Tensor affine;   // 2 x 3, [linear | translation]
  Tensor weights;  // K x 2 kernel weights
  Tensor basis;    // K x 2 kernel centers (the interpolation sites)
  // Retained for the backward pass.
  Tensor stacked;                          // (K+3) x 2 raw solution [W; C]
  std::shared_ptr<const LuFactor> factor;  // factorization of the system
};

// Solves the augmented interpolation system mapping basis -> targets:
//   [Phi + ridge*I  P] [W]   [targets]
//   [P^T            0] [C] = [0]
// with P rows (x, y, 1). Throws NumericError on duplicated basis points or a
// rank-deficient system (e.g. collinear basis).
TpsSolution solve_tps(const Tensor& basis, const Tensor& targets);

// Backward through the solve. d_affine is 2x3, d_weights K x 2; gradients are
// accumulated into d_basis / d_targets when non-null. Passing d_basis = null
// skips the (K+3)^2 sensitivity term, which is exact when the basis is a
// constant.
void solve_tps_backward(const TpsSolution& sol, const Tensor& d_affine,
                        const Tensor& d_weights, Tensor* d_basis,
                        Tensor* d_targets);

// T(p) = A [p;1] + sum_i w_i U(|p - b_i|) for each row of points (N x 2).
Tensor evaluate_warp(const TpsSolution& sol, const Tensor& points);
void evaluate_warp_backward(const TpsSolution& sol, const Tensor& points,
                            const Tensor& d_out, Tensor* d_affine,
                            Tensor* d_weights, Tensor* d_points,
                            Tensor* d_basis);

// Samples f (H x W x D) at normalized coords with bilinear interpolation;
// coordinates outside [-1,1] clamp to the border patch. coords may be N x 2
// (returns N x D) or H' x W' x 2 (returns H' x W' x D).
Tensor bilinear_sample(const Tensor& f, const Tensor& coords);
// d_f / d_coords accumulated when non-null. Clamped coordinates receive zero
// coordinate gradient.
void bilinear_sample_backward(const Tensor& f, const Tensor& coords,
                              const Tensor& d_out, Tensor* d_f,
                              Tensor* d_coords);

// Learnable source points plus the fixed canonical grid they start from.
struct ControlPointSet {
  Tensor source;  // K x 2
  Tensor target;  // K x 2, never mutated
  int64_t k = 0;

  static ControlPointSet regular(int64_t k);
};

// theta = (pi/2) tanh(w . meanpool(F) + b) over an H x W x D feature grid.
double predict_rotation(const Tensor& f, const Tensor& w, double b);
// Backward for a scalar cotangent d_theta; accumulates into the outputs that
// are non-null.
void predict_rotation_backward(const Tensor& f, const Tensor& w, double b,
                               double d_theta, Tensor* d_f, Tensor* d_w,
                               double* d_b);

enum class RotationMode {
  kLearned,    // theta from the rotation head
  kFixed,      // theta is a constant; source points stay learnable
  kOriginal,   // theta = 0 and source points are frozen
};

RotationMode rotation_mode_from_string(const std::string& s);
std::string rotation_mode_to_string(RotationMode m);

struct LtpsState {
  int64_t layer_index = -1;
  double theta = 0.0;
  double eta = 0.0;
  bool enabled = false;
};

// One feature-space alignment block: predicts a rotation from mean-pooled
// features, rotates the source control points, solves the spline mapping the
// canonical grid onto them, resamples the feature map along the warp and
// fuses the result back through a residual with weight eta.
class LtpsBlock {
 public:
  LtpsBlock(std::string name_prefix, int64_t k, int64_t h, int64_t w,
            int64_t dim, double eta, RotationMode mode, double fixed_angle,
            bool forward_warp, bool eta_trainable);

  struct Cache {
    Tensor f;         // input features H x W x D
    Tensor meanpool;  // D
    double z = 0.0;   // pre-activation of the rotation head
    double theta = 0.0;
    Tensor rotated;   // K x 2
    TpsSolution sol;
    Tensor coords;    // (H*W) x 2
    Tensor f_ltps;    // (H*W) x D resampled features
  };

  // Returns F + eta * F_ltps, shape H x W x D.
  Tensor forward(const Tensor& f, Cache* cache) const;

  // d_theta_extra carries gradient contributions that act on theta directly
  // (the deformation penalty). Accumulates parameter gradients internally and
  // the input gradient into d_f when non-null.
  void backward(const Cache& cache, const Tensor& d_final,
                double d_theta_extra, Tensor* d_f);

  void collect_params(ParamRefs& out);

  int64_t k() const { return k_; }
  int64_t h() const { return h_; }
  int64_t w() const { return w_; }
  double eta() const { return eta_.value[0]; }
  RotationMode mode() const { return mode_; }
  double fixed_angle() const { return fixed_angle_; }
  bool forward_warp() const { return forward_warp_; }

  Param& source() { return source_; }
  Param& head_weight() { return head_w_; }
  Param& head_bias() { return head_b_; }
  Param& eta_param() { return eta_; }
  const Tensor& target() const { return target_; }

  // Initializes the rotation head weights from rng (source starts at the
  // canonical grid, head near zero so training begins close to identity).
  void init(Rng& rng);

 private:
  double predict_theta(const Tensor& meanpool, double* z) const;

  int64_t k_, h_, w_, dim_;
  RotationMode mode_;
  double fixed_angle_;
  bool forward_warp_;
  bool eta_trainable_;

  Param source_;  // K x 2
  Param head_w_;  // D
  Param head_b_;  // 1
  Param eta_;     // 1 (registered only when trainable)
  Tensor target_;  // K x 2 canonical grid

  // Constant per block when warping backward: the system matrix depends only
  // on the canonical grid, so it is factored once, and the warp at the fixed
  // patch centers is the linear map coords = Q * stacked.
  std::shared_ptr<const LuFactor> target_factor_;
  Tensor q_;  // (H*W) x (K+3)
};

// One-shot functional forms of the block, for callers that hold raw control
// points rather than a configured layer (demos, bindings, tests).
std::pair<Tensor, LtpsState> ltps_forward(const Tensor& f,
                                          const ControlPointSet& cps,
                                          const Tensor& head_w, double head_b,
                                          double eta);
Tensor original_tps_forward(const Tensor& f, const ControlPointSet& cps,
                            double eta);
Tensor fixed_angle_forward(const Tensor& f, const ControlPointSet& cps,
                           double theta_fixed, double eta);

}  // namespace tpsalign
