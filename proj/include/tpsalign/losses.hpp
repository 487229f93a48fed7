#pragma once

#include <cstdint>
#include <vector>

#include "tpsalign/tensor.hpp"

namespace tpsalign {

struct LossConfig {
  double lambda = 0.1;    // entropy weight inside the mask loss
  double alpha = 0.1;     // deformation weight
  double beta = 1.0;      // mask-loss weight
  double margin = 0.3;    // triplet margin
  double smoothing = 0.0; // label smoothing

  void validate() const;
};

struct LossBreakdown {
  double id = 0.0;
  double triplet = 0.0;
  double deform = 0.0;
  double align = 0.0;
  double entropy = 0.0;
  double mask = 0.0;
  double total = 0.0;
};

// Mean cross-entropy over the batch with optional label smoothing, using a
// stable log-sum-exp. d_logits, when non-null, is accumulated into.
double id_loss(const Tensor& logits, const std::vector<int64_t>& labels,
               double smoothing, Tensor* d_logits);

// Batch-hard triplet loss on Euclidean distances. Requires >= 2 classes and
// >= 2 samples in every class present (PK sampling guarantees it); otherwise
// throws ConfigError. Ties resolve to the lowest index.
double triplet_loss(const Tensor& features, const std::vector<int64_t>& labels,
                    double margin, Tensor* d_features);

// (1/L) sum |theta_l|; 0 for an empty list; subgradient 0 at theta = 0.
double deformation_loss(const std::vector<double>& angles,
                        std::vector<double>* d_angles);

// (1/N) sum ||Norm(m*p) - Norm(m*f)||^2 with Norm(v) = v / sqrt(|v|^2+1e-12).
// guarded_events counts masked vectors whose squared norm fell below the
// guard. Gradient outputs are accumulated into when non-null.
double align_loss(const Tensor& masks, const Tensor& features,
                  const Tensor& protos, Tensor* d_masks, Tensor* d_features,
                  Tensor* d_protos, int64_t* guarded_events);

// Mean binary entropy of mask entries, clamped to [1e-7, 1-1e-7] before the
// logs. The lambda weight is applied once, in mask_loss, never here.
double entropy_loss(const Tensor& masks, Tensor* d_masks);

double mask_loss(double align, double entropy, double lambda);

LossBreakdown total_loss(double id, double triplet, double deform,
                         double align, double entropy, const LossConfig& cfg);

}  // namespace tpsalign
