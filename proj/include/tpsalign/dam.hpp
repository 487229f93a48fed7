#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tpsalign/param.hpp"
#include "tpsalign/rng.hpp"
#include "tpsalign/tensor.hpp"

namespace tpsalign {

inline constexpr double kNormGuard = 1e-12;

enum class DamVariant { kInnerBatch, kMemoryBank, kClassificationMatrix };

DamVariant dam_variant_from_string(const std::string& s);
std::string dam_variant_to_string(DamVariant v);

struct DamConfig {
  DamVariant variant = DamVariant::kInnerBatch;
  double momentum = 0.9;  // memory bank only
};

// Per-class unit-norm prototype vectors, one row per class id present.
struct PrototypeTable {
  std::vector<int64_t> class_ids;  // sorted, unique
  Tensor protos;                   // C_present x D
  std::vector<int64_t> counts;     // samples that formed each row

  // Row index of a class id, or -1 when absent.
  int64_t row_of(int64_t class_id) const;
};

// Eq.-style double normalization: each feature l2-normalized, averaged per
// class (in ascending sample-index order), and the mean re-normalized.
// Throws NumericError when any feature or class mean has norm < 1e-12.
PrototypeTable compute_prototypes(const Tensor& features,
                                  const std::vector<int64_t>& labels);

// Pulls d_protos (C_present x D, rows aligned with table) back to the input
// features. Only meaningful for prototypes built by compute_prototypes.
void compute_prototypes_backward(const Tensor& features,
                                 const std::vector<int64_t>& labels,
                                 const PrototypeTable& table,
                                 const Tensor& d_protos, Tensor& d_features);

// Two-layer mask MLP: m = sigmoid(W2^T relu(W1^T f + b1) + b2), hidden width
// floor(D/2).
class MaskGenerator {
 public:
  MaskGenerator() = default;
  MaskGenerator(std::string name_prefix, int64_t dim);

  struct Cache {
    Tensor f;      // D input
    Tensor h_pre;  // hidden pre-activation
    Tensor h_act;  // relu output
    Tensor mask;   // D sigmoid output
  };

  Tensor forward(const Tensor& f, Cache* cache) const;
  // Accumulates parameter gradients; d_f accumulated when non-null.
  void backward(const Cache& cache, const Tensor& d_mask, Tensor* d_f);

  void init(Rng& rng);
  void collect_params(ParamRefs& out);

  int64_t dim() const { return dim_; }
  int64_t hidden() const { return hidden_; }
  Param& w1() { return w1_; }
  Param& b1() { return b1_; }
  Param& w2() { return w2_; }
  Param& b2() { return b2_; }

 private:
  int64_t dim_ = 0, hidden_ = 0;
  Param w1_;  // D x hidden
  Param b1_;  // hidden
  Param w2_;  // hidden x D
  Param b2_;  // D
};

Tensor mask_prototype(const Tensor& p, const Tensor& m);

// Persistent cross-batch prototype memory (memory_bank variant).
struct DamBank {
  PrototypeTable table;
};

// Resolves the prototype source for a batch. memory_bank updates the bank in
// place (p <- Norm(mu p + (1-mu) batch mean)) before returning its entries;
// classes the bank has not seen fall back to, and seed, the batch prototype.
// classification_matrix normalizes the classifier rows of the batch classes.
PrototypeTable select_prototypes(const DamConfig& config,
                                 const PrototypeTable& batch, DamBank* bank,
                                 const Tensor* classifier);

struct DamStepOutput {
  Tensor masks;              // N x D
  Tensor masked_protos;      // N x D, m_i * p_{c_i}
  Tensor masked_feats;       // N x D, m_i * f_i
  Tensor protos_per_sample;  // N x D, p_{c_i} rows (inputs to the align loss)
  PrototypeTable used;       // prototype source after variant resolution
  std::vector<MaskGenerator::Cache> caches;
};

DamStepOutput dam_training_step(const Tensor& features,
                                const std::vector<int64_t>& labels,
                                const MaskGenerator& gen,
                                const DamConfig& config, DamBank* bank,
                                const Tensor* classifier);

// Training-composition backward: d_masks flows through the generator (into
// its parameters and the input features); d_protos_per_sample flows into the
// features only for the inner_batch variant (bank and classifier prototypes
// are constants of the step).
void dam_training_step_backward(const Tensor& features,
                                const std::vector<int64_t>& labels,
                                MaskGenerator& gen, const DamConfig& config,
                                const DamStepOutput& out, const Tensor& d_masks,
                                const Tensor& d_protos_per_sample,
                                Tensor& d_features);

}  // namespace tpsalign
