#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "tpsalign/param.hpp"
#include "tpsalign/rng.hpp"
#include "tpsalign/tensor.hpp"
#include "tpsalign/tps.hpp"

namespace tpsalign {

struct EncoderConfig {
  int64_t depth = 4;
  int64_t dim = 64;
  int64_t heads = 4;
  int64_t patch = 8;
  int64_t image_h = 64;
  int64_t image_w = 32;
  int64_t in_channels = 1;
  int64_t num_classes = 2;
  int64_t mlp_ratio = 4;

  std::vector<int64_t> placement;    // layer indices carrying an LTPS block
  double eta = 0.1;                  // fusion factor, broadcast per layer
  std::vector<double> eta_per_layer; // optional per-layer override
  int64_t control_points = 4;
  RotationMode rotation = RotationMode::kLearned;
  double fixed_angle = 0.0;
  bool forward_warp = false;
  bool eta_trainable = false;

  int64_t grid_h() const { return image_h / patch; }
  int64_t grid_w() const { return image_w / patch; }
  int64_t tokens() const { return 2 + grid_h() * grid_w(); }
  double eta_for(int64_t layer) const {
    if (eta_per_layer.empty()) return eta;
    return eta_per_layer.at(static_cast<size_t>(layer));
  }
  bool placed(int64_t layer) const;
  void validate() const;
};

// Layer index sets mirroring the placement ablation. "4" scales down to
// ceil(depth/3) below depth 12.
std::vector<int64_t> placement_presets(const std::string& name, int64_t depth);

// Splits an image into non-overlapping patches, row-major over the patch
// grid, each flattened (channel, then row, then column) into one row.
Tensor extract_patches(const Tensor& image, int64_t patch);

class Encoder {
 public:
  explicit Encoder(const EncoderConfig& cfg);

  struct BlockCache {
    LtpsBlock::Cache ltps;  // populated only on placed layers
    Tensor x_ltps;          // S x D, block input after LTPS fusion
    Tensor ln1_xhat;        // S x D
    Tensor ln1_rstd;        // S
    Tensor ln1_out;         // S x D
    Tensor q, k, v;         // S x D
    Tensor probs;           // heads x S x S
    Tensor ctx;             // S x D
    Tensor x_attn;          // S x D, after the attention residual
    Tensor ln2_xhat;        // S x D
    Tensor ln2_rstd;        // S
    Tensor ln2_out;         // S x D
    Tensor h_pre;           // S x (ratio D)
    Tensor h_act;           // S x (ratio D)
    Tensor x_out;           // S x D
  };

  struct Cache {
    Tensor patches;  // (H W) x (patch^2 C_in)
    int64_t view = 0;
    Tensor x0;  // S x D
    std::vector<BlockCache> blocks;
    Tensor lnf_xhat;  // D
    double lnf_rstd = 0.0;
    Tensor embed_raw;     // D, cls row after the final norm
    double inv_norm = 0.0;
    Tensor embedding;  // D, l2-normalized
    std::vector<LtpsState> states;
  };

  struct Output {
    Tensor embedding;  // D, l2-normalized retrieval embedding
    Tensor logits;     // C
    std::vector<LtpsState> states;
  };

  // view: 0 = ground, 1 = aerial.
  Output forward(const Tensor& image, int64_t view, Cache* cache) const;

  // Accumulates parameter gradients for one sample. d_embedding is the
  // cotangent on the normalized embedding, d_logits on the logits;
  // d_theta_extra carries one direct angle cotangent per placed layer (the
  // deformation penalty), in placement order, or empty when unused.
  void backward(const Cache& cache, const Tensor& d_embedding,
                const Tensor& d_logits,
                const std::vector<double>& d_theta_extra);

  void init(Rng& rng);
  void collect_params(ParamRefs& out);
  void zero_grads();

  const EncoderConfig& config() const { return cfg_; }
  // Classifier weight rows (C x D), the prototype source for the
  // classification-matrix DAM variant.
  Param& classifier() { return cls_w_; }
  std::vector<LtpsBlock*> ltps_blocks();

 private:
  struct Layer {
    Param ln1_g, ln1_b;
    Param wq, bq, wk, bk, wv, bv, wo, bo;
    Param ln2_g, ln2_b;
    Param m1_w, m1_b, m2_w, m2_b;
    std::unique_ptr<LtpsBlock> ltps;  // null when the layer has no LTPS
  };

  void layer_norm(const Tensor& x, const Param& g, const Param& b,
                  Tensor& xhat, Tensor& rstd, Tensor& out) const;
  void layer_norm_backward(const Tensor& d_out, const Tensor& xhat,
                           const Tensor& rstd, Param& g, Param& b,
                           Tensor& d_x) const;

  EncoderConfig cfg_;
  Param patch_w_;  // (patch^2 C_in) x D
  Param patch_b_;  // D
  Param cls_tok_;  // D
  Param view_tok_; // 2 x D
  Param pos_;      // S x D
  std::vector<Layer> layers_;
  Param lnf_g_, lnf_b_;
  Param cls_w_;  // C x D
  Param cls_b_;  // C
};

}  // namespace tpsalign
