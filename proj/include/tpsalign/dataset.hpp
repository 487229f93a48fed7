#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tpsalign/tensor.hpp"

namespace tpsalign {

// Parameters of the procedural cross-view benchmark. Every identity is a
// glyph: a shared set of eight gray levels arranged in an identity-specific
// permutation over a 4 x 2 cell grid inside an oval body, plus a bright
// orientation beacon at the head end. All identities share the same level
// multiset, so global intensity statistics carry no identity signal; only the
// spatial arrangement does, which makes retrieval alignment-bound.
struct SyntheticSpec {
  int64_t identities = 40;
  int64_t samples_per_view = 4;  // per identity, per view
  int64_t image_h = 64;
  int64_t image_w = 32;
  double ground_angle = 5.0;    // degrees, theta ~ U(-g, g)
  double aerial_angle = 90.0;   // degrees, theta ~ U(-a, a)
  double squash_lo = 0.8;       // vertical squash factor range (aerial)
  double squash_hi = 0.95;
  double occlusion_prob = 0.3;  // aerial occlusion band probability
  double occlusion_width = 0.2; // band height as a fraction of image height
  double noise_sigma = 0.02;
  uint64_t seed = 1;

  void validate() const;
};

struct SampleMeta {
  std::string path;  // relative to the dataset root
  int64_t identity = 0;
  int64_t view = 0;  // 0 = ground, 1 = aerial
  std::string split;  // "train" or "test"
  double angle_deg = 0.0;
  double squash = 1.0;
  bool occluded = false;
};

// Renders one sample deterministically; identity appearance and per-sample
// pose draw from independent seed streams, so any subset regenerates
// identically.
Tensor render_sample(const SyntheticSpec& spec, int64_t identity, int64_t view,
                     int64_t index);

// Writes images/ (binary PGM), manifest.csv (path,identity,view,split) and
// gen_meta.csv (path,angle_deg,squash,occluded) under out_dir. The first half
// of the identities form the train split, the rest test. Returns the metas in
// manifest order.
std::vector<SampleMeta> generate_dataset(const SyntheticSpec& spec,
                                         const std::string& out_dir);

// In-memory dataset loaded back from a generated directory.
struct Dataset {
  int64_t image_h = 0;
  int64_t image_w = 0;
  std::vector<Tensor> images;  // each 1 x H x W
  std::vector<int64_t> identities;
  std::vector<int64_t> views;
  std::vector<int8_t> is_train;

  std::vector<int64_t> train_indices;
  std::vector<int64_t> test_indices;
  // compact training labels in [0, num_train_classes), aligned with
  // train_indices
  std::vector<int64_t> train_labels;
  int64_t num_train_classes = 0;
};

Dataset load_dataset(const std::string& dir);

}  // namespace tpsalign
