#pragma once

#include <cstdint>
#include <vector>

#include "tpsalign/checkpoint.hpp"
#include "tpsalign/param.hpp"
#include "tpsalign/tensor.hpp"

namespace tpsalign {

// First-order adaptive optimizer with decoupled weight decay. Decay applies
// only to rank >= 2 tensors (weight matrices); biases, gains, tokens and
// angles are left undecayed.
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  int64_t step_count = 0;

  std::vector<Tensor> m;
  std::vector<Tensor> v;

  void init(const ParamRefs& params);
  void step(ParamRefs& params, double lr);

  // Moment tensors serialize as adam.m.<param> / adam.v.<param>, the step
  // counter as opt.step.
  void save(NamedTensors* out, const ParamRefs& params) const;
  void load(const NamedTensors& in, const ParamRefs& params);
};

// Linear warm-up to base, then cosine decay to zero over the remainder.
// step is 0-based (the step about to run).
double schedule_lr(double base, int64_t step, int64_t total_steps,
                   int64_t warmup_steps);

}  // namespace tpsalign
