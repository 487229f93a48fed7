#pragma once

#include <string>
#include <vector>

#include "tpsalign/tensor.hpp"

namespace tpsalign {

// A named learnable tensor with its gradient accumulator.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor::zeros(value.shape());
  }

  void zero_grad() { grad.fill(0.0); }
};

using ParamRefs = std::vector<Param*>;

}  // namespace tpsalign
