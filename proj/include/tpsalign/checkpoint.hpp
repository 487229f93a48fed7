#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tpsalign/tensor.hpp"

namespace tpsalign {

// An ordered name -> tensor table; the on-disk format sorts by name so a
// given state always serializes to the same bytes.
struct NamedTensors {
  std::vector<std::pair<std::string, Tensor>> items;

  void put(const std::string& name, Tensor t);
  const Tensor* find(const std::string& name) const;
  // Lookup that throws ConfigError when the name is missing.
  const Tensor& at(const std::string& name) const;
  double scalar(const std::string& name) const;
  void put_scalar(const std::string& name, double v);
};

// Text table: a format line, the tensor count, then per tensor one header
// line (name, dtype tag, rank, extents) followed by the row-major values,
// one per line, printed with 17 significant digits so doubles round-trip
// bit-exactly.
void save_named_tensors(const std::string& path, const NamedTensors& table);
NamedTensors load_named_tensors(const std::string& path);

}  // namespace tpsalign
