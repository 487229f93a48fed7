#pragma once

#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <string>
#include <vector>

#include "tpsalign/common.hpp"

namespace tpsalign {

// Dense row-major tensor of 64-bit floats. Values are owned; shape is a list
// of extents whose product always equals the value count.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape_in);
  Tensor(std::vector<int64_t> shape_in, std::vector<double> values);

  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, double value);
  static Tensor from_values(std::vector<int64_t> shape, std::initializer_list<double> values);

  int64_t numel() const { return static_cast<int64_t>(v_.size()); }
  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t shape(int d) const { return shape_[static_cast<size_t>(d)]; }
  int64_t extent(int d) const { return shape_[static_cast<size_t>(d)]; }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  std::vector<double>& values() { return v_; }
  const std::vector<double>& values() const { return v_; }

  double& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }

  double& at(int64_t i) { return v_[static_cast<size_t>(i)]; }
  double& at(int64_t i, int64_t j) { return v_[static_cast<size_t>(i * shape_[1] + j)]; }
  double& at(int64_t i, int64_t j, int64_t k) {
    return v_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double at(int64_t i) const { return v_[static_cast<size_t>(i)]; }
  double at(int64_t i, int64_t j) const { return v_[static_cast<size_t>(i * shape_[1] + j)]; }
  double at(int64_t i, int64_t j, int64_t k) const {
    return v_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  void fill(double value);
  // Reinterprets the value buffer under a new shape with the same numel.
  void reshape(std::vector<int64_t> new_shape);
  // Copying variant of reshape.
  Tensor reshaped(std::vector<int64_t> new_shape) const;

  bool all_finite() const;
  // Throws NumericError naming `what` if any value is NaN or infinite.
  void ensure_finite(const std::string& what) const;

  // Text table: one shape line ("shape: e0 e1 ..."), then one value per line
  // with 17 significant digits.
  void dump(std::ostream& os) const;
  std::string dump_string() const;

 private:
  std::vector<int64_t> shape_;
  std::vector<double> v_;
};

// y += alpha * x, elementwise over equal-length buffers.
void axpy(double alpha, const Tensor& x, Tensor& y);

double dot(const Tensor& a, const Tensor& b);

}  // namespace tpsalign
