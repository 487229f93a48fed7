#include "tpsalign/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

namespace tpsalign {

namespace {
int64_t product(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t e : shape) {
    if (e < 0) throw ConfigError("tensor extent must be non-negative");
    n *= e;
  }
  return n;
}
}  // namespace

Tensor::Tensor(std::vector<int64_t> shape_in)
    : shape_(std::move(shape_in)), v_(static_cast<size_t>(product(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int64_t> shape_in, std::vector<double> values)
    : shape_(std::move(shape_in)), v_(std::move(values)) {
  if (product(shape_) != static_cast<int64_t>(v_.size()))
    throw ConfigError("tensor value count does not match shape");
}

Tensor Tensor::zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::from_values(std::vector<int64_t> shape, std::initializer_list<double> values) {
  return Tensor(std::move(shape), std::vector<double>(values));
}

void Tensor::fill(double value) {
  for (double& x : v_) x = value;
}

void Tensor::reshape(std::vector<int64_t> new_shape) {
  if (product(new_shape) != numel()) throw ConfigError("reshape changes value count");
  shape_ = std::move(new_shape);
}

Tensor Tensor::reshaped(std::vector<int64_t> new_shape) const {
  Tensor out = *this;
  out.reshape(std::move(new_shape));
  return out;
}

bool Tensor::all_finite() const {
  for (double x : v_)
    if (!std::isfinite(x)) return false;
  return true;
}

void Tensor::ensure_finite(const std::string& what) const {
  if (!all_finite()) throw NumericError("non-finite values in " + what);
}

void Tensor::dump(std::ostream& os) const {
  os << "shape:";
  for (int64_t e : shape_) os << ' ' << e;
  os << '\n';
  char buf[64];
  for (double x : v_) {
    std::snprintf(buf, sizeof buf, "%.17g", x);
    os << buf << '\n';
  }
}

std::string Tensor::dump_string() const {
  std::ostringstream ss;
  dump(ss);
  return ss.str();
}

void axpy(double alpha, const Tensor& x, Tensor& y) {
  if (x.numel() != y.numel()) throw ConfigError("axpy size mismatch");
  const double* xs = x.data();
  double* ys = y.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) ys[i] += alpha * xs[i];
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw ConfigError("dot size mismatch");
  const double* as = a.data();
  const double* bs = b.data();
  double s = 0.0;
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) s += as[i] * bs[i];
  return s;
}

}  // namespace tpsalign
