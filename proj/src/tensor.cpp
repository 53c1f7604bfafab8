#include "sigma/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "sigma/errors.hpp"

namespace sigma {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_product(shape_)) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str());
  }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = value;
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1, 1}, {value}); }

Tensor Tensor::row(std::vector<double> values) {
  std::size_t n = values.size();
  return Tensor({1, n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t r, std::size_t c, std::vector<double> values) {
  return Tensor({r, c}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (rank() > 2) throw DimensionError("matrix view on rank-" + std::to_string(rank()) + " tensor");
  return rank() == 2 ? shape_[0] : 1;
}

std::size_t Tensor::cols() const {
  if (rank() > 2) throw DimensionError("matrix view on rank-" + std::to_string(rank()) + " tensor");
  if (rank() == 2) return shape_[1];
  return rank() == 1 ? shape_[0] : 0;
}

double& Tensor::operator()(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }

double Tensor::operator()(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of size " + std::to_string(size()));
  return data_[0];
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
  if (shape_product(shape) != size()) {
    throw DimensionError("cannot reshape " + shape_str() + " to new element count");
  }
  return Tensor(std::move(shape), data_);
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << "x";
    os << shape_[i];
  }
  os << "]";
  return os.str();
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace sigma
