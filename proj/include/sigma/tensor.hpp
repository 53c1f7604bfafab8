#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace sigma {

// Dense row-major array of 64-bit floats with shape metadata. Storage allows
// any rank; matrix math in the graph accepts rank 1 (a single row) or rank 2.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor scalar(double value);
  static Tensor row(std::vector<double> values);
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> values);
  static Tensor identity(std::size_t n);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Matrix view; requires rank <= 2. Rank-1 tensors are a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator()(std::size_t i, std::size_t j);
  double operator()(std::size_t i, std::size_t j) const;
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  double item() const;  // requires size() == 1
  Tensor reshaped(std::vector<std::size_t> shape) const;

  std::string shape_str() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// True when shapes and every payload bit agree.
bool bit_equal(const Tensor& a, const Tensor& b);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace sigma
