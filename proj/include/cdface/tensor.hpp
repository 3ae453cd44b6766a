#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "cdface/common.hpp"
#include "cdface/rng.hpp"

namespace cdface {

/// Dense row-major matrix. Sequences are stored as (frames x features);
/// plain vectors use a single row. The scalar type is a template parameter:
/// the runtime operates on float (checkpoints are 32-bit), while tests
/// instantiate double for finite-difference work.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  bool same_shape(const Tensor& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i)
      out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<T> data_;
};

template <class T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>(t.rows(), t.cols());
}

template <class T>
void fill_uniform(Tensor<T>& t, double lo, double hi, Rng& rng) {
  for (T& v : t) v = static_cast<T>(rng.uniform(lo, hi));
}

template <class T>
void fill_normal(Tensor<T>& t, double stddev, Rng& rng) {
  for (T& v : t) v = static_cast<T>(stddev * rng.normal());
}

/// C = A * B, (m x k) * (k x n).
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions disagree");
  Tensor<T> c(a.rows(), b.cols());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a(i, p);
      const T* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

/// C = A^T * B, accepting A as (k x m).
template <class T>
Tensor<T> matmul_ta(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rows() == b.rows(), "matmul_ta: row counts disagree");
  Tensor<T> c(a.cols(), b.cols());
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a.data() + p * m;
    const T* brow = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c.data() + i * n;
      const T aip = arow[i];
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

/// C = A * B^T, accepting B as (n x k).
template <class T>
Tensor<T> matmul_tb(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.cols() == b.cols(), "matmul_tb: column counts disagree");
  Tensor<T> c(a.rows(), b.rows());
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b.data() + j * k;
      T acc{};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c(i, j) = acc;
    }
  }
  return c;
}

/// Euclidean norm of the element-wise difference of two equal-shape arrays.
template <class T>
T frame_distance(std::span<const T> a, std::span<const T> b) {
  T acc{};
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

template <class T>
T tensor_distance(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.same_shape(b), "tensor_distance: shape mismatch");
  T acc{};
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace cdface
