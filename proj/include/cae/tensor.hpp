#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cae/error.hpp"

namespace cae {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array. The last axis is contiguous.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }
  static Tensor scalar(Real value) { return Tensor(Shape{1}, value); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<Real> data() noexcept { return data_; }
  std::span<const Real> data() const noexcept { return data_; }
  Real* raw() noexcept { return data_.data(); }
  const Real* raw() const noexcept { return data_.data(); }
  const std::vector<Real>& values() const noexcept { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  std::size_t flat_index(std::span<const std::size_t> index) const;
  Real& at(std::initializer_list<std::size_t> index);
  Real at(std::initializer_list<std::size_t> index) const;

  Tensor reshaped(Shape new_shape) const&;
  Tensor reshaped(Shape new_shape) &&;

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data_.begin(), data_.end());
    return Tensor<Other>(shape_, std::move(out));
  }

  Real sum() const;
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<Real> data_;
};

std::vector<std::size_t> strides_of(const Shape& shape);

// Number of worker threads used by the heavy kernels. Results never depend on
// this value: work is partitioned so every output element is produced by a
// single thread in a fixed order.
void set_num_threads(int threads);
int num_threads();

namespace kernels {

// c[m x n] (+)= a[m x k] * b[k x n], row-major. When accumulate is false c is
// overwritten.
template <typename Real>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const Real* a,
             const Real* b, Real* c, bool accumulate);

// c[m x n] (+)= a^T * b with a stored as [k x m].
template <typename Real>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const Real* a,
             const Real* b, Real* c, bool accumulate);

// c[m x n] (+)= a * b^T with b stored as [n x k].
template <typename Real>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const Real* a,
             const Real* b, Real* c, bool accumulate);

}  // namespace kernels

}  // namespace cae
