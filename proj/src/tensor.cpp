#include "cae/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cae {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::io: return "io";
    case ErrorKind::bad_magic: return "bad_magic";
    case ErrorKind::unsupported_format: return "unsupported_format";
    case ErrorKind::unsupported_datatype: return "unsupported_datatype";
    case ErrorKind::bad_dimensions: return "bad_dimensions";
    case ErrorKind::truncated: return "truncated";
    case ErrorKind::version_mismatch: return "version_mismatch";
    case ErrorKind::integrity: return "integrity";
    case ErrorKind::inconsistent: return "inconsistent";
    case ErrorKind::numeric: return "numeric";
  }
  return "unknown";
}

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << " x ";
    out << shape[i];
  }
  out << ')';
  return out.str();
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

namespace {

void check_extents(const Shape& shape) {
  if (shape.empty()) fail(ErrorKind::shape, "tensor shape must have at least one axis");
  for (auto e : shape)
    if (e == 0) fail(ErrorKind::shape, "tensor extents must be positive, got " + shape_string(shape));
}

}  // namespace

template <typename Real>
Tensor<Real>::Tensor(Shape shape, Real fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(element_count(shape_), fill);
}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (element_count(shape_) != data_.size())
    fail(ErrorKind::shape, "shape " + shape_string(shape_) + " needs " +
                               std::to_string(element_count(shape_)) + " elements, got " +
                               std::to_string(data_.size()));
}

template <typename Real>
std::size_t Tensor<Real>::flat_index(std::span<const std::size_t> index) const {
  if (index.size() != shape_.size())
    fail(ErrorKind::shape, "index rank does not match tensor rank " + shape_string(shape_));
  std::size_t flat = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= shape_[i]) fail(ErrorKind::shape, "index out of range for " + shape_string(shape_));
    flat = flat * shape_[i] + index[i];
  }
  return flat;
}

template <typename Real>
Real& Tensor<Real>::at(std::initializer_list<std::size_t> index) {
  return data_[flat_index(std::span<const std::size_t>(index.begin(), index.size()))];
}

template <typename Real>
Real Tensor<Real>::at(std::initializer_list<std::size_t> index) const {
  return data_[flat_index(std::span<const std::size_t>(index.begin(), index.size()))];
}

template <typename Real>
Tensor<Real> Tensor<Real>::reshaped(Shape new_shape) const& {
  return Tensor(std::move(new_shape), data_);
}

template <typename Real>
Tensor<Real> Tensor<Real>::reshaped(Shape new_shape) && {
  return Tensor(std::move(new_shape), std::move(data_));
}

template <typename Real>
Real Tensor<Real>::sum() const {
  Real total = 0;
  for (Real v : data_) total += v;
  return total;
}

template <typename Real>
bool Tensor<Real>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
}

template class Tensor<float>;
template class Tensor<double>;

namespace {

std::atomic<int> g_threads{static_cast<int>(std::max(1u, std::thread::hardware_concurrency()))};

}  // namespace

void set_num_threads(int threads) {
  g_threads = std::max(1, threads);
#ifdef _OPENMP
  omp_set_num_threads(g_threads);
#endif
}

int num_threads() { return g_threads; }

namespace kernels {

namespace {

constexpr std::size_t kColBlock = 512;
constexpr std::size_t kDepthBlock = 128;

// Work below this many multiply-adds stays on the calling thread.
constexpr std::size_t kParallelThreshold = std::size_t{1} << 18;

template <typename Real>
void gemm_nn_block(std::size_t m, std::size_t n, std::size_t k, const Real* __restrict a,
                   const Real* __restrict b, Real* __restrict c, std::size_t j0,
                   std::size_t j1) {
  for (std::size_t p0 = 0; p0 < k; p0 += kDepthBlock) {
    const std::size_t p1 = std::min(k, p0 + kDepthBlock);
    for (std::size_t i = 0; i < m; ++i) {
      Real* __restrict crow = c + i * n;
      const Real* arow = a + i * k;
      for (std::size_t p = p0; p < p1; ++p) {
        const Real av = arow[p];
        if (av == Real(0)) continue;
        const Real* __restrict brow = b + p * n;
        for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <typename Real>
void gemm_tn_block(std::size_t m, std::size_t n, std::size_t k, const Real* __restrict a,
                   const Real* __restrict b, Real* __restrict c, std::size_t j0,
                   std::size_t j1) {
  for (std::size_t p0 = 0; p0 < k; p0 += kDepthBlock) {
    const std::size_t p1 = std::min(k, p0 + kDepthBlock);
    for (std::size_t i = 0; i < m; ++i) {
      Real* __restrict crow = c + i * n;
      for (std::size_t p = p0; p < p1; ++p) {
        const Real av = a[p * m + i];
        if (av == Real(0)) continue;
        const Real* __restrict brow = b + p * n;
        for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <typename Block>
void over_column_blocks(std::size_t n, std::size_t work, Block&& block) {
  const std::size_t blocks = (n + kColBlock - 1) / kColBlock;
#ifdef _OPENMP
  if (num_threads() > 1 && blocks > 1 && work >= kParallelThreshold) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t jb = 0; jb < static_cast<std::ptrdiff_t>(blocks); ++jb) {
      const std::size_t j0 = static_cast<std::size_t>(jb) * kColBlock;
      block(j0, std::min(n, j0 + kColBlock));
    }
    return;
  }
#endif
  (void)work;
  for (std::size_t jb = 0; jb < blocks; ++jb) {
    const std::size_t j0 = jb * kColBlock;
    block(j0, std::min(n, j0 + kColBlock));
  }
}

}  // namespace

template <typename Real>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b,
             Real* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, Real(0));
  over_column_blocks(n, m * n * k, [&](std::size_t j0, std::size_t j1) {
    gemm_nn_block(m, n, k, a, b, c, j0, j1);
  });
}

template <typename Real>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b,
             Real* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, Real(0));
  over_column_blocks(n, m * n * k, [&](std::size_t j0, std::size_t j1) {
    gemm_tn_block(m, n, k, a, b, c, j0, j1);
  });
}

template <typename Real>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b,
             Real* c, bool accumulate) {
  // Long reductions along k (the im2col weight-gradient case) are better
  // served by a transposed copy of b than by strided dot products.
  std::vector<Real> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, n, k, a, bt.data(), c, accumulate);
}

#define CAE_INSTANTIATE_GEMM(Real)                                                          \
  template void gemm_nn<Real>(std::size_t, std::size_t, std::size_t, const Real*, const Real*, \
                              Real*, bool);                                                \
  template void gemm_tn<Real>(std::size_t, std::size_t, std::size_t, const Real*, const Real*, \
                              Real*, bool);                                                \
  template void gemm_nt<Real>(std::size_t, std::size_t, std::size_t, const Real*, const Real*, \
                              Real*, bool);

CAE_INSTANTIATE_GEMM(float)
CAE_INSTANTIATE_GEMM(double)

#undef CAE_INSTANTIATE_GEMM

}  // namespace kernels

}  // namespace cae
