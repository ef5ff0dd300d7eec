#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "cae/tape.hpp"

namespace cae {

enum class Mode { train, infer };

// Non-deduced so that a plain Var converts at call sites.
template <typename Real>
using OptionalVar = std::optional<std::type_identity_t<Var<Real>>>;

enum class Padding {
  same,   // zero padded, output extent ceil(in / stride)
  valid,  // no padding, output extent (in - k) / stride + 1
};

struct ConvGeometry {
  std::vector<std::size_t> stride;  // one per spatial axis; empty means all 1
  Padding padding = Padding::same;
};

// Kernel is (out_ch x in_ch x k...) for a conv mapping in_ch -> out_ch. The
// transposed convolution built from the same kernel maps out_ch -> in_ch, so
// its bias (when present) has in_ch entries.
template <typename Real>
struct ConvParams {
  Tensor<Real> kernel;
  Tensor<Real> bias;  // empty for no bias
  ConvGeometry geometry;
};

// Spatial output extents of a conv over `in` extents.
std::vector<std::size_t> conv_output_extents(std::span<const std::size_t> in,
                                             std::span<const std::size_t> kernel,
                                             const ConvGeometry& geometry);

// Spatial output extents of the transposed conv; inverts conv_output_extents.
std::vector<std::size_t> deconv_output_extents(std::span<const std::size_t> in,
                                               std::span<const std::size_t> kernel,
                                               const ConvGeometry& geometry);

// x is (batch x channels x spatial...) with 2 or 3 spatial axes. The op is
// cross-correlation (no kernel flip).
template <typename Real>
Var<Real> conv(Var<Real> x, Var<Real> kernel, OptionalVar<Real> bias,
               const ConvGeometry& geometry);

// Linear adjoint of conv with the same kernel and geometry. `output_extents`
// pins the spatial size when the forward size arithmetic is ambiguous (odd
// extents with stride > 1).
template <typename Real>
Var<Real> deconv(Var<Real> y, Var<Real> kernel, OptionalVar<Real> bias,
                 const ConvGeometry& geometry,
                 std::optional<std::vector<std::size_t>> output_extents = std::nullopt);

template <typename Real>
Tensor<Real> conv(const Tensor<Real>& x, const ConvParams<Real>& p);
template <typename Real>
Tensor<Real> deconv(const Tensor<Real>& y, const ConvParams<Real>& p,
                    std::optional<std::vector<std::size_t>> output_extents = std::nullopt);

// Argmax record of one max-pooling application.
struct PoolSwitches {
  Shape input_shape;   // full (batch x channels x spatial...) shape of the pooled input
  Shape output_shape;  // shape of the pooled values
  std::vector<std::size_t> window;
  // Per output cell: flat spatial index of the winning input within its
  // (batch, channel) plane.
  std::vector<std::uint32_t> argmax;
};

template <typename Real>
struct PoolResult {
  Var<Real> values;
  std::shared_ptr<const PoolSwitches> switches;
};

// Window and stride 2 on every spatial axis unless `window` says otherwise
// (entries of 1 leave an axis alone). Odd extents keep the truncated final
// window, so pooled extent is ceil(n / 2). Ties go to the lowest flat index.
template <typename Real>
PoolResult<Real> maxpool(Var<Real> x, std::vector<std::size_t> window = {});

// Places each value at its recorded argmax; every other position is zero.
template <typename Real>
Var<Real> unpool(Var<Real> y, std::shared_ptr<const PoolSwitches> switches);

template <typename Real>
struct BatchNormState {
  Tensor<Real> running_mean;
  Tensor<Real> running_var;
  Real momentum = Real(0.1);
  Real epsilon = Real(1e-5);

  static BatchNormState identity(std::size_t channels) {
    return {Tensor<Real>({channels}, Real(0)), Tensor<Real>({channels}, Real(1))};
  }
};

// Normalizes over every axis except axis 1 (channels). Train mode uses batch
// statistics and folds them into the running averages:
//   running = (1 - momentum) * running + momentum * batch_stat
// with the biased batch variance. Infer mode uses the running statistics only.
template <typename Real>
Var<Real> batchnorm(Var<Real> x, Var<Real> gamma, Var<Real> beta, BatchNormState<Real>& state,
                    Mode mode);

// x (batch x in) * w (in x out) + b (out).
template <typename Real>
Var<Real> dense(Var<Real> x, Var<Real> w, OptionalVar<Real> b);

}  // namespace cae
