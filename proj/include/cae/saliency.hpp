#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <vector>

#include "cae/model.hpp"

namespace cae {

template <typename Real>
struct SaliencyMap {
  Tensor<Real> values;  // |d e_node / d input|, shaped like the input
  std::size_t node = 0;
  ModelKind kind = ModelKind::cae3d;
};

// |d f / d input| for a scalar f recorded on a fresh tape from the input leaf.
template <typename Real, typename ScalarFn>
Tensor<Real> abs_input_gradient(const Tensor<Real>& input, ScalarFn&& f) {
  Tape<Real> tape;
  auto x = tape.leaf(input);
  const Var<Real> y = f(tape, x);
  if (y.value().size() != 1)
    fail(ErrorKind::shape, "abs_input_gradient: function is not scalar");
  const Var<Real> wrt[] = {x};
  auto g = std::move(tape.grad(y, wrt)[0]);
  for (auto& v : g.data()) v = std::abs(v);
  return g;
}

// One inference-mode forward and one reverse pass. `input` is a single sample
// without batch or channel axes: a frame (S x S) for staged1, a code matrix
// (S x E1) for staged2, a volume (S x S x S) for joint and cae3d.
template <typename Real>
SaliencyMap<Real> saliency(ModelGraph<Real>& model, const Tensor<Real>& input, std::size_t node);

// Staged pair: gradients run through staged1 on every frame, the stacked
// codes and the staged2 encoder. Reported kind is staged2.
template <typename Real>
SaliencyMap<Real> saliency(const ModelGraph<Real>& staged1, const ModelGraph<Real>& staged2,
                           const Tensor<Real>& volume, std::size_t node);

// `count` indices spread evenly over [0, depth), first and last included.
std::vector<std::size_t> evenly_spaced(std::size_t depth, std::size_t count);

// Binary PGM grid of frames map[:, :, k] for k in `frames`, `per_row` frames
// per row, min-max normalized over the whole map (a constant map exports as 0).
template <typename Real>
void export_frames(const SaliencyMap<Real>& map, const std::vector<std::size_t>& frames,
                   const std::filesystem::path& path, std::size_t per_row = 5);

}  // namespace cae
