#include "cae/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "byte_io.hpp"

namespace cae {

template <typename Real>
SaliencyMap<Real> saliency(ModelGraph<Real>& model, const Tensor<Real>& input, std::size_t node) {
  const auto& d = model.descriptor;
  if (node >= d.embedding)
    fail(ErrorKind::invalid_argument, "saliency: node " + std::to_string(node) + " out of range [0, " +
                                          std::to_string(d.embedding) + ")");
  const Shape sample = d.sample_shape();
  const Shape want(sample.begin() + 1, sample.end());
  if (input.shape() != want)
    fail(ErrorKind::shape, "saliency: input " + shape_string(input.shape()) + " does not match " +
                               shape_string(want) + " for a " + to_string(d.kind) + " model");
  Shape batched{1};
  batched.insert(batched.end(), sample.begin(), sample.end());

  auto g = abs_input_gradient(input.reshaped(batched), [&](Tape<Real>& tape, Var<Real> x) {
    auto b = bind(tape, model);
    return pick(encode(b, x, Mode::infer).embedding, node);
  });
  return {std::move(g).reshaped(want), node, d.kind};
}

template <typename Real>
SaliencyMap<Real> saliency(const ModelGraph<Real>& staged1, const ModelGraph<Real>& staged2,
                           const Tensor<Real>& volume, std::size_t node) {
  // The merged graph computes exactly staged1 per frame -> stack -> staged2.
  auto composed = merge_staged(staged1, staged2);
  auto map = saliency(composed, volume, node);
  map.kind = ModelKind::staged2;
  return map;
}

std::vector<std::size_t> evenly_spaced(std::size_t depth, std::size_t count) {
  if (depth == 0 || count == 0 || count > depth)
    fail(ErrorKind::invalid_argument, "cannot pick " + std::to_string(count) + " distinct frames from depth " +
                                          std::to_string(depth));
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(count == 1 ? 0 : std::size_t(std::llround(double(i) * double(depth - 1) / double(count - 1))));
  return out;
}

template <typename Real>
void export_frames(const SaliencyMap<Real>& map, const std::vector<std::size_t>& frames,
                   const std::filesystem::path& path, std::size_t per_row) {
  const auto& v = map.values;
  if (v.rank() != 3) fail(ErrorKind::shape, "export_frames: map " + shape_string(v.shape()) + " is not 3D");
  if (frames.empty() || per_row == 0) fail(ErrorKind::invalid_argument, "export_frames: nothing to export");
  const std::size_t X = v.extent(0), Y = v.extent(1), Z = v.extent(2);
  for (auto k : frames)
    if (k >= Z)
      fail(ErrorKind::invalid_argument, "export_frames: frame " + std::to_string(k) + " outside depth " +
                                            std::to_string(Z));
  const auto [lo_it, hi_it] = std::minmax_element(v.data().begin(), v.data().end());
  const double lo = double(*lo_it), range = double(*hi_it) - lo;

  const std::size_t cols = std::min(per_row, frames.size());
  const std::size_t rows = (frames.size() + per_row - 1) / per_row;
  const std::size_t width = cols * Y, height = rows * X;
  std::string head = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<unsigned char> out(head.begin(), head.end());
  const std::size_t base = out.size();
  out.resize(base + width * height, 0);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const std::size_t r0 = (f / per_row) * X, c0 = (f % per_row) * Y;
    for (std::size_t i = 0; i < X; ++i)
      for (std::size_t j = 0; j < Y; ++j) {
        const double t = range > 0 ? (double(v.at({i, j, frames[f]})) - lo) / range : 0.0;
        out[base + (r0 + i) * width + c0 + j] = static_cast<unsigned char>(std::lround(t * 255.0));
      }
  }
  bytes::write_file(path, out);
}

#define CAE_INSTANTIATE_SALIENCY(Real)                                                              \
  template SaliencyMap<Real> saliency<Real>(ModelGraph<Real>&, const Tensor<Real>&, std::size_t);  \
  template SaliencyMap<Real> saliency<Real>(const ModelGraph<Real>&, const ModelGraph<Real>&,      \
                                            const Tensor<Real>&, std::size_t);                     \
  template void export_frames<Real>(const SaliencyMap<Real>&, const std::vector<std::size_t>&,     \
                                    const std::filesystem::path&, std::size_t);

CAE_INSTANTIATE_SALIENCY(float)
CAE_INSTANTIATE_SALIENCY(double)

}  // namespace cae
