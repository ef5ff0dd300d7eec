#include "cae/layers.hpp"

#include <algorithm>
#include <cmath>

namespace cae {

namespace {

using Index = std::ptrdiff_t;

// Every conv is run as a 3D conv; 2D inputs get a depth axis of extent 1.
struct Geometry3 {
  std::size_t in_ch = 0, out_ch = 0;
  std::size_t in[3] = {1, 1, 1};
  std::size_t k[3] = {1, 1, 1};
  std::size_t stride[3] = {1, 1, 1};
  std::size_t pad[3] = {0, 0, 0};
  std::size_t out[3] = {1, 1, 1};

  std::size_t in_size() const { return in[0] * in[1] * in[2]; }
  std::size_t out_size() const { return out[0] * out[1] * out[2]; }
  std::size_t patch() const { return in_ch * k[0] * k[1] * k[2]; }
};

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

std::vector<std::size_t> stride_of(const ConvGeometry& g, std::size_t dims) {
  if (g.stride.empty()) return std::vector<std::size_t>(dims, 1);
  if (g.stride.size() != dims)
    fail(ErrorKind::shape, "stride needs one entry per spatial axis");
  for (auto s : g.stride)
    if (s == 0) fail(ErrorKind::invalid_argument, "stride must be positive");
  return g.stride;
}

std::size_t same_pad_low(std::size_t in, std::size_t k, std::size_t s, std::size_t out) {
  const std::size_t needed = (out - 1) * s + k;
  return needed > in ? (needed - in) / 2 : 0;
}

void check_conv_shapes(const Shape& x, const Shape& kernel, std::size_t channel_axis_kernel,
                       const char* what) {
  if (x.size() != 4 && x.size() != 5)
    fail(ErrorKind::shape, std::string(what) + ": input must be (batch x channels x 2 or 3 spatial axes), got " +
                               shape_string(x));
  if (kernel.size() != x.size())
    fail(ErrorKind::shape, std::string(what) + ": kernel rank " + std::to_string(kernel.size()) +
                               " does not match input rank " + std::to_string(x.size()));
  if (kernel[channel_axis_kernel] != x[1])
    fail(ErrorKind::shape, std::string(what) + ": input has " + std::to_string(x[1]) +
                               " channels, kernel " + shape_string(kernel) + " expects " +
                               std::to_string(kernel[channel_axis_kernel]));
}

Geometry3 make_geometry(std::span<const std::size_t> in, const Shape& kernel,
                        const ConvGeometry& g) {
  const std::size_t dims = in.size();
  const auto stride = stride_of(g, dims);
  const auto out = conv_output_extents(in, std::span(kernel).subspan(2), g);
  Geometry3 geo;
  geo.out_ch = kernel[0];
  geo.in_ch = kernel[1];
  const std::size_t offset = 3 - dims;
  for (std::size_t d = 0; d < dims; ++d) {
    geo.in[offset + d] = in[d];
    geo.k[offset + d] = kernel[2 + d];
    geo.stride[offset + d] = stride[d];
    geo.out[offset + d] = out[d];
    geo.pad[offset + d] =
        g.padding == Padding::same ? same_pad_low(in[d], kernel[2 + d], stride[d], out[d]) : 0;
  }
  return geo;
}

// Output positions o along one axis whose input coordinate o*s + k - pad lies
// in [0, n).
void valid_range(std::size_t n, std::size_t out, std::size_t s, std::size_t kk, std::size_t pad,
                 std::size_t& lo, std::size_t& hi) {
  const Index offset = static_cast<Index>(kk) - static_cast<Index>(pad);
  const Index first = offset >= 0 ? 0 : (-offset + static_cast<Index>(s) - 1) / static_cast<Index>(s);
  const Index last_in = static_cast<Index>(n) - 1 - offset;
  const Index last = last_in < 0 ? -1 : last_in / static_cast<Index>(s);
  lo = static_cast<std::size_t>(std::min<Index>(first, static_cast<Index>(out)));
  hi = static_cast<std::size_t>(std::clamp<Index>(last + 1, static_cast<Index>(lo), static_cast<Index>(out)));
}

// col row r = (c, kz, ky, kx), column = output position; row stride ld.
template <typename Real>
void im2col(const Geometry3& g, const Real* x, Real* col, std::size_t ld) {
  const std::size_t OD = g.out[0], OH = g.out[1], OW = g.out[2];
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.in_ch; ++c)
    for (std::size_t kz = 0; kz < g.k[0]; ++kz)
      for (std::size_t ky = 0; ky < g.k[1]; ++ky)
        for (std::size_t kx = 0; kx < g.k[2]; ++kx, ++r) {
          Real* dst = col + r * ld;
          std::size_t xlo, xhi;
          valid_range(g.in[2], OW, g.stride[2], kx, g.pad[2], xlo, xhi);
          for (std::size_t od = 0; od < OD; ++od) {
            const Index iz = static_cast<Index>(od * g.stride[0] + kz) - static_cast<Index>(g.pad[0]);
            for (std::size_t oh = 0; oh < OH; ++oh) {
              Real* d = dst + (od * OH + oh) * OW;
              const Index iy = static_cast<Index>(oh * g.stride[1] + ky) - static_cast<Index>(g.pad[1]);
              if (iz < 0 || iz >= static_cast<Index>(g.in[0]) || iy < 0 ||
                  iy >= static_cast<Index>(g.in[1])) {
                std::fill(d, d + OW, Real(0));
                continue;
              }
              const Real* src = x + ((c * g.in[0] + static_cast<std::size_t>(iz)) * g.in[1] +
                                     static_cast<std::size_t>(iy)) * g.in[2];
              std::fill(d, d + xlo, Real(0));
              const Index shift = static_cast<Index>(kx) - static_cast<Index>(g.pad[2]);
              if (g.stride[2] == 1) {
                std::copy(src + (static_cast<Index>(xlo) + shift), src + (static_cast<Index>(xhi) + shift), d + xlo);
              } else {
                for (std::size_t ow = xlo; ow < xhi; ++ow)
                  d[ow] = src[static_cast<Index>(ow * g.stride[2]) + shift];
              }
              std::fill(d + xhi, d + OW, Real(0));
            }
          }
        }
}

// Adjoint of im2col: accumulates columns back into x.
template <typename Real>
void col2im(const Geometry3& g, const Real* col, std::size_t ld, Real* x) {
  const std::size_t OD = g.out[0], OH = g.out[1], OW = g.out[2];
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.in_ch; ++c)
    for (std::size_t kz = 0; kz < g.k[0]; ++kz)
      for (std::size_t ky = 0; ky < g.k[1]; ++ky)
        for (std::size_t kx = 0; kx < g.k[2]; ++kx, ++r) {
          const Real* src_row = col + r * ld;
          std::size_t xlo, xhi;
          valid_range(g.in[2], OW, g.stride[2], kx, g.pad[2], xlo, xhi);
          const Index shift = static_cast<Index>(kx) - static_cast<Index>(g.pad[2]);
          for (std::size_t od = 0; od < OD; ++od) {
            const Index iz = static_cast<Index>(od * g.stride[0] + kz) - static_cast<Index>(g.pad[0]);
            if (iz < 0 || iz >= static_cast<Index>(g.in[0])) continue;
            for (std::size_t oh = 0; oh < OH; ++oh) {
              const Index iy = static_cast<Index>(oh * g.stride[1] + ky) - static_cast<Index>(g.pad[1]);
              if (iy < 0 || iy >= static_cast<Index>(g.in[1])) continue;
              const Real* s = src_row + (od * OH + oh) * OW;
              Real* dst = x + ((c * g.in[0] + static_cast<std::size_t>(iz)) * g.in[1] +
                               static_cast<std::size_t>(iy)) * g.in[2];
              for (std::size_t ow = xlo; ow < xhi; ++ow)
                dst[static_cast<Index>(ow * g.stride[2]) + shift] += s[ow];
            }
          }
        }
}

// Items processed per GEMM so that small images still produce wide products.
std::size_t chunk_items(std::size_t batch, std::size_t patch, std::size_t positions) {
  constexpr std::size_t kMaxColElements = std::size_t{1} << 22;
  const std::size_t per_item = std::max<std::size_t>(1, patch * positions);
  return std::clamp<std::size_t>(kMaxColElements / per_item, 1, batch);
}

// Copies `items` planes of (rows x positions) from an NC-layout tensor into a
// (rows x items*positions) buffer, or the reverse.
template <typename Real>
void gather_planes(const Real* src, std::size_t items, std::size_t rows, std::size_t positions,
                   Real* dst) {
  const std::size_t ld = items * positions;
  for (std::size_t i = 0; i < items; ++i)
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src + (i * rows + r) * positions, positions, dst + r * ld + i * positions);
}

template <typename Real>
void scatter_planes(const Real* src, std::size_t items, std::size_t rows, std::size_t positions,
                    Real* dst, bool accumulate) {
  const std::size_t ld = items * positions;
  for (std::size_t i = 0; i < items; ++i)
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* s = src + r * ld + i * positions;
      Real* d = dst + (i * rows + r) * positions;
      if (accumulate)
        for (std::size_t p = 0; p < positions; ++p) d[p] += s[p];
      else
        std::copy_n(s, positions, d);
    }
}

template <typename Real>
void add_channel_bias(Real* out, std::size_t batch, std::size_t channels, std::size_t positions,
                      const Real* bias) {
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      Real* o = out + (n * channels + c) * positions;
      for (std::size_t p = 0; p < positions; ++p) o[p] += bias[c];
    }
}

template <typename Real>
void accumulate_channel_sums(const Real* g, std::size_t batch, std::size_t channels,
                             std::size_t positions, Real* out) {
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      const Real* s = g + (n * channels + c) * positions;
      Real total = 0;
      for (std::size_t p = 0; p < positions; ++p) total += s[p];
      out[c] += total;
    }
}

// y = conv(x) for a whole batch.
template <typename Real>
void conv_forward(const Geometry3& g, std::size_t batch, const Real* x, const Real* kernel,
                  Real* y) {
  const std::size_t P = g.out_size(), CK = g.patch(), inP = g.in_size();
  const std::size_t chunk = chunk_items(batch, CK, P);
  std::vector<Real> col(CK * chunk * P);
  std::vector<Real> out(chunk > 1 ? g.out_ch * chunk * P : 0);
  for (std::size_t n0 = 0; n0 < batch; n0 += chunk) {
    const std::size_t items = std::min(chunk, batch - n0);
    const std::size_t ld = items * P;
    for (std::size_t i = 0; i < items; ++i)
      im2col(g, x + (n0 + i) * g.in_ch * inP, col.data() + i * P, ld);
    if (items == 1) {
      kernels::gemm_nn(g.out_ch, P, CK, kernel, col.data(), y + n0 * g.out_ch * P, false);
    } else {
      kernels::gemm_nn(g.out_ch, ld, CK, kernel, col.data(), out.data(), false);
      scatter_planes(out.data(), items, g.out_ch, P, y + n0 * g.out_ch * P, false);
    }
  }
}

// Given dL/dy: dx += conv^T(dy) and dkernel += dy (x) patches.
template <typename Real>
void conv_backward(const Geometry3& g, std::size_t batch, const Real* x, const Real* kernel,
                   const Real* gy, Real* gx, Real* gkernel) {
  const std::size_t P = g.out_size(), CK = g.patch(), inP = g.in_size();
  const std::size_t chunk = chunk_items(batch, CK, P);
  std::vector<Real> col(CK * chunk * P);
  std::vector<Real> gbuf(chunk > 1 ? g.out_ch * chunk * P : 0);
  for (std::size_t n0 = 0; n0 < batch; n0 += chunk) {
    const std::size_t items = std::min(chunk, batch - n0);
    const std::size_t ld = items * P;
    const Real* gchunk = gy + n0 * g.out_ch * P;
    if (items > 1) {
      gather_planes(gchunk, items, g.out_ch, P, gbuf.data());
      gchunk = gbuf.data();
    }
    if (gkernel) {
      for (std::size_t i = 0; i < items; ++i)
        im2col(g, x + (n0 + i) * g.in_ch * inP, col.data() + i * P, ld);
      kernels::gemm_nt(g.out_ch, CK, ld, gchunk, col.data(), gkernel, true);
    }
    if (gx) {
      kernels::gemm_tn(CK, ld, g.out_ch, kernel, gchunk, col.data(), false);
      for (std::size_t i = 0; i < items; ++i)
        col2im(g, col.data() + i * P, ld, gx + (n0 + i) * g.in_ch * inP);
    }
  }
}

// x = conv^T(y), accumulated into x (which the caller zeroes).
template <typename Real>
void deconv_forward(const Geometry3& g, std::size_t batch, const Real* y, const Real* kernel,
                    Real* x) {
  const std::size_t P = g.out_size(), CK = g.patch(), inP = g.in_size();
  const std::size_t chunk = chunk_items(batch, CK, P);
  std::vector<Real> col(CK * chunk * P);
  std::vector<Real> ybuf(chunk > 1 ? g.out_ch * chunk * P : 0);
  for (std::size_t n0 = 0; n0 < batch; n0 += chunk) {
    const std::size_t items = std::min(chunk, batch - n0);
    const std::size_t ld = items * P;
    const Real* ychunk = y + n0 * g.out_ch * P;
    if (items > 1) {
      gather_planes(ychunk, items, g.out_ch, P, ybuf.data());
      ychunk = ybuf.data();
    }
    kernels::gemm_tn(CK, ld, g.out_ch, kernel, ychunk, col.data(), false);
    for (std::size_t i = 0; i < items; ++i)
      col2im(g, col.data() + i * P, ld, x + (n0 + i) * g.in_ch * inP);
  }
}

// Given dL/dx of a deconv: dy += conv(dx), dkernel += y (x) patches(dx).
template <typename Real>
void deconv_backward(const Geometry3& g, std::size_t batch, const Real* y, const Real* kernel,
                     const Real* gx, Real* gy, Real* gkernel) {
  const std::size_t P = g.out_size(), CK = g.patch(), inP = g.in_size();
  const std::size_t chunk = chunk_items(batch, CK, P);
  std::vector<Real> col(CK * chunk * P);
  std::vector<Real> buf(g.out_ch * chunk * P);
  for (std::size_t n0 = 0; n0 < batch; n0 += chunk) {
    const std::size_t items = std::min(chunk, batch - n0);
    const std::size_t ld = items * P;
    for (std::size_t i = 0; i < items; ++i)
      im2col(g, gx + (n0 + i) * g.in_ch * inP, col.data() + i * P, ld);
    if (gy) {
      kernels::gemm_nn(g.out_ch, ld, CK, kernel, col.data(), buf.data(), false);
      scatter_planes(buf.data(), items, g.out_ch, P, gy + n0 * g.out_ch * P, true);
    }
    if (gkernel) {
      const Real* ychunk = y + n0 * g.out_ch * P;
      if (items > 1) {
        gather_planes(ychunk, items, g.out_ch, P, buf.data());
        ychunk = buf.data();
      }
      kernels::gemm_nt(g.out_ch, CK, ld, ychunk, col.data(), gkernel, true);
    }
  }
}

template <typename Real>
void check_bias(const Tensor<Real>& bias, std::size_t channels, const char* what) {
  if (bias.rank() != 1 || bias.extent(0) != channels)
    fail(ErrorKind::shape, std::string(what) + ": bias " + shape_string(bias.shape()) +
                               " does not match " + std::to_string(channels) + " channels");
}

std::vector<std::size_t> spatial_of(const Shape& s) { return {s.begin() + 2, s.end()}; }

}  // namespace

std::vector<std::size_t> conv_output_extents(std::span<const std::size_t> in,
                                             std::span<const std::size_t> kernel,
                                             const ConvGeometry& geometry) {
  if (in.size() != kernel.size()) fail(ErrorKind::shape, "kernel rank does not match input");
  const auto stride = stride_of(geometry, in.size());
  std::vector<std::size_t> out(in.size());
  for (std::size_t d = 0; d < in.size(); ++d) {
    if (geometry.padding == Padding::same) {
      out[d] = ceil_div(in[d], stride[d]);
    } else {
      if (in[d] < kernel[d]) fail(ErrorKind::shape, "VALID convolution needs extent >= kernel size");
      out[d] = (in[d] - kernel[d]) / stride[d] + 1;
    }
  }
  return out;
}

std::vector<std::size_t> deconv_output_extents(std::span<const std::size_t> in,
                                               std::span<const std::size_t> kernel,
                                               const ConvGeometry& geometry) {
  if (in.size() != kernel.size()) fail(ErrorKind::shape, "kernel rank does not match input");
  const auto stride = stride_of(geometry, in.size());
  std::vector<std::size_t> out(in.size());
  for (std::size_t d = 0; d < in.size(); ++d)
    out[d] = geometry.padding == Padding::same ? in[d] * stride[d]
                                               : (in[d] - 1) * stride[d] + kernel[d];
  return out;
}

template <typename Real>
Var<Real> conv(Var<Real> x, Var<Real> kernel, OptionalVar<Real> bias,
               const ConvGeometry& geometry) {
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  check_conv_shapes(xv.shape(), kv.shape(), 1, "conv");
  const auto in = spatial_of(xv.shape());
  const Geometry3 g = make_geometry(in, kv.shape(), geometry);
  const std::size_t batch = xv.extent(0);

  Shape out_shape{batch, g.out_ch};
  for (auto e : conv_output_extents(in, std::span(kv.shape()).subspan(2), geometry))
    out_shape.push_back(e);
  Tensor<Real> y(out_shape);
  conv_forward(g, batch, xv.raw(), kv.raw(), y.raw());

  std::vector<Var<Real>> inputs{x, kernel};
  if (bias) {
    check_bias(bias->value(), g.out_ch, "conv");
    add_channel_bias(y.raw(), batch, g.out_ch, g.out_size(), bias->value().raw());
    inputs.push_back(*bias);
  }
  return x.tape->record(std::move(y), std::move(inputs), [g, batch](BackwardContext<Real>& ctx) {
    const auto& gy = ctx.grad_output();
    Real* gx = ctx.needs(0) ? ctx.grad_input(0).raw() : nullptr;
    Real* gk = ctx.needs(1) ? ctx.grad_input(1).raw() : nullptr;
    if (gx || gk) conv_backward(g, batch, ctx.input(0).raw(), ctx.input(1).raw(), gy.raw(), gx, gk);
    if (ctx.input_count() > 2 && ctx.needs(2))
      accumulate_channel_sums(gy.raw(), batch, g.out_ch, g.out_size(), ctx.grad_input(2).raw());
  });
}

template <typename Real>
Var<Real> deconv(Var<Real> y, Var<Real> kernel, OptionalVar<Real> bias,
                 const ConvGeometry& geometry,
                 std::optional<std::vector<std::size_t>> output_extents) {
  const auto& yv = y.value();
  const auto& kv = kernel.value();
  check_conv_shapes(yv.shape(), kv.shape(), 0, "deconv");
  const auto y_spatial = spatial_of(yv.shape());
  const auto ksp = std::span(kv.shape()).subspan(2);
  const auto x_spatial =
      output_extents ? *output_extents : deconv_output_extents(y_spatial, ksp, geometry);
  if (x_spatial.size() != y_spatial.size())
    fail(ErrorKind::shape, "deconv: output extents rank does not match input");
  if (conv_output_extents(x_spatial, ksp, geometry) != y_spatial)
    fail(ErrorKind::shape, "deconv: output extents are inconsistent with the conv geometry");
  const Geometry3 g = make_geometry(x_spatial, kv.shape(), geometry);
  const std::size_t batch = yv.extent(0);

  Shape out_shape{batch, g.in_ch};
  out_shape.insert(out_shape.end(), x_spatial.begin(), x_spatial.end());
  Tensor<Real> x(out_shape);
  deconv_forward(g, batch, yv.raw(), kv.raw(), x.raw());

  std::vector<Var<Real>> inputs{y, kernel};
  if (bias) {
    check_bias(bias->value(), g.in_ch, "deconv");
    add_channel_bias(x.raw(), batch, g.in_ch, g.in_size(), bias->value().raw());
    inputs.push_back(*bias);
  }
  return y.tape->record(std::move(x), std::move(inputs), [g, batch](BackwardContext<Real>& ctx) {
    const auto& gx = ctx.grad_output();
    Real* gy = ctx.needs(0) ? ctx.grad_input(0).raw() : nullptr;
    Real* gk = ctx.needs(1) ? ctx.grad_input(1).raw() : nullptr;
    if (gy || gk)
      deconv_backward(g, batch, ctx.input(0).raw(), ctx.input(1).raw(), gx.raw(), gy, gk);
    if (ctx.input_count() > 2 && ctx.needs(2))
      accumulate_channel_sums(gx.raw(), batch, g.in_ch, g.in_size(), ctx.grad_input(2).raw());
  });
}

template <typename Real>
Tensor<Real> conv(const Tensor<Real>& x, const ConvParams<Real>& p) {
  Tape<Real> tape(false);
  std::optional<Var<Real>> b;
  if (!p.bias.empty()) b = tape.leaf(p.bias);
  return conv(tape.leaf(x), tape.leaf(p.kernel), b, p.geometry).value();
}

template <typename Real>
Tensor<Real> deconv(const Tensor<Real>& y, const ConvParams<Real>& p,
                    std::optional<std::vector<std::size_t>> output_extents) {
  Tape<Real> tape(false);
  std::optional<Var<Real>> b;
  if (!p.bias.empty()) b = tape.leaf(p.bias);
  return deconv(tape.leaf(y), tape.leaf(p.kernel), b, p.geometry, std::move(output_extents))
      .value();
}

template <typename Real>
PoolResult<Real> maxpool(Var<Real> x, std::vector<std::size_t> window) {
  const auto& xv = x.value();
  if (xv.rank() != 4 && xv.rank() != 5)
    fail(ErrorKind::shape, "maxpool: input must be (batch x channels x 2 or 3 spatial axes), got " +
                               shape_string(xv.shape()));
  const std::size_t dims = xv.rank() - 2;
  if (window.empty()) window.assign(dims, 2);
  if (window.size() != dims) fail(ErrorKind::shape, "maxpool: window needs one entry per spatial axis");

  std::size_t in[3] = {1, 1, 1}, w[3] = {1, 1, 1}, out[3] = {1, 1, 1};
  Shape out_shape{xv.extent(0), xv.extent(1)};
  for (std::size_t d = 0; d < dims; ++d) {
    if (window[d] == 0) fail(ErrorKind::invalid_argument, "maxpool: window must be positive");
    in[3 - dims + d] = xv.extent(2 + d);
    w[3 - dims + d] = window[d];
    out[3 - dims + d] = ceil_div(xv.extent(2 + d), window[d]);
    out_shape.push_back(out[3 - dims + d]);
  }
  const std::size_t planes = xv.extent(0) * xv.extent(1);
  const std::size_t inP = in[0] * in[1] * in[2], outP = out[0] * out[1] * out[2];

  auto switches = std::make_shared<PoolSwitches>();
  switches->input_shape = xv.shape();
  switches->output_shape = out_shape;
  switches->window = window;
  switches->argmax.resize(planes * outP);

  Tensor<Real> y(out_shape);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const Real* src = xv.raw() + pl * inP;
    for (std::size_t oz = 0; oz < out[0]; ++oz)
      for (std::size_t oy = 0; oy < out[1]; ++oy)
        for (std::size_t ox = 0; ox < out[2]; ++ox) {
          std::size_t best = 0;
          bool have = false;
          Real best_value = 0;
          for (std::size_t z = oz * w[0]; z < std::min(in[0], (oz + 1) * w[0]); ++z)
            for (std::size_t yy = oy * w[1]; yy < std::min(in[1], (oy + 1) * w[1]); ++yy)
              for (std::size_t xx = ox * w[2]; xx < std::min(in[2], (ox + 1) * w[2]); ++xx) {
                const std::size_t flat = (z * in[1] + yy) * in[2] + xx;
                if (!have || src[flat] > best_value) {
                  best = flat;
                  best_value = src[flat];
                  have = true;
                }
              }
          const std::size_t o = pl * outP + (oz * out[1] + oy) * out[2] + ox;
          y[o] = best_value;
          switches->argmax[o] = static_cast<std::uint32_t>(best);
          h = (h ^ best) * 0x100000001b3ull;
        }
  }
  x.tape->note_branch(h);

  std::shared_ptr<const PoolSwitches> shared = switches;
  Var<Real> values = x.tape->record(
      std::move(y), {x}, [shared, inP, outP](BackwardContext<Real>& ctx) {
        const auto& g = ctx.grad_output();
        auto& gi = ctx.grad_input(0);
        const std::size_t planes = g.size() / outP;
        for (std::size_t pl = 0; pl < planes; ++pl)
          for (std::size_t o = 0; o < outP; ++o)
            gi[pl * inP + shared->argmax[pl * outP + o]] += g[pl * outP + o];
      });
  return {values, shared};
}

template <typename Real>
Var<Real> unpool(Var<Real> y, std::shared_ptr<const PoolSwitches> switches) {
  if (!switches) fail(ErrorKind::invalid_argument, "unpool: missing pooling switches");
  const auto& yv = y.value();
  if (yv.shape() != switches->output_shape)
    fail(ErrorKind::shape, "unpool: input " + shape_string(yv.shape()) +
                               " does not match pooled shape " +
                               shape_string(switches->output_shape));
  const std::size_t planes = yv.extent(0) * yv.extent(1);
  const std::size_t outP = yv.size() / planes;
  const std::size_t inP = element_count(switches->input_shape) / planes;
  Tensor<Real> x(switches->input_shape);
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t o = 0; o < outP; ++o)
      x[pl * inP + switches->argmax[pl * outP + o]] = yv[pl * outP + o];
  return y.tape->record(std::move(x), {y}, [switches, inP, outP](BackwardContext<Real>& ctx) {
    const auto& g = ctx.grad_output();
    auto& gi = ctx.grad_input(0);
    const std::size_t planes = gi.size() / outP;
    for (std::size_t pl = 0; pl < planes; ++pl)
      for (std::size_t o = 0; o < outP; ++o)
        gi[pl * outP + o] += g[pl * inP + switches->argmax[pl * outP + o]];
  });
}

template <typename Real>
Var<Real> batchnorm(Var<Real> x, Var<Real> gamma, Var<Real> beta, BatchNormState<Real>& state,
                    Mode mode) {
  const auto& xv = x.value();
  if (xv.rank() < 2) fail(ErrorKind::shape, "batchnorm: input needs a channel axis");
  const std::size_t batch = xv.extent(0), channels = xv.extent(1);
  const std::size_t positions = xv.size() / (batch * channels);
  for (const Tensor<Real>* t : std::initializer_list<const Tensor<Real>*>{&gamma.value(), &beta.value(), &state.running_mean, &state.running_var})
    if (t->rank() != 1 || t->extent(0) != channels)
      fail(ErrorKind::shape, "batchnorm: per-channel tensor " + shape_string(t->shape()) +
                                 " does not match " + std::to_string(channels) + " channels");
  const Real* gv = gamma.value().raw();
  const Real* bv = beta.value().raw();
  Tensor<Real> y(xv.shape());

  auto at = [&](std::size_t n, std::size_t c) { return (n * channels + c) * positions; };

  if (mode == Mode::infer) {
    std::vector<Real> mean(channels), inv(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = state.running_mean[c];
      inv[c] = Real(1) / std::sqrt(state.running_var[c] + state.epsilon);
    }
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t c = 0; c < channels; ++c) {
        const Real* s = xv.raw() + at(n, c);
        Real* d = y.raw() + at(n, c);
        const Real a = gv[c] * inv[c], b = bv[c] - gv[c] * inv[c] * mean[c];
        for (std::size_t p = 0; p < positions; ++p) d[p] = a * s[p] + b;
      }
    return x.tape->record(
        std::move(y), {x, gamma, beta},
        [mean = std::move(mean), inv = std::move(inv), batch, channels,
         positions](BackwardContext<Real>& ctx) {
          const auto& g = ctx.grad_output();
          const auto& xin = ctx.input(0);
          const Real* gam = ctx.input(1).raw();
          for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t c = 0; c < channels; ++c) {
              const std::size_t off = (n * channels + c) * positions;
              if (ctx.needs(0)) {
                Real* gx = ctx.grad_input(0).raw() + off;
                const Real a = gam[c] * inv[c];
                for (std::size_t p = 0; p < positions; ++p) gx[p] += a * g[off + p];
              }
              if (ctx.needs(1)) {
                Real total = 0;
                for (std::size_t p = 0; p < positions; ++p)
                  total += g[off + p] * (xin[off + p] - mean[c]) * inv[c];
                ctx.grad_input(1)[c] += total;
              }
              if (ctx.needs(2)) {
                Real total = 0;
                for (std::size_t p = 0; p < positions; ++p) total += g[off + p];
                ctx.grad_input(2)[c] += total;
              }
            }
        });
  }

  if (batch < 2)
    fail(ErrorKind::invalid_argument, "batchnorm: training mode needs a batch of at least 2");
  const double count = static_cast<double>(batch * positions);
  std::vector<Real> inv(channels);
  Tensor<Real> xhat(xv.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    double total = 0;
    for (std::size_t n = 0; n < batch; ++n) {
      const Real* s = xv.raw() + at(n, c);
      for (std::size_t p = 0; p < positions; ++p) total += s[p];
    }
    const double mean = total / count;
    double sq = 0;
    for (std::size_t n = 0; n < batch; ++n) {
      const Real* s = xv.raw() + at(n, c);
      for (std::size_t p = 0; p < positions; ++p) {
        const double d = s[p] - mean;
        sq += d * d;
      }
    }
    const double var = sq / count;
    inv[c] = static_cast<Real>(1.0 / std::sqrt(var + static_cast<double>(state.epsilon)));
    for (std::size_t n = 0; n < batch; ++n) {
      const Real* s = xv.raw() + at(n, c);
      Real* xh = xhat.raw() + at(n, c);
      Real* d = y.raw() + at(n, c);
      for (std::size_t p = 0; p < positions; ++p) {
        xh[p] = static_cast<Real>((s[p] - mean)) * inv[c];
        d[p] = gv[c] * xh[p] + bv[c];
      }
    }
    const Real m = state.momentum;
    state.running_mean[c] = (Real(1) - m) * state.running_mean[c] + m * static_cast<Real>(mean);
    state.running_var[c] = (Real(1) - m) * state.running_var[c] + m * static_cast<Real>(var);
  }

  return x.tape->record(
      std::move(y), {x, gamma, beta},
      [xhat = std::move(xhat), inv = std::move(inv), batch, channels,
       positions](BackwardContext<Real>& ctx) {
        const auto& g = ctx.grad_output();
        const Real* gam = ctx.input(1).raw();
        const Real count = static_cast<Real>(batch * positions);
        for (std::size_t c = 0; c < channels; ++c) {
          Real sum_g = 0, sum_gx = 0;
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t off = (n * channels + c) * positions;
            for (std::size_t p = 0; p < positions; ++p) {
              sum_g += g[off + p];
              sum_gx += g[off + p] * xhat[off + p];
            }
          }
          if (ctx.needs(1)) ctx.grad_input(1)[c] += sum_gx;
          if (ctx.needs(2)) ctx.grad_input(2)[c] += sum_g;
          if (!ctx.needs(0)) continue;
          const Real scale = gam[c] * inv[c] / count;
          Real* gx = ctx.grad_input(0).raw();
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t off = (n * channels + c) * positions;
            for (std::size_t p = 0; p < positions; ++p)
              gx[off + p] += scale * (count * g[off + p] - sum_g - xhat[off + p] * sum_gx);
          }
        }
      });
}

template <typename Real>
Var<Real> dense(Var<Real> x, Var<Real> w, OptionalVar<Real> b) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.extent(1) != wv.extent(0))
    fail(ErrorKind::shape, "dense: input " + shape_string(xv.shape()) +
                               " does not match weights " + shape_string(wv.shape()));
  const std::size_t batch = xv.extent(0), in = wv.extent(0), out = wv.extent(1);
  Tensor<Real> y({batch, out});
  kernels::gemm_nn(batch, out, in, xv.raw(), wv.raw(), y.raw(), false);
  std::vector<Var<Real>> inputs{x, w};
  if (b) {
    const auto& bv = b->value();
    if (bv.rank() != 1 || bv.extent(0) != out)
      fail(ErrorKind::shape, "dense: bias " + shape_string(bv.shape()) + " does not match " +
                                 std::to_string(out) + " outputs");
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t j = 0; j < out; ++j) y[n * out + j] += bv[j];
    inputs.push_back(*b);
  }
  return x.tape->record(std::move(y), std::move(inputs), [batch, in, out](BackwardContext<Real>& ctx) {
    const auto& g = ctx.grad_output();
    if (ctx.needs(0))
      kernels::gemm_nt(batch, in, out, g.raw(), ctx.input(1).raw(), ctx.grad_input(0).raw(), true);
    if (ctx.needs(1))
      kernels::gemm_tn(in, out, batch, ctx.input(0).raw(), g.raw(), ctx.grad_input(1).raw(), true);
    if (ctx.input_count() > 2 && ctx.needs(2)) {
      auto& gb = ctx.grad_input(2);
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t j = 0; j < out; ++j) gb[j] += g[n * out + j];
    }
  });
}

#define CAE_INSTANTIATE_LAYERS(Real)                                                          \
  template Var<Real> conv<Real>(Var<Real>, Var<Real>, OptionalVar<Real>,               \
                                const ConvGeometry&);                                         \
  template Var<Real> deconv<Real>(Var<Real>, Var<Real>, OptionalVar<Real>,             \
                                  const ConvGeometry&,                                        \
                                  std::optional<std::vector<std::size_t>>);                   \
  template Tensor<Real> conv<Real>(const Tensor<Real>&, const ConvParams<Real>&);             \
  template Tensor<Real> deconv<Real>(const Tensor<Real>&, const ConvParams<Real>&,            \
                                     std::optional<std::vector<std::size_t>>);                \
  template PoolResult<Real> maxpool<Real>(Var<Real>, std::vector<std::size_t>);               \
  template Var<Real> unpool<Real>(Var<Real>, std::shared_ptr<const PoolSwitches>);            \
  template Var<Real> batchnorm<Real>(Var<Real>, Var<Real>, Var<Real>, BatchNormState<Real>&,  \
                                     Mode);                                                   \
  template Var<Real> dense<Real>(Var<Real>, Var<Real>, OptionalVar<Real>);

CAE_INSTANTIATE_LAYERS(float)
CAE_INSTANTIATE_LAYERS(double)

#undef CAE_INSTANTIATE_LAYERS

}  // namespace cae
