#include "cae/tape.hpp"

#include <algorithm>
#include <numeric>

namespace cae {

template <typename Real>
const Tensor<Real>& Var<Real>::value() const {
  if (!tape) fail(ErrorKind::invalid_argument, "variable is not attached to a tape");
  return tape->value(*this);
}

template <typename Real>
BackwardContext<Real>::BackwardContext(const Tape<Real>& tape, std::size_t node,
                                       const Tensor<Real>& grad_output,
                                       std::vector<Tensor<Real>>& grads,
                                       const std::vector<char>& requires_grad)
    : tape_(tape), node_(node), grad_output_(grad_output), grads_(grads),
      requires_grad_(requires_grad) {}

template <typename Real>
const Tensor<Real>& BackwardContext<Real>::output() const {
  return tape_.nodes_[node_].value;
}

template <typename Real>
const Tensor<Real>& BackwardContext<Real>::input(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(i)].value;
}

template <typename Real>
std::size_t BackwardContext<Real>::input_count() const {
  return tape_.nodes_[node_].inputs.size();
}

template <typename Real>
bool BackwardContext<Real>::needs(std::size_t i) const {
  return requires_grad_[tape_.nodes_[node_].inputs.at(i)] != 0;
}

template <typename Real>
Tensor<Real>& BackwardContext<Real>::grad_input(std::size_t i) {
  const std::size_t id = tape_.nodes_[node_].inputs.at(i);
  auto& g = grads_[id];
  if (g.empty()) g = Tensor<Real>::zeros_like(tape_.nodes_[id].value);
  return g;
}

template <typename Real>
Var<Real> Tape<Real>::leaf(Tensor<Real> value) {
  nodes_.push_back(Node{std::move(value), {}, {}});
  return Var<Real>{this, nodes_.size() - 1};
}

template <typename Real>
Var<Real> Tape<Real>::record(Tensor<Real> value, std::vector<Var<Real>> inputs,
                             BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const auto& v : inputs) {
    check_owner(v);
    node.inputs.push_back(v.id);
  }
  if (grad_enabled_) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<Real>{this, nodes_.size() - 1};
}

template <typename Real>
void Tape<Real>::check_owner(Var<Real> v) const {
  if (v.tape != this || v.id >= nodes_.size())
    fail(ErrorKind::invalid_argument, "value is not recorded on this tape");
}

template <typename Real>
const Tensor<Real>& Tape<Real>::value(Var<Real> v) const {
  check_owner(v);
  return nodes_[v.id].value;
}

template <typename Real>
void Tape<Real>::note_branch(std::uint64_t bits) {
  signature_ ^= bits + 0x9e3779b97f4a7c15ull + (signature_ << 6) + (signature_ >> 2);
}

template <typename Real>
std::vector<Tensor<Real>> Tape<Real>::grad(Var<Real> loss, std::span<const Var<Real>> wrt) const {
  check_owner(loss);
  if (nodes_[loss.id].value.size() != 1)
    fail(ErrorKind::shape, "gradient requires a scalar loss, got shape " +
                               shape_string(nodes_[loss.id].value.shape()));
  if (!grad_enabled_) fail(ErrorKind::invalid_argument, "tape was recorded without gradients");
  for (const auto& w : wrt) check_owner(w);

  // A node needs a gradient when some requested value feeds it.
  std::vector<char> requires_grad(loss.id + 1, 0);
  for (const auto& w : wrt)
    if (w.id <= loss.id) requires_grad[w.id] = 1;
  for (std::size_t id = 0; id <= loss.id; ++id) {
    if (requires_grad[id]) continue;
    for (auto in : nodes_[id].inputs)
      if (requires_grad[in]) {
        requires_grad[id] = 1;
        break;
      }
  }

  std::vector<char> keep(loss.id + 1, 0);
  for (const auto& w : wrt)
    if (w.id <= loss.id) keep[w.id] = 1;

  std::vector<Tensor<Real>> grads(loss.id + 1);
  grads[loss.id] = Tensor<Real>(nodes_[loss.id].value.shape(), Real(1));
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!requires_grad[id] || grads[id].empty() || !node.backward) continue;
    BackwardContext<Real> ctx(*this, id, grads[id], grads, requires_grad);
    node.backward(ctx);
    if (!keep[id]) grads[id] = Tensor<Real>();
  }

  std::vector<Tensor<Real>> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    if (w.id <= loss.id && !grads[w.id].empty())
      out.push_back(grads[w.id]);
    else
      out.push_back(Tensor<Real>::zeros_like(nodes_[w.id].value));
  }
  return out;
}

namespace {

template <typename Real>
void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* what) {
  if (a.shape() != b.shape())
    fail(ErrorKind::shape, std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                               " vs " + shape_string(b.shape()));
}

template <typename Real>
Tape<Real>& same_tape(Var<Real> a, Var<Real> b) {
  if (!a.tape || a.tape != b.tape)
    fail(ErrorKind::invalid_argument, "operands are recorded on different tapes");
  return *a.tape;
}

std::uint64_t mask_hash(const std::vector<char>& mask) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char m : mask) {
    h ^= static_cast<unsigned char>(m);
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

template <typename Real>
Var<Real> elementwise(Elementwise op, Var<Real> a, Var<Real> b) {
  auto& tape = same_tape(a, b);
  const auto& x = a.value();
  const auto& y = b.value();
  require_same_shape(x, y, "elementwise");
  Tensor<Real> out(x.shape());
  const std::size_t n = x.size();
  switch (op) {
    case Elementwise::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
      return tape.record(std::move(out), {a, b}, [](BackwardContext<Real>& ctx) {
        const auto& g = ctx.grad_output();
        for (std::size_t k = 0; k < 2; ++k)
          if (ctx.needs(k)) {
            auto& gi = ctx.grad_input(k);
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
          }
      });
    case Elementwise::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - y[i];
      return tape.record(std::move(out), {a, b}, [](BackwardContext<Real>& ctx) {
        const auto& g = ctx.grad_output();
        if (ctx.needs(0)) {
          auto& gi = ctx.grad_input(0);
          for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
        if (ctx.needs(1)) {
          auto& gi = ctx.grad_input(1);
          for (std::size_t i = 0; i < g.size(); ++i) gi[i] -= g[i];
        }
      });
    case Elementwise::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
      return tape.record(std::move(out), {a, b}, [](BackwardContext<Real>& ctx) {
        const auto& g = ctx.grad_output();
        for (std::size_t k = 0; k < 2; ++k)
          if (ctx.needs(k)) {
            const auto& other = ctx.input(1 - k);
            auto& gi = ctx.grad_input(k);
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * other[i];
          }
      });
    case Elementwise::max: {
      std::vector<char> left(n);
      for (std::size_t i = 0; i < n; ++i) {
        left[i] = x[i] >= y[i];
        out[i] = left[i] ? x[i] : y[i];
      }
      tape.note_branch(mask_hash(left));
      return tape.record(std::move(out), {a, b},
                         [left = std::move(left)](BackwardContext<Real>& ctx) {
                           const auto& g = ctx.grad_output();
                           for (std::size_t k = 0; k < 2; ++k)
                             if (ctx.needs(k)) {
                               auto& gi = ctx.grad_input(k);
                               const char want = k == 0;
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 if (left[i] == want) gi[i] += g[i];
                             }
                         });
    }
  }
  fail(ErrorKind::invalid_argument, "unknown elementwise op");
}

template <typename Real>
Var<Real> elementwise(Elementwise op, Var<Real> a, std::type_identity_t<Real> b) {
  auto& tape = *a.tape;
  const auto& x = a.value();
  Tensor<Real> out(x.shape());
  const std::size_t n = x.size();
  switch (op) {
    case Elementwise::add:
    case Elementwise::sub: {
      const Real s = op == Elementwise::add ? b : -b;
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + s;
      return tape.record(std::move(out), {a}, [](BackwardContext<Real>& ctx) {
        const auto& g = ctx.grad_output();
        auto& gi = ctx.grad_input(0);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
      });
    }
    case Elementwise::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * b;
      return tape.record(std::move(out), {a}, [b](BackwardContext<Real>& ctx) {
        const auto& g = ctx.grad_output();
        auto& gi = ctx.grad_input(0);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * b;
      });
    case Elementwise::max: {
      // Strictly greater: the subgradient at the kink is taken as zero.
      std::vector<char> pass(n);
      for (std::size_t i = 0; i < n; ++i) {
        pass[i] = x[i] > b;
        out[i] = pass[i] ? x[i] : b;
      }
      tape.note_branch(mask_hash(pass));
      return tape.record(std::move(out), {a},
                         [pass = std::move(pass)](BackwardContext<Real>& ctx) {
                           const auto& g = ctx.grad_output();
                           auto& gi = ctx.grad_input(0);
                           for (std::size_t i = 0; i < g.size(); ++i)
                             if (pass[i]) gi[i] += g[i];
                         });
    }
  }
  fail(ErrorKind::invalid_argument, "unknown elementwise op");
}

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    fail(ErrorKind::shape, "matmul expects rank-2 operands, got " + shape_string(a.shape()) +
                               " and " + shape_string(b.shape()));
  if (a.extent(1) != b.extent(0))
    fail(ErrorKind::shape, "matmul inner dimensions differ: " + shape_string(a.shape()) + " * " +
                               shape_string(b.shape()));
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor<Real> c({m, n});
  kernels::gemm_nn(m, n, k, a.raw(), b.raw(), c.raw(), false);
  return c;
}

template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
  auto& tape = same_tape(a, b);
  Tensor<Real> c = matmul(a.value(), b.value());
  return tape.record(std::move(c), {a, b}, [](BackwardContext<Real>& ctx) {
    const auto& g = ctx.grad_output();
    const auto& x = ctx.input(0);
    const auto& y = ctx.input(1);
    const std::size_t m = x.extent(0), k = x.extent(1), n = y.extent(1);
    // dA = dC * B^T, dB = A^T * dC
    if (ctx.needs(0)) kernels::gemm_nt(m, k, n, g.raw(), y.raw(), ctx.grad_input(0).raw(), true);
    if (ctx.needs(1)) kernels::gemm_tn(k, n, m, x.raw(), g.raw(), ctx.grad_input(1).raw(), true);
  });
}

template <typename Real>
Var<Real> reshape(Var<Real> a, Shape new_shape) {
  const auto& x = a.value();
  if (element_count(new_shape) != x.size())
    fail(ErrorKind::shape, "cannot reshape " + shape_string(x.shape()) + " to " +
                               shape_string(new_shape));
  return a.tape->record(x.reshaped(std::move(new_shape)), {a}, [](BackwardContext<Real>& ctx) {
    const auto& g = ctx.grad_output();
    auto& gi = ctx.grad_input(0);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
  });
}

namespace {

// Visits (source flat index, destination flat index) pairs of a permutation.
template <typename Fn>
void for_each_permuted(const Shape& in_shape, std::span<const std::size_t> axes, Fn&& fn) {
  const std::size_t rank = in_shape.size();
  if (axes.size() != rank) fail(ErrorKind::shape, "permutation rank does not match tensor rank");
  std::vector<char> seen(rank, 0);
  for (auto ax : axes) {
    if (ax >= rank || seen[ax]) fail(ErrorKind::invalid_argument, "axes are not a permutation");
    seen[ax] = 1;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[axes[i]];
  const auto in_strides = strides_of(in_shape);
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) step[i] = in_strides[axes[i]];

  std::vector<std::size_t> idx(rank, 0);
  const std::size_t total = element_count(in_shape);
  std::size_t src = 0;
  for (std::size_t dst = 0; dst < total; ++dst) {
    fn(src, dst);
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src += step[d];
        break;
      }
      src -= step[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
}

Shape permuted_shape(const Shape& shape, std::span<const std::size_t> axes) {
  Shape out(shape.size());
  for (std::size_t i = 0; i < shape.size(); ++i) out[i] = shape.at(axes[i]);
  return out;
}

}  // namespace

template <typename Real>
Tensor<Real> permuted(const Tensor<Real>& a, std::span<const std::size_t> axes) {
  Tensor<Real> out(permuted_shape(a.shape(), axes));
  for_each_permuted(a.shape(), axes, [&](std::size_t src, std::size_t dst) { out[dst] = a[src]; });
  return out;
}

template <typename Real>
Var<Real> permute(Var<Real> a, std::vector<std::size_t> axes) {
  Tensor<Real> out = permuted(a.value(), axes);
  return a.tape->record(std::move(out), {a},
                        [axes = std::move(axes)](BackwardContext<Real>& ctx) {
                          const auto& g = ctx.grad_output();
                          auto& gi = ctx.grad_input(0);
                          for_each_permuted(ctx.input(0).shape(), axes,
                                            [&](std::size_t src, std::size_t dst) {
                                              gi[src] += g[dst];
                                            });
                        });
}

template <typename Real>
Var<Real> sum(Var<Real> a) {
  return a.tape->record(Tensor<Real>::scalar(a.value().sum()), {a},
                        [](BackwardContext<Real>& ctx) {
                          const Real g = ctx.grad_output()[0];
                          auto& gi = ctx.grad_input(0);
                          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g;
                        });
}

template <typename Real>
Var<Real> pick(Var<Real> a, std::size_t flat_index) {
  const auto& x = a.value();
  if (flat_index >= x.size())
    fail(ErrorKind::invalid_argument, "element index " + std::to_string(flat_index) +
                                          " out of range for " + shape_string(x.shape()));
  return a.tape->record(Tensor<Real>::scalar(x[flat_index]), {a},
                        [flat_index](BackwardContext<Real>& ctx) {
                          ctx.grad_input(0)[flat_index] += ctx.grad_output()[0];
                        });
}

template <typename Real>
double mse(const Tensor<Real>& reconstruction, const Tensor<Real>& target) {
  require_same_shape(reconstruction, target, "mse");
  double total = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = static_cast<double>(reconstruction[i]) - static_cast<double>(target[i]);
    total += d * d;
  }
  return total / static_cast<double>(target.size());
}

template <typename Real>
Var<Real> mse(Var<Real> reconstruction, Var<Real> target) {
  auto& tape = same_tape(reconstruction, target);
  const Real value = static_cast<Real>(mse(reconstruction.value(), target.value()));
  return tape.record(Tensor<Real>::scalar(value), {reconstruction, target},
                     [](BackwardContext<Real>& ctx) {
                       const auto& r = ctx.input(0);
                       const auto& t = ctx.input(1);
                       const Real coeff = Real(2) * ctx.grad_output()[0] / Real(r.size());
                       if (ctx.needs(0)) {
                         auto& g = ctx.grad_input(0);
                         for (std::size_t i = 0; i < r.size(); ++i) g[i] += coeff * (r[i] - t[i]);
                       }
                       if (ctx.needs(1)) {
                         auto& g = ctx.grad_input(1);
                         for (std::size_t i = 0; i < r.size(); ++i) g[i] -= coeff * (r[i] - t[i]);
                       }
                     });
}

#define CAE_INSTANTIATE_TAPE(Real)                                                      \
  template struct Var<Real>;                                                            \
  template class BackwardContext<Real>;                                                 \
  template class Tape<Real>;                                                            \
  template Var<Real> elementwise<Real>(Elementwise, Var<Real>, Var<Real>);              \
  template Var<Real> elementwise<Real>(Elementwise, Var<Real>, Real);                   \
  template Var<Real> matmul<Real>(Var<Real>, Var<Real>);                                \
  template Tensor<Real> matmul<Real>(const Tensor<Real>&, const Tensor<Real>&);         \
  template Var<Real> reshape<Real>(Var<Real>, Shape);                                   \
  template Var<Real> permute<Real>(Var<Real>, std::vector<std::size_t>);                \
  template Tensor<Real> permuted<Real>(const Tensor<Real>&, std::span<const std::size_t>); \
  template Var<Real> sum<Real>(Var<Real>);                                              \
  template Var<Real> pick<Real>(Var<Real>, std::size_t);                                \
  template Var<Real> mse<Real>(Var<Real>, Var<Real>);                                   \
  template double mse<Real>(const Tensor<Real>&, const Tensor<Real>&);

CAE_INSTANTIATE_TAPE(float)
CAE_INSTANTIATE_TAPE(double)

#undef CAE_INSTANTIATE_TAPE

}  // namespace cae
