#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <type_traits>
#include <vector>

#include "cae/tensor.hpp"

namespace cae {

template <typename Real>
class Tape;

// Handle to a value recorded on a tape.
template <typename Real>
struct Var {
  Tape<Real>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<Real>& value() const;
  const Shape& shape() const { return value().shape(); }
};

// View handed to a backward rule: the upstream gradient, the recorded input and
// output values, and accumulators for the inputs that need a gradient.
template <typename Real>
class BackwardContext {
 public:
  BackwardContext(const Tape<Real>& tape, std::size_t node, const Tensor<Real>& grad_output,
                  std::vector<Tensor<Real>>& grads, const std::vector<char>& requires_grad);

  const Tensor<Real>& grad_output() const { return grad_output_; }
  const Tensor<Real>& output() const;
  const Tensor<Real>& input(std::size_t i) const;
  std::size_t input_count() const;
  bool needs(std::size_t i) const;
  // Zero-initialized on first access; rules add into it.
  Tensor<Real>& grad_input(std::size_t i);

 private:
  const Tape<Real>& tape_;
  std::size_t node_;
  const Tensor<Real>& grad_output_;
  std::vector<Tensor<Real>>& grads_;
  const std::vector<char>& requires_grad_;
};

// Records primitive operations of one forward pass in execution order. A tape
// is confined to a single thread; parallel passes use separate tapes.
template <typename Real>
class Tape {
 public:
  using BackwardFn = std::function<void(BackwardContext<Real>&)>;

  // With grad disabled, backward rules are dropped at record time.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Real> leaf(Tensor<Real> value);
  Var<Real> record(Tensor<Real> value, std::vector<Var<Real>> inputs, BackwardFn backward);

  const Tensor<Real>& value(Var<Real> v) const;
  std::size_t size() const noexcept { return nodes_.size(); }
  bool grad_enabled() const noexcept { return grad_enabled_; }

  // d(loss)/d(w) for each w. Values with no path to the loss get zeros.
  std::vector<Tensor<Real>> grad(Var<Real> loss, std::span<const Var<Real>> wrt) const;

  // Non-smooth ops (relu, max-pool) fold their branch decisions in here so that
  // finite-difference checks can detect when a perturbation crossed a kink.
  void note_branch(std::uint64_t bits);
  std::uint64_t branch_signature() const noexcept { return signature_; }

  void check_owner(Var<Real> v) const;

 private:
  friend class BackwardContext<Real>;

  struct Node {
    Tensor<Real> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;  // stable addresses: values are handed out by reference
  bool grad_enabled_;
  std::uint64_t signature_ = 0xcbf29ce484222325ull;
};

enum class Elementwise { add, sub, mul, max };

// Elementwise binary ops. Shapes must match exactly; there is no broadcasting
// beyond the scalar overloads.
template <typename Real>
Var<Real> elementwise(Elementwise op, Var<Real> a, Var<Real> b);
template <typename Real>
Var<Real> elementwise(Elementwise op, Var<Real> a, std::type_identity_t<Real> b);

template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b) { return elementwise(Elementwise::add, a, b); }
template <typename Real>
Var<Real> sub(Var<Real> a, Var<Real> b) { return elementwise(Elementwise::sub, a, b); }
template <typename Real>
Var<Real> mul(Var<Real> a, Var<Real> b) { return elementwise(Elementwise::mul, a, b); }
template <typename Real>
Var<Real> scale(Var<Real> a, std::type_identity_t<Real> s) { return elementwise(Elementwise::mul, a, s); }
template <typename Real>
Var<Real> relu(Var<Real> a) { return elementwise(Elementwise::max, a, Real(0)); }

template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b);

template <typename Real>
Var<Real> reshape(Var<Real> a, Shape new_shape);

// out.shape[i] = a.shape[axes[i]].
template <typename Real>
Var<Real> permute(Var<Real> a, std::vector<std::size_t> axes);

template <typename Real>
Var<Real> sum(Var<Real> a);

// Scalar element a[flat_index].
template <typename Real>
Var<Real> pick(Var<Real> a, std::size_t flat_index);

// Mean of squared differences, as a scalar.
template <typename Real>
Var<Real> mse(Var<Real> reconstruction, Var<Real> target);

// Plain-tensor counterparts used outside of any tape.
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> permuted(const Tensor<Real>& a, std::span<const std::size_t> axes);
template <typename Real>
double mse(const Tensor<Real>& reconstruction, const Tensor<Real>& target);

}  // namespace cae
