#pragma once

// Reference implementations used only by tests. They follow the textbook
// definitions directly and share no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "cae/random.hpp"
#include "cae/tape.hpp"

namespace oracle {

using cae::Shape;
using cae::Tensor;

template <typename Real>
Tensor<Real> random_tensor(cae::Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<Real> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<Real>(rng.uniform(lo, hi));
  return t;
}

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor<Real> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += double(a[i * k + p]) * double(b[p * n + j]);
      c[i * n + j] = static_cast<Real>(acc);
    }
  return c;
}

// Direct cross-correlation. x: (N, C, spatial...), kernel: (OC, C, k...).
// SAME padding places floor(total / 2) zeros before each axis.
template <typename Real>
Tensor<Real> conv(const Tensor<Real>& x, const Tensor<Real>& kernel,
                  const std::type_identity_t<Tensor<Real>>* bias,
                  std::vector<std::size_t> stride, bool same) {
  const std::size_t dims = x.rank() - 2;
  const std::size_t N = x.extent(0), C = x.extent(1), OC = kernel.extent(0);
  std::vector<long> in(dims), k(dims), out(dims), pad(dims), s(dims);
  Shape out_shape{N, OC};
  for (std::size_t d = 0; d < dims; ++d) {
    in[d] = long(x.extent(2 + d));
    k[d] = long(kernel.extent(2 + d));
    s[d] = long(stride.empty() ? 1 : stride[d]);
    if (same) {
      out[d] = (in[d] + s[d] - 1) / s[d];
      const long total = std::max(0L, (out[d] - 1) * s[d] + k[d] - in[d]);
      pad[d] = total / 2;
    } else {
      out[d] = (in[d] - k[d]) / s[d] + 1;
      pad[d] = 0;
    }
    out_shape.push_back(std::size_t(out[d]));
  }
  Tensor<Real> y(out_shape);
  std::vector<long> o(dims), kk(dims);
  auto next = [](std::vector<long>& idx, const std::vector<long>& ext) {
    for (std::size_t d = idx.size(); d-- > 0;) {
      if (++idx[d] < ext[d]) return true;
      idx[d] = 0;
    }
    return false;
  };
  std::size_t flat = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oc = 0; oc < OC; ++oc) {
      std::fill(o.begin(), o.end(), 0);
      do {
        double acc = bias ? double((*bias)[oc]) : 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          std::fill(kk.begin(), kk.end(), 0);
          do {
            bool inside = true;
            std::size_t xi = n * C + c, ki = oc * C + c;
            for (std::size_t d = 0; d < dims; ++d) {
              const long pos = o[d] * s[d] + kk[d] - pad[d];
              if (pos < 0 || pos >= in[d]) inside = false;
              xi = xi * std::size_t(in[d]) + std::size_t(std::max(0L, pos));
              ki = ki * std::size_t(k[d]) + std::size_t(kk[d]);
            }
            if (inside) acc += double(x[xi]) * double(kernel[ki]);
          } while (next(kk, k));
        }
        y[flat++] = static_cast<Real>(acc);
      } while (next(o, out));
    }
  return y;
}

template <typename Real>
double dot(const Tensor<Real>& a, const Tensor<Real>& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += double(a[i]) * double(b[i]);
  return acc;
}

// Brute-force AUROC over every (positive, negative) pair with half credit for
// ties, returned as the exact ratio 2*concordant+ties / 2*pos*neg.
inline double auroc_pairs(const std::vector<double>& scores, const std::vector<int>& labels) {
  long long twice = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg)++;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      if (scores[i] > scores[j]) twice += 2;
      else if (scores[i] == scores[j]) twice += 1;
    }
  }
  return double(twice) / double(2 * pos * neg);
}

// Builds a scalar loss on a fresh tape from the given leaves.
template <typename Real>
using LossBuilder =
    std::function<cae::Var<Real>(cae::Tape<Real>&, const std::vector<cae::Var<Real>>&)>;

struct GradCheckResult {
  double max_relative_error = 0;  // worst per-tensor norm-wise relative error
  std::size_t checked = 0;        // coordinates compared
  std::size_t skipped = 0;        // coordinates whose perturbation crossed a kink
  std::size_t zero_gradient = 0;  // inputs whose gradient is below difference resolution
  std::size_t worst_input = 0;
};

// Central finite differences against the tape gradient on up to `samples`
// coordinates per input. The relative error of one input is
// ||analytic - numeric|| / max(||analytic||, ||numeric||) over the sampled
// coordinates. When both norms are under the roundoff resolution of the
// difference quotient, 100 * eps * max(|loss|, 1) / h * sqrt(k) for k
// coordinates, the gradient is zero as far as differencing can tell and the
// input counts as agreeing. Coordinates where x+h and x-h take different relu or
// max-pool branches are skipped: the function is not differentiable there.
template <typename Real>
GradCheckResult gradient_check(const LossBuilder<Real>& build, std::vector<Tensor<Real>> inputs,
                               cae::Rng& rng, std::size_t samples = 24, double h = 1e-4) {
  std::vector<Tensor<Real>> analytic;
  std::uint64_t base_signature;
  double base_loss;
  {
    cae::Tape<Real> tape;
    std::vector<cae::Var<Real>> vars;
    for (auto& t : inputs) vars.push_back(tape.leaf(t));
    auto loss = build(tape, vars);
    base_signature = tape.branch_signature();
    base_loss = double(loss.value()[0]);
    analytic = tape.grad(loss, vars);
  }
  auto evaluate = [&](std::uint64_t& signature) {
    cae::Tape<Real> tape(false);
    std::vector<cae::Var<Real>> vars;
    for (auto& t : inputs) vars.push_back(tape.leaf(t));
    const double value = double(build(tape, vars).value()[0]);
    signature = tape.branch_signature();
    return value;
  };

  GradCheckResult result;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    std::vector<std::size_t> coords(inputs[t].size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    rng.shuffle(coords.begin(), coords.end());
    if (coords.size() > samples) coords.resize(samples);
    double diff2 = 0, a2 = 0, n2 = 0;
    std::size_t compared = 0;
    for (auto i : coords) {
      const Real saved = inputs[t][i];
      std::uint64_t sig_plus, sig_minus;
      inputs[t][i] = saved + Real(h);
      const double f_plus = evaluate(sig_plus);
      inputs[t][i] = saved - Real(h);
      const double f_minus = evaluate(sig_minus);
      inputs[t][i] = saved;
      if (sig_plus != base_signature || sig_minus != base_signature) {
        ++result.skipped;
        continue;
      }
      const double numeric = (f_plus - f_minus) / (2 * h);
      const double a = double(analytic[t][i]);
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      ++result.checked;
      ++compared;
    }
    const double resolution = 100 * double(std::numeric_limits<Real>::epsilon()) *
                              std::max(std::abs(base_loss), 1.0) / h *
                              std::sqrt(double(std::max<std::size_t>(compared, 1)));
    const double denom = std::max(std::sqrt(a2), std::sqrt(n2));
    if (denom < resolution) {
      ++result.zero_gradient;
      continue;
    }
    if (std::sqrt(diff2) / denom > result.max_relative_error) {
      result.max_relative_error = std::sqrt(diff2) / denom;
      result.worst_input = t;
    }
  }
  return result;
}

}  // namespace oracle
