#pragma once

// Slow, loop-for-loop reference implementations used as independent oracles
// by the self-test and the unit tests. Nothing here shares code with the
// production kernels in layers.cpp.

#include <functional>
#include <span>

#include "abstractnet/layers.hpp"
#include "abstractnet/tensor.hpp"

namespace abstractnet::reference {

/// Six nested loops over (n, o, y, x, c, i, j); zero padding by bounds check.
Tensor conv_direct(const Tensor& x, const Tensor& weights, const Tensor& bias, const ConvSpec& spec);

/// dx for a stride-1 convolution as a full correlation of dy with the
/// kernel rotated by 180 degrees.
Tensor conv_input_grad_rotated(const Tensor& dy, const Tensor& weights, const ConvSpec& spec, const Shape& input);

Tensor pool_direct(const Tensor& x, const PoolSpec& spec);

/// Scalar ADAGRAD: returns the updated (w, accumulator).
struct AdagradScalar {
  double w;
  double accum;
};
AdagradScalar adagrad(double w, double accum, double g, double lr, double epsilon);

struct MomentumScalar {
  double w;
  double velocity;
};
MomentumScalar sgd_momentum(double w, double velocity, double g, double lr, double momentum);

/// Central finite difference of `loss` with respect to each entry of `params`
/// (perturbed in place and restored).
std::vector<double> numeric_gradient(std::span<double> params, const std::function<double()>& loss, double h = 1e-5);

struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  std::size_t failures = 0;
};

/// Entry i passes when |a - n| <= max(rtol * max(|a|, |n|), atol).
GradCheck compare_gradients(std::span<const double> analytic, std::span<const double> numeric, double rtol,
                            double atol);

}  // namespace abstractnet::reference
