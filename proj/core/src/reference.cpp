#include "abstractnet/reference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "abstractnet/error.hpp"

namespace abstractnet::reference {

Tensor conv_direct(const Tensor& x, const Tensor& weights, const Tensor& bias, const ConvSpec& spec) {
  const Shape& in = x.shape();
  const int ho = (in.h + 2 * spec.ph - spec.kh) / spec.sh + 1;
  const int wo = (in.w + 2 * spec.pw - spec.kw) / spec.sw + 1;
  Tensor y(Shape{in.n, spec.out_channels, ho, wo});
  for (int n = 0; n < in.n; ++n) {
    for (int o = 0; o < spec.out_channels; ++o) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          double acc = bias.at(0, o, 0, 0);
          for (int c = 0; c < in.c; ++c) {
            for (int i = 0; i < spec.kh; ++i) {
              for (int j = 0; j < spec.kw; ++j) {
                const int iy = oy * spec.sh + i - spec.ph;
                const int ix = ox * spec.sw + j - spec.pw;
                if (iy >= 0 && iy < in.h && ix >= 0 && ix < in.w) {
                  acc += x.at(n, c, iy, ix) * weights.at(o, c, i, j);
                }
              }
            }
          }
          y.at(n, o, oy, ox) = acc;
        }
      }
    }
  }
  return y;
}

Tensor conv_input_grad_rotated(const Tensor& dy, const Tensor& weights, const ConvSpec& spec, const Shape& input) {
  if (spec.sh != 1 || spec.sw != 1) {
    throw SpecError("conv_input_grad_rotated: stride-1 only");
  }
  const Shape& out = dy.shape();
  Tensor dx(input);
  // dx[c, y, x] = sum_o sum_{i,j} dy[o, y - i', x - j'] * w_rot[o, c, i, j],
  // where w_rot[i][j] = w[kh-1-i][kw-1-j] and dy is zero-extended.
  for (int n = 0; n < input.n; ++n) {
    for (int c = 0; c < input.c; ++c) {
      for (int yy = 0; yy < input.h; ++yy) {
        for (int xx = 0; xx < input.w; ++xx) {
          double acc = 0.0;
          for (int o = 0; o < out.c; ++o) {
            for (int i = 0; i < spec.kh; ++i) {
              for (int j = 0; j < spec.kw; ++j) {
                const int oy = yy + spec.ph - (spec.kh - 1) + i;
                const int ox = xx + spec.pw - (spec.kw - 1) + j;
                if (oy >= 0 && oy < out.h && ox >= 0 && ox < out.w) {
                  acc += dy.at(n, o, oy, ox) * weights.at(o, c, spec.kh - 1 - i, spec.kw - 1 - j);
                }
              }
            }
          }
          dx.at(n, c, yy, xx) = acc;
        }
      }
    }
  }
  return dx;
}

Tensor pool_direct(const Tensor& x, const PoolSpec& spec) {
  const Shape& in = x.shape();
  const int ho = (in.h + 2 * spec.ph - spec.kh) / spec.sh + 1;
  const int wo = (in.w + 2 * spec.pw - spec.kw) / spec.sw + 1;
  Tensor y(Shape{in.n, in.c, ho, wo});
  for (int n = 0; n < in.n; ++n) {
    for (int c = 0; c < in.c; ++c) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          double sum = 0.0;
          for (int i = 0; i < spec.kh; ++i) {
            for (int j = 0; j < spec.kw; ++j) {
              const int iy = oy * spec.sh + i - spec.ph;
              const int ix = ox * spec.sw + j - spec.pw;
              if (iy >= 0 && iy < in.h && ix >= 0 && ix < in.w) {
                best = std::max(best, x.at(n, c, iy, ix));
                sum += x.at(n, c, iy, ix);
              }
            }
          }
          y.at(n, c, oy, ox) = spec.kind == PoolKind::max ? best : sum / (spec.kh * spec.kw);
        }
      }
    }
  }
  return y;
}

AdagradScalar adagrad(double w, double accum, double g, double lr, double epsilon) {
  accum = accum + g * g;
  w = w - lr * g / (std::sqrt(accum) + epsilon);
  return {w, accum};
}

MomentumScalar sgd_momentum(double w, double velocity, double g, double lr, double momentum) {
  velocity = momentum * velocity - lr * g;
  w = w + velocity;
  return {w, velocity};
}

std::vector<double> numeric_gradient(std::span<double> params, const std::function<double()>& loss, double h) {
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double up = loss();
    params[i] = saved - h;
    const double down = loss();
    params[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

GradCheck compare_gradients(std::span<const double> analytic, std::span<const double> numeric, double rtol,
                            double atol) {
  if (analytic.size() != numeric.size()) {
    throw ShapeError("compare_gradients: length mismatch");
  }
  GradCheck r;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i];
    const double n = numeric[i];
    const double diff = std::abs(a - n);
    const double scale = std::max(std::abs(a), std::abs(n));
    r.max_abs_error = std::max(r.max_abs_error, diff);
    if (scale > atol) {
      r.max_rel_error = std::max(r.max_rel_error, diff / scale);
    }
    if (diff > std::max(rtol * scale, atol)) {
      ++r.failures;
    }
    ++r.checked;
  }
  return r;
}

}  // namespace abstractnet::reference
