#include "abstractnet/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "abstractnet/error.hpp"

namespace abstractnet {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

int exact_out(int in, int pad, int k, int stride, const char* layer, const char* axis) {
  const int span = in + 2 * pad - k;
  if (span < 0) {
    throw SpecError(std::string(layer) + ": window larger than padded " + axis + " extent " + std::to_string(in));
  }
  if (span % stride != 0) {
    throw SpecError(std::string(layer) + ": (" + axis + " + 2*pad - window) = " + std::to_string(span) +
                    " is not divisible by stride " + std::to_string(stride));
  }
  return span / stride + 1;
}

bool is_pointwise(const ConvSpec& s) {
  return s.kh == 1 && s.kw == 1 && s.sh == 1 && s.sw == 1 && s.ph == 0 && s.pw == 0;
}

// Output columns [lo, hi) whose input column ox * stride - pad + j lies inside [0, w).
void valid_range(int wo, int stride, int pad, int j, int w, int& lo, int& hi) {
  lo = 0;
  while (lo < wo && lo * stride - pad + j < 0) ++lo;
  hi = wo;
  while (hi > lo && (hi - 1) * stride - pad + j >= w) --hi;
}

// Unfolds one batch item into rows of a (C*kh*kw) x ld row-major matrix,
// writing Ho*Wo entries per row starting at `col`.
void im2col(const double* x, int channels, int h, int w, const ConvSpec& s, int ho, int wo, double* col,
            std::size_t ld) {
  for (int c = 0; c < channels; ++c) {
    const double* plane = x + static_cast<std::size_t>(c) * h * w;
    for (int i = 0; i < s.kh; ++i) {
      for (int j = 0; j < s.kw; ++j) {
        double* row = col + static_cast<std::size_t>((c * s.kh + i) * s.kw + j) * ld;
        int lo = 0;
        int hi = 0;
        valid_range(wo, s.sw, s.pw, j, w, lo, hi);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * s.sh - s.ph + i;
          double* out = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h || lo >= hi) {
            std::fill(out, out + wo, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * w - s.pw + j;
          std::fill(out, out + lo, 0.0);
          if (s.sw == 1) {
            std::copy(src + lo, src + hi, out + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) out[ox] = src[ox * s.sw];
          }
          std::fill(out + hi, out + wo, 0.0);
        }
      }
    }
  }
}

void col2im_add(const double* col, int channels, int h, int w, const ConvSpec& s, int ho, int wo, double* dx,
                std::size_t ld) {
  for (int c = 0; c < channels; ++c) {
    double* plane = dx + static_cast<std::size_t>(c) * h * w;
    for (int i = 0; i < s.kh; ++i) {
      for (int j = 0; j < s.kw; ++j) {
        const double* row = col + static_cast<std::size_t>((c * s.kh + i) * s.kw + j) * ld;
        int lo = 0;
        int hi = 0;
        valid_range(wo, s.sw, s.pw, j, w, lo, hi);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * s.sh - s.ph + i;
          if (iy < 0 || iy >= h) {
            continue;
          }
          double* dst = plane + static_cast<std::size_t>(iy) * w - s.pw + j;
          const double* src = row + static_cast<std::size_t>(oy) * wo;
          for (int ox = lo; ox < hi; ++ox) {
            dst[ox * s.sw] += src[ox];
          }
        }
      }
    }
  }
}

void check_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw RangeError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
}

// Stride-1 convolution on zero-padded planes. With Wp the padded width, output
// (oy, ox) and input (oy + i, ox + j) sit at flat offsets t = oy * Wp + ox and
// t + i * Wp + j, so every kernel tap is one contiguous axpy (or dot) of length
// Ho * Wp. Columns ox >= Wo are scratch and never leave the buffers.
struct DirectGeometry {
  int hp = 0;
  int wp = 0;
  std::size_t plane = 0;  // hp * wp
  std::size_t len = 0;    // ho * wp
  std::size_t slack = 0;  // taps of the last channel may read kw - 1 past its plane
};

// Dot product with eight independent partial sums so the reduction
// vectorizes; the summation order is fixed, hence deterministic.
double dot8(const double* a, const double* b, std::size_t n) {
  double part[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t t = 0;
  for (; t + 8 <= n; t += 8) {
    for (int k = 0; k < 8; ++k) part[k] += a[t + k] * b[t + k];
  }
  double tail = 0.0;
  for (; t < n; ++t) tail += a[t] * b[t];
  return ((part[0] + part[1]) + (part[2] + part[3])) + ((part[4] + part[5]) + (part[6] + part[7])) + tail;
}

double sum8(const double* a, std::size_t n) {
  double part[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t t = 0;
  for (; t + 8 <= n; t += 8) {
    for (int k = 0; k < 8; ++k) part[k] += a[t + k];
  }
  double tail = 0.0;
  for (; t < n; ++t) tail += a[t];
  return ((part[0] + part[1]) + (part[2] + part[3])) + ((part[4] + part[5]) + (part[6] + part[7])) + tail;
}

bool use_direct(const ConvSpec& s) { return s.sh == 1 && s.sw == 1; }

DirectGeometry direct_geometry(const ConvSpec& s, const Shape& in, const Shape& out) {
  DirectGeometry g;
  g.hp = in.h + 2 * s.ph;
  g.wp = in.w + 2 * s.pw;
  g.plane = static_cast<std::size_t>(g.hp) * g.wp;
  g.len = static_cast<std::size_t>(out.h) * g.wp;
  g.slack = static_cast<std::size_t>(s.kw);
  return g;
}

void pad_item(const double* x, int channels, int h, int w, const ConvSpec& s, const DirectGeometry& g, double* xp) {
  for (int c = 0; c < channels; ++c) {
    const double* src = x + static_cast<std::size_t>(c) * h * w;
    double* dst = xp + c * g.plane + static_cast<std::size_t>(s.ph) * g.wp + s.pw;
    for (int r = 0; r < h; ++r) {
      std::copy(src + static_cast<std::size_t>(r) * w, src + static_cast<std::size_t>(r + 1) * w,
                dst + static_cast<std::size_t>(r) * g.wp);
    }
  }
}

// out[t] = init + sum over taps of weight * base[offset + t], computed in tiles
// of kTile outputs held in registers across all taps.
constexpr std::size_t kTile = 32;

struct Tap {
  std::size_t offset;
  double weight;
};

void tile_sum(const std::vector<Tap>& taps, const double* base, std::size_t len, double init, double* out) {
  std::size_t t0 = 0;
  for (; t0 + kTile <= len; t0 += kTile) {
    double acc[kTile];
    for (std::size_t k = 0; k < kTile; ++k) acc[k] = init;
    for (const Tap& tap : taps) {
      const double* src = base + tap.offset + t0;
      for (std::size_t k = 0; k < kTile; ++k) acc[k] += tap.weight * src[k];
    }
    std::copy(acc, acc + kTile, out + t0);
  }
  for (std::size_t t = t0; t < len; ++t) {
    double acc = init;
    for (const Tap& tap : taps) acc += tap.weight * base[tap.offset + t];
    out[t] = acc;
  }
}

void conv_forward_direct(const Tensor& x, const ConvSpec& s, const LayerState& state, Tensor& y) {
  const Shape& in = x.shape();
  const Shape& out = y.shape();
  const DirectGeometry g = direct_geometry(s, in, out);
  const int taps_per_channel = s.kh * s.kw;
  std::vector<double> xp(in.c * g.plane + g.slack + kTile, 0.0);
  std::vector<double> acc(g.len);
  // Taps of every output channel, as offsets into the padded item.
  std::vector<std::vector<Tap>> taps(static_cast<std::size_t>(s.out_channels));
  for (int o = 0; o < s.out_channels; ++o) {
    for (int c = 0; c < in.c; ++c) {
      const double* wk = state.weights.raw() + (static_cast<std::size_t>(o) * in.c + c) * taps_per_channel;
      for (int i = 0; i < s.kh; ++i) {
        for (int j = 0; j < s.kw; ++j) {
          taps[static_cast<std::size_t>(o)].push_back(
              {c * g.plane + static_cast<std::size_t>(i) * g.wp + j, wk[i * s.kw + j]});
        }
      }
    }
  }
  for (int n = 0; n < in.n; ++n) {
    pad_item(x.raw() + n * in.item(), in.c, in.h, in.w, s, g, xp.data());
    for (int o = 0; o < s.out_channels; ++o) {
      tile_sum(taps[static_cast<std::size_t>(o)], xp.data(), g.len, state.bias[static_cast<std::size_t>(o)],
               acc.data());
      double* yo = y.raw() + y.offset(n, o, 0, 0);
      for (int r = 0; r < out.h; ++r) {
        const double* src = acc.data() + static_cast<std::size_t>(r) * g.wp;
        std::copy(src, src + out.w, yo + static_cast<std::size_t>(r) * out.w);
      }
    }
  }
}

// The input gradient is a full correlation of dy with the flipped kernel:
// dxp[u] = sum_{o,i,j} w[o,c,i,j] * dy_o[u - (i * Wp + j)]. Each dy plane is
// stored behind a zero front of (kh-1) * Wp + kw - 1 entries so that every
// shifted read stays in bounds, and reads of scratch columns see zeros.
void conv_backward_direct(const Tensor& x, const Tensor& dy, const ConvSpec& s, LayerState& state, Tensor* dx) {
  const Shape& in = x.shape();
  const Shape& out = dy.shape();
  const DirectGeometry g = direct_geometry(s, in, out);
  const int taps_per_channel = s.kh * s.kw;
  const std::size_t front = static_cast<std::size_t>(s.kh - 1) * g.wp + (s.kw - 1);
  const std::size_t region = front + g.plane + kTile;
  std::vector<double> xp(in.c * g.plane + g.slack + kTile, 0.0);
  std::vector<double> dye(static_cast<std::size_t>(s.out_channels) * region, 0.0);
  std::vector<double> dxrow;
  std::vector<std::vector<Tap>> taps;
  // Only the rows of the padded plane that hold real input are needed.
  const std::size_t u0 = static_cast<std::size_t>(s.ph) * g.wp;
  const std::size_t ulen = static_cast<std::size_t>(in.h) * g.wp;
  if (dx) {
    dxrow.resize(ulen);
    taps.resize(static_cast<std::size_t>(in.c));
    for (int c = 0; c < in.c; ++c) {
      for (int o = 0; o < s.out_channels; ++o) {
        const double* wk = state.weights.raw() + (static_cast<std::size_t>(o) * in.c + c) * taps_per_channel;
        for (int i = 0; i < s.kh; ++i) {
          for (int j = 0; j < s.kw; ++j) {
            const std::size_t shift = static_cast<std::size_t>(i) * g.wp + j;
            taps[static_cast<std::size_t>(c)].push_back({o * region + front - shift, wk[i * s.kw + j]});
          }
        }
      }
    }
  }
  for (int n = 0; n < in.n; ++n) {
    pad_item(x.raw() + n * in.item(), in.c, in.h, in.w, s, g, xp.data());
    for (int o = 0; o < s.out_channels; ++o) {
      const double* dyo = dy.raw() + dy.offset(n, o, 0, 0);
      double* d = dye.data() + o * region + front;
      double bsum = 0.0;
      for (int r = 0; r < out.h; ++r) {
        const double* row = dyo + static_cast<std::size_t>(r) * out.w;
        std::copy(row, row + out.w, d + static_cast<std::size_t>(r) * g.wp);
        for (int c = 0; c < out.w; ++c) bsum += row[c];
      }
      state.grad_bias[static_cast<std::size_t>(o)] += bsum;
      for (int c = 0; c < in.c; ++c) {
        double* gw = state.grad_weights.raw() + (static_cast<std::size_t>(o) * in.c + c) * taps_per_channel;
        const double* xc = xp.data() + c * g.plane;
        for (int i = 0; i < s.kh; ++i) {
          for (int j = 0; j < s.kw; ++j) {
            gw[i * s.kw + j] += dot8(d, xc + static_cast<std::size_t>(i) * g.wp + j, g.len);
          }
        }
      }
    }
    if (dx) {
      for (int c = 0; c < in.c; ++c) {
        tile_sum(taps[static_cast<std::size_t>(c)], dye.data() + u0, ulen, 0.0, dxrow.data());
        double* dst = dx->raw() + dx->offset(n, c, 0, 0);
        for (int r = 0; r < in.h; ++r) {
          const double* src = dxrow.data() + static_cast<std::size_t>(r) * g.wp + s.pw;
          std::copy(src, src + in.w, dst + static_cast<std::size_t>(r) * in.w);
        }
      }
    }
  }
}

}  // namespace

// Specs ---------------------------------------------------------------------

void ConvSpec::validate() const {
  if (in_channels < 1 || out_channels < 1) {
    throw SpecError("conv: channel counts must be >= 1");
  }
  if (kh < 1 || kw < 1 || sh < 1 || sw < 1 || ph < 0 || pw < 0) {
    throw SpecError("conv: kernel and stride must be >= 1, padding >= 0");
  }
}

Shape ConvSpec::output_shape(const Shape& in) const {
  validate();
  if (in.c != in_channels) {
    throw ShapeError("conv: input has " + std::to_string(in.c) + " channels, layer expects " +
                     std::to_string(in_channels));
  }
  return {in.n, out_channels, exact_out(in.h, ph, kh, sh, "conv", "height"),
          exact_out(in.w, pw, kw, sw, "conv", "width")};
}

ConvSpec same_conv(int in_channels, int out_channels, int k) {
  return ConvSpec{in_channels, out_channels, k, k, 1, 1, k / 2, k / 2};
}

void PoolSpec::validate() const {
  if (kh < 1 || kw < 1 || sh < 1 || sw < 1 || ph < 0 || pw < 0) {
    throw SpecError("pool: window and stride must be >= 1, padding >= 0");
  }
  if (ph >= kh || pw >= kw) {
    throw SpecError("pool: padding must be smaller than the window");
  }
}

Shape PoolSpec::output_shape(const Shape& in) const {
  validate();
  return {in.n, in.c, exact_out(in.h, ph, kh, sh, "pool", "height"), exact_out(in.w, pw, kw, sw, "pool", "width")};
}

LayerState LayerState::for_conv(std::string name, const ConvSpec& spec) {
  spec.validate();
  LayerState s;
  s.name = std::move(name);
  const Shape ws{spec.out_channels, spec.in_channels, spec.kh, spec.kw};
  const Shape bs{1, spec.out_channels, 1, 1};
  s.weights = Tensor(ws);
  s.bias = Tensor(bs);
  s.grad_weights = Tensor(ws);
  s.grad_bias = Tensor(bs);
  s.accum_weights = Tensor(ws);
  s.accum_bias = Tensor(bs);
  s.velocity_weights = Tensor(ws);
  s.velocity_bias = Tensor(bs);
  s.fan_in = spec.in_channels * spec.kh * spec.kw;
  s.fan_out = spec.out_channels * spec.kh * spec.kw;
  return s;
}

LayerState LayerState::for_dense(std::string name, int in_features, int out_features) {
  return for_conv(std::move(name), ConvSpec{in_features, out_features, 1, 1, 1, 1, 0, 0});
}

void LayerState::zero_grad() noexcept {
  grad_weights.fill(0.0);
  grad_bias.fill(0.0);
}

// Convolution ---------------------------------------------------------------

Tensor conv_forward(const Tensor& x, const ConvSpec& spec, const LayerState& state) {
  const Shape out = spec.output_shape(x.shape());
  require_same_shape(state.weights.shape(), Shape{spec.out_channels, spec.in_channels, spec.kh, spec.kw},
                     "conv_forward weights");
  const bool pointwise = is_pointwise(spec);
  Tensor y(out);
  if (use_direct(spec) && !pointwise) {
    conv_forward_direct(x, spec, state, y);
    return y;
  }
  // im2col + GEMM for strided kernels; a 1x1 kernel needs no unfolding.
  const Shape& in = x.shape();
  const int k = spec.in_channels * spec.kh * spec.kw;
  const int p = out.h * out.w;
  ConstMapMat wmat(state.weights.raw(), spec.out_channels, k);
  Eigen::Map<const Eigen::VectorXd> bias(state.bias.raw(), spec.out_channels);
  std::vector<double> col;
  if (!pointwise) {
    col.resize(static_cast<std::size_t>(k) * p);
  }
  for (int n = 0; n < in.n; ++n) {
    const double* xn = x.raw() + n * in.item();
    const double* colp = xn;
    if (!pointwise) {
      im2col(xn, in.c, in.h, in.w, spec, out.h, out.w, col.data(), static_cast<std::size_t>(p));
      colp = col.data();
    }
    MapMat ymat(y.raw() + n * out.item(), spec.out_channels, p);
    ymat.noalias() = wmat * ConstMapMat(colp, k, p);
    ymat.colwise() += bias;
  }
  return y;
}

Tensor conv_backward(const Tensor& x, const Tensor& dy, const ConvSpec& spec, LayerState& state,
                     bool need_input_grad) {
  const Shape out = spec.output_shape(x.shape());
  require_same_shape(dy.shape(), out, "conv_backward dy");
  const Shape& in = x.shape();
  const bool pointwise = is_pointwise(spec);
  Tensor dx;
  if (need_input_grad) {
    dx = Tensor(in);
  }
  if (use_direct(spec) && !pointwise) {
    conv_backward_direct(x, dy, spec, state, need_input_grad ? &dx : nullptr);
    return dx;
  }
  const int k = spec.in_channels * spec.kh * spec.kw;
  const int p = out.h * out.w;
  ConstMapMat wmat(state.weights.raw(), spec.out_channels, k);
  MapMat dw(state.grad_weights.raw(), spec.out_channels, k);
  Eigen::Map<Eigen::VectorXd> db(state.grad_bias.raw(), spec.out_channels);
  std::vector<double> col;
  std::vector<double> dcol;
  if (!pointwise) {
    col.resize(static_cast<std::size_t>(k) * p);
    if (need_input_grad) {
      dcol.resize(col.size());
    }
  }
  for (int n = 0; n < in.n; ++n) {
    const double* xn = x.raw() + n * in.item();
    const double* colp = xn;
    if (!pointwise) {
      im2col(xn, in.c, in.h, in.w, spec, out.h, out.w, col.data(), static_cast<std::size_t>(p));
      colp = col.data();
    }
    ConstMapMat dymat(dy.raw() + n * out.item(), spec.out_channels, p);
    dw.noalias() += dymat * ConstMapMat(colp, k, p).transpose();
    // Eigen's row reduction peels an unaligned head, which makes the result
    // depend on the buffer address; a fixed-order sum keeps runs reproducible.
    for (int o = 0; o < spec.out_channels; ++o) {
      db[o] += sum8(dy.raw() + n * out.item() + static_cast<std::size_t>(o) * p, static_cast<std::size_t>(p));
    }
    if (need_input_grad) {
      if (pointwise) {
        MapMat(dx.raw() + n * in.item(), k, p).noalias() = wmat.transpose() * dymat;
      } else {
        MapMat(dcol.data(), k, p).noalias() = wmat.transpose() * dymat;
        col2im_add(dcol.data(), in.c, in.h, in.w, spec, out.h, out.w, dx.raw() + n * in.item(),
                   static_cast<std::size_t>(p));
      }
    }
  }
  return dx;
}

// Pooling -------------------------------------------------------------------

namespace {

// Separable max pool. A horizontal pass over rows padded with -inf picks the
// first maximum of each row segment; a vertical pass then picks the first row
// whose segment maximum wins. Together that is the first maximum of the window
// in row-major order.
void max_pool_separable(const Tensor& x, const PoolSpec& spec, PoolResult& r) {
  const Shape& in = x.shape();
  const Shape& out = r.y.shape();
  constexpr double kLow = -std::numeric_limits<double>::infinity();
  const int wp = in.w + 2 * spec.pw;
  std::vector<double> row(static_cast<std::size_t>(wp), kLow);
  std::vector<double> hv(static_cast<std::size_t>(in.h) * out.w);
  std::vector<int> hc(hv.size());
  std::vector<double> best(static_cast<std::size_t>(out.w));
  std::vector<std::size_t> arg(best.size());
  for (int n = 0; n < in.n; ++n) {
    for (int c = 0; c < in.c; ++c) {
      const std::size_t base = x.offset(n, c, 0, 0);
      for (int iy = 0; iy < in.h; ++iy) {
        const double* src = x.raw() + base + static_cast<std::size_t>(iy) * in.w;
        std::copy(src, src + in.w, row.begin() + spec.pw);
        double* v = hv.data() + static_cast<std::size_t>(iy) * out.w;
        int* col = hc.data() + static_cast<std::size_t>(iy) * out.w;
        for (int ox = 0; ox < out.w; ++ox) {
          v[ox] = row[static_cast<std::size_t>(ox) * spec.sw];
          col[ox] = ox * spec.sw;
        }
        for (int dx = 1; dx < spec.kw; ++dx) {
          for (int ox = 0; ox < out.w; ++ox) {
            const int p = ox * spec.sw + dx;
            const double cand = row[static_cast<std::size_t>(p)];
            const bool better = cand > v[ox];
            v[ox] = better ? cand : v[ox];
            col[ox] = better ? p : col[ox];
          }
        }
        for (int ox = 0; ox < out.w; ++ox) col[ox] -= spec.pw;
      }
      for (int oy = 0; oy < out.h; ++oy) {
        const int y0 = oy * spec.sh - spec.ph;
        const int ylo = std::max(y0, 0);
        const int yhi = std::min(y0 + spec.kh, in.h);
        for (int iy = ylo; iy < yhi; ++iy) {
          const double* v = hv.data() + static_cast<std::size_t>(iy) * out.w;
          const int* col = hc.data() + static_cast<std::size_t>(iy) * out.w;
          const std::size_t rowbase = base + static_cast<std::size_t>(iy) * in.w;
          if (iy == ylo) {
            for (int ox = 0; ox < out.w; ++ox) {
              best[static_cast<std::size_t>(ox)] = v[ox];
              arg[static_cast<std::size_t>(ox)] = rowbase + static_cast<std::size_t>(col[ox]);
            }
            continue;
          }
          for (int ox = 0; ox < out.w; ++ox) {
            const auto k = static_cast<std::size_t>(ox);
            const bool better = v[ox] > best[k];
            best[k] = better ? v[ox] : best[k];
            arg[k] = better ? rowbase + static_cast<std::size_t>(col[ox]) : arg[k];
          }
        }
        const std::size_t o = r.y.offset(n, c, oy, 0);
        std::copy(best.begin(), best.end(), r.y.raw() + o);
        std::copy(arg.begin(), arg.end(), r.argmax.begin() + static_cast<std::ptrdiff_t>(o));
      }
    }
  }
}

}  // namespace

PoolResult pool_forward(const Tensor& x, const PoolSpec& spec) {
  const Shape out = spec.output_shape(x.shape());
  const Shape& in = x.shape();
  PoolResult r{Tensor(out), in, {}};
  if (spec.kind == PoolKind::max) {
    r.argmax.resize(out.size());
    max_pool_separable(x, spec, r);
    return r;
  }
  // Average over the full window area; padding counts as zero.
  const double area = static_cast<double>(spec.kh) * spec.kw;
  const double* xs = x.raw();
  std::size_t o = 0;
  for (int n = 0; n < in.n; ++n) {
    for (int c = 0; c < in.c; ++c) {
      const std::size_t base = x.offset(n, c, 0, 0);
      for (int oy = 0; oy < out.h; ++oy) {
        const int y0 = oy * spec.sh - spec.ph;
        const int ylo = std::max(y0, 0);
        const int yhi = std::min(y0 + spec.kh, in.h);
        for (int ox = 0; ox < out.w; ++ox, ++o) {
          const int x0 = ox * spec.sw - spec.pw;
          const int xlo = std::max(x0, 0);
          const int xhi = std::min(x0 + spec.kw, in.w);
          double sum = 0.0;
          for (int iy = ylo; iy < yhi; ++iy) {
            const double* rowp = xs + base + static_cast<std::size_t>(iy) * in.w;
            for (int ix = xlo; ix < xhi; ++ix) sum += rowp[ix];
          }
          r.y[o] = sum / area;
        }
      }
    }
  }
  return r;
}

Tensor pool_backward(const Tensor& dy, const PoolSpec& spec, const PoolResult& saved) {
  const Shape out = spec.output_shape(saved.input_shape);
  require_same_shape(dy.shape(), out, "pool_backward dy");
  const Shape& in = saved.input_shape;
  Tensor dx(in);
  if (spec.kind == PoolKind::max) {
    if (saved.argmax.size() != dy.size()) {
      throw StateError("pool_backward: saved argmax does not match dy");
    }
    for (std::size_t o = 0; o < dy.size(); ++o) {
      dx[saved.argmax[o]] += dy[o];
    }
    return dx;
  }
  const double inv_area = 1.0 / (static_cast<double>(spec.kh) * spec.kw);
  std::size_t o = 0;
  for (int n = 0; n < in.n; ++n) {
    for (int c = 0; c < in.c; ++c) {
      const std::size_t base = dx.offset(n, c, 0, 0);
      for (int oy = 0; oy < out.h; ++oy) {
        const int y0 = oy * spec.sh - spec.ph;
        const int ylo = std::max(y0, 0);
        const int yhi = std::min(y0 + spec.kh, in.h);
        for (int ox = 0; ox < out.w; ++ox, ++o) {
          const int x0 = ox * spec.sw - spec.pw;
          const int xlo = std::max(x0, 0);
          const int xhi = std::min(x0 + spec.kw, in.w);
          const double g = dy[o] * inv_area;
          for (int iy = ylo; iy < yhi; ++iy) {
            for (int ix = xlo; ix < xhi; ++ix) {
              dx[base + static_cast<std::size_t>(iy) * in.w + ix] += g;
            }
          }
        }
      }
    }
  }
  return dx;
}

// Elementwise ---------------------------------------------------------------

Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = x[i] > 0.0 ? x[i] : 0.0;
  }
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  require_same_shape(x.shape(), dy.shape(), "relu_backward");
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
  }
  return dx;
}

// Concatenation -------------------------------------------------------------

Tensor concat_channels(std::span<const Tensor> xs) {
  if (xs.empty()) {
    throw ShapeError("concat_channels: no inputs");
  }
  const Shape& first = xs.front().shape();
  int channels = 0;
  for (const Tensor& t : xs) {
    const Shape& s = t.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels: " + to_string(s) + " does not match " + to_string(first) +
                       " in batch or spatial extent");
    }
    channels += s.c;
  }
  Tensor y(Shape{first.n, channels, first.h, first.w});
  double* dst = y.raw();
  for (int n = 0; n < first.n; ++n) {
    for (const Tensor& t : xs) {
      const std::size_t len = t.shape().item();
      const double* src = t.raw() + n * len;
      dst = std::copy(src, src + len, dst);
    }
  }
  return y;
}

std::vector<Tensor> split_channels(const Tensor& y, std::span<const int> channels) {
  const Shape& s = y.shape();
  int total = 0;
  for (int c : channels) {
    if (c < 1) {
      throw ShapeError("split_channels: channel counts must be >= 1");
    }
    total += c;
  }
  if (total != s.c) {
    throw ShapeError("split_channels: parts sum to " + std::to_string(total) + " channels, tensor has " +
                     std::to_string(s.c));
  }
  std::vector<Tensor> parts;
  parts.reserve(channels.size());
  for (int c : channels) {
    parts.emplace_back(Shape{s.n, c, s.h, s.w});
  }
  const double* src = y.raw();
  for (int n = 0; n < s.n; ++n) {
    for (Tensor& part : parts) {
      const std::size_t len = part.shape().item();
      std::copy(src, src + len, part.raw() + n * len);
      src += len;
    }
  }
  return parts;
}

// Dense ---------------------------------------------------------------------

Tensor dense_forward(const Tensor& x, const LayerState& state) {
  const int out = state.weights.shape().n;
  const int k = state.weights.shape().c;
  const Shape& s = x.shape();
  if (static_cast<int>(s.item()) != k) {
    throw ShapeError("dense_forward: input has " + std::to_string(s.item()) + " features per item, layer expects " +
                     std::to_string(k));
  }
  Tensor y(Shape{s.n, out, 1, 1});
  MapMat ymat(y.raw(), s.n, out);
  ymat.noalias() = ConstMapMat(x.raw(), s.n, k) * ConstMapMat(state.weights.raw(), out, k).transpose();
  ymat.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(state.bias.raw(), out);
  return y;
}

Tensor dense_backward(const Tensor& x, const Tensor& dy, LayerState& state) {
  const int out = state.weights.shape().n;
  const int k = state.weights.shape().c;
  const Shape& s = x.shape();
  if (static_cast<int>(s.item()) != k) {
    throw ShapeError("dense_backward: input feature count mismatch");
  }
  require_same_shape(dy.shape(), Shape{s.n, out, 1, 1}, "dense_backward dy");
  ConstMapMat dymat(dy.raw(), s.n, out);
  ConstMapMat xmat(x.raw(), s.n, k);
  MapMat(state.grad_weights.raw(), out, k).noalias() += dymat.transpose() * xmat;
  Eigen::Map<Eigen::RowVectorXd>(state.grad_bias.raw(), out) += dymat.colwise().sum();
  Tensor dx(s);
  MapMat(dx.raw(), s.n, k).noalias() = dymat * ConstMapMat(state.weights.raw(), out, k);
  return dx;
}

// Dropout -------------------------------------------------------------------

DropoutResult dropout(const Tensor& x, double rate, SeededRng& rng, Mode mode) {
  check_rate(rate);
  if (mode == Mode::eval || rate == 0.0) {
    return {x, Tensor()};
  }
  const double keep_scale = 1.0 / (1.0 - rate);
  DropoutResult r{Tensor(x.shape()), Tensor(x.shape())};
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double m = rng.uniform() < rate ? 0.0 : keep_scale;
    r.mask[i] = m;
    r.y[i] = x[i] * m;
  }
  return r;
}

Tensor dropout_backward(const Tensor& dy, const DropoutResult& saved) {
  if (saved.mask.empty()) {
    return dy;
  }
  return map_binary(dy, saved.mask, BinaryOp::mul);
}

// Loss ----------------------------------------------------------------------

Tensor softmax(const Tensor& logits) {
  const Shape& s = logits.shape();
  const int k = static_cast<int>(s.item());
  Tensor p(s);
  for (int n = 0; n < s.n; ++n) {
    const double* z = logits.raw() + static_cast<std::size_t>(n) * k;
    double* q = p.raw() + static_cast<std::size_t>(n) * k;
    const double zmax = *std::max_element(z, z + k);
    double total = 0.0;
    for (int j = 0; j < k; ++j) {
      q[j] = std::exp(z[j] - zmax);
      total += q[j];
    }
    for (int j = 0; j < k; ++j) {
      q[j] /= total;
    }
  }
  return p;
}

LossResult softmax_xent(const Tensor& logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  const int k = static_cast<int>(s.item());
  if (static_cast<int>(labels.size()) != s.n) {
    throw ShapeError("softmax_xent: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(s.n));
  }
  require_finite(logits, "softmax_xent logits");
  LossResult r{0.0, Tensor(s)};
  const double inv_n = 1.0 / s.n;
  for (int n = 0; n < s.n; ++n) {
    const int label = labels[n];
    if (label < 0 || label >= k) {
      throw RangeError("softmax_xent: label " + std::to_string(label) + " outside [0, " + std::to_string(k) + ")");
    }
    const double* z = logits.raw() + static_cast<std::size_t>(n) * k;
    double* d = r.dlogits.raw() + static_cast<std::size_t>(n) * k;
    const int top = static_cast<int>(std::max_element(z, z + k) - z);
    const double zmax = z[top];
    double rest = 0.0;
    for (int j = 0; j < k; ++j) {
      if (j != top) {
        rest += std::exp(z[j] - zmax);
      }
    }
    const double log_total = std::log1p(rest);
    r.loss += (zmax + log_total - z[label]) * inv_n;
    for (int j = 0; j < k; ++j) {
      d[j] = std::exp(z[j] - zmax - log_total) * inv_n;
    }
    d[label] -= inv_n;
  }
  return r;
}

}  // namespace abstractnet
