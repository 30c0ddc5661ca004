#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "abstractnet/rng.hpp"
#include "abstractnet/tensor.hpp"

namespace abstractnet {

enum class Mode { train, eval };

/// 2-D convolution geometry. Implemented as cross-correlation (no kernel flip)
/// with symmetric zero padding.
struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kh = 1, kw = 1;
  int sh = 1, sw = 1;
  int ph = 0, pw = 0;

  /// Throws SpecError on bad geometry or when (h + 2p - k) is not a multiple
  /// of the stride; ShapeError when the channel count disagrees.
  Shape output_shape(const Shape& in) const;
  void validate() const;

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// "Same"-size square convolution: k x k, stride 1, pad k/2.
ConvSpec same_conv(int in_channels, int out_channels, int k);

enum class PoolKind { max, average };

struct PoolSpec {
  PoolKind kind = PoolKind::max;
  int kh = 2, kw = 2;
  int sh = 2, sw = 2;
  int ph = 0, pw = 0;

  Shape output_shape(const Shape& in) const;
  void validate() const;

  friend bool operator==(const PoolSpec&, const PoolSpec&) = default;
};

/// Trainable parameters of one conv or dense layer, their gradients, and the
/// optimizer slots (ADAGRAD accumulator, momentum velocity). Slots start at zero.
struct LayerState {
  std::string name;
  Tensor weights;
  Tensor bias;
  Tensor grad_weights;
  Tensor grad_bias;
  Tensor accum_weights;
  Tensor accum_bias;
  Tensor velocity_weights;
  Tensor velocity_bias;
  /// Number of inputs feeding one output unit (in * kh * kw for conv).
  int fan_in = 1;
  int fan_out = 1;

  /// Weights (out, in, kh, kw), bias (1, out, 1, 1), everything zero.
  static LayerState for_conv(std::string name, const ConvSpec& spec);
  /// Weights (out, in, 1, 1), bias (1, out, 1, 1), everything zero.
  static LayerState for_dense(std::string name, int in_features, int out_features);

  void zero_grad() noexcept;
  std::size_t parameter_count() const noexcept { return weights.size() + bias.size(); }
};

// Convolution ---------------------------------------------------------------

Tensor conv_forward(const Tensor& x, const ConvSpec& spec, const LayerState& state);

/// Accumulates into state.grad_weights / grad_bias and returns dx. When
/// `need_input_grad` is false the returned tensor is empty.
Tensor conv_backward(const Tensor& x, const Tensor& dy, const ConvSpec& spec, LayerState& state,
                     bool need_input_grad = true);

// Pooling -------------------------------------------------------------------

struct PoolResult {
  Tensor y;
  Shape input_shape;
  /// For max pooling: flat input offset of the winning element per output element.
  std::vector<std::size_t> argmax;
};

/// Max pooling ignores padded cells; average pooling divides by the full
/// window area (padded cells count as zeros). Max ties go to the first
/// maximum in row-major window order.
PoolResult pool_forward(const Tensor& x, const PoolSpec& spec);
Tensor pool_backward(const Tensor& dy, const PoolSpec& spec, const PoolResult& saved);

// Elementwise ---------------------------------------------------------------

Tensor relu(const Tensor& x);
/// Passes dy where x > 0; the derivative at exactly 0 is 0.
Tensor relu_backward(const Tensor& x, const Tensor& dy);

// Channel concatenation -----------------------------------------------------

Tensor concat_channels(std::span<const Tensor> xs);
/// Inverse of concat_channels: slices `y` into consecutive channel groups.
std::vector<Tensor> split_channels(const Tensor& y, std::span<const int> channels);

// Dense ---------------------------------------------------------------------

/// x is any (n, c, h, w) with c*h*w equal to the layer's input width; the
/// result is (n, out, 1, 1).
Tensor dense_forward(const Tensor& x, const LayerState& state);
/// Accumulates parameter gradients and returns dx with x's shape.
Tensor dense_backward(const Tensor& x, const Tensor& dy, LayerState& state);

// Dropout -------------------------------------------------------------------

struct DropoutResult {
  Tensor y;
  /// Per-element multiplier (0 or 1/(1-rate)); empty when dropout was a no-op.
  Tensor mask;
};

/// Inverted dropout. Throws RangeError unless 0 <= rate < 1.
DropoutResult dropout(const Tensor& x, double rate, SeededRng& rng, Mode mode);
Tensor dropout_backward(const Tensor& dy, const DropoutResult& saved);

// Loss ----------------------------------------------------------------------

struct LossResult {
  double loss = 0.0;
  Tensor dlogits;
};

/// Mean over the batch of -log softmax(logits)[label]; dlogits = (p - onehot) / n.
LossResult softmax_xent(const Tensor& logits, std::span<const int> labels);

/// Row-wise softmax of (n, k, 1, 1) logits.
Tensor softmax(const Tensor& logits);

}  // namespace abstractnet
