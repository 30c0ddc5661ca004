#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "abstractnet/inception.hpp"
#include "abstractnet/layers.hpp"
#include "abstractnet/shapes.hpp"

namespace abstractnet {

enum class XavierVariant {
  fan_in,   ///< bound sqrt(3 / fan_in), variance 1 / fan_in
  fan_avg,  ///< bound sqrt(6 / (fan_in + fan_out))
};

Tensor xavier_init(Shape shape, int fan_in, SeededRng& rng, XavierVariant variant = XavierVariant::fan_in,
                   int fan_out = 1);

enum class OptimMethod { adagrad, sgd_momentum };
std::string to_string(OptimMethod m);
OptimMethod parse_optim_method(const std::string& name);

struct OptimConfig {
  OptimMethod method = OptimMethod::adagrad;
  double base_lr = 0.01;
  double momentum = 0.9;
  double epsilon = 1e-8;

  /// base_lr >= 0, 0 <= momentum < 1, epsilon > 0; throws RangeError otherwise.
  /// A zero rate is accepted so that null updates can be exercised.
  void validate() const;
};

/// accumulator += g^2; w -= lr * g / (sqrt(accumulator) + epsilon); then g = 0.
void adagrad_step(LayerState& state, double lr, double epsilon);
/// v = momentum * v - lr * g; w += v; then g = 0.
void sgd_momentum_step(LayerState& state, double lr, double momentum);
void apply_update(std::span<LayerState> states, const OptimConfig& cfg);

struct TrainConfig {
  int iterations = 1000;
  int batch_size = 32;
  int loss_report_every = 10;

  void validate() const;
};

struct LossPoint {
  int iteration = 0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<LossPoint> trace;
  /// Mean main-head cross-entropy over the whole training set, eval mode,
  /// measured after the last update.
  double final_loss = 0.0;
};

/// Stacks images into an (n, channels, h, w) batch; grayscale is replicated
/// across channels.
Tensor make_batch(const Dataset& data, std::span<const std::size_t> indices, int channels);

/// Mean eval-mode cross-entropy of the main head over `data`.
double dataset_loss(const Network& net, const Dataset& data, int batch_size = 64);

/// Exactly `tc.iterations` mini-batch updates. Batches are drawn from
/// shuffled passes over the data, reshuffled each pass from `rng.split({pass})`.
TrainResult train(Network& net, const Dataset& data, const OptimConfig& optim, const TrainConfig& tc,
                  const SeededRng& rng);

void write_loss_trace(std::span<const LossPoint> trace, const std::filesystem::path& path);

}  // namespace abstractnet
