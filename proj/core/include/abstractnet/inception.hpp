#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "abstractnet/layers.hpp"
#include "abstractnet/rng.hpp"
#include "abstractnet/tensor.hpp"

namespace abstractnet {

/// Branch widths of one inception module.
///
///   input -> 1x1(b1)                       -+
///   input -> 1x1(b3r) -> 3x3(b3)            -+-> concat (b1 + b3 + b5 + pp)
///   input -> 1x1(b5r) -> 5x5(b5)            -|
///   input -> maxpool 3x3/1 pad 1 -> 1x1(pp) -+
///
/// Every convolution is followed by ReLU and preserves the spatial size.
struct InceptionSpec {
  int b1 = 1;
  int b3r = 1;
  int b3 = 1;
  int b5r = 1;
  int b5 = 1;
  int pp = 1;

  int output_channels() const noexcept { return b1 + b3 + b5 + pp; }
  void validate() const;

  friend bool operator==(const InceptionSpec&, const InceptionSpec&) = default;
};

/// Stem and body layers. Stem convolutions are followed by ReLU.
using StemLayer = std::variant<ConvSpec, PoolSpec>;
using BodyLayer = std::variant<InceptionSpec, PoolSpec>;

/// Auxiliary classifier: pool -> 1x1 conv + ReLU -> dense + ReLU -> dropout -> dense.
struct AuxHeadSpec {
  /// Absent means global average pooling.
  std::optional<PoolSpec> pool;
  int conv_channels = 8;
  int hidden = 32;
  double dropout = 0.7;

  friend bool operator==(const AuxHeadSpec&, const AuxHeadSpec&) = default;
};

struct NetworkSpec {
  int in_channels = 1;
  int in_h = 64;
  int in_w = 64;
  std::vector<StemLayer> stem;
  std::vector<BodyLayer> body;
  /// 1-based inception-module indices that carry an auxiliary head.
  std::vector<int> aux_after;
  double aux_weight = 0.3;
  AuxHeadSpec aux_head;
  /// Main head: global average pool -> dropout -> dense to `classes`.
  double head_dropout = 0.4;
  int classes = 2;

  int module_count() const noexcept;
  Shape input_shape(int batch) const noexcept { return {batch, in_channels, in_h, in_w}; }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

enum class NetPreset { mini, faithful };

/// Desk-scale network: 1x64x64 input, three inception modules, no aux heads.
NetworkSpec mini_spec();
/// Nine-module GoogLeNet-shaped stack, 1x224x224, aux heads after modules 3 and 6.
/// Channel widths are the original ones divided by eight.
NetworkSpec faithful_spec();
NetworkSpec preset_spec(NetPreset preset);
NetPreset parse_net_preset(const std::string& name);
std::string to_string(NetPreset preset);

/// Canonical `key=value` text form used in checkpoints.
std::string serialize_spec(const NetworkSpec& spec);
NetworkSpec parse_spec(const std::string& text);

struct ForwardPass;

/// A built network: its spec, the resolved layer graph, and one LayerState per
/// parameterized layer in declaration order (stem, modules, aux heads in
/// module order, main head).
class Network {
 public:
  /// Validates channel and spatial arithmetic end to end (SpecError naming the
  /// offending layer), then Xavier-initializes weights; biases and optimizer
  /// slots start at zero. Same spec and seed give identical parameters.
  static Network build(const NetworkSpec& spec, SeededRng& rng);

  const NetworkSpec& spec() const noexcept { return spec_; }
  std::vector<LayerState>& states() noexcept { return states_; }
  const std::vector<LayerState>& states() const noexcept { return states_; }
  LayerState& state(const std::string& name);
  const LayerState& state(const std::string& name) const;
  std::size_t parameter_count() const noexcept;

  /// Number of inception modules and the 1-based modules carrying aux heads.
  int module_count() const noexcept { return spec_.module_count(); }
  std::vector<int> aux_positions() const;

  /// Input must be (n, in_channels, in_h, in_w). Train mode samples dropout
  /// from `rng` (required then) and evaluates aux heads; eval mode does
  /// neither and is deterministic.
  ForwardPass forward(const Tensor& x, Mode mode, SeededRng* rng = nullptr) const;

  /// Back-propagates main + aux_weight * sum(aux) softmax losses, accumulating
  /// into every LayerState gradient. Returns the total loss. Throws
  /// StateError unless `pass` is a train-mode pass of this network.
  double backward(const ForwardPass& pass, std::span<const int> labels);

  void zero_grad() noexcept;

  struct Graph;

 private:
  Network() = default;

  NetworkSpec spec_;
  std::shared_ptr<const Graph> graph_;
  std::vector<LayerState> states_;
  std::uint64_t id_ = 0;
};

struct ForwardPass {
  Tensor logits;
  std::vector<Tensor> aux_logits;
  /// Output shape of each inception module, in order.
  std::vector<Shape> module_outputs;
  Mode mode = Mode::eval;
  std::uint64_t network_id = 0;

  /// Activation leaving inception module `k` (1-based).
  const Tensor& module_output(int k) const;

  struct Cache;
  std::shared_ptr<const Cache> cache;
};

Network build_network(const NetworkSpec& spec, SeededRng& rng);

/// Predicted class per batch element: argmax of main logits, ties to the lower index.
std::vector<int> predict(const Network& net, const Tensor& x);

/// `.ckpt`: text header ("abstractnet-ckpt 1", spec byte count, spec text),
/// then each LayerState's weights and bias as little-endian float64 in
/// declaration order.
void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace abstractnet
