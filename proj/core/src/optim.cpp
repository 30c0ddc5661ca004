#include "abstractnet/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "abstractnet/error.hpp"

namespace abstractnet {

Tensor xavier_init(Shape shape, int fan_in, SeededRng& rng, XavierVariant variant, int fan_out) {
  if (fan_in < 1) {
    throw RangeError("xavier_init: fan_in must be >= 1");
  }
  double bound = std::sqrt(3.0 / fan_in);
  if (variant == XavierVariant::fan_avg) {
    if (fan_out < 1) {
      throw RangeError("xavier_init: fan_out must be >= 1");
    }
    bound = std::sqrt(6.0 / (fan_in + fan_out));
  }
  return rng_uniform(rng, shape, -bound, bound);
}

std::string to_string(OptimMethod m) { return m == OptimMethod::adagrad ? "adagrad" : "sgd"; }

OptimMethod parse_optim_method(const std::string& name) {
  if (name == "adagrad") return OptimMethod::adagrad;
  if (name == "sgd" || name == "sgd_momentum") return OptimMethod::sgd_momentum;
  throw ParamError("unknown optimizer '" + name + "' (expected adagrad or sgd)");
}

void OptimConfig::validate() const {
  if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) {
    throw RangeError("optim: learning rate must be finite and >= 0");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw RangeError("optim: momentum must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) {
    throw RangeError("optim: epsilon must be > 0");
  }
}

namespace {

void adagrad_tensor(Tensor& w, Tensor& g, Tensor& acc, double lr, double epsilon) {
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc[i] += g[i] * g[i];
    w[i] -= lr * g[i] / (std::sqrt(acc[i]) + epsilon);
    g[i] = 0.0;
  }
}

void momentum_tensor(Tensor& w, Tensor& g, Tensor& v, double lr, double momentum) {
  for (std::size_t i = 0; i < w.size(); ++i) {
    v[i] = momentum * v[i] - lr * g[i];
    w[i] += v[i];
    g[i] = 0.0;
  }
}

}  // namespace

void adagrad_step(LayerState& state, double lr, double epsilon) {
  adagrad_tensor(state.weights, state.grad_weights, state.accum_weights, lr, epsilon);
  adagrad_tensor(state.bias, state.grad_bias, state.accum_bias, lr, epsilon);
  require_finite(state.weights, state.name);
}

void sgd_momentum_step(LayerState& state, double lr, double momentum) {
  momentum_tensor(state.weights, state.grad_weights, state.velocity_weights, lr, momentum);
  momentum_tensor(state.bias, state.grad_bias, state.velocity_bias, lr, momentum);
  require_finite(state.weights, state.name);
}

void apply_update(std::span<LayerState> states, const OptimConfig& cfg) {
  for (LayerState& s : states) {
    if (cfg.method == OptimMethod::adagrad) {
      adagrad_step(s, cfg.base_lr, cfg.epsilon);
    } else {
      sgd_momentum_step(s, cfg.base_lr, cfg.momentum);
    }
  }
}

void TrainConfig::validate() const {
  if (iterations < 1) throw RangeError("train: iterations must be >= 1");
  if (batch_size < 1) throw RangeError("train: batch_size must be >= 1");
  if (loss_report_every < 1) throw RangeError("train: loss_report_every must be >= 1");
}

Tensor make_batch(const Dataset& data, std::span<const std::size_t> indices, int channels) {
  if (indices.empty()) {
    throw ShapeError("make_batch: empty batch");
  }
  const ImageGray& first = data.at(indices.front()).image;
  Tensor x(Shape{static_cast<int>(indices.size()), channels, first.height, first.width});
  const std::size_t plane = static_cast<std::size_t>(first.height) * first.width;
  double* dst = x.raw();
  for (std::size_t idx : indices) {
    const ImageGray& img = data.at(idx).image;
    if (img.height != first.height || img.width != first.width) {
      throw ShapeError("make_batch: images differ in size");
    }
    for (int c = 0; c < channels; ++c) {
      dst = std::copy(img.pixels.begin(), img.pixels.begin() + static_cast<std::ptrdiff_t>(plane), dst);
    }
  }
  return x;
}

double dataset_loss(const Network& net, const Dataset& data, int batch_size) {
  if (data.empty()) {
    throw RangeError("dataset_loss: empty dataset");
  }
  double total = 0.0;
  std::vector<std::size_t> idx;
  std::vector<int> labels;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    labels.clear();
    for (std::size_t i : idx) labels.push_back(data[i].label);
    const ForwardPass pass = net.forward(make_batch(data, idx, net.spec().in_channels), Mode::eval);
    total += softmax_xent(pass.logits, labels).loss * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(data.size());
}

TrainResult train(Network& net, const Dataset& data, const OptimConfig& optim, const TrainConfig& tc,
                  const SeededRng& rng) {
  optim.validate();
  tc.validate();
  if (data.empty()) {
    throw RangeError("train: empty training set");
  }
  for (const LabeledImage& s : data) {
    if (s.label < 0 || s.label >= net.spec().classes) {
      throw RangeError("train: label " + std::to_string(s.label) + " out of range");
    }
  }

  retain_freed_memory();
  TrainResult result;
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  std::uint64_t pass_index = 0;
  SeededRng dropout_rng = rng.split({0xD0});
  std::vector<std::size_t> batch(static_cast<std::size_t>(tc.batch_size));
  std::vector<int> labels(batch.size());

  net.zero_grad();
  for (int it = 1; it <= tc.iterations; ++it) {
    for (std::size_t b = 0; b < batch.size(); ++b) {
      if (cursor == order.size()) {
        // Fisher-Yates over a fresh pass through the data.
        std::iota(order.begin(), order.end(), std::size_t{0});
        SeededRng shuffle = rng.split({0x5A, pass_index++});
        for (std::size_t i = order.size(); i > 1; --i) {
          const auto j = static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<std::int64_t>(i) - 1));
          std::swap(order[i - 1], order[j]);
        }
        cursor = 0;
      }
      batch[b] = order[cursor++];
      labels[b] = data[batch[b]].label;
    }
    const ForwardPass pass = net.forward(make_batch(data, batch, net.spec().in_channels), Mode::train, &dropout_rng);
    const double loss = net.backward(pass, labels);
    apply_update(net.states(), optim);
    if (it % tc.loss_report_every == 0) {
      result.trace.push_back({it, loss});
    }
  }
  result.final_loss = dataset_loss(net, data);
  return result;
}

void write_loss_trace(std::span<const LossPoint> trace, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) {
    throw IoError("cannot open for writing: " + path.string());
  }
  os << "iteration,loss\n";
  char buf[64];
  for (const LossPoint& p : trace) {
    std::snprintf(buf, sizeof buf, "%d,%.17g\n", p.iteration, p.loss);
    os << buf;
  }
  if (!os) {
    throw IoError("write failed: " + path.string());
  }
}

}  // namespace abstractnet
