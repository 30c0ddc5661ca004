#include "abstractnet/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "abstractnet/error.hpp"
#include "abstractnet/layers.hpp"
#include "abstractnet/optim.hpp"

namespace abstractnet::selftest {

namespace {

using reference::compare_gradients;
using reference::GradCheck;
using reference::numeric_gradient;

constexpr double kLayerRtol = 1e-4;
constexpr double kAtol = 1e-6;

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

// Uniform values pushed at least `gap` away from zero.
Tensor jittered(SeededRng& rng, Shape shape, double gap) {
  Tensor t = rng_uniform(rng, shape, -1.0, 1.0);
  for (double& v : t.data()) {
    v = v >= 0.0 ? v + gap : v - gap;
  }
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct Tally {
  GradCheck worst;
  std::ostringstream detail;

  void add(const std::string& what, const GradCheck& g) {
    worst.failures += g.failures;
    worst.checked += g.checked;
    worst.max_rel_error = std::max(worst.max_rel_error, g.max_rel_error);
    worst.max_abs_error = std::max(worst.max_abs_error, g.max_abs_error);
    detail << what << ": max rel " << sci(g.max_rel_error) << " (" << g.failures << "/" << g.checked
           << " over tol); ";
  }

  CheckResult result(std::string name) const {
    return {std::move(name), worst.failures == 0 && worst.checked > 0, detail.str()};
  }
};

GradCheck check_span(std::span<const double> analytic, std::span<double> params, const std::function<double()>& loss,
                     double rtol) {
  const std::vector<double> numeric = numeric_gradient(params, loss);
  return compare_gradients(analytic, numeric, rtol, kAtol);
}

}  // namespace

CheckResult check_conv_gradients(std::uint64_t seed) {
  SeededRng rng(seed);
  Tally tally;
  const ConvSpec specs[] = {{2, 3, 3, 3, 1, 1, 1, 1}, {2, 2, 3, 3, 2, 2, 1, 1}, {2, 2, 5, 5, 1, 1, 2, 2}};
  for (const ConvSpec& spec : specs) {
    LayerState state = LayerState::for_conv("conv", spec);
    state.weights = rng_uniform(rng, state.weights.shape(), -1.0, 1.0);
    state.bias = rng_uniform(rng, state.bias.shape(), -1.0, 1.0);
    Tensor x = rng_uniform(rng, Shape{1, 2, 5, 5}, -1.0, 1.0);
    const Tensor dy = rng_uniform(rng, spec.output_shape(x.shape()), -1.0, 1.0);
    auto loss = [&] { return dot(conv_forward(x, spec, state), dy); };
    state.zero_grad();
    const Tensor dx = conv_backward(x, dy, spec, state);
    const std::string tag = "k" + std::to_string(spec.kh) + "s" + std::to_string(spec.sh);
    tally.add(tag + " weights", check_span(state.grad_weights.data(), state.weights.data(), loss, kLayerRtol));
    tally.add(tag + " bias", check_span(state.grad_bias.data(), state.bias.data(), loss, kLayerRtol));
    tally.add(tag + " input", check_span(dx.data(), x.data(), loss, kLayerRtol));
  }
  return tally.result("conv backward vs finite differences");
}

CheckResult check_pool_gradients(std::uint64_t seed) {
  SeededRng rng(seed);
  Tally tally;
  const PoolSpec specs[] = {{PoolKind::max, 3, 3, 1, 1, 1, 1},
                            {PoolKind::max, 2, 2, 2, 2, 0, 0},
                            {PoolKind::average, 2, 2, 2, 2, 0, 0},
                            {PoolKind::average, 3, 3, 1, 1, 1, 1}};
  for (const PoolSpec& spec : specs) {
    // Distinct values on a 1e-2 grid plus jitter: no two window entries are
    // within 2h of each other, so the argmax is stable under perturbation.
    Tensor x(Shape{1, 2, 6, 6});
    std::vector<double> values(x.size());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = 0.01 * static_cast<double>(i);
    for (std::size_t i = values.size(); i > 1; --i) {
      std::swap(values[i - 1], values[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    }
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = values[i] + rng.uniform(0.0, 1e-3);
    const PoolResult fwd = pool_forward(x, spec);
    const Tensor dy = rng_uniform(rng, fwd.y.shape(), -1.0, 1.0);
    const Tensor dx = pool_backward(dy, spec, fwd);
    auto loss = [&] { return dot(pool_forward(x, spec).y, dy); };
    tally.add(spec.kind == PoolKind::max ? "max" : "avg", check_span(dx.data(), x.data(), loss, kLayerRtol));
  }
  return tally.result("pool backward vs finite differences");
}

CheckResult check_relu_gradients(std::uint64_t seed) {
  SeededRng rng(seed);
  Tally tally;
  Tensor x = jittered(rng, Shape{2, 3, 4, 4}, 0.05);
  const Tensor dy = rng_uniform(rng, x.shape(), -1.0, 1.0);
  const Tensor dx = relu_backward(x, dy);
  auto loss = [&] { return dot(relu(x), dy); };
  tally.add("relu", check_span(dx.data(), x.data(), loss, kLayerRtol));
  return tally.result("relu backward vs finite differences");
}

CheckResult check_dense_gradients(std::uint64_t seed) {
  SeededRng rng(seed);
  Tally tally;
  LayerState state = LayerState::for_dense("dense", 6, 3);
  state.weights = rng_uniform(rng, state.weights.shape(), -1.0, 1.0);
  state.bias = rng_uniform(rng, state.bias.shape(), -1.0, 1.0);
  Tensor x = rng_uniform(rng, Shape{2, 6, 1, 1}, -1.0, 1.0);
  const Tensor dy = rng_uniform(rng, Shape{2, 3, 1, 1}, -1.0, 1.0);
  auto loss = [&] { return dot(dense_forward(x, state), dy); };
  const Tensor dx = dense_backward(x, dy, state);
  tally.add("weights", check_span(state.grad_weights.data(), state.weights.data(), loss, kLayerRtol));
  tally.add("bias", check_span(state.grad_bias.data(), state.bias.data(), loss, kLayerRtol));
  tally.add("input", check_span(dx.data(), x.data(), loss, kLayerRtol));
  return tally.result("dense backward vs finite differences");
}

CheckResult check_softmax_gradients(std::uint64_t seed) {
  SeededRng rng(seed);
  Tally tally;
  Tensor logits = rng_uniform(rng, Shape{3, 2, 1, 1}, -2.0, 2.0);
  const int labels[] = {0, 1, 1};
  const LossResult r = softmax_xent(logits, labels);
  auto loss = [&] { return softmax_xent(logits, labels).loss; };
  const std::vector<double> numeric = numeric_gradient(logits.data(), loss);
  // Absolute 1e-6 on dlogits.
  tally.add("dlogits", compare_gradients(r.dlogits.data(), numeric, 0.0, 1e-6));
  return tally.result("softmax cross-entropy vs finite differences");
}

CheckResult check_network_gradients(const NetworkSpec& spec, int batch, std::uint64_t seed, double rtol) {
  SeededRng rng(seed);
  Network net = Network::build(spec, rng);
  // Non-zero biases so that every ReLU sees a mix of signs.
  for (LayerState& s : net.states()) {
    s.bias = rng_uniform(rng, s.bias.shape(), -0.1, 0.1);
  }
  const Tensor x = rng_uniform(rng, spec.input_shape(batch), 0.0, 1.0);
  std::vector<int> labels(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) labels[static_cast<std::size_t>(i)] = i % spec.classes;
  const std::uint64_t dropout_seed = derive_seed(seed, {7});

  auto loss = [&] {
    SeededRng drop(dropout_seed);
    const ForwardPass pass = net.forward(x, Mode::train, &drop);
    double total = softmax_xent(pass.logits, labels).loss;
    for (const Tensor& aux : pass.aux_logits) {
      total += spec.aux_weight * softmax_xent(aux, labels).loss;
    }
    return total;
  };

  SeededRng drop(dropout_seed);
  net.zero_grad();
  const ForwardPass pass = net.forward(x, Mode::train, &drop);
  net.backward(pass, labels);

  Tally tally;
  for (LayerState& s : net.states()) {
    const std::vector<double> gw(s.grad_weights.data().begin(), s.grad_weights.data().end());
    const std::vector<double> gb(s.grad_bias.data().begin(), s.grad_bias.data().end());
    GradCheck g = check_span(gw, s.weights.data(), loss, rtol);
    const GradCheck b = check_span(gb, s.bias.data(), loss, rtol);
    g.failures += b.failures;
    g.checked += b.checked;
    g.max_rel_error = std::max(g.max_rel_error, b.max_rel_error);
    g.max_abs_error = std::max(g.max_abs_error, b.max_abs_error);
    if (g.failures > 0) {
      tally.add(s.name, g);
    } else {
      tally.worst.checked += g.checked;
      tally.worst.max_rel_error = std::max(tally.worst.max_rel_error, g.max_rel_error);
    }
  }
  tally.detail << tally.worst.checked << " parameters, worst rel " << sci(tally.worst.max_rel_error);
  return tally.result("network backward vs finite differences");
}

CheckResult check_conv_oracle_grid(std::uint64_t seed) {
  SeededRng rng(seed);
  double worst = 0.0;
  int cases = 0;
  for (int k : {1, 3, 5}) {
    for (int stride : {1, 2}) {
      for (int pad : {0, 1, 2}) {
        for (int channels : {1, 3}) {
          int h = 6;
          while (h + 2 * pad < k || (h + 2 * pad - k) % stride != 0) ++h;
          const ConvSpec spec{channels, channels, k, k, stride, stride, pad, pad};
          LayerState state = LayerState::for_conv("conv", spec);
          state.weights = rng_uniform(rng, state.weights.shape(), -1.0, 1.0);
          state.bias = rng_uniform(rng, state.bias.shape(), -1.0, 1.0);
          const Tensor x = rng_uniform(rng, Shape{2, channels, h, h + stride}, -1.0, 1.0);
          const Tensor fast = conv_forward(x, spec, state);
          const Tensor slow = reference::conv_direct(x, state.weights, state.bias, spec);
          worst = std::max(worst, max_abs_diff(fast, slow));
          ++cases;
        }
      }
    }
  }
  return {"conv forward vs direct loop oracle", worst <= 1e-12,
          std::to_string(cases) + " cases, max abs error " + sci(worst)};
}

CheckResult check_optimizer_traces(std::uint64_t seed) {
  double worst = 0.0;
  auto track = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };

  // Hand-computed traces.
  {
    LayerState s = LayerState::for_dense("w", 1, 1);
    s.grad_weights[0] = 1.0;
    adagrad_step(s, 0.01, 1e-8);
    track(s.weights[0], -0.01 / (1.0 + 1e-8));
    track(s.accum_weights[0], 1.0);
    s.grad_weights[0] = 1.0;
    const double w1 = s.weights[0];
    adagrad_step(s, 0.01, 1e-8);
    track(s.weights[0] - w1, -0.01 / (std::sqrt(2.0) + 1e-8));
    track(s.accum_weights[0], 2.0);
  }
  {
    LayerState s = LayerState::for_dense("w", 1, 1);
    s.grad_weights[0] = 1.0;
    sgd_momentum_step(s, 0.1, 0.9);
    track(s.velocity_weights[0], -0.1);
    s.grad_weights[0] = 1.0;
    sgd_momentum_step(s, 0.1, 0.9);
    track(s.velocity_weights[0], -0.19);
    track(s.weights[0], -0.29);
  }
  // Seeded tuples against the scalar oracle.
  SeededRng rng(seed);
  for (int trial = 0; trial < 64; ++trial) {
    const double lr = rng.uniform(1e-4, 1.0);
    const double mu = rng.uniform(0.0, 0.99);
    const double eps = rng.uniform(1e-10, 1e-4);
    LayerState a = LayerState::for_dense("a", 1, 1);
    LayerState m = LayerState::for_dense("m", 1, 1);
    a.weights[0] = m.weights[0] = rng.uniform(-1.0, 1.0);
    reference::AdagradScalar ra{a.weights[0], 0.0};
    reference::MomentumScalar rm{m.weights[0], 0.0};
    for (int step = 0; step < 2; ++step) {
      const double g = rng.uniform(-2.0, 2.0);
      a.grad_weights[0] = g;
      m.grad_weights[0] = g;
      adagrad_step(a, lr, eps);
      sgd_momentum_step(m, lr, mu);
      ra = reference::adagrad(ra.w, ra.accum, g, lr, eps);
      rm = reference::sgd_momentum(rm.w, rm.velocity, g, lr, mu);
      track(a.weights[0], ra.w);
      track(a.accum_weights[0], ra.accum);
      track(m.weights[0], rm.w);
      track(m.velocity_weights[0], rm.velocity);
    }
  }
  return {"optimizer two-step traces vs scalar oracle", worst <= 1e-12, "max abs error " + sci(worst)};
}

CheckResult check_generator_separability(ShapeFamily family, int per_class, std::uint64_t seed,
                                         const RenderParams& params) {
  const ShapeFamily families[] = {family};
  const Dataset data = generate_dataset(families, per_class, seed, params);
  std::size_t correct = 0;
  std::size_t non_binary = 0;
  std::size_t degenerate = 0;
  for (const LabeledImage& item : data) {
    correct += bbox_aspect_oracle(item.image, params.foreground) == item.label ? 1 : 0;
    const std::size_t fg = count_value(item.image, params.foreground);
    const std::size_t bg = count_value(item.image, params.background);
    non_binary += fg + bg == item.image.pixels.size() ? 0 : 1;
    degenerate += fg >= kMinTexturedForeground ? 0 : 1;
  }
  std::ostringstream os;
  os << correct << "/" << data.size() << " oracle-correct, " << non_binary << " non-binary, " << degenerate
     << " with < " << kMinTexturedForeground << " foreground pixels";
  return {"generator separability: " + to_string(family),
          correct == data.size() && non_binary == 0 && degenerate == 0, os.str()};
}

std::vector<CheckResult> run_all(std::uint64_t seed, int separability_per_class) {
  std::vector<CheckResult> out;
  out.push_back(check_conv_gradients(seed));
  out.push_back(check_pool_gradients(seed + 1));
  out.push_back(check_relu_gradients(seed + 2));
  out.push_back(check_dense_gradients(seed + 3));
  out.push_back(check_softmax_gradients(seed + 4));
  NetworkSpec mini = mini_spec();
  mini.in_h = mini.in_w = 16;
  CheckResult net = check_network_gradients(mini, 2, seed + 5);
  net.name = "mini network backward vs finite differences";
  out.push_back(net);
  NetworkSpec with_aux = mini;
  with_aux.aux_after = {1, 2};
  CheckResult aux = check_network_gradients(with_aux, 2, seed + 6);
  aux.name = "mini network + aux heads backward vs finite differences";
  out.push_back(aux);
  out.push_back(check_conv_oracle_grid(seed + 7));
  out.push_back(check_optimizer_traces(seed + 8));
  if (separability_per_class > 0) {
    for (ShapeFamily f : kAllFamilies) {
      out.push_back(check_generator_separability(f, separability_per_class, seed + 9));
    }
  }
  return out;
}

}  // namespace abstractnet::selftest
