#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "abstractnet/inception.hpp"
#include "abstractnet/reference.hpp"
#include "abstractnet/shapes.hpp"

namespace abstractnet::selftest {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Layer gradient checks against central differences (h = 1e-5), float64.
CheckResult check_conv_gradients(std::uint64_t seed);
CheckResult check_pool_gradients(std::uint64_t seed);
CheckResult check_relu_gradients(std::uint64_t seed);
CheckResult check_dense_gradients(std::uint64_t seed);
CheckResult check_softmax_gradients(std::uint64_t seed);

/// Every parameter gradient of `spec` at input (batch, c, h, w) against
/// central differences of the combined loss, relative tolerance `rtol`.
CheckResult check_network_gradients(const NetworkSpec& spec, int batch, std::uint64_t seed, double rtol = 1e-3);

/// conv_forward vs the direct six-loop oracle on kernel {1,3,5} x stride {1,2}
/// x pad {0,1,2} x channels {1,3}; max error must be <= 1e-12.
CheckResult check_conv_oracle_grid(std::uint64_t seed);

/// Two-step ADAGRAD and SGD-momentum traces against the scalar hand oracle.
CheckResult check_optimizer_traces(std::uint64_t seed);

/// Bounding-box oracle accuracy (must be 100%) and binary pixels, per family.
CheckResult check_generator_separability(ShapeFamily family, int per_class, std::uint64_t seed,
                                         const RenderParams& params = {});

/// The full suite run by `abstractnet selftest`.
std::vector<CheckResult> run_all(std::uint64_t seed = 1234, int separability_per_class = 1000);

}  // namespace abstractnet::selftest
