#pragma once

#include <cstddef>
#include <cstdint>

#include "usseg/grad_check.hpp"
#include "usseg/unet.hpp"

namespace usseg {

struct NetworkCheckOptions {
  std::size_t side = 16;      // square input extent
  std::size_t batch = 2;
  std::size_t samples = 300;  // perturbed elements (parameters and input)
  double step = 1e-5;
  double tol = 1e-4;
  double floor = 5e-5;        // central-difference round-off on a full network is ~1e-9
  double margin = 1e-4;       // redraw until every relu input / pool gap clears this
  std::size_t max_draws = 50;
};

struct NetworkCheckResult {
  GradCheckReport report;
  std::uint64_t draw = 0;  // seed of the accepted draw
  std::size_t redraws = 0;
  double margin = 0.0;
};

/// Train-mode gradient check of a whole network on f = sum(w * forward(x)) for a random
/// projection w. Parameters and input are redrawn (seed + 1000 k) until the forward pass sits
/// clear of relu and max-pool kinks. Throws if no smooth draw is found.
NetworkCheckResult network_grad_check(ModelConfig cfg, std::uint64_t seed,
                                      const NetworkCheckOptions& opt = {});

}  // namespace usseg
