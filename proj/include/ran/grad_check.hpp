#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "ran/graph.hpp"

namespace ran::ad {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at the worst coordinate
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Builds a scalar loss in the given graph from the given parameters.
using LossBuilder = std::function<Var(Graph<double>&, const ParamSet<double>&)>;

/// Central differences against reverse-mode gradients, 64-bit.
/// Tensors larger than `max_coords` are checked on a seeded random subset of
/// that many coordinates. Error per coordinate is
/// |g_a - g_n| / max(|g_a|, |g_n|, 1e-8).
GradCheckResult grad_check(const LossBuilder& build_loss, ParamSet<double>& params, double eps = 1e-4,
                           std::size_t max_coords = 200, std::uint64_t seed = 0);

}  // namespace ran::ad
