#include "ran/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ran/random.hpp"

namespace ran::ad {

GradCheckResult grad_check(const LossBuilder& build_loss, ParamSet<double>& params, double eps,
                           std::size_t max_coords, std::uint64_t seed) {
  Graph<double> g;
  const Var loss = build_loss(g, params);
  const Gradients<double> analytic = g.backward(loss, params);

  const auto eval = [&] {
    Graph<double> fg(false);
    return fg.value(build_loss(fg, params))[0];
  };

  GradCheckResult result;
  Rng rng(seed);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<double>& theta = params[p];
    std::vector<std::size_t> coords(theta.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > max_coords) {
      rng.shuffle(coords);
      coords.resize(max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double saved = theta[i];
      theta[i] = saved + eps;
      const double up = eval();
      theta[i] = saved - eps;
      const double down = eval();
      theta[i] = saved;

      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[p][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++result.coordinates;
      if (err > result.max_relative_error || result.coordinates == 1) {
        result.max_relative_error = err;
        result.worst_param = params.name(p);
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace ran::ad
