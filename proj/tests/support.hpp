#pragma once

#include "sedan/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace sedan::testing {

/// |a - b| relative to the larger magnitude; gradients below `floor` are
/// compared on an absolute scale of `floor`.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central difference of `loss` with respect to entry i of `param`.
inline double central_difference(const std::function<double()>& loss, Tensor param, std::size_t i, double h = 1e-5) {
  auto& v = param.mutable_values();
  const double saved = v[i];
  v[i] = saved + h;
  const double up = loss();
  v[i] = saved - h;
  const double down = loss();
  v[i] = saved;
  return (up - down) / (2.0 * h);
}

/// Worst relative error between analytic and central-difference gradients of
/// `build()` over every entry of every tensor in `params`.
inline double max_gradient_error(const std::function<Tensor()>& build, const std::vector<Tensor>& params,
                                 double h = 1e-5) {
  for (auto p : params) p.zero_grad();
  build().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    auto g = p.grad();
    if (g.empty()) g.assign(p.size(), 0.0);
    analytic.push_back(g);
  }
  auto loss = [&] {
    NoGradGuard no_grad;
    return build().item();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < params[k].size(); ++i)
      worst = std::max(worst, relative_error(analytic[k][i], central_difference(loss, params[k], i, h)));
  return worst;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace sedan::testing
