#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "fln/tensor.hpp"

namespace fln::testing {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Largest relative error between backward() and central differences (h = 1e-5)
// over every element of every input.
inline double gradient_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                             std::vector<Tensor> inputs, double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  const Tensor loss = f(inputs);
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    std::vector<double> g(t.numel(), 0.0);
    if (!t.grad().empty()) std::copy(t.grad().begin(), t.grad().end(), g.begin());
    analytic.push_back(std::move(g));
  }
  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    auto v = inputs[i].mutable_values();
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double saved = v[j];
      v[j] = saved + h;
      const double up = f(inputs).item();
      v[j] = saved - h;
      const double down = f(inputs).item();
      v[j] = saved;
      worst = std::max(worst, relative_error(analytic[i][j], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

// Gradient check of every parameter of a store against a scalar function of it.
template <typename Store>
double parameter_gradient_check(Store& params, const std::function<Tensor()>& f, double h = 1e-5) {
  params.zero_grad();
  backward(f());
  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto& [name, t] : params.entries()) {
    std::vector<double> g(t.numel(), 0.0);
    if (!t.grad().empty()) std::copy(t.grad().begin(), t.grad().end(), g.begin());
    auto v = t.mutable_values();
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double saved = v[j];
      v[j] = saved + h;
      const double up = f().item();
      v[j] = saved - h;
      const double down = f().item();
      v[j] = saved;
      worst = std::max(worst, relative_error(g[j], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

}  // namespace fln::testing
