#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mhformer/tensor.hpp"

namespace mhf {

template <typename T>
using ScalarFn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Error per coordinate is
/// |analytic − numeric| / max(1, |analytic|, |numeric|); the maximum is
/// returned. Inputs are restored on exit; their grads are overwritten.
template <typename T>
GradCheckResult grad_check_detailed(const ScalarFn<T>& f, std::vector<Tensor<T>> inputs, T eps) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.clear_grad();
  }
  {
    GradTape<T> tape;
    Tensor<T> y = f(inputs);
    if (y.numel() != 1)
      throw ShapeError("grad_check: function output is not a scalar " + shape_str(y.shape()));
    if (!y.requires_grad())
      throw ValidationError("grad_check: output does not depend on the inputs");
    tape.backward(y);
  }
  std::vector<Tensor<T>> analytic;
  for (const auto& x : inputs) analytic.push_back(x.grad());

  GradCheckResult res;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto data = inputs[t].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T orig = data[i];
      data[i] = orig + eps;
      const T fp = f(inputs).item();
      data[i] = orig - eps;
      const T fm = f(inputs).item();
      data[i] = orig;
      const double num = (double(fp) - double(fm)) / (2.0 * double(eps));
      const double ana = double(analytic[t][i]);
      const double err =
          std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
      if (res.coordinates++ == 0 || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_input = t;
        res.worst_index = i;
        res.analytic = ana;
        res.numeric = num;
      }
    }
  }
  return res;
}

template <typename T>
double grad_check(const ScalarFn<T>& f, std::vector<Tensor<T>> inputs, T eps) {
  return grad_check_detailed(f, std::move(inputs), eps).max_rel_error;
}

template <typename T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x, T eps) {
  return grad_check<T>([&](const std::vector<Tensor<T>>& in) { return f(in[0]); },
                       std::vector<Tensor<T>>{std::move(x)}, eps);
}

}  // namespace mhf
