#pragma once

#include <cstdint>
#include <random>

#include "mhformer/tensor.hpp"

namespace testutil {

inline mhf::Tensor<double> random_tensor(mhf::Shape s, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  mhf::Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

template <typename T>
void jitter(mhf::Tensor<T>& t, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& v : t.data()) v += T(nd(rng));
}

}  // namespace testutil
