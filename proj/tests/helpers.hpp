#pragma once

#include <random>
#include <string>

#include "parenlens/tensor.hpp"
#include "tempdir.hpp"

namespace testing {

template <typename T>
parenlens::Tensor<T> random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double scale = 1.0) {
  parenlens::Tensor<T> t(std::move(shape));
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& v : t.data()) v = static_cast<T>(nd(rng));
  return t;
}

}  // namespace testing
