#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "enjoint/rng.hpp"
#include "enjoint/tensor.hpp"

namespace testing_support {

template <typename T>
enjoint::Tensor<T> random_tensor(const enjoint::Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  enjoint::Tensor<T> t(shape);
  enjoint::Rng rng(seed);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Values bounded away from zero so kinked ops (abs, leaky) stay differentiable
// under finite-difference perturbation.
template <typename T>
enjoint::Tensor<T> random_away_from_zero(const enjoint::Shape& shape, std::uint64_t seed, double margin = 0.05) {
  enjoint::Tensor<T> t(shape);
  enjoint::Rng rng(seed);
  for (auto& v : t.data()) {
    const double m = rng.uniform(margin, 1.0);
    v = static_cast<T>(rng.bernoulli(0.5) ? m : -m);
  }
  return t;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("enjoint_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing_support
