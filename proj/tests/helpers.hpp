// Shared fixtures for the unit tests.
#pragma once

#include "codecsep/tensor.hpp"

#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace testing {

inline std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

inline codecsep::Tensor random_tensor(std::mt19937_64& rng, codecsep::Shape shape, bool grad = true, double lo = -1.0,
                                      double hi = 1.0) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return codecsep::Tensor::from(std::move(shape), random_values(rng, n, lo, hi), grad);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("codecsep_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing
