// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <span>

namespace recnet {

using Rng = std::mt19937_64;

/// Zero-mean normal with standard deviation sqrt(2 / fan_in).
template <typename T> void he_normal(std::span<T> values, std::size_t fan_in, Rng &rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (T &v : values)
    v = static_cast<T>(dist(rng));
}

template <typename T> void fill_normal(std::span<T> values, double stddev, Rng &rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (T &v : values)
    v = static_cast<T>(dist(rng));
}

template <typename T> void fill_uniform(std::span<T> values, double lo, double hi, Rng &rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (T &v : values)
    v = static_cast<T>(dist(rng));
}

} // namespace recnet
