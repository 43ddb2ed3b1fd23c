// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace recnet {

/// Tensor dimensions that do not line up (channel mismatch, odd pooling input, ...).
class ShapeError : public std::runtime_error {
public:
  explicit ShapeError(const std::string &what) : std::runtime_error(what) {}
};

/// Hyper-parameters or modes that cannot be honoured.
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string &what) : std::runtime_error(what) {}
};

/// Malformed files: CIFAR binaries, checkpoints.
class FormatError : public std::runtime_error {
public:
  explicit FormatError(const std::string &what) : std::runtime_error(what) {}
};

/// Training diverged (non-finite loss).
class TrainingError : public std::runtime_error {
public:
  explicit TrainingError(const std::string &what) : std::runtime_error(what) {}
};

} // namespace recnet
