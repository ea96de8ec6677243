// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#pragma once

#include <stdexcept>
#include <string>

namespace fedcustom {

// Shape or dimension mismatch between tensors.
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or undefined numeric results.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad caller-supplied data (tokens out of vocab, empty batches, ...).
class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid or inconsistent configuration.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// A client produced non-finite parameters during federated training.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// Corpus generation or partitioning could not satisfy its contract.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fedcustom
