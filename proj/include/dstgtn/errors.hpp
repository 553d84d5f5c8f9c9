#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dstgtn {

/// Extents that do not conform for the requested operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller violated an operation precondition (non-scalar loss, all-masked batch, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// NaN/Inf where finite numbers are required, or a diverged optimisation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid model/training configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Semantically invalid input data (misaligned timestamps, constant series, ...).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed serialized file. Carries the byte offset where parsing failed.
class FormatError : public DataError {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : DataError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace dstgtn
