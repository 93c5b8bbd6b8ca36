#pragma once

#include <stdexcept>
#include <string>

namespace npl {

// Invalid arguments use std::invalid_argument; everything below is specific
// to this library so callers (the CLI) can map failures to exit codes.

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed or corrupted on-disk data (bad magic, version, checksum, size).
class FormatError : public IoError {
 public:
  explicit FormatError(const std::string& what) : IoError(what) {}
};

}  // namespace npl
