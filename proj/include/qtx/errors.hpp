// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace qtx {

/// Base of every error raised by the library. `kind()` is a stable
/// machine-readable tag used by the CLI error documents.
class Error : public std::runtime_error {
 public:
  Error(const char* kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  const char* kind() const noexcept { return kind_; }

 private:
  const char* kind_;
};

/// A constant derived at configuration time does not fit its datapath width.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

/// Caller violated a precondition (shape mismatch, bad index, bad phase).
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error("usage", what) {}
};

/// An integer kernel intermediate left its declared width.
class KernelError : public Error {
 public:
  explicit KernelError(const std::string& what) : Error("kernel", what) {}
};

/// A package, config or input file is malformed.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error("format", what) {}
};

}  // namespace qtx
