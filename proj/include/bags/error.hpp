#pragma once

#include <stdexcept>
#include <string>

namespace bags {

enum class ErrorKind {
    Config,
    Io,
    Format,
    Dimension,
    Numeric,
    State,
};

/// Base of every error thrown by the library. The kind maps onto CLI exit codes.
class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

  private:
    ErrorKind kind_;
};

class ConfigError : public Error {
  public:
    explicit ConfigError(const std::string& m) : Error(ErrorKind::Config, m) {}
};

class IoError : public Error {
  public:
    explicit IoError(const std::string& m) : Error(ErrorKind::Io, m) {}
};

/// Corrupt or unsupported file contents (bad magic, checksum, version).
class FormatError : public Error {
  public:
    explicit FormatError(const std::string& m) : Error(ErrorKind::Format, m) {}
};

class DimensionError : public Error {
  public:
    explicit DimensionError(const std::string& m) : Error(ErrorKind::Dimension, m) {}
};

/// Non-finite values or divergence.
class NumericError : public Error {
  public:
    explicit NumericError(const std::string& m) : Error(ErrorKind::Numeric, m) {}
};

/// API misuse such as backward before forward.
class StateError : public Error {
  public:
    explicit StateError(const std::string& m) : Error(ErrorKind::State, m) {}
};

} // namespace bags
