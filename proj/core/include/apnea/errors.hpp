#pragma once

#include <stdexcept>
#include <string>

namespace apnea {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A filter, block, or model description that cannot be realized.
class SpecError : public Error {
public:
  using Error::Error;
};

/// Tensor or sequence dimensions that do not agree.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Bad argument values (empty inputs, out-of-range labels, non-positive hours).
class InputError : public Error {
public:
  using Error::Error;
};

/// Operation invoked in the wrong lifecycle state (e.g. backward without forward).
class StateError : public Error {
public:
  using Error::Error;
};

/// Malformed input file. Message names the file, line, and field.
class ParseError : public Error {
public:
  ParseError(const std::string& file, std::size_t line, const std::string& what);
  const std::string& file() const noexcept { return file_; }
  std::size_t line() const noexcept { return line_; }

private:
  std::string file_;
  std::size_t line_;
};

/// Run configuration problems (unknown keys, incompatible variant and data).
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Clock alignment could not be estimated (too little overlap).
class AlignmentError : public Error {
public:
  using Error::Error;
};

/// Training diverged (loss became NaN or infinite).
class DivergenceError : public Error {
public:
  using Error::Error;
};

} // namespace apnea
