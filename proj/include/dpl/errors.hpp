#pragma once

#include <stdexcept>
#include <string>

namespace dpl {

// Root of every error thrown by the toolkit. The CLI maps ConfigError to
// exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class InvalidImageError : public Error {
 public:
  using Error::Error;
};

class EmbedderUnavailableError : public Error {
 public:
  using Error::Error;
};

class DegenerateEmbeddingError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

class UnknownBackboneError : public Error {
 public:
  using Error::Error;
};

class DuplicateNameError : public Error {
 public:
  using Error::Error;
};

class WeightLoadError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : Error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class CodecError : public Error {
 public:
  using Error::Error;
};

class SingleClassError : public Error {
 public:
  using Error::Error;
};

class NonFiniteLossError : public Error {
 public:
  using Error::Error;
};

class FreezeViolationError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace dpl
