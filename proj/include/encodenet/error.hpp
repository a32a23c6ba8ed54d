#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace encodenet {

// Base of every error the library throws. kind() is a stable short tag used
// by the CLI when it reports failures as single-line JSON.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape"; }
};

class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric"; }
};

class StateError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "state"; }
};

class ValidationError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "validation"; }
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  const char* kind() const noexcept override { return "parse"; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class FormatError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "format"; }
};

class CheckpointError : public Error {
 public:
  enum class Reason { io, corrupt, version, spec_mismatch };
  CheckpointError(Reason reason, const std::string& what) : Error(what), reason_(reason) {}
  const char* kind() const noexcept override { return "checkpoint"; }
  Reason reason() const noexcept { return reason_; }

 private:
  Reason reason_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config"; }
};

class PrerequisiteError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "prerequisite"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io"; }
};

}  // namespace encodenet
