#pragma once

#include <stdexcept>
#include <string>

namespace pyraflow {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Region or index outside the addressed level / grid.
class RangeError : public Error {
 public:
  using Error::Error;
};

// Undecodable or inconsistent on-disk data (PNG, manifest, MetaImage, tensors).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid policy, budget or parameter combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Wrong pixel type for an operation (e.g. tissue segmentation on a mask).
class TypeError : public Error {
 public:
  using Error::Error;
};

// Backing storage for a pyramid level could not be created.
class CreationError : public Error {
 public:
  CreationError(int level, const std::string& what)
      : Error("level " + std::to_string(level) + ": " + what), level_(level) {}

  int level() const noexcept { return level_; }

 private:
  int level_;
};

// Text parse failure; line is 1-based, 0 when the error is not tied to a line.
class ParseError : public Error {
 public:
  ParseError(int line, const std::string& what)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

  int line() const noexcept { return line_; }

 private:
  int line_;
};

// A pipeline stage failed; carries the stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace pyraflow
