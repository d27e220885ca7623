#pragma once

#include <stdexcept>
#include <string>

namespace dq {

/// Process exit codes used by the command-line front end.
enum class ExitCode : int {
  kOk = 0,
  kValidation = 1,
  kIo = 2,
  kNumerical = 3,
};

/// Base class of every error thrown by the library. Carries the exit code
/// the CLI maps it to.
class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// Bad input data or an invalid configuration.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what)
      : Error(ExitCode::kValidation, what) {}
};

/// File access failures and malformed files.
class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ExitCode::kIo, what) {}
};

/// Structured parse failure: remembers the byte offset at which decoding
/// stopped.
class ParseError : public IoError {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : IoError(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// A linear system that stays singular after the full ridge escalation.
class SingularSystemError : public Error {
 public:
  explicit SingularSystemError(const std::string& what)
      : Error(ExitCode::kNumerical, what) {}
};

}  // namespace dq
