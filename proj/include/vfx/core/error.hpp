#pragma once

#include <stdexcept>
#include <string>

namespace vfx {

// Error categories map one-to-one onto CLI exit codes.
enum class ErrorKind { usage, validation, runtime };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

  const char* category() const noexcept {
    switch (kind_) {
      case ErrorKind::usage: return "usage";
      case ErrorKind::validation: return "validation";
      case ErrorKind::runtime: return "runtime";
    }
    return "runtime";
  }

 private:
  ErrorKind kind_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(ErrorKind::validation, what) {}
};

class RuntimeFailure : public Error {
 public:
  explicit RuntimeFailure(const std::string& what) : Error(ErrorKind::runtime, what) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ValidationError(what);
}

}  // namespace vfx
