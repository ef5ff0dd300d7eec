#pragma once

#include <stdexcept>
#include <string>

namespace cae {

enum class ErrorKind {
  shape,
  invalid_argument,
  io,
  bad_magic,
  unsupported_format,
  unsupported_datatype,
  bad_dimensions,
  truncated,
  version_mismatch,
  integrity,
  inconsistent,
  numeric,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace cae
