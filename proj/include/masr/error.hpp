#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace masr {

enum class ErrorKind {
  parse,
  range,
  missing_field,
  duplicate,
  shape,
  io,
  format,
  config,
  numeric,
  gradcheck,
  unsupported,
  invalid_argument,
};

std::string_view to_string(ErrorKind kind);

// All library failures surface as masr::Error; the kind keeps CLI output
// machine-parsable.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

}  // namespace masr
