#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace medit {

enum class ErrorCode {
  InvalidLayout,
  LayoutMismatch,
  NonFiniteValue,
  MalformedFile,
  ShapeMismatch,
  OutOfRange,
  InvalidConfig,
  InvalidState,
  Divergence,
  UnknownLabel,
  Io,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace medit
