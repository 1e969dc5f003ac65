#pragma once

#include <stdexcept>
#include <string>

namespace cut {

enum class ErrorCode {
  kInvalidArgument,
  kRange,
  kNonFinite,
  kUndersized,
  kShapeMismatch,
  kPrecondition,
  kNotFound,
  kIo,
  kBackend,
  kDiverged,
};

const char* to_string(ErrorCode code);

// Every module reports failures through this type. The code lets callers
// (the CLI in particular) separate validation problems from runtime ones.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  // True for failures caused by bad input or configuration rather than by
  // something going wrong while running.
  bool is_validation() const noexcept;

 private:
  ErrorCode code_;
};

}  // namespace cut
