#include "cut/core/error.hpp"

namespace cut {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kRange: return "range";
    case ErrorCode::kNonFinite: return "non-finite";
    case ErrorCode::kUndersized: return "undersized";
    case ErrorCode::kShapeMismatch: return "shape-mismatch";
    case ErrorCode::kPrecondition: return "precondition";
    case ErrorCode::kNotFound: return "not-found";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kBackend: return "backend";
    case ErrorCode::kDiverged: return "diverged";
  }
  return "unknown";
}

bool Error::is_validation() const noexcept {
  switch (code_) {
    case ErrorCode::kIo:
    case ErrorCode::kBackend:
    case ErrorCode::kDiverged:
      return false;
    default:
      return true;
  }
}

}  // namespace cut
