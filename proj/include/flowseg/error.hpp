#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace flowseg {

enum class ErrorCode {
  BadMagic,
  Truncated,
  Malformed,
  NonFinite,
  Oversize,
  ShapeOutOfBounds,
  ShapeMismatch,
  DimMismatch,
  InvalidDims,
  UnknownStrategy,
  NotConverged,
  BandTooWide,
  BothSetsEmpty,
  UninitializedState,
  EmptyDir,
  FrameCountMismatch,
  InvalidArgument,
  Io,
};

std::string_view to_string(ErrorCode code);

// All library failures are reported through this type; code() identifies the
// failure class so callers can branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace flowseg
