#include "flowseg/error.hpp"

namespace flowseg {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::Malformed: return "Malformed";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::Oversize: return "Oversize";
    case ErrorCode::ShapeOutOfBounds: return "ShapeOutOfBounds";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::InvalidDims: return "InvalidDims";
    case ErrorCode::UnknownStrategy: return "UnknownStrategy";
    case ErrorCode::NotConverged: return "NotConverged";
    case ErrorCode::BandTooWide: return "BandTooWide";
    case ErrorCode::BothSetsEmpty: return "BothSetsEmpty";
    case ErrorCode::UninitializedState: return "UninitializedState";
    case ErrorCode::EmptyDir: return "EmptyDir";
    case ErrorCode::FrameCountMismatch: return "FrameCountMismatch";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace flowseg
