#include "stlm/error.hpp"

namespace stlm {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidValue: return "InvalidValue";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::InvalidToken: return "InvalidToken";
    case ErrorCode::ContextFull: return "ContextFull";
    case ErrorCode::MissingTensor: return "MissingTensor";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::AlreadyQuantized: return "AlreadyQuantized";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::NetworkError: return "NetworkError";
    case ErrorCode::DiskFull: return "DiskFull";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::MalformedCalendar: return "MalformedCalendar";
    case ErrorCode::BadDateTime: return "BadDateTime";
    case ErrorCode::Busy: return "Busy";
    case ErrorCode::NotBusy: return "NotBusy";
    case ErrorCode::NotReady: return "NotReady";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

}  // namespace stlm
