#ifndef PROTOPARTS_ERROR_HPP_
#define PROTOPARTS_ERROR_HPP_

#include <stdexcept>
#include <string>
#include <string_view>

namespace protoparts {

enum class ErrorCode {
  ZeroVector,
  InvariantViolation,
  IoError,
  BadMagic,
  UnsupportedVersion,
  TruncatedFile,
  DimMismatch,
  NumericalOverflow,
  DegenerateFeatures,
  KTooSmall,
  EmptyGroundTruth,
  InvalidParams,
  NotFound,
  ConfigError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::InvariantViolation: return "InvariantViolation";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::NumericalOverflow: return "NumericalOverflow";
    case ErrorCode::DegenerateFeatures: return "DegenerateFeatures";
    case ErrorCode::KTooSmall: return "KTooSmall";
    case ErrorCode::EmptyGroundTruth: return "EmptyGroundTruth";
    case ErrorCode::InvalidParams: return "InvalidParams";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI's exit-code mapping) can branch on the kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// CLI exit codes: 2 config, 3 data, 4 numeric.
inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigError:
    case ErrorCode::InvalidParams:
      return 2;
    case ErrorCode::ZeroVector:
    case ErrorCode::NumericalOverflow:
    case ErrorCode::DegenerateFeatures:
    case ErrorCode::KTooSmall:
      return 4;
    default:
      return 3;
  }
}

}  // namespace protoparts

#endif  // PROTOPARTS_ERROR_HPP_
