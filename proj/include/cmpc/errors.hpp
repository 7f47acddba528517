#pragma once

#include <stdexcept>
#include <string>

namespace cmpc {

enum class ErrorCode {
  UxTooSmall,
  NonFinite,
  OutOfRange,
  InvalidGeometry,
  InvalidParameter,
  DimensionMismatch,
  InfeasibleBox,
  ParseError,
  SchemaVersionMismatch,
  SolverFailure,
};

const char* to_string(ErrorCode code);

/// Single exception type for the library; `code()` identifies the failure.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::UxTooSmall: return "UxTooSmall";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::InvalidGeometry: return "InvalidGeometry";
    case ErrorCode::InvalidParameter: return "InvalidParameter";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::InfeasibleBox: return "InfeasibleBox";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::SchemaVersionMismatch: return "SchemaVersionMismatch";
    case ErrorCode::SolverFailure: return "SolverFailure";
  }
  return "Unknown";
}

}  // namespace cmpc
