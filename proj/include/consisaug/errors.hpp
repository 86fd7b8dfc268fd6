#pragma once

#include <iostream>
#include <stdexcept>
#include <string>

namespace consisaug {

enum class ErrorCode {
  ShapeMismatch,
  DomainError,
  EmptyReduction,
  NotScalar,
  NoTape,
  TapeReused,
  NotADistribution,
  InvalidThresholds,
  InvalidImageSize,
  InvalidConfig,
  IoError,
  MissingLabel,
  CorruptImage,
  ParseError,
  NonFiniteLoss,
  BadMagic,
  VersionMismatch,
  ArchMismatch,
  Truncated,
  ChecksumMismatch,
};

inline const char* error_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DomainError: return "DomainError";
    case ErrorCode::EmptyReduction: return "EmptyReduction";
    case ErrorCode::NotScalar: return "NotScalar";
    case ErrorCode::NoTape: return "NoTape";
    case ErrorCode::TapeReused: return "TapeReused";
    case ErrorCode::NotADistribution: return "NotADistribution";
    case ErrorCode::InvalidThresholds: return "InvalidThresholds";
    case ErrorCode::InvalidImageSize: return "InvalidImageSize";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::MissingLabel: return "MissingLabel";
    case ErrorCode::CorruptImage: return "CorruptImage";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ArchMismatch: return "ArchMismatch";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
  }
  return "UnknownError";
}

/// Library-wide exception type; every throwing path uses a stable ErrorCode
/// so callers (the CLI in particular) can map failures to exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(std::string(error_name(code)) + ": " + msg), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& msg) { throw Error(code, msg); }

/// Non-fatal diagnostics (empty consistency masks, all-ignore targets, ...).
inline void warn(const std::string& msg) { std::cerr << "warning: " << msg << "\n"; }

}  // namespace consisaug
