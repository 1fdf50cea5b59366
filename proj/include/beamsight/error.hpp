#pragma once

#include <stdexcept>
#include <string>

namespace beamsight {

// Failure categories. The CLI maps these onto exit codes: usage errors exit 1,
// data errors exit 2, numeric failures exit 3.
enum class ErrorKind {
  ShapeMismatch,
  NonFinite,
  NotScalar,
  InvalidConfig,
  CorruptCheckpoint,
  UnsupportedFormat,
  DecodeError,
  TooSmall,
  InsufficientGroups,
  EmptyDataset,
  DivergedLoss,
  ParseError,
  LengthMismatch,
  ZeroVariance,
  InvalidDf,
  MissingMask,
  IOError,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::NotScalar: return "NotScalar";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorKind::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorKind::DecodeError: return "DecodeError";
    case ErrorKind::TooSmall: return "TooSmall";
    case ErrorKind::InsufficientGroups: return "InsufficientGroups";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::DivergedLoss: return "DivergedLoss";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::ZeroVariance: return "ZeroVariance";
    case ErrorKind::InvalidDf: return "InvalidDf";
    case ErrorKind::MissingMask: return "MissingMask";
    case ErrorKind::IOError: return "IOError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace beamsight
