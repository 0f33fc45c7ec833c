#pragma once

#include <stdexcept>
#include <string>

namespace nmar {

enum class ErrorKind {
  // input / data
  MissingColumn,
  DeltaNotBinary,
  ObservedYMissing,
  DiscreteOutcome,
  NonPositiveValue,
  InvalidRoles,
  ParseError,
  NoResponders,
  // numerics
  DegenerateSample,
  RankDeficient,
  TooFewResponders,
  NoLocalSupport,
  SingularHessian,
  RootNotFound,
  Separation,
  NotConverged,
  TestFailed,
  MonotonicityViolation,
  // configuration
  ConfigError,
  InvalidArgument,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MissingColumn: return "MissingColumn";
    case ErrorKind::DeltaNotBinary: return "DeltaNotBinary";
    case ErrorKind::ObservedYMissing: return "ObservedYMissing";
    case ErrorKind::DiscreteOutcome: return "DiscreteOutcome";
    case ErrorKind::NonPositiveValue: return "NonPositiveValue";
    case ErrorKind::InvalidRoles: return "InvalidRoles";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::NoResponders: return "NoResponders";
    case ErrorKind::DegenerateSample: return "DegenerateSample";
    case ErrorKind::RankDeficient: return "RankDeficient";
    case ErrorKind::TooFewResponders: return "TooFewResponders";
    case ErrorKind::NoLocalSupport: return "NoLocalSupport";
    case ErrorKind::SingularHessian: return "SingularHessian";
    case ErrorKind::RootNotFound: return "RootNotFound";
    case ErrorKind::Separation: return "Separation";
    case ErrorKind::NotConverged: return "NotConverged";
    case ErrorKind::TestFailed: return "TestFailed";
    case ErrorKind::MonotonicityViolation: return "MonotonicityViolation";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a kind so callers can map it
/// to an exit status or a per-replicate failure count.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline bool is_data_error(ErrorKind k) {
  switch (k) {
    case ErrorKind::MissingColumn:
    case ErrorKind::DeltaNotBinary:
    case ErrorKind::ObservedYMissing:
    case ErrorKind::DiscreteOutcome:
    case ErrorKind::NonPositiveValue:
    case ErrorKind::InvalidRoles:
    case ErrorKind::ParseError:
    case ErrorKind::NoResponders:
      return true;
    default:
      return false;
  }
}

}  // namespace nmar
