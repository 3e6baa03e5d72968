#pragma once

#include <stdexcept>
#include <string>

namespace walkgpt {

enum class ErrorCode {
  kMalformedResponse,
  kInvariantViolation,
  kBadMaskShape,
  kShapeMismatch,
  kNoFeatures,
  kGeneratorUnavailable,
  kBadGridShape,
  kDegenerateBatch,
  kNonFiniteLoss,
  kBadImageShape,
  kSequenceTooLong,
  kEmptyPromptBank,
  kEmptyInput,
  kIo,
};

const char* ToString(ErrorCode code);

// Every failure surfaced by the library carries one of the codes above so
// callers (and the CLI exit-code mapping) can dispatch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(ToString(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

template <ErrorCode C>
class CodedError : public Error {
 public:
  explicit CodedError(const std::string& message) : Error(C, message) {}
};

using MalformedResponse = CodedError<ErrorCode::kMalformedResponse>;
using InvariantViolation = CodedError<ErrorCode::kInvariantViolation>;
using BadMaskShape = CodedError<ErrorCode::kBadMaskShape>;
using ShapeMismatch = CodedError<ErrorCode::kShapeMismatch>;
using NoFeatures = CodedError<ErrorCode::kNoFeatures>;
using GeneratorUnavailable = CodedError<ErrorCode::kGeneratorUnavailable>;
using BadGridShape = CodedError<ErrorCode::kBadGridShape>;
using DegenerateBatch = CodedError<ErrorCode::kDegenerateBatch>;
using NonFiniteLoss = CodedError<ErrorCode::kNonFiniteLoss>;
using BadImageShape = CodedError<ErrorCode::kBadImageShape>;
using SequenceTooLong = CodedError<ErrorCode::kSequenceTooLong>;
using EmptyPromptBank = CodedError<ErrorCode::kEmptyPromptBank>;
using EmptyInput = CodedError<ErrorCode::kEmptyInput>;
using IoError = CodedError<ErrorCode::kIo>;

inline const char* ToString(ErrorCode code) {
  switch (code) {
    case ErrorCode::kMalformedResponse: return "MalformedResponse";
    case ErrorCode::kInvariantViolation: return "InvariantViolation";
    case ErrorCode::kBadMaskShape: return "BadMaskShape";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kNoFeatures: return "NoFeatures";
    case ErrorCode::kGeneratorUnavailable: return "GeneratorUnavailable";
    case ErrorCode::kBadGridShape: return "BadGridShape";
    case ErrorCode::kDegenerateBatch: return "DegenerateBatch";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kBadImageShape: return "BadImageShape";
    case ErrorCode::kSequenceTooLong: return "SequenceTooLong";
    case ErrorCode::kEmptyPromptBank: return "EmptyPromptBank";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kIo: return "IoError";
  }
  return "Unknown";
}

}  // namespace walkgpt
