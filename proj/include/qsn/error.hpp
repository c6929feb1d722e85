// Copyright 2026 The qsn Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace qsn {

/// Failure categories surfaced by the library. The CLI maps these onto exit
/// codes, so keep the groups (io / audio / model / data) stable.
enum class ErrorCode {
  kUnreadableFile,
  kUnsupportedEncoding,
  kEmptyAudio,
  kAllSilent,
  kAllZero,
  kInvalidBand,
  kInvalidConfig,
  kWrongLength,
  kShapeMismatch,
  kBatchTooSmall,
  kNoForwardRecorded,
  kNonFiniteGradient,
  kModelNotLoaded,
  kLengthMismatch,
  kCorruptCheckpoint,
  kIoError,
  kInsufficientSpeakers,
  kClassMissing,
  kEmptySupport,
  kNoBonafideSupport,
  kOneClassOnly,
  kEmptyRecords,
  kMalformedLine,
  kDuplicateUttId,
  kCorruptFeatureFile,
};

constexpr std::string_view ErrorName(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUnreadableFile: return "UnreadableFile";
    case ErrorCode::kUnsupportedEncoding: return "UnsupportedEncoding";
    case ErrorCode::kEmptyAudio: return "EmptyAudio";
    case ErrorCode::kAllSilent: return "AllSilent";
    case ErrorCode::kAllZero: return "AllZero";
    case ErrorCode::kInvalidBand: return "InvalidBand";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kWrongLength: return "WrongLength";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kBatchTooSmall: return "BatchTooSmall";
    case ErrorCode::kNoForwardRecorded: return "NoForwardRecorded";
    case ErrorCode::kNonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::kModelNotLoaded: return "ModelNotLoaded";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kCorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kInsufficientSpeakers: return "InsufficientSpeakers";
    case ErrorCode::kClassMissing: return "ClassMissing";
    case ErrorCode::kEmptySupport: return "EmptySupport";
    case ErrorCode::kNoBonafideSupport: return "NoBonafideSupport";
    case ErrorCode::kOneClassOnly: return "OneClassOnly";
    case ErrorCode::kEmptyRecords: return "EmptyRecords";
    case ErrorCode::kMalformedLine: return "MalformedLine";
    case ErrorCode::kDuplicateUttId: return "DuplicateUttId";
    case ErrorCode::kCorruptFeatureFile: return "CorruptFeatureFile";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(ErrorName(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void Fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace qsn
