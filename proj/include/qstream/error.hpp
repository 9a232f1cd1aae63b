// Copyright 2026 The QStream Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
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

namespace qstream {

enum class ErrorCode {
  kDimMismatch,
  kLengthMismatch,
  kInvalidGrid,
  kNonPlanarRotation,
  kTooManyQueries,
  kMixedFeatureDims,
  kBadMagic,
  kBadVersion,
  kTruncatedPacket,
  kCrcMismatch,
  kPlacementFailure,
  kEmptyBatch,
  kDivergedLoss,
  kInvalidArgument,
  kConfigError,
  kIoError,
  kMissingCheckpoint,
};

inline constexpr std::string_view error_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDimMismatch: return "DimMismatch";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kInvalidGrid: return "InvalidGrid";
    case ErrorCode::kNonPlanarRotation: return "NonPlanarRotation";
    case ErrorCode::kTooManyQueries: return "TooManyQueries";
    case ErrorCode::kMixedFeatureDims: return "MixedFeatureDims";
    case ErrorCode::kBadMagic: return "BadMagic";
    case ErrorCode::kBadVersion: return "BadVersion";
    case ErrorCode::kTruncatedPacket: return "TruncatedPacket";
    case ErrorCode::kCrcMismatch: return "CrcMismatch";
    case ErrorCode::kPlacementFailure: return "PlacementFailure";
    case ErrorCode::kEmptyBatch: return "EmptyBatch";
    case ErrorCode::kDivergedLoss: return "DivergedLoss";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kConfigError: return "ConfigError";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kMissingCheckpoint: return "MissingCheckpoint";
  }
  return "Unknown";
}

// Every library failure is an Error; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(error_name(code)) + ": " + detail), code_(code) {}

  ErrorCode code() const noexcept { return code_; }
  std::string_view name() const noexcept { return error_name(code_); }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& detail) {
  throw Error(code, detail);
}

}  // namespace qstream
