/*
 * Copyright 2026 The uwkd Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace uwkd {

enum class ErrorKind {
  DimMismatch,
  ShapeMismatch,
  NotPositiveDefinite,
  InvalidDistribution,
  InvalidHyperparameter,
  DepthOutOfRange,
  LabelOutOfRange,
  EmptyDataset,
  EmptyEnsemble,
  TooFewSamples,
  ConfigMismatch,
  InvalidSpec,
  InvalidFractions,
  ProbeMissing,
  IoError,
  ParseError,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DimMismatch: return "DimMismatch";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorKind::InvalidDistribution: return "InvalidDistribution";
    case ErrorKind::InvalidHyperparameter: return "InvalidHyperparameter";
    case ErrorKind::DepthOutOfRange: return "DepthOutOfRange";
    case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::EmptyEnsemble: return "EmptyEnsemble";
    case ErrorKind::TooFewSamples: return "TooFewSamples";
    case ErrorKind::ConfigMismatch: return "ConfigMismatch";
    case ErrorKind::InvalidSpec: return "InvalidSpec";
    case ErrorKind::InvalidFractions: return "InvalidFractions";
    case ErrorKind::ProbeMissing: return "ProbeMissing";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::ParseError: return "ParseError";
  }
  return "Unknown";
}

// Every failure raised by the library carries a kind so callers (the CLI in
// particular) can map it onto an exit code without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool condition, ErrorKind kind, const std::string& what) {
  if (!condition) fail(kind, what);
}

}  // namespace uwkd
