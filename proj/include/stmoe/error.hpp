// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace stmoe {

enum class Errc {
  NearZeroNorm,
  InsufficientCandidates,
  LengthMismatch,
  SupportMismatch,
  EmptyInput,
  AllZero,
  SingleGroup,
  ZeroVariance,
  OutOfRange,
  BadIndex,
  OutOfVocab,
  SequenceTooLong,
  NonFiniteLoss,
  VersionMismatch,
  Truncated,
  ShapeMismatch,
  Io,
  Config,
  TokenAbsent,
  NoSeedsInVocab,
  SingletonCluster,
  InsufficientClassCounts,
  InvalidSpec,
};

const char* errc_name(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  [[nodiscard]] Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace stmoe
