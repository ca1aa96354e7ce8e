#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace probpnp {

enum class ErrorCode {
  kBehindCamera,
  kDegenerateSet,
  kAllPointsInvalid,
  kSingularSystem,
  kNoValidHypothesis,
  kRankDeficientFit,
  kFitDiverged,
  kAllWeightsZero,
  kProposalCollapse,
  kNonFiniteGradient,
  kInvalidArgument,
};

std::string_view to_string(ErrorCode code);

/// Numerical or precondition failure raised by the library. The code lets
/// callers (the CLI in particular) map failures onto exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace probpnp
