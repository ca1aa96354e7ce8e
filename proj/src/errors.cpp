#include "probpnp/errors.hpp"

namespace probpnp {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kBehindCamera: return "BehindCamera";
    case ErrorCode::kDegenerateSet: return "DegenerateSet";
    case ErrorCode::kAllPointsInvalid: return "AllPointsInvalid";
    case ErrorCode::kSingularSystem: return "SingularSystem";
    case ErrorCode::kNoValidHypothesis: return "NoValidHypothesis";
    case ErrorCode::kRankDeficientFit: return "RankDeficientFit";
    case ErrorCode::kFitDiverged: return "FitDiverged";
    case ErrorCode::kAllWeightsZero: return "AllWeightsZero";
    case ErrorCode::kProposalCollapse: return "ProposalCollapse";
    case ErrorCode::kNonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

}  // namespace probpnp
