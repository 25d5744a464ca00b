#pragma once

// Numerical tolerances shared by tests, the acceptance suite and the CLI.
namespace lacap::tol {

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckRel = 1e-4;
inline constexpr double kSoftmaxSum = 1e-9;
inline constexpr double kConvReference = 1e-10;
inline constexpr double kAttentionRowSum = 1e-6;
inline constexpr double kLayerNormMoments = 1e-6;
inline constexpr double kGradCamAnalytic = 1e-9;
inline constexpr double kMetricOracle = 1e-9;
inline constexpr double kLossIdentity = 1e-9;

}  // namespace lacap::tol
