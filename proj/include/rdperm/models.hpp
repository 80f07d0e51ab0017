#pragma once

#include <string>
#include <vector>

#include "rdperm/types.hpp"

namespace rdperm {

enum class ModelFamily { Constant, Linear, Quadratic, LogisticLinear };

enum class ResponseTransform { Identity, Logit };

struct ModelSpec {
  ModelFamily family = ModelFamily::Linear;
  ResponseTransform transform = ResponseTransform::Identity;
};

constexpr bool is_ols(ModelFamily family) noexcept { return family != ModelFamily::LogisticLinear; }

/// Polynomial degree in r of the model's systematic part.
constexpr int degree(ModelFamily family) noexcept {
  switch (family) {
  case ModelFamily::Constant:
    return 0;
  case ModelFamily::Quadratic:
    return 2;
  default:
    return 1;
  }
}

std::string to_string(ModelFamily family);
std::string to_string(const ModelSpec &spec);

/// Values are clamped to [kLogitClamp, 1 - kLogitClamp] before the logit.
inline constexpr double kLogitClamp = 1e-4;

/// Throws InvalidArgument for values outside [0, 1].
Vector logit_transform(const Vector &v);

struct FittedModel {
  ModelSpec spec;
  /// Coefficients of ascending powers of r on the original r scale.
  Vector theta;
  /// Response (or transformed response) minus fitted values.
  Vector residuals;
  Vector fitted;
  std::vector<std::string> design_columns;
  bool hat_available = false;
  /// Logistic fit replaced by a linear-probability fit.
  bool fallback = false;
  int iterations = 0;
  std::string warning;
};

/// Least squares via column-pivoting QR on a centred and scaled design, or
/// logistic IRLS for LogisticLinear. `weights` may be empty (unweighted).
///
/// Throws RankDeficientDesign, NonConvergence, SeparationDetected, or
/// InvalidArgument (length mismatch, logistic response not binary or with a
/// single class).
FittedModel fit(const ModelSpec &spec, const Vector &r, const Vector &v,
                const Vector &weights = Vector());

/// Like `fit`, but a logistic fit that separates or fails to converge is
/// replaced by a linear-probability OLS fit flagged with `fallback`.
FittedModel fit_or_fallback(const ModelSpec &spec, const Vector &r, const Vector &v);

/// Residual maker (I - H) v for the OLS design of `family` built from r.
Vector hat_apply(ModelFamily family, const Vector &r, const Vector &v);

/// Uncentred polynomial design [1, r, r^2, ...] (used by diagnostics and tests).
Matrix polynomial_design(const Vector &r, int degree);

} // namespace rdperm
