#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rdperm/data.hpp"
#include "rdperm/models.hpp"
#include "rdperm/permute.hpp"

namespace rdperm {

// --- covariate balance ------------------------------------------------------

struct CovariateSpec {
  std::string name;
  ModelSpec model;
};

/// Continuous covariates get `continuous` (Logit transform when the name is
/// listed in `logit`); binary covariates get logistic-linear.
std::vector<CovariateSpec> default_covariate_models(const UnitFrame &frame, ModelSpec continuous,
                                                    const std::vector<std::string> &logit = {});

struct CovariateBalance {
  std::string name;
  std::string model;
  /// Treated minus control mean of the residuals.
  double difference = 0.0;
  /// difference / residual standard deviation.
  double std_difference = 0.0;
  /// difference / randomization standard error.
  double z = 0.0;
  double p_value = 1.0;
  bool fallback = false;
  bool dropped = false;
};

struct BalanceResult {
  std::vector<CovariateBalance> covariates;
  double combined_stat = 0.0;
  int df = 0;
  double p_chi2 = 1.0;
  std::optional<double> p_mc;
  std::optional<double> mc_stderr;
  Index n_treated = 0;
  Index n_control = 0;
  std::vector<std::string> warnings;
};

struct BalanceOptions {
  /// Also compute the permutation p-value of the combined statistic.
  bool permutation = false;
};

/// Covariance of the vector of treated-minus-control residual means under
/// uniform assignment: n / (n_T n_C) times the sample covariance (divisor
/// n - 1) of the residual columns.
Matrix randomization_covariance(const Matrix &residuals, Index n_treated);

/// Moore-Penrose inverse of a symmetric matrix, dropping eigenvalues below
/// 1e-10 times the largest. `rank` receives the retained count.
Matrix symmetric_pinv(const Matrix &sigma, int *rank = nullptr);

/// Combined balance test on already-residualized columns.
BalanceResult balance_from_residuals(const Matrix &residuals, const Vector &z,
                                     const std::vector<std::string> &names,
                                     const PermutationPlan &plan, BalanceOptions options = {});

/// Residualize every covariate on r inside the window with its model, then
/// test the residual mean differences jointly with the quadratic form
/// d' Sigma^+ d against chi-square(rank Sigma). Constant covariates are
/// dropped with a warning; failed logistic fits fall back to OLS.
///
/// Throws NoCovariates, DegenerateWindow.
BalanceResult balance_test(const UnitFrame &frame, const WindowSpec &window,
                           const std::vector<CovariateSpec> &covariates, const PermutationPlan &plan,
                           BalanceOptions options = {});

// --- density test -----------------------------------------------------------

enum class RunningSupport { Auto, Continuous, Discrete };

struct McCraryOptions {
  std::optional<double> bin_width;
  std::optional<double> bandwidth;
  RunningSupport support = RunningSupport::Auto;
};

struct DensityBin {
  double midpoint = 0.0;
  Index count = 0;
  double height = 0.0;
  /// Bin holds values <= cutoff.
  bool lower_side = true;
};

struct McCraryResult {
  double bin_width = 0.0;
  double bandwidth = 0.0;
  /// log f(c+) - log f(c-); NaN when a boundary density is not positive.
  double theta = 0.0;
  double se = 0.0;
  double p_value = 1.0;
  double density_below = 0.0;
  double density_above = 0.0;
  Index n = 0;
  bool discrete = false;
  bool defined = true;
  std::string diagnostic;
  std::vector<DensityBin> bins;
};

/// Discontinuity test for the running variable's density at the cutoff.
/// Units are binned (bins never straddle the cutoff; discrete running values
/// are their own bins), bin heights are smoothed by triangular-kernel local
/// linear regression on each side, and theta is the log ratio of the two
/// boundary estimates with se = sqrt(24/5 (1/f+ + 1/f-) / (n h)).
///
/// Throws EmptySide, InsufficientBins (fewer than 10 bins on a side).
McCraryResult mccrary_test(const UnitFrame &frame, const WindowSpec &window,
                           const McCraryOptions &options = {});
McCraryResult mccrary_test(const UnitFrame &frame, const McCraryOptions &options = {});

/// Grid step when the values lie on a regular lattice with repeats, otherwise
/// nullopt.
std::optional<double> detect_lattice(std::vector<double> values);

/// 2 sd(r) n^(-1/2).
double default_bin_width(const std::vector<double> &values);

} // namespace rdperm
