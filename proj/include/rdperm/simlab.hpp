#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rdperm/inference.hpp"
#include "rdperm/windowing.hpp"

namespace rdperm {

struct RunningDistribution {
  enum class Kind { Uniform, DiscreteGrid };
  Kind kind = Kind::Uniform;
  double lo = -1.0;
  double hi = 1.0;
  /// Lattice step for DiscreteGrid.
  double step = 0.01;
  /// Relative weights of the lattice points (empty = equal).
  std::vector<double> weights;
};

struct EffectModel {
  enum class Kind { Constant, RandomAroundMean };
  Kind kind = Kind::Constant;
  double tau0 = 0.0;
  /// Standard deviation of eta = tau - tau0, drawn independently of R.
  double eta_sd = 0.0;
};

struct CovariateDgp {
  std::string name;
  /// Mean (continuous) or log-odds (binary) as a polynomial in r.
  std::vector<double> mean_poly;
  double noise_sd = 1.0;
  bool binary = false;
};

/// Moves round(fraction * n) units whose r lies within source_radius of
/// source_value (nearest first) to r = heap_value. Potential outcomes and
/// covariates stay those of the original r; treatment follows the new r.
struct Manipulation {
  double heap_value = 0.0;
  double fraction = 0.05;
  double source_value = 0.0;
  double source_radius = 0.0;
};

struct DgpSpec {
  Index n = 200;
  RunningDistribution running;
  double cutoff = 0.0;
  Direction direction = Direction::TreatedAtOrBelow;
  /// E(Y_C | R) as ascending polynomial coefficients.
  std::vector<double> yc_poly{0.0, 1.0};
  double noise_sd = 1.0;
  EffectModel effect;
  std::vector<CovariateDgp> covariates;
  std::optional<Manipulation> manipulation;
};

double evaluate_polynomial(const std::vector<double> &coefficients, double x);

/// Deterministic in (spec, seed). Throws InvalidArgument for malformed specs.
UnitFrame generate(const DgpSpec &spec, std::uint64_t seed);

struct InferenceConfig {
  ModelSpec model;
  PermutationPlan plan;
  WindowSpec window;
  /// Replace the window by balanced_asymmetric_window(frame, balanced_left).
  std::optional<double> balanced_left;
  /// Grid points for confidence intervals (default grid rule, resized).
  int grid_points = 201;
};

struct ExperimentReport {
  std::string name;
  std::size_t n_seeds = 0;
  std::string metric;
  double value = 0.0;
  double mc_stderr = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  bool pass = false;
  /// Negative controls are reported but never gate.
  bool gating = true;
  std::vector<std::pair<std::string, double>> details;
};

/// Replicate streams: data for replicate i from derive_seed(seed, 2i), the
/// permutation sample from derive_seed(seed, 2i + 1).
std::uint64_t replicate_data_seed(std::uint64_t seed, std::size_t replicate);
std::uint64_t replicate_plan_seed(std::uint64_t seed, std::size_t replicate);

/// Rejection rate of the tau0 = 0 test; pass iff within 3 binomial standard
/// errors of alpha.
ExperimentReport run_size_experiment(const DgpSpec &spec, const InferenceConfig &config,
                                     std::size_t n_seeds, double alpha, std::uint64_t seed,
                                     unsigned threads = 1);

/// Fraction of replicates whose confidence interval covers the effect mean;
/// pass iff coverage >= level - 3 sqrt(level (1 - level) / n_seeds).
ExperimentReport run_coverage_experiment(const DgpSpec &spec, const InferenceConfig &config,
                                         std::size_t n_seeds, double level, std::uint64_t seed,
                                         unsigned threads = 1);

/// Largest relative gap between the closed-form HL estimate (SumCross, OLS
/// linear) and the z coefficient of the joint regression of y on (1, r, z);
/// pass iff <= 1e-8.
ExperimentReport run_prop2_check(std::size_t n_instances, std::uint64_t seed);

/// Average over replicates of the treated-minus-control mean of residuals
/// built under tau0 = E tau; pass iff within 3 standard errors of zero.
ExperimentReport run_prop1_check(const DgpSpec &spec, const ModelSpec &model, std::size_t n_seeds,
                                 std::uint64_t seed);

struct SweepConfig {
  std::vector<double> candidates;
  ModelSpec covariate_model;
  double alpha_f = 0.1;
  /// Hypotheses H_b with b <= valid_below are true (default: all).
  std::optional<double> valid_below;
};

/// Fraction of replicates in which testing in order rejects a true H_b;
/// pass iff <= alpha_f + 3 sqrt(alpha_f (1 - alpha_f) / n_seeds).
ExperimentReport run_fwer_experiment(const DgpSpec &spec, const SweepConfig &config,
                                     std::size_t n_seeds, std::uint64_t seed, unsigned threads = 1);

struct BalanceSizeConfig {
  ModelSpec continuous_model;
  double ks_alpha = 0.01;
  std::size_t mc_instances = 50;
  std::uint64_t mc_draws = 10'000;
};

/// Chi-square balance p-values under a true null: KS test against U(0, 1)
/// plus per-instance agreement |p_chi2 - p_mc| <= 4 mc_stderr on a subsample.
ExperimentReport run_balance_size_experiment(const DgpSpec &spec, const BalanceSizeConfig &config,
                                             std::size_t n_seeds, std::uint64_t seed,
                                             unsigned threads = 1);

/// Density-test rejection rate at alpha. With `expect_power` the pass rule is
/// rate >= min_power; otherwise rate within 3 binomial errors of alpha.
ExperimentReport run_mccrary_experiment(const DgpSpec &spec, const McCraryOptions &options,
                                        double alpha, std::size_t n_seeds, std::uint64_t seed,
                                        bool expect_power = false, double min_power = 0.95,
                                        unsigned threads = 1);

/// Asymptotic Kolmogorov-Smirnov test of a sample against U(0, 1); returns
/// (D, p-value).
std::pair<double, double> ks_uniform(std::vector<double> sample);

} // namespace rdperm
