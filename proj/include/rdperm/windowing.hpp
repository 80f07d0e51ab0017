#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rdperm/spectests.hpp"

namespace rdperm {

struct SweepRow {
  double bandwidth = 0.0;
  bool tested = false;
  std::optional<double> balance_p;
  std::optional<double> mccrary_p;
  Index n = 0;
  Index n_treated = 0;
  Index n_control = 0;
  /// The balance test alone rejected (p <= alpha_F).
  bool rejected = false;
  std::string note;
};

struct BandwidthSweep {
  std::vector<double> candidates;
  double alpha_f = 0.1;
  double alpha_g = 0.05;
  std::vector<SweepRow> results;
  /// Largest candidate sustained under testing in order; unset when every
  /// realizable candidate was rejected.
  std::optional<double> b_star;
  std::vector<double> plausible_set;

  /// Overall size of balance-then-density specification testing.
  double error_budget() const noexcept { return alpha_f + alpha_g; }
};

struct SweepOptions {
  double alpha_g = 0.05;
  /// Evaluate every candidate instead of stopping at b*.
  bool exhaustive = false;
  /// Exclusions applied to every candidate window.
  WindowSpec base;
  McCraryOptions mccrary;
  bool run_mccrary = true;
};

/// Descending arithmetic grid from the widest one-sided extent of r down to
/// one step, stepping by the lattice unit of r (range / 100 if continuous).
std::vector<double> default_candidates(const UnitFrame &frame);

/// Balance tests from the widest candidate down. H_b counts as rejected only
/// when every candidate b' >= b is also rejected, so the first sustained
/// candidate is b* and every smaller candidate is plausible. Covariate models
/// are refit inside each candidate window.
///
/// Throws InvalidArgument when candidates are not strictly decreasing.
BandwidthSweep select_bandwidth(const UnitFrame &frame, const std::vector<double> &candidates,
                                const std::vector<CovariateSpec> &covariates, double alpha_f,
                                const PermutationPlan &plan, const SweepOptions &options = {});

struct ExclusionStep {
  std::string description;
  double p_value = 0.0;
  bool defined = true;
};

struct ExclusionResult {
  WindowSpec window;
  bool passed = false;
  std::vector<ExclusionStep> steps;
  /// Donut radius that first passed.
  std::optional<double> k_star;
};

struct DonutOptions {
  /// Test the base window before removing anything.
  bool include_empty_first = true;
  McCraryOptions mccrary;
};

/// Remove units with |r - cutoff| <= k for k = 0, step, 2 step, ... and stop
/// at the first k whose density test has p > alpha_g. Stopping at the first
/// pass is testing in order, so the family-wise error stays at alpha_g.
/// `passed` is false (ExhaustedWithoutPass) once k reaches the narrower side
/// of the base window.
ExclusionResult donut_exclusion(const UnitFrame &frame, const WindowSpec &base, double alpha_g,
                                double step, const DonutOptions &options = {});

/// Apply the hypothesized sorter sets cumulatively, in order, until the
/// density test passes. An empty list tests the base window as is.
ExclusionResult surgical_exclusion(const UnitFrame &frame, const WindowSpec &base,
                                   const std::vector<std::vector<double>> &hypotheses,
                                   double alpha_g, const McCraryOptions &mccrary = {});

/// Window [c - left, c + right] whose right edge (a support point above the
/// cutoff) minimizes |n_T - n_C|; ties go to the smaller right edge.
/// Throws DegenerateWindow.
WindowSpec balanced_asymmetric_window(const UnitFrame &frame, double left,
                                      const WindowSpec &exclusions = {});

} // namespace rdperm
