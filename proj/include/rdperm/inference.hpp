#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rdperm/data.hpp"
#include "rdperm/models.hpp"
#include "rdperm/permute.hpp"

namespace rdperm {

/// Sharp hypothesis of a constant additive effect tau0.
struct EffectHypothesis {
  double tau0 = 0.0;
};

/// Hypothesized effects lo, lo + step, ... up to hi.
struct GridSpec {
  double lo = 0.0;
  double hi = 0.0;
  double step = 0.0;

  std::vector<double> points() const;
};

struct GridPoint {
  double tau = 0.0;
  double p_value = 1.0;
};

struct ConfidenceInterval {
  double lower = 0.0;
  double upper = 0.0;
  bool lower_bounded = true;
  bool upper_bounded = true;
  bool empty = false;
};

struct EffectInference {
  TestResult null_test;
  ConfidenceInterval ci;
  double hl = 0.0;
  std::vector<GridPoint> grid;
  GridSpec grid_spec;
  double alpha = 0.05;
  Index n = 0;
  Index n_treated = 0;
  Index n_control = 0;
  ModelSpec model;
  PermutationPlan plan;
  std::vector<std::string> warnings;
};

/// Residuals of the reconstructed control outcomes y - tau0 z after a fresh
/// fit of `model` on the window.
Vector hypothesis_residuals(const WindowData &data, const ModelSpec &model, double tau0);

/// Test H: tau == tau0 by reconstructing y_C, refitting the model, and
/// permuting z against the residuals. tau0 = 0 is the sharp null of no effect.
TestResult test_effect(const UnitFrame &frame, const WindowSpec &window, const ModelSpec &model,
                       EffectHypothesis hypothesis, const PermutationPlan &plan);
TestResult test_effect(const WindowData &data, const ModelSpec &model, EffectHypothesis hypothesis,
                       const PermutationEngine &engine);

/// z'(I - H)y / z'(I - H)z for an OLS outcome model. Throws
/// RankDeficientDesign when z lies in the model's column span.
double hl_closed_form(const WindowData &data, ModelFamily family);

/// Hodges-Lehmann estimate by bisection: the midpoint of
/// sup{c : t(e(c)) > E T(e(c))} and inf{c : t(e(c)) < E T(e(c))}.
/// The bracket starts at `hint` (or a data-driven guess) and doubles up to
/// 64x its initial width. Throws NoSignChange.
double hl_bisection(const WindowData &data, const ModelSpec &model, const PermutationEngine &engine,
                    std::optional<GridSpec> hint = std::nullopt);

/// Closed form for SumCross with an OLS model, bisection otherwise.
/// AbsDiffMeans and two-sided statistics are estimated through their signed
/// counterparts.
double hl_estimate(const WindowData &data, const ModelSpec &model, const PermutationEngine &engine,
                   std::optional<GridSpec> hint = std::nullopt);
double hl_estimate(const UnitFrame &frame, const WindowSpec &window, const ModelSpec &model,
                   const PermutationPlan &plan);

/// 201-point grid centred at `center` with half-width six times a rough
/// standard error of the difference in residual means.
GridSpec default_grid(const WindowData &data, const ModelSpec &model, double center);

/// Test every grid point with a shared permutation sample and report the
/// points with p > alpha as the confidence set (outer approximation, padded by
/// step / 2). An accepted grid endpoint makes that side unbounded; an empty
/// acceptance set is reported in `ci.empty`, not thrown.
EffectInference invert_ci(const UnitFrame &frame, const WindowSpec &window, const ModelSpec &model,
                          const PermutationPlan &plan, double alpha,
                          std::optional<GridSpec> grid = std::nullopt);
EffectInference invert_ci(const WindowData &data, const ModelSpec &model, const PermutationPlan &plan,
                          double alpha, std::optional<GridSpec> grid = std::nullopt);

} // namespace rdperm
