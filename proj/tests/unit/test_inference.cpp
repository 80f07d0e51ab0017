#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "doctest.h"
#include "generators.hpp"
#include "rdperm/errors.hpp"
#include "rdperm/inference.hpp"
#include "rdperm/report.hpp"

using namespace rdperm;

namespace {

PermutationPlan plan_of(StatisticKind kind, Sidedness side = Sidedness::TwoSided, std::uint64_t seed = 5) {
  PermutationPlan p;
  p.statistic = Statistic{kind, side};
  p.seed = seed;
  p.draws = 4000;
  return p;
}

WindowData frame_data(const Vector &r, const Vector &y) {
  const UnitFrame f(r, y, {}, 0.0, Direction::TreatedAtOrBelow);
  return window_data(f, WindowSpec{});
}

// Coefficient on z of y regressed on (1, r, z), solved through the normal
// equations with a dense LDLT.
double ols_z_coefficient(const WindowData &d) {
  Matrix x(d.n(), 3);
  x.col(0).setOnes();
  x.col(1) = d.r;
  x.col(2) = d.z;
  const Matrix xtx = x.transpose() * x;
  const Vector xty = x.transpose() * d.y;
  return xtx.ldlt().solve(xty)[2];
}

} // namespace

TEST_CASE("noise-free recovery of the effect") {
  CounterRng rng(3);
  const Vector r = gen::uniform_vector(rng, 30, -1, 1);
  Vector y(30);
  for (Index i = 0; i < 30; ++i)
    y[i] = 1 + 2 * r[i] + (r[i] <= 0 ? 0.7 : 0.0);
  const WindowData d = frame_data(r, y);
  const ModelSpec linear{ModelFamily::Linear};
  CHECK(hl_closed_form(d, ModelFamily::Linear) == doctest::Approx(0.7).epsilon(1e-9));

  const PermutationEngine engine(d.n(), d.n_treated, plan_of(StatisticKind::SumCross, Sidedness::UpperTail));
  CHECK(hl_estimate(d, linear, engine) == doctest::Approx(0.7).epsilon(1e-9));
  CHECK(test_effect(d, linear, {0.7}, engine).p_value == 1.0);

  Vector y0(30);
  for (Index i = 0; i < 30; ++i)
    y0[i] = 2 + 3 * r[i];
  const WindowData d0 = frame_data(r, y0);
  const PermutationEngine e0(d0.n(), d0.n_treated, plan_of(StatisticKind::DiffMeans));
  CHECK(test_effect(d0, linear, {0.0}, e0).p_value == 1.0);
}

TEST_CASE("closed-form HL equals the joint regression coefficient on a fixed listing") {
  Vector r(12), y(12);
  r << -0.9, -0.75, -0.6, -0.4, -0.25, -0.1, 0.05, 0.2, 0.35, 0.5, 0.7, 0.95;
  y << 1.2, 0.4, 1.9, 1.1, 2.3, 1.7, 0.8, 1.5, 0.6, 1.9, 1.4, 2.2;
  const WindowData d = frame_data(r, y);
  CHECK(hl_closed_form(d, ModelFamily::Linear) == doctest::Approx(ols_z_coefficient(d)).epsilon(1e-12));
}

TEST_CASE("property: closed-form HL matches OLS on random instances") {
  CounterRng rng(53);
  for (int trial = 0; trial < 100; ++trial) {
    CAPTURE(trial);
    const UnitFrame f = gen::linear_frame(rng, gen::size_between(rng, 20, 200), rng.uniform(-1, 1));
    const WindowData d = window_data(f, WindowSpec{});
    const double scale = std::max(1.0, d.y.cwiseAbs().maxCoeff());
    CHECK(std::abs(hl_closed_form(d, ModelFamily::Linear) - ols_z_coefficient(d)) <= 1e-8 * scale);
  }
}

TEST_CASE("constant model with DiffMeans estimates the raw mean difference") {
  CounterRng rng(59);
  for (int trial = 0; trial < 10; ++trial) {
    const UnitFrame f = gen::linear_frame(rng, 40, 0.5);
    const WindowData d = window_data(f, WindowSpec{});
    const ModelSpec constant{ModelFamily::Constant};
    PermutationPlan plan = plan_of(StatisticKind::DiffMeans, Sidedness::UpperTail);
    const PermutationEngine engine(d.n(), d.n_treated, plan);
    double mt = 0, mc = 0;
    for (Index i = 0; i < d.n(); ++i)
      (d.z[i] == 1.0 ? mt : mc) += d.y[i];
    const double diff = mt / static_cast<double>(d.n_treated) - mc / static_cast<double>(d.n_control);
    CHECK(hl_estimate(d, constant, engine) == doctest::Approx(diff).epsilon(1e-5));
  }
}

TEST_CASE("SumCross curve is affine in the hypothesis with slope -z'(I-H)z") {
  CounterRng rng(61);
  const UnitFrame f = gen::linear_frame(rng, 50, 0.4);
  const WindowData d = window_data(f, WindowSpec{});
  const ModelSpec linear{ModelFamily::Linear};
  const Statistic s{StatisticKind::SumCross, Sidedness::UpperTail};
  const PermutationPlan plan = plan_of(StatisticKind::SumCross, Sidedness::UpperTail);
  auto g = [&](double c) {
    const Vector e = hypothesis_residuals(d, linear, c);
    return statistic_value(s, e, d.z) - null_expectation(e, d.n_treated, s, plan);
  };
  const double slope = -d.z.dot(hat_apply(ModelFamily::Linear, d.r, d.z));
  CHECK((g(1.0) - g(-0.5)) / 1.5 == doctest::Approx(slope).epsilon(1e-9));
  CHECK((g(0.25) - g(-0.5)) / 0.75 == doctest::Approx(slope).epsilon(1e-9));
}

TEST_CASE("noise-free confidence interval collapses onto the true effect") {
  CounterRng rng(67);
  const Vector r = gen::uniform_vector(rng, 60, -1, 1);
  Vector y(60);
  for (Index i = 0; i < 60; ++i)
    y[i] = 1 + 2 * r[i] + (r[i] <= 0 ? 0.5 : 0.0);
  const WindowData d = frame_data(r, y);
  const GridSpec grid{0.0, 1.0, 0.01};
  const EffectInference inf = invert_ci(d, ModelSpec{}, plan_of(StatisticKind::DiffMeans), 0.05, grid);
  CHECK_FALSE(inf.ci.empty);
  CHECK(inf.ci.lower == doctest::Approx(0.495));
  CHECK(inf.ci.upper == doctest::Approx(0.505));
}

TEST_CASE("property: grid p-values match the generic test and define the interval") {
  CounterRng rng(71);
  for (int trial = 0; trial < 12; ++trial) {
    CAPTURE(trial);
    const UnitFrame f = gen::linear_frame(rng, gen::size_between(rng, 30, 120), 0.5);
    const WindowData d = window_data(f, WindowSpec{});
    const ModelSpec model{trial % 3 == 0 ? ModelFamily::Quadratic : ModelFamily::Linear};
    const StatisticKind kind = trial % 2 ? StatisticKind::DiffMeans : StatisticKind::RankSumStudentized;
    const PermutationPlan plan = plan_of(kind, Sidedness::TwoSided, 100 + static_cast<std::uint64_t>(trial));
    const GridSpec grid{-1.5, 2.5, 0.05};
    const EffectInference inf = invert_ci(d, model, plan, 0.05, grid);
    const PermutationEngine engine(d.n(), d.n_treated, plan);
    for (std::size_t k = 0; k < inf.grid.size(); k += 7)
      CHECK(inf.grid[k].p_value ==
            doctest::Approx(test_effect(d, model, {inf.grid[k].tau}, engine).p_value).epsilon(1e-12));
    if (inf.ci.empty)
      continue;
    bool contiguous = true;
    for (const auto &g : inf.grid) {
      const bool inside = g.tau >= inf.ci.lower && g.tau <= inf.ci.upper;
      if (inside != (g.p_value > 0.05))
        contiguous = false;
    }
    if (contiguous) {
      CHECK(inf.hl >= inf.ci.lower);
      CHECK(inf.hl <= inf.ci.upper);
    } else {
      CHECK(std::find(inf.warnings.begin(), inf.warnings.end(), "acceptance region is not contiguous on the grid") !=
            inf.warnings.end());
    }
  }
}

TEST_CASE("translation equivariance with exact permutation") {
  CounterRng rng(73);
  for (int trial = 0; trial < 5; ++trial) {
    const UnitFrame f = gen::linear_frame(rng, 12, 0.8);
    const WindowData d = window_data(f, WindowSpec{});
    const PermutationPlan plan = plan_of(StatisticKind::DiffMeans);
    const ModelSpec model{};
    const GridSpec grid{-3.0, 5.0, 0.05};
    const EffectInference base = invert_ci(d, model, plan, 0.1, grid);
    REQUIRE(base.null_test.method == Method::Exact);

    WindowData lifted = d;
    lifted.y.array() += 3.0;
    const EffectInference a = invert_ci(lifted, model, plan, 0.1, grid);
    CHECK(a.hl == doctest::Approx(base.hl).epsilon(1e-9));
    CHECK(a.ci.lower == doctest::Approx(base.ci.lower).epsilon(1e-9));
    CHECK(a.ci.upper == doctest::Approx(base.ci.upper).epsilon(1e-9));

    WindowData shifted = d;
    shifted.y += 0.75 * d.z;
    const EffectInference b = invert_ci(shifted, model, plan, 0.1, GridSpec{-2.25, 5.75, 0.05});
    CHECK(b.hl == doctest::Approx(base.hl + 0.75).epsilon(1e-9));
    CHECK(b.ci.lower == doctest::Approx(base.ci.lower + 0.75).epsilon(1e-9));
    CHECK(b.ci.upper == doctest::Approx(base.ci.upper + 0.75).epsilon(1e-9));
  }
}

TEST_CASE("empty and unbounded confidence sets are reported") {
  CounterRng rng(79);
  const UnitFrame f = gen::linear_frame(rng, 200, 0.5);
  const WindowData d = window_data(f, WindowSpec{});
  const PermutationPlan plan = plan_of(StatisticKind::DiffMeans);

  const EffectInference far = invert_ci(d, ModelSpec{}, plan, 0.05, GridSpec{10.0, 11.0, 0.1});
  CHECK(far.ci.empty);
  CHECK(far.warnings.front().rfind("EmptyConfidenceSet", 0) == 0);

  const EffectInference wide = invert_ci(d, ModelSpec{}, plan, 0.05, GridSpec{0.4, 0.6, 0.1});
  CHECK_FALSE(wide.ci.lower_bounded);
  CHECK_FALSE(wide.ci.upper_bounded);

  const EffectInference upper = invert_ci(d, ModelSpec{}, plan_of(StatisticKind::DiffMeans, Sidedness::UpperTail), 0.05);
  CHECK_FALSE(upper.ci.upper_bounded);
  CHECK(std::find(upper.warnings.begin(), upper.warnings.end(),
                  "upper-tail statistic: the interval is unbounded above by construction") != upper.warnings.end());
}

TEST_CASE("default grid brackets the estimate") {
  CounterRng rng(83);
  const UnitFrame f = gen::linear_frame(rng, 400, 0.3);
  const WindowData d = window_data(f, WindowSpec{});
  const GridSpec g = default_grid(d, ModelSpec{}, 0.3);
  CHECK(g.points().size() == 201);
  CHECK((g.lo + g.hi) / 2 == doctest::Approx(0.3));
  const EffectInference inf = invert_ci(d, ModelSpec{}, plan_of(StatisticKind::AbsDiffMeans), 0.05);
  CHECK(inf.ci.lower_bounded);
  CHECK(inf.ci.upper_bounded);
}

TEST_CASE("report rendering of a main-analysis row") {
  EffectInference inf;
  inf.null_test.p_value = 0.00014;
  inf.ci = ConfidenceInterval{0.12, 0.39, true, true, false};
  inf.hl = 0.25;
  inf.n = 9334;
  const Json j = to_json(inf);
  CHECK(j["p_null"].get<double>() == 0.00014);
  CHECK(j["ci"]["lower"].get<double>() == 0.12);
  CHECK(j["ci"]["upper"].get<double>() == 0.39);
  CHECK(j["hl"].get<double>() == 0.25);
  CHECK(j["n"].get<long>() == 9334);
  CHECK(j.dump().find("0.00014") != std::string::npos);
}
