#include <cmath>
#include <limits>

#include "doctest.h"
#include "generators.hpp"
#include "rdperm/errors.hpp"
#include "rdperm/windowing.hpp"

using namespace rdperm;

namespace {

PermutationPlan plan_with(std::uint64_t seed) {
  PermutationPlan p;
  p.seed = seed;
  p.draws = 1000;
  return p;
}

// 20 units on every point of the 0.01 lattice over [-1, 1], plus `extra`
// units stacked on each listed value.
UnitFrame lattice_frame(const std::vector<std::pair<double, int>> &extra = {}) {
  std::vector<double> r;
  for (int p = -100; p <= 100; ++p)
    for (int c = 0; c < 20; ++c)
      r.push_back(p / 100.0);
  for (const auto &[value, count] : extra)
    for (int c = 0; c < count; ++c)
      r.push_back(value);
  const Vector rv = Eigen::Map<const Vector>(r.data(), static_cast<Index>(r.size()));
  return UnitFrame(rv, Vector::Zero(rv.size()), {}, 0.0, Direction::TreatedAtOrBelow);
}

UnitFrame covariate_frame(CounterRng &rng, Index n, double cubic) {
  const Vector r = gen::uniform_vector(rng, n, -1, 1);
  Vector x(n);
  for (Index i = 0; i < n; ++i)
    x[i] = cubic * r[i] * r[i] * r[i] + 0.1 * rng.normal();
  return UnitFrame(r, Vector::Zero(n),
                   {{"x", CovariateKind::Continuous, x}, {"w", CovariateKind::Continuous, gen::normal_vector(rng, n)}},
                   0.0, Direction::TreatedAtOrBelow);
}

} // namespace

TEST_CASE("default candidates descend from the widest extent") {
  const UnitFrame f = lattice_frame();
  const auto c = default_candidates(f);
  REQUIRE(c.size() == 100);
  CHECK(c.front() == doctest::Approx(1.0));
  CHECK(c.back() == doctest::Approx(0.01));
  for (std::size_t i = 1; i < c.size(); ++i)
    CHECK(c[i] < c[i - 1]);
}

TEST_CASE("sweep on clean data sustains the widest candidate") {
  CounterRng rng(151);
  const UnitFrame f = covariate_frame(rng, 1500, 0.0);
  const auto specs = default_covariate_models(f, ModelSpec{});
  const std::vector<double> cand{1.0, 0.8, 0.6, 0.4};
  const BandwidthSweep s = select_bandwidth(f, cand, specs, 0.1, plan_with(3));
  REQUIRE(s.b_star.has_value());
  CHECK(*s.b_star == 1.0);
  CHECK(s.plausible_set == cand);
  CHECK(s.results[0].tested);
  CHECK_FALSE(s.results[1].tested);
  CHECK(s.results[1].note == "plausible; not tested");
  CHECK(s.error_budget() == doctest::Approx(0.15));

  SweepOptions all;
  all.exhaustive = true;
  const BandwidthSweep e = select_bandwidth(f, cand, specs, 0.1, plan_with(3), all);
  for (const auto &row : e.results)
    CHECK(row.tested);
  CHECK(*e.b_star == 1.0);
}

TEST_CASE("sweep rejects wide windows where the covariate model misfits") {
  CounterRng rng(157);
  const UnitFrame f = covariate_frame(rng, 3000, 4.0);
  const auto specs = default_covariate_models(f, ModelSpec{});
  const std::vector<double> cand{1.0, 0.8, 0.6, 0.4, 0.2, 0.1};
  SweepOptions all;
  all.exhaustive = true;
  const BandwidthSweep s = select_bandwidth(f, cand, specs, 0.1, plan_with(5), all);
  REQUIRE(s.b_star.has_value());
  CHECK(*s.b_star < 1.0);
  CHECK(*s.b_star >= 0.1);
  CHECK(s.results[0].rejected);
  for (const auto &row : s.results)
    if (row.bandwidth > *s.b_star)
      CHECK(row.rejected);
  CHECK(s.plausible_set.front() == *s.b_star);
}

TEST_CASE("sweep argument checks and all-rejected outcome") {
  CounterRng rng(163);
  const UnitFrame f = covariate_frame(rng, 2000, 6.0);
  const auto specs = default_covariate_models(f, ModelSpec{ModelFamily::Constant});
  try {
    select_bandwidth(f, {0.5, 0.5}, specs, 0.1, plan_with(1));
    FAIL("expected InvalidArgument");
  } catch (const Error &e) {
    CHECK(e.code() == ErrorCode::InvalidArgument);
  }
  const BandwidthSweep s = select_bandwidth(f, {1.0, 0.9}, specs, 0.1, plan_with(1));
  CHECK_FALSE(s.b_star.has_value());
  CHECK(s.plausible_set.empty());
}

TEST_CASE("donut: a heap at the cutoff is cleared by the first step") {
  const UnitFrame f = lattice_frame({{0.0, 200}});
  DonutOptions opt;
  opt.include_empty_first = false;
  const ExclusionResult d = donut_exclusion(f, WindowSpec{}, 0.05, 0.01, opt);
  CHECK(d.passed);
  REQUIRE(d.k_star.has_value());
  CHECK(*d.k_star == 0.0);
  CHECK(d.steps.size() == 1);
}

TEST_CASE("donut: clean data passes before anything is removed") {
  const UnitFrame f = lattice_frame();
  const ExclusionResult d = donut_exclusion(f, WindowSpec{}, 0.05, 0.01);
  CHECK(d.passed);
  CHECK_FALSE(d.k_star.has_value());
  CHECK(d.window.excluded_intervals.empty());
  CHECK(d.steps.size() == 1);
}

TEST_CASE("donut: a spread heap needs a wider radius") {
  const UnitFrame f = lattice_frame({{0.0, 60}, {-0.01, 60}, {-0.02, 60}});
  DonutOptions opt;
  opt.include_empty_first = false;
  const ExclusionResult d = donut_exclusion(f, WindowSpec{}, 0.05, 0.01, opt);
  REQUIRE(d.passed);
  CHECK(*d.k_star == doctest::Approx(0.02));
  CHECK(d.steps.size() == 3);
}

TEST_CASE("donut: radius never shrinks as alpha grows") {
  const UnitFrame f = lattice_frame({{0.0, 40}, {-0.01, 40}, {-0.02, 25}});
  DonutOptions opt;
  opt.include_empty_first = false;
  double previous = -1.0;
  for (double a : {0.001, 0.01, 0.05, 0.1, 0.2, 0.4}) {
    const ExclusionResult d = donut_exclusion(f, WindowSpec{}, a, 0.01, opt);
    const double k = d.passed ? *d.k_star : std::numeric_limits<double>::infinity();
    CHECK(k >= previous);
    previous = k;
  }
}

TEST_CASE("donut gives up at the narrower side") {
  const UnitFrame f = lattice_frame({{0.0, 2000}, {-0.01, 2000}, {-0.02, 2000}, {-0.03, 2000}});
  DonutOptions opt;
  opt.include_empty_first = false;
  const ExclusionResult d = donut_exclusion(f, WindowSpec::symmetric(0.03), 0.05, 0.01, opt);
  CHECK_FALSE(d.passed);
}

TEST_CASE("surgical exclusion applies hypothesis sets cumulatively") {
  const UnitFrame f = lattice_frame({{0.0, 200}, {-0.01, 200}});
  const ExclusionResult s = surgical_exclusion(f, WindowSpec{}, {{0.0}, {0.0, -0.01}}, 0.05);
  REQUIRE(s.passed);
  CHECK(s.steps.size() == 2);
  CHECK(s.window.exclusions.size() == 2);
  CHECK(s.window.label == "surgical {0, -0.01}");

  // A list whose prefix already passes agrees with that prefix.
  const ExclusionResult longer = surgical_exclusion(f, WindowSpec{}, {{0.0, -0.01}, {0.5}}, 0.05);
  const ExclusionResult prefix = surgical_exclusion(f, WindowSpec{}, {{0.0, -0.01}}, 0.05);
  CHECK(longer.passed);
  CHECK(longer.window.exclusions == prefix.window.exclusions);
  CHECK(longer.steps.size() == 1);

  const ExclusionResult none = surgical_exclusion(f, WindowSpec{}, {}, 0.05);
  CHECK_FALSE(none.passed);
  const ExclusionResult clean = surgical_exclusion(lattice_frame(), WindowSpec::symmetric(0.8), {}, 0.05);
  CHECK(clean.passed);
  CHECK(clean.window.exclusions.empty());
  CHECK(clean.window.left == 0.8);
}

TEST_CASE("balanced asymmetric window matches a brute-force scan") {
  CounterRng rng(167);
  for (int trial = 0; trial < 20; ++trial) {
    CAPTURE(trial);
    const Index n = gen::size_between(rng, 40, 300);
    Vector r = gen::tied_vector(rng, n, 40);
    r = (r.array() / 20.0 - 1.0).matrix();
    const UnitFrame f(r, Vector::Zero(n), {}, 0.0, Direction::TreatedAtOrBelow);
    const double left = 0.5;
    Index below = 0;
    for (Index i = 0; i < n; ++i)
      below += r[i] <= 0 && r[i] >= -left;
    Index best = std::numeric_limits<Index>::max();
    double edge = 0.0;
    for (int k = 1; k <= 20; ++k) {
      const double e = k / 20.0;
      Index count = 0;
      bool present = false;
      for (Index i = 0; i < n; ++i) {
        count += r[i] > 0 && r[i] <= e + 1e-12;
        present = present || std::abs(r[i] - e) < 1e-12;
      }
      if (present && std::abs(below - count) < best) {
        best = std::abs(below - count);
        edge = e;
      }
    }
    try {
      const WindowSpec w = balanced_asymmetric_window(f, left);
      CHECK(w.right == doctest::Approx(edge));
    } catch (const Error &e) {
      CHECK(e.code() == ErrorCode::DegenerateWindow);
    }
  }
}

TEST_CASE("balanced window on a symmetric lattice") {
  const WindowSpec w = balanced_asymmetric_window(lattice_frame(), 0.5);
  CHECK(w.left == 0.5);
  // The atom at the cutoff sits on the left, so one extra point is needed.
  CHECK(w.right == doctest::Approx(0.51));

  CounterRng rng(173);
  const Vector below = gen::uniform_vector(rng, 50, -1, -0.01);
  const UnitFrame f(below, Vector::Zero(50), {}, 0.0, Direction::TreatedAtOrBelow);
  try {
    balanced_asymmetric_window(f, 0.5);
    FAIL("expected DegenerateWindow");
  } catch (const Error &e) {
    CHECK(e.code() == ErrorCode::DegenerateWindow);
  }
}
