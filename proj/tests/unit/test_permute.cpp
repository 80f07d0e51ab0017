#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "generators.hpp"
#include "rdperm/errors.hpp"
#include "rdperm/permute.hpp"

using namespace rdperm;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v)
    out[i++] = x;
  return out;
}

PermutationPlan plan_for(StatisticKind kind, std::uint64_t seed = 1, Sidedness side = Sidedness::UpperTail) {
  PermutationPlan p;
  p.statistic = Statistic{kind, side};
  p.seed = seed;
  return p;
}

// Mid-ranks by direct counting: rank = #{smaller} + (#{equal} + 1) / 2.
std::vector<double> mid_ranks(const std::vector<double> &x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0, equal = 0;
    for (double y : x) {
      less += y < x[i];
      equal += y == x[i];
    }
    out[i] = less + (equal + 1.0) / 2.0;
  }
  return out;
}

// Brunner-Munzel statistic from its textbook definition.
double brunner_munzel(const Vector &v, const Vector &z) {
  std::vector<double> all(v.data(), v.data() + v.size()), t, c;
  for (Index i = 0; i < v.size(); ++i)
    (z[i] == 1.0 ? t : c).push_back(v[i]);
  const std::vector<double> r = mid_ranks(all), rt_in = mid_ranks(t), rc_in = mid_ranks(c);
  std::vector<double> rt, rc;
  for (Index i = 0; i < v.size(); ++i)
    (z[i] == 1.0 ? rt : rc).push_back(r[static_cast<std::size_t>(i)]);
  const double nt = static_cast<double>(t.size()), nc = static_cast<double>(c.size()), n = nt + nc;
  const double mt = std::accumulate(rt.begin(), rt.end(), 0.0) / nt;
  const double mc = std::accumulate(rc.begin(), rc.end(), 0.0) / nc;
  double st = 0, sc = 0;
  for (std::size_t i = 0; i < rt.size(); ++i)
    st += std::pow(rt[i] - rt_in[i] - mt + (nt + 1) / 2, 2);
  for (std::size_t i = 0; i < rc.size(); ++i)
    sc += std::pow(rc[i] - rc_in[i] - mc + (nc + 1) / 2, 2);
  st /= nt - 1;
  sc /= nc - 1;
  return nt * nc * (mt - mc) / std::sqrt(n * (nt * st + nc * sc));
}

// Every assignment of k treated among n, via bitmasks.
template <class Fn> void for_each_assignment(Index n, Index k, Fn &&fn) {
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (std::popcount(mask) != k)
      continue;
    Vector z(n);
    for (Index i = 0; i < n; ++i)
      z[i] = (mask >> i) & 1u ? 1.0 : 0.0;
    fn(z);
  }
}

double brute_force_p(const Statistic &s, const Vector &v, const Vector &z) {
  const double obs = statistic_value(s, v, z);
  double hits = 0, total = 0;
  for_each_assignment(v.size(), static_cast<Index>(z.sum()), [&](const Vector &zz) {
    hits += statistic_value(s, v, zz) >= obs - 1e-9;
    total += 1;
  });
  return hits / total;
}

} // namespace

TEST_CASE("exact p-value on the four-unit example") {
  const Vector v = vec({1, 2, 3, 4}), z = vec({0, 0, 1, 1});
  const TestResult t = permutation_test(v, z, plan_for(StatisticKind::DiffMeans));
  CHECK(t.method == Method::Exact);
  CHECK(t.assignments == 6);
  CHECK(t.observed == doctest::Approx(2.0));
  CHECK(t.p_value == doctest::Approx(1.0 / 6.0));
  CHECK(t.mc_stderr == 0.0);

  const TestResult s = permutation_test(v, z, plan_for(StatisticKind::SumCross));
  CHECK(s.observed == 7.0);
  CHECK(s.null_mean == doctest::Approx(5.0));
  CHECK(s.p_value == doctest::Approx(1.0 / 6.0));
}

TEST_CASE("choose_capped") {
  CHECK(choose_capped(10, 3, 1000) == 120);
  CHECK(choose_capped(10, 7, 1000) == 120);
  CHECK(choose_capped(100, 50, 1000) == 1001);
  CHECK(choose_capped(5, 6, 10) == 0);
}

TEST_CASE("rank statistic matches the textbook Brunner-Munzel formula") {
  CounterRng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    CAPTURE(trial);
    const Index n = gen::size_between(rng, 6, 40);
    const Index nt = gen::size_between(rng, 2, n - 2);
    const Vector v = trial % 2 ? gen::tied_vector(rng, n, 5) : gen::normal_vector(rng, n);
    const Vector z = gen::assignment(rng, n, nt);
    const Statistic s{StatisticKind::RankSumStudentized, Sidedness::UpperTail};
    const double mine = statistic_value(s, v, z);
    const double oracle = brunner_munzel(v, z);
    if (std::isfinite(oracle))
      CHECK(mine == doctest::Approx(oracle).epsilon(1e-9));
  }
}

TEST_CASE("rank null expectation and p-value against full enumeration at n = 8") {
  const Vector v = vec({1, 3, 3, 2, 5, 5, 5, 0});
  const Vector z = vec({1, 0, 1, 1, 0, 1, 0, 0});
  const Statistic s{StatisticKind::RankSumStudentized, Sidedness::UpperTail};
  double sum = 0, count = 0;
  for_each_assignment(8, 4, [&](const Vector &zz) {
    sum += statistic_value(s, v, zz);
    count += 1;
  });
  const PermutationPlan exact = plan_for(StatisticKind::RankSumStudentized);
  CHECK(null_expectation(v, 4, s, exact) == doctest::Approx(sum / count).epsilon(1e-12));
  CHECK(permutation_test(v, z, exact).p_value == doctest::Approx(brute_force_p(s, v, z)));

  PermutationPlan mc = exact;
  mc.max_exact = 0;
  mc.draws = 200'000;
  const double e_mc = null_expectation(v, 4, s, mc);
  CHECK(std::abs(e_mc - sum / count) < 0.01);
}

TEST_CASE("property: exact p-values equal brute-force enumeration") {
  CounterRng rng(37);
  const StatisticKind kinds[] = {StatisticKind::DiffMeans, StatisticKind::AbsDiffMeans, StatisticKind::SumCross,
                                 StatisticKind::RankSumStudentized};
  for (int trial = 0; trial < 80; ++trial) {
    CAPTURE(trial);
    const Index n = gen::size_between(rng, 4, 11);
    const Index nt = gen::size_between(rng, 1, n - 1);
    const Vector v = trial % 3 ? gen::normal_vector(rng, n) : gen::tied_vector(rng, n, 3);
    const Vector z = gen::assignment(rng, n, nt);
    const auto side = trial % 2 ? Sidedness::TwoSided : Sidedness::UpperTail;
    const PermutationPlan plan = plan_for(kinds[trial % 4], 1, side);
    if (v.maxCoeff() == v.minCoeff())
      continue;
    const TestResult t = permutation_test(v, z, plan);
    CHECK(t.p_value > 0.0);
    CHECK(t.p_value <= 1.0);
    CHECK(t.p_value == doctest::Approx(brute_force_p(plan.statistic, v, z)));
  }
}

TEST_CASE("Monte Carlo p-values agree with exact ones and never reach zero") {
  CounterRng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 10;
    const Vector v = gen::normal_vector(rng, n);
    const Vector z = gen::assignment(rng, n, 5);
    PermutationPlan plan = plan_for(StatisticKind::DiffMeans, 100 + static_cast<std::uint64_t>(trial));
    const double exact = permutation_test(v, z, plan).p_value;
    plan.max_exact = 0;
    plan.draws = 20'000;
    const TestResult mc = permutation_test(v, z, plan);
    CHECK(mc.method == Method::MonteCarlo);
    CHECK(mc.p_value >= 1.0 / 20'001.0);
    CHECK(std::abs(mc.p_value - exact) <= 4.0 * std::max(mc.mc_stderr, 1e-4));
  }
}

TEST_CASE("results do not depend on thread count or on materialization") {
  CounterRng rng(43);
  const Vector v = gen::normal_vector(rng, 300);
  const Vector z = gen::assignment(rng, 300, 120);
  for (auto kind : {StatisticKind::DiffMeans, StatisticKind::RankSumStudentized}) {
    PermutationPlan plan = plan_for(kind, 99);
    plan.draws = 5000;
    const TestResult a = permutation_test(v, z, plan);
    plan.threads = 3;
    const TestResult b = permutation_test(v, z, plan);
    CHECK(a.p_value == b.p_value);
    CHECK(a.null_mean == b.null_mean);
    const PermutationEngine stored(300, 120, plan, true);
    REQUIRE(stored.sample().materialized());
    const TestResult c = stored.test(v, z);
    CHECK(a.p_value == c.p_value);
    CHECK(a.null_mean == c.null_mean);
  }
}

TEST_CASE("two-sided p-value is symmetric in the treatment labels") {
  CounterRng rng(47);
  for (int trial = 0; trial < 30; ++trial) {
    const Index n = gen::size_between(rng, 5, 12);
    const Vector v = gen::normal_vector(rng, n);
    const Vector z = gen::assignment(rng, n, gen::size_between(rng, 1, n - 1));
    const Vector flipped = (Vector::Ones(n) - z).eval();
    const PermutationPlan plan = plan_for(StatisticKind::DiffMeans, 1, Sidedness::TwoSided);
    CHECK(permutation_test(v, z, plan).p_value == doctest::Approx(permutation_test(v, flipped, plan).p_value));
  }
}

TEST_CASE("degenerate inputs") {
  const TestResult t = permutation_test(Vector::Constant(6, 2.0), vec({1, 1, 1, 0, 0, 0}), plan_for(StatisticKind::DiffMeans));
  CHECK(t.p_value == 1.0);
  try {
    permutation_test(vec({1, 2, 3}), vec({1, 1, 1}), plan_for(StatisticKind::DiffMeans));
    FAIL("expected AllTreatedOrAllControl");
  } catch (const Error &e) {
    CHECK(e.code() == ErrorCode::AllTreatedOrAllControl);
  }
  try {
    permutation_test(vec({1, 2, 3}), vec({1, 0}), plan_for(StatisticKind::DiffMeans));
    FAIL("expected InvalidArgument");
  } catch (const Error &e) {
    CHECK(e.code() == ErrorCode::InvalidArgument);
  }
}
