#include <bit>
#include <cmath>

#include "doctest.h"
#include "generators.hpp"
#include "rdperm/errors.hpp"
#include "rdperm/spectests.hpp"

using namespace rdperm;

namespace {

template <class Fn> ErrorCode code_of(Fn &&fn) {
  try {
    fn();
  } catch (const Error &e) {
    return e.code();
  }
  return ErrorCode::Config; // sentinel: nothing thrown
}

PermutationPlan plan_with(std::uint64_t seed, std::uint64_t draws = 2000) {
  PermutationPlan p;
  p.seed = seed;
  p.draws = draws;
  return p;
}

// Units on the lattice lo, lo + step, ..., hi with `copies` units per point.
Vector lattice(double lo, double hi, double step, int copies) {
  const auto points = static_cast<Index>(std::llround((hi - lo) / step)) + 1;
  Vector r(points * copies);
  for (Index p = 0; p < points; ++p)
    for (int c = 0; c < copies; ++c)
      r[p * copies + c] = lo + static_cast<double>(p) * step;
  return r;
}

UnitFrame frame_of(const Vector &r, std::vector<Covariate> covs = {}) {
  return UnitFrame(r, Vector::Zero(r.size()), std::move(covs), 0.0, Direction::TreatedAtOrBelow);
}

} // namespace

TEST_CASE("randomization covariance equals full enumeration") {
  CounterRng rng(89);
  const Index n = 10, nt = 4;
  Matrix e(n, 2);
  e.col(0) = gen::normal_vector(rng, n);
  e.col(1) = 0.5 * e.col(0) + gen::normal_vector(rng, n);
  Matrix acc = Matrix::Zero(2, 2);
  Vector mean = Vector::Zero(2);
  double count = 0;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (std::popcount(mask) != nt)
      continue;
    Vector z(n);
    for (Index i = 0; i < n; ++i)
      z[i] = (mask >> i) & 1u ? 1.0 : 0.0;
    const Vector d = e.transpose() * z / 4.0 - e.transpose() * (Vector::Ones(n) - z) / 6.0;
    acc += d * d.transpose();
    mean += d;
    count += 1;
  }
  mean /= count;
  const Matrix oracle = acc / count - mean * mean.transpose();
  const Matrix sigma = randomization_covariance(e, nt);
  CHECK((sigma - oracle).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(mean.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("pseudo-inverse drops null directions") {
  Matrix s(2, 2);
  s << 1, 2, 2, 4;
  int rank = 0;
  const Matrix p = symmetric_pinv(s, &rank);
  CHECK(rank == 1);
  CHECK((s * p * s - s).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("chi-square tail at two degrees of freedom") {
  CounterRng rng(97);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix e(40, 2);
    e.col(0) = gen::normal_vector(rng, 40);
    e.col(1) = gen::normal_vector(rng, 40);
    const Vector z = gen::assignment(rng, 40, 17);
    const BalanceResult b = balance_from_residuals(e, z, {"a", "b"}, plan_with(1));
    CHECK(b.df == 2);
    CHECK(b.p_chi2 == doctest::Approx(std::exp(-b.combined_stat / 2.0)).epsilon(1e-10));
  }
}

TEST_CASE("constant covariates contribute nothing") {
  Matrix e = Matrix::Zero(8, 1);
  const Vector z = (Vector(8) << 1, 1, 1, 0, 0, 0, 0, 1).finished();
  const BalanceResult direct = balance_from_residuals(e, z, {"c"}, plan_with(1));
  CHECK(direct.combined_stat == 0.0);
  CHECK(direct.df == 0);
  CHECK(direct.p_chi2 == 1.0);

  CounterRng rng(101);
  const Vector r = gen::uniform_vector(rng, 50, -1, 1);
  const UnitFrame f = frame_of(r, {{"flat", CovariateKind::Continuous, Vector::Constant(50, 3.0)}});
  const BalanceResult b = balance_test(f, WindowSpec{}, {{"flat", ModelSpec{}}}, plan_with(1));
  CHECK(b.combined_stat == 0.0);
  CHECK(b.p_chi2 == 1.0);
  REQUIRE(b.covariates.size() == 1);
  CHECK(b.covariates[0].dropped);
  CHECK_FALSE(b.warnings.empty());
}

TEST_CASE("collinear covariates reduce the degrees of freedom") {
  CounterRng rng(103);
  const Vector r = gen::uniform_vector(rng, 80, -1, 1);
  const Vector x = gen::normal_vector(rng, 80);
  const UnitFrame f = frame_of(r, {{"x", CovariateKind::Continuous, x},
                                   {"x2", CovariateKind::Continuous, (2.0 * x).eval()},
                                   {"w", CovariateKind::Continuous, gen::normal_vector(rng, 80)}});
  const auto specs = default_covariate_models(f, ModelSpec{});
  const BalanceResult b = balance_test(f, WindowSpec{}, specs, plan_with(1));
  CHECK(b.df == 2);
}

TEST_CASE("property: balance is invariant to affine rescaling and row order") {
  CounterRng rng(107);
  for (int trial = 0; trial < 25; ++trial) {
    CAPTURE(trial);
    const UnitFrame f = gen::linear_frame(rng, gen::size_between(rng, 30, 200), 0.0, 3);
    std::vector<Covariate> scaled = f.covariates();
    const double a = rng.uniform(0.1, 10.0), c = rng.uniform(-50, 50);
    scaled[1].values = (a * scaled[1].values.array() + c).matrix();
    const UnitFrame g(f.r(), f.y(), scaled, f.cutoff(), f.direction());
    const auto specs = default_covariate_models(f, ModelSpec{ModelFamily::Quadratic});
    const WindowSpec w = WindowSpec::symmetric(0.8);
    const BalanceResult base = balance_test(f, w, specs, plan_with(9));
    const BalanceResult rescaled = balance_test(g, w, specs, plan_with(9));
    CHECK(rescaled.combined_stat == doctest::Approx(base.combined_stat).epsilon(1e-8));
    const BalanceResult reordered = balance_test(gen::shuffled(f, rng), w, specs, plan_with(9));
    CHECK(reordered.combined_stat == doctest::Approx(base.combined_stat).epsilon(1e-8));
    CHECK(reordered.p_chi2 == doctest::Approx(base.p_chi2).epsilon(1e-8));
  }
}

TEST_CASE("per-covariate summaries") {
  CounterRng rng(109);
  const Index n = 60;
  Matrix e(n, 1);
  e.col(0) = gen::normal_vector(rng, n);
  const Vector z = gen::assignment(rng, n, 25);
  const BalanceResult b = balance_from_residuals(e, z, {"x"}, plan_with(1));
  const double var = randomization_covariance(e, 25)(0, 0);
  CHECK(b.covariates[0].z == doctest::Approx(b.covariates[0].difference / std::sqrt(var)));
  CHECK(b.covariates[0].z * b.covariates[0].z == doctest::Approx(b.combined_stat));
  const double sd = std::sqrt((e.array() - e.mean()).square().sum() / (n - 1));
  CHECK(b.covariates[0].std_difference == doctest::Approx(b.covariates[0].difference / sd));
}

TEST_CASE("permutation and chi-square balance p-values agree") {
  CounterRng rng(113);
  for (int trial = 0; trial < 5; ++trial) {
    Matrix e(200, 3);
    for (Index j = 0; j < 3; ++j)
      e.col(j) = gen::normal_vector(rng, 200);
    const Vector z = gen::assignment(rng, 200, 90);
    const BalanceResult b = balance_from_residuals(e, z, {"a", "b", "c"}, plan_with(11, 20'000), {true});
    REQUIRE(b.p_mc.has_value());
    CHECK(std::abs(*b.p_mc - b.p_chi2) <= 4.0 * *b.mc_stderr + 0.01);
  }
}

TEST_CASE("balance errors") {
  CounterRng rng(127);
  const UnitFrame f = gen::linear_frame(rng, 30, 0.0);
  CHECK(code_of([&] { balance_test(f, WindowSpec{}, {}, plan_with(1)); }) == ErrorCode::NoCovariates);
}

TEST_CASE("density test: equal counts give theta zero") {
  const UnitFrame f = frame_of(lattice(-1.0, 1.0, 0.05, 7));
  const McCraryResult m = mccrary_test(f);
  CHECK(m.discrete);
  CHECK(m.defined);
  CHECK(std::abs(m.theta) < 1e-9);
  CHECK(m.p_value == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("density test: bins never straddle the cutoff") {
  CounterRng rng(131);
  const Vector r = gen::uniform_vector(rng, 3000, -1.3, 0.9);
  const UnitFrame f(r, Vector::Zero(3000), {}, 0.137, Direction::TreatedAtOrBelow);
  McCraryOptions opt;
  opt.bin_width = 0.05;
  const McCraryResult m = mccrary_test(f, opt);
  CHECK_FALSE(m.discrete);
  Index total = 0;
  for (const auto &b : m.bins) {
    const double k = (b.midpoint - 0.137) / 0.05 - 0.5;
    CHECK(std::abs(k - std::round(k)) < 1e-9);
    CHECK(b.lower_side == (b.midpoint < 0.137));
    total += b.count;
  }
  CHECK(total == 3000);
  // Count of the bin just above the cutoff, by direct computation.
  Index direct = 0;
  for (Index i = 0; i < r.size(); ++i)
    direct += r[i] > 0.137 && r[i] <= 0.187;
  for (const auto &b : m.bins)
    if (std::abs(b.midpoint - 0.162) < 1e-9)
      CHECK(b.count == direct);
}

TEST_CASE("density test: duplicating every unit keeps theta and shrinks se") {
  CounterRng rng(137);
  const Vector r = gen::uniform_vector(rng, 2000, -1, 1);
  Vector twice(4000);
  twice << r, r;
  McCraryOptions opt;
  opt.bin_width = 0.04;
  opt.bandwidth = 0.5;
  const McCraryResult a = mccrary_test(frame_of(r), opt);
  const McCraryResult b = mccrary_test(frame_of(twice), opt);
  CHECK(b.theta == doctest::Approx(a.theta).epsilon(1e-10));
  CHECK(b.se == doctest::Approx(a.se / std::sqrt(2.0)).epsilon(1e-10));
}

TEST_CASE("density test: a heap at the cutoff is detected") {
  Vector base = lattice(-1.0, 1.0, 0.01, 20);
  Vector r(base.size() + 200);
  r << base, Vector::Zero(200);
  const McCraryResult m = mccrary_test(frame_of(r));
  CHECK(m.discrete);
  CHECK(m.theta < 0.0);
  CHECK(m.p_value < 1e-3);

  WindowSpec donut;
  donut.exclusions = {0.0};
  CHECK(mccrary_test(frame_of(r), donut).p_value > 0.05);
}

TEST_CASE("density test errors") {
  CounterRng rng(139);
  const Vector below = gen::uniform_vector(rng, 100, -1, -0.1);
  CHECK(code_of([&] { mccrary_test(frame_of(below)); }) == ErrorCode::EmptySide);
  const Vector r = gen::uniform_vector(rng, 100, -1, 1);
  McCraryOptions coarse;
  coarse.bin_width = 0.25;
  CHECK(code_of([&] { mccrary_test(frame_of(r), coarse); }) == ErrorCode::InsufficientBins);
}

TEST_CASE("lattice detection") {
  std::vector<double> v;
  for (int i = 0; i < 400; ++i)
    v.push_back(-1.0 + 0.02 * (i % 50) * 2);
  CHECK(detect_lattice(v).has_value());
  CHECK(*detect_lattice(v) == doctest::Approx(0.04));
  CounterRng rng(149);
  const Vector u = gen::uniform_vector(rng, 400, 0, 1);
  CHECK_FALSE(detect_lattice(std::vector<double>(u.data(), u.data() + 400)).has_value());
  CHECK(default_bin_width({0.0, 2.0}) == doctest::Approx(2.0 * std::sqrt(2.0) / std::sqrt(2.0)));
}
