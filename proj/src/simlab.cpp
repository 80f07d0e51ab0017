#include "rdperm/simlab.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include <Eigen/QR>

#include "rdperm/errors.hpp"
#include "rdperm/rng.hpp"

namespace rdperm {

double evaluate_polynomial(const std::vector<double> &coefficients, double x) {
  double acc = 0.0;
  for (auto it = coefficients.rbegin(); it != coefficients.rend(); ++it)
    acc = acc * x + *it;
  return acc;
}

namespace {

void validate(const DgpSpec &spec) {
  const auto &rd = spec.running;
  if (spec.n < 2)
    throw Error(ErrorCode::InvalidArgument, "dgp needs n >= 2");
  if (!(rd.hi > rd.lo))
    throw Error(ErrorCode::InvalidArgument, "running distribution needs hi > lo");
  if (rd.kind == RunningDistribution::Kind::DiscreteGrid && !(rd.step > 0.0))
    throw Error(ErrorCode::InvalidArgument, "discrete grid needs step > 0");
  if (!(spec.noise_sd >= 0.0) || !(spec.effect.eta_sd >= 0.0))
    throw Error(ErrorCode::InvalidArgument, "standard deviations must be nonnegative");
  for (const auto &c : spec.covariates)
    if (!(c.noise_sd >= 0.0))
      throw Error(ErrorCode::InvalidArgument, "covariate noise must be nonnegative");
  if (spec.manipulation) {
    const auto &m = *spec.manipulation;
    if (!(m.fraction >= 0.0 && m.fraction <= 1.0) || !(m.source_radius >= 0.0))
      throw Error(ErrorCode::InvalidArgument, "manipulation needs fraction in [0, 1] and radius >= 0");
  }
}

std::vector<double> draw_running(const RunningDistribution &rd, Index n, CounterRng &rng) {
  std::vector<double> r(static_cast<std::size_t>(n));
  if (rd.kind == RunningDistribution::Kind::Uniform) {
    for (auto &v : r)
      v = rng.uniform(rd.lo, rd.hi);
    return r;
  }
  const auto points = static_cast<std::size_t>(std::llround((rd.hi - rd.lo) / rd.step)) + 1;
  std::vector<double> cdf(points, 1.0);
  if (!rd.weights.empty()) {
    if (rd.weights.size() != points)
      throw Error(ErrorCode::InvalidArgument, "grid weights must match the number of lattice points");
    cdf = rd.weights;
  }
  for (double w : cdf)
    if (!(w >= 0.0))
      throw Error(ErrorCode::InvalidArgument, "grid weights must be nonnegative");
  std::partial_sum(cdf.begin(), cdf.end(), cdf.begin());
  if (!(cdf.back() > 0.0))
    throw Error(ErrorCode::InvalidArgument, "grid weights sum to zero");
  for (auto &v : r) {
    const double u = rng.uniform() * cdf.back();
    const auto k = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    // Round to 12 decimals so lattice values print and compare cleanly.
    v = std::round((rd.lo + static_cast<double>(std::min(k, points - 1)) * rd.step) * 1e12) / 1e12;
  }
  return r;
}

template <class Fn> void parallel_for(std::size_t count, unsigned threads, Fn &&fn) {
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), count));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i)
      fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < count; i += workers)
        fn(i);
    });
  for (auto &t : pool)
    t.join();
}

double binomial_se(double p, std::size_t n) {
  return std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

WindowSpec replicate_window(const UnitFrame &frame, const InferenceConfig &config) {
  if (config.balanced_left)
    return balanced_asymmetric_window(frame, *config.balanced_left, config.window);
  return config.window;
}

std::optional<GridSpec> resized_grid(const WindowData &data, const InferenceConfig &config,
                                     const PermutationEngine &engine) {
  if (config.grid_points == 201)
    return std::nullopt;
  if (config.grid_points < 3)
    throw Error(ErrorCode::InvalidArgument, "grid needs at least 3 points");
  GridSpec g = default_grid(data, config.model, hl_estimate(data, config.model, engine));
  const double half = (g.hi - g.lo) / 2.0;
  g.step = 2.0 * half / static_cast<double>(config.grid_points - 1);
  return g;
}

} // namespace

UnitFrame generate(const DgpSpec &spec, std::uint64_t seed) {
  validate(spec);
  CounterRng rng(seed, 0);
  const Index n = spec.n;
  const std::vector<double> r0 = draw_running(spec.running, n, rng);
  Vector yc(n), tau(n);
  for (Index i = 0; i < n; ++i) {
    const double x = r0[static_cast<std::size_t>(i)];
    yc[i] = evaluate_polynomial(spec.yc_poly, x) + spec.noise_sd * rng.normal();
    tau[i] = spec.effect.tau0;
    if (spec.effect.kind == EffectModel::Kind::RandomAroundMean)
      tau[i] += spec.effect.eta_sd * rng.normal();
  }
  std::vector<Covariate> covariates;
  for (const auto &c : spec.covariates) {
    Covariate cov{c.name, c.binary ? CovariateKind::Binary : CovariateKind::Continuous, Vector(n)};
    for (Index i = 0; i < n; ++i) {
      const double mean = evaluate_polynomial(c.mean_poly, r0[static_cast<std::size_t>(i)]);
      if (c.binary) {
        const double p = 1.0 / (1.0 + std::exp(-(mean + c.noise_sd * rng.normal())));
        cov.values[i] = rng.uniform() < p ? 1.0 : 0.0;
      } else {
        cov.values[i] = mean + c.noise_sd * rng.normal();
      }
    }
    covariates.push_back(std::move(cov));
  }

  std::vector<double> r = r0;
  if (spec.manipulation) {
    const auto &m = *spec.manipulation;
    std::vector<std::size_t> pool;
    const double tol = 1e-9 * (1.0 + std::abs(m.source_value));
    for (std::size_t i = 0; i < r.size(); ++i)
      if (std::abs(r[i] - m.source_value) <= m.source_radius + tol && r[i] != m.heap_value)
        pool.push_back(i);
    std::stable_sort(pool.begin(), pool.end(), [&](auto a, auto b) {
      return std::abs(r[a] - m.source_value) < std::abs(r[b] - m.source_value);
    });
    const auto moved = std::min<std::size_t>(
        pool.size(), static_cast<std::size_t>(std::llround(m.fraction * static_cast<double>(n))));
    for (std::size_t k = 0; k < moved; ++k)
      r[pool[k]] = m.heap_value;
  }

  Vector rv(n), y(n);
  for (Index i = 0; i < n; ++i) {
    rv[i] = r[static_cast<std::size_t>(i)];
    const bool treated = is_treated(rv[i], spec.cutoff, spec.direction);
    y[i] = yc[i] + (treated ? tau[i] : 0.0);
  }
  return UnitFrame(std::move(rv), std::move(y), std::move(covariates), spec.cutoff, spec.direction);
}

std::uint64_t replicate_data_seed(std::uint64_t seed, std::size_t replicate) {
  return derive_seed(seed, 2 * static_cast<std::uint64_t>(replicate));
}

std::uint64_t replicate_plan_seed(std::uint64_t seed, std::size_t replicate) {
  return derive_seed(seed, 2 * static_cast<std::uint64_t>(replicate) + 1);
}

ExperimentReport run_size_experiment(const DgpSpec &spec, const InferenceConfig &config,
                                     std::size_t n_seeds, double alpha, std::uint64_t seed,
                                     unsigned threads) {
  if (n_seeds == 0)
    throw Error(ErrorCode::InvalidArgument, "need at least one replicate");
  std::vector<char> reject(n_seeds, 0);
  std::vector<double> pvals(n_seeds, 1.0);
  parallel_for(n_seeds, threads, [&](std::size_t i) {
    const UnitFrame frame = generate(spec, replicate_data_seed(seed, i));
    const WindowData data = window_data(frame, replicate_window(frame, config));
    PermutationPlan plan = config.plan;
    plan.seed = replicate_plan_seed(seed, i);
    plan.threads = 1;
    const PermutationEngine engine(data.n(), data.n_treated, plan, false);
    const TestResult t = test_effect(data, config.model, EffectHypothesis{0.0}, engine);
    pvals[i] = t.p_value;
    reject[i] = t.p_value <= alpha;
  });
  ExperimentReport rep;
  rep.name = "size";
  rep.n_seeds = n_seeds;
  rep.metric = "rejection_rate";
  rep.value = static_cast<double>(std::count(reject.begin(), reject.end(), 1)) / static_cast<double>(n_seeds);
  rep.mc_stderr = binomial_se(alpha, n_seeds);
  rep.lower = alpha - 3.0 * rep.mc_stderr;
  rep.upper = alpha + 3.0 * rep.mc_stderr;
  rep.pass = rep.value >= rep.lower && rep.value <= rep.upper;
  rep.details.emplace_back("alpha", alpha);
  rep.details.emplace_back("mean_p", std::accumulate(pvals.begin(), pvals.end(), 0.0) / static_cast<double>(n_seeds));
  return rep;
}

ExperimentReport run_coverage_experiment(const DgpSpec &spec, const InferenceConfig &config,
                                         std::size_t n_seeds, double level, std::uint64_t seed,
                                         unsigned threads) {
  if (n_seeds == 0)
    throw Error(ErrorCode::InvalidArgument, "need at least one replicate");
  const double truth = spec.effect.tau0;
  std::vector<char> covered(n_seeds, 0), empty(n_seeds, 0), unbounded(n_seeds, 0);
  std::vector<double> width(n_seeds, 0.0), n_treated_share(n_seeds, 0.0);
  parallel_for(n_seeds, threads, [&](std::size_t i) {
    const UnitFrame frame = generate(spec, replicate_data_seed(seed, i));
    const WindowData data = window_data(frame, replicate_window(frame, config));
    PermutationPlan plan = config.plan;
    plan.seed = replicate_plan_seed(seed, i);
    plan.threads = 1;
    std::optional<GridSpec> grid;
    if (config.grid_points != 201) {
      const PermutationEngine engine(data.n(), data.n_treated, plan, false);
      grid = resized_grid(data, config, engine);
    }
    const EffectInference inf = invert_ci(data, config.model, plan, 1.0 - level, grid);
    n_treated_share[i] = static_cast<double>(data.n_treated) / static_cast<double>(data.n());
    if (inf.ci.empty) {
      empty[i] = 1;
      return;
    }
    const bool lower_ok = !inf.ci.lower_bounded || inf.ci.lower <= truth;
    const bool upper_ok = !inf.ci.upper_bounded || inf.ci.upper >= truth;
    covered[i] = lower_ok && upper_ok;
    unbounded[i] = !inf.ci.lower_bounded || !inf.ci.upper_bounded;
    width[i] = inf.ci.upper - inf.ci.lower;
  });
  ExperimentReport rep;
  rep.name = "coverage";
  rep.n_seeds = n_seeds;
  rep.metric = "coverage";
  rep.value = static_cast<double>(std::count(covered.begin(), covered.end(), 1)) / static_cast<double>(n_seeds);
  rep.mc_stderr = binomial_se(level, n_seeds);
  rep.lower = level - 3.0 * rep.mc_stderr;
  rep.upper = 1.0;
  rep.pass = rep.value >= rep.lower;
  rep.details.emplace_back("level", level);
  rep.details.emplace_back("true_effect", truth);
  rep.details.emplace_back("empty_sets", static_cast<double>(std::count(empty.begin(), empty.end(), 1)));
  rep.details.emplace_back("unbounded_sets", static_cast<double>(std::count(unbounded.begin(), unbounded.end(), 1)));
  rep.details.emplace_back("mean_width", std::accumulate(width.begin(), width.end(), 0.0) / static_cast<double>(n_seeds));
  rep.details.emplace_back("mean_treated_share",
                           std::accumulate(n_treated_share.begin(), n_treated_share.end(), 0.0) / static_cast<double>(n_seeds));
  return rep;
}

ExperimentReport run_prop2_check(std::size_t n_instances, std::uint64_t seed) {
  if (n_instances == 0)
    throw Error(ErrorCode::InvalidArgument, "need at least one instance");
  double worst = 0.0;
  std::size_t evaluated = 0;
  for (std::size_t i = 0; i < n_instances; ++i) {
    CounterRng rng(seed, i);
    const auto n = static_cast<Index>(20 + rng.bounded(181));
    const double cutoff = rng.uniform(-0.3, 0.3);
    const double slope = rng.uniform(-2.0, 2.0), tau = rng.uniform(-1.0, 1.0), sd = rng.uniform(0.1, 2.0);
    Vector r(n), y(n), z(n);
    for (Index j = 0; j < n; ++j) {
      r[j] = rng.uniform(-1.0, 1.0);
      z[j] = r[j] <= cutoff ? 1.0 : 0.0;
      y[j] = 0.5 + slope * r[j] + tau * z[j] + sd * rng.normal();
    }
    if (z.sum() < 2 || z.sum() > static_cast<double>(n) - 2)
      continue;
    WindowData data;
    data.r = r;
    data.y = y;
    data.z = z;
    data.n_treated = static_cast<Index>(z.sum());
    data.n_control = n - data.n_treated;
    PermutationPlan plan;
    plan.statistic.kind = StatisticKind::SumCross;
    plan.max_exact = 0;
    plan.draws = 1;
    const PermutationEngine engine(n, data.n_treated, plan, false);
    const double hl = hl_estimate(data, ModelSpec{}, engine);

    Matrix x(n, 3);
    x.col(0).setOnes();
    x.col(1) = r;
    x.col(2) = z;
    const Vector beta = x.householderQr().solve(y);
    worst = std::max(worst, std::abs(hl - beta[2]) / std::max(1.0, std::abs(beta[2])));
    ++evaluated;
  }
  ExperimentReport rep;
  rep.name = "prop2";
  rep.n_seeds = evaluated;
  rep.metric = "max_relative_difference";
  rep.value = worst;
  rep.upper = 1e-8;
  rep.pass = evaluated > 0 && worst <= 1e-8;
  return rep;
}

ExperimentReport run_prop1_check(const DgpSpec &spec, const ModelSpec &model, std::size_t n_seeds,
                                 std::uint64_t seed) {
  if (n_seeds < 2)
    throw Error(ErrorCode::InvalidArgument, "need at least two replicates");
  std::vector<double> diffs(n_seeds);
  for (std::size_t i = 0; i < n_seeds; ++i) {
    const UnitFrame frame = generate(spec, replicate_data_seed(seed, i));
    const WindowData data = window_data(frame, WindowSpec{});
    const Vector e = hypothesis_residuals(data, model, spec.effect.tau0);
    diffs[i] = raw_statistic(StatisticKind::DiffMeans, e, data.z);
  }
  const double mean = std::accumulate(diffs.begin(), diffs.end(), 0.0) / static_cast<double>(n_seeds);
  double ss = 0.0;
  for (double d : diffs)
    ss += (d - mean) * (d - mean);
  ExperimentReport rep;
  rep.name = "prop1";
  rep.n_seeds = n_seeds;
  rep.metric = "mean_residual_difference";
  rep.value = mean;
  rep.mc_stderr = std::sqrt(ss / static_cast<double>(n_seeds - 1) / static_cast<double>(n_seeds));
  rep.lower = -3.0 * rep.mc_stderr;
  rep.upper = 3.0 * rep.mc_stderr;
  rep.pass = std::abs(mean) <= rep.upper;
  return rep;
}

ExperimentReport run_fwer_experiment(const DgpSpec &spec, const SweepConfig &config,
                                     std::size_t n_seeds, std::uint64_t seed, unsigned threads) {
  if (n_seeds == 0 || config.candidates.empty())
    throw Error(ErrorCode::InvalidArgument, "need replicates and candidates");
  double max_true = -std::numeric_limits<double>::infinity();
  for (double b : config.candidates)
    if (!config.valid_below || b <= *config.valid_below)
      max_true = std::max(max_true, b);
  std::vector<char> false_reject(n_seeds, 0);
  std::vector<char> none(n_seeds, 0);
  parallel_for(n_seeds, threads, [&](std::size_t i) {
    const UnitFrame frame = generate(spec, replicate_data_seed(seed, i));
    PermutationPlan plan;
    plan.seed = replicate_plan_seed(seed, i);
    SweepOptions opts;
    opts.run_mccrary = false;
    const BandwidthSweep sweep = select_bandwidth(
        frame, config.candidates, default_covariate_models(frame, config.covariate_model),
        config.alpha_f, plan, opts);
    // Testing in order rejects exactly the candidates above b*.
    none[i] = !sweep.b_star;
    if (std::isfinite(max_true))
      false_reject[i] = !sweep.b_star || *sweep.b_star < max_true;
  });
  ExperimentReport rep;
  rep.name = "fwer";
  rep.n_seeds = n_seeds;
  rep.metric = "familywise_error_rate";
  rep.value = static_cast<double>(std::count(false_reject.begin(), false_reject.end(), 1)) / static_cast<double>(n_seeds);
  rep.mc_stderr = binomial_se(config.alpha_f, n_seeds);
  rep.lower = 0.0;
  rep.upper = config.alpha_f + 3.0 * rep.mc_stderr;
  rep.pass = rep.value <= rep.upper;
  rep.details.emplace_back("alpha_f", config.alpha_f);
  rep.details.emplace_back("all_rejected", static_cast<double>(std::count(none.begin(), none.end(), 1)));
  return rep;
}

ExperimentReport run_balance_size_experiment(const DgpSpec &spec, const BalanceSizeConfig &config,
                                             std::size_t n_seeds, std::uint64_t seed,
                                             unsigned threads) {
  if (n_seeds == 0)
    throw Error(ErrorCode::InvalidArgument, "need at least one replicate");
  const std::size_t mc = std::min(config.mc_instances, n_seeds);
  std::vector<double> p_chi2(n_seeds), gap(mc, 0.0);
  std::vector<char> agree(mc, 0);
  parallel_for(n_seeds, threads, [&](std::size_t i) {
    const UnitFrame frame = generate(spec, replicate_data_seed(seed, i));
    PermutationPlan plan;
    plan.seed = replicate_plan_seed(seed, i);
    plan.draws = config.mc_draws;
    plan.max_exact = 0;
    BalanceOptions opts;
    opts.permutation = i < mc;
    const BalanceResult res = balance_test(frame, WindowSpec{}, default_covariate_models(frame, config.continuous_model),
                                           plan, opts);
    p_chi2[i] = res.p_chi2;
    if (i < mc) {
      const double diff = std::abs(res.p_chi2 - *res.p_mc);
      const double se = std::max(*res.mc_stderr, 1.0 / static_cast<double>(config.mc_draws));
      gap[i] = diff / se;
      agree[i] = diff <= 4.0 * se;
    }
  });
  const auto [d, p] = ks_uniform(p_chi2);
  const auto agreed = static_cast<std::size_t>(std::count(agree.begin(), agree.end(), 1));
  ExperimentReport rep;
  rep.name = "balance_size";
  rep.n_seeds = n_seeds;
  rep.metric = "ks_p_value";
  rep.value = p;
  rep.lower = config.ks_alpha;
  rep.upper = 1.0;
  rep.pass = p > config.ks_alpha && agreed == mc;
  rep.details.emplace_back("ks_statistic", d);
  rep.details.emplace_back("mc_instances", static_cast<double>(mc));
  rep.details.emplace_back("mc_agreeing", static_cast<double>(agreed));
  rep.details.emplace_back("max_gap_in_se", gap.empty() ? 0.0 : *std::max_element(gap.begin(), gap.end()));
  return rep;
}

ExperimentReport run_mccrary_experiment(const DgpSpec &spec, const McCraryOptions &options,
                                        double alpha, std::size_t n_seeds, std::uint64_t seed,
                                        bool expect_power, double min_power, unsigned threads) {
  if (n_seeds == 0)
    throw Error(ErrorCode::InvalidArgument, "need at least one replicate");
  std::vector<char> reject(n_seeds, 0), failed(n_seeds, 0);
  parallel_for(n_seeds, threads, [&](std::size_t i) {
    const UnitFrame frame = generate(spec, replicate_data_seed(seed, i));
    try {
      const McCraryResult res = mccrary_test(frame, options);
      reject[i] = res.defined && res.p_value <= alpha;
      failed[i] = !res.defined;
    } catch (const Error &) {
      failed[i] = 1;
    }
  });
  ExperimentReport rep;
  rep.name = expect_power ? "mccrary_power" : "mccrary_size";
  rep.n_seeds = n_seeds;
  rep.metric = "rejection_rate";
  rep.value = static_cast<double>(std::count(reject.begin(), reject.end(), 1)) / static_cast<double>(n_seeds);
  if (expect_power) {
    rep.mc_stderr = binomial_se(rep.value, n_seeds);
    rep.lower = min_power;
    rep.upper = 1.0;
    rep.pass = rep.value >= min_power;
  } else {
    rep.mc_stderr = binomial_se(alpha, n_seeds);
    rep.lower = alpha - 3.0 * rep.mc_stderr;
    rep.upper = alpha + 3.0 * rep.mc_stderr;
    rep.pass = rep.value >= rep.lower && rep.value <= rep.upper;
  }
  rep.details.emplace_back("alpha", alpha);
  rep.details.emplace_back("undefined_or_failed", static_cast<double>(std::count(failed.begin(), failed.end(), 1)));
  return rep;
}

std::pair<double, double> ks_uniform(std::vector<double> sample) {
  if (sample.empty())
    throw Error(ErrorCode::InvalidArgument, "empty sample");
  std::sort(sample.begin(), sample.end());
  const auto n = static_cast<double>(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double x = std::clamp(sample[i], 0.0, 1.0);
    d = std::max({d, static_cast<double>(i + 1) / n - x, x - static_cast<double>(i) / n});
  }
  // Kolmogorov limiting distribution with Stephens' small-sample correction.
  const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
  if (lambda < 0.3)
    return {d, 1.0};
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    p += (k % 2 ? 2.0 : -2.0) * term;
    if (term < 1e-16)
      break;
  }
  return {d, std::clamp(p, 0.0, 1.0)};
}

} // namespace rdperm
