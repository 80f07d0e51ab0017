#include "rdperm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rdperm/errors.hpp"

namespace rdperm {

std::vector<double> GridSpec::points() const {
  if (!(step > 0.0) || !std::isfinite(lo) || !std::isfinite(hi) || hi < lo)
    throw Error(ErrorCode::InvalidArgument, "grid needs finite lo <= hi and step > 0");
  const auto count = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
  if (count > 1'000'000)
    throw Error(ErrorCode::InvalidArgument, "grid has too many points");
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i)
    out[i] = lo + static_cast<double>(i) * step;
  return out;
}

namespace {

bool linear_in_tau(const ModelSpec &model) {
  return is_ols(model.family) && model.transform == ResponseTransform::Identity;
}

bool linear_statistic(StatisticKind kind) { return kind != StatisticKind::RankSumStudentized; }

StatisticKind signed_kind(StatisticKind kind) {
  return kind == StatisticKind::AbsDiffMeans ? StatisticKind::DiffMeans : kind;
}

double median(std::vector<double> v) {
  if (v.empty())
    return 0.0;
  const auto mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0)
    m = (m + *std::max_element(v.begin(), v.begin() + static_cast<long>(mid))) / 2.0;
  return m;
}

double mad_scale(const Vector &e) {
  std::vector<double> v(e.data(), e.data() + e.size());
  const double m = median(v);
  for (auto &x : v)
    x = std::abs(x - m);
  return 1.4826 * median(v);
}

// A fit that reproduces the reconstructed outcome up to rounding leaves
// residuals at the 1e-16 level; ranking those would be ranking noise.
constexpr double kExactFit = 1e-10;

bool exact_fit(const Vector &residuals, const Vector &response) {
  return residuals.cwiseAbs().maxCoeff() <= kExactFit * (1.0 + response.cwiseAbs().maxCoeff());
}

// Linear statistics of v = a - tau * b are affine in tau for every
// assignment, so one pass over the sample records (t(a), t(b)) per assignment
// and each grid point is then a cheap count.
class AffinePath {
public:
  AffinePath(const WindowData &data, const Vector &a, const Vector &b, const AssignmentSample &sample,
             const Statistic &statistic)
      : a_(a), b_(b), y_(data.y), z_(data.z), statistic_(statistic), nt_(data.n_treated),
        method_(sample.method()) {
    const StatisticKind kind = signed_kind(statistic.kind);
    sum_cross_ = kind == StatisticKind::SumCross;
    fold_ = statistic.kind == StatisticKind::AbsDiffMeans || statistic.sidedness == Sidedness::TwoSided;
    const double n = static_cast<double>(data.n());
    const double nt = static_cast<double>(nt_), nc = n - nt;
    const double sa = a.sum(), sb = b.sum();
    auto stat = [&](double treated_a, double sum) {
      return sum_cross_ ? treated_a : treated_a / nt - (sum - treated_a) / nc;
    };
    center_a_ = sum_cross_ ? nt / n * sa : 0.0;
    center_b_ = sum_cross_ ? nt / n * sb : 0.0;
    ta_.reserve(static_cast<std::size_t>(sample.size()));
    tb_.reserve(static_cast<std::size_t>(sample.size()));
    std::vector<std::uint32_t> scratch;
    for (std::uint64_t blk = 0; blk < sample.block_count(); ++blk)
      sample.visit_block(blk, scratch, [&](const Assignment &asg) {
        double xa = 0.0, xb = 0.0;
        for (auto i : asg.chosen) {
          xa += a[i];
          xb += b[i];
        }
        if (!asg.chosen_treated) {
          xa = sa - xa;
          xb = sb - xb;
        }
        ta_.push_back(stat(xa, sa));
        tb_.push_back(stat(xb, sb));
      });
    double xa = 0.0, xb = 0.0;
    for (Index i = 0; i < z_.size(); ++i)
      if (z_[i] == 1.0) {
        xa += a[i];
        xb += b[i];
      }
    obs_a_ = stat(xa, sa);
    obs_b_ = stat(xb, sb);
  }

  TestResult test(double tau) const {
    TestResult r;
    r.method = method_;
    r.assignments = ta_.size();
    const Vector v = a_ - tau * b_;
    const double center = center_a_ - tau * center_b_;
    auto value = [&](double ta, double tb) {
      const double t = ta - tau * tb;
      return fold_ ? std::abs(t - center) : t;
    };
    r.observed = value(obs_a_, obs_b_);
    if (v.maxCoeff() == v.minCoeff() || exact_fit(v, y_ - tau * z_)) {
      r.p_value = 1.0;
      r.null_mean = fold_ ? r.observed : center;
      return r;
    }
    double spread = (v.array() - v.mean()).abs().maxCoeff();
    if (sum_cross_)
      spread *= static_cast<double>(nt_);
    const double threshold = r.observed - 1e-9 * (std::abs(r.observed) + spread);
    std::uint64_t hits = 0;
    double sum = 0.0;
    for (std::size_t k = 0; k < ta_.size(); ++k) {
      const double t = value(ta_[k], tb_[k]);
      hits += t >= threshold ? 1 : 0;
      sum += t;
    }
    const double total = static_cast<double>(ta_.size());
    if (method_ == Method::Exact) {
      r.p_value = static_cast<double>(hits) / total;
    } else {
      r.p_value = (1.0 + static_cast<double>(hits)) / (1.0 + total);
      r.mc_stderr = std::sqrt(r.p_value * (1.0 - r.p_value) / total);
    }
    r.null_mean = fold_ ? sum / total : center;
    return r;
  }

private:
  Vector a_, b_, y_, z_;
  Statistic statistic_;
  Index nt_;
  Method method_;
  bool sum_cross_ = false;
  bool fold_ = false;
  double center_a_ = 0.0, center_b_ = 0.0;
  double obs_a_ = 0.0, obs_b_ = 0.0;
  std::vector<double> ta_, tb_;
};

PermutationEngine make_engine(const WindowData &data, const PermutationPlan &plan) {
  return PermutationEngine(data.n(), data.n_treated, plan);
}

} // namespace

Vector hypothesis_residuals(const WindowData &data, const ModelSpec &model, double tau0) {
  const Vector reconstructed = data.y - tau0 * data.z;
  Vector e = fit(model, data.r, reconstructed).residuals;
  if (exact_fit(e, reconstructed))
    e.setZero();
  return e;
}

TestResult test_effect(const WindowData &data, const ModelSpec &model, EffectHypothesis hypothesis,
                       const PermutationEngine &engine) {
  if (!std::isfinite(hypothesis.tau0))
    throw Error(ErrorCode::InvalidArgument, "tau0 must be finite");
  return engine.test(hypothesis_residuals(data, model, hypothesis.tau0), data.z);
}

TestResult test_effect(const UnitFrame &frame, const WindowSpec &window, const ModelSpec &model,
                       EffectHypothesis hypothesis, const PermutationPlan &plan) {
  const WindowData data = window_data(frame, window);
  const PermutationEngine engine(data.n(), data.n_treated, plan, false);
  return test_effect(data, model, hypothesis, engine);
}

double hl_closed_form(const WindowData &data, ModelFamily family) {
  if (!is_ols(family))
    throw Error(ErrorCode::InvalidArgument, "closed-form HL needs an OLS model");
  const Vector ez = hat_apply(family, data.r, data.z);
  const double denom = data.z.dot(ez);
  if (!(denom > 1e-12 * static_cast<double>(data.n())))
    throw Error(ErrorCode::RankDeficientDesign, "z lies in the span of the outcome model");
  return ez.dot(data.y) / denom;
}

double hl_bisection(const WindowData &data, const ModelSpec &model, const PermutationEngine &engine,
                    std::optional<GridSpec> hint) {
  const StatisticKind kind = signed_kind(engine.plan().statistic.kind);
  const Statistic signed_stat{kind, Sidedness::UpperTail};
  auto g = [&](double c) {
    const Vector e = hypothesis_residuals(data, model, c);
    if (e.maxCoeff() == e.minCoeff())
      return 0.0;
    return statistic_value(signed_stat, e, data.z) - engine.null_expectation(e, kind);
  };

  double center = 0.0, half = 0.0;
  if (hint) {
    center = (hint->lo + hint->hi) / 2.0;
    half = (hint->hi - hint->lo) / 2.0;
  } else {
    const double nt = static_cast<double>(data.n_treated), nc = static_cast<double>(data.n_control);
    center = data.y.dot(data.z) / nt - (data.y.sum() - data.y.dot(data.z)) / nc;
    const Vector e = hypothesis_residuals(data, model, center);
    half = 6.0 * mad_scale(e) * std::sqrt(1.0 / nt + 1.0 / nc);
  }
  if (!(half > 0.0) || !std::isfinite(half))
    half = std::max(1.0, std::abs(center));
  const double initial = 2.0 * half;

  double lo = center - half, hi = center + half;
  double glo = g(lo), ghi = g(hi);
  while (!(glo > 0.0 && ghi < 0.0)) {
    if (hi - lo >= 64.0 * initial)
      throw Error(ErrorCode::NoSignChange, "no sign change of the estimating function within 64x the grid width");
    const double w = hi - lo;
    if (!(glo > 0.0)) {
      lo -= w / 2.0;
      glo = g(lo);
    }
    if (!(ghi < 0.0)) {
      hi += w / 2.0;
      ghi = g(hi);
    }
  }

  constexpr double tol = 1e-6;
  // sup{c : g(c) > 0}
  double a = lo, b = hi;
  while (b - a > tol) {
    const double m = 0.5 * (a + b);
    (g(m) > 0.0 ? a : b) = m;
  }
  const double sup_pos = 0.5 * (a + b);
  // inf{c : g(c) < 0}
  a = lo;
  b = hi;
  while (b - a > tol) {
    const double m = 0.5 * (a + b);
    (g(m) < 0.0 ? b : a) = m;
  }
  const double inf_neg = 0.5 * (a + b);
  return 0.5 * (sup_pos + inf_neg);
}

double hl_estimate(const WindowData &data, const ModelSpec &model, const PermutationEngine &engine,
                   std::optional<GridSpec> hint) {
  if (engine.plan().statistic.kind == StatisticKind::SumCross && linear_in_tau(model))
    return hl_closed_form(data, model.family);
  return hl_bisection(data, model, engine, hint);
}

double hl_estimate(const UnitFrame &frame, const WindowSpec &window, const ModelSpec &model,
                   const PermutationPlan &plan) {
  const WindowData data = window_data(frame, window);
  const PermutationEngine engine(data.n(), data.n_treated, plan, false);
  return hl_estimate(data, model, engine);
}

GridSpec default_grid(const WindowData &data, const ModelSpec &model, double center) {
  const double nt = static_cast<double>(data.n_treated), nc = static_cast<double>(data.n_control);
  const Vector e = hypothesis_residuals(data, model, center);
  double scale = mad_scale(e);
  if (!(scale > 0.0)) {
    const double mean = e.mean();
    scale = std::sqrt((e.array() - mean).square().sum() / std::max(1.0, static_cast<double>(e.size()) - 1.0));
  }
  if (!(scale > 0.0))
    scale = std::max(1.0, std::abs(center));
  double half = 6.0 * scale * std::sqrt(1.0 / nt + 1.0 / nc);
  if (is_ols(model.family)) {
    // The outcome model absorbs part of a jump at the cutoff; the residual
    // difference moves by t((I - H) z) per unit of effect.
    const Vector ez = hat_apply(model.family, data.r, data.z);
    const double gain = std::abs(raw_statistic(StatisticKind::DiffMeans, ez, data.z));
    if (gain > 1e-8)
      half /= gain;
  }
  GridSpec grid;
  grid.step = half / 100.0;
  grid.lo = center - half;
  grid.hi = center + half;
  return grid;
}

EffectInference invert_ci(const WindowData &data, const ModelSpec &model, const PermutationPlan &plan,
                          double alpha, std::optional<GridSpec> grid) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw Error(ErrorCode::InvalidArgument, "alpha must lie in (0, 1)");
  if (data.n_treated < 2 || data.n_control < 2)
    throw Error(ErrorCode::DegenerateWindow, "window needs at least two units per arm");

  EffectInference out;
  out.alpha = alpha;
  out.n = data.n();
  out.n_treated = data.n_treated;
  out.n_control = data.n_control;
  out.model = model;
  out.plan = plan;

  const PermutationEngine engine = make_engine(data, plan);
  const Statistic &stat = plan.statistic;
  const bool affine = linear_in_tau(model) && linear_statistic(stat.kind);

  std::optional<AffinePath> path;
  if (affine) {
    // Residuals of y - tau z are e_y - tau e_z for a least-squares fit.
    const Vector ey = hypothesis_residuals(data, model, 0.0);
    const Vector ez = hat_apply(model.family, data.r, data.z);
    path.emplace(data, ey, ez, engine.sample(), stat);
  }
  auto test_at = [&](double tau) {
    if (path)
      return path->test(tau);
    return test_effect(data, model, EffectHypothesis{tau}, engine);
  };

  out.null_test = test_at(0.0);
  try {
    out.hl = hl_estimate(data, model, engine, grid);
  } catch (const Error &e) {
    if (e.code() != ErrorCode::NoSignChange)
      throw;
    out.hl = std::numeric_limits<double>::quiet_NaN();
    out.warnings.push_back(std::string("HL estimate unavailable: ") + e.what());
  }

  out.grid_spec = grid ? *grid : default_grid(data, model, std::isfinite(out.hl) ? out.hl : 0.0);
  const std::vector<double> taus = out.grid_spec.points();
  out.grid.reserve(taus.size());
  for (double tau : taus)
    out.grid.push_back(GridPoint{tau, test_at(tau).p_value});

  const double half_step = out.grid_spec.step / 2.0;
  long first = -1, last = -1, accepted = 0;
  for (std::size_t i = 0; i < out.grid.size(); ++i)
    if (out.grid[i].p_value > alpha) {
      if (first < 0)
        first = static_cast<long>(i);
      last = static_cast<long>(i);
      ++accepted;
    }
  if (first < 0) {
    out.ci.empty = true;
    out.ci.lower = std::numeric_limits<double>::quiet_NaN();
    out.ci.upper = std::numeric_limits<double>::quiet_NaN();
    out.warnings.push_back("EmptyConfidenceSet: every grid point rejected");
    return out;
  }
  out.ci.lower = out.grid[static_cast<std::size_t>(first)].tau - half_step;
  out.ci.upper = out.grid[static_cast<std::size_t>(last)].tau + half_step;
  if (first == 0) {
    out.ci.lower_bounded = false;
    out.warnings.push_back("lower grid endpoint not rejected; widen --grid-lo");
  }
  if (last == static_cast<long>(out.grid.size()) - 1) {
    out.ci.upper_bounded = false;
    if (stat.kind != StatisticKind::AbsDiffMeans && stat.sidedness == Sidedness::UpperTail)
      out.warnings.push_back("upper-tail statistic: the interval is unbounded above by construction");
    else
      out.warnings.push_back("upper grid endpoint not rejected; widen --grid-hi");
  }
  if (accepted != last - first + 1)
    out.warnings.push_back("acceptance region is not contiguous on the grid");
  return out;
}

EffectInference invert_ci(const UnitFrame &frame, const WindowSpec &window, const ModelSpec &model,
                          const PermutationPlan &plan, double alpha, std::optional<GridSpec> grid) {
  return invert_ci(window_data(frame, window), model, plan, alpha, grid);
}

} // namespace rdperm
