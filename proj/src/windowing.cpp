#include "rdperm/windowing.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "rdperm/csv.hpp"
#include "rdperm/errors.hpp"

namespace rdperm {

std::vector<double> default_candidates(const UnitFrame &frame) {
  const Vector &r = frame.r();
  const double c = frame.cutoff();
  const double b_max = std::max(c - r.minCoeff(), r.maxCoeff() - c);
  std::vector<double> values(r.data(), r.data() + r.size());
  double step = (r.maxCoeff() - r.minCoeff()) / 100.0;
  if (auto lattice = detect_lattice(values))
    step = *lattice;
  if (!(step > 0.0) || !(b_max > 0.0))
    throw Error(ErrorCode::InvalidArgument, "running variable has no spread around the cutoff");
  std::vector<double> out;
  const auto count = static_cast<long>(std::floor(b_max / step + 1e-9));
  for (long k = count; k >= 1; --k)
    out.push_back(static_cast<double>(k) * step);
  if (out.empty() || b_max - out.front() > 1e-9 * b_max)
    out.insert(out.begin(), b_max);
  return out;
}

BandwidthSweep select_bandwidth(const UnitFrame &frame, const std::vector<double> &candidates,
                                const std::vector<CovariateSpec> &covariates, double alpha_f,
                                const PermutationPlan &plan, const SweepOptions &options) {
  if (candidates.empty())
    throw Error(ErrorCode::InvalidArgument, "no bandwidth candidates");
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (!(candidates[i] > 0.0))
      throw Error(ErrorCode::InvalidArgument, "bandwidth candidates must be positive");
    if (i > 0 && !(candidates[i] < candidates[i - 1]))
      throw Error(ErrorCode::InvalidArgument, "bandwidth candidates must be strictly decreasing");
  }
  if (covariates.empty())
    throw Error(ErrorCode::NoCovariates, "bandwidth selection needs covariates");

  BandwidthSweep sweep;
  sweep.candidates = candidates;
  sweep.alpha_f = alpha_f;
  sweep.alpha_g = options.alpha_g;

  for (double b : candidates) {
    SweepRow row;
    row.bandwidth = b;
    if (sweep.b_star && !options.exhaustive) {
      row.note = "plausible; not tested";
      sweep.results.push_back(row);
      continue;
    }
    WindowSpec window = options.base;
    window.left = b;
    window.right = b;
    const WindowIndex members = window_members(frame, window);
    row.n = members.n();
    row.n_treated = members.n_treated;
    row.n_control = members.n_control;
    if (members.n_treated < 2 || members.n_control < 2) {
      row.note = "skipped: window not realizable";
      sweep.results.push_back(row);
      continue;
    }
    try {
      const BalanceResult bal = balance_test(frame, window, covariates, plan);
      row.tested = true;
      row.balance_p = bal.p_chi2;
      row.rejected = bal.p_chi2 <= alpha_f;
    } catch (const Error &e) {
      row.note = std::string("balance test failed: ") + e.what();
      sweep.results.push_back(row);
      continue;
    }
    if (options.run_mccrary) {
      try {
        const McCraryResult mc = mccrary_test(frame, window, options.mccrary);
        if (mc.defined)
          row.mccrary_p = mc.p_value;
        else
          row.note = mc.diagnostic;
      } catch (const Error &e) {
        row.note = std::string("density test unavailable: ") + e.what();
      }
    }
    // Testing in order: the first sustained candidate from the top is b*.
    if (!row.rejected && !sweep.b_star)
      sweep.b_star = b;
    sweep.results.push_back(row);
  }
  if (sweep.b_star)
    for (double b : candidates)
      if (b <= *sweep.b_star)
        sweep.plausible_set.push_back(b);
  return sweep;
}

namespace {

double density_p(const UnitFrame &frame, const WindowSpec &window, const McCraryOptions &opts,
                 ExclusionStep &step) {
  try {
    const McCraryResult mc = mccrary_test(frame, window, opts);
    step.defined = mc.defined;
    step.p_value = mc.p_value;
    return mc.defined ? mc.p_value : 0.0;
  } catch (const Error &e) {
    step.defined = false;
    step.p_value = std::nan("");
    step.description += std::string(" (") + e.what() + ")";
    return 0.0;
  }
}

std::string value_list(const std::vector<double> &values) {
  std::ostringstream out;
  out << '{';
  for (std::size_t i = 0; i < values.size(); ++i)
    out << (i ? ", " : "") << format_number(values[i]);
  out << '}';
  return out.str();
}

} // namespace

ExclusionResult donut_exclusion(const UnitFrame &frame, const WindowSpec &base, double alpha_g,
                                double step, const DonutOptions &options) {
  if (!(step > 0.0))
    throw Error(ErrorCode::InvalidArgument, "donut step must be positive");
  const double c = frame.cutoff();
  double limit = std::min(base.left, base.right);
  if (!std::isfinite(limit)) {
    const Vector &r = frame.r();
    limit = std::min(std::isfinite(base.left) ? base.left : c - r.minCoeff(),
                     std::isfinite(base.right) ? base.right : r.maxCoeff() - c);
  }

  ExclusionResult out;
  out.window = base;
  if (options.include_empty_first) {
    ExclusionStep s{"no exclusion", 0.0, true};
    const double p = density_p(frame, base, options.mccrary, s);
    out.steps.push_back(s);
    if (s.defined && p > alpha_g) {
      out.passed = true;
      return out;
    }
  }
  for (long j = 0;; ++j) {
    const double k = static_cast<double>(j) * step;
    if (k >= limit - 1e-12 * std::max(1.0, limit))
      break;
    WindowSpec window = base;
    window.excluded_intervals.push_back(ExcludedInterval{c - k, c + k});
    window.label = "donut k=" + format_number(k);
    ExclusionStep s{"remove |r - c| <= " + format_number(k), 0.0, true};
    const double p = density_p(frame, window, options.mccrary, s);
    out.steps.push_back(s);
    if (s.defined && p > alpha_g) {
      out.window = window;
      out.passed = true;
      out.k_star = k;
      return out;
    }
  }
  return out;
}

ExclusionResult surgical_exclusion(const UnitFrame &frame, const WindowSpec &base,
                                   const std::vector<std::vector<double>> &hypotheses,
                                   double alpha_g, const McCraryOptions &mccrary) {
  ExclusionResult out;
  out.window = base;
  if (hypotheses.empty()) {
    ExclusionStep s{"no exclusion", 0.0, true};
    const double p = density_p(frame, base, mccrary, s);
    out.steps.push_back(s);
    out.passed = s.defined && p > alpha_g;
    return out;
  }
  std::vector<double> removed;
  for (const auto &set : hypotheses) {
    for (double v : set)
      if (std::find(removed.begin(), removed.end(), v) == removed.end())
        removed.push_back(v);
    WindowSpec window = base;
    window.exclusions.insert(window.exclusions.end(), removed.begin(), removed.end());
    window.label = "surgical " + value_list(removed);
    ExclusionStep s{"remove r in " + value_list(removed), 0.0, true};
    const double p = density_p(frame, window, mccrary, s);
    out.steps.push_back(s);
    if (s.defined && p > alpha_g) {
      out.window = window;
      out.passed = true;
      return out;
    }
  }
  return out;
}

WindowSpec balanced_asymmetric_window(const UnitFrame &frame, double left,
                                      const WindowSpec &exclusions) {
  if (!(left > 0.0))
    throw Error(ErrorCode::InvalidArgument, "left bandwidth must be positive");
  const double c = frame.cutoff();
  WindowSpec probe = exclusions;
  probe.left = left;
  probe.right = std::numeric_limits<double>::infinity();
  Index below = 0;
  std::vector<double> above;
  for (Index i = 0; i < frame.n(); ++i) {
    const double r = frame.r()[i];
    if (!in_window(r, c, probe))
      continue;
    if (r <= c)
      ++below;
    else
      above.push_back(r);
  }
  if (below < 2 || above.size() < 2)
    throw Error(ErrorCode::DegenerateWindow, "too few units on one side for an asymmetric window");
  std::sort(above.begin(), above.end());
  // Only the last unit of each tie group is a valid right edge.
  Index best_gap = std::numeric_limits<Index>::max();
  double best_edge = above.back();
  for (std::size_t i = 0; i < above.size(); ++i) {
    if (i + 1 < above.size() && above[i + 1] == above[i])
      continue;
    const auto count = static_cast<Index>(i + 1);
    const Index gap = std::abs(below - count);
    if (gap < best_gap) {
      best_gap = gap;
      best_edge = above[i];
    }
  }
  WindowSpec out = exclusions;
  out.left = left;
  out.right = best_edge - c;
  out.label = "balanced [c - " + format_number(left) + ", c + " + format_number(out.right) + "]";
  realize_window(frame, out);
  return out;
}

} // namespace rdperm
