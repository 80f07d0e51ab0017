#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/QR>
#include <boost/math/distributions/normal.hpp>

#include "rdperm/errors.hpp"
#include "rdperm/spectests.hpp"

namespace rdperm {

std::optional<double> detect_lattice(std::vector<double> values) {
  const std::size_t n = values.size();
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());
  if (values.size() < 2 || values.size() > n / 4)
    return std::nullopt;
  double step = std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < values.size(); ++i)
    step = std::min(step, values[i] - values[i - 1]);
  const double tol = 1e-6 * step;
  for (std::size_t i = 1; i < values.size(); ++i) {
    const double k = (values[i] - values[0]) / step;
    if (std::abs(k - std::round(k)) * step > tol)
      return std::nullopt;
  }
  // The span over the step count is less noisy than any single gap.
  const double span = values.back() - values.front();
  return span / std::round(span / step);
}

double default_bin_width(const std::vector<double> &values) {
  const auto n = static_cast<double>(values.size());
  if (values.size() < 2)
    throw Error(ErrorCode::InvalidArgument, "need at least two values for a bin width");
  double mean = 0.0;
  for (double v : values)
    mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : values)
    ss += (v - mean) * (v - mean);
  return 2.0 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
}

namespace {

struct Bin {
  double midpoint;
  double width;
  Index count;
  bool lower;
};

double overlap(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

// Bins of width b edged at the cutoff; widths shrink where the window edge
// or an excluded interval cuts into a bin.
std::vector<Bin> continuous_bins(const std::vector<double> &r, double c, double b,
                                 const WindowSpec &window) {
  double lo = *std::min_element(r.begin(), r.end());
  double hi = *std::max_element(r.begin(), r.end());
  if (std::isfinite(window.left))
    lo = c - window.left;
  if (std::isfinite(window.right))
    hi = c + window.right;
  const auto left_bins = static_cast<long>(std::max(1.0, std::ceil((c - lo) / b - 1e-9)));
  const auto right_bins = static_cast<long>(std::max(1.0, std::ceil((hi - c) / b - 1e-9)));
  if (left_bins + right_bins > 10'000'000)
    throw Error(ErrorCode::InvalidArgument, "bin width too small for the data range");

  std::vector<Bin> bins;
  bins.reserve(static_cast<std::size_t>(left_bins + right_bins));
  auto make = [&](double a0, double a1, bool lower) {
    double width = overlap(a0, a1, lo, hi);
    for (const auto &iv : window.excluded_intervals)
      width -= overlap(a0, a1, iv.lo, iv.hi);
    bins.push_back(Bin{(a0 + a1) / 2.0, std::max(0.0, width), 0, lower});
  };
  for (long j = left_bins; j >= 1; --j)
    make(c - static_cast<double>(j) * b, c - static_cast<double>(j - 1) * b, true);
  for (long j = 1; j <= right_bins; ++j)
    make(c + static_cast<double>(j - 1) * b, c + static_cast<double>(j) * b, false);

  for (double v : r) {
    std::size_t idx;
    if (v <= c) {
      const auto j = static_cast<long>(std::max(1.0, std::ceil((c - v) / b)));
      idx = static_cast<std::size_t>(left_bins - std::min(j, left_bins));
    } else {
      const auto j = static_cast<long>(std::max(1.0, std::ceil((v - c) / b)));
      idx = static_cast<std::size_t>(left_bins + std::min(j, right_bins) - 1);
    }
    ++bins[idx].count;
  }
  return bins;
}

// Support points of a lattice as bins, keeping empty points inside the range
// and dropping excluded ones.
std::vector<Bin> lattice_bins(const std::vector<double> &r, double c, double step,
                              const WindowSpec &window) {
  const double lo = *std::min_element(r.begin(), r.end());
  const double hi = *std::max_element(r.begin(), r.end());
  const auto points = static_cast<long>(std::llround((hi - lo) / step)) + 1;
  if (points > 10'000'000)
    throw Error(ErrorCode::InvalidArgument, "too many support points");
  std::vector<Bin> all(static_cast<std::size_t>(points));
  for (long k = 0; k < points; ++k) {
    const double x = lo + static_cast<double>(k) * step;
    all[static_cast<std::size_t>(k)] = Bin{x, step, 0, x <= c + 1e-9 * step};
  }
  for (double v : r) {
    const auto k = std::clamp<long>(std::llround((v - lo) / step), 0, points - 1);
    Bin &bin = all[static_cast<std::size_t>(k)];
    bin.lower = v <= c; // the observed value decides the side
    ++bin.count;
  }
  std::vector<Bin> bins;
  for (const auto &bin : all) {
    WindowSpec probe = window;
    probe.tolerance = std::max(window.tolerance, 1e-9 * step);
    if (bin.count == 0 && is_excluded(bin.midpoint, probe))
      continue;
    bins.push_back(bin);
  }
  return bins;
}

// Per-side plug-in: 3.348 [s2 (range) / sum f''^2]^(1/5) from a global
// quartic fit of the bin heights.
double side_bandwidth(const std::vector<double> &x, const std::vector<double> &h, double c) {
  const auto m = static_cast<Index>(x.size());
  double extent = 0.0;
  for (double v : x)
    extent = std::max(extent, std::abs(v - c));
  if (m < 6 || extent <= 0.0)
    return extent;
  Matrix design(m, 5);
  Vector y(m);
  for (Index i = 0; i < m; ++i) {
    const double u = (x[static_cast<std::size_t>(i)] - c) / extent;
    double p = 1.0;
    for (Index k = 0; k < 5; ++k, p *= u)
      design(i, k) = p;
    y[i] = h[static_cast<std::size_t>(i)];
  }
  Eigen::ColPivHouseholderQR<Matrix> qr(design);
  const Vector beta = qr.solve(y);
  const Vector resid = y - design * beta;
  const double s2 = resid.squaredNorm() / static_cast<double>(std::max<Index>(1, m - 5));
  double curvature = 0.0;
  for (Index i = 0; i < m; ++i) {
    const double u = (x[static_cast<std::size_t>(i)] - c) / extent;
    const double f2 = (2.0 * beta[2] + 6.0 * beta[3] * u + 12.0 * beta[4] * u * u) / (extent * extent);
    curvature += f2 * f2;
  }
  double lo = x.front(), hi = x.front();
  for (double v : x) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!(curvature > 0.0) || !(s2 > 0.0))
    return extent;
  return 3.348 * std::pow(s2 * (hi - lo) / curvature, 0.2);
}

// Triangular-kernel local linear fit of heights, evaluated at x0.
double boundary_density(const std::vector<double> &x, const std::vector<double> &h, double x0,
                        double bandwidth) {
  std::vector<double> rx, ry, rw;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double w = 1.0 - std::abs(x[i] - x0) / bandwidth;
    if (w > 0.0) {
      rx.push_back(x[i] - x0);
      ry.push_back(h[i]);
      rw.push_back(w);
    }
  }
  if (rx.size() < 2)
    throw Error(ErrorCode::InsufficientBins, "fewer than two bins inside the bandwidth on one side");
  const auto k = static_cast<Index>(rx.size());
  const FittedModel fm = fit(ModelSpec{ModelFamily::Linear, ResponseTransform::Identity},
                             Eigen::Map<Vector>(rx.data(), k), Eigen::Map<Vector>(ry.data(), k),
                             Eigen::Map<Vector>(rw.data(), k));
  return fm.theta[0];
}

} // namespace

McCraryResult mccrary_test(const UnitFrame &frame, const WindowSpec &window,
                           const McCraryOptions &options) {
  const WindowIndex members = window_members(frame, window);
  const double c = frame.cutoff();
  std::vector<double> r;
  r.reserve(members.indices.size());
  for (Index i : members.indices)
    r.push_back(frame.r()[i]);
  const bool has_lower = std::any_of(r.begin(), r.end(), [&](double v) { return v <= c; });
  const bool has_upper = std::any_of(r.begin(), r.end(), [&](double v) { return v > c; });
  if (!has_lower || !has_upper)
    throw Error(ErrorCode::EmptySide, "no units on one side of the cutoff");

  McCraryResult out;
  out.n = static_cast<Index>(r.size());
  std::optional<double> lattice;
  if (options.support != RunningSupport::Continuous)
    lattice = detect_lattice(r);
  if (options.support == RunningSupport::Discrete && !lattice)
    throw Error(ErrorCode::InvalidArgument, "running variable is not on a regular lattice");

  std::vector<Bin> bins;
  double x0 = c;
  if (lattice && !options.bin_width) {
    out.discrete = true;
    out.bin_width = *lattice;
    bins = lattice_bins(r, c, *lattice, window);
    double last_low = -std::numeric_limits<double>::infinity();
    double first_high = std::numeric_limits<double>::infinity();
    for (const auto &b : bins)
      (b.lower ? last_low : first_high) =
          b.lower ? std::max(last_low, b.midpoint) : std::min(first_high, b.midpoint);
    x0 = (last_low + first_high) / 2.0;
  } else {
    out.bin_width = options.bin_width ? *options.bin_width : default_bin_width(r);
    if (!(out.bin_width > 0.0))
      throw Error(ErrorCode::InvalidArgument, "bin width must be positive");
    bins = continuous_bins(r, c, out.bin_width, window);
  }

  std::vector<double> lx, lh, ux, uh;
  const double n = static_cast<double>(out.n);
  for (const auto &b : bins) {
    if (b.width <= 0.0)
      continue;
    const double height = static_cast<double>(b.count) / (n * b.width);
    out.bins.push_back(DensityBin{b.midpoint, b.count, height, b.lower});
    (b.lower ? lx : ux).push_back(b.midpoint);
    (b.lower ? lh : uh).push_back(height);
  }
  if (lx.size() < 10 || ux.size() < 10)
    throw Error(ErrorCode::InsufficientBins,
                "need at least 10 bins per side (got " + std::to_string(lx.size()) + " below, " +
                    std::to_string(ux.size()) + " above)");

  if (options.bandwidth) {
    out.bandwidth = *options.bandwidth;
    if (!(out.bandwidth > 0.0))
      throw Error(ErrorCode::InvalidArgument, "bandwidth must be positive");
  } else {
    const double extent = std::min(x0 - lx.front(), ux.back() - x0);
    const double plug = 0.5 * (side_bandwidth(lx, lh, x0) + side_bandwidth(ux, uh, x0));
    out.bandwidth = std::min(plug, extent);
  }

  out.density_below = boundary_density(lx, lh, x0, out.bandwidth);
  out.density_above = boundary_density(ux, uh, x0, out.bandwidth);
  if (!(out.density_below > 0.0) || !(out.density_above > 0.0)) {
    out.defined = false;
    out.theta = std::numeric_limits<double>::quiet_NaN();
    out.se = std::numeric_limits<double>::quiet_NaN();
    out.p_value = std::numeric_limits<double>::quiet_NaN();
    out.diagnostic = "ZeroDensityAtBoundary: a boundary density estimate is not positive";
    return out;
  }
  out.theta = std::log(out.density_above) - std::log(out.density_below);
  out.se = std::sqrt(4.8 * (1.0 / out.density_above + 1.0 / out.density_below) / (n * out.bandwidth));
  static const boost::math::normal_distribution<double> unit;
  out.p_value = 2.0 * boost::math::cdf(unit, -std::abs(out.theta / out.se));
  return out;
}

McCraryResult mccrary_test(const UnitFrame &frame, const McCraryOptions &options) {
  return mccrary_test(frame, WindowSpec{}, options);
}

} // namespace rdperm
