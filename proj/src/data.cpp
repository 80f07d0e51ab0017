#include "rdperm/data.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>

#include "rdperm/csv.hpp"
#include "rdperm/errors.hpp"

namespace rdperm {

UnitFrame::UnitFrame(Vector r, Vector y, std::vector<Covariate> covariates, double cutoff,
                     Direction direction)
    : r_(std::move(r)), y_(std::move(y)), covariates_(std::move(covariates)), cutoff_(cutoff),
      direction_(direction) {
  const Index n = r_.size();
  if (n == 0)
    throw Error(ErrorCode::EmptyFrame, "frame has no units");
  if (y_.size() != n)
    throw Error(ErrorCode::InvalidArgument, "running variable and outcome lengths differ");
  if (!std::isfinite(cutoff_))
    throw Error(ErrorCode::InvalidArgument, "cutoff must be finite");
  if (!r_.allFinite() || !y_.allFinite())
    throw Error(ErrorCode::InvalidArgument, "running variable and outcome must be finite");
  for (const auto &c : covariates_) {
    if (c.values.size() != n)
      throw Error(ErrorCode::InvalidArgument, "covariate '" + c.name + "' has the wrong length");
    if (!c.values.allFinite())
      throw Error(ErrorCode::InvalidArgument, "covariate '" + c.name + "' has non-finite values");
    if (c.kind == CovariateKind::Binary &&
        !c.values.unaryExpr([](double v) { return v == 0.0 || v == 1.0 ? 0.0 : 1.0; }).isZero())
      throw Error(ErrorCode::InvalidArgument, "binary covariate '" + c.name + "' has values outside {0,1}");
  }
  z_.resize(n);
  for (Index i = 0; i < n; ++i)
    z_[i] = is_treated(r_[i], cutoff_, direction_) ? 1.0 : 0.0;
  n_treated_ = static_cast<Index>(z_.sum());
}

const Covariate &UnitFrame::covariate(std::string_view name) const {
  for (const auto &c : covariates_)
    if (c.name == name)
      return c;
  throw Error(ErrorCode::MissingColumn, "no covariate named '" + std::string(name) + "'");
}

UnitFrame UnitFrame::centered() const {
  return UnitFrame(r_.array() - cutoff_, y_, covariates_, 0.0, direction_);
}

namespace {

bool is_missing(const std::string &cell) {
  return cell.empty() || cell == "NA" || cell == "na" || cell == "NaN" || cell == "nan" ||
         cell == "null" || cell == "NULL";
}

std::optional<double> parse_double(const std::string &cell) {
  const char *begin = cell.c_str();
  char *end = nullptr;
  errno = 0;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0' || errno == ERANGE || !std::isfinite(v))
    return std::nullopt;
  return v;
}

[[noreturn]] void non_numeric(const std::string &cell, const std::string &column, std::size_t row) {
  throw Error(ErrorCode::NonNumericCell, "value '" + cell + "' in column '" + column + "' at row " +
                                             std::to_string(row) + " (line " +
                                             std::to_string(row + 1) + ") is not numeric");
}

} // namespace

LoadedFrame load_frame(const std::filesystem::path &path, const FrameSchema &schema, double cutoff,
                       Direction direction, LoadOptions options) {
  const CsvTable table = read_csv(path);
  auto require = [&](const std::string &name) {
    const long col = table.column(name);
    if (col < 0)
      throw Error(ErrorCode::MissingColumn, "column '" + name + "' not found in '" + path.string() + "'");
    return static_cast<std::size_t>(col);
  };
  const std::size_t r_col = require(schema.running);
  const std::size_t y_col = require(schema.outcome);
  std::vector<std::size_t> x_cols;
  for (const auto &c : schema.covariates)
    x_cols.push_back(require(c.name));
  if (table.rows.empty())
    throw Error(ErrorCode::EmptyFrame, "'" + path.string() + "' has no data rows");

  std::vector<double> r, y;
  std::vector<std::vector<double>> x(x_cols.size());
  std::size_t rejected = 0;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto &row = table.rows[i];
    const std::size_t row_no = i + 1;
    auto numeric = [&](std::size_t col, const std::string &name) {
      const auto v = parse_double(row[col]);
      if (!v)
        non_numeric(row[col], name, row_no);
      return *v;
    };
    const double rv = numeric(r_col, schema.running);
    const double yv = numeric(y_col, schema.outcome);
    std::vector<double> xv(x_cols.size());
    bool missing = false;
    for (std::size_t k = 0; k < x_cols.size(); ++k) {
      const auto &cell = row[x_cols[k]];
      if (is_missing(cell)) {
        missing = true;
        continue;
      }
      xv[k] = numeric(x_cols[k], schema.covariates[k].name);
    }
    if (missing) {
      ++rejected;
      continue;
    }
    r.push_back(rv);
    y.push_back(yv);
    for (std::size_t k = 0; k < x_cols.size(); ++k)
      x[k].push_back(xv[k]);
  }
  if (r.empty())
    throw Error(ErrorCode::EmptyFrame, "every row of '" + path.string() + "' was rejected");

  auto to_vector = [](const std::vector<double> &v) {
    return Vector(Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size())));
  };
  std::vector<Covariate> covariates;
  for (std::size_t k = 0; k < x_cols.size(); ++k) {
    Covariate c;
    c.name = schema.covariates[k].name;
    c.values = to_vector(x[k]);
    const bool zero_one =
        std::all_of(x[k].begin(), x[k].end(), [](double v) { return v == 0.0 || v == 1.0; });
    c.kind = schema.covariates[k].kind.value_or(zero_one ? CovariateKind::Binary
                                                         : CovariateKind::Continuous);
    covariates.push_back(std::move(c));
  }
  Vector rv = to_vector(r);
  if (options.center) {
    rv.array() -= cutoff;
    cutoff = 0.0;
  }
  return LoadedFrame{UnitFrame(std::move(rv), to_vector(y), std::move(covariates), cutoff, direction),
                     rejected};
}

namespace {

// Window edges and exclusion values are compared with a small relative slack
// so that lattice values such as 0.1 * 3 match 0.3.
double slack(double scale) { return 1e-9 * (1.0 + std::abs(scale)); }

} // namespace

bool is_excluded(double r, const WindowSpec &window) {
  for (double e : window.exclusions)
    if (std::abs(r - e) <= std::max(window.tolerance, slack(e)))
      return true;
  for (const auto &iv : window.excluded_intervals) {
    const double tol = std::max(window.tolerance, slack(std::max(std::abs(iv.lo), std::abs(iv.hi))));
    if (r >= iv.lo - tol && r <= iv.hi + tol)
      return true;
  }
  return false;
}

bool in_window(double r, double cutoff, const WindowSpec &window) {
  const double lo = cutoff - window.left, hi = cutoff + window.right;
  return r >= lo - slack(lo) && r <= hi + slack(hi) && !is_excluded(r, window);
}

WindowIndex window_members(const UnitFrame &frame, const WindowSpec &window) {
  if (!(window.left >= 0.0) || !(window.right >= 0.0) || !(window.tolerance >= 0.0))
    throw Error(ErrorCode::InvalidArgument, "window bandwidths and tolerance must be nonnegative");
  WindowIndex out;
  const Vector &r = frame.r();
  for (Index i = 0; i < frame.n(); ++i) {
    if (!in_window(r[i], frame.cutoff(), window))
      continue;
    out.indices.push_back(i);
    if (frame.z()[i] == 1.0)
      ++out.n_treated;
    else
      ++out.n_control;
  }
  return out;
}

WindowIndex realize_window(const UnitFrame &frame, const WindowSpec &window) {
  WindowIndex out = window_members(frame, window);
  if (out.n_treated < 2 || out.n_control < 2)
    throw Error(ErrorCode::DegenerateWindow,
                "window has " + std::to_string(out.n_treated) + " treated and " +
                    std::to_string(out.n_control) + " control units; at least 2 of each are required");
  return out;
}

Vector gather(const Vector &values, const std::vector<Index> &indices) {
  Vector out(static_cast<Index>(indices.size()));
  for (std::size_t i = 0; i < indices.size(); ++i)
    out[static_cast<Index>(i)] = values[indices[i]];
  return out;
}

WindowData window_data(const UnitFrame &frame, const WindowSpec &window) {
  WindowIndex idx = realize_window(frame, window);
  WindowData d;
  d.r = gather(frame.r(), idx.indices);
  d.y = gather(frame.y(), idx.indices);
  d.z = gather(frame.z(), idx.indices);
  d.n_treated = idx.n_treated;
  d.n_control = idx.n_control;
  d.indices = std::move(idx.indices);
  return d;
}

} // namespace rdperm
