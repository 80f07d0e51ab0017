#pragma once

#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rdperm/types.hpp"

namespace rdperm {

enum class Direction { TreatedAtOrBelow, TreatedAbove };

enum class CovariateKind { Continuous, Binary };

/// True when a unit with running value `r` is assigned to treatment.
constexpr bool is_treated(double r, double cutoff, Direction direction) noexcept {
  return direction == Direction::TreatedAtOrBelow ? r <= cutoff : r > cutoff;
}

struct Covariate {
  std::string name;
  CovariateKind kind = CovariateKind::Continuous;
  Vector values;
};

/// Unit-level table for a sharp design. Treatment is derived from the running
/// variable, cutoff and direction at construction and the frame is immutable
/// afterwards.
class UnitFrame {
public:
  UnitFrame(Vector r, Vector y, std::vector<Covariate> covariates, double cutoff,
            Direction direction);

  Index n() const noexcept { return r_.size(); }
  const Vector &r() const noexcept { return r_; }
  const Vector &y() const noexcept { return y_; }
  const Vector &z() const noexcept { return z_; }
  const std::vector<Covariate> &covariates() const noexcept { return covariates_; }
  double cutoff() const noexcept { return cutoff_; }
  Direction direction() const noexcept { return direction_; }
  Index n_treated() const noexcept { return n_treated_; }

  /// Throws MissingColumn.
  const Covariate &covariate(std::string_view name) const;

  /// Same units with r shifted so the cutoff sits at zero.
  UnitFrame centered() const;

private:
  Vector r_;
  Vector y_;
  Vector z_;
  std::vector<Covariate> covariates_;
  double cutoff_;
  Direction direction_;
  Index n_treated_ = 0;
};

struct CovariateColumn {
  std::string name;
  /// Unset means: binary when every value is 0 or 1, continuous otherwise.
  std::optional<CovariateKind> kind;
};

struct FrameSchema {
  std::string running;
  std::string outcome;
  std::vector<CovariateColumn> covariates;
};

struct LoadOptions {
  /// Subtract the cutoff from r and reset the cutoff to 0.
  bool center = false;
};

struct LoadedFrame {
  UnitFrame frame;
  /// Rows dropped because a covariate cell was missing.
  std::size_t rejected_rows = 0;
};

/// Cells that are empty or spell NA / NaN / null count as missing.
LoadedFrame load_frame(const std::filesystem::path &path, const FrameSchema &schema,
                       double cutoff, Direction direction, LoadOptions options = {});

/// Closed interval of running-variable values removed from a window.
struct ExcludedInterval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Interval [cutoff - left, cutoff + right] minus exact exclusion values and
/// excluded intervals. Exclusions are expressed in the frame's r units.
struct WindowSpec {
  double left = std::numeric_limits<double>::infinity();
  double right = std::numeric_limits<double>::infinity();
  std::vector<double> exclusions;
  std::vector<ExcludedInterval> excluded_intervals;
  /// Match tolerance for exclusion values (a relative 1e-9 slack always applies).
  double tolerance = 0.0;
  std::string label;

  static WindowSpec symmetric(double bandwidth) {
    WindowSpec w;
    w.left = bandwidth;
    w.right = bandwidth;
    return w;
  }
};

bool is_excluded(double r, const WindowSpec &window);

bool in_window(double r, double cutoff, const WindowSpec &window);

struct WindowIndex {
  std::vector<Index> indices;
  Index n_treated = 0;
  Index n_control = 0;

  Index n() const noexcept { return static_cast<Index>(indices.size()); }
};

/// Members of the window without the degeneracy guard.
WindowIndex window_members(const UnitFrame &frame, const WindowSpec &window);

/// Sorted member indices; throws DegenerateWindow with fewer than two treated
/// or two control units.
WindowIndex realize_window(const UnitFrame &frame, const WindowSpec &window);

/// Window-restricted copies of the analysis columns.
struct WindowData {
  Vector r;
  Vector y;
  Vector z;
  std::vector<Index> indices;
  Index n_treated = 0;
  Index n_control = 0;

  Index n() const noexcept { return r.size(); }
};

WindowData window_data(const UnitFrame &frame, const WindowSpec &window);

Vector gather(const Vector &values, const std::vector<Index> &indices);

} // namespace rdperm
