#include <algorithm>
#include <cmath>

#include <Eigen/Eigenvalues>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include "rdperm/errors.hpp"
#include "rdperm/spectests.hpp"

namespace rdperm {

std::vector<CovariateSpec> default_covariate_models(const UnitFrame &frame, ModelSpec continuous,
                                                    const std::vector<std::string> &logit) {
  std::vector<CovariateSpec> out;
  for (const auto &c : frame.covariates()) {
    CovariateSpec spec{c.name, continuous};
    if (c.kind == CovariateKind::Binary) {
      spec.model = ModelSpec{ModelFamily::LogisticLinear, ResponseTransform::Identity};
    } else if (std::find(logit.begin(), logit.end(), c.name) != logit.end()) {
      spec.model.transform = ResponseTransform::Logit;
    }
    out.push_back(spec);
  }
  return out;
}

Matrix randomization_covariance(const Matrix &residuals, Index n_treated) {
  const Index n = residuals.rows();
  const Index nc = n - n_treated;
  if (n_treated <= 0 || nc <= 0 || n < 2)
    throw Error(ErrorCode::AllTreatedOrAllControl, "need units in both arms");
  const Matrix centered = residuals.rowwise() - residuals.colwise().mean();
  const Matrix s = centered.transpose() * centered / static_cast<double>(n - 1);
  return static_cast<double>(n) / (static_cast<double>(n_treated) * static_cast<double>(nc)) * s;
}

Matrix symmetric_pinv(const Matrix &sigma, int *rank) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sigma);
  const Vector &values = eig.eigenvalues();
  const double top = values.size() ? values.cwiseAbs().maxCoeff() : 0.0;
  Vector inv = Vector::Zero(values.size());
  int kept = 0;
  for (Index i = 0; i < values.size(); ++i)
    if (top > 0.0 && values[i] > 1e-10 * top) {
      inv[i] = 1.0 / values[i];
      ++kept;
    }
  if (rank)
    *rank = kept;
  return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

namespace {

double normal_two_sided(double z) {
  static const boost::math::normal_distribution<double> unit;
  return 2.0 * boost::math::cdf(unit, -std::abs(z));
}

// Quadratic form d' W d of the treated-minus-control mean differences.
struct QuadraticEval {
  const Matrix *rows = nullptr; // k x n, one column per unit
  const Matrix *weight = nullptr;
  Vector total;
  double n_treated = 0.0;
  double n_control = 0.0;
  Vector sum;

  double operator()(const Assignment &a) {
    sum.setZero(total.size());
    for (auto i : a.chosen)
      sum += rows->col(i);
    const Vector treated = a.chosen_treated ? sum : Vector(total - sum);
    const Vector d = treated / n_treated - (total - treated) / n_control;
    return d.dot(*weight * d);
  }
};

} // namespace

BalanceResult balance_from_residuals(const Matrix &residuals, const Vector &z,
                                     const std::vector<std::string> &names,
                                     const PermutationPlan &plan, BalanceOptions options) {
  if (residuals.cols() == 0)
    throw Error(ErrorCode::NoCovariates, "no covariates to test");
  if (residuals.rows() != z.size() || static_cast<std::size_t>(residuals.cols()) != names.size())
    throw Error(ErrorCode::InvalidArgument, "residual matrix does not match z or names");
  BalanceResult out;
  const Index n = z.size();
  out.n_treated = static_cast<Index>(z.sum());
  out.n_control = n - out.n_treated;
  if (out.n_treated < 1 || out.n_control < 1)
    throw Error(ErrorCode::AllTreatedOrAllControl, "need units in both arms");
  const double nt = static_cast<double>(out.n_treated), nc = static_cast<double>(out.n_control);

  const Vector d = (residuals.transpose() * z) / nt - (residuals.transpose() * (Vector::Ones(n) - z)) / nc;
  const Matrix sigma = randomization_covariance(residuals, out.n_treated);
  const Matrix weight = symmetric_pinv(sigma, &out.df);
  out.combined_stat = d.dot(weight * d);
  if (out.df > 0) {
    const boost::math::chi_squared_distribution<double> chi2(out.df);
    out.p_chi2 = std::clamp(boost::math::cdf(boost::math::complement(chi2, std::max(0.0, out.combined_stat))), 0.0, 1.0);
  }

  for (Index j = 0; j < residuals.cols(); ++j) {
    CovariateBalance cb;
    cb.name = names[static_cast<std::size_t>(j)];
    cb.difference = d[j];
    const double var = sigma(j, j);
    const double sd = std::sqrt(var * nt * nc / static_cast<double>(n));
    cb.std_difference = sd > 0.0 ? d[j] / sd : 0.0;
    cb.z = var > 0.0 ? d[j] / std::sqrt(var) : 0.0;
    cb.p_value = var > 0.0 ? normal_two_sided(cb.z) : 1.0;
    out.covariates.push_back(cb);
  }

  if (options.permutation && out.df > 0) {
    const AssignmentSample sample(n, out.n_treated, plan, false);
    const Matrix rows = residuals.transpose();
    QuadraticEval eval;
    eval.rows = &rows;
    eval.weight = &weight;
    eval.total = rows.rowwise().sum();
    eval.n_treated = nt;
    eval.n_control = nc;
    const double tol = 1e-9 * (std::abs(out.combined_stat) + 1.0);
    const TailSummary tail = scan(sample, out.combined_stat - tol, eval);
    const double total = static_cast<double>(tail.total);
    if (sample.method() == Method::Exact) {
      out.p_mc = static_cast<double>(tail.at_least) / total;
      out.mc_stderr = 0.0;
    } else {
      out.p_mc = (1.0 + static_cast<double>(tail.at_least)) / (1.0 + total);
      out.mc_stderr = std::sqrt(*out.p_mc * (1.0 - *out.p_mc) / total);
    }
  } else if (options.permutation) {
    out.p_mc = 1.0;
    out.mc_stderr = 0.0;
  }
  return out;
}

BalanceResult balance_test(const UnitFrame &frame, const WindowSpec &window,
                           const std::vector<CovariateSpec> &covariates, const PermutationPlan &plan,
                           BalanceOptions options) {
  if (covariates.empty())
    throw Error(ErrorCode::NoCovariates, "no covariates to test");
  const WindowData data = window_data(frame, window);
  std::vector<Vector> columns;
  std::vector<std::string> names;
  std::vector<CovariateBalance> info;
  std::vector<std::string> warnings;
  std::vector<CovariateBalance> dropped;
  for (const auto &spec : covariates) {
    const Vector x = gather(frame.covariate(spec.name).values, data.indices);
    CovariateBalance cb;
    cb.name = spec.name;
    cb.model = to_string(spec.model);
    if (x.maxCoeff() == x.minCoeff()) {
      cb.dropped = true;
      dropped.push_back(cb);
      warnings.push_back("covariate '" + spec.name + "' is constant in the window and was dropped");
      continue;
    }
    FittedModel fitted = fit_or_fallback(spec.model, data.r, x);
    if (fitted.fallback) {
      cb.fallback = true;
      warnings.push_back("covariate '" + spec.name + "': " + fitted.warning);
    }
    columns.push_back(std::move(fitted.residuals));
    names.push_back(spec.name);
    info.push_back(cb);
  }

  BalanceResult out;
  if (columns.empty()) {
    out.n_treated = data.n_treated;
    out.n_control = data.n_control;
    out.p_chi2 = 1.0;
    if (options.permutation) {
      out.p_mc = 1.0;
      out.mc_stderr = 0.0;
    }
  } else {
    Matrix residuals(data.n(), static_cast<Index>(columns.size()));
    for (std::size_t j = 0; j < columns.size(); ++j)
      residuals.col(static_cast<Index>(j)) = columns[j];
    out = balance_from_residuals(residuals, data.z, names, plan, options);
    for (std::size_t j = 0; j < info.size(); ++j) {
      out.covariates[j].model = info[j].model;
      out.covariates[j].fallback = info[j].fallback;
    }
  }
  for (auto &cb : dropped)
    out.covariates.push_back(cb);
  out.warnings.insert(out.warnings.begin(), warnings.begin(), warnings.end());
  return out;
}

} // namespace rdperm
