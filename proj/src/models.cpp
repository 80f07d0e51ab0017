#include "rdperm/models.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <algorithm>
#include <cmath>

#include "rdperm/errors.hpp"

namespace rdperm {

std::string to_string(ModelFamily family) {
  switch (family) {
  case ModelFamily::Constant:
    return "constant";
  case ModelFamily::Linear:
    return "linear";
  case ModelFamily::Quadratic:
    return "quadratic";
  case ModelFamily::LogisticLinear:
    return "logistic";
  }
  return "unknown";
}

std::string to_string(const ModelSpec &spec) {
  return spec.transform == ResponseTransform::Logit ? "logit+" + to_string(spec.family)
                                                    : to_string(spec.family);
}

Vector logit_transform(const Vector &v) {
  if ((v.array() < 0.0).any() || (v.array() > 1.0).any())
    throw Error(ErrorCode::InvalidArgument, "logit transform needs values in [0, 1]");
  return v.unaryExpr([](double p) {
    const double q = std::clamp(p, kLogitClamp, 1.0 - kLogitClamp);
    return std::log(q / (1.0 - q));
  });
}

Matrix polynomial_design(const Vector &r, int degree) {
  Matrix x(r.size(), degree + 1);
  x.col(0).setOnes();
  for (int j = 1; j <= degree; ++j)
    x.col(j) = x.col(j - 1).cwiseProduct(r);
  return x;
}

namespace {

// Powers of (r - center) / scale; conditioning for the QR and for IRLS.
struct ScaledDesign {
  Matrix x;
  double center = 0.0;
  double scale = 1.0;
};

ScaledDesign scaled_design(const Vector &r, int degree) {
  ScaledDesign d;
  if (degree > 0) {
    d.center = r.mean();
    d.scale = (r.array() - d.center).abs().maxCoeff();
    if (!(d.scale > 1e-12 * std::max(1.0, std::abs(d.center))))
      throw Error(ErrorCode::RankDeficientDesign, "running variable is constant in the fitting sample");
  }
  d.x = polynomial_design((r.array() - d.center) / d.scale, degree);
  return d;
}

// Coefficients of sum_j c_j ((r - m) / k)^j re-expressed in powers of r.
Vector unscale(const Vector &c, double m, double k) {
  const Index p = c.size();
  Vector theta = Vector::Zero(p);
  for (Index j = 0; j < p; ++j) {
    const double cj = c[j] / std::pow(k, static_cast<double>(j));
    double binom = 1.0;
    for (Index i = j; i >= 0; --i) {
      // C(j, i) (-m)^(j - i)
      theta[i] += cj * binom * std::pow(-m, static_cast<double>(j - i));
      binom = binom * static_cast<double>(i) / static_cast<double>(j - i + 1);
    }
  }
  return theta;
}

std::vector<std::string> column_names(int degree) {
  std::vector<std::string> names{"1"};
  if (degree >= 1)
    names.emplace_back("r");
  if (degree >= 2)
    names.emplace_back("r^2");
  return names;
}

Eigen::ColPivHouseholderQR<Matrix> checked_qr(const Matrix &x) {
  Eigen::ColPivHouseholderQR<Matrix> qr(x.rows(), x.cols());
  qr.setThreshold(1e-10);
  qr.compute(x);
  if (qr.rank() < x.cols())
    throw Error(ErrorCode::RankDeficientDesign,
                "design has rank " + std::to_string(qr.rank()) + " < " + std::to_string(x.cols()));
  return qr;
}

void check_inputs(const Vector &r, const Vector &v, const Vector &weights) {
  if (r.size() != v.size())
    throw Error(ErrorCode::InvalidArgument, "r and response lengths differ");
  if (weights.size() != 0 && weights.size() != r.size())
    throw Error(ErrorCode::InvalidArgument, "weights length differs from r");
  if (!r.allFinite() || !v.allFinite())
    throw Error(ErrorCode::InvalidArgument, "fit inputs must be finite");
  if (weights.size() != 0 && ((weights.array() < 0.0).any() || !weights.allFinite()))
    throw Error(ErrorCode::InvalidArgument, "weights must be finite and nonnegative");
}

FittedModel fit_ols(const ModelSpec &spec, const Vector &r, const Vector &response,
                    const Vector &weights) {
  const int deg = degree(spec.family);
  const ScaledDesign d = scaled_design(r, deg);
  Vector coef;
  if (weights.size() == 0) {
    coef = checked_qr(d.x).solve(response);
  } else {
    const Vector sw = weights.cwiseSqrt();
    coef = checked_qr(sw.asDiagonal() * d.x).solve(Vector(sw.cwiseProduct(response)));
  }
  FittedModel m;
  m.spec = spec;
  m.fitted = d.x * coef;
  m.residuals = response - m.fitted;
  m.theta = unscale(coef, d.center, d.scale);
  m.design_columns = column_names(deg);
  m.hat_available = true;
  return m;
}

FittedModel fit_logistic(const ModelSpec &spec, const Vector &r, const Vector &v,
                         const Vector &weights) {
  if (!v.unaryExpr([](double x) { return x == 0.0 || x == 1.0 ? 0.0 : 1.0; }).isZero())
    throw Error(ErrorCode::InvalidArgument, "logistic response must be binary");
  const Vector wt = weights.size() == 0 ? Vector::Ones(r.size()) : weights;
  const double total = wt.sum();
  const double mean = wt.dot(v) / total;
  if (!(mean > 0.0 && mean < 1.0))
    throw Error(ErrorCode::InvalidArgument, "logistic response has a single class");

  const ScaledDesign d = scaled_design(r, 1);
  Vector beta = Vector::Zero(2);
  beta[0] = std::log(mean / (1.0 - mean));
  constexpr int kMaxIterations = 100;
  constexpr double kGradientTolerance = 1e-10;
  constexpr double kPinnedLogit = 36.0; // fitted probability within ~2e-16 of 0 or 1
  for (int iter = 1; iter <= kMaxIterations; ++iter) {
    const Vector eta = d.x * beta;
    if (eta.cwiseAbs().maxCoeff() > kPinnedLogit)
      throw Error(ErrorCode::SeparationDetected, "fitted probabilities pinned at 0 or 1");
    const Vector p = eta.unaryExpr([](double e) { return 1.0 / (1.0 + std::exp(-e)); });
    const Vector grad = d.x.transpose() * wt.cwiseProduct(v - p);
    if (grad.norm() / total <= kGradientTolerance) {
      FittedModel m;
      m.spec = spec;
      m.fitted = p;
      m.residuals = v - p;
      m.theta = unscale(beta, d.center, d.scale);
      m.design_columns = column_names(1);
      m.iterations = iter;
      return m;
    }
    const Vector w = wt.cwiseProduct(p.cwiseProduct((1.0 - p.array()).matrix()));
    const Matrix info = d.x.transpose() * w.asDiagonal() * d.x;
    Eigen::LDLT<Matrix> ldlt(info);
    if (ldlt.info() != Eigen::Success || ldlt.vectorD().minCoeff() <= 1e-14 * total)
      throw Error(ErrorCode::SeparationDetected, "information matrix is singular");
    beta += ldlt.solve(grad);
  }
  throw Error(ErrorCode::NonConvergence,
              "logistic fit did not converge in " + std::to_string(kMaxIterations) + " iterations");
}

} // namespace

FittedModel fit(const ModelSpec &spec, const Vector &r, const Vector &v, const Vector &weights) {
  check_inputs(r, v, weights);
  if (spec.family == ModelFamily::LogisticLinear) {
    if (spec.transform != ResponseTransform::Identity)
      throw Error(ErrorCode::InvalidArgument, "logistic models take an untransformed response");
    return fit_logistic(spec, r, v, weights);
  }
  if (spec.transform == ResponseTransform::Logit)
    return fit_ols(spec, r, logit_transform(v), weights);
  return fit_ols(spec, r, v, weights);
}

FittedModel fit_or_fallback(const ModelSpec &spec, const Vector &r, const Vector &v) {
  if (spec.family != ModelFamily::LogisticLinear)
    return fit(spec, r, v);
  try {
    return fit(spec, r, v);
  } catch (const Error &e) {
    if (e.code() != ErrorCode::SeparationDetected && e.code() != ErrorCode::NonConvergence)
      throw;
    FittedModel m = fit(ModelSpec{ModelFamily::Linear, ResponseTransform::Identity}, r, v);
    m.fallback = true;
    m.warning = std::string("logistic fit failed (") + e.what() + "); used linear probability model";
    return m;
  }
}

Vector hat_apply(ModelFamily family, const Vector &r, const Vector &v) {
  if (!is_ols(family))
    throw Error(ErrorCode::InvalidArgument, "residual maker needs an OLS family");
  if (r.size() != v.size())
    throw Error(ErrorCode::InvalidArgument, "r and v lengths differ");
  const ScaledDesign d = scaled_design(r, degree(family));
  return v - d.x * checked_qr(d.x).solve(v);
}

} // namespace rdperm
