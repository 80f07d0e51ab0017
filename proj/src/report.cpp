#include "rdperm/report.hpp"

#include <cmath>
#include <ostream>

#include "rdperm/csv.hpp"
#include "rdperm/errors.hpp"

namespace rdperm {

std::string to_string(Direction direction) {
  return direction == Direction::TreatedAtOrBelow ? "below" : "above";
}

std::string to_string(Method method) { return method == Method::Exact ? "exact" : "monte_carlo"; }

namespace {

// Non-finite values become null.
Json num(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

Json opt(const std::optional<double> &v) { return v ? num(*v) : Json(nullptr); }

std::string sidedness_name(Sidedness s) { return s == Sidedness::TwoSided ? "two-sided" : "upper"; }

double number_or_inf(const Json &j, const char *key) {
  if (!j.contains(key) || j.at(key).is_null())
    return std::numeric_limits<double>::infinity();
  return j.at(key).get<double>();
}

} // namespace

Json to_json(const ModelSpec &spec) {
  return Json{{"family", to_string(spec.family)},
              {"transform", spec.transform == ResponseTransform::Logit ? "logit" : "identity"}};
}

Json to_json(const PermutationPlan &plan) {
  return Json{{"statistic", to_string(plan.statistic.kind)},
              {"sidedness", sidedness_name(plan.statistic.sidedness)},
              {"max_exact", plan.max_exact},
              {"draws", plan.draws},
              {"seed", plan.seed}};
}

Json to_json(const WindowSpec &window) {
  Json intervals = Json::array();
  for (const auto &iv : window.excluded_intervals)
    intervals.push_back(Json::array({iv.lo, iv.hi}));
  return Json{{"left", num(window.left)},
              {"right", num(window.right)},
              {"exclusions", window.exclusions},
              {"excluded_intervals", intervals},
              {"label", window.label}};
}

Json to_json(const WindowIndex &index) {
  return Json{{"n", index.n()}, {"n_treated", index.n_treated}, {"n_control", index.n_control}};
}

Json to_json(const TestResult &result) {
  Json j{{"observed", num(result.observed)},
         {"p_value", num(result.p_value)},
         {"method", to_string(result.method)},
         {"assignments", result.assignments},
         {"null_mean", num(result.null_mean)}};
  if (result.method == Method::MonteCarlo)
    j["mc_stderr"] = num(result.mc_stderr);
  return j;
}

Json to_json(const EffectInference &inf) {
  Json grid = Json::array();
  for (const auto &g : inf.grid)
    grid.push_back(Json{{"tau", g.tau}, {"p_value", g.p_value}});
  Json ci{{"lower", inf.ci.empty || !inf.ci.lower_bounded ? Json(nullptr) : num(inf.ci.lower)},
          {"upper", inf.ci.empty || !inf.ci.upper_bounded ? Json(nullptr) : num(inf.ci.upper)},
          {"lower_bounded", inf.ci.lower_bounded},
          {"upper_bounded", inf.ci.upper_bounded},
          {"empty", inf.ci.empty}};
  return Json{{"alpha", inf.alpha},
              {"n", inf.n},
              {"n_treated", inf.n_treated},
              {"n_control", inf.n_control},
              {"model", to_json(inf.model)},
              {"plan", to_json(inf.plan)},
              {"p_null", num(inf.null_test.p_value)},
              {"null_test", to_json(inf.null_test)},
              {"ci", ci},
              {"hl", num(inf.hl)},
              {"grid_spec", Json{{"lo", inf.grid_spec.lo}, {"hi", inf.grid_spec.hi}, {"step", inf.grid_spec.step}}},
              {"grid", grid},
              {"warnings", inf.warnings}};
}

Json to_json(const BalanceResult &result) {
  Json covs = Json::array();
  for (const auto &c : result.covariates)
    covs.push_back(Json{{"name", c.name},
                        {"model", c.model},
                        {"difference", num(c.difference)},
                        {"std_difference", num(c.std_difference)},
                        {"z", num(c.z)},
                        {"p_value", num(c.p_value)},
                        {"fallback", c.fallback},
                        {"dropped", c.dropped}});
  return Json{{"n_treated", result.n_treated},
              {"n_control", result.n_control},
              {"combined_stat", num(result.combined_stat)},
              {"df", result.df},
              {"p_chi2", num(result.p_chi2)},
              {"p_mc", opt(result.p_mc)},
              {"mc_stderr", opt(result.mc_stderr)},
              {"covariates", covs},
              {"warnings", result.warnings}};
}

Json to_json(const McCraryResult &result) {
  return Json{{"n", result.n},
              {"discrete", result.discrete},
              {"bin_width", num(result.bin_width)},
              {"bandwidth", num(result.bandwidth)},
              {"density_below", num(result.density_below)},
              {"density_above", num(result.density_above)},
              {"theta", num(result.theta)},
              {"se", num(result.se)},
              {"p_value", num(result.p_value)},
              {"defined", result.defined},
              {"diagnostic", result.diagnostic},
              {"bins", result.bins.size()}};
}

Json to_json(const BandwidthSweep &sweep) {
  Json rows = Json::array();
  for (const auto &r : sweep.results)
    rows.push_back(Json{{"b", r.bandwidth},
                        {"tested", r.tested},
                        {"balance_p", opt(r.balance_p)},
                        {"mccrary_p", opt(r.mccrary_p)},
                        {"n", r.n},
                        {"n_treated", r.n_treated},
                        {"n_control", r.n_control},
                        {"rejected", r.rejected},
                        {"note", r.note}});
  return Json{{"alpha_f", sweep.alpha_f},
              {"alpha_g", sweep.alpha_g},
              {"error_budget", sweep.error_budget()},
              {"candidates", sweep.candidates},
              {"b_star", opt(sweep.b_star)},
              {"verdict", sweep.b_star ? "selected" : "AllRejected: no valid window"},
              {"plausible_set", sweep.plausible_set},
              {"results", rows}};
}

Json to_json(const ExclusionResult &result) {
  Json steps = Json::array();
  for (const auto &s : result.steps)
    steps.push_back(Json{{"description", s.description}, {"p_value", num(s.p_value)}, {"defined", s.defined}});
  return Json{{"passed", result.passed},
              {"verdict", result.passed ? "passed" : "ExhaustedWithoutPass"},
              {"k_star", opt(result.k_star)},
              {"window", to_json(result.window)},
              {"steps", steps}};
}

Json to_json(const ExperimentReport &report) {
  Json details = Json::object();
  for (const auto &[k, v] : report.details)
    details[k] = num(v);
  return Json{{"name", report.name},
              {"n_seeds", report.n_seeds},
              {"metric", report.metric},
              {"value", num(report.value)},
              {"mc_stderr", num(report.mc_stderr)},
              {"lower", num(report.lower)},
              {"upper", num(report.upper)},
              {"pass", report.pass},
              {"gating", report.gating},
              {"details", details}};
}

WindowSpec window_from_json(const Json &j) {
  try {
    WindowSpec w;
    w.left = number_or_inf(j, "left");
    w.right = number_or_inf(j, "right");
    if (j.contains("exclusions"))
      w.exclusions = j.at("exclusions").get<std::vector<double>>();
    if (j.contains("excluded_intervals"))
      for (const auto &iv : j.at("excluded_intervals"))
        w.excluded_intervals.push_back(ExcludedInterval{iv.at(0).get<double>(), iv.at(1).get<double>()});
    w.label = j.value("label", std::string());
    return w;
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorCode::Config, std::string("bad window: ") + e.what());
  }
}

DgpSpec dgp_from_json(const Json &j) {
  try {
    DgpSpec s;
    s.n = j.value("n", s.n);
    if (j.contains("running")) {
      const Json &r = j.at("running");
      const std::string kind = r.value("kind", std::string("uniform"));
      if (kind == "uniform")
        s.running.kind = RunningDistribution::Kind::Uniform;
      else if (kind == "discrete_grid")
        s.running.kind = RunningDistribution::Kind::DiscreteGrid;
      else
        throw Error(ErrorCode::Config, "unknown running distribution '" + kind + "'");
      s.running.lo = r.value("lo", s.running.lo);
      s.running.hi = r.value("hi", s.running.hi);
      s.running.step = r.value("step", s.running.step);
      s.running.weights = r.value("weights", std::vector<double>{});
    }
    s.cutoff = j.value("cutoff", s.cutoff);
    const std::string treated = j.value("treated", std::string("below"));
    if (treated != "below" && treated != "above")
      throw Error(ErrorCode::Config, "treated must be 'below' or 'above'");
    s.direction = treated == "below" ? Direction::TreatedAtOrBelow : Direction::TreatedAbove;
    s.yc_poly = j.value("yc_poly", s.yc_poly);
    s.noise_sd = j.value("noise_sd", s.noise_sd);
    if (j.contains("effect")) {
      const Json &e = j.at("effect");
      const std::string kind = e.value("kind", std::string("constant"));
      if (kind == "constant")
        s.effect.kind = EffectModel::Kind::Constant;
      else if (kind == "random_around_mean")
        s.effect.kind = EffectModel::Kind::RandomAroundMean;
      else
        throw Error(ErrorCode::Config, "unknown effect kind '" + kind + "'");
      s.effect.tau0 = e.value("tau0", 0.0);
      s.effect.eta_sd = e.value("eta_sd", 0.0);
    }
    if (j.contains("covariates"))
      for (const auto &c : j.at("covariates"))
        s.covariates.push_back(CovariateDgp{c.at("name").get<std::string>(),
                                            c.value("mean_poly", std::vector<double>{0.0}),
                                            c.value("noise_sd", 1.0), c.value("binary", false)});
    if (j.contains("manipulation") && !j.at("manipulation").is_null()) {
      const Json &m = j.at("manipulation");
      Manipulation man;
      man.heap_value = m.value("heap_value", man.heap_value);
      man.fraction = m.value("fraction", man.fraction);
      man.source_value = m.value("source_value", man.source_value);
      man.source_radius = m.value("source_radius", man.source_radius);
      s.manipulation = man;
    }
    return s;
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorCode::Config, std::string("bad dgp: ") + e.what());
  }
}

void write_sweep_csv(std::ostream &out, const BandwidthSweep &sweep) {
  auto cell = [](const std::optional<double> &v) { return v ? format_table_number(*v) : std::string("NA"); };
  out << "b,balance_p,mccrary_p,n,n_T,n_C\n";
  for (const auto &r : sweep.results)
    out << format_table_number(r.bandwidth) << ',' << cell(r.balance_p) << ',' << cell(r.mccrary_p) << ','
        << r.n << ',' << r.n_treated << ',' << r.n_control << '\n';
}

void write_bins_csv(std::ostream &out, const McCraryResult &result) {
  out << "midpoint,count,height,side\n";
  for (const auto &b : result.bins)
    out << format_number(b.midpoint) << ',' << b.count << ',' << format_number(b.height) << ','
        << (b.lower_side ? "below" : "above") << '\n';
}

} // namespace rdperm
