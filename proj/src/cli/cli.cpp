#include "rdperm/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "rdperm/csv.hpp"
#include "rdperm/errors.hpp"
#include "rdperm/report.hpp"

namespace rdperm::cli {
namespace {

struct Options {
  std::string data;
  std::string running;
  std::string outcome;
  std::string covariates;
  double cutoff = 0.0;
  std::string treated = "below";
  bool center = false;
  std::string model = "linear";
  std::string stat = "abs-diff-means";
  double window_left = 0.0;
  double window_right = 0.0;
  std::string exclude;
  double alpha = 0.05;
  double alpha_f = 0.1;
  double alpha_g = 0.05;
  std::uint64_t permutations = 100'000;
  std::uint64_t max_exact = 200'000;
  std::uint64_t seed = 0;
  double grid_lo = 0.0;
  double grid_hi = 0.0;
  double grid_step = 0.0;
  std::string candidates;
  std::string strategy = "donut";
  std::string hypotheses;
  bool exhaustive = false;
  unsigned threads = 1;
  std::string out;
  std::string plot_out;
  double bin_width = 0.0;
  double bandwidth = 0.0;
  double donut_step = 0.0;
  std::string config;

  // Set after parsing.
  // Every subcommand registers its own copy of a flag.
  std::map<std::string, std::vector<const CLI::Option *>> given;
  bool has(const std::string &flag) const {
    auto it = given.find(flag);
    if (it == given.end())
      return false;
    return std::any_of(it->second.begin(), it->second.end(), [](auto *opt) { return opt->count() > 0; });
  }
};

class Registry {
public:
  Registry(CLI::App *app, Options &o) : app_(app), o_(o) {}

  template <class T> Registry &opt(const std::string &flag, T &target, const std::string &help) {
    o_.given[flag].push_back(app_->add_option(flag, target, help));
    return *this;
  }
  Registry &flag(const std::string &name, bool &target, const std::string &help) {
    o_.given[name].push_back(app_->add_flag(name, target, help));
    return *this;
  }
  Registry &choice(const std::string &flag, std::string &target, std::vector<std::string> values,
                   const std::string &help) {
    o_.given[flag].push_back(app_->add_option(flag, target, help)->check(CLI::IsMember(values))->capture_default_str());
    return *this;
  }

private:
  CLI::App *app_;
  Options &o_;
};

void data_options(Registry &r, Options &o) {
  r.opt("--data", o.data, "CSV file with one row per unit")
      .opt("--running", o.running, "running-variable column")
      .opt("--outcome", o.outcome, "outcome column")
      .opt("--covariates", o.covariates, "comma list; name:binary or name:logit to force a model")
      .opt("--cutoff", o.cutoff, "cutoff in running-variable units")
      .choice("--treated", o.treated, {"below", "above"}, "treated side (below means r <= cutoff)")
      .flag("--center", o.center, "subtract the cutoff from r");
}

void window_options(Registry &r, Options &o) {
  r.opt("--window-left", o.window_left, "window extent below the cutoff")
      .opt("--window-right", o.window_right, "window extent above the cutoff")
      .opt("--exclude", o.exclude, "comma list of running values to drop");
}

void plan_options(Registry &r, Options &o) {
  r.choice("--stat", o.stat, {"diff-means", "abs-diff-means", "sum-cross", "rank-studentized"}, "test statistic")
      .opt("--permutations", o.permutations, "Monte Carlo draws")
      .opt("--max-exact", o.max_exact, "enumerate when C(n, n_T) is at most this")
      .opt("--seed", o.seed, "seed for every random draw (required)")
      .opt("--threads", o.threads, "worker threads; results do not depend on it");
}

void model_option(Registry &r, Options &o) {
  r.choice("--model", o.model, {"constant", "linear", "quadratic"}, "outcome model in r");
}

void output_options(Registry &r, Options &o) {
  r.opt("--out", o.out, "JSON report path").opt("--plot-out", o.plot_out, "CSV output path");
}

[[noreturn]] void config_error(const std::string &what) { throw Error(ErrorCode::Config, what); }

void require(const Options &o, std::initializer_list<const char *> flags) {
  for (const char *f : flags)
    if (!o.has(f))
      config_error(std::string("missing required option ") + f);
}

std::vector<std::string> split(const std::string &text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty())
      out.push_back(item);
  }
  return out;
}

double parse_double(const std::string &s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception &) {
    config_error("not a number: '" + s + "'");
  }
  if (used != s.size() || !std::isfinite(v))
    config_error("not a finite number: '" + s + "'");
  return v;
}

std::vector<double> parse_doubles(const std::string &text) {
  std::vector<double> out;
  for (const auto &s : split(text))
    out.push_back(parse_double(s));
  return out;
}

struct Covariates {
  std::vector<CovariateColumn> columns;
  std::vector<std::string> logit;
};

Covariates parse_covariates(const std::string &text) {
  Covariates c;
  for (const auto &item : split(text)) {
    const auto colon = item.find(':');
    CovariateColumn col{item.substr(0, colon), std::nullopt};
    if (colon != std::string::npos) {
      const std::string tag = item.substr(colon + 1);
      if (tag == "binary")
        col.kind = CovariateKind::Binary;
      else if (tag == "logit") {
        col.kind = CovariateKind::Continuous;
        c.logit.push_back(col.name);
      } else
        config_error("unknown covariate tag '" + tag + "' (use binary or logit)");
    }
    c.columns.push_back(col);
  }
  return c;
}

ModelSpec model_spec(const Options &o) {
  ModelSpec m;
  if (o.model == "constant")
    m.family = ModelFamily::Constant;
  else if (o.model == "quadratic")
    m.family = ModelFamily::Quadratic;
  return m;
}

StatisticKind stat_kind(const std::string &s) {
  if (s == "abs-diff-means")
    return StatisticKind::AbsDiffMeans;
  if (s == "sum-cross")
    return StatisticKind::SumCross;
  if (s == "rank-studentized")
    return StatisticKind::RankSumStudentized;
  return StatisticKind::DiffMeans;
}

PermutationPlan plan_of(const Options &o) {
  require(o, {"--seed"});
  PermutationPlan p;
  p.draws = o.permutations;
  p.max_exact = o.max_exact;
  p.seed = o.seed;
  p.statistic.kind = stat_kind(o.stat);
  p.threads = std::max(1u, o.threads);
  return p;
}

void check_level(double a, const char *name) {
  if (!(a > 0.0 && a < 1.0))
    config_error(std::string(name) + " must lie in (0, 1)");
}

struct Loaded {
  UnitFrame frame;
  std::vector<std::string> logit;
  std::size_t rejected_rows;
  double shift; // subtracted from user-supplied r values
};

Loaded load(const Options &o, bool need_outcome) {
  require(o, {"--data", "--running", "--cutoff"});
  if (need_outcome)
    require(o, {"--outcome"});
  FrameSchema schema;
  schema.running = o.running;
  const Covariates covs = parse_covariates(o.covariates);
  schema.covariates = covs.columns;
  // Commands without an outcome reuse the running column as a placeholder.
  schema.outcome = o.has("--outcome") ? o.outcome : o.running;
  const Direction dir = o.treated == "below" ? Direction::TreatedAtOrBelow : Direction::TreatedAbove;
  LoadedFrame lf = load_frame(o.data, schema, o.cutoff, dir, LoadOptions{o.center});
  return Loaded{std::move(lf.frame), covs.logit, lf.rejected_rows, o.center ? o.cutoff : 0.0};
}

WindowSpec window_of(const Options &o, double shift) {
  WindowSpec w;
  if (o.has("--window-left"))
    w.left = o.window_left;
  if (o.has("--window-right"))
    w.right = o.window_right;
  if (!(w.left > 0.0) || !(w.right > 0.0))
    config_error("window extents must be positive");
  for (double v : parse_doubles(o.exclude))
    w.exclusions.push_back(v - shift);
  return w;
}

std::optional<GridSpec> grid_of(const Options &o) {
  const int set = int(o.has("--grid-lo")) + int(o.has("--grid-hi")) + int(o.has("--grid-step"));
  if (set == 0)
    return std::nullopt;
  if (set != 3)
    config_error("--grid-lo, --grid-hi and --grid-step go together");
  if (!(o.grid_step > 0.0) || !(o.grid_hi >= o.grid_lo))
    config_error("grid needs --grid-hi >= --grid-lo and --grid-step > 0");
  return GridSpec{o.grid_lo, o.grid_hi, o.grid_step};
}

McCraryOptions mccrary_options(const Options &o) {
  McCraryOptions m;
  if (o.has("--bin-width"))
    m.bin_width = o.bin_width;
  if (o.has("--bandwidth"))
    m.bandwidth = o.bandwidth;
  return m;
}

Json config_echo(const std::string &command, const Options &o, const Loaded &l) {
  Json cols = Json::array();
  for (const auto &c : l.frame.covariates())
    cols.push_back(Json{{"name", c.name}, {"kind", c.kind == CovariateKind::Binary ? "binary" : "continuous"}});
  Json j{{"command", command},
         {"data", o.data},
         {"running", o.running},
         {"cutoff", o.cutoff},
         {"treated", o.treated},
         {"center", o.center},
         {"rows_used", l.frame.n()},
         {"rows_rejected", l.rejected_rows}};
  if (o.has("--outcome"))
    j["outcome"] = o.outcome;
  j["covariates"] = cols;
  j["logit"] = l.logit;
  return j;
}

Json envelope(const std::string &command) {
  return Json{{"schema_version", kReportSchemaVersion}, {"tool_version", kToolVersion}, {"command", command}};
}

void write_file(const std::string &path, const std::string &text) {
  std::ofstream f(path, std::ios::binary);
  if (!f)
    throw Error(ErrorCode::Io, "cannot write '" + path + "'");
  f << text;
  if (!f)
    throw Error(ErrorCode::Io, "failed writing '" + path + "'");
}

void emit_json(const Options &o, const Json &j) {
  if (!o.out.empty())
    write_file(o.out, j.dump(2) + "\n");
}

std::string cell(double v) { return format_table_number(v); }
std::string cell(const std::optional<double> &v) { return v ? format_table_number(*v) : "NA"; }

std::string ci_text(const ConfidenceInterval &ci) {
  if (ci.empty)
    return "empty";
  return "(" + (ci.lower_bounded ? cell(ci.lower) : std::string("-Inf")) + ", " +
         (ci.upper_bounded ? cell(ci.upper) : std::string("Inf")) + ")";
}

void print_warnings(std::ostream &out, const std::vector<std::string> &warnings) {
  for (const auto &w : warnings)
    out << "warning: " << w << '\n';
}

// --- subcommands -------------------------------------------------------------

int cmd_analyze(const Options &o, std::ostream &out) {
  check_level(o.alpha, "--alpha");
  check_level(o.alpha_f, "--alpha-f");
  check_level(o.alpha_g, "--alpha-g");
  const PermutationPlan plan = plan_of(o);
  const ModelSpec model = model_spec(o);
  const std::optional<GridSpec> grid = grid_of(o);
  const Loaded l = load(o, true);
  const WindowSpec window = window_of(o, l.shift);
  const WindowIndex idx = realize_window(l.frame, window);

  Json report = envelope("analyze");
  Json config = config_echo("analyze", o, l);
  config["window"] = to_json(window);
  config["model"] = to_json(model);
  config["plan"] = to_json(plan);
  config["alpha"] = o.alpha;
  config["alpha_f"] = o.alpha_f;
  config["alpha_g"] = o.alpha_g;
  config["grid"] = grid ? Json{{"lo", grid->lo}, {"hi", grid->hi}, {"step", grid->step}} : Json(nullptr);
  report["config"] = config;
  report["window"] = to_json(idx);
  std::vector<std::string> warnings;

  out << "window: n = " << idx.n() << " (treated " << idx.n_treated << ", control " << idx.n_control << ")\n";
  out << "specification tests (family-wise budget alpha_F + alpha_G = " << cell(o.alpha_f + o.alpha_g) << ")\n";
  if (!l.frame.covariates().empty()) {
    BalanceOptions bopt;
    bopt.permutation = true;
    const BalanceResult bal =
        balance_test(l.frame, window, default_covariate_models(l.frame, model, l.logit), plan, bopt);
    report["balance"] = to_json(bal);
    out << "  balance: chi2 p = " << cell(bal.p_chi2) << ", permutation p = " << cell(bal.p_mc)
        << " (alpha_F = " << cell(o.alpha_f) << ")\n";
    if (bal.p_chi2 <= o.alpha_f)
      warnings.push_back("balance test rejects at alpha_F; the window may be too wide");
    warnings.insert(warnings.end(), bal.warnings.begin(), bal.warnings.end());
  } else {
    report["balance"] = nullptr;
    out << "  balance: no covariates\n";
  }
  try {
    const McCraryResult mc = mccrary_test(l.frame, window, mccrary_options(o));
    report["mccrary"] = to_json(mc);
    out << "  density: p = " << (mc.defined ? cell(mc.p_value) : std::string("NA")) << " (alpha_G = " << cell(o.alpha_g)
        << ")\n";
    if (!mc.defined)
      warnings.push_back(mc.diagnostic);
    else if (mc.p_value <= o.alpha_g)
      warnings.push_back("density test rejects at alpha_G; consider donut or surgical exclusion");
  } catch (const Error &e) {
    report["mccrary"] = nullptr;
    warnings.push_back(std::string("density test unavailable: ") + e.what());
    out << "  density: unavailable\n";
  }

  const EffectInference inf = invert_ci(l.frame, window, model, plan, o.alpha, grid);
  report["effect"] = to_json(inf);
  warnings.insert(warnings.end(), inf.warnings.begin(), inf.warnings.end());
  report["warnings"] = warnings;

  out << "effect (" << to_string(plan.statistic.kind) << ", " << to_string(model) << ")\n";
  out << "  p-value      " << std::setw(28) << std::left << (cell(1.0 - o.alpha) + " CI") << "HL estimate  n\n";
  out << "  " << std::setw(13) << cell(inf.null_test.p_value) << std::setw(28) << ci_text(inf.ci) << std::setw(13)
      << cell(inf.hl) << inf.n << '\n'
      << std::right;
  print_warnings(out, warnings);
  emit_json(o, report);
  return kOk;
}

int cmd_balance(const Options &o, std::ostream &out) {
  check_level(o.alpha_f, "--alpha-f");
  const PermutationPlan plan = plan_of(o);
  const ModelSpec model = model_spec(o);
  require(o, {"--covariates"});
  const Loaded l = load(o, false);
  const WindowSpec window = window_of(o, l.shift);
  BalanceOptions bopt;
  bopt.permutation = true;
  const BalanceResult bal =
      balance_test(l.frame, window, default_covariate_models(l.frame, model, l.logit), plan, bopt);

  Json report = envelope("balance");
  Json config = config_echo("balance", o, l);
  config["window"] = to_json(window);
  config["model"] = to_json(model);
  config["plan"] = to_json(plan);
  config["alpha_f"] = o.alpha_f;
  report["config"] = config;
  report["balance"] = to_json(bal);

  out << "covariate        diff        std_diff    z           p\n";
  for (const auto &c : bal.covariates) {
    out << std::left << std::setw(17) << c.name << std::setw(12) << cell(c.difference) << std::setw(12)
        << cell(c.std_difference) << std::setw(12) << cell(c.z) << cell(c.p_value) << (c.dropped ? " (dropped)" : "")
        << '\n'
        << std::right;
  }
  out << "combined: stat = " << cell(bal.combined_stat) << ", df = " << bal.df << ", chi2 p = " << cell(bal.p_chi2)
      << ", permutation p = " << cell(bal.p_mc) << '\n';
  out << (bal.p_chi2 <= o.alpha_f ? "verdict: imbalance at alpha_F = " : "verdict: no imbalance at alpha_F = ")
      << cell(o.alpha_f) << '\n';
  print_warnings(out, bal.warnings);
  emit_json(o, report);
  return kOk;
}

int cmd_mccrary(const Options &o, std::ostream &out) {
  check_level(o.alpha_g, "--alpha-g");
  const Loaded l = load(o, false);
  const WindowSpec window = window_of(o, l.shift);
  const McCraryResult mc = mccrary_test(l.frame, window, mccrary_options(o));
  Json report = envelope("mccrary");
  Json config = config_echo("mccrary", o, l);
  config["window"] = to_json(window);
  config["alpha_g"] = o.alpha_g;
  report["config"] = config;
  report["mccrary"] = to_json(mc);
  out << "density test: n = " << mc.n << (mc.discrete ? " (lattice support)" : "") << ", bin width = "
      << cell(mc.bin_width) << ", bandwidth = " << cell(mc.bandwidth) << '\n';
  if (mc.defined)
    out << "theta = " << cell(mc.theta) << ", se = " << cell(mc.se) << ", p = " << cell(mc.p_value)
        << (mc.p_value <= o.alpha_g ? "  (rejects at alpha_G)" : "") << '\n';
  else
    out << "p = NA: " << mc.diagnostic << '\n';
  if (!o.plot_out.empty()) {
    std::ostringstream csv;
    write_bins_csv(csv, mc);
    write_file(o.plot_out, csv.str());
  }
  emit_json(o, report);
  return kOk;
}

// Inline JSON when the text starts with '[', otherwise a file holding it.
std::vector<std::vector<double>> read_hypotheses(const std::string &text, double shift) {
  std::string source = text;
  if (text.find_first_not_of(" \t") == std::string::npos || text[text.find_first_not_of(" \t")] != '[') {
    std::ifstream f(text);
    if (!f)
      throw Error(ErrorCode::Io, "cannot open hypotheses file '" + text + "'");
    source.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  }
  try {
    const Json j = Json::parse(source);
    auto sets = j.get<std::vector<std::vector<double>>>();
    for (auto &s : sets)
      for (auto &v : s)
        v -= shift;
    return sets;
  } catch (const nlohmann::json::exception &e) {
    config_error(std::string("hypotheses must be a JSON list of lists of numbers: ") + e.what());
  }
}

std::vector<double> candidates_of(const Options &o, const UnitFrame &frame) {
  if (!o.has("--candidates"))
    return default_candidates(frame);
  std::vector<double> c = parse_doubles(o.candidates);
  std::sort(c.begin(), c.end(), std::greater<>());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  if (c.empty() || !(c.back() > 0.0))
    config_error("--candidates must be positive bandwidths");
  return c;
}

int cmd_select_window(const Options &o, std::ostream &out) {
  check_level(o.alpha_f, "--alpha-f");
  check_level(o.alpha_g, "--alpha-g");
  const PermutationPlan plan = plan_of(o);
  const ModelSpec model = model_spec(o);
  if (o.strategy != "donut" && o.strategy != "surgical" && o.strategy != "none")
    config_error("--strategy must be donut, surgical or none");
  if (o.strategy == "surgical")
    require(o, {"--hypotheses"});
  const Loaded l = load(o, false);
  const WindowSpec base = window_of(o, l.shift);
  const McCraryOptions mopt = mccrary_options(o);

  Json report = envelope("select-window");
  Json config = config_echo("select-window", o, l);
  config["window"] = to_json(base);
  config["model"] = to_json(model);
  config["plan"] = to_json(plan);
  config["alpha_f"] = o.alpha_f;
  config["alpha_g"] = o.alpha_g;
  config["strategy"] = o.strategy;
  config["exhaustive"] = o.exhaustive;

  WindowSpec fixed = base;
  if (o.strategy != "none") {
    ExclusionResult ex;
    const Vector &r = l.frame.r();
    const auto lattice = detect_lattice(std::vector<double>(r.data(), r.data() + r.size()));
    if (o.strategy == "donut") {
      DonutOptions dopt;
      dopt.include_empty_first = !lattice;
      dopt.mccrary = mopt;
      double step = o.donut_step;
      if (!o.has("--donut-step"))
        step = lattice ? *lattice : default_bin_width(std::vector<double>(r.data(), r.data() + r.size()));
      config["donut_step"] = step;
      ex = donut_exclusion(l.frame, base, o.alpha_g, step, dopt);
    } else {
      const auto hyp = read_hypotheses(o.hypotheses, l.shift);
      config["hypotheses"] = hyp;
      ex = surgical_exclusion(l.frame, base, hyp, o.alpha_g, mopt);
    }
    report["exclusion"] = to_json(ex);
    out << o.strategy << " exclusion:\n";
    for (const auto &s : ex.steps)
      out << "  " << s.description << ": density p = " << (s.defined ? cell(s.p_value) : std::string("NA")) << '\n';
    if (ex.passed) {
      out << "  selected: " << (ex.window.label.empty() ? std::string("no exclusion") : ex.window.label) << '\n';
      fixed = ex.window;
    } else {
      out << "  ExhaustedWithoutPass: no hypothesis passes at alpha_G = " << cell(o.alpha_g)
          << "; extend the list or the sweep\n";
    }
  }

  std::optional<WindowSpec> chosen;
  if (!l.frame.covariates().empty()) {
    const std::vector<double> cands = candidates_of(o, l.frame);
    config["candidates"] = cands;
    SweepOptions sopt;
    sopt.alpha_g = o.alpha_g;
    sopt.exhaustive = o.exhaustive;
    sopt.base = fixed;
    sopt.mccrary = mopt;
    const BandwidthSweep sweep = select_bandwidth(l.frame, cands, default_covariate_models(l.frame, model, l.logit),
                                                  o.alpha_f, plan, sopt);
    report["sweep"] = to_json(sweep);
    out << "bandwidth sweep (alpha_F = " << cell(o.alpha_f) << ", error budget " << cell(sweep.error_budget())
        << ")\n  b         balance_p  mccrary_p  n\n";
    for (const auto &row : sweep.results)
      if (row.tested)
        out << "  " << std::left << std::setw(10) << cell(row.bandwidth) << std::setw(11) << cell(row.balance_p)
            << std::setw(11) << cell(row.mccrary_p) << row.n << '\n'
            << std::right;
    if (sweep.b_star) {
      WindowSpec w = fixed;
      w.left = std::min(w.left, *sweep.b_star);
      w.right = std::min(w.right, *sweep.b_star);
      chosen = w;
      out << "b* = " << cell(*sweep.b_star) << '\n';
    } else {
      out << "AllRejected: no valid window among the candidates\n";
    }
    if (!o.plot_out.empty()) {
      std::ostringstream csv;
      write_sweep_csv(csv, sweep);
      write_file(o.plot_out, csv.str());
    }
  } else {
    chosen = fixed;
  }
  report["config"] = config;
  report["chosen_window"] = chosen ? to_json(*chosen) : Json(nullptr);
  emit_json(o, report);
  return kOk;
}

int cmd_robustness(const Options &o, std::ostream &out) {
  check_level(o.alpha, "--alpha");
  check_level(o.alpha_f, "--alpha-f");
  check_level(o.alpha_g, "--alpha-g");
  const PermutationPlan plan = plan_of(o);
  const ModelSpec model = model_spec(o);
  const Loaded l = load(o, true);
  const WindowSpec base = window_of(o, l.shift);
  const std::vector<double> cands = candidates_of(o, l.frame);
  const McCraryOptions mopt = mccrary_options(o);

  BandwidthSweep sweep;
  if (!l.frame.covariates().empty()) {
    SweepOptions sopt;
    sopt.alpha_g = o.alpha_g;
    sopt.exhaustive = true;
    sopt.base = base;
    sopt.mccrary = mopt;
    sweep = select_bandwidth(l.frame, cands, default_covariate_models(l.frame, model, l.logit), o.alpha_f, plan, sopt);
  } else {
    sweep.candidates = cands;
    sweep.alpha_f = o.alpha_f;
    sweep.alpha_g = o.alpha_g;
    for (double b : cands) {
      SweepRow row;
      row.bandwidth = b;
      WindowSpec w = base;
      w.left = b;
      w.right = b;
      const WindowIndex idx = window_members(l.frame, w);
      row.n = idx.n();
      row.n_treated = idx.n_treated;
      row.n_control = idx.n_control;
      row.tested = idx.n_treated >= 2 && idx.n_control >= 2;
      if (row.tested) {
        try {
          const McCraryResult mc = mccrary_test(l.frame, w, mopt);
          if (mc.defined)
            row.mccrary_p = mc.p_value;
        } catch (const Error &) {
        }
      }
      sweep.results.push_back(row);
    }
  }

  Json rows = Json::array();
  std::ostringstream csv;
  csv << "b,balance_p,mccrary_p,n,n_T,n_C,p_value,ci_lower,ci_upper,hl\n";
  std::ostringstream table;
  table << std::left << std::setw(10) << "b" << std::setw(11) << "balance_p" << std::setw(11) << "mccrary_p"
        << std::setw(8) << "n" << std::setw(11) << "p_value" << std::setw(26) << "CI"
        << "HL\n";
  for (const auto &row : sweep.results) {
    if (row.n_treated < 2 || row.n_control < 2)
      continue;
    WindowSpec w = base;
    w.left = row.bandwidth;
    w.right = row.bandwidth;
    const EffectInference inf = invert_ci(l.frame, w, model, plan, o.alpha);
    const std::string lo = inf.ci.empty ? "NA" : inf.ci.lower_bounded ? cell(inf.ci.lower) : "-Inf";
    const std::string hi = inf.ci.empty ? "NA" : inf.ci.upper_bounded ? cell(inf.ci.upper) : "Inf";
    csv << cell(row.bandwidth) << ',' << cell(row.balance_p) << ',' << cell(row.mccrary_p) << ',' << row.n << ','
        << row.n_treated << ',' << row.n_control << ',' << cell(inf.null_test.p_value) << ',' << lo << ',' << hi
        << ',' << cell(inf.hl) << '\n';
    table << std::setw(10) << cell(row.bandwidth) << std::setw(11) << cell(row.balance_p) << std::setw(11)
          << cell(row.mccrary_p) << std::setw(8) << row.n << std::setw(11) << cell(inf.null_test.p_value)
          << std::setw(26) << ci_text(inf.ci) << cell(inf.hl) << '\n';
    Json j = to_json(inf);
    j.erase("grid");
    rows.push_back(Json{{"b", row.bandwidth},
                        {"balance_p", row.balance_p ? Json(*row.balance_p) : Json(nullptr)},
                        {"mccrary_p", row.mccrary_p ? Json(*row.mccrary_p) : Json(nullptr)},
                        {"effect", j}});
  }
  out << table.str() << std::right;
  if (sweep.b_star)
    out << "b* = " << cell(*sweep.b_star) << " (alpha_F = " << cell(o.alpha_f) << ")\n";
  else if (!l.frame.covariates().empty())
    out << "AllRejected: every candidate fails the balance test\n";

  Json report = envelope("robustness-table");
  Json config = config_echo("robustness-table", o, l);
  config["window"] = to_json(base);
  config["model"] = to_json(model);
  config["plan"] = to_json(plan);
  config["alpha"] = o.alpha;
  config["alpha_f"] = o.alpha_f;
  config["alpha_g"] = o.alpha_g;
  config["candidates"] = cands;
  report["config"] = config;
  report["sweep"] = to_json(sweep);
  report["rows"] = rows;
  if (!o.plot_out.empty())
    write_file(o.plot_out, csv.str());
  emit_json(o, report);
  return kOk;
}

// Bins edged at the cutoff, as in the density test.
// Bins are (lo, hi] with edges at c + k * width, so the cutoff closes the
// last bin below it. The slack keeps lattice values on their upper edge.
long bin_of(double r, double c, double width) {
  constexpr double slack = 1e-9;
  if (r <= c)
    return -static_cast<long>(std::floor((c - r) / width + slack)) - 1;
  return static_cast<long>(std::max(1.0, std::ceil((r - c) / width - slack)));
}

int cmd_plotdata(const Options &o, std::ostream &out) {
  require(o, {"--plot-out"});
  const Loaded l = load(o, o.has("--outcome"));
  const WindowSpec window = window_of(o, l.shift);
  const WindowIndex idx = window_members(l.frame, window);
  if (idx.n() == 0)
    throw Error(ErrorCode::DegenerateWindow, "window holds no units");
  const Vector &r = l.frame.r();
  const double c = l.frame.cutoff();
  std::vector<double> rv;
  for (Index i : idx.indices)
    rv.push_back(r[i]);
  const auto lattice = detect_lattice(rv);

  // Frequency table: support points for lattice data, bins otherwise.
  double width = o.has("--bin-width") ? o.bin_width : 0.0;
  if (!(width > 0.0))
    width = lattice ? *lattice : default_bin_width(rv);
  std::map<long, std::vector<Index>> bins;
  for (Index i : idx.indices)
    bins[bin_of(r[i], c, width)].push_back(i);

  std::ostringstream freq;
  if (lattice && !o.has("--bin-width")) {
    std::map<double, Index> counts;
    for (double v : rv)
      ++counts[v];
    freq << "r,count\n";
    for (const auto &[v, n] : counts)
      freq << format_number(v) << ',' << n << '\n';
  } else {
    freq << "lower,upper,midpoint,count\n";
    for (const auto &[k, members] : bins) {
      const double lo = c + static_cast<double>(k < 0 ? k : k - 1) * width;
      freq << format_number(lo) << ',' << format_number(lo + width) << ',' << format_number(lo + width / 2) << ','
           << members.size() << '\n';
    }
  }

  auto binned = [&](const Vector &values, std::ostream &csv, const std::string &label) {
    for (const auto &[k, members] : bins) {
      const double lo = c + static_cast<double>(k < 0 ? k : k - 1) * width;
      double sum = 0.0;
      for (Index i : members)
        sum += values[i];
      if (!label.empty())
        csv << label << ',';
      csv << format_number(lo) << ',' << format_number(lo + width) << ',' << format_number(lo + width / 2) << ','
          << members.size() << ',' << format_number(sum / static_cast<double>(members.size())) << '\n';
    }
  };

  const std::string prefix = o.plot_out;
  write_file(prefix + "_frequency.csv", freq.str());
  std::vector<std::string> written{prefix + "_frequency.csv"};
  if (o.has("--outcome")) {
    std::ostringstream csv;
    csv << "lower,upper,midpoint,count,mean\n";
    binned(l.frame.y(), csv, "");
    write_file(prefix + "_outcome.csv", csv.str());
    written.push_back(prefix + "_outcome.csv");
  }
  if (!l.frame.covariates().empty()) {
    std::ostringstream csv;
    csv << "covariate,lower,upper,midpoint,count,mean\n";
    for (const auto &cov : l.frame.covariates())
      binned(cov.values, csv, cov.name);
    write_file(prefix + "_covariates.csv", csv.str());
    written.push_back(prefix + "_covariates.csv");
  }
  for (const auto &w : written)
    out << "wrote " << w << '\n';
  return kOk;
}

void write_frame_csv(const std::string &path, const UnitFrame &frame) {
  std::ostringstream csv;
  csv << "r,y";
  for (const auto &c : frame.covariates())
    csv << ',' << c.name;
  csv << '\n';
  for (Index i = 0; i < frame.n(); ++i) {
    csv << format_number(frame.r()[i]) << ',' << format_number(frame.y()[i]);
    for (const auto &c : frame.covariates())
      csv << ',' << format_number(c.values[i]);
    csv << '\n';
  }
  write_file(path, csv.str());
}

int cmd_simulate(const Options &o, std::ostream &out) {
  if (o.config.empty())
    config_error("simulate needs an experiment config file");
  std::ifstream f(o.config);
  if (!f)
    throw Error(ErrorCode::Io, "cannot open config '" + o.config + "'");
  Json cfg;
  try {
    cfg = Json::parse(f);
  } catch (const nlohmann::json::exception &e) {
    config_error(std::string("config is not valid JSON: ") + e.what());
  }
  if (!cfg.is_object() || !cfg.contains("experiment"))
    config_error("config needs an \"experiment\" field");

  ExperimentReport rep;
  try {
    const std::string exp = cfg.at("experiment").get<std::string>();
    std::uint64_t seed = cfg.value("seed", std::uint64_t{0});
    if (o.has("--seed"))
      seed = o.seed;
    else if (!cfg.contains("seed"))
      config_error("config needs a \"seed\" (or pass --seed)");
    const std::size_t n_seeds = cfg.value("n_seeds", std::size_t{100});
    const unsigned threads = std::max(1u, o.threads);
    const DgpSpec dgp = cfg.contains("dgp") ? dgp_from_json(cfg.at("dgp")) : DgpSpec{};

    Options model_opts;
    model_opts.model = cfg.value("model", std::string("linear"));
    if (model_opts.model != "constant" && model_opts.model != "linear" && model_opts.model != "quadratic")
      config_error("unknown model '" + model_opts.model + "'");
    const ModelSpec model = model_spec(model_opts);

    InferenceConfig ic;
    ic.model = model;
    ic.plan.draws = cfg.value("draws", std::uint64_t{1000});
    ic.plan.max_exact = cfg.value("max_exact", std::uint64_t{0});
    ic.plan.statistic.kind = stat_kind(cfg.value("stat", std::string("diff-means")));
    const std::string sided = cfg.value("sidedness", std::string("upper"));
    if (sided != "upper" && sided != "two-sided")
      config_error("sidedness must be \"upper\" or \"two-sided\"");
    ic.plan.statistic.sidedness = sided == "two-sided" ? Sidedness::TwoSided : Sidedness::UpperTail;
    if (cfg.contains("window"))
      ic.window = window_from_json(cfg.at("window"));
    if (cfg.contains("balanced_left"))
      ic.balanced_left = cfg.at("balanced_left").get<double>();
    ic.grid_points = cfg.value("grid_points", 201);

    McCraryOptions mopt;
    if (cfg.contains("bin_width"))
      mopt.bin_width = cfg.at("bin_width").get<double>();
    if (cfg.contains("bandwidth"))
      mopt.bandwidth = cfg.at("bandwidth").get<double>();

    if (exp == "size") {
      rep = run_size_experiment(dgp, ic, n_seeds, cfg.value("alpha", 0.05), seed, threads);
    } else if (exp == "coverage") {
      rep = run_coverage_experiment(dgp, ic, n_seeds, cfg.value("level", 0.95), seed, threads);
    } else if (exp == "prop2") {
      rep = run_prop2_check(cfg.value("n_instances", std::size_t{100}), seed);
    } else if (exp == "prop1") {
      rep = run_prop1_check(dgp, model, n_seeds, seed);
    } else if (exp == "fwer") {
      SweepConfig sc;
      sc.candidates = cfg.at("candidates").get<std::vector<double>>();
      sc.covariate_model = model;
      sc.alpha_f = cfg.value("alpha_f", 0.1);
      if (cfg.contains("valid_below"))
        sc.valid_below = cfg.at("valid_below").get<double>();
      rep = run_fwer_experiment(dgp, sc, n_seeds, seed, threads);
    } else if (exp == "balance_size") {
      BalanceSizeConfig bc;
      bc.continuous_model = model;
      bc.ks_alpha = cfg.value("ks_alpha", bc.ks_alpha);
      bc.mc_instances = cfg.value("mc_instances", bc.mc_instances);
      bc.mc_draws = cfg.value("mc_draws", bc.mc_draws);
      rep = run_balance_size_experiment(dgp, bc, n_seeds, seed, threads);
    } else if (exp == "mccrary_size") {
      rep = run_mccrary_experiment(dgp, mopt, cfg.value("alpha", 0.05), n_seeds, seed, false, 0.95, threads);
    } else if (exp == "mccrary_power") {
      rep = run_mccrary_experiment(dgp, mopt, cfg.value("alpha", 0.05), n_seeds, seed, true,
                                   cfg.value("min_power", 0.95), threads);
    } else if (exp == "generate") {
      const std::string path = cfg.value("path", std::string());
      if (path.empty())
        config_error("generate needs a \"path\"");
      const UnitFrame frame = generate(dgp, seed);
      write_frame_csv(path, frame);
      out << "wrote " << path << " (" << frame.n() << " rows)\n";
      rep.name = "generate";
      rep.n_seeds = 1;
      rep.metric = "rows";
      rep.value = static_cast<double>(frame.n());
      rep.pass = true;
    } else {
      config_error("unknown experiment '" + exp + "'");
    }
    rep.gating = cfg.value("gating", true);
  } catch (const nlohmann::json::exception &e) {
    config_error(std::string("bad experiment config: ") + e.what());
  }

  Json report = envelope("simulate");
  report["config"] = cfg;
  report["result"] = to_json(rep);
  out << std::left << std::setw(16) << "experiment" << std::setw(10) << "n_seeds" << std::setw(26) << "metric"
      << std::setw(14) << "value" << std::setw(24) << "band" << "pass\n";
  out << std::setw(16) << rep.name << std::setw(10) << rep.n_seeds << std::setw(26) << rep.metric << std::setw(14)
      << cell(rep.value) << std::setw(24) << ("[" + cell(rep.lower) + ", " + cell(rep.upper) + "]")
      << (rep.pass ? "yes" : "no") << (rep.gating ? "" : " (non-gating)") << '\n'
      << std::right;
  for (const auto &[k, v] : rep.details)
    out << "  " << k << " = " << cell(v) << '\n';
  emit_json(o, report);
  return kOk;
}

int exit_code_for(ErrorCode code) {
  switch (code) {
  case ErrorCode::Config:
  case ErrorCode::InvalidArgument:
    return kConfigError;
  case ErrorCode::Io:
  case ErrorCode::MissingColumn:
  case ErrorCode::NonNumericCell:
  case ErrorCode::EmptyFrame:
    return kDataError;
  case ErrorCode::DegenerateWindow:
  case ErrorCode::AllTreatedOrAllControl:
  case ErrorCode::EmptySide:
    return kDegenerateWindow;
  default:
    return kFailure;
  }
}

} // namespace

int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
  CLI::App app{"Randomization inference for regression discontinuity designs", "rdperm"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  Options o;

  struct Sub {
    const char *name;
    const char *help;
    int (*fn)(const Options &, std::ostream &);
  };
  const Sub subs[] = {
      {"analyze", "specification tests, then p-value, confidence interval and HL estimate", cmd_analyze},
      {"balance", "combined covariate balance test", cmd_balance},
      {"mccrary", "density discontinuity test at the cutoff", cmd_mccrary},
      {"select-window", "exclusion strategy and bandwidth selection", cmd_select_window},
      {"robustness-table", "effect estimates across candidate bandwidths", cmd_robustness},
      {"plotdata", "binned outcome, frequency and covariate tables", cmd_plotdata},
      {"simulate", "run a simulation experiment from a JSON config", cmd_simulate},
  };
  std::map<const CLI::App *, const Sub *> dispatch;
  for (const auto &s : subs) {
    CLI::App *sub = app.add_subcommand(s.name, s.help);
    Registry r(sub, o);
    const std::string name = s.name;
    if (name == "simulate") {
      o.given["config"].push_back(sub->add_option("config", o.config, "experiment config (JSON)"));
      r.opt("--seed", o.seed, "override the config seed").opt("--threads", o.threads, "worker threads");
      r.opt("--out", o.out, "JSON report path");
    } else {
      data_options(r, o);
      window_options(r, o);
      if (name != "mccrary" && name != "plotdata") {
        model_option(r, o);
        plan_options(r, o);
      } else {
        r.opt("--threads", o.threads, "accepted for uniformity; these commands draw nothing at random");
      }
      if (name == "mccrary" || name == "select-window" || name == "robustness-table" || name == "analyze" ||
          name == "plotdata")
        r.opt("--bin-width", o.bin_width, "density-test bin width").opt("--bandwidth", o.bandwidth, "density-test bandwidth");
      if (name == "analyze" || name == "robustness-table")
        r.opt("--alpha", o.alpha, "level for the confidence interval");
      if (name != "plotdata" && name != "mccrary")
        r.opt("--alpha-f", o.alpha_f, "balance-test level");
      if (name != "plotdata" && name != "balance")
        r.opt("--alpha-g", o.alpha_g, "density-test level");
      if (name == "analyze")
        r.opt("--grid-lo", o.grid_lo, "lowest effect tested")
            .opt("--grid-hi", o.grid_hi, "highest effect tested")
            .opt("--grid-step", o.grid_step, "grid spacing");
      if (name == "select-window" || name == "robustness-table")
        r.opt("--candidates", o.candidates, "comma list of bandwidths");
      if (name == "select-window")
        r.opt("--strategy", o.strategy, "donut, surgical or none")
            .opt("--hypotheses", o.hypotheses, "sorter sets as inline JSON, e.g. [[0],[0,-0.3]], or a JSON file")
            .opt("--donut-step", o.donut_step, "donut radius increment")
            .flag("--exhaustive", o.exhaustive, "test every candidate");
      output_options(r, o);
    }
    dispatch[sub] = &s;
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion &e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError &e) {
    app.exit(e, err, err);
    return kConfigError;
  }

  const Sub *chosen = nullptr;
  for (const auto *sub : app.get_subcommands())
    chosen = dispatch.at(sub);
  const auto start = std::chrono::steady_clock::now();
  try {
    const int code = chosen->fn(o, out);
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
    out << "elapsed: " << std::fixed << std::setprecision(3) << elapsed.count() << " s\n" << std::defaultfloat;
    return code;
  } catch (const Error &e) {
    err << "error: " << e.what() << '\n';
    const int code = exit_code_for(e.code());
    if (code == kConfigError)
      err << "run 'rdperm " << chosen->name << " --help' for usage\n";
    return code;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

} // namespace rdperm::cli
