#include "rdperm/permute.hpp"

#include <cmath>
#include <numeric>

#include "rdperm/errors.hpp"

namespace rdperm {

std::string to_string(StatisticKind kind) {
  switch (kind) {
  case StatisticKind::DiffMeans:
    return "diff-means";
  case StatisticKind::AbsDiffMeans:
    return "abs-diff-means";
  case StatisticKind::SumCross:
    return "sum-cross";
  case StatisticKind::RankSumStudentized:
    return "rank-studentized";
  }
  return "unknown";
}

std::uint64_t choose_capped(std::uint64_t n, std::uint64_t k, std::uint64_t cap) {
  if (k > n)
    return 0;
  k = std::min(k, n - k);
  const std::uint64_t limit = cap == ~std::uint64_t{0} ? cap : cap + 1;
  __uint128_t c = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    c = c * (n - k + i) / i;
    if (c >= limit)
      return limit;
  }
  return static_cast<std::uint64_t>(c);
}

AssignmentSample::AssignmentSample(Index n, Index n_treated, const PermutationPlan &plan,
                                   bool materialize)
    : n_(n), n_treated_(n_treated), seed_(plan.seed), threads_(std::max(1u, plan.threads)) {
  if (n_treated <= 0 || n_treated >= n)
    throw Error(ErrorCode::AllTreatedOrAllControl, "need at least one treated and one control unit");
  if (n > static_cast<Index>(std::numeric_limits<std::uint32_t>::max()))
    throw Error(ErrorCode::InvalidArgument, "too many units");
  chosen_treated_ = n_treated <= n - n_treated;
  m_ = chosen_treated_ ? n_treated : n - n_treated;
  const std::uint64_t combos = choose_capped(static_cast<std::uint64_t>(n),
                                             static_cast<std::uint64_t>(m_), plan.max_exact);
  const auto m = static_cast<std::uint64_t>(m_);
  if (combos <= plan.max_exact) {
    method_ = Method::Exact;
    size_ = combos;
  } else {
    if (plan.draws == 0)
      throw Error(ErrorCode::InvalidArgument, "Monte Carlo plan needs at least one draw");
    method_ = Method::MonteCarlo;
    size_ = plan.draws;
  }
  const bool store = materialize && size_ * m <= kMaterializeLimit;
  if (method_ == Method::Exact && !store) {
    blocks_ = 1;
    return;
  }
  blocks_ = (size_ + kBlockSize - 1) / kBlockSize;
  if (!store)
    return;
  std::vector<std::uint32_t> stored;
  stored.reserve(static_cast<std::size_t>(size_ * m));
  auto keep = [&](const Assignment &a) { stored.insert(stored.end(), a.chosen.begin(), a.chosen.end()); };
  if (method_ == Method::Exact) {
    enumerate(0, size_, keep);
  } else {
    std::vector<std::uint32_t> scratch;
    for (std::uint64_t b = 0; b < blocks_; ++b)
      generate_block(b, scratch, keep);
  }
  stored_ = std::move(stored);
}

std::vector<std::uint32_t> AssignmentSample::chosen_of(const Vector &z) const {
  std::vector<std::uint32_t> chosen;
  const double want = chosen_treated_ ? 1.0 : 0.0;
  for (Index i = 0; i < z.size(); ++i)
    if (z[i] == want)
      chosen.push_back(static_cast<std::uint32_t>(i));
  return chosen;
}

namespace {

// Difference in means / treated sum, optionally folded as |t - center|.
struct LinearEval {
  const double *v = nullptr;
  double total = 0.0;
  double n_treated = 0.0;
  double n_control = 0.0;
  bool sum_cross = false;
  bool fold = false;
  double center = 0.0;

  double operator()(const Assignment &a) const {
    double s = 0.0;
    for (auto i : a.chosen)
      s += v[i];
    const double treated = a.chosen_treated ? s : total - s;
    const double t = sum_cross ? treated : treated / n_treated - (total - treated) / n_control;
    return fold ? std::abs(t - center) : t;
  }
};

// Brunner-Munzel statistic with mid-ranks; overall ranks are fixed, the
// within-arm ranks are recomputed per assignment by one pass over tie blocks.
struct RankEval {
  const std::vector<std::uint32_t> *order = nullptr; // units sorted by value
  const std::vector<std::size_t> *block_end = nullptr;
  const std::vector<double> *block_rank = nullptr;   // overall mid-rank per tie block
  std::size_t n = 0;
  bool fold = false;
  std::vector<std::uint8_t> mask;

  double operator()(const Assignment &a) {
    mask.assign(n, a.chosen_treated ? 0 : 1);
    for (auto i : a.chosen)
      mask[i] = a.chosen_treated ? 1 : 0;
    double cum_t = 0.0, cum_c = 0.0;
    double sum_rt = 0.0, sum_rc = 0.0, dd_t = 0.0, dd_c = 0.0;
    std::size_t begin = 0;
    for (std::size_t b = 0; b < block_end->size(); ++b) {
      const std::size_t end = (*block_end)[b];
      double t = 0.0;
      for (std::size_t j = begin; j < end; ++j)
        t += mask[(*order)[j]];
      const double c = static_cast<double>(end - begin) - t;
      const double rank = (*block_rank)[b];
      if (t > 0) {
        const double d = rank - (cum_t + (t + 1.0) / 2.0);
        sum_rt += t * rank;
        dd_t += t * d * d;
      }
      if (c > 0) {
        const double d = rank - (cum_c + (c + 1.0) / 2.0);
        sum_rc += c * rank;
        dd_c += c * d * d;
      }
      cum_t += t;
      cum_c += c;
      begin = end;
    }
    const double nt = cum_t, nc = cum_c, total = nt + nc;
    const double mt = sum_rt / nt, mc = sum_rc / nc;
    // sum over arm k of (R - W - m_k + (n_k + 1)/2)^2 = sum d^2 - n_k a_k^2
    const double at = mt - (nt + 1.0) / 2.0, ac = mc - (nc + 1.0) / 2.0;
    const double vt = nt > 1 ? std::max(0.0, dd_t - nt * at * at) / (nt - 1.0) : 0.0;
    const double vc = nc > 1 ? std::max(0.0, dd_c - nc * ac * ac) / (nc - 1.0) : 0.0;
    const double diff = mt - mc;
    double t_stat = 0.0;
    if (diff != 0.0) {
      // Complete separation leaves both variances at zero; the floor keeps
      // the statistic finite and monotone in the rank difference.
      const double spread = std::max(nc * vc + nt * vt, 1e-12 * total * total);
      t_stat = nt * nc * diff / std::sqrt(total * spread);
    }
    return fold ? std::abs(t_stat) : t_stat;
  }
};

struct RankTables {
  std::vector<std::uint32_t> order;
  std::vector<std::size_t> block_end;
  std::vector<double> block_rank;
};

RankTables rank_tables(const Vector &v) {
  RankTables t;
  const auto n = static_cast<std::size_t>(v.size());
  t.order.resize(n);
  std::iota(t.order.begin(), t.order.end(), 0u);
  std::stable_sort(t.order.begin(), t.order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::size_t begin = 0;
  while (begin < n) {
    std::size_t end = begin + 1;
    while (end < n && v[t.order[end]] == v[t.order[begin]])
      ++end;
    t.block_end.push_back(end);
    t.block_rank.push_back((static_cast<double>(begin + 1) + static_cast<double>(end)) / 2.0);
    begin = end;
  }
  return t;
}

void check_shapes(const Vector &v, const Vector &z) {
  if (v.size() != z.size())
    throw Error(ErrorCode::InvalidArgument, "v and z lengths differ");
  if (!v.allFinite())
    throw Error(ErrorCode::InvalidArgument, "v must be finite");
  for (Index i = 0; i < z.size(); ++i)
    if (z[i] != 0.0 && z[i] != 1.0)
      throw Error(ErrorCode::InvalidArgument, "z must be 0/1");
}

Index treated_count(const Vector &z) {
  const auto nt = static_cast<Index>(z.sum());
  if (nt == 0 || nt == z.size())
    throw Error(ErrorCode::AllTreatedOrAllControl, "z assigns every unit to one arm");
  return nt;
}

double analytic_mean(StatisticKind kind, const Vector &v, Index n_treated) {
  if (kind == StatisticKind::SumCross)
    return static_cast<double>(n_treated) / static_cast<double>(v.size()) * v.sum();
  return 0.0; // DiffMeans and (approximately) the rank statistic
}

bool is_folded(const Statistic &s) {
  return s.kind == StatisticKind::AbsDiffMeans || s.sidedness == Sidedness::TwoSided;
}

// Evaluates `fn(eval)` with the evaluator matching the statistic.
template <class Fn>
auto with_evaluator(const Statistic &s, const Vector &v, Index n_treated, Fn &&fn) {
  const bool fold = is_folded(s);
  if (s.kind == StatisticKind::RankSumStudentized) {
    const RankTables tables = rank_tables(v);
    RankEval eval;
    eval.order = &tables.order;
    eval.block_end = &tables.block_end;
    eval.block_rank = &tables.block_rank;
    eval.n = static_cast<std::size_t>(v.size());
    eval.fold = fold;
    return fn(eval);
  }
  LinearEval eval;
  eval.v = v.data();
  eval.total = v.sum();
  eval.n_treated = static_cast<double>(n_treated);
  eval.n_control = static_cast<double>(v.size() - n_treated);
  eval.sum_cross = s.kind == StatisticKind::SumCross;
  eval.fold = fold;
  eval.center = analytic_mean(s.kind, v, n_treated);
  return fn(eval);
}

// Ties between the observed and permuted statistics must survive different
// summation orders.
double tie_tolerance(const Statistic &s, const Vector &v, Index n_treated, double observed) {
  if (s.kind == StatisticKind::RankSumStudentized)
    return 1e-9 * (std::abs(observed) + 1.0);
  double spread = (v.array() - v.mean()).abs().maxCoeff();
  if (s.kind == StatisticKind::SumCross)
    spread *= static_cast<double>(n_treated);
  return 1e-9 * (std::abs(observed) + spread);
}

TestResult run_test(const AssignmentSample &sample, const Statistic &s, const Vector &v,
                    const Vector &z) {
  const Index nt = treated_count(z);
  if (nt != sample.n_treated() || z.size() != sample.n())
    throw Error(ErrorCode::InvalidArgument, "assignment shape does not match the permutation sample");
  const auto chosen = sample.chosen_of(z);
  const Assignment actual{std::span<const std::uint32_t>(chosen), sample.chosen_treated()};

  TestResult result;
  result.method = sample.method();
  result.assignments = sample.size();
  return with_evaluator(s, v, nt, [&](auto eval) {
    result.observed = eval(actual);
    const bool analytic = !is_folded(s) && s.kind != StatisticKind::RankSumStudentized;
    if (v.maxCoeff() == v.minCoeff()) {
      // Degenerate reference distribution: every assignment ties.
      result.p_value = 1.0;
      result.null_mean = analytic ? analytic_mean(s.kind, v, nt) : result.observed;
      return result;
    }
    const double tol = tie_tolerance(s, v, nt, result.observed);
    const TailSummary tail = scan(sample, result.observed - tol, eval);
    const double count = static_cast<double>(tail.at_least);
    const double total = static_cast<double>(tail.total);
    if (sample.method() == Method::Exact) {
      result.p_value = count / total;
    } else {
      result.p_value = (1.0 + count) / (1.0 + total);
      result.mc_stderr = std::sqrt(result.p_value * (1.0 - result.p_value) / total);
    }
    result.null_mean = analytic ? analytic_mean(s.kind, v, nt) : tail.sum / total;
    return result;
  });
}

double run_expectation(const AssignmentSample &sample, StatisticKind kind, const Vector &v) {
  const Index nt = sample.n_treated();
  if (kind == StatisticKind::DiffMeans || kind == StatisticKind::SumCross)
    return analytic_mean(kind, v, nt);
  const Statistic s{kind, Sidedness::UpperTail};
  return with_evaluator(s, v, nt, [&](auto eval) {
    const TailSummary tail = scan(sample, 0.0, eval);
    return tail.sum / static_cast<double>(tail.total);
  });
}

} // namespace

double statistic_value(const Statistic &statistic, const Vector &v, const Vector &z) {
  check_shapes(v, z);
  const Index nt = treated_count(z);
  const bool chosen_treated = nt <= z.size() - nt;
  std::vector<std::uint32_t> chosen;
  for (Index i = 0; i < z.size(); ++i)
    if ((z[i] == 1.0) == chosen_treated)
      chosen.push_back(static_cast<std::uint32_t>(i));
  const Assignment a{std::span<const std::uint32_t>(chosen), chosen_treated};
  return with_evaluator(statistic, v, nt, [&](auto eval) { return eval(a); });
}

double raw_statistic(StatisticKind kind, const Vector &v, const Vector &z) {
  if (kind == StatisticKind::AbsDiffMeans)
    kind = StatisticKind::DiffMeans;
  return statistic_value(Statistic{kind, Sidedness::UpperTail}, v, z);
}

PermutationEngine::PermutationEngine(Index n, Index n_treated, PermutationPlan plan, bool materialize)
    : plan_(plan), sample_(n, n_treated, plan, materialize) {}

TestResult PermutationEngine::test(const Vector &v, const Vector &z) const {
  check_shapes(v, z);
  return run_test(sample_, plan_.statistic, v, z);
}

double PermutationEngine::null_expectation(const Vector &v, StatisticKind kind) const {
  if (v.size() != sample_.n() || !v.allFinite())
    throw Error(ErrorCode::InvalidArgument, "v does not match the permutation sample");
  return run_expectation(sample_, kind, v);
}

TestResult permutation_test(const Vector &v, const Vector &z, const PermutationPlan &plan) {
  check_shapes(v, z);
  const AssignmentSample sample(z.size(), treated_count(z), plan, false);
  return run_test(sample, plan.statistic, v, z);
}

double null_expectation(const Vector &v, Index n_treated, const Statistic &statistic,
                        const PermutationPlan &plan) {
  if (!v.allFinite())
    throw Error(ErrorCode::InvalidArgument, "v must be finite");
  const StatisticKind kind =
      statistic.kind == StatisticKind::AbsDiffMeans ? StatisticKind::DiffMeans : statistic.kind;
  if (kind == StatisticKind::DiffMeans || kind == StatisticKind::SumCross) {
    if (n_treated <= 0 || n_treated >= v.size())
      throw Error(ErrorCode::AllTreatedOrAllControl, "need at least one unit in each arm");
    return analytic_mean(kind, v, n_treated);
  }
  const AssignmentSample sample(v.size(), n_treated, plan, false);
  return run_expectation(sample, kind, v);
}

} // namespace rdperm
