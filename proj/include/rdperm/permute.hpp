#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "rdperm/rng.hpp"
#include "rdperm/types.hpp"

namespace rdperm {

enum class StatisticKind { DiffMeans, AbsDiffMeans, SumCross, RankSumStudentized };

enum class Sidedness { UpperTail, TwoSided };

/// DiffMeans: treated mean minus control mean. SumCross: sum of v over the
/// treated. RankSumStudentized: Brunner-Munzel studentized mid-rank
/// statistic, positive when treated values rank higher. TwoSided tests the
/// upper tail of |t - E t|; AbsDiffMeans is always |DiffMeans|.
struct Statistic {
  StatisticKind kind = StatisticKind::DiffMeans;
  Sidedness sidedness = Sidedness::UpperTail;
};

std::string to_string(StatisticKind kind);

struct PermutationPlan {
  /// Enumerate every assignment when C(n, n_T) is at most this.
  std::uint64_t max_exact = 200'000;
  /// Monte Carlo draws otherwise.
  std::uint64_t draws = 100'000;
  std::uint64_t seed = 0;
  Statistic statistic;
  /// Worker threads; results never depend on this.
  unsigned threads = 1;
};

enum class Method { Exact, MonteCarlo };

struct TestResult {
  /// Value of the tested statistic (after sidedness) at the observed z.
  double observed = 0.0;
  double p_value = 1.0;
  Method method = Method::Exact;
  /// Assignments enumerated or drawn.
  std::uint64_t assignments = 0;
  /// Null expectation of the tested statistic: analytic for upper-tail
  /// DiffMeans/SumCross, the reference-distribution mean otherwise.
  double null_mean = 0.0;
  /// Binomial standard error of a Monte Carlo p-value; 0 when exact.
  double mc_stderr = 0.0;
};

/// min(C(n, k), cap + 1), without overflow.
std::uint64_t choose_capped(std::uint64_t n, std::uint64_t k, std::uint64_t cap);

/// One assignment of n_T treated units. `chosen` lists the members of the
/// smaller arm; `chosen_treated` says which arm that is.
struct Assignment {
  std::span<const std::uint32_t> chosen;
  bool chosen_treated = true;
};

/// The set of assignments a permutation test ranges over: all C(n, n_T) of
/// them, or `draws` uniform draws. Draws are grouped in fixed-size blocks and
/// block b is generated from stream b of the plan seed, so the sample is a
/// function of (n, n_T, plan) alone. When small enough the sample is stored so
/// repeated scans (e.g. across a grid of hypotheses) see the same assignments
/// without regenerating them.
class AssignmentSample {
public:
  static constexpr std::uint64_t kBlockSize = 1024;
  static constexpr std::uint64_t kMaterializeLimit = std::uint64_t{1} << 24;

  AssignmentSample(Index n, Index n_treated, const PermutationPlan &plan, bool materialize = true);

  Method method() const noexcept { return method_; }
  std::uint64_t size() const noexcept { return size_; }
  Index n() const noexcept { return n_; }
  Index n_treated() const noexcept { return n_treated_; }
  Index chosen_size() const noexcept { return m_; }
  bool chosen_treated() const noexcept { return chosen_treated_; }
  unsigned threads() const noexcept { return threads_; }
  bool materialized() const noexcept { return !stored_.empty(); }
  std::uint64_t block_count() const noexcept { return blocks_; }

  /// Calls visit(Assignment) for every assignment of block `block`, in order.
  template <class Visit>
  void visit_block(std::uint64_t block, std::vector<std::uint32_t> &scratch, Visit &&visit) const;

  /// Chosen-arm indices of a concrete treatment vector.
  std::vector<std::uint32_t> chosen_of(const Vector &z) const;

private:
  template <class Visit> void generate_block(std::uint64_t block, std::vector<std::uint32_t> &perm, Visit &&visit) const;
  template <class Visit> void enumerate(std::uint64_t first, std::uint64_t count, Visit &&visit) const;

  Index n_ = 0;
  Index n_treated_ = 0;
  Index m_ = 0;
  bool chosen_treated_ = true;
  Method method_ = Method::Exact;
  std::uint64_t size_ = 0;
  std::uint64_t blocks_ = 0;
  std::uint64_t seed_ = 0;
  unsigned threads_ = 1;
  std::vector<std::uint32_t> stored_;
};

struct TailSummary {
  std::uint64_t at_least = 0;
  std::uint64_t total = 0;
  double sum = 0.0;
};

/// Counts assignments whose statistic is >= threshold and sums the statistic.
/// `eval` is copied per worker (so it may carry mutable scratch) and called as
/// eval(const Assignment&) -> double. Blocks are reduced in index order, so the
/// result is identical for every thread count.
template <class Eval>
TailSummary scan(const AssignmentSample &sample, double threshold, const Eval &eval);

/// Statistic t(v, z) as tested (sidedness applied).
double statistic_value(const Statistic &statistic, const Vector &v, const Vector &z);

/// Signed statistic of the given kind, ignoring sidedness (AbsDiffMeans is
/// reported as DiffMeans).
double raw_statistic(StatisticKind kind, const Vector &v, const Vector &z);

/// Reusable test machinery for a fixed (n, n_T, plan).
class PermutationEngine {
public:
  PermutationEngine(Index n, Index n_treated, PermutationPlan plan, bool materialize = true);

  const PermutationPlan &plan() const noexcept { return plan_; }
  const AssignmentSample &sample() const noexcept { return sample_; }

  /// Throws InvalidArgument on shape mismatch or non-finite v.
  TestResult test(const Vector &v, const Vector &z) const;

  /// E t(v, Z) for Z uniform over assignments, for the signed statistic
  /// `kind` (analytic for DiffMeans and SumCross).
  double null_expectation(const Vector &v, StatisticKind kind) const;

private:
  PermutationPlan plan_;
  AssignmentSample sample_;
};

/// Permutation p-value of `plan.statistic` for residuals v and assignment z.
/// Exact when C(n, n_T) <= plan.max_exact; otherwise Monte Carlo with the
/// add-one convention (1 + #{t >= t_obs}) / (1 + draws).
///
/// Throws AllTreatedOrAllControl, InvalidArgument.
TestResult permutation_test(const Vector &v, const Vector &z, const PermutationPlan &plan);

/// E T(v) over uniform assignments with n_T treated, for the signed statistic
/// of `statistic.kind`.
double null_expectation(const Vector &v, Index n_treated, const Statistic &statistic,
                        const PermutationPlan &plan);

// ---------------------------------------------------------------------------

template <class Visit>
void AssignmentSample::generate_block(std::uint64_t block, std::vector<std::uint32_t> &perm,
                                      Visit &&visit) const {
  perm.resize(static_cast<std::size_t>(n_));
  for (std::size_t i = 0; i < perm.size(); ++i)
    perm[i] = static_cast<std::uint32_t>(i);
  const std::uint64_t first = block * kBlockSize;
  const std::uint64_t count = std::min(kBlockSize, size_ - first);
  CounterRng rng(seed_, block);
  const auto n = static_cast<std::uint64_t>(n_);
  const auto m = static_cast<std::size_t>(m_);
  for (std::uint64_t d = 0; d < count; ++d) {
    // Partial Fisher-Yates: the first m slots become a uniform m-subset.
    for (std::size_t j = 0; j < m; ++j) {
      const auto u = j + static_cast<std::size_t>(rng.bounded(n - j));
      std::swap(perm[j], perm[u]);
    }
    visit(Assignment{std::span<const std::uint32_t>(perm.data(), m), chosen_treated_});
  }
}

template <class Visit>
void AssignmentSample::enumerate(std::uint64_t first, std::uint64_t count, Visit &&visit) const {
  const auto m = static_cast<std::size_t>(m_);
  const auto n = static_cast<std::uint32_t>(n_);
  std::vector<std::uint32_t> combo(m);
  for (std::size_t i = 0; i < m; ++i)
    combo[i] = static_cast<std::uint32_t>(i);
  std::uint64_t index = 0;
  const std::uint64_t last = first + count;
  while (index < last) {
    if (index >= first)
      visit(Assignment{std::span<const std::uint32_t>(combo.data(), m), chosen_treated_});
    ++index;
    // Advance to the next combination in lexicographic order.
    std::size_t i = m;
    while (i > 0 && combo[i - 1] == n - m + (i - 1))
      --i;
    if (i == 0)
      break;
    ++combo[i - 1];
    for (std::size_t j = i; j < m; ++j)
      combo[j] = combo[j - 1] + 1;
  }
}

template <class Visit>
void AssignmentSample::visit_block(std::uint64_t block, std::vector<std::uint32_t> &scratch,
                                   Visit &&visit) const {
  const std::uint64_t first = block * kBlockSize;
  const std::uint64_t count = std::min(kBlockSize, size_ - first);
  const auto m = static_cast<std::size_t>(m_);
  if (!stored_.empty()) {
    for (std::uint64_t d = 0; d < count; ++d) {
      const auto *begin = stored_.data() + (first + d) * m;
      visit(Assignment{std::span<const std::uint32_t>(begin, m), chosen_treated_});
    }
    return;
  }
  if (method_ == Method::Exact)
    enumerate(0, size_, visit); // a single block when not stored
  else
    generate_block(block, scratch, visit);
}

template <class Eval>
TailSummary scan(const AssignmentSample &sample, double threshold, const Eval &eval) {
  const std::uint64_t blocks = sample.block_count();
  std::vector<TailSummary> partial(static_cast<std::size_t>(blocks));
  auto work = [&](unsigned worker, unsigned stride) {
    Eval local = eval;
    std::vector<std::uint32_t> scratch;
    for (std::uint64_t b = worker; b < blocks; b += stride) {
      TailSummary &out = partial[static_cast<std::size_t>(b)];
      sample.visit_block(b, scratch, [&](const Assignment &a) {
        const double t = local(a);
        out.at_least += t >= threshold ? 1 : 0;
        out.total += 1;
        out.sum += t;
      });
    }
  };
  const auto workers = static_cast<unsigned>(
      std::min<std::uint64_t>(std::max(1u, sample.threads()), blocks == 0 ? 1 : blocks));
  if (workers <= 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w)
      pool.emplace_back(work, w, workers);
    for (auto &t : pool)
      t.join();
  }
  TailSummary total;
  for (const auto &p : partial) {
    total.at_least += p.at_least;
    total.total += p.total;
    total.sum += p.sum;
  }
  return total;
}

} // namespace rdperm
