#pragma once

#include <iosfwd>

#include "json.hpp"
#include "rdperm/simlab.hpp"

namespace rdperm {

using Json = nlohmann::ordered_json;

inline constexpr int kReportSchemaVersion = 1;
inline constexpr const char *kToolVersion = "0.3.0";

std::string to_string(Direction direction);
std::string to_string(Method method);

Json to_json(const ModelSpec &spec);
Json to_json(const PermutationPlan &plan);
Json to_json(const WindowSpec &window);
Json to_json(const WindowIndex &index);
Json to_json(const TestResult &result);
Json to_json(const EffectInference &inference);
Json to_json(const BalanceResult &result);
Json to_json(const McCraryResult &result);
Json to_json(const BandwidthSweep &sweep);
Json to_json(const ExclusionResult &result);
Json to_json(const ExperimentReport &report);

WindowSpec window_from_json(const Json &j);
DgpSpec dgp_from_json(const Json &j);

/// Columns: b, balance_p, mccrary_p, n, n_T, n_C.
void write_sweep_csv(std::ostream &out, const BandwidthSweep &sweep);
/// Columns: midpoint, count, height, side.
void write_bins_csv(std::ostream &out, const McCraryResult &result);

} // namespace rdperm
