#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "uqeval/scorers.hpp"

namespace uqeval {

/// One (confidence, correctness) observation; the joined record every metric
/// consumes.
struct ScoredOutcome {
    std::string question_id;
    Method method = Method::avg_token_prob;
    double confidence = 0.0;       // in [0, 1]
    double uncertainty_raw = 0.0;  // higher means more uncertain
    bool correct = false;
    std::string specialty;
    std::string question_type;
    std::string model_tag;
};

/// Probability that a random correct outcome has strictly lower
/// uncertainty_raw than a random incorrect one, ties counting 1/2
/// (Mann-Whitney). Throws when either class is empty.
double auroc(const std::vector<ScoredOutcome>& outcomes);

/// Expected calibration error over equal-width right-closed confidence bins
/// (confidence 0 falls in the first bin, 1 in the last).
double ece(const std::vector<ScoredOutcome>& outcomes, int bins = 10);

/// Mean squared error between confidence and the correctness indicator.
double brier(const std::vector<ScoredOutcome>& outcomes);

enum class MetricKind { auroc, ece, brier };

std::string to_string(MetricKind m);

/// Two-sided bootstrap p-value for the null of equal metric values.
/// Resamples are paired by question when both sides carry the same question
/// ids, independent otherwise. Deterministic in seed.
double bootstrap_diff(const std::vector<ScoredOutcome>& outcomes_a,
                      const std::vector<ScoredOutcome>& outcomes_b, MetricKind metric,
                      std::size_t n_boot = 10000, std::uint64_t seed = 0, int ece_bins = 10);

enum class GroupKey { specialty, question_type, model_tag };

std::string to_string(GroupKey k);
GroupKey group_key_from_string(std::string_view s);

struct GroupReport {
    std::vector<std::string> group;  // values aligned with the requested keys
    bool overall = false;
    std::size_t n = 0;
    double accuracy = 0.0;
    std::optional<double> auroc;  // absent for single-class groups
    double ece = 0.0;
    double brier = 0.0;
    double avg_ece_brier = 0.0;
};

/// One report per distinct key tuple plus an overall row (first). Group rows
/// are ordered lexicographically by key values.
std::vector<GroupReport> stratify(const std::vector<ScoredOutcome>& outcomes,
                                  const std::vector<GroupKey>& by, int ece_bins = 10);

}  // namespace uqeval
