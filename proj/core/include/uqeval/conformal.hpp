#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "uqeval/corpus.hpp"

namespace uqeval {

enum class QuantileRule {
    empirical,            // higher-interpolation empirical quantile of the scores
    conformal_corrected,  // ceil((n+1)(1-alpha))-th order statistic
};

std::string to_string(QuantileRule r);
QuantileRule quantile_rule_from_string(std::string_view s);

struct ConformalCalibration {
    double alpha = 0.1;
    double qhat = 1.0;
    std::vector<double> calibration_scores;  // sorted ascending, all in [0, 1]
    std::size_t samples_per_question = 0;    // M
    QuantileRule quantile_rule = QuantileRule::empirical;
};

/// Threshold at level (1 - alpha) over sorted scores under the given rule.
double quantile_threshold(const std::vector<double>& sorted_scores, double alpha, QuantileRule rule);

/// Nonconformity scores S(o) = 1 - p-hat(o), where p-hat is the extracted
/// sampled-answer frequency. Unextracted samples are excluded from the
/// denominator. Throws when no sample extracted.
std::array<double, kNumOptions> option_scores(const ResponseBundle& bundle);

struct PredictionSet {
    std::string question_id;
    std::array<bool, kNumOptions> included{};
    std::array<double, kNumOptions> option_scores{};

    std::size_t size() const;
};

ConformalCalibration calibrate(const std::vector<ResponseBundle>& bundles, double alpha,
                               QuantileRule rule = QuantileRule::empirical);

/// included = { o : S(o) <= qhat }. Can be empty; callers decide whether to
/// force-include the modal option.
PredictionSet predict_set(const ResponseBundle& bundle, const ConformalCalibration& calibration);

struct SetMetrics {
    double empirical_coverage = 0.0;
    double avg_set_size = 0.0;
    double majority_vote_accuracy = 0.0;
    double hit_rate = 0.0;
    std::size_t majority_ties_broken = 0;  // modal option decided by label order
};

/// Aggregates over (set, bundle) pairs aligned by question_id.
SetMetrics set_metrics(const std::vector<PredictionSet>& sets,
                       const std::vector<ResponseBundle>& bundles);

// Serialization.
std::string serialize_calibration(const ConformalCalibration& calibration);
ConformalCalibration parse_calibration(const std::string& text);
void save_calibration(const std::string& path, const ConformalCalibration& calibration);
ConformalCalibration load_calibration(const std::string& path);

void save_prediction_sets(const std::string& path, const std::vector<PredictionSet>& sets);
std::vector<PredictionSet> load_prediction_sets(const std::string& path);

}  // namespace uqeval
