#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "uqeval/conformal.hpp"
#include "uqeval/corpus.hpp"
#include "uqeval/harness.hpp"
#include "uqeval/metrics.hpp"
#include "uqeval/scorers.hpp"

namespace uqeval {

// Exit codes shared by the CLI and the run_* entry points.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInputError = 1;
inline constexpr int kExitPartial = 2;

struct ConformalRunConfig {
    double alpha = 0.1;
    std::string calibration_questions;  // empty: reuse the main questions file
    std::string calibration_responses;
    QuantileRule quantile_rule = QuantileRule::empirical;
    bool force_include_modal = false;  // replace empty sets with the modal option
};

struct BehavioralRunConfig {
    double train_fraction = 0.4;
    double ridge_lambda = 1.0;
};

struct RunConfig {
    std::string questions_path;
    std::string responses_path;
    std::string mapping_path;  // optional imported answer mapping
    std::vector<Method> methods{Method::semantic_entropy};
    std::string model_tag = "model";
    std::optional<EndpointConfig> endpoint;
    SamplingProtocol protocol;
    std::optional<ConformalRunConfig> conformal;
    BehavioralRunConfig behavioral;
    std::vector<GroupKey> stratify_by{GroupKey::specialty};
    int ece_bins = 10;
    std::string output_dir = "out";
    std::uint64_t seed = 1234;
    int jobs = 1;
    bool resume = false;
    bool allow_partial = false;
};

RunConfig load_run_config(const std::string& path);
/// Echo of the fully resolved configuration, defaults included.
std::string run_config_to_json(const RunConfig& config);

// Output file names under config.output_dir.
std::string estimates_path(const RunConfig& config);
std::string model_path(const RunConfig& config, Method method);
std::string calibration_path(const RunConfig& config);
std::string prediction_sets_path(const RunConfig& config);
std::string set_metrics_path(const RunConfig& config);
std::string report_path(const RunConfig& config);
std::string plot_data_path(const RunConfig& config);

/// Correctness pairing used for estimates and reports: single-pass methods
/// use the first greedy record's answer, sampling-based methods the modal
/// sampled answer. Absent when the bundle cannot support the method.
std::optional<bool> method_correctness(const ResponseBundle& bundle, Method method);

struct EstimateRow {
    std::string question_id;
    UncertaintyEstimate estimate;
};

void save_estimates(const std::string& path, const std::vector<EstimateRow>& rows);
std::vector<EstimateRow> load_estimates(const std::string& path);

// Subcommand entry points. Log lines go to `log`; the return value is the
// process exit code.
int run_generate(const RunConfig& config, std::ostream& log);
int run_score(const RunConfig& config, std::ostream& log);
int run_conformal(const RunConfig& config, std::ostream& log);
int run_report(const RunConfig& config, std::ostream& log);
int run_validate(const RunConfig& config, std::ostream& log);

}  // namespace uqeval
