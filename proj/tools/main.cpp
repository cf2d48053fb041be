#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "uqeval/pipeline.hpp"

namespace {

struct CliOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;
    std::optional<std::string> output_dir;
    std::optional<std::string> questions;
    std::optional<std::string> responses;
    std::optional<std::string> mapping;
    // generate
    std::optional<std::string> endpoint_url;
    std::optional<std::string> model;
    std::optional<int> greedy_shuffles;
    std::optional<int> entropy_samples;
    std::optional<int> conformal_samples;
    std::optional<double> temperature;
    std::optional<double> top_p;
    std::optional<int> max_parallel;
    bool resume = false;
    bool allow_partial = false;
    // conformal
    std::optional<double> alpha;
    std::optional<std::string> quantile_rule;
    std::optional<std::string> calibration_questions;
    std::optional<std::string> calibration_responses;
    bool force_include_modal = false;
};

void apply_overrides(uqeval::RunConfig& config, const CliOverrides& o) {
    if (o.seed) config.seed = *o.seed;
    if (o.jobs) config.jobs = *o.jobs;
    if (o.output_dir) config.output_dir = *o.output_dir;
    if (o.questions) config.questions_path = *o.questions;
    if (o.responses) config.responses_path = *o.responses;
    if (o.mapping) config.mapping_path = *o.mapping;
    if (o.endpoint_url || o.model || o.max_parallel) {
        if (!config.endpoint) config.endpoint.emplace();
        if (o.endpoint_url) config.endpoint->base_url = *o.endpoint_url;
        if (o.model) config.endpoint->model_name = *o.model;
        if (o.max_parallel) config.endpoint->max_parallel = *o.max_parallel;
    }
    if (o.greedy_shuffles) config.protocol.greedy_shuffles = *o.greedy_shuffles;
    if (o.entropy_samples) config.protocol.entropy_samples = *o.entropy_samples;
    if (o.conformal_samples) config.protocol.conformal_samples = *o.conformal_samples;
    if (o.temperature) config.protocol.temperature = *o.temperature;
    if (o.top_p) config.protocol.top_p = *o.top_p;
    if (o.alpha || o.quantile_rule || o.calibration_questions || o.calibration_responses ||
        o.force_include_modal) {
        if (!config.conformal) config.conformal.emplace();
        if (o.alpha) config.conformal->alpha = *o.alpha;
        if (o.quantile_rule) {
            config.conformal->quantile_rule = uqeval::quantile_rule_from_string(*o.quantile_rule);
        }
        if (o.calibration_questions) config.conformal->calibration_questions = *o.calibration_questions;
        if (o.calibration_responses) config.conformal->calibration_responses = *o.calibration_responses;
        config.conformal->force_include_modal |= o.force_include_modal;
    }
    config.resume = config.resume || o.resume;
    config.allow_partial = config.allow_partial || o.allow_partial;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Uncertainty estimates, conformal prediction sets, and stratified "
                 "calibration reports for multiple-choice QA response logs"};
    app.require_subcommand(1);

    std::string config_path;
    bool print_config = false;
    CliOverrides o;

    app.add_option("--config", config_path, "Run configuration file (JSON)")->required();
    app.add_flag("--print-config", print_config, "Echo the resolved configuration before running");
    app.add_option("--seed", o.seed, "Override the run seed");
    app.add_option("--jobs", o.jobs, "Worker threads for per-question work");
    app.add_option("--output-dir", o.output_dir, "Override the output directory");
    app.add_option("--questions", o.questions, "Override the questions file");
    app.add_option("--responses", o.responses, "Override the responses file");
    app.add_option("--mapping", o.mapping, "Override the imported answer-mapping file");

    CLI::App* generate = app.add_subcommand("generate", "Query an endpoint and append a response log");
    generate->add_option("--endpoint", o.endpoint_url, "Chat-completion base URL, e.g. http://host:8000/v1");
    generate->add_option("--model", o.model, "Model name sent to the endpoint");
    generate->add_option("--greedy-shuffles", o.greedy_shuffles, "Greedy generations per question");
    generate->add_option("--entropy-samples", o.entropy_samples, "Sampled generations for entropy");
    generate->add_option("--conformal-samples", o.conformal_samples, "Sampled generations for conformal");
    generate->add_option("--temperature", o.temperature, "Nucleus sampling temperature");
    generate->add_option("--top-p", o.top_p, "Nucleus sampling top-p");
    generate->add_option("--max-parallel", o.max_parallel, "Maximum concurrent requests");
    generate->add_flag("--resume", o.resume, "Skip requests already present in the response log");
    generate->add_flag("--allow-partial", o.allow_partial, "Exit 0 even when bundles are incomplete");

    CLI::App* score = app.add_subcommand("score", "Compute uncertainty estimates from a response log");
    CLI::App* conformal = app.add_subcommand("conformal", "Calibrate and emit prediction sets");
    conformal->add_option("--alpha", o.alpha, "Miscoverage level (target coverage 1 - alpha)");
    conformal->add_option("--quantile-rule", o.quantile_rule, "empirical or conformal_corrected");
    conformal->add_option("--calibration-questions", o.calibration_questions,
                          "Questions file for the calibration split");
    conformal->add_option("--calibration-responses", o.calibration_responses,
                          "Responses file for the calibration split");
    conformal->add_flag("--force-include-modal", o.force_include_modal,
                        "Replace empty prediction sets with the modal option");
    CLI::App* report = app.add_subcommand("report", "Stratified metrics report from persisted artifacts");
    CLI::App* validate = app.add_subcommand("validate", "Schema-check input files");
    for (CLI::App* sub : {generate, score, conformal, report, validate}) sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    uqeval::RunConfig config;
    try {
        config = uqeval::load_run_config(config_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return uqeval::kExitInputError;
    }
    apply_overrides(config, o);

    if (print_config) std::cout << uqeval::run_config_to_json(config);

    try {
        if (generate->parsed()) return uqeval::run_generate(config, std::cout);
        if (score->parsed()) return uqeval::run_score(config, std::cout);
        if (conformal->parsed()) return uqeval::run_conformal(config, std::cout);
        if (report->parsed()) return uqeval::run_report(config, std::cout);
        if (validate->parsed()) return uqeval::run_validate(config, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return uqeval::kExitInputError;
    }
    std::cerr << "error: no subcommand\n";
    return uqeval::kExitInputError;
}
