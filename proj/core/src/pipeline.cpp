#include "uqeval/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "uqeval/rng.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace uqeval {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

// Fixed float formatting so identical runs produce identical bytes.
std::string fmt_num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            fn(i);
        }
    };
    const std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
    std::vector<std::thread> threads;
    threads.reserve(n_threads);
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (std::thread& t : threads) t.join();
}

std::string joined_path(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

bool is_behavioral(Method m) {
    return m == Method::linear_sum || m == Method::logistic ||
           m == Method::calibration_regression;
}

bool is_single_pass(Method m) { return m != Method::semantic_entropy; }

std::optional<Label> modal_sampled_answer(const ResponseBundle& bundle) {
    std::array<std::size_t, kNumOptions> counts{};
    std::size_t total = 0;
    for (const GenerationRecord& r : bundle.sampled_records) {
        if (!r.extracted_canonical) continue;
        ++counts[static_cast<std::size_t>(*r.extracted_canonical)];
        ++total;
    }
    if (total == 0) return std::nullopt;
    std::size_t best = 0;
    for (std::size_t o = 1; o < kNumOptions; ++o) {
        if (counts[o] > counts[best]) best = o;  // ties keep the lower label
    }
    return static_cast<Label>(best);
}

const GenerationRecord* first_greedy(const ResponseBundle& bundle) {
    return bundle.greedy_records.empty() ? nullptr : &bundle.greedy_records.front();
}

struct LoadedCorpus {
    std::vector<Question> questions;
    std::vector<ResponseBundle> bundles;
};

LoadedCorpus load_corpus(const RunConfig& config, std::ostream& log) {
    LoadedCorpus corpus;
    std::vector<std::string> warnings;
    corpus.questions = load_questions(config.questions_path, "jsonl", &warnings);
    ResponseLoadOptions opts;
    opts.elicitation_scale_min = config.protocol.elicitation_scale_min;
    opts.elicitation_scale_max = config.protocol.elicitation_scale_max;
    corpus.bundles = load_responses(config.responses_path, corpus.questions, opts, &warnings);
    if (!config.mapping_path.empty()) {
        import_external_mapping(config.mapping_path, corpus.bundles);
    }
    for (const std::string& w : warnings) log << "warning: " << w << '\n';
    return corpus;
}

std::vector<Method> sorted_methods(const RunConfig& config) {
    std::vector<Method> methods = config.methods;
    std::sort(methods.begin(), methods.end());
    methods.erase(std::unique(methods.begin(), methods.end()), methods.end());
    return methods;
}

}  // namespace

std::optional<bool> method_correctness(const ResponseBundle& bundle, Method method) {
    if (is_single_pass(method)) {
        const GenerationRecord* record = first_greedy(bundle);
        if (record == nullptr) return std::nullopt;
        return record->extracted_canonical && *record->extracted_canonical == bundle.question.gold;
    }
    const auto modal = modal_sampled_answer(bundle);
    if (!modal) return std::nullopt;
    return *modal == bundle.question.gold;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open config file: " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object()) fail("malformed config file: " + path);

    static const std::set<std::string> known{
        "questions", "responses", "mapping", "methods", "model_tag", "endpoint", "protocol",
        "conformal", "behavioral", "stratify_by", "ece_bins", "output_dir", "seed", "jobs",
    };
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!known.count(key)) fail("unknown config key: " + key);
    }

    RunConfig c;
    try {
        c.questions_path = j.value("questions", "");
        c.responses_path = j.value("responses", "");
        c.mapping_path = j.value("mapping", "");
        c.model_tag = j.value("model_tag", c.model_tag);
        if (j.contains("methods")) {
            c.methods.clear();
            for (const json& m : j.at("methods")) {
                c.methods.push_back(method_from_string(m.get<std::string>()));
            }
        }
        if (j.contains("endpoint")) {
            const json& e = j.at("endpoint");
            EndpointConfig ep;
            ep.base_url = e.at("base_url").get<std::string>();
            ep.model_name = e.value("model", "");
            ep.auth_token_env = e.value("auth_token_env", ep.auth_token_env);
            ep.max_parallel = e.value("max_parallel", ep.max_parallel);
            ep.timeout = std::chrono::milliseconds(e.value("timeout_ms", 30000));
            ep.retries = e.value("retries", ep.retries);
            if (e.contains("backoff_ms")) {
                ep.backoff.clear();
                for (const json& ms : e.at("backoff_ms")) {
                    ep.backoff.emplace_back(ms.get<int>());
                }
            }
            c.endpoint = std::move(ep);
        }
        if (j.contains("protocol")) {
            const json& p = j.at("protocol");
            c.protocol.greedy_shuffles = p.value("greedy_shuffles", c.protocol.greedy_shuffles);
            c.protocol.entropy_samples = p.value("entropy_samples", c.protocol.entropy_samples);
            c.protocol.conformal_samples =
                p.value("conformal_samples", c.protocol.conformal_samples);
            c.protocol.temperature = p.value("temperature", c.protocol.temperature);
            c.protocol.top_p = p.value("top_p", c.protocol.top_p);
            c.protocol.elicit_confidence =
                p.value("elicit_confidence", c.protocol.elicit_confidence);
            if (p.contains("elicitation_scale")) {
                const json& s = p.at("elicitation_scale");
                c.protocol.elicitation_scale_min = s.at(0).get<double>();
                c.protocol.elicitation_scale_max = s.at(1).get<double>();
            }
        }
        if (j.contains("conformal")) {
            const json& cf = j.at("conformal");
            ConformalRunConfig cc;
            cc.alpha = cf.value("alpha", cc.alpha);
            cc.calibration_questions = cf.value("calibration_questions", "");
            cc.calibration_responses = cf.value("calibration_responses", "");
            if (cf.contains("quantile_rule")) {
                cc.quantile_rule =
                    quantile_rule_from_string(cf.at("quantile_rule").get<std::string>());
            }
            cc.force_include_modal = cf.value("force_include_modal", cc.force_include_modal);
            c.conformal = cc;
        }
        if (j.contains("behavioral")) {
            const json& b = j.at("behavioral");
            c.behavioral.train_fraction = b.value("train_fraction", c.behavioral.train_fraction);
            c.behavioral.ridge_lambda = b.value("ridge_lambda", c.behavioral.ridge_lambda);
        }
        if (j.contains("stratify_by")) {
            c.stratify_by.clear();
            for (const json& k : j.at("stratify_by")) {
                c.stratify_by.push_back(group_key_from_string(k.get<std::string>()));
            }
            if (c.stratify_by.empty()) fail("stratify_by must name at least one key");
        }
        c.ece_bins = j.value("ece_bins", c.ece_bins);
        c.output_dir = j.value("output_dir", c.output_dir);
        c.seed = j.value("seed", c.seed);
        c.jobs = j.value("jobs", c.jobs);
    } catch (const json::exception& e) {
        fail(std::string("malformed config file ") + path + ": " + e.what());
    }
    return c;
}

std::string run_config_to_json(const RunConfig& c) {
    json methods = json::array();
    for (Method m : c.methods) methods.push_back(to_string(m));
    json stratify = json::array();
    for (GroupKey k : c.stratify_by) stratify.push_back(to_string(k));

    json j{
        {"questions", c.questions_path},
        {"responses", c.responses_path},
        {"mapping", c.mapping_path},
        {"methods", std::move(methods)},
        {"model_tag", c.model_tag},
        {"protocol",
         {{"greedy_shuffles", c.protocol.greedy_shuffles},
          {"entropy_samples", c.protocol.entropy_samples},
          {"conformal_samples", c.protocol.conformal_samples},
          {"temperature", c.protocol.temperature},
          {"top_p", c.protocol.top_p},
          {"elicit_confidence", c.protocol.elicit_confidence},
          {"elicitation_scale",
           {c.protocol.elicitation_scale_min, c.protocol.elicitation_scale_max}}}},
        {"behavioral",
         {{"train_fraction", c.behavioral.train_fraction},
          {"ridge_lambda", c.behavioral.ridge_lambda}}},
        {"stratify_by", std::move(stratify)},
        {"ece_bins", c.ece_bins},
        {"output_dir", c.output_dir},
        {"seed", c.seed},
        {"jobs", c.jobs},
    };
    if (c.endpoint) {
        json backoff = json::array();
        for (auto ms : c.endpoint->backoff) backoff.push_back(ms.count());
        j["endpoint"] = {
            {"base_url", c.endpoint->base_url},
            {"model", c.endpoint->model_name},
            {"auth_token_env", c.endpoint->auth_token_env},
            {"max_parallel", c.endpoint->max_parallel},
            {"timeout_ms", c.endpoint->timeout.count()},
            {"retries", c.endpoint->retries},
            {"backoff_ms", std::move(backoff)},
        };
    }
    if (c.conformal) {
        j["conformal"] = {
            {"alpha", c.conformal->alpha},
            {"calibration_questions", c.conformal->calibration_questions},
            {"calibration_responses", c.conformal->calibration_responses},
            {"quantile_rule", to_string(c.conformal->quantile_rule)},
            {"force_include_modal", c.conformal->force_include_modal},
        };
    }
    return j.dump(2) + "\n";
}

namespace {

// The resolved protocol is recorded next to every artifact it produced.
void persist_resolved_config(const RunConfig& config) {
    std::error_code ec;
    fs::create_directories(config.output_dir, ec);
    std::ofstream out(joined_path(config.output_dir, "resolved_config.json"));
    if (out) out << run_config_to_json(config);
}

}  // namespace

std::string estimates_path(const RunConfig& c) { return joined_path(c.output_dir, "estimates.jsonl"); }
std::string model_path(const RunConfig& c, Method m) {
    return joined_path(c.output_dir, "model_" + to_string(m) + ".json");
}
std::string calibration_path(const RunConfig& c) {
    return joined_path(c.output_dir, "calibration.json");
}
std::string prediction_sets_path(const RunConfig& c) {
    return joined_path(c.output_dir, "prediction_sets.jsonl");
}
std::string set_metrics_path(const RunConfig& c) {
    return joined_path(c.output_dir, "set_metrics.json");
}
std::string report_path(const RunConfig& c) { return joined_path(c.output_dir, "report.csv"); }
std::string plot_data_path(const RunConfig& c) { return joined_path(c.output_dir, "plot_data.csv"); }

void save_estimates(const std::string& path, const std::vector<EstimateRow>& rows) {
    std::ofstream out(path);
    if (!out) fail("cannot write estimates file: " + path);
    for (const EstimateRow& r : rows) {
        json j{
            {"question_id", r.question_id},
            {"method", to_string(r.estimate.method)},
            {"raw", r.estimate.raw},
            {"confidence", r.estimate.confidence},
            {"orientation", to_string(r.estimate.orientation)},
        };
        out << j.dump() << '\n';
    }
}

std::vector<EstimateRow> load_estimates(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open estimates file: " + path);
    std::vector<EstimateRow> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            fail(path + ":" + std::to_string(line_no) + ": malformed estimate row");
        }
        EstimateRow r;
        try {
            r.question_id = j.at("question_id").get<std::string>();
            r.estimate.method = method_from_string(j.at("method").get<std::string>());
            r.estimate.raw = j.at("raw").get<double>();
            r.estimate.confidence = j.at("confidence").get<double>();
            r.estimate.orientation =
                orientation_from_string(j.at("orientation").get<std::string>());
        } catch (const std::exception& e) {
            fail(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// generate

int run_generate(const RunConfig& config, std::ostream& log) {
    if (!config.endpoint) {
        log << "error: generate needs an endpoint configuration\n";
        return kExitInputError;
    }
    if (config.questions_path.empty() || config.responses_path.empty()) {
        log << "error: generate needs questions and responses paths\n";
        return kExitInputError;
    }

    std::vector<Question> questions;
    try {
        questions = load_questions(config.questions_path);
    } catch (const std::exception& e) {
        log << "error: " << e.what() << '\n';
        return kExitInputError;
    }

    // Resume: collect what the log already holds per question.
    std::map<std::string, CollectedSoFar> existing;
    if (config.resume && fs::exists(config.responses_path)) {
        try {
            ResponseLoadOptions opts;
            opts.elicitation_scale_min = config.protocol.elicitation_scale_min;
            opts.elicitation_scale_max = config.protocol.elicitation_scale_max;
            for (const ResponseBundle& b : load_responses(config.responses_path, questions, opts)) {
                CollectedSoFar& so_far = existing[b.question.id];
                for (const GenerationRecord& r : b.greedy_records) {
                    so_far.greedy_indices.insert(r.permutation.shuffle_index);
                    if (r.permutation.shuffle_index == 0) so_far.first_greedy_text = r.raw_text;
                }
                for (const GenerationRecord& r : b.sampled_records) {
                    so_far.sampled_indices.insert(r.permutation.shuffle_index);
                }
                so_far.has_elicitation = b.elicitation_raw.has_value();
            }
        } catch (const std::exception& e) {
            log << "error: cannot resume from " << config.responses_path << ": " << e.what()
                << '\n';
            return kExitInputError;
        }
    }

    std::unique_ptr<ResponseAppender> appender;
    try {
        appender = std::make_unique<ResponseAppender>(config.responses_path, config.resume);
    } catch (const std::exception& e) {
        log << "error: " << e.what() << '\n';
        return kExitInputError;
    }
    persist_resolved_config(config);

    const PromptTemplate answer_tmpl = default_answer_template();
    const PromptTemplate elicit_tmpl = default_elicitation_template();
    std::size_t incomplete = 0;
    for (std::size_t qi = 0; qi < questions.size(); ++qi) {
        const Question& q = questions[qi];
        const std::uint64_t shuffle_seed = substream_seed(config.seed, qi);
        const CollectedSoFar* so_far = nullptr;
        if (auto it = existing.find(q.id); it != existing.end()) so_far = &it->second;
        try {
            CollectResult result =
                collect_bundle(q, *config.endpoint, config.protocol, shuffle_seed, answer_tmpl,
                               elicit_tmpl, appender.get(), so_far);
            const std::size_t collected = result.bundle.record_count();
            log << "question " << (qi + 1) << "/" << questions.size() << " id=" << q.id
                << " new_records=" << collected;
            if (!result.complete()) {
                ++incomplete;
                log << " INCOMPLETE (" << result.failures.size() << " failed requests)";
                for (const std::string& f : result.failures) log << "\n  " << f;
            }
            log << '\n';
        } catch (const std::exception& e) {
            log << "error: question " << q.id << ": " << e.what() << '\n';
            return kExitInputError;
        }
    }
    if (incomplete > 0) {
        log << incomplete << " incomplete bundle(s)\n";
        return config.allow_partial ? kExitOk : kExitPartial;
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// score

namespace {

struct ScoreOutput {
    std::vector<EstimateRow> rows;
    std::size_t skipped = 0;
};

// One slot per bundle so parallel execution keeps deterministic output order.
void score_per_bundle(const std::vector<ResponseBundle>& bundles, int jobs,
                      const std::function<std::optional<UncertaintyEstimate>(
                          const ResponseBundle&, std::string&)>& score_one,
                      ScoreOutput& out, std::ostream& log, Method method) {
    std::vector<std::optional<UncertaintyEstimate>> estimates(bundles.size());
    std::vector<std::string> reasons(bundles.size());
    parallel_for(bundles.size(), jobs, [&](std::size_t i) {
        estimates[i] = score_one(bundles[i], reasons[i]);
    });
    for (std::size_t i = 0; i < bundles.size(); ++i) {
        if (estimates[i]) {
            out.rows.push_back({bundles[i].question.id, *estimates[i]});
        } else {
            ++out.skipped;
            log << "skip " << bundles[i].question.id << " [" << to_string(method)
                << "]: " << reasons[i] << '\n';
        }
    }
}

}  // namespace

int run_score(const RunConfig& config, std::ostream& log) {
    if (config.methods.empty()) {
        log << "error: no methods selected\n";
        return kExitInputError;
    }
    LoadedCorpus corpus;
    try {
        corpus = load_corpus(config, log);
    } catch (const std::exception& e) {
        log << "error: " << e.what() << '\n';
        return kExitInputError;
    }
    const std::vector<ResponseBundle>& bundles = corpus.bundles;

    persist_resolved_config(config);

    ScoreOutput out;
    for (Method method : sorted_methods(config)) {
        if (!is_behavioral(method)) {
            auto score_one = [method](const ResponseBundle& b,
                                      std::string& reason) -> std::optional<UncertaintyEstimate> {
                try {
                    switch (method) {
                        case Method::avg_token_prob:
                        case Method::min_token_prob:
                        case Method::max_token_prob:
                        case Method::gnll: {
                            const GenerationRecord* record = first_greedy(b);
                            if (record == nullptr) {
                                reason = "no greedy records";
                                return std::nullopt;
                            }
                            if (method == Method::avg_token_prob) return avg_token_prob(*record);
                            if (method == Method::min_token_prob) return min_token_prob(*record);
                            if (method == Method::max_token_prob) return max_token_prob(*record);
                            return gnll(*record);
                        }
                        case Method::semantic_entropy: return semantic_entropy(b);
                        case Method::elicited: return elicited(b);
                        default: reason = "not a per-bundle method"; return std::nullopt;
                    }
                } catch (const std::exception& e) {
                    reason = e.what();
                    return std::nullopt;
                }
            };
            score_per_bundle(bundles, config.jobs, score_one, out, log, method);
            continue;
        }

        // Behavioral methods: 40/60 stratified split, fit on train, score eval.
        std::vector<std::size_t> eligible;
        for (std::size_t i = 0; i < bundles.size(); ++i) {
            if (first_greedy(bundles[i]) != nullptr) eligible.push_back(i);
        }
        if (eligible.size() < 4) {
            log << "skip method " << to_string(method)
                << ": fewer than 4 bundles with greedy records\n";
            continue;
        }
        std::vector<ResponseBundle> eligible_bundles;
        eligible_bundles.reserve(eligible.size());
        for (std::size_t i : eligible) eligible_bundles.push_back(bundles[i]);

        std::size_t fallback = 0;
        for (const ResponseBundle& b : eligible_bundles) {
            if (extract_features(*first_greedy(b)).whole_text_fallback) ++fallback;
        }
        if (fallback > 0) {
            log << "warning: " << fallback << " record(s) lack a reasoning span; "
                << to_string(method) << " features computed over the full response text\n";
        }

        std::vector<std::string> warnings;
        const TrainEvalSplit split = split_train_eval(
            eligible_bundles, config.behavioral.train_fraction, config.seed, &warnings);
        for (const std::string& w : warnings) log << "warning: " << w << '\n';
        if (split.train.empty() || split.eval.empty()) {
            log << "skip method " << to_string(method) << ": degenerate train/eval split\n";
            continue;
        }

        std::vector<BehavioralFeatures> train_features;
        std::vector<int> train_labels;
        train_features.reserve(split.train.size());
        for (std::size_t idx : split.train) {
            const ResponseBundle& b = eligible_bundles[idx];
            train_features.push_back(extract_features(*first_greedy(b)));
            const auto correct = method_correctness(b, method);
            train_labels.push_back(correct.value_or(false) ? 1 : 0);
        }
        FeatureNormalizer normalizer;
        try {
            normalizer = fit_normalizer(train_features);
        } catch (const std::exception& e) {
            log << "skip method " << to_string(method) << ": " << e.what() << '\n';
            continue;
        }

        std::optional<RegressionModel> model;
        if (method != Method::linear_sum) {
            try {
                if (method == Method::calibration_regression) {
                    model = fit_ridge(train_features, train_labels, config.behavioral.ridge_lambda,
                                      normalizer);
                } else {
                    model = fit_logistic(train_features, train_labels, normalizer);
                }
            } catch (const std::exception& e) {
                log << "skip method " << to_string(method) << ": " << e.what() << '\n';
                continue;
            }
            if (model->separation_warning) {
                log << "warning: " << to_string(method)
                    << " hit perfect separation; fitted with an L2 penalty\n";
            }
            save_model(model_path(config, method), *model);
            log << "model [" << to_string(method) << "] written to "
                << model_path(config, method) << '\n';
        }

        std::vector<ResponseBundle> eval_bundles;
        eval_bundles.reserve(split.eval.size());
        for (std::size_t idx : split.eval) eval_bundles.push_back(eligible_bundles[idx]);
        auto score_one = [&](const ResponseBundle& b,
                             std::string& reason) -> std::optional<UncertaintyEstimate> {
            try {
                const BehavioralFeatures f = extract_features(*first_greedy(b));
                if (method == Method::linear_sum) return linear_sum(f, normalizer);
                return predict_uncertainty(*model, f);
            } catch (const std::exception& e) {
                reason = e.what();
                return std::nullopt;
            }
        };
        score_per_bundle(eval_bundles, config.jobs, score_one, out, log, method);
    }

    save_estimates(estimates_path(config), out.rows);
    log << out.rows.size() << " estimate rows written to " << estimates_path(config);
    if (out.skipped > 0) log << " (" << out.skipped << " skipped)";
    log << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------
// conformal

int run_conformal(const RunConfig& config, std::ostream& log) {
    if (!config.conformal) {
        log << "error: no conformal configuration\n";
        return kExitInputError;
    }
    const ConformalRunConfig& cc = *config.conformal;
    if (cc.calibration_responses.empty()) {
        log << "error: conformal needs a calibration_responses file\n";
        return kExitInputError;
    }

    ConformalCalibration calibration;
    std::vector<ResponseBundle> test_bundles;
    try {
        const std::string cal_questions_path =
            cc.calibration_questions.empty() ? config.questions_path : cc.calibration_questions;
        std::vector<Question> cal_questions = load_questions(cal_questions_path);
        std::vector<ResponseBundle> cal_bundles =
            load_responses(cc.calibration_responses, cal_questions);
        if (cal_bundles.empty()) {
            log << "error: empty calibration set\n";
            return kExitInputError;
        }
        calibration = calibrate(cal_bundles, cc.alpha, cc.quantile_rule);

        LoadedCorpus corpus = load_corpus(config, log);
        test_bundles = std::move(corpus.bundles);
    } catch (const std::exception& e) {
        log << "error: " << e.what() << '\n';
        return kExitInputError;
    }

    persist_resolved_config(config);
    save_calibration(calibration_path(config), calibration);
    log << "qhat=" << fmt_num(calibration.qhat) << " (alpha=" << fmt_num(calibration.alpha)
        << ", rule=" << to_string(calibration.quantile_rule) << ", n="
        << calibration.calibration_scores.size() << ")\n";

    std::vector<PredictionSet> sets;
    std::vector<const ResponseBundle*> covered;
    for (const ResponseBundle& b : test_bundles) {
        try {
            PredictionSet set = predict_set(b, calibration);
            if (cc.force_include_modal && set.size() == 0) {
                std::size_t best = 0;
                for (std::size_t o = 1; o < kNumOptions; ++o) {
                    if (set.option_scores[o] < set.option_scores[best]) best = o;
                }
                set.included[best] = true;
            }
            sets.push_back(std::move(set));
            covered.push_back(&b);
        } catch (const std::exception& e) {
            log << "skip " << b.question.id << " [conformal]: " << e.what() << '\n';
        }
    }
    if (sets.empty()) {
        log << "error: no prediction sets produced\n";
        return kExitInputError;
    }
    save_prediction_sets(prediction_sets_path(config), sets);

    std::vector<ResponseBundle> covered_bundles;
    covered_bundles.reserve(covered.size());
    for (const ResponseBundle* b : covered) covered_bundles.push_back(*b);
    const SetMetrics m = set_metrics(sets, covered_bundles);
    {
        std::ofstream out(set_metrics_path(config));
        if (!out) {
            log << "error: cannot write " << set_metrics_path(config) << '\n';
            return kExitInputError;
        }
        json j{
            {"empirical_coverage", m.empirical_coverage},
            {"avg_set_size", m.avg_set_size},
            {"majority_vote_accuracy", m.majority_vote_accuracy},
            {"hit_rate", m.hit_rate},
            {"majority_ties_broken", m.majority_ties_broken},
            {"n", sets.size()},
        };
        out << j.dump(2) << '\n';
    }
    log << "coverage=" << fmt_num(m.empirical_coverage)
        << " avg_set_size=" << fmt_num(m.avg_set_size)
        << " majority_vote_accuracy=" << fmt_num(m.majority_vote_accuracy)
        << " hit_rate=" << fmt_num(m.hit_rate) << " over " << sets.size() << " questions\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// report

int run_report(const RunConfig& config, std::ostream& log) {
    LoadedCorpus corpus;
    std::vector<EstimateRow> estimates;
    try {
        corpus = load_corpus(config, log);
        estimates = load_estimates(estimates_path(config));
    } catch (const std::exception& e) {
        log << "error: " << e.what() << '\n';
        return kExitInputError;
    }

    std::map<std::string, const ResponseBundle*> bundle_by_id;
    for (const ResponseBundle& b : corpus.bundles) bundle_by_id[b.question.id] = &b;

    // Join estimates with correctness and group metadata, per method.
    std::map<Method, std::vector<ScoredOutcome>> outcomes_by_method;
    for (const EstimateRow& row : estimates) {
        auto it = bundle_by_id.find(row.question_id);
        if (it == bundle_by_id.end()) {
            log << "error: estimate references unknown question " << row.question_id << '\n';
            return kExitInputError;
        }
        const ResponseBundle& b = *it->second;
        const auto correct = method_correctness(b, row.estimate.method);
        if (!correct) {
            log << "skip " << row.question_id << " [" << to_string(row.estimate.method)
                << "]: no correctness pairing\n";
            continue;
        }
        ScoredOutcome o;
        o.question_id = row.question_id;
        o.method = row.estimate.method;
        o.confidence = row.estimate.confidence;
        o.uncertainty_raw = row.estimate.orientation == Orientation::higher_is_uncertain
                                ? row.estimate.raw
                                : -row.estimate.raw;
        o.correct = *correct;
        o.specialty = b.question.specialty;
        o.question_type = to_string(b.question.question_type);
        o.model_tag = config.model_tag;
        outcomes_by_method[row.estimate.method].push_back(std::move(o));
    }
    if (outcomes_by_method.empty()) {
        log << "error: no outcomes to report\n";
        return kExitInputError;
    }

    // Group-level conformal metrics when a sets file is present.
    std::map<std::vector<std::string>, SetMetrics> set_by_group;
    bool have_sets = false;
    if (fs::exists(prediction_sets_path(config))) {
        try {
            const std::vector<PredictionSet> sets =
                load_prediction_sets(prediction_sets_path(config));
            std::map<std::vector<std::string>, std::pair<std::vector<PredictionSet>,
                                                         std::vector<ResponseBundle>>> grouped;
            for (const PredictionSet& s : sets) {
                auto it = bundle_by_id.find(s.question_id);
                if (it == bundle_by_id.end()) continue;
                const ResponseBundle& b = *it->second;
                std::vector<std::string> key;
                for (GroupKey k : config.stratify_by) {
                    switch (k) {
                        case GroupKey::specialty: key.push_back(b.question.specialty); break;
                        case GroupKey::question_type:
                            key.push_back(to_string(b.question.question_type));
                            break;
                        case GroupKey::model_tag: key.push_back(config.model_tag); break;
                    }
                }
                grouped[key].first.push_back(s);
                grouped[key].second.push_back(b);
                const std::vector<std::string> overall_key(config.stratify_by.size(), "Overall");
                grouped[overall_key].first.push_back(s);
                grouped[overall_key].second.push_back(b);
            }
            for (const auto& [key, pair] : grouped) {
                set_by_group[key] = set_metrics(pair.first, pair.second);
            }
            have_sets = !set_by_group.empty();
        } catch (const std::exception& e) {
            log << "error: " << e.what() << '\n';
            return kExitInputError;
        }
    }

    persist_resolved_config(config);
    std::ofstream csv(report_path(config));
    if (!csv) {
        log << "error: cannot write " << report_path(config) << '\n';
        return kExitInputError;
    }
    csv << "method";
    for (GroupKey k : config.stratify_by) csv << ',' << to_string(k);
    csv << ",n,accuracy,auroc,ece,brier,avg_ece_brier,coverage,avg_set_size,"
           "majority_vote_accuracy,hit_rate\n";

    std::ofstream plot(plot_data_path(config));
    if (!plot) {
        log << "error: cannot write " << plot_data_path(config) << '\n';
        return kExitInputError;
    }
    plot << "model_tag,method,auroc,ece\n";

    for (const auto& [method, outcomes] : outcomes_by_method) {
        std::vector<GroupReport> reports;
        try {
            reports = stratify(outcomes, config.stratify_by, config.ece_bins);
        } catch (const std::exception& e) {
            log << "error: " << e.what() << '\n';
            return kExitInputError;
        }
        for (const GroupReport& r : reports) {
            csv << csv_field(to_string(method));
            for (const std::string& g : r.group) csv << ',' << csv_field(g);
            csv << ',' << r.n << ',' << fmt_num(r.accuracy) << ','
                << (r.auroc ? fmt_num(*r.auroc) : "") << ',' << fmt_num(r.ece) << ','
                << fmt_num(r.brier) << ',' << fmt_num(r.avg_ece_brier);
            if (have_sets) {
                auto it = set_by_group.find(r.group);
                if (it != set_by_group.end()) {
                    const SetMetrics& m = it->second;
                    csv << ',' << fmt_num(m.empirical_coverage) << ',' << fmt_num(m.avg_set_size)
                        << ',' << fmt_num(m.majority_vote_accuracy) << ',' << fmt_num(m.hit_rate);
                } else {
                    csv << ",,,,";
                }
            } else {
                csv << ",,,,";
            }
            csv << '\n';

            if (r.overall) {
                plot << csv_field(config.model_tag) << ',' << csv_field(to_string(method)) << ','
                     << (r.auroc ? fmt_num(*r.auroc) : "") << ',' << fmt_num(r.ece) << '\n';
            }
        }
    }
    log << "report written to " << report_path(config) << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------
// validate

int run_validate(const RunConfig& config, std::ostream& log) {
    try {
        std::vector<std::string> warnings;
        const std::vector<Question> questions =
            load_questions(config.questions_path, "jsonl", &warnings);
        log << questions.size() << " questions OK\n";
        if (!config.responses_path.empty()) {
            ResponseLoadOptions opts;
            opts.elicitation_scale_min = config.protocol.elicitation_scale_min;
            opts.elicitation_scale_max = config.protocol.elicitation_scale_max;
            std::vector<ResponseBundle> bundles =
                load_responses(config.responses_path, questions, opts, &warnings);
            if (!config.mapping_path.empty()) {
                import_external_mapping(config.mapping_path, bundles);
            }
            const std::vector<std::string> problems = validate_bundles(bundles);
            for (const std::string& w : warnings) log << "warning: " << w << '\n';
            if (!problems.empty()) {
                for (const std::string& p : problems) log << "invalid: " << p << '\n';
                return kExitInputError;
            }
            std::size_t records = 0;
            for (const ResponseBundle& b : bundles) records += b.record_count();
            log << bundles.size() << " bundles with " << records << " records OK\n";
        } else {
            for (const std::string& w : warnings) log << "warning: " << w << '\n';
        }
    } catch (const std::exception& e) {
        log << "error: " << e.what() << '\n';
        return kExitInputError;
    }
    return kExitOk;
}

}  // namespace uqeval
