#include "uqeval/conformal.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

using nlohmann::json;

namespace uqeval {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

// ceil() guarded against representation noise: 320 * 0.9 must stay 288.
std::size_t ceil_index(double v) {
    return static_cast<std::size_t>(std::ceil(v - 1e-9));
}

struct OptionFrequencies {
    std::array<double, kNumOptions> p{};  // sums to 1 over extracted samples
    std::array<std::size_t, kNumOptions> counts{};
    std::size_t total = 0;
};

OptionFrequencies sampled_frequencies(const ResponseBundle& bundle) {
    OptionFrequencies f;
    for (const GenerationRecord& r : bundle.sampled_records) {
        if (!r.extracted_canonical) continue;
        ++f.counts[static_cast<std::size_t>(*r.extracted_canonical)];
        ++f.total;
    }
    if (f.total == 0) {
        fail("no extracted samples for question " + bundle.question.id);
    }
    for (int o = 0; o < kNumOptions; ++o) {
        f.p[o] = static_cast<double>(f.counts[o]) / static_cast<double>(f.total);
    }
    return f;
}

Label modal_option(const OptionFrequencies& f, bool* tie) {
    std::size_t best = 0;
    for (int o = 1; o < kNumOptions; ++o) {
        if (f.counts[o] > f.counts[best]) best = o;
    }
    if (tie) {
        *tie = false;
        for (int o = 0; o < kNumOptions; ++o) {
            if (o != static_cast<int>(best) && f.counts[o] == f.counts[best]) *tie = true;
        }
    }
    return static_cast<Label>(best);
}

}  // namespace

std::string to_string(QuantileRule r) {
    return r == QuantileRule::empirical ? "empirical" : "conformal_corrected";
}

QuantileRule quantile_rule_from_string(std::string_view s) {
    if (s == "empirical") return QuantileRule::empirical;
    if (s == "conformal_corrected") return QuantileRule::conformal_corrected;
    throw std::invalid_argument("unknown quantile rule: " + std::string(s));
}

double quantile_threshold(const std::vector<double>& sorted_scores, double alpha,
                          QuantileRule rule) {
    const std::size_t n = sorted_scores.size();
    if (n == 0) fail("quantile of an empty score list");
    if (!(alpha > 0.0 && alpha < 1.0)) fail("alpha must lie strictly between 0 and 1");

    if (rule == QuantileRule::empirical) {
        const std::size_t idx = ceil_index((1.0 - alpha) * static_cast<double>(n - 1));
        return sorted_scores[std::min(idx, n - 1)];
    }
    // ceil((n+1)(1-alpha))-th order statistic; beyond the sample -> 1.0,
    // which includes every option downstream.
    const std::size_t k = ceil_index((static_cast<double>(n) + 1.0) * (1.0 - alpha));
    if (k > n) return 1.0;
    return sorted_scores[k - 1];
}

std::array<double, kNumOptions> option_scores(const ResponseBundle& bundle) {
    const OptionFrequencies f = sampled_frequencies(bundle);
    std::array<double, kNumOptions> s{};
    for (int o = 0; o < kNumOptions; ++o) s[o] = 1.0 - f.p[o];
    return s;
}

std::size_t PredictionSet::size() const {
    std::size_t n = 0;
    for (bool b : included) n += b ? 1 : 0;
    return n;
}

ConformalCalibration calibrate(const std::vector<ResponseBundle>& bundles, double alpha,
                               QuantileRule rule) {
    if (bundles.empty()) fail("empty calibration set");
    ConformalCalibration cal;
    cal.alpha = alpha;
    cal.quantile_rule = rule;
    cal.calibration_scores.reserve(bundles.size());
    for (const ResponseBundle& b : bundles) {
        const OptionFrequencies f = sampled_frequencies(b);
        cal.calibration_scores.push_back(1.0 - f.p[static_cast<std::size_t>(b.question.gold)]);
        cal.samples_per_question = std::max(cal.samples_per_question, f.total);
    }
    std::sort(cal.calibration_scores.begin(), cal.calibration_scores.end());
    cal.qhat = quantile_threshold(cal.calibration_scores, alpha, rule);
    return cal;
}

PredictionSet predict_set(const ResponseBundle& bundle, const ConformalCalibration& calibration) {
    PredictionSet set;
    set.question_id = bundle.question.id;
    set.option_scores = option_scores(bundle);
    for (int o = 0; o < kNumOptions; ++o) {
        set.included[o] = set.option_scores[o] <= calibration.qhat;
    }
    return set;
}

SetMetrics set_metrics(const std::vector<PredictionSet>& sets,
                       const std::vector<ResponseBundle>& bundles) {
    if (sets.empty()) fail("set_metrics over an empty list");
    std::map<std::string, const ResponseBundle*> by_id;
    for (const ResponseBundle& b : bundles) by_id[b.question.id] = &b;

    SetMetrics m;
    double covered = 0.0;
    double size_sum = 0.0;
    double majority_correct = 0.0;
    double hits = 0.0;
    for (const PredictionSet& set : sets) {
        auto it = by_id.find(set.question_id);
        if (it == by_id.end()) fail("prediction set for unknown question " + set.question_id);
        const ResponseBundle& b = *it->second;
        const auto gold = static_cast<std::size_t>(b.question.gold);

        covered += set.included[gold] ? 1.0 : 0.0;
        size_sum += static_cast<double>(set.size());

        const OptionFrequencies f = sampled_frequencies(b);
        bool tie = false;
        const Label modal = modal_option(f, &tie);
        if (tie) ++m.majority_ties_broken;
        majority_correct += modal == b.question.gold ? 1.0 : 0.0;
        hits += f.counts[gold] > 0 ? 1.0 : 0.0;
    }
    const auto n = static_cast<double>(sets.size());
    m.empirical_coverage = covered / n;
    m.avg_set_size = size_sum / n;
    m.majority_vote_accuracy = majority_correct / n;
    m.hit_rate = hits / n;
    return m;
}

std::string serialize_calibration(const ConformalCalibration& calibration) {
    json j{
        {"alpha", calibration.alpha},
        {"qhat", calibration.qhat},
        {"quantile_rule", to_string(calibration.quantile_rule)},
        {"samples_per_question", calibration.samples_per_question},
        {"scores", calibration.calibration_scores},
    };
    return j.dump(2) + "\n";
}

ConformalCalibration parse_calibration(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) fail("malformed calibration document");
    ConformalCalibration cal;
    try {
        cal.alpha = j.at("alpha").get<double>();
        cal.qhat = j.at("qhat").get<double>();
        cal.quantile_rule = quantile_rule_from_string(j.at("quantile_rule").get<std::string>());
        cal.samples_per_question = j.at("samples_per_question").get<std::size_t>();
        cal.calibration_scores = j.at("scores").get<std::vector<double>>();
    } catch (const json::exception& e) {
        fail(std::string("malformed calibration document: ") + e.what());
    }
    return cal;
}

void save_calibration(const std::string& path, const ConformalCalibration& calibration) {
    std::ofstream out(path);
    if (!out) fail("cannot write calibration file: " + path);
    out << serialize_calibration(calibration);
}

ConformalCalibration load_calibration(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open calibration file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_calibration(ss.str());
}

void save_prediction_sets(const std::string& path, const std::vector<PredictionSet>& sets) {
    std::ofstream out(path);
    if (!out) fail("cannot write prediction sets file: " + path);
    for (const PredictionSet& s : sets) {
        json included = json::array();
        json scores = json::object();
        for (int o = 0; o < kNumOptions; ++o) {
            const std::string label(1, label_char(static_cast<Label>(o)));
            if (s.included[o]) included.push_back(label);
            scores[label] = s.option_scores[o];
        }
        json j{
            {"question_id", s.question_id},
            {"included", std::move(included)},
            {"option_scores", std::move(scores)},
        };
        out << j.dump() << '\n';
    }
}

std::vector<PredictionSet> load_prediction_sets(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open prediction sets file: " + path);
    std::vector<PredictionSet> sets;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            fail(path + ":" + std::to_string(line_no) + ": malformed prediction set");
        }
        PredictionSet s;
        try {
            s.question_id = j.at("question_id").get<std::string>();
            for (const json& l : j.at("included")) {
                s.included[static_cast<std::size_t>(label_from_char(l.get<std::string>().at(0)))] =
                    true;
            }
            for (int o = 0; o < kNumOptions; ++o) {
                const std::string label(1, label_char(static_cast<Label>(o)));
                s.option_scores[o] = j.at("option_scores").at(label).get<double>();
            }
        } catch (const std::exception& e) {
            fail(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        sets.push_back(std::move(s));
    }
    return sets;
}

}  // namespace uqeval
