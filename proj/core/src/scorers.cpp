#include "uqeval/scorers.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "uqeval/rng.hpp"

using nlohmann::json;

namespace uqeval {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

// Token index range scored by the logit-based methods: answer_span when
// present, the whole token list otherwise.
Span scored_span(const GenerationRecord& record) {
    if (!record.token_logprobs) {
        fail("record for question " + record.question_id + " has no token logprobs");
    }
    const std::size_t n = record.token_logprobs->size();
    Span span = record.answer_span ? *record.answer_span : Span{0, n};
    if (span.end > n || span.begin >= span.end) {
        fail("empty or out-of-bounds answer span for question " + record.question_id);
    }
    return span;
}

UncertaintyEstimate token_prob_estimate(const GenerationRecord& record, Method method) {
    const Span span = scored_span(record);
    const auto& tokens = *record.token_logprobs;
    double sum = 0.0;
    double lo = tokens[span.begin].logprob;
    double hi = lo;
    for (std::size_t i = span.begin; i < span.end; ++i) {
        const double lp = tokens[i].logprob;
        sum += std::exp(lp);
        lo = std::min(lo, lp);
        hi = std::max(hi, lp);
    }
    double raw = 0.0;
    switch (method) {
        case Method::avg_token_prob: raw = sum / static_cast<double>(span.size()); break;
        case Method::min_token_prob: raw = std::exp(lo); break;
        case Method::max_token_prob: raw = std::exp(hi); break;
        default: fail("not a token-probability method");
    }
    return {method, raw, Orientation::higher_is_confident, clip01(raw)};
}

bool is_word_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_';
}

std::size_t count_word(const std::string& text, std::string_view word) {
    std::size_t count = 0;
    std::size_t pos = 0;
    while ((pos = text.find(word, pos)) != std::string::npos) {
        const bool left_ok = pos == 0 || !is_word_char(text[pos - 1]);
        const std::size_t end = pos + word.size();
        const bool right_ok = end == text.size() || !is_word_char(text[end]);
        if (left_ok && right_ok) ++count;
        pos = end;
    }
    return count;
}

std::size_t whitespace_word_count(const std::string& text) {
    std::size_t count = 0;
    bool in_word = false;
    for (char c : text) {
        const bool ws = std::isspace(static_cast<unsigned char>(c)) != 0;
        if (!ws && !in_word) ++count;
        in_word = !ws;
    }
    return count;
}

// 4x4 linear solve by Gaussian elimination with partial pivoting.
std::array<double, 4> solve4(std::array<std::array<double, 4>, 4> a, std::array<double, 4> b) {
    for (int col = 0; col < 4; ++col) {
        int pivot = col;
        for (int r = col + 1; r < 4; ++r) {
            if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
        }
        if (std::abs(a[pivot][col]) < 1e-12) fail("singular system in regression fit");
        std::swap(a[col], a[pivot]);
        std::swap(b[col], b[pivot]);
        for (int r = col + 1; r < 4; ++r) {
            const double factor = a[r][col] / a[col][col];
            for (int c = col; c < 4; ++c) a[r][c] -= factor * a[col][c];
            b[r] -= factor * b[col];
        }
    }
    std::array<double, 4> x{};
    for (int r = 3; r >= 0; --r) {
        double acc = b[r];
        for (int c = r + 1; c < 4; ++c) acc -= a[r][c] * x[c];
        x[r] = acc / a[r][r];
    }
    return x;
}

std::vector<std::array<double, 3>> normalize_all(const std::vector<BehavioralFeatures>& features,
                                                 const FeatureNormalizer& normalizer) {
    std::vector<std::array<double, 3>> out;
    out.reserve(features.size());
    for (const BehavioralFeatures& f : features) out.push_back(normalizer.transform(f));
    return out;
}

struct LogisticObjective {
    const std::vector<std::array<double, 3>>& x;
    const std::vector<int>& y;
    // Separation fallback penalty. It covers the intercept too: a one-class
    // training set otherwise still drives the bias to infinity.
    double lambda = 0.0;

    double nll(const std::array<double, 4>& beta) const {
        double total = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double z = beta[0] * x[i][0] + beta[1] * x[i][1] + beta[2] * x[i][2] + beta[3];
            // log(1 + e^z) - y z, computed stably
            total += (z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)));
            total -= y[i] * z;
        }
        for (int k = 0; k < 4; ++k) total += 0.5 * lambda * beta[k] * beta[k];
        return total;
    }

    std::array<double, 4> gradient(const std::array<double, 4>& beta) const {
        std::array<double, 4> g{};
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double z = beta[0] * x[i][0] + beta[1] * x[i][1] + beta[2] * x[i][2] + beta[3];
            const double r = sigmoid(z) - y[i];
            for (int k = 0; k < 3; ++k) g[k] += r * x[i][k];
            g[3] += r;
        }
        for (int k = 0; k < 4; ++k) g[k] += lambda * beta[k];
        return g;
    }

    std::array<std::array<double, 4>, 4> hessian(const std::array<double, 4>& beta) const {
        std::array<std::array<double, 4>, 4> h{};
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double z = beta[0] * x[i][0] + beta[1] * x[i][1] + beta[2] * x[i][2] + beta[3];
            const double p = sigmoid(z);
            const double w = p * (1.0 - p);
            const std::array<double, 4> row{x[i][0], x[i][1], x[i][2], 1.0};
            for (int a = 0; a < 4; ++a) {
                for (int b = 0; b < 4; ++b) h[a][b] += w * row[a] * row[b];
            }
        }
        for (int k = 0; k < 4; ++k) h[k][k] += lambda;
        return h;
    }
};

double norm2(const std::array<double, 4>& v) {
    return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]);
}

// Extra Newton steps accepted only while they shrink the gradient norm. The
// declared tolerance leaves visible weight slack on ill-conditioned problems
// (penalized separable fits have curvature ~lambda along the separating
// direction), so once it is met we polish to numerical stationarity.
void polish_to_stationarity(const LogisticObjective& obj, std::array<double, 4>& beta) {
    for (int extra = 0; extra < 8; ++extra) {
        const auto g = obj.gradient(beta);
        std::array<double, 4> step{};
        try {
            step = solve4(obj.hessian(beta), {-g[0], -g[1], -g[2], -g[3]});
        } catch (const std::exception&) {
            return;
        }
        const std::array<double, 4> cand{beta[0] + step[0], beta[1] + step[1], beta[2] + step[2],
                                         beta[3] + step[3]};
        if (norm2(obj.gradient(cand)) < norm2(g)) {
            beta = cand;
        } else {
            return;
        }
    }
}

// Damped Newton. Returns true when the gradient norm criterion was met.
bool newton_optimize(const LogisticObjective& obj, std::array<double, 4>& beta, int max_iter,
                     double grad_tol) {
    double value = obj.nll(beta);
    for (int iter = 0; iter < max_iter; ++iter) {
        const auto g = obj.gradient(beta);
        if (norm2(g) < grad_tol) {
            polish_to_stationarity(obj, beta);
            return true;
        }
        std::array<double, 4> step{};
        try {
            step = solve4(obj.hessian(beta), {-g[0], -g[1], -g[2], -g[3]});
        } catch (const std::exception&) {
            return false;  // flat Hessian; caller decides what that means
        }
        // Near stationarity the true decrease per step drops below the
        // objective's floating-point noise; the slack keeps full Newton
        // steps acceptable there instead of stalling the line search.
        const double noise_slack = 1e-10 * (std::abs(value) + 1.0);
        double scale = 1.0;
        bool accepted = false;
        for (int half = 0; half < 40; ++half) {
            const std::array<double, 4> cand{beta[0] + scale * step[0], beta[1] + scale * step[1],
                                             beta[2] + scale * step[2], beta[3] + scale * step[3]};
            const double cand_value = obj.nll(cand);
            if (cand_value <= value + noise_slack) {
                beta = cand;
                value = cand_value;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if (!accepted) break;                 // no measurable progress left
        if (norm2(beta) > 1e4) return false;  // running off to infinity
    }
    if (norm2(obj.gradient(beta)) < grad_tol) {
        polish_to_stationarity(obj, beta);
        return true;
    }
    return false;
}

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

std::string to_string(Method m) {
    switch (m) {
        case Method::avg_token_prob: return "avg_token_prob";
        case Method::min_token_prob: return "min_token_prob";
        case Method::max_token_prob: return "max_token_prob";
        case Method::gnll: return "gnll";
        case Method::semantic_entropy: return "semantic_entropy";
        case Method::elicited: return "elicited";
        case Method::linear_sum: return "linear_sum";
        case Method::logistic: return "logistic";
        case Method::calibration_regression: return "calibration_regression";
    }
    fail("unreachable method");
}

Method method_from_string(std::string_view s) {
    static const std::map<std::string_view, Method> table{
        {"avg_token_prob", Method::avg_token_prob},
        {"min_token_prob", Method::min_token_prob},
        {"max_token_prob", Method::max_token_prob},
        {"gnll", Method::gnll},
        {"semantic_entropy", Method::semantic_entropy},
        {"elicited", Method::elicited},
        {"linear_sum", Method::linear_sum},
        {"logistic", Method::logistic},
        {"calibration_regression", Method::calibration_regression},
    };
    auto it = table.find(s);
    if (it == table.end()) throw std::invalid_argument("unknown method: " + std::string(s));
    return it->second;
}

std::string to_string(Orientation o) {
    return o == Orientation::higher_is_uncertain ? "higher_is_uncertain" : "higher_is_confident";
}

Orientation orientation_from_string(std::string_view s) {
    if (s == "higher_is_uncertain") return Orientation::higher_is_uncertain;
    if (s == "higher_is_confident") return Orientation::higher_is_confident;
    throw std::invalid_argument("unknown orientation: " + std::string(s));
}

UncertaintyEstimate avg_token_prob(const GenerationRecord& record) {
    return token_prob_estimate(record, Method::avg_token_prob);
}

UncertaintyEstimate min_token_prob(const GenerationRecord& record) {
    return token_prob_estimate(record, Method::min_token_prob);
}

UncertaintyEstimate max_token_prob(const GenerationRecord& record) {
    return token_prob_estimate(record, Method::max_token_prob);
}

UncertaintyEstimate gnll(const GenerationRecord& record) {
    const Span span = scored_span(record);
    const auto& tokens = *record.token_logprobs;
    double raw = 0.0;
    for (std::size_t i = span.begin; i < span.end; ++i) raw -= tokens[i].logprob;
    const double confidence = std::exp(-raw / static_cast<double>(span.size()));
    return {Method::gnll, raw, Orientation::higher_is_uncertain, clip01(confidence)};
}

UncertaintyEstimate semantic_entropy(const ResponseBundle& bundle) {
    std::array<std::size_t, kNumOptions> counts{};
    std::size_t total = 0;
    for (const GenerationRecord& r : bundle.sampled_records) {
        if (!r.extracted_canonical) continue;
        ++counts[static_cast<std::size_t>(*r.extracted_canonical)];
        ++total;
    }
    if (total < 2) {
        fail("semantic entropy needs at least 2 extracted samples for question " +
             bundle.question.id);
    }
    double entropy = 0.0;
    double modal = 0.0;
    for (std::size_t c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / static_cast<double>(total);
        entropy -= p * std::log(p);
        modal = std::max(modal, p);
    }
    if (entropy < 0.0) entropy = 0.0;  // -0.0 from rounding
    return {Method::semantic_entropy, entropy, Orientation::higher_is_uncertain, modal};
}

UncertaintyEstimate elicited(const ResponseBundle& bundle) {
    if (!bundle.elicited_confidence) {
        fail("no elicited confidence for question " + bundle.question.id);
    }
    const double c = clip01(*bundle.elicited_confidence);
    return {Method::elicited, c, Orientation::higher_is_confident, c};
}

BehavioralFeatures extract_features(const GenerationRecord& record) {
    BehavioralFeatures out;
    std::string span_text;
    if (record.token_logprobs) {
        const auto& tokens = *record.token_logprobs;
        Span span = record.reasoning_span ? *record.reasoning_span : Span{0, tokens.size()};
        span.end = std::min(span.end, tokens.size());
        span.begin = std::min(span.begin, span.end);
        out.token_count = span.size();
        for (std::size_t i = span.begin; i < span.end; ++i) span_text += tokens[i].text;
    } else {
        Span span = record.reasoning_span ? *record.reasoning_span : Span{0, record.raw_text.size()};
        span.end = std::min(span.end, record.raw_text.size());
        span.begin = std::min(span.begin, span.end);
        span_text = record.raw_text.substr(span.begin, span.size());
        out.token_count = whitespace_word_count(span_text);
    }
    out.question_count = static_cast<std::size_t>(
        std::count(span_text.begin(), span_text.end(), '?'));
    out.wait_count = count_word(span_text, "Wait");
    out.whole_text_fallback = !record.reasoning_span.has_value();
    return out;
}

std::array<double, 3> FeatureNormalizer::transform(const BehavioralFeatures& f) const {
    const std::array<double, 3> raw{static_cast<double>(f.token_count),
                                    static_cast<double>(f.question_count),
                                    static_cast<double>(f.wait_count)};
    std::array<double, 3> out{};
    for (int k = 0; k < 3; ++k) {
        out[k] = max[k] > min[k] ? clip01((raw[k] - min[k]) / (max[k] - min[k])) : 0.0;
    }
    return out;
}

FeatureNormalizer fit_normalizer(const std::vector<BehavioralFeatures>& training) {
    if (training.empty()) fail("cannot fit a normalizer on an empty training set");
    FeatureNormalizer n;
    for (int k = 0; k < 3; ++k) {
        n.min[k] = std::numeric_limits<double>::infinity();
        n.max[k] = -std::numeric_limits<double>::infinity();
    }
    for (const BehavioralFeatures& f : training) {
        const std::array<double, 3> raw{static_cast<double>(f.token_count),
                                        static_cast<double>(f.question_count),
                                        static_cast<double>(f.wait_count)};
        for (int k = 0; k < 3; ++k) {
            n.min[k] = std::min(n.min[k], raw[k]);
            n.max[k] = std::max(n.max[k], raw[k]);
        }
    }
    return n;
}

UncertaintyEstimate linear_sum(const BehavioralFeatures& features,
                               const FeatureNormalizer& normalizer) {
    const auto x = normalizer.transform(features);
    const double raw = x[0] + x[1] + x[2];
    return {Method::linear_sum, raw, Orientation::higher_is_uncertain, clip01(1.0 - raw / 3.0)};
}

std::string to_string(RegressionKind k) {
    return k == RegressionKind::logistic ? "logistic" : "ridge";
}

RegressionKind regression_kind_from_string(std::string_view s) {
    if (s == "logistic") return RegressionKind::logistic;
    if (s == "ridge") return RegressionKind::ridge;
    throw std::invalid_argument("unknown regression kind: " + std::string(s));
}

double RegressionModel::predict_confidence(const std::array<double, 3>& normalized) const {
    const double z =
        weights[0] * normalized[0] + weights[1] * normalized[1] + weights[2] * normalized[2] + bias;
    return kind == RegressionKind::logistic ? sigmoid(z) : clip01(z);
}

RegressionModel fit_ridge(const std::vector<BehavioralFeatures>& features,
                          const std::vector<int>& labels, double lambda,
                          const FeatureNormalizer& normalizer) {
    if (features.size() != labels.size()) fail("feature/label length mismatch");
    if (features.size() < 4) fail("ridge fit needs at least 4 examples");
    if (!(lambda > 0.0)) fail("ridge lambda must be > 0");

    const auto x = normalize_all(features, normalizer);
    std::array<std::array<double, 4>, 4> m{};
    std::array<double, 4> rhs{};
    for (std::size_t i = 0; i < x.size(); ++i) {
        const std::array<double, 4> row{x[i][0], x[i][1], x[i][2], 1.0};
        for (int a = 0; a < 4; ++a) {
            for (int b = 0; b < 4; ++b) m[a][b] += row[a] * row[b];
            rhs[a] += row[a] * labels[i];
        }
    }
    for (int k = 0; k < 3; ++k) m[k][k] += lambda;  // intercept stays unregularized

    const auto beta = solve4(m, rhs);
    RegressionModel model;
    model.kind = RegressionKind::ridge;
    model.weights = {beta[0], beta[1], beta[2]};
    model.bias = beta[3];
    model.ridge_lambda = lambda;
    model.normalizer = normalizer;
    return model;
}

RegressionModel fit_logistic(const std::vector<BehavioralFeatures>& features,
                             const std::vector<int>& labels,
                             const FeatureNormalizer& normalizer) {
    if (features.size() != labels.size()) fail("feature/label length mismatch");
    if (features.size() < 4) fail("logistic fit needs at least 4 examples");

    const auto x = normalize_all(features, normalizer);
    constexpr int kMaxIter = 1000;
    constexpr double kGradTol = 1e-8;
    constexpr double kSeparationPenalty = 1e-6;

    std::array<double, 4> beta{};
    LogisticObjective unpenalized{x, labels, 0.0};
    bool converged = newton_optimize(unpenalized, beta, kMaxIter, kGradTol);

    // Under perfect separation the gradient still vanishes as the weights run
    // out along the separating direction, so a converged fit that predicts
    // every label essentially exactly is separation too.
    bool separated = !converged;
    if (converged) {
        double max_residual = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double z = beta[0] * x[i][0] + beta[1] * x[i][1] + beta[2] * x[i][2] + beta[3];
            max_residual = std::max(max_residual, std::abs(sigmoid(z) - labels[i]));
        }
        separated = max_residual < 1e-6;
    }

    RegressionModel model;
    model.kind = RegressionKind::logistic;
    model.normalizer = normalizer;
    if (separated) {
        // Perfect separation drives the MLE to infinity; refit with a small
        // ridge penalty and flag the model.
        beta = {};
        LogisticObjective penalized{x, labels, kSeparationPenalty};
        if (!newton_optimize(penalized, beta, kMaxIter, kGradTol)) {
            fail("logistic fit did not converge even with the separation penalty");
        }
        model.separation_warning = true;
        model.ridge_lambda = kSeparationPenalty;
    }
    model.weights = {beta[0], beta[1], beta[2]};
    model.bias = beta[3];
    return model;
}

UncertaintyEstimate predict_uncertainty(const RegressionModel& model,
                                        const BehavioralFeatures& features) {
    const double f = model.predict_confidence(model.normalizer.transform(features));
    const Method method = model.kind == RegressionKind::logistic ? Method::logistic
                                                                 : Method::calibration_regression;
    return {method, 1.0 - f, Orientation::higher_is_uncertain, f};
}

TrainEvalSplit split_train_eval(const std::vector<ResponseBundle>& bundles, double train_fraction,
                                std::uint64_t seed, std::vector<std::string>* warnings) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        fail("train fraction must lie strictly between 0 and 1");
    }
    std::map<std::string, std::vector<std::size_t>> by_specialty;
    for (std::size_t i = 0; i < bundles.size(); ++i) {
        const std::string& s = bundles[i].question.specialty;
        if (s.empty()) fail("bundle " + bundles[i].question.id + " has no specialty tag");
        by_specialty[s].push_back(i);
    }

    TrainEvalSplit split;
    for (auto& [specialty, indices] : by_specialty) {
        if (indices.size() < 2) {
            if (warnings) {
                warnings->push_back("specialty '" + specialty +
                                    "' has fewer than 2 bundles; assigned to train");
            }
            split.train.insert(split.train.end(), indices.begin(), indices.end());
            continue;
        }
        std::mt19937_64 gen(substream_seed(seed, fnv1a64(specialty)));
        deterministic_shuffle(indices, gen);
        const auto n = indices.size();
        auto k = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n) + 0.5));
        k = std::clamp<std::size_t>(k, 1, n - 1);
        split.train.insert(split.train.end(), indices.begin(), indices.begin() + k);
        split.eval.insert(split.eval.end(), indices.begin() + k, indices.end());
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.eval.begin(), split.eval.end());
    return split;
}

std::string serialize_model(const RegressionModel& model) {
    json j{
        {"kind", to_string(model.kind)},
        {"weights", model.weights},
        {"bias", model.bias},
        {"ridge_lambda", model.ridge_lambda},
        {"normalizer", {{"min", model.normalizer.min}, {"max", model.normalizer.max}}},
        {"separation_warning", model.separation_warning},
    };
    return j.dump(2) + "\n";
}

RegressionModel parse_model(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) fail("malformed model document");
    RegressionModel model;
    try {
        model.kind = regression_kind_from_string(j.at("kind").get<std::string>());
        model.weights = j.at("weights").get<std::array<double, 3>>();
        model.bias = j.at("bias").get<double>();
        model.ridge_lambda = j.at("ridge_lambda").get<double>();
        model.normalizer.min = j.at("normalizer").at("min").get<std::array<double, 3>>();
        model.normalizer.max = j.at("normalizer").at("max").get<std::array<double, 3>>();
        model.separation_warning = j.value("separation_warning", false);
    } catch (const json::exception& e) {
        fail(std::string("malformed model document: ") + e.what());
    }
    return model;
}

void save_model(const std::string& path, const RegressionModel& model) {
    std::ofstream out(path);
    if (!out) fail("cannot write model file: " + path);
    out << serialize_model(model);
}

RegressionModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open model file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_model(ss.str());
}

}  // namespace uqeval
