#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "uqeval/corpus.hpp"

namespace uqeval {

enum class Method {
    avg_token_prob,
    min_token_prob,
    max_token_prob,
    gnll,
    semantic_entropy,
    elicited,
    linear_sum,
    logistic,
    calibration_regression,
};

std::string to_string(Method m);
Method method_from_string(std::string_view s);

enum class Orientation { higher_is_uncertain, higher_is_confident };

std::string to_string(Orientation o);
Orientation orientation_from_string(std::string_view s);

/// Scalar uncertainty score plus its declared confidence mapping. Confidence
/// is always in [0, 1]; orientation is fixed per method.
struct UncertaintyEstimate {
    Method method = Method::avg_token_prob;
    double raw = 0.0;
    Orientation orientation = Orientation::higher_is_confident;
    double confidence = 0.0;
};

// ---------------------------------------------------------------------------
// Logit-based scores. The scored span is answer_span when present, otherwise
// the whole token list. All throw when the record has no token logprobs or
// the span is empty.

UncertaintyEstimate avg_token_prob(const GenerationRecord& record);
UncertaintyEstimate min_token_prob(const GenerationRecord& record);
UncertaintyEstimate max_token_prob(const GenerationRecord& record);

/// raw = -sum(logprob); confidence = exp(-raw / span_length), the
/// length-normalized sequence likelihood.
UncertaintyEstimate gnll(const GenerationRecord& record);

// ---------------------------------------------------------------------------
// Sampling- and elicitation-based scores.

/// Entropy (natural log) of the answer-option distribution over extracted
/// sampled records; confidence is the modal option frequency. Requires at
/// least two extracted samples.
UncertaintyEstimate semantic_entropy(const ResponseBundle& bundle);

UncertaintyEstimate elicited(const ResponseBundle& bundle);

// ---------------------------------------------------------------------------
// Behavioral features from reasoning traces.

struct BehavioralFeatures {
    std::size_t token_count = 0;
    std::size_t question_count = 0;   // '?' occurrences
    std::size_t wait_count = 0;       // word-delimited, case-sensitive "Wait"
    bool whole_text_fallback = false; // no reasoning span; counts cover the full response
};

/// Counts over the reasoning span; falls back to the whole response when the
/// record has no reasoning span (flagged via whole_text_fallback).
BehavioralFeatures extract_features(const GenerationRecord& record);

/// Per-feature min-max transform, fitted on the training split only;
/// evaluation-time values are clipped to [0, 1]. A constant feature maps to 0.
struct FeatureNormalizer {
    std::array<double, 3> min{0.0, 0.0, 0.0};
    std::array<double, 3> max{0.0, 0.0, 0.0};

    std::array<double, 3> transform(const BehavioralFeatures& f) const;
};

FeatureNormalizer fit_normalizer(const std::vector<BehavioralFeatures>& training);

/// u = x1 + x2 + x3 over normalized features; confidence = 1 - u/3.
UncertaintyEstimate linear_sum(const BehavioralFeatures& features, const FeatureNormalizer& normalizer);

enum class RegressionKind { logistic, ridge };

std::string to_string(RegressionKind k);
RegressionKind regression_kind_from_string(std::string_view s);

struct RegressionModel {
    RegressionKind kind = RegressionKind::ridge;
    std::array<double, 3> weights{0.0, 0.0, 0.0};  // tokens, questions, waits
    double bias = 0.0;
    double ridge_lambda = 0.0;  // ridge penalty, or the separation fallback penalty
    FeatureNormalizer normalizer;
    bool separation_warning = false;

    /// f(x) on already-normalized features: sigmoid for logistic, clip to
    /// [0, 1] for ridge.
    double predict_confidence(const std::array<double, 3>& normalized) const;
};

/// Closed-form L2-regularized least squares on the three normalized features
/// with an unregularized intercept. Labels are correctness indicators {0, 1}.
RegressionModel fit_ridge(const std::vector<BehavioralFeatures>& features,
                          const std::vector<int>& labels, double lambda,
                          const FeatureNormalizer& normalizer);

/// Maximum-likelihood logistic fit (Newton iterations, gradient norm < 1e-8
/// or 1000 iterations). Perfectly separable data converges under a 1e-6 L2
/// penalty with separation_warning set.
RegressionModel fit_logistic(const std::vector<BehavioralFeatures>& features,
                             const std::vector<int>& labels,
                             const FeatureNormalizer& normalizer);

/// u = 1 - f(x); confidence = f(x).
UncertaintyEstimate predict_uncertainty(const RegressionModel& model,
                                        const BehavioralFeatures& features);

// ---------------------------------------------------------------------------
// Train/eval split.

struct TrainEvalSplit {
    std::vector<std::size_t> train;  // indices into the bundle list
    std::vector<std::size_t> eval;
};

/// Deterministic stratified split preserving the specialty distribution.
/// Specialties with fewer than two bundles go entirely to train (warned).
TrainEvalSplit split_train_eval(const std::vector<ResponseBundle>& bundles, double train_fraction,
                                std::uint64_t seed, std::vector<std::string>* warnings = nullptr);

// ---------------------------------------------------------------------------
// Model serialization.

std::string serialize_model(const RegressionModel& model);
RegressionModel parse_model(const std::string& text);
void save_model(const std::string& path, const RegressionModel& model);
RegressionModel load_model(const std::string& path);

}  // namespace uqeval
