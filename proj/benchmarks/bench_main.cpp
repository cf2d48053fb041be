#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "uqeval/conformal.hpp"
#include "uqeval/corpus.hpp"
#include "uqeval/metrics.hpp"
#include "uqeval/rng.hpp"
#include "uqeval/scorers.hpp"

using namespace uqeval;

namespace {

ResponseBundle sampled_bundle(std::mt19937_64& gen, int m) {
    ResponseBundle b;
    b.question.id = "b";
    b.question.gold = Label::B;
    b.question.specialty = "Bench";
    for (int s = 0; s < m; ++s) {
        GenerationRecord r;
        r.question_id = "b";
        r.decoding.mode = DecodingMode::nucleus;
        const auto answered = static_cast<Label>(bounded_uint(gen, 4));
        r.extracted_displayed = answered;
        r.extracted_canonical = answered;
        r.extraction_source = ExtractionSource::regex;
        b.sampled_records.push_back(std::move(r));
    }
    return b;
}

std::vector<ScoredOutcome> outcome_table(std::mt19937_64& gen, std::size_t n) {
    std::vector<ScoredOutcome> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        ScoredOutcome o;
        o.question_id = "q" + std::to_string(i);
        o.method = Method::semantic_entropy;
        o.confidence = uniform_double(gen);
        o.uncertainty_raw = 1.0 - o.confidence;
        o.correct = uniform_double(gen) < o.confidence;
        o.specialty = "Bench";
        o.question_type = "Other";
        o.model_tag = "bench";
        out.push_back(std::move(o));
    }
    return out;
}

void bm_extract_answer(benchmark::State& state) {
    const std::string text =
        "<think>Wait, is this right? Let me reconsider the presentation once more.</think> "
        "After weighing the options the best supported choice is [C] given the findings.";
    for (auto _ : state) {
        benchmark::DoNotOptimize(extract_answer(text));
    }
}

void bm_semantic_entropy(benchmark::State& state) {
    std::mt19937_64 gen(1);
    const auto b = sampled_bundle(gen, static_cast<int>(state.range(0)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(semantic_entropy(b));
    }
}

void bm_auroc(benchmark::State& state) {
    std::mt19937_64 gen(2);
    const auto outcomes = outcome_table(gen, static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(auroc(outcomes));
    }
}

void bm_ece(benchmark::State& state) {
    std::mt19937_64 gen(3);
    const auto outcomes = outcome_table(gen, static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(ece(outcomes, 10));
    }
}

void bm_conformal_calibrate(benchmark::State& state) {
    std::mt19937_64 gen(4);
    std::vector<ResponseBundle> bundles;
    for (long i = 0; i < state.range(0); ++i) bundles.push_back(sampled_bundle(gen, 20));
    for (auto _ : state) {
        benchmark::DoNotOptimize(calibrate(bundles, 0.1, QuantileRule::conformal_corrected));
    }
}

void bm_fit_ridge(benchmark::State& state) {
    std::mt19937_64 gen(5);
    std::vector<BehavioralFeatures> f;
    std::vector<int> labels;
    for (long i = 0; i < state.range(0); ++i) {
        BehavioralFeatures fi;
        fi.token_count = bounded_uint(gen, 400);
        fi.question_count = bounded_uint(gen, 10);
        fi.wait_count = bounded_uint(gen, 8);
        f.push_back(fi);
        labels.push_back(static_cast<int>(bounded_uint(gen, 2)));
    }
    const auto normalizer = fit_normalizer(f);
    for (auto _ : state) {
        benchmark::DoNotOptimize(fit_ridge(f, labels, 1.0, normalizer));
    }
}

void bm_fit_logistic(benchmark::State& state) {
    std::mt19937_64 gen(6);
    std::vector<BehavioralFeatures> f;
    std::vector<int> labels;
    for (long i = 0; i < state.range(0); ++i) {
        BehavioralFeatures fi;
        fi.token_count = bounded_uint(gen, 400);
        fi.question_count = bounded_uint(gen, 10);
        fi.wait_count = bounded_uint(gen, 8);
        f.push_back(fi);
        labels.push_back(uniform_double(gen) < 0.3 + 0.001 * fi.token_count ? 1 : 0);
    }
    const auto normalizer = fit_normalizer(f);
    for (auto _ : state) {
        benchmark::DoNotOptimize(fit_logistic(f, labels, normalizer));
    }
}

}  // namespace

BENCHMARK(bm_extract_answer);
BENCHMARK(bm_semantic_entropy)->Arg(10)->Arg(20);
BENCHMARK(bm_auroc)->Range(256, 16384);
BENCHMARK(bm_ece)->Range(256, 16384);
BENCHMARK(bm_conformal_calibrate)->Arg(320);
BENCHMARK(bm_fit_ridge)->Arg(64)->Arg(512);
BENCHMARK(bm_fit_logistic)->Arg(64)->Arg(512);

BENCHMARK_MAIN();
