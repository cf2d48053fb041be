#pragma once

#include <chrono>
#include <fstream>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "uqeval/corpus.hpp"

namespace uqeval {

struct EndpointConfig {
    std::string base_url;  // e.g. http://127.0.0.1:8000/v1
    std::string model_name;
    std::string auth_token_env = "UQEVAL_API_TOKEN";
    int max_parallel = 4;
    std::chrono::milliseconds timeout{30000};
    int retries = 2;
    std::vector<std::chrono::milliseconds> backoff{std::chrono::milliseconds{250},
                                                   std::chrono::milliseconds{1000}};
};

enum class TemplateKind { answer, elicitation };

/// Prompt body with {question}/{options} placeholders (answer kind) or
/// {question}/{answer} placeholders (elicitation kind).
struct PromptTemplate {
    std::string body;
    TemplateKind kind = TemplateKind::answer;
};

PromptTemplate default_answer_template();
PromptTemplate default_elicitation_template();

/// Renders the question with options in displayed order, labels [A]..[D].
/// Template text outside placeholders is preserved byte-exactly.
std::string build_prompt(const Question& question, const OptionPermutation& permutation,
                         const PromptTemplate& tmpl);

std::string build_elicitation_prompt(const Question& question, const std::string& answer_text,
                                     const PromptTemplate& tmpl);

/// First numeric literal inside [scale_min, scale_max], normalized to [0, 1].
/// Absence of a parseable in-range number is a valid result, not an error.
std::optional<double> parse_elicited(std::string_view raw, double scale_min, double scale_max);

struct SamplingProtocol {
    int greedy_shuffles = 4;
    int entropy_samples = 10;
    int conformal_samples = 20;
    double temperature = 0.6;
    double top_p = 0.9;
    bool elicit_confidence = false;
    double elicitation_scale_min = 0.0;
    double elicitation_scale_max = 100.0;

    int sampled_total() const { return entropy_samples + conformal_samples; }
};

/// Thread-safe line appender; one record per completed request so an
/// interrupted run resumes without re-querying.
class ResponseAppender {
public:
    ResponseAppender(const std::string& path, bool append);
    void append_record(const GenerationRecord& record);
    void append_elicitation(const std::string& question_id, const std::string& raw);

private:
    std::ofstream out_;
    std::mutex mu_;
};

/// Requests already present in the response log for one question.
struct CollectedSoFar {
    std::set<std::uint32_t> greedy_indices;
    std::set<std::uint32_t> sampled_indices;
    bool has_elicitation = false;
    std::optional<std::string> first_greedy_text;  // needed to resume elicitation
};

struct CollectResult {
    ResponseBundle bundle;                // newly collected records only
    std::vector<std::string> failures;    // one note per request that exhausted retries
    bool complete() const { return failures.empty(); }
};

/// Queries the endpoint for every record the protocol requires and the log
/// does not already hold. Greedy shuffles use shuffle_index 0..G-1; sampled
/// generations continue at G..G+S-1, each with its own permutation and
/// decoding seed. Throws if the endpoint yields nothing at all; partial
/// failure returns an incomplete result instead.
CollectResult collect_bundle(const Question& question, const EndpointConfig& endpoint,
                             const SamplingProtocol& protocol, std::uint64_t shuffle_seed,
                             const PromptTemplate& answer_template,
                             const PromptTemplate& elicitation_template,
                             ResponseAppender* sink = nullptr,
                             const CollectedSoFar* existing = nullptr);

}  // namespace uqeval
