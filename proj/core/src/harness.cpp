#include "uqeval/harness.hpp"

#include <atomic>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "uqeval/rng.hpp"

using nlohmann::json;

namespace uqeval {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

constexpr std::string_view kThinkOpen = "<think>";
constexpr std::string_view kThinkClose = "</think>";

std::string substitute(const std::string& body, std::string_view placeholder,
                       const std::string& value) {
    const auto pos = body.find(placeholder);
    if (pos == std::string::npos) {
        fail("prompt template is missing placeholder " + std::string(placeholder));
    }
    std::string out = body;
    out.replace(pos, placeholder.size(), value);
    return out;
}

std::string render_options(const Question& question, const OptionPermutation& permutation) {
    std::string out;
    for (int i = 0; i < kNumOptions; ++i) {
        const auto displayed = static_cast<Label>(i);
        out += '[';
        out += label_char(displayed);
        out += "] ";
        out += question.option_text(permutation.canonical(displayed));
        if (i + 1 < kNumOptions) out += '\n';
    }
    return out;
}

}  // namespace

PromptTemplate default_answer_template() {
    return {
        "Question: {question}\n\n"
        "Provide a concise answer and start your response with the letter of the selected "
        "option in square brackets. Options:\n\n"
        "{options}\n\n"
        "Your Answer: ",
        TemplateKind::answer,
    };
}

PromptTemplate default_elicitation_template() {
    return {
        "Question: {question}\n\n"
        "Proposed answer: {answer}\n\n"
        "On a scale from 0 to 100, how certain are you that the proposed answer is correct? "
        "Respond with a single number from 0 to 100 and nothing else.\n\n"
        "Your certainty: ",
        TemplateKind::elicitation,
    };
}

std::string build_prompt(const Question& question, const OptionPermutation& permutation,
                         const PromptTemplate& tmpl) {
    if (tmpl.kind != TemplateKind::answer) fail("build_prompt needs an answer-kind template");
    std::string out = substitute(tmpl.body, "{question}", question.stem);
    return substitute(out, "{options}", render_options(question, permutation));
}

std::string build_elicitation_prompt(const Question& question, const std::string& answer_text,
                                     const PromptTemplate& tmpl) {
    if (tmpl.kind != TemplateKind::elicitation) {
        fail("build_elicitation_prompt needs an elicitation-kind template");
    }
    std::string out = substitute(tmpl.body, "{question}", question.stem);
    return substitute(out, "{answer}", answer_text);
}

std::optional<double> parse_elicited(std::string_view raw, double scale_min, double scale_max) {
    if (!(scale_max > scale_min)) fail("elicitation scale must have max > min");
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const char c = raw[i];
        const bool digit = c >= '0' && c <= '9';
        const bool dot_start = c == '.' && i + 1 < raw.size() && raw[i + 1] >= '0' && raw[i + 1] <= '9';
        if (!digit && !dot_start) continue;
        std::size_t end = i;
        bool seen_dot = false;
        while (end < raw.size() &&
               ((raw[end] >= '0' && raw[end] <= '9') || (raw[end] == '.' && !seen_dot))) {
            if (raw[end] == '.') seen_dot = true;
            ++end;
        }
        if (raw[end - 1] == '.') --end;  // trailing period is punctuation
        const std::string literal(raw.substr(i, end - i));
        if (!literal.empty() && literal != ".") {
            const double value = std::strtod(literal.c_str(), nullptr);
            if (value >= scale_min && value <= scale_max) {
                return (value - scale_min) / (scale_max - scale_min);
            }
        }
        i = end;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Endpoint client

namespace {

struct ChatReply {
    std::string content;
    std::optional<std::vector<TokenLogprob>> tokens;
};

struct ParsedUrl {
    std::string host_port;  // scheme://host:port
    std::string path_prefix;
};

ParsedUrl split_base_url(const std::string& base_url) {
    const auto scheme_end = base_url.find("://");
    if (scheme_end == std::string::npos) fail("endpoint base_url needs a scheme: " + base_url);
    auto path_start = base_url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {base_url, ""};
    std::string prefix = base_url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {base_url.substr(0, path_start), prefix};
}

ChatReply parse_chat_response(const std::string& body) {
    json j = json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("choices") || !j["choices"].is_array() ||
        j["choices"].empty()) {
        fail("malformed endpoint response");
    }
    const json& choice = j["choices"][0];
    if (!choice.contains("message") || !choice["message"].contains("content") ||
        !choice["message"]["content"].is_string()) {
        fail("malformed endpoint response: missing message content");
    }
    ChatReply reply;
    reply.content = choice["message"]["content"].get<std::string>();
    if (choice.contains("logprobs") && choice["logprobs"].is_object() &&
        choice["logprobs"].contains("content") && choice["logprobs"]["content"].is_array()) {
        std::vector<TokenLogprob> tokens;
        for (const json& t : choice["logprobs"]["content"]) {
            if (!t.contains("token") || !t.contains("logprob")) fail("malformed logprobs entry");
            double lp = t["logprob"].get<double>();
            if (lp > 0.0) lp = 0.0;  // some servers report tiny positive rounding noise
            tokens.push_back({t["token"].get<std::string>(), lp});
        }
        reply.tokens = std::move(tokens);
    }
    return reply;
}

std::chrono::milliseconds backoff_delay(const EndpointConfig& endpoint, int attempt) {
    if (endpoint.backoff.empty()) return std::chrono::milliseconds{0};
    const auto idx = std::min<std::size_t>(attempt, endpoint.backoff.size() - 1);
    return endpoint.backoff[idx];
}

ChatReply chat_complete(const EndpointConfig& endpoint, const std::string& prompt,
                        const DecodingConfig& decoding, bool want_logprobs) {
    const ParsedUrl url = split_base_url(endpoint.base_url);

    json request{
        {"model", endpoint.model_name},
        {"messages", json::array({json{{"role", "user"}, {"content", prompt}}})},
    };
    if (decoding.mode == DecodingMode::greedy) {
        request["temperature"] = 0.0;
    } else {
        request["temperature"] = decoding.temperature;
        request["top_p"] = decoding.top_p;
        request["seed"] = decoding.seed;
    }
    if (want_logprobs) request["logprobs"] = true;

    httplib::Headers headers;
    if (!endpoint.auth_token_env.empty()) {
        if (const char* token = std::getenv(endpoint.auth_token_env.c_str());
            token != nullptr && token[0] != '\0') {
            headers.emplace("Authorization", std::string("Bearer ") + token);
        }
    }

    std::string last_error;
    for (int attempt = 0; attempt <= endpoint.retries; ++attempt) {
        if (attempt > 0) std::this_thread::sleep_for(backoff_delay(endpoint, attempt - 1));
        httplib::Client client(url.host_port);
        client.set_connection_timeout(endpoint.timeout);
        client.set_read_timeout(endpoint.timeout);
        client.set_write_timeout(endpoint.timeout);

        auto res = client.Post(url.path_prefix + "/chat/completions", headers, request.dump(),
                               "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status != 200) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }
        return parse_chat_response(res->body);  // malformed body is not retried
    }
    fail(last_error.empty() ? "request failed" : last_error);
}

// Maps a character range of the content onto the tokens fully contained in
// it, assuming the token texts concatenate to the content. Tokens straddling
// a boundary (e.g. a think tag glued to a word) are left out. Returns nullopt
// when alignment fails or no token fits.
std::optional<Span> char_range_to_tokens(const std::vector<TokenLogprob>& tokens,
                                         std::size_t char_begin, std::size_t char_end,
                                         const std::string& content) {
    std::string concat;
    for (const TokenLogprob& t : tokens) concat += t.text;
    if (concat != content) return std::nullopt;

    std::size_t offset = 0;
    std::size_t tok_begin = tokens.size();
    std::size_t tok_end = tokens.size();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::size_t next = offset + tokens[i].text.size();
        if (offset >= char_begin && next <= char_end) {
            if (tok_begin == tokens.size()) tok_begin = i;
            tok_end = i + 1;
        }
        offset = next;
    }
    if (tok_begin >= tok_end) return std::nullopt;
    return Span{tok_begin, tok_end};
}

// Records the reasoning/answer split when the response carries a think
// delimiter pair. Spans are token-indexed when tokens are present.
void annotate_spans(GenerationRecord& record) {
    const std::string& text = record.raw_text;
    const auto open = text.find(kThinkOpen);
    if (open == std::string::npos) return;
    const auto close = text.find(kThinkClose, open + kThinkOpen.size());
    if (close == std::string::npos) return;

    const std::size_t reason_begin = open + kThinkOpen.size();
    const std::size_t reason_end = close;
    const std::size_t answer_begin = close + kThinkClose.size();
    const std::size_t answer_end = text.size();

    if (record.token_logprobs) {
        record.reasoning_span =
            char_range_to_tokens(*record.token_logprobs, reason_begin, reason_end, text);
        if (answer_begin < answer_end) {
            record.answer_span =
                char_range_to_tokens(*record.token_logprobs, answer_begin, answer_end, text);
        }
    } else {
        if (reason_begin < reason_end) record.reasoning_span = Span{reason_begin, reason_end};
        if (answer_begin < answer_end) record.answer_span = Span{answer_begin, answer_end};
    }
}

}  // namespace

ResponseAppender::ResponseAppender(const std::string& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) fail("cannot open response log for writing: " + path);
}

void ResponseAppender::append_record(const GenerationRecord& record) {
    const std::string line = response_row_json(record);
    std::lock_guard<std::mutex> lock(mu_);
    out_ << line << '\n';
    out_.flush();
}

void ResponseAppender::append_elicitation(const std::string& question_id, const std::string& raw) {
    const std::string line = elicitation_row_json(question_id, raw);
    std::lock_guard<std::mutex> lock(mu_);
    out_ << line << '\n';
    out_.flush();
}

CollectResult collect_bundle(const Question& question, const EndpointConfig& endpoint,
                             const SamplingProtocol& protocol, std::uint64_t shuffle_seed,
                             const PromptTemplate& answer_template,
                             const PromptTemplate& elicitation_template, ResponseAppender* sink,
                             const CollectedSoFar* existing) {
    if (endpoint.max_parallel < 1) fail("max_parallel must be >= 1");

    struct Job {
        DecodingConfig decoding;
        std::uint32_t shuffle_index = 0;
    };
    std::vector<Job> jobs;
    for (int i = 0; i < protocol.greedy_shuffles; ++i) {
        const auto idx = static_cast<std::uint32_t>(i);
        if (existing && existing->greedy_indices.count(idx)) continue;
        Job job;
        job.decoding.mode = DecodingMode::greedy;
        job.shuffle_index = idx;
        jobs.push_back(job);
    }
    for (int i = 0; i < protocol.sampled_total(); ++i) {
        const auto idx = static_cast<std::uint32_t>(protocol.greedy_shuffles + i);
        if (existing && existing->sampled_indices.count(idx)) continue;
        Job job;
        job.decoding.mode = DecodingMode::nucleus;
        job.decoding.temperature = protocol.temperature;
        job.decoding.top_p = protocol.top_p;
        job.decoding.seed = substream_seed(shuffle_seed, 0x5a5a0000ULL + idx);
        job.shuffle_index = idx;
        jobs.push_back(job);
    }

    std::vector<std::optional<GenerationRecord>> results(jobs.size());
    std::vector<std::string> failures(jobs.size());
    std::atomic<std::size_t> next{0};

    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            const Job& job = jobs[i];
            GenerationRecord record;
            record.question_id = question.id;
            record.permutation = permutation_at(shuffle_seed, job.shuffle_index);
            record.decoding = job.decoding;
            const std::string prompt = build_prompt(question, record.permutation, answer_template);
            try {
                ChatReply reply = chat_complete(endpoint, prompt, job.decoding, true);
                record.raw_text = std::move(reply.content);
                record.token_logprobs = std::move(reply.tokens);
                annotate_spans(record);
                if (auto displayed = extract_answer(record.raw_text)) {
                    record.extracted_displayed = displayed;
                    record.extracted_canonical = record.permutation.canonical(*displayed);
                    record.extraction_source = ExtractionSource::regex;
                }
                if (sink) sink->append_record(record);
                results[i] = std::move(record);
            } catch (const std::exception& e) {
                failures[i] = question.id + " (shuffle_index " +
                              std::to_string(job.shuffle_index) + "): " + e.what();
            }
        }
    };

    const std::size_t n_workers =
        std::min<std::size_t>(static_cast<std::size_t>(endpoint.max_parallel), jobs.size());
    std::vector<std::thread> threads;
    threads.reserve(n_workers);
    for (std::size_t t = 0; t < n_workers; ++t) threads.emplace_back(worker);
    for (std::thread& t : threads) t.join();

    CollectResult out;
    out.bundle.question = question;
    std::size_t succeeded = 0;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (!results[i]) {
            if (!failures[i].empty()) out.failures.push_back(failures[i]);
            continue;
        }
        ++succeeded;
        auto& list = results[i]->decoding.mode == DecodingMode::greedy
                         ? out.bundle.greedy_records
                         : out.bundle.sampled_records;
        list.push_back(std::move(*results[i]));
    }
    if (!jobs.empty() && succeeded == 0) {
        fail("all requests failed for question " + question.id +
             (out.failures.empty() ? "" : ": " + out.failures.front()));
    }

    if (protocol.elicit_confidence && !(existing && existing->has_elicitation)) {
        std::string answer_text;
        if (!out.bundle.greedy_records.empty() &&
            out.bundle.greedy_records.front().permutation.shuffle_index == 0) {
            answer_text = out.bundle.greedy_records.front().raw_text;
        } else if (existing && existing->first_greedy_text) {
            answer_text = *existing->first_greedy_text;
        }
        if (answer_text.empty()) {
            out.failures.push_back(question.id + ": no first greedy answer for elicitation");
        } else {
            const std::string prompt =
                build_elicitation_prompt(question, answer_text, elicitation_template);
            try {
                DecodingConfig greedy;  // second pass is greedy by default
                ChatReply reply = chat_complete(endpoint, prompt, greedy, false);
                out.bundle.elicitation_raw = reply.content;
                out.bundle.elicited_confidence =
                    parse_elicited(reply.content, protocol.elicitation_scale_min,
                                   protocol.elicitation_scale_max);
                if (sink) sink->append_elicitation(question.id, reply.content);
            } catch (const std::exception& e) {
                out.failures.push_back(question.id + " (elicitation): " + e.what());
            }
        }
    }
    return out;
}

}  // namespace uqeval
