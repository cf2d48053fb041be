#include <doctest.h>

#include <atomic>
#include <chrono>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "uqeval/corpus.hpp"
#include "uqeval/harness.hpp"
#include "uqeval/rng.hpp"

#include "support/synthetic.hpp"
#include "support/temp_dir.hpp"

using namespace uqeval;
using nlohmann::json;

namespace {

Question sample_clinical_question() {
    Question q;
    q.id = "s1";
    q.stem =
        "A 59-year-old overweight woman presents with severe abdominal pain and a calcified "
        "mass near her gallbladder. Which of the following diagnoses should be excluded first?";
    q.options = {"Acute cholecystitis", "Gallbladder cancer", "Choledocholithiasis",
                 "Pancreatitis"};
    q.gold = Label::B;
    q.specialty = "Gastroenterology";
    q.question_type = QuestionType::Diagnosis;
    q.source = "unit";
    return q;
}

std::string chat_reply(const std::string& content, bool with_logprobs = false) {
    json message{{"role", "assistant"}, {"content", content}};
    json choice{{"index", 0}, {"message", message}};
    if (with_logprobs) {
        json tokens = json::array();
        std::string word;
        std::vector<std::string> parts;
        for (char c : content) {
            word += c;
            if (c == ' ') {
                parts.push_back(word);
                word.clear();
            }
        }
        if (!word.empty()) parts.push_back(word);
        for (std::size_t i = 0; i < parts.size(); ++i) {
            tokens.push_back({{"token", parts[i]}, {"logprob", -0.1 * static_cast<double>(i % 5)}});
        }
        choice["logprobs"] = {{"content", std::move(tokens)}};
    }
    return json{{"choices", json::array({choice})}}.dump();
}

class MockServer {
public:
    MockServer() = default;
    ~MockServer() { stop(); }

    void start() {
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    void stop() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }
    std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

    httplib::Server& server() { return server_; }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

EndpointConfig quick_endpoint(const std::string& base_url, int max_parallel = 2) {
    EndpointConfig e;
    e.base_url = base_url;
    e.model_name = "mock-model";
    e.auth_token_env = "";
    e.max_parallel = max_parallel;
    e.timeout = std::chrono::milliseconds{2000};
    e.retries = 1;
    e.backoff = {std::chrono::milliseconds{5}};
    return e;
}

}  // namespace

TEST_CASE("build_prompt renders options in displayed order") {
    const Question q = sample_clinical_question();
    const PromptTemplate tmpl = default_answer_template();

    SUBCASE("identity permutation keeps canonical order") {
        OptionPermutation identity;
        const std::string prompt = build_prompt(q, identity, tmpl);
        CHECK(prompt.find("[A] Acute cholecystitis") != std::string::npos);
        CHECK(prompt.find("[B] Gallbladder cancer") != std::string::npos);
        CHECK(prompt.find("[C] Choledocholithiasis") != std::string::npos);
        CHECK(prompt.find("[D] Pancreatitis") != std::string::npos);
        CHECK(prompt.find(q.stem) != std::string::npos);
        CHECK(prompt.find("Provide a concise answer and start your response with the letter of "
                          "the selected option in square brackets. Options:") !=
              std::string::npos);
    }
    SUBCASE("swapping A and B swaps the displayed texts") {
        OptionPermutation swap;
        swap.displayed_to_canonical = {Label::B, Label::A, Label::C, Label::D};
        const std::string prompt = build_prompt(q, swap, tmpl);
        CHECK(prompt.find("[A] Gallbladder cancer") != std::string::npos);
        CHECK(prompt.find("[B] Acute cholecystitis") != std::string::npos);
    }
    SUBCASE("prompts are a pure function of their inputs") {
        const OptionPermutation p = permutation_at(3, 1);
        CHECK(build_prompt(q, p, tmpl) == build_prompt(q, p, tmpl));
    }
    SUBCASE("template text survives byte-exactly around the substitutions") {
        PromptTemplate custom{"PRE|{question}|MID|{options}|POST", TemplateKind::answer};
        const std::string prompt = build_prompt(q, OptionPermutation{}, custom);
        CHECK(prompt.rfind("PRE|", 0) == 0);
        CHECK(prompt.find("|MID|") != std::string::npos);
        CHECK(prompt.substr(prompt.size() - 5) == "|POST");
    }
    SUBCASE("missing placeholder is an error") {
        PromptTemplate broken{"no placeholders here", TemplateKind::answer};
        CHECK_THROWS_AS(build_prompt(q, OptionPermutation{}, broken), std::runtime_error);
        CHECK_THROWS_AS(build_prompt(q, OptionPermutation{}, default_elicitation_template()),
                        std::runtime_error);
    }
}

TEST_CASE("build_elicitation_prompt substitutes the question and prior answer") {
    const Question q = sample_clinical_question();
    const std::string answer = "[B] Gallbladder cancer should be excluded first.";
    const std::string prompt = build_elicitation_prompt(q, answer, default_elicitation_template());
    CHECK(prompt.find(q.stem) != std::string::npos);
    CHECK(prompt.find(answer) != std::string::npos);
    CHECK(prompt.find("0 to 100") != std::string::npos);

    PromptTemplate no_answer{"only {question}", TemplateKind::elicitation};
    CHECK_THROWS_AS(build_elicitation_prompt(q, answer, no_answer), std::runtime_error);
}

TEST_CASE("parse_elicited takes the first in-range numeral") {
    CHECK(parse_elicited("I am 85 out of 100 confident", 0, 100) == doctest::Approx(0.85));
    CHECK(parse_elicited("certainty: 0.6", 0, 1) == doctest::Approx(0.6));
    CHECK(parse_elicited("very confident", 0, 100) == std::nullopt);
    CHECK(parse_elicited("", 0, 100) == std::nullopt);
    CHECK(parse_elicited("0", 0, 100) == doctest::Approx(0.0));
    CHECK(parse_elicited("100.", 0, 100) == doctest::Approx(1.0));
    CHECK(parse_elicited("score 250 then 40", 0, 100) == doctest::Approx(0.4));
    CHECK(parse_elicited("around 72.5 percent", 0, 100) == doctest::Approx(0.725));
    CHECK(parse_elicited("scale 0-1: .8 sure", 0, 1) == doctest::Approx(0.0));  // first in range
}

TEST_CASE("collect_bundle fulfills the sampling protocol" * doctest::timeout(60)) {
    MockServer server;
    std::atomic<int> requests{0};
    server.server().Post("/v1/chat/completions", [&](const httplib::Request& req,
                                                     httplib::Response& res) {
        ++requests;
        const json body = json::parse(req.body);
        const bool greedy = body.at("temperature").get<double>() == 0.0;
        if (!greedy) {
            CHECK(body.at("temperature").get<double>() == doctest::Approx(0.6));
            CHECK(body.at("top_p").get<double>() == doctest::Approx(0.9));
        }
        res.set_content(chat_reply("[B] a mock answer.", true), "application/json");
    });
    server.start();

    SamplingProtocol protocol;
    protocol.greedy_shuffles = 4;
    protocol.entropy_samples = 10;
    protocol.conformal_samples = 0;

    const Question q = sample_clinical_question();
    const auto result = collect_bundle(q, quick_endpoint(server.base_url()), protocol, 7,
                                       default_answer_template(), default_elicitation_template());
    CHECK(result.complete());
    CHECK(result.bundle.greedy_records.size() == 4);
    CHECK(result.bundle.sampled_records.size() == 10);
    CHECK(requests == 14);
    for (const auto& r : result.bundle.greedy_records) {
        CHECK(r.decoding.mode == DecodingMode::greedy);
        REQUIRE(r.token_logprobs.has_value());
        CHECK(r.extracted_displayed == Label::B);
        CHECK(r.extracted_canonical == r.permutation.canonical(Label::B));
    }
    for (const auto& r : result.bundle.sampled_records) {
        CHECK(r.decoding.mode == DecodingMode::nucleus);
        CHECK(r.decoding.temperature == doctest::Approx(0.6));
        CHECK(r.decoding.top_p == doctest::Approx(0.9));
    }
}

TEST_CASE("collect_bundle fails cleanly when the endpoint is unreachable") {
    auto endpoint = quick_endpoint("http://127.0.0.1:1/v1");
    endpoint.retries = 1;
    endpoint.timeout = std::chrono::milliseconds{200};
    SamplingProtocol protocol;
    protocol.greedy_shuffles = 2;
    protocol.entropy_samples = 0;
    protocol.conformal_samples = 0;
    CHECK_THROWS_WITH_AS(
        collect_bundle(sample_clinical_question(), endpoint, protocol, 7,
                       default_answer_template(), default_elicitation_template()),
        doctest::Contains("s1"), std::runtime_error);
}

TEST_CASE("a permanently failing request yields an incomplete bundle" * doctest::timeout(60)) {
    // The poisoned request is identified by its decoding seed, which is a
    // deterministic function of (shuffle_seed, sampled index).
    const std::uint64_t shuffle_seed = 11;
    const std::uint64_t poisoned_seed = substream_seed(shuffle_seed, 0x5a5a0000ULL + 7);

    MockServer server;
    server.server().Post("/v1/chat/completions", [&](const httplib::Request& req,
                                                     httplib::Response& res) {
        const json body = json::parse(req.body);
        if (body.contains("seed") && body.at("seed").get<std::uint64_t>() == poisoned_seed) {
            res.status = 500;
            return;
        }
        res.set_content(chat_reply("[A] fine."), "application/json");
    });
    server.start();

    SamplingProtocol protocol;
    protocol.greedy_shuffles = 0;
    protocol.entropy_samples = 0;
    protocol.conformal_samples = 20;

    const auto result =
        collect_bundle(sample_clinical_question(), quick_endpoint(server.base_url()), protocol,
                       shuffle_seed, default_answer_template(), default_elicitation_template());
    CHECK_FALSE(result.complete());
    CHECK(result.bundle.sampled_records.size() == 19);
    REQUIRE(result.failures.size() == 1);
    CHECK(result.failures[0].find("s1") != std::string::npos);
    CHECK(result.failures[0].find("HTTP 500") != std::string::npos);
}

TEST_CASE("no more than max_parallel requests run concurrently" * doctest::timeout(60)) {
    std::atomic<int> in_flight{0};
    std::atomic<int> peak{0};
    MockServer server;
    server.server().Post("/v1/chat/completions", [&](const httplib::Request&,
                                                     httplib::Response& res) {
        const int now = ++in_flight;
        int prev = peak.load();
        while (now > prev && !peak.compare_exchange_weak(prev, now)) {
        }
        std::this_thread::sleep_for(std::chrono::milliseconds{25});
        --in_flight;
        res.set_content(chat_reply("[C] ok."), "application/json");
    });
    server.start();

    SamplingProtocol protocol;
    protocol.greedy_shuffles = 4;
    protocol.entropy_samples = 12;
    protocol.conformal_samples = 0;

    const auto result = collect_bundle(sample_clinical_question(),
                                       quick_endpoint(server.base_url(), 3), protocol, 5,
                                       default_answer_template(), default_elicitation_template());
    CHECK(result.complete());
    CHECK(peak.load() <= 3);
    CHECK(peak.load() >= 2);
}

TEST_CASE("transient failures are retried with backoff" * doctest::timeout(60)) {
    std::atomic<int> attempts{0};
    MockServer server;
    server.server().Post("/v1/chat/completions", [&](const httplib::Request&,
                                                     httplib::Response& res) {
        if (attempts.fetch_add(1) < 2) {
            res.status = 503;
            return;
        }
        res.set_content(chat_reply("[D] eventually."), "application/json");
    });
    server.start();

    auto endpoint = quick_endpoint(server.base_url(), 1);
    endpoint.retries = 2;
    SamplingProtocol protocol;
    protocol.greedy_shuffles = 1;
    protocol.entropy_samples = 0;
    protocol.conformal_samples = 0;

    const auto result =
        collect_bundle(sample_clinical_question(), endpoint, protocol, 3,
                       default_answer_template(), default_elicitation_template());
    CHECK(result.complete());
    CHECK(result.bundle.greedy_records.size() == 1);
    CHECK(attempts.load() == 3);
}

TEST_CASE("resume skips requests already in the log" * doctest::timeout(60)) {
    std::atomic<int> requests{0};
    MockServer server;
    server.server().Post("/v1/chat/completions", [&](const httplib::Request&,
                                                     httplib::Response& res) {
        ++requests;
        res.set_content(chat_reply("[A] again."), "application/json");
    });
    server.start();

    SamplingProtocol protocol;
    protocol.greedy_shuffles = 4;
    protocol.entropy_samples = 10;
    protocol.conformal_samples = 0;

    CollectedSoFar done;
    for (std::uint32_t i = 0; i < 4; ++i) done.greedy_indices.insert(i);
    for (std::uint32_t i = 4; i < 14; ++i) done.sampled_indices.insert(i);
    done.first_greedy_text = "[A] earlier answer.";

    SUBCASE("fully collected question issues no requests") {
        const auto result = collect_bundle(sample_clinical_question(),
                                           quick_endpoint(server.base_url()), protocol, 7,
                                           default_answer_template(),
                                           default_elicitation_template(), nullptr, &done);
        CHECK(result.complete());
        CHECK(result.bundle.record_count() == 0);
        CHECK(requests.load() == 0);
    }
    SUBCASE("only the missing indices are requested") {
        done.sampled_indices.erase(9);
        done.greedy_indices.erase(2);
        const auto result = collect_bundle(sample_clinical_question(),
                                           quick_endpoint(server.base_url()), protocol, 7,
                                           default_answer_template(),
                                           default_elicitation_template(), nullptr, &done);
        CHECK(result.complete());
        CHECK(requests.load() == 2);
        REQUIRE(result.bundle.greedy_records.size() == 1);
        CHECK(result.bundle.greedy_records[0].permutation.shuffle_index == 2);
        REQUIRE(result.bundle.sampled_records.size() == 1);
        CHECK(result.bundle.sampled_records[0].permutation.shuffle_index == 9);
    }
}

TEST_CASE("elicitation second pass fills the bundle and the log" * doctest::timeout(60)) {
    MockServer server;
    server.server().Post("/v1/chat/completions", [&](const httplib::Request& req,
                                                     httplib::Response& res) {
        const json body = json::parse(req.body);
        const std::string prompt = body.at("messages")[0].at("content").get<std::string>();
        if (prompt.find("certain") != std::string::npos) {
            res.set_content(chat_reply("I would say 85 out of 100."), "application/json");
        } else {
            res.set_content(chat_reply("[B] the answer.", true), "application/json");
        }
    });
    server.start();

    SamplingProtocol protocol;
    protocol.greedy_shuffles = 1;
    protocol.entropy_samples = 0;
    protocol.conformal_samples = 0;
    protocol.elicit_confidence = true;

    test::TempDir dir;
    const std::string log_path = dir.file("responses.jsonl");
    ResponseAppender sink(log_path, false);
    const Question q = sample_clinical_question();
    const auto result =
        collect_bundle(q, quick_endpoint(server.base_url()), protocol, 7,
                       default_answer_template(), default_elicitation_template(), &sink);
    CHECK(result.complete());
    REQUIRE(result.bundle.elicited_confidence.has_value());
    CHECK(*result.bundle.elicited_confidence == doctest::Approx(0.85));

    const auto bundles = load_responses(log_path, {q});
    REQUIRE(bundles.size() == 1);
    CHECK(bundles[0].greedy_records.size() == 1);
    REQUIRE(bundles[0].elicited_confidence.has_value());
    CHECK(*bundles[0].elicited_confidence == doctest::Approx(0.85));
}

TEST_CASE("think delimiters become reasoning and answer spans" * doctest::timeout(60)) {
    MockServer server;
    const std::string content = "[C] <think>let me check Wait no</think> final answer [C].";
    bool with_logprobs = true;
    server.server().Post("/v1/chat/completions", [&](const httplib::Request&,
                                                     httplib::Response& res) {
        res.set_content(chat_reply(content, with_logprobs), "application/json");
    });
    server.start();

    SamplingProtocol protocol;
    protocol.greedy_shuffles = 1;
    protocol.entropy_samples = 0;
    protocol.conformal_samples = 0;

    SUBCASE("token-aligned spans when logprobs are present") {
        const auto result = collect_bundle(sample_clinical_question(),
                                           quick_endpoint(server.base_url()), protocol, 7,
                                           default_answer_template(),
                                           default_elicitation_template());
        const GenerationRecord& r = result.bundle.greedy_records.at(0);
        REQUIRE(r.token_logprobs.has_value());
        REQUIRE(r.reasoning_span.has_value());
        REQUIRE(r.answer_span.has_value());
        // Reconstruct the span text from the tokens it names.
        std::string reasoning;
        for (std::size_t i = r.reasoning_span->begin; i < r.reasoning_span->end; ++i) {
            reasoning += (*r.token_logprobs)[i].text;
        }
        CHECK(reasoning.find("Wait") != std::string::npos);
        CHECK(reasoning.find("final") == std::string::npos);
        std::string answer;
        for (std::size_t i = r.answer_span->begin; i < r.answer_span->end; ++i) {
            answer += (*r.token_logprobs)[i].text;
        }
        CHECK(answer.find("final") != std::string::npos);
        CHECK(answer.find("think") == std::string::npos);
    }
    SUBCASE("character spans when logprobs are absent") {
        with_logprobs = false;
        const auto result = collect_bundle(sample_clinical_question(),
                                           quick_endpoint(server.base_url()), protocol, 7,
                                           default_answer_template(),
                                           default_elicitation_template());
        const GenerationRecord& r = result.bundle.greedy_records.at(0);
        CHECK_FALSE(r.token_logprobs.has_value());
        REQUIRE(r.reasoning_span.has_value());
        const std::string reasoning =
            r.raw_text.substr(r.reasoning_span->begin, r.reasoning_span->size());
        CHECK(reasoning == "let me check Wait no");
        REQUIRE(r.answer_span.has_value());
        const std::string answer = r.raw_text.substr(r.answer_span->begin, r.answer_span->size());
        CHECK(answer == " final answer [C].");
    }
}
