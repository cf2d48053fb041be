#include <doctest.h>

#include <array>
#include <fstream>
#include <map>
#include <string>

#include "uqeval/corpus.hpp"
#include "uqeval/rng.hpp"

#include "support/synthetic.hpp"
#include "support/temp_dir.hpp"

using namespace uqeval;
using test::TempDir;

namespace {

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream out(path);
    for (const auto& l : lines) out << l << '\n';
}

const char* kQ1 =
    R"({"id":"q1","stem":"First case?","options":["a","b","c","d"],"gold":"B","specialty":"Cardiology","question_type":"Diagnosis","source":"unit"})";
const char* kQ2 =
    R"({"id":"q2","stem":"Second case?","options":["e","f","g","h"],"gold":"A","specialty":"Neurology","question_type":"Treatment","source":"unit"})";

}  // namespace

TEST_CASE("load_questions parses valid records") {
    TempDir dir;
    write_lines(dir.file("q.jsonl"), {kQ1, kQ2});
    const auto questions = load_questions(dir.file("q.jsonl"));
    REQUIRE(questions.size() == 2);
    CHECK(questions[0].id == "q1");
    CHECK(questions[0].gold == Label::B);
    CHECK(questions[0].options[2] == "c");
    CHECK(questions[1].question_type == QuestionType::Treatment);
}

TEST_CASE("load_questions rejects a 3-option question with the line number") {
    TempDir dir;
    write_lines(dir.file("q.jsonl"),
                {kQ1,
                 R"({"id":"q3","stem":"Bad","options":["a","b","c"],"gold":"A","specialty":"X","question_type":"Other","source":"unit"})"});
    CHECK_THROWS_WITH_AS(load_questions(dir.file("q.jsonl")),
                         doctest::Contains(":2:"), std::runtime_error);
}

TEST_CASE("load_questions on an empty file warns and returns nothing") {
    TempDir dir;
    write_lines(dir.file("q.jsonl"), {});
    std::vector<std::string> warnings;
    const auto questions = load_questions(dir.file("q.jsonl"), "jsonl", &warnings);
    CHECK(questions.empty());
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("empty") != std::string::npos);
}

TEST_CASE("load_questions rejects duplicate ids by name") {
    TempDir dir;
    write_lines(dir.file("q.jsonl"), {kQ1, kQ1});
    CHECK_THROWS_WITH_AS(load_questions(dir.file("q.jsonl")),
                         doctest::Contains("duplicate question id: q1"), std::runtime_error);
}

TEST_CASE("load_questions reports malformed lines") {
    TempDir dir;
    write_lines(dir.file("q.jsonl"), {kQ1, "not json at all"});
    CHECK_THROWS_WITH_AS(load_questions(dir.file("q.jsonl")),
                         doctest::Contains(":2: malformed record"), std::runtime_error);
}

TEST_CASE("extract_answer finds the first bracketed uppercase letter") {
    CHECK(extract_answer(
              "[C] Systolic ejection murmur at the right second intercostal space") == Label::C);
    CHECK(extract_answer("The answer is B.") == std::nullopt);
    CHECK(extract_answer("[b] lowercase then [D]") == Label::D);
    CHECK(extract_answer("[ C ] padded") == Label::C);
    CHECK(extract_answer("[E] out of range [A]") == Label::A);
    CHECK(extract_answer("") == std::nullopt);
    CHECK(extract_answer("[[B]] nested") == Label::B);
}

TEST_CASE("extract_answer is pure") {
    const std::string text = "prefix [ A ] suffix [B]";
    CHECK(extract_answer(text) == extract_answer(text));
    CHECK(extract_answer(text) == Label::A);
}

TEST_CASE("shuffle_options is deterministic and uniform") {
    const auto a = shuffle_options(7, 4);
    const auto b = shuffle_options(7, 4);
    REQUIRE(a.size() == 4);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].displayed_to_canonical == b[i].displayed_to_canonical);
        CHECK(a[i].is_bijection());
        CHECK(a[i].seed == 7);
        CHECK(a[i].shuffle_index == i);
    }

    const auto single = shuffle_options(99, 1);
    REQUIRE(single.size() == 1);
    CHECK(single[0].is_bijection());

    // 24000 draws: every permutation lands near its expected 1000 count.
    std::map<std::array<Label, 4>, int> histogram;
    for (std::uint64_t seed = 0; seed < 24000; ++seed) {
        ++histogram[permutation_at(seed, 0).displayed_to_canonical];
    }
    REQUIRE(histogram.size() == 24);
    for (const auto& [perm, count] : histogram) {
        CHECK(count > 850);
        CHECK(count < 1150);
    }
}

TEST_CASE("permutation mapping round-trips displayed and canonical labels") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const OptionPermutation p = permutation_at(seed, 3);
        for (int i = 0; i < kNumOptions; ++i) {
            const auto displayed = static_cast<Label>(i);
            CHECK(p.displayed(p.canonical(displayed)) == displayed);
        }
    }
}

TEST_CASE("accuracy counts unextracted records as incorrect") {
    Question q = test::make_question("q1", Label::B);
    ResponseBundle b;
    b.question = q;
    for (std::uint32_t i = 0; i < 4; ++i) {
        b.greedy_records.push_back(test::make_record("q1", Label::B, DecodingMode::greedy, i, 5));
    }
    CHECK(accuracy({b}) == doctest::Approx(1.0));

    b.greedy_records[3] = test::make_record("q1", Label::A, DecodingMode::greedy, 3, 5);
    CHECK(accuracy({b}) == doctest::Approx(0.75));

    b.greedy_records[3] = test::make_record("q1", std::nullopt, DecodingMode::greedy, 3, 5);
    CHECK(accuracy({b}) == doctest::Approx(0.75));

    CHECK_THROWS_AS(accuracy({}), std::runtime_error);
    CHECK_THROWS_AS(accuracy({b}, RecordScope::sampled), std::runtime_error);
}

TEST_CASE("corpus round-trips through save and load") {
    TempDir dir;
    auto corpus = test::pipeline_corpus(6, 42);
    save_questions(dir.file("q.jsonl"), corpus.questions);
    save_responses(dir.file("r.jsonl"), corpus.bundles);

    const auto questions = load_questions(dir.file("q.jsonl"));
    REQUIRE(questions.size() == corpus.questions.size());
    const auto bundles = load_responses(dir.file("r.jsonl"), questions);
    REQUIRE(bundles.size() == corpus.bundles.size());

    for (std::size_t i = 0; i < bundles.size(); ++i) {
        const ResponseBundle& got = bundles[i];
        const ResponseBundle& want = corpus.bundles[i];
        CHECK(got.question.id == want.question.id);
        CHECK(got.question.gold == want.question.gold);
        CHECK(got.question.options == want.question.options);
        REQUIRE(got.greedy_records.size() == want.greedy_records.size());
        REQUIRE(got.sampled_records.size() == want.sampled_records.size());
        for (std::size_t k = 0; k < got.greedy_records.size(); ++k) {
            const GenerationRecord& g = got.greedy_records[k];
            const GenerationRecord& w = want.greedy_records[k];
            CHECK(g.raw_text == w.raw_text);
            CHECK(g.permutation.displayed_to_canonical == w.permutation.displayed_to_canonical);
            CHECK(g.extracted_canonical == w.extracted_canonical);
            REQUIRE(g.token_logprobs.has_value());
            CHECK(g.token_logprobs->size() == w.token_logprobs->size());
            REQUIRE(g.reasoning_span.has_value());
            CHECK(g.reasoning_span->begin == w.reasoning_span->begin);
            CHECK(g.reasoning_span->end == w.reasoning_span->end);
        }
        CHECK(got.elicitation_raw == want.elicitation_raw);
        REQUIRE(got.elicited_confidence.has_value());
        CHECK(*got.elicited_confidence == doctest::Approx(*want.elicited_confidence));
    }
    CHECK(validate_bundles(bundles).empty());
}

TEST_CASE("load_responses validates rows") {
    TempDir dir;
    write_lines(dir.file("q.jsonl"), {kQ1});
    const auto questions = load_questions(dir.file("q.jsonl"));

    SUBCASE("unknown question id") {
        write_lines(dir.file("r.jsonl"),
                    {R"({"question_id":"zzz","mode":"greedy","shuffle_seed":1,"shuffle_index":0,"raw_text":"[A] x"})"});
        CHECK_THROWS_WITH_AS(load_responses(dir.file("r.jsonl"), questions),
                             doctest::Contains("unknown question id: zzz"), std::runtime_error);
    }
    SUBCASE("positive logprob rejected") {
        write_lines(
            dir.file("r.jsonl"),
            {R"({"question_id":"q1","mode":"greedy","shuffle_seed":1,"shuffle_index":0,"raw_text":"[A] x","tokens":[{"text":"x","logprob":0.2}]})"});
        CHECK_THROWS_WITH_AS(load_responses(dir.file("r.jsonl"), questions),
                             doctest::Contains("logprob"), std::runtime_error);
    }
    SUBCASE("span out of bounds rejected") {
        write_lines(
            dir.file("r.jsonl"),
            {R"({"question_id":"q1","mode":"greedy","shuffle_seed":1,"shuffle_index":0,"raw_text":"[A] x","answer_span":[0,99]})"});
        CHECK_THROWS_WITH_AS(load_responses(dir.file("r.jsonl"), questions),
                             doctest::Contains("out of bounds"), std::runtime_error);
    }
    SUBCASE("overlapping spans rejected") {
        write_lines(
            dir.file("r.jsonl"),
            {R"({"question_id":"q1","mode":"greedy","shuffle_seed":1,"shuffle_index":0,"raw_text":"[A] xyz","answer_span":[0,3],"reasoning_span":[2,5]})"});
        CHECK_THROWS_WITH_AS(load_responses(dir.file("r.jsonl"), questions),
                             doctest::Contains("overlap"), std::runtime_error);
    }
    SUBCASE("duplicate shuffle_index rejected") {
        const char* row =
            R"({"question_id":"q1","mode":"greedy","shuffle_seed":1,"shuffle_index":0,"raw_text":"[A] x"})";
        write_lines(dir.file("r.jsonl"), {row, row});
        CHECK_THROWS_WITH_AS(load_responses(dir.file("r.jsonl"), questions),
                             doctest::Contains("duplicate"), std::runtime_error);
    }
    SUBCASE("records sorted by shuffle index regardless of file order") {
        write_lines(
            dir.file("r.jsonl"),
            {R"({"question_id":"q1","mode":"greedy","shuffle_seed":1,"shuffle_index":2,"raw_text":"[A] third"})",
             R"({"question_id":"q1","mode":"greedy","shuffle_seed":1,"shuffle_index":0,"raw_text":"[A] first"})",
             R"({"question_id":"q1","mode":"greedy","shuffle_seed":1,"shuffle_index":1,"raw_text":"[A] second"})"});
        const auto bundles = load_responses(dir.file("r.jsonl"), questions);
        REQUIRE(bundles.size() == 1);
        REQUIRE(bundles[0].greedy_records.size() == 3);
        CHECK(bundles[0].greedy_records[0].raw_text == "[A] first");
        CHECK(bundles[0].greedy_records[2].raw_text == "[A] third");
    }
    SUBCASE("elicitation rows populate the bundle") {
        write_lines(
            dir.file("r.jsonl"),
            {R"({"question_id":"q1","mode":"greedy","shuffle_seed":1,"shuffle_index":0,"raw_text":"[A] x"})",
             R"({"question_id":"q1","mode":"elicitation","shuffle_seed":0,"shuffle_index":0,"raw_text":"I am 85 out of 100 confident."})"});
        const auto bundles = load_responses(dir.file("r.jsonl"), questions);
        REQUIRE(bundles.size() == 1);
        REQUIRE(bundles[0].elicited_confidence.has_value());
        CHECK(*bundles[0].elicited_confidence == doctest::Approx(0.85));
    }
}

TEST_CASE("import_external_mapping fills only unextracted records") {
    TempDir dir;
    write_lines(dir.file("q.jsonl"), {kQ1});
    const auto questions = load_questions(dir.file("q.jsonl"));
    write_lines(
        dir.file("r.jsonl"),
        {R"({"question_id":"q1","mode":"greedy","shuffle_seed":1,"shuffle_index":0,"raw_text":"no brackets here"})",
         R"({"question_id":"q1","mode":"greedy","shuffle_seed":1,"shuffle_index":1,"raw_text":"[B] extracted"})"});
    auto bundles = load_responses(dir.file("r.jsonl"), questions);
    REQUIRE(bundles.size() == 1);
    CHECK(bundles[0].greedy_records[0].extraction_source == ExtractionSource::none);
    CHECK(bundles[0].greedy_records[1].extraction_source == ExtractionSource::regex);

    SUBCASE("mapping applied to the unextracted record") {
        write_lines(dir.file("m.jsonl"), {R"({"question_id":"q1","record_index":0,"label":"B"})"});
        import_external_mapping(dir.file("m.jsonl"), bundles);
        const GenerationRecord& r = bundles[0].greedy_records[0];
        CHECK(r.extraction_source == ExtractionSource::imported_mapping);
        CHECK(r.extracted_displayed == Label::B);
        CHECK(r.extracted_canonical == r.permutation.canonical(Label::B));
    }
    SUBCASE("mapping for a regex-extracted record is rejected") {
        write_lines(dir.file("m.jsonl"), {R"({"question_id":"q1","record_index":1,"label":"A"})"});
        CHECK_THROWS_WITH_AS(import_external_mapping(dir.file("m.jsonl"), bundles),
                             doctest::Contains("already extracted"), std::runtime_error);
    }
    SUBCASE("unknown question id is named") {
        write_lines(dir.file("m.jsonl"), {R"({"question_id":"q999","record_index":0,"label":"B"})"});
        CHECK_THROWS_WITH_AS(import_external_mapping(dir.file("m.jsonl"), bundles),
                             doctest::Contains("q999"), std::runtime_error);
    }
}

TEST_CASE("validate_bundles flags displayed/canonical mismatches") {
    auto corpus = test::pipeline_corpus(2, 9);
    corpus.bundles[0].greedy_records[0].extracted_canonical = Label::A;
    corpus.bundles[0].greedy_records[0].extracted_displayed = Label::A;
    // Force a mismatch: displayed A under this permutation may not map to A.
    const auto& perm = corpus.bundles[0].greedy_records[0].permutation;
    if (perm.canonical(Label::A) == Label::A) {
        corpus.bundles[0].greedy_records[0].extracted_canonical = Label::B;
    }
    const auto problems = validate_bundles(corpus.bundles);
    REQUIRE(!problems.empty());
    CHECK(problems[0].find("mismatch") != std::string::npos);
}
