#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace uqeval {

inline constexpr int kNumOptions = 4;

/// Canonical answer option label. Displayed labels use the same type; an
/// OptionPermutation maps between the two.
enum class Label : std::uint8_t { A = 0, B = 1, C = 2, D = 3 };

char label_char(Label l);
Label label_from_char(char c);  // throws std::invalid_argument outside A-D
std::optional<Label> try_label_from_char(char c);

enum class QuestionType {
    Diagnosis,
    Treatment,
    DiagnosticTest,
    Definition,
    ProcedureOperation,
    Other,
};

std::string to_string(QuestionType t);
QuestionType question_type_from_string(std::string_view s);

/// The eleven specialty tags shipped as the standard vocabulary. The field is
/// an open string: corpora may introduce their own tags.
extern const std::array<std::string_view, 11> kStandardSpecialties;

struct Question {
    std::string id;
    std::string stem;
    std::array<std::string, kNumOptions> options;  // texts in canonical order A..D
    Label gold = Label::A;
    std::string specialty;
    QuestionType question_type = QuestionType::Other;
    std::string source;

    const std::string& option_text(Label canonical) const;
};

/// Bijection between displayed labels and canonical labels, reproducible from
/// (seed, shuffle_index) alone.
struct OptionPermutation {
    std::array<Label, kNumOptions> displayed_to_canonical{Label::A, Label::B, Label::C, Label::D};
    std::uint64_t seed = 0;
    std::uint32_t shuffle_index = 0;

    Label canonical(Label displayed) const {
        return displayed_to_canonical[static_cast<std::size_t>(displayed)];
    }
    Label displayed(Label canonical) const;
    bool is_bijection() const;
};

enum class DecodingMode { greedy, nucleus };

struct DecodingConfig {
    DecodingMode mode = DecodingMode::greedy;
    double temperature = 0.6;  // ignored for greedy
    double top_p = 0.9;
    std::uint64_t seed = 0;
};

struct TokenLogprob {
    std::string text;
    double logprob = 0.0;  // always <= 0
};

/// Half-open index range. Token indices when the record carries a token list,
/// character indices into raw_text otherwise.
struct Span {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool overlaps(const Span& o) const { return begin < o.end && o.begin < end; }
};

enum class ExtractionSource { regex, imported_mapping, none };

struct GenerationRecord {
    std::string question_id;
    OptionPermutation permutation;
    DecodingConfig decoding;
    std::string raw_text;
    std::optional<std::vector<TokenLogprob>> token_logprobs;
    std::optional<Span> answer_span;     // final answer, reasoning trace excluded
    std::optional<Span> reasoning_span;  // delimited thinking segment
    std::optional<Label> extracted_displayed;
    std::optional<Label> extracted_canonical;
    ExtractionSource extraction_source = ExtractionSource::none;
};

/// Everything recorded for one question; the unit every estimator consumes.
struct ResponseBundle {
    Question question;
    std::vector<GenerationRecord> greedy_records;    // mode == greedy
    std::vector<GenerationRecord> sampled_records;   // mode == nucleus
    std::optional<double> elicited_confidence;       // in [0, 1]
    std::optional<std::string> elicitation_raw;

    std::size_t record_count() const { return greedy_records.size() + sampled_records.size(); }
    // Combined index: greedy records first, then sampled. The mapping-file
    // record_index field uses this numbering.
    const GenerationRecord& record_at(std::size_t index) const;
    GenerationRecord& record_at(std::size_t index);
};

// ---------------------------------------------------------------------------
// Answer extraction

/// First bracketed uppercase option letter: '[', optional whitespace, one of
/// A-D, optional whitespace, ']'. Case-sensitive; absence is not an error.
std::optional<Label> extract_answer(std::string_view raw_text);

// ---------------------------------------------------------------------------
// Option shuffling

/// Permutation for one (seed, shuffle_index) pair, drawn uniformly from the
/// 24 bijections of {A,B,C,D}. Pure function of its arguments.
OptionPermutation permutation_at(std::uint64_t seed, std::uint32_t shuffle_index);

std::vector<OptionPermutation> shuffle_options(std::uint64_t seed, std::size_t k);

// ---------------------------------------------------------------------------
// Record file I/O (line-delimited JSON, UTF-8)

std::vector<Question> load_questions(const std::string& path,
                                     const std::string& format = "jsonl",
                                     std::vector<std::string>* warnings = nullptr);
void save_questions(const std::string& path, const std::vector<Question>& questions);

struct ResponseLoadOptions {
    // Scale declared for second-pass certainty replies, used to normalize
    // elicitation rows to [0, 1].
    double elicitation_scale_min = 0.0;
    double elicitation_scale_max = 100.0;
};

/// Groups response rows by question, reconstructs permutations from
/// (shuffle_seed, shuffle_index), and runs regex answer extraction on every
/// record. Bundles follow question-file order; questions without records are
/// omitted. Records within a bundle are ordered by (mode, shuffle_index).
std::vector<ResponseBundle> load_responses(const std::string& path,
                                           const std::vector<Question>& questions,
                                           const ResponseLoadOptions& options = {},
                                           std::vector<std::string>* warnings = nullptr);
void save_responses(const std::string& path, const std::vector<ResponseBundle>& bundles);

/// One response-file line (no trailing newline) for a record, and for an
/// elicitation row. Shared by save_responses and the harness appender.
std::string response_row_json(const GenerationRecord& record);
std::string elicitation_row_json(const std::string& question_id, const std::string& raw);

/// Applies an externally produced answer mapping (line-delimited
/// {question_id, record_index, label}) to records whose regex extraction was
/// none. Never overwrites an existing extraction.
void import_external_mapping(const std::string& path, std::vector<ResponseBundle>& bundles);

// ---------------------------------------------------------------------------
// Accuracy

enum class RecordScope { greedy, sampled, all };

/// Fraction of selected records whose extracted canonical answer equals gold.
/// Unextracted records count as incorrect. Throws on empty selection.
double accuracy(const std::vector<ResponseBundle>& bundles, RecordScope scope = RecordScope::greedy);

/// Corpus-wide invariant check; returns one message per violation.
std::vector<std::string> validate_bundles(const std::vector<ResponseBundle>& bundles);

}  // namespace uqeval
