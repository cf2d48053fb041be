#include "uqeval/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "uqeval/harness.hpp"
#include "uqeval/rng.hpp"

using nlohmann::json;

namespace uqeval {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

[[noreturn]] void fail_line(const std::string& path, std::size_t line_no, const std::string& msg) {
    fail(path + ":" + std::to_string(line_no) + ": " + msg);
}

bool is_ws(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

json parse_line(const std::string& path, std::size_t line_no, const std::string& line) {
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        fail_line(path, line_no, "malformed record");
    }
    return j;
}

const json& field(const std::string& path, std::size_t line_no, const json& j, const char* name) {
    auto it = j.find(name);
    if (it == j.end()) fail_line(path, line_no, std::string("missing field '") + name + "'");
    return *it;
}

std::string string_field(const std::string& path, std::size_t line_no, const json& j, const char* name) {
    const json& v = field(path, line_no, j, name);
    if (!v.is_string()) fail_line(path, line_no, std::string("field '") + name + "' must be a string");
    return v.get<std::string>();
}

Label label_field(const std::string& path, std::size_t line_no, const json& j, const char* name) {
    std::string s = string_field(path, line_no, j, name);
    if (s.size() != 1 || !try_label_from_char(s[0])) {
        fail_line(path, line_no, std::string("field '") + name + "' must be one of A, B, C, D");
    }
    return label_from_char(s[0]);
}

std::optional<Span> span_field(const std::string& path, std::size_t line_no, const json& j,
                               const char* name) {
    auto it = j.find(name);
    if (it == j.end() || it->is_null()) return std::nullopt;
    if (!it->is_array() || it->size() != 2 || !(*it)[0].is_number_unsigned() ||
        !(*it)[1].is_number_unsigned()) {
        fail_line(path, line_no, std::string("field '") + name + "' must be [begin, end]");
    }
    Span s{(*it)[0].get<std::size_t>(), (*it)[1].get<std::size_t>()};
    if (s.begin > s.end) fail_line(path, line_no, std::string("field '") + name + "' has begin > end");
    return s;
}

}  // namespace

char label_char(Label l) { return static_cast<char>('A' + static_cast<int>(l)); }

Label label_from_char(char c) {
    if (c < 'A' || c > 'D') throw std::invalid_argument(std::string("not an option label: ") + c);
    return static_cast<Label>(c - 'A');
}

std::optional<Label> try_label_from_char(char c) {
    if (c < 'A' || c > 'D') return std::nullopt;
    return static_cast<Label>(c - 'A');
}

std::string to_string(QuestionType t) {
    switch (t) {
        case QuestionType::Diagnosis: return "Diagnosis";
        case QuestionType::Treatment: return "Treatment";
        case QuestionType::DiagnosticTest: return "DiagnosticTest";
        case QuestionType::Definition: return "Definition";
        case QuestionType::ProcedureOperation: return "ProcedureOperation";
        case QuestionType::Other: return "Other";
    }
    fail("unreachable question type");
}

QuestionType question_type_from_string(std::string_view s) {
    if (s == "Diagnosis") return QuestionType::Diagnosis;
    if (s == "Treatment") return QuestionType::Treatment;
    if (s == "DiagnosticTest" || s == "Diagnostic Test") return QuestionType::DiagnosticTest;
    if (s == "Definition") return QuestionType::Definition;
    if (s == "ProcedureOperation" || s == "Procedure/Operation") return QuestionType::ProcedureOperation;
    if (s == "Other") return QuestionType::Other;
    throw std::invalid_argument("unknown question type: " + std::string(s));
}

const std::array<std::string_view, 11> kStandardSpecialties = {
    "Gastroenterology",
    "Cardiology",
    "Obstetrics and Gynecology",
    "Neurology",
    "Infectious Diseases",
    "Pediatrics",
    "Biomedical Engineering",
    "Clinical Laboratory Science",
    "Clinical Psychology",
    "Occupational Therapy",
    "Speech Language Pathology",
};

const std::string& Question::option_text(Label canonical) const {
    return options[static_cast<std::size_t>(canonical)];
}

Label OptionPermutation::displayed(Label canonical) const {
    for (int i = 0; i < kNumOptions; ++i) {
        if (displayed_to_canonical[i] == canonical) return static_cast<Label>(i);
    }
    fail("permutation is not a bijection");
}

bool OptionPermutation::is_bijection() const {
    std::array<bool, kNumOptions> seen{};
    for (Label l : displayed_to_canonical) {
        auto i = static_cast<std::size_t>(l);
        if (i >= kNumOptions || seen[i]) return false;
        seen[i] = true;
    }
    return true;
}

const GenerationRecord& ResponseBundle::record_at(std::size_t index) const {
    if (index < greedy_records.size()) return greedy_records[index];
    index -= greedy_records.size();
    if (index < sampled_records.size()) return sampled_records[index];
    fail("record index out of range for question " + question.id);
}

GenerationRecord& ResponseBundle::record_at(std::size_t index) {
    return const_cast<GenerationRecord&>(
        static_cast<const ResponseBundle*>(this)->record_at(index));
}

std::optional<Label> extract_answer(std::string_view raw_text) {
    for (std::size_t i = 0; i < raw_text.size(); ++i) {
        if (raw_text[i] != '[') continue;
        std::size_t j = i + 1;
        while (j < raw_text.size() && is_ws(raw_text[j])) ++j;
        if (j >= raw_text.size()) break;
        const char c = raw_text[j];
        if (c < 'A' || c > 'D') continue;
        ++j;
        while (j < raw_text.size() && is_ws(raw_text[j])) ++j;
        if (j < raw_text.size() && raw_text[j] == ']') return label_from_char(c);
    }
    return std::nullopt;
}

OptionPermutation permutation_at(std::uint64_t seed, std::uint32_t shuffle_index) {
    std::mt19937_64 gen(substream_seed(seed, shuffle_index));
    std::uint64_t r = bounded_uint(gen, 24);

    std::array<Label, kNumOptions> pool{Label::A, Label::B, Label::C, Label::D};
    std::array<Label, kNumOptions> mapping{};
    // r-th permutation in lexicographic order (factorial number system).
    std::uint64_t radix = 6;  // 3!
    for (int pos = 0; pos < kNumOptions; ++pos) {
        const auto pick = static_cast<std::size_t>(r / radix);
        r %= radix;
        radix = (pos < 2) ? radix / (3 - pos) : 1;
        mapping[pos] = pool[pick];
        for (std::size_t k = pick; k + 1 < pool.size() - pos; ++k) pool[k] = pool[k + 1];
    }

    OptionPermutation p;
    p.displayed_to_canonical = mapping;
    p.seed = seed;
    p.shuffle_index = shuffle_index;
    return p;
}

std::vector<OptionPermutation> shuffle_options(std::uint64_t seed, std::size_t k) {
    std::vector<OptionPermutation> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        out.push_back(permutation_at(seed, static_cast<std::uint32_t>(i)));
    }
    return out;
}

std::vector<Question> load_questions(const std::string& path, const std::string& format,
                                     std::vector<std::string>* warnings) {
    if (format != "jsonl") fail("unknown questions format: " + format);
    std::ifstream in(path);
    if (!in) fail("cannot open questions file: " + path);

    std::vector<Question> out;
    std::set<std::string> ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j = parse_line(path, line_no, line);

        Question q;
        q.id = string_field(path, line_no, j, "id");
        q.stem = string_field(path, line_no, j, "stem");
        const json& opts = field(path, line_no, j, "options");
        if (!opts.is_array() || opts.size() != kNumOptions) {
            fail_line(path, line_no, "options must be an array of exactly 4 strings");
        }
        for (std::size_t i = 0; i < kNumOptions; ++i) {
            if (!opts[i].is_string()) fail_line(path, line_no, "options must be strings");
            q.options[i] = opts[i].get<std::string>();
        }
        q.gold = label_field(path, line_no, j, "gold");
        q.specialty = string_field(path, line_no, j, "specialty");
        if (q.specialty.empty()) fail_line(path, line_no, "specialty must be non-empty");
        try {
            q.question_type = question_type_from_string(string_field(path, line_no, j, "question_type"));
        } catch (const std::invalid_argument& e) {
            fail_line(path, line_no, e.what());
        }
        q.source = string_field(path, line_no, j, "source");

        if (!ids.insert(q.id).second) fail_line(path, line_no, "duplicate question id: " + q.id);
        out.push_back(std::move(q));
    }
    if (out.empty() && warnings) warnings->push_back("questions file is empty: " + path);
    return out;
}

void save_questions(const std::string& path, const std::vector<Question>& questions) {
    std::ofstream out(path);
    if (!out) fail("cannot write questions file: " + path);
    for (const Question& q : questions) {
        json j{
            {"id", q.id},
            {"stem", q.stem},
            {"options", q.options},
            {"gold", std::string(1, label_char(q.gold))},
            {"specialty", q.specialty},
            {"question_type", to_string(q.question_type)},
            {"source", q.source},
        };
        out << j.dump() << '\n';
    }
}

std::string response_row_json(const GenerationRecord& r) {
    json j{
        {"question_id", r.question_id},
        {"shuffle_seed", r.permutation.seed},
        {"shuffle_index", r.permutation.shuffle_index},
        {"mode", r.decoding.mode == DecodingMode::greedy ? "greedy" : "nucleus"},
        {"raw_text", r.raw_text},
    };
    if (r.decoding.mode == DecodingMode::nucleus) {
        j["temperature"] = r.decoding.temperature;
        j["top_p"] = r.decoding.top_p;
        j["seed"] = r.decoding.seed;
    }
    if (r.token_logprobs) {
        json toks = json::array();
        for (const TokenLogprob& t : *r.token_logprobs) {
            toks.push_back({{"text", t.text}, {"logprob", t.logprob}});
        }
        j["tokens"] = std::move(toks);
    }
    if (r.answer_span) j["answer_span"] = {r.answer_span->begin, r.answer_span->end};
    if (r.reasoning_span) j["reasoning_span"] = {r.reasoning_span->begin, r.reasoning_span->end};
    return j.dump();
}

std::string elicitation_row_json(const std::string& question_id, const std::string& raw) {
    json j{
        {"question_id", question_id},
        {"mode", "elicitation"},
        {"shuffle_seed", 0},
        {"shuffle_index", 0},
        {"raw_text", raw},
    };
    return j.dump();
}

namespace {

void check_record_invariants(const std::string& path, std::size_t line_no,
                             const GenerationRecord& r) {
    if (r.token_logprobs) {
        for (const TokenLogprob& t : *r.token_logprobs) {
            if (t.logprob > 0.0) fail_line(path, line_no, "token logprob must be <= 0");
        }
    }
    const std::size_t bound =
        r.token_logprobs ? r.token_logprobs->size() : r.raw_text.size();
    for (const auto& [name, span] :
         {std::pair{"answer_span", r.answer_span}, std::pair{"reasoning_span", r.reasoning_span}}) {
        if (span && span->end > bound) {
            fail_line(path, line_no, std::string(name) + " out of bounds");
        }
    }
    if (r.answer_span && r.reasoning_span && r.answer_span->overlaps(*r.reasoning_span)) {
        fail_line(path, line_no, "answer_span and reasoning_span overlap");
    }
}

}  // namespace

std::vector<ResponseBundle> load_responses(const std::string& path,
                                           const std::vector<Question>& questions,
                                           const ResponseLoadOptions& options,
                                           std::vector<std::string>* warnings) {
    std::ifstream in(path);
    if (!in) fail("cannot open responses file: " + path);

    std::map<std::string, std::size_t> question_index;
    for (std::size_t i = 0; i < questions.size(); ++i) question_index[questions[i].id] = i;

    std::vector<ResponseBundle> bundles(questions.size());
    std::vector<bool> has_rows(questions.size(), false);
    for (std::size_t i = 0; i < questions.size(); ++i) bundles[i].question = questions[i];

    std::string line;
    std::size_t line_no = 0;
    std::size_t total_rows = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        ++total_rows;
        json j = parse_line(path, line_no, line);

        const std::string qid = string_field(path, line_no, j, "question_id");
        auto qit = question_index.find(qid);
        if (qit == question_index.end()) fail_line(path, line_no, "unknown question id: " + qid);
        ResponseBundle& bundle = bundles[qit->second];
        has_rows[qit->second] = true;

        const std::string mode = string_field(path, line_no, j, "mode");
        if (mode == "elicitation") {
            if (bundle.elicitation_raw) fail_line(path, line_no, "duplicate elicitation row for " + qid);
            bundle.elicitation_raw = string_field(path, line_no, j, "raw_text");
            bundle.elicited_confidence =
                parse_elicited(*bundle.elicitation_raw,
                               options.elicitation_scale_min, options.elicitation_scale_max);
            continue;
        }
        if (mode != "greedy" && mode != "nucleus") {
            fail_line(path, line_no, "mode must be greedy, nucleus, or elicitation");
        }

        GenerationRecord r;
        r.question_id = qid;
        const json& seed_v = field(path, line_no, j, "shuffle_seed");
        const json& idx_v = field(path, line_no, j, "shuffle_index");
        if (!seed_v.is_number_integer() && !seed_v.is_number_unsigned()) {
            fail_line(path, line_no, "shuffle_seed must be an integer");
        }
        if (!idx_v.is_number_unsigned() && !(idx_v.is_number_integer() && idx_v.get<long long>() >= 0)) {
            fail_line(path, line_no, "shuffle_index must be a non-negative integer");
        }
        r.permutation = permutation_at(seed_v.get<std::uint64_t>(), idx_v.get<std::uint32_t>());

        r.decoding.mode = mode == "greedy" ? DecodingMode::greedy : DecodingMode::nucleus;
        if (r.decoding.mode == DecodingMode::nucleus) {
            const json& t = field(path, line_no, j, "temperature");
            const json& p = field(path, line_no, j, "top_p");
            if (!t.is_number() || t.get<double>() <= 0.0) {
                fail_line(path, line_no, "nucleus rows need temperature > 0");
            }
            if (!p.is_number() || p.get<double>() <= 0.0 || p.get<double>() > 1.0) {
                fail_line(path, line_no, "nucleus rows need top_p in (0, 1]");
            }
            r.decoding.temperature = t.get<double>();
            r.decoding.top_p = p.get<double>();
            if (auto it = j.find("seed"); it != j.end() && it->is_number()) {
                r.decoding.seed = it->get<std::uint64_t>();
            }
        }
        r.raw_text = string_field(path, line_no, j, "raw_text");

        if (auto it = j.find("tokens"); it != j.end() && !it->is_null()) {
            if (!it->is_array()) fail_line(path, line_no, "tokens must be an array");
            std::vector<TokenLogprob> toks;
            toks.reserve(it->size());
            for (const json& t : *it) {
                if (!t.is_object() || !t.contains("text") || !t.contains("logprob") ||
                    !t["text"].is_string() || !t["logprob"].is_number()) {
                    fail_line(path, line_no, "tokens entries must be {text, logprob}");
                }
                toks.push_back({t["text"].get<std::string>(), t["logprob"].get<double>()});
            }
            r.token_logprobs = std::move(toks);
        }
        r.answer_span = span_field(path, line_no, j, "answer_span");
        r.reasoning_span = span_field(path, line_no, j, "reasoning_span");
        check_record_invariants(path, line_no, r);

        if (auto displayed = extract_answer(r.raw_text)) {
            r.extracted_displayed = displayed;
            r.extracted_canonical = r.permutation.canonical(*displayed);
            r.extraction_source = ExtractionSource::regex;
        }

        auto& list = r.decoding.mode == DecodingMode::greedy ? bundle.greedy_records
                                                             : bundle.sampled_records;
        list.push_back(std::move(r));
    }
    if (total_rows == 0 && warnings) warnings->push_back("responses file is empty: " + path);

    std::vector<ResponseBundle> out;
    out.reserve(bundles.size());
    for (std::size_t i = 0; i < bundles.size(); ++i) {
        if (!has_rows[i]) continue;
        ResponseBundle& b = bundles[i];
        auto by_index = [](const GenerationRecord& a, const GenerationRecord& c) {
            return a.permutation.shuffle_index < c.permutation.shuffle_index;
        };
        std::sort(b.greedy_records.begin(), b.greedy_records.end(), by_index);
        std::sort(b.sampled_records.begin(), b.sampled_records.end(), by_index);
        for (const auto* list : {&b.greedy_records, &b.sampled_records}) {
            for (std::size_t k = 1; k < list->size(); ++k) {
                if ((*list)[k].permutation.shuffle_index == (*list)[k - 1].permutation.shuffle_index) {
                    fail(path + ": duplicate (mode, shuffle_index) for question " + b.question.id);
                }
            }
        }
        out.push_back(std::move(b));
    }
    return out;
}

void save_responses(const std::string& path, const std::vector<ResponseBundle>& bundles) {
    std::ofstream out(path);
    if (!out) fail("cannot write responses file: " + path);
    for (const ResponseBundle& b : bundles) {
        for (const GenerationRecord& r : b.greedy_records) out << response_row_json(r) << '\n';
        for (const GenerationRecord& r : b.sampled_records) out << response_row_json(r) << '\n';
        if (b.elicitation_raw) {
            out << elicitation_row_json(b.question.id, *b.elicitation_raw) << '\n';
        }
    }
}

void import_external_mapping(const std::string& path, std::vector<ResponseBundle>& bundles) {
    std::ifstream in(path);
    if (!in) fail("cannot open mapping file: " + path);

    std::map<std::string, ResponseBundle*> by_id;
    for (ResponseBundle& b : bundles) by_id[b.question.id] = &b;

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j = parse_line(path, line_no, line);

        const std::string qid = string_field(path, line_no, j, "question_id");
        auto it = by_id.find(qid);
        if (it == by_id.end()) fail_line(path, line_no, "unknown question id: " + qid);

        const json& idx = field(path, line_no, j, "record_index");
        if (!idx.is_number_unsigned() && !(idx.is_number_integer() && idx.get<long long>() >= 0)) {
            fail_line(path, line_no, "record_index must be a non-negative integer");
        }
        const auto record_index = idx.get<std::size_t>();
        if (record_index >= it->second->record_count()) {
            fail_line(path, line_no, "record_index out of range for question " + qid);
        }
        GenerationRecord& r = it->second->record_at(record_index);
        if (r.extraction_source != ExtractionSource::none) {
            fail_line(path, line_no,
                      "record already extracted for question " + qid + " (index " +
                          std::to_string(record_index) + ")");
        }
        const Label displayed = label_field(path, line_no, j, "label");
        r.extracted_displayed = displayed;
        r.extracted_canonical = r.permutation.canonical(displayed);
        r.extraction_source = ExtractionSource::imported_mapping;
    }
}

double accuracy(const std::vector<ResponseBundle>& bundles, RecordScope scope) {
    std::size_t n = 0;
    std::size_t correct = 0;
    for (const ResponseBundle& b : bundles) {
        auto tally = [&](const std::vector<GenerationRecord>& records) {
            for (const GenerationRecord& r : records) {
                ++n;
                if (r.extracted_canonical && *r.extracted_canonical == b.question.gold) ++correct;
            }
        };
        if (scope != RecordScope::sampled) tally(b.greedy_records);
        if (scope != RecordScope::greedy) tally(b.sampled_records);
    }
    if (n == 0) fail("accuracy over an empty record selection");
    return static_cast<double>(correct) / static_cast<double>(n);
}

std::vector<std::string> validate_bundles(const std::vector<ResponseBundle>& bundles) {
    std::vector<std::string> problems;
    std::set<std::string> ids;
    for (const ResponseBundle& b : bundles) {
        const std::string& qid = b.question.id;
        if (!ids.insert(qid).second) problems.push_back("duplicate question id: " + qid);
        if (b.elicited_confidence &&
            (*b.elicited_confidence < 0.0 || *b.elicited_confidence > 1.0)) {
            problems.push_back(qid + ": elicited confidence outside [0,1]");
        }
        auto check = [&](const GenerationRecord& r, DecodingMode expected) {
            if (r.question_id != qid) problems.push_back(qid + ": record references " + r.question_id);
            if (r.decoding.mode != expected) problems.push_back(qid + ": record in wrong mode list");
            if (!r.permutation.is_bijection()) problems.push_back(qid + ": permutation not a bijection");
            if (r.extracted_displayed &&
                (!r.extracted_canonical ||
                 *r.extracted_canonical != r.permutation.canonical(*r.extracted_displayed))) {
                problems.push_back(qid + ": displayed/canonical extraction mismatch");
            }
            if (r.token_logprobs) {
                for (const TokenLogprob& t : *r.token_logprobs) {
                    if (t.logprob > 0.0) {
                        problems.push_back(qid + ": positive token logprob");
                        break;
                    }
                }
            }
            const std::size_t bound = r.token_logprobs ? r.token_logprobs->size() : r.raw_text.size();
            if ((r.answer_span && r.answer_span->end > bound) ||
                (r.reasoning_span && r.reasoning_span->end > bound)) {
                problems.push_back(qid + ": span out of bounds");
            }
            if (r.answer_span && r.reasoning_span && r.answer_span->overlaps(*r.reasoning_span)) {
                problems.push_back(qid + ": answer and reasoning spans overlap");
            }
        };
        for (const GenerationRecord& r : b.greedy_records) check(r, DecodingMode::greedy);
        for (const GenerationRecord& r : b.sampled_records) check(r, DecodingMode::nucleus);
    }
    return problems;
}

}  // namespace uqeval
