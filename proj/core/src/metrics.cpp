#include "uqeval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "uqeval/rng.hpp"

namespace uqeval {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

// Right-closed equal-width bin lookup with representable edges, so a
// confidence exactly on an edge lands in the bin it closes.
int bin_of(double confidence, int bins) {
    for (int b = 1; b <= bins; ++b) {
        if (confidence <= static_cast<double>(b) / static_cast<double>(bins)) return b - 1;
    }
    return bins - 1;
}

double auroc_impl(const std::vector<double>& uncertainty, const std::vector<bool>& correct) {
    std::size_t n_correct = 0;
    for (bool c : correct) n_correct += c ? 1 : 0;
    const std::size_t n_incorrect = correct.size() - n_correct;
    if (n_correct == 0 || n_incorrect == 0) {
        fail("AUROC undefined: outcomes contain a single correctness class");
    }

    std::vector<std::size_t> order(uncertainty.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return uncertainty[a] < uncertainty[b]; });

    // Average ranks over ties, then the Mann-Whitney U of the incorrect class.
    double rank_sum_incorrect = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && uncertainty[order[j]] == uncertainty[order[i]]) ++j;
        const double avg_rank = static_cast<double>(i + j + 1) / 2.0;  // 1-based
        for (std::size_t k = i; k < j; ++k) {
            if (!correct[order[k]]) rank_sum_incorrect += avg_rank;
        }
        i = j;
    }
    const double u = rank_sum_incorrect -
                     static_cast<double>(n_incorrect) * (static_cast<double>(n_incorrect) + 1.0) / 2.0;
    return u / (static_cast<double>(n_correct) * static_cast<double>(n_incorrect));
}

double ece_impl(const std::vector<double>& confidence, const std::vector<bool>& correct, int bins) {
    std::vector<std::size_t> count(bins, 0);
    std::vector<double> conf_sum(bins, 0.0);
    std::vector<std::size_t> correct_sum(bins, 0);
    for (std::size_t i = 0; i < confidence.size(); ++i) {
        const int b = bin_of(confidence[i], bins);
        ++count[b];
        conf_sum[b] += confidence[i];
        correct_sum[b] += correct[i] ? 1 : 0;
    }
    double total = 0.0;
    const auto n = static_cast<double>(confidence.size());
    for (int b = 0; b < bins; ++b) {
        if (count[b] == 0) continue;
        const auto nb = static_cast<double>(count[b]);
        const double acc = static_cast<double>(correct_sum[b]) / nb;
        const double conf = conf_sum[b] / nb;
        total += (nb / n) * std::abs(acc - conf);
    }
    return total;
}

double brier_impl(const std::vector<double>& confidence, const std::vector<bool>& correct) {
    double total = 0.0;
    for (std::size_t i = 0; i < confidence.size(); ++i) {
        const double d = confidence[i] - (correct[i] ? 1.0 : 0.0);
        total += d * d;
    }
    return total / static_cast<double>(confidence.size());
}

struct Columns {
    std::vector<double> confidence;
    std::vector<double> uncertainty;
    std::vector<bool> correct;
};

Columns columns(const std::vector<ScoredOutcome>& outcomes) {
    Columns c;
    c.confidence.reserve(outcomes.size());
    c.uncertainty.reserve(outcomes.size());
    c.correct.reserve(outcomes.size());
    for (const ScoredOutcome& o : outcomes) {
        if (o.confidence < 0.0 || o.confidence > 1.0) {
            fail("confidence outside [0,1] for question " + o.question_id);
        }
        c.confidence.push_back(o.confidence);
        c.uncertainty.push_back(o.uncertainty_raw);
        c.correct.push_back(o.correct);
    }
    return c;
}

double metric_on(MetricKind metric, const Columns& c, const std::vector<std::size_t>& idx,
                 int ece_bins) {
    std::vector<double> conf;
    std::vector<double> unc;
    std::vector<bool> cor;
    conf.reserve(idx.size());
    unc.reserve(idx.size());
    cor.reserve(idx.size());
    for (std::size_t i : idx) {
        conf.push_back(c.confidence[i]);
        unc.push_back(c.uncertainty[i]);
        cor.push_back(c.correct[i]);
    }
    switch (metric) {
        case MetricKind::auroc: return auroc_impl(unc, cor);
        case MetricKind::ece: return ece_impl(conf, cor, ece_bins);
        case MetricKind::brier: return brier_impl(conf, cor);
    }
    fail("unreachable metric kind");
}

}  // namespace

double auroc(const std::vector<ScoredOutcome>& outcomes) {
    if (outcomes.empty()) fail("AUROC over an empty outcome list");
    const Columns c = columns(outcomes);
    return auroc_impl(c.uncertainty, c.correct);
}

double ece(const std::vector<ScoredOutcome>& outcomes, int bins) {
    if (outcomes.empty()) fail("ECE over an empty outcome list");
    if (bins < 1) fail("ECE needs at least one bin");
    const Columns c = columns(outcomes);
    return ece_impl(c.confidence, c.correct, bins);
}

double brier(const std::vector<ScoredOutcome>& outcomes) {
    if (outcomes.empty()) fail("Brier score over an empty outcome list");
    const Columns c = columns(outcomes);
    return brier_impl(c.confidence, c.correct);
}

std::string to_string(MetricKind m) {
    switch (m) {
        case MetricKind::auroc: return "auroc";
        case MetricKind::ece: return "ece";
        case MetricKind::brier: return "brier";
    }
    fail("unreachable metric kind");
}

double bootstrap_diff(const std::vector<ScoredOutcome>& outcomes_a,
                      const std::vector<ScoredOutcome>& outcomes_b, MetricKind metric,
                      std::size_t n_boot, std::uint64_t seed, int ece_bins) {
    if (outcomes_a.empty() || outcomes_b.empty()) fail("bootstrap over an empty outcome list");
    if (n_boot == 0) fail("bootstrap needs at least one resample");

    // Pair by question when both sides cover the same questions.
    auto ids = [](const std::vector<ScoredOutcome>& v) {
        std::vector<std::string> out;
        out.reserve(v.size());
        for (const ScoredOutcome& o : v) out.push_back(o.question_id);
        std::sort(out.begin(), out.end());
        return out;
    };
    const bool paired =
        outcomes_a.size() == outcomes_b.size() && ids(outcomes_a) == ids(outcomes_b);

    std::vector<ScoredOutcome> a = outcomes_a;
    std::vector<ScoredOutcome> b = outcomes_b;
    if (paired) {
        auto by_id = [](const ScoredOutcome& x, const ScoredOutcome& y) {
            return x.question_id < y.question_id;
        };
        std::stable_sort(a.begin(), a.end(), by_id);
        std::stable_sort(b.begin(), b.end(), by_id);
    }
    const Columns ca = columns(a);
    const Columns cb = columns(b);

    std::size_t at_or_below_zero = 0;
    std::size_t at_or_above_zero = 0;
    constexpr int kMaxRetriesPerResample = 100;

    for (std::size_t r = 0; r < n_boot; ++r) {
        std::mt19937_64 gen(substream_seed(seed, r));
        bool done = false;
        for (int attempt = 0; attempt < kMaxRetriesPerResample && !done; ++attempt) {
            std::vector<std::size_t> ia(a.size());
            std::vector<std::size_t> ib(b.size());
            for (std::size_t i = 0; i < a.size(); ++i) ia[i] = bounded_uint(gen, a.size());
            if (paired) {
                ib = ia;
            } else {
                for (std::size_t i = 0; i < b.size(); ++i) ib[i] = bounded_uint(gen, b.size());
            }
            try {
                const double diff =
                    metric_on(metric, ca, ia, ece_bins) - metric_on(metric, cb, ib, ece_bins);
                if (diff <= 0.0) ++at_or_below_zero;
                if (diff >= 0.0) ++at_or_above_zero;
                done = true;
            } catch (const std::exception&) {
                // Metric undefined on this resample (e.g. single-class AUROC);
                // redraw from the same stream.
            }
        }
        if (!done) fail("metric undefined on repeated bootstrap resamples");
    }

    const double denom = static_cast<double>(n_boot) + 1.0;
    const double p_low = (static_cast<double>(at_or_below_zero) + 1.0) / denom;
    const double p_high = (static_cast<double>(at_or_above_zero) + 1.0) / denom;
    return std::min(1.0, 2.0 * std::min(p_low, p_high));
}

std::string to_string(GroupKey k) {
    switch (k) {
        case GroupKey::specialty: return "specialty";
        case GroupKey::question_type: return "question_type";
        case GroupKey::model_tag: return "model_tag";
    }
    fail("unreachable group key");
}

GroupKey group_key_from_string(std::string_view s) {
    if (s == "specialty") return GroupKey::specialty;
    if (s == "question_type") return GroupKey::question_type;
    if (s == "model_tag") return GroupKey::model_tag;
    throw std::invalid_argument("unknown group key: " + std::string(s));
}

std::vector<GroupReport> stratify(const std::vector<ScoredOutcome>& outcomes,
                                  const std::vector<GroupKey>& by, int ece_bins) {
    if (outcomes.empty()) fail("stratify over an empty outcome list");
    if (by.empty()) fail("stratify needs at least one group key");

    auto key_value = [](const ScoredOutcome& o, GroupKey k) -> const std::string& {
        switch (k) {
            case GroupKey::specialty: return o.specialty;
            case GroupKey::question_type: return o.question_type;
            case GroupKey::model_tag: return o.model_tag;
        }
        fail("unreachable group key");
    };

    std::map<std::vector<std::string>, std::vector<ScoredOutcome>> groups;
    for (const ScoredOutcome& o : outcomes) {
        std::vector<std::string> key;
        key.reserve(by.size());
        for (GroupKey k : by) {
            const std::string& v = key_value(o, k);
            if (v.empty()) {
                fail("outcome for question " + o.question_id + " is missing group key " +
                     to_string(k));
            }
            key.push_back(v);
        }
        groups[std::move(key)].push_back(o);
    }

    auto report_for = [&](const std::vector<std::string>& key, bool overall,
                          const std::vector<ScoredOutcome>& members) {
        GroupReport r;
        r.group = key;
        r.overall = overall;
        r.n = members.size();
        std::size_t correct = 0;
        for (const ScoredOutcome& o : members) correct += o.correct ? 1 : 0;
        r.accuracy = static_cast<double>(correct) / static_cast<double>(members.size());
        if (correct != 0 && correct != members.size()) {
            r.auroc = auroc(members);
        }
        r.ece = ece(members, ece_bins);
        r.brier = brier(members);
        r.avg_ece_brier = (r.ece + r.brier) / 2.0;
        return r;
    };

    std::vector<GroupReport> out;
    const std::vector<std::string> overall_key(by.size(), "Overall");
    out.push_back(report_for(overall_key, true, outcomes));
    for (const auto& [key, members] : groups) {
        out.push_back(report_for(key, false, members));
    }
    return out;
}

}  // namespace uqeval
