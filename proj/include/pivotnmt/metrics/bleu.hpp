#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "pivotnmt/data/bpe.hpp"
#include "pivotnmt/errors.hpp"
#include "pivotnmt/metrics/score.hpp"

namespace pivotnmt::metrics {

inline constexpr std::size_t kBleuOrder = 4;

namespace detail {

using Ngrams = std::map<std::vector<std::string>, std::size_t>;

inline Ngrams count_ngrams(const std::vector<std::string>& words, std::size_t n) {
    Ngrams out;
    for (std::size_t i = 0; i + n <= words.size(); ++i) {
        ++out[std::vector<std::string>(words.begin() + static_cast<std::ptrdiff_t>(i),
                                       words.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return out;
}

struct BleuStats {
    std::vector<std::size_t> matches = std::vector<std::size_t>(kBleuOrder, 0);
    std::vector<std::size_t> totals = std::vector<std::size_t>(kBleuOrder, 0);
    std::size_t hyp_len = 0;
    std::size_t ref_len = 0;

    void add(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
        hyp_len += hyp.size();
        ref_len += ref.size();
        for (std::size_t n = 1; n <= kBleuOrder; ++n) {
            const Ngrams h = count_ngrams(hyp, n);
            const Ngrams r = count_ngrams(ref, n);
            for (const auto& [g, c] : h) {
                totals[n - 1] += c;
                auto it = r.find(g);
                if (it != r.end()) matches[n - 1] += std::min(c, it->second);
            }
        }
    }
};

// log with the floor used by the common scorer for zero precisions.
inline double floor_log(double x) { return x == 0.0 ? -9999999999.0 : std::log(x); }

inline MetricScore bleu_from_stats(const BleuStats& s, bool smooth, MetricKind kind) {
    MetricScore out;
    out.kind = kind;
    out.matches = s.matches;
    out.totals = s.totals;
    out.hypothesis_length = s.hyp_len;
    out.reference_length = s.ref_len;
    double bp = 1.0;
    if (s.hyp_len < s.ref_len) {
        bp = s.hyp_len > 0 ? std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.hyp_len)) : 0.0;
    }
    if (std::all_of(s.matches.begin(), s.matches.end(), [](std::size_t m) { return m == 0; })) return out;
    std::vector<double> precisions(kBleuOrder, 0.0);
    double smooth_factor = 1.0;
    // Sentence scoring uses the effective order: the highest n for which the
    // hypothesis has any n-grams.
    std::size_t order = kBleuOrder;
    for (std::size_t n = 1; n <= kBleuOrder; ++n) {
        if (s.totals[n - 1] == 0) break;
        if (smooth) order = n;
        const auto total = static_cast<double>(s.totals[n - 1]);
        if (s.matches[n - 1] == 0) {
            if (smooth) {
                smooth_factor *= 2.0;
                precisions[n - 1] = 100.0 / (smooth_factor * total);
            }
        } else {
            precisions[n - 1] = 100.0 * static_cast<double>(s.matches[n - 1]) / total;
        }
    }
    double log_sum = 0.0;
    for (std::size_t n = 0; n < order; ++n) log_sum += floor_log(precisions[n]);
    out.value = std::clamp(bp * std::exp(log_sum / static_cast<double>(order)), 0.0, 100.0);
    return out;
}

}  // namespace detail

// Smoothed sentence BLEU over whitespace tokens: zero n-gram matches at order n
// get precision 100 / (2^k * total_n) for the k-th such order.
inline MetricScore sentence_bleu(const std::vector<std::string>& hypothesis, const std::vector<std::string>& reference) {
    if (reference.empty()) throw InputError("sentence_bleu: empty reference");
    detail::BleuStats stats;
    stats.add(hypothesis, reference);
    return detail::bleu_from_stats(stats, true, MetricKind::SentenceBleu);
}

inline MetricScore sentence_bleu(const std::string& hypothesis, const std::string& reference) {
    return sentence_bleu(data::split_words(hypothesis), data::split_words(reference));
}

// Unsmoothed BLEU from n-gram counts summed over all lines.
inline MetricScore corpus_bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references) {
    if (hypotheses.size() != references.size()) {
        throw InputError("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                         std::to_string(references.size()) + " references");
    }
    detail::BleuStats stats;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        stats.add(data::split_words(hypotheses[i]), data::split_words(references[i]));
    }
    return detail::bleu_from_stats(stats, false, MetricKind::CorpusBleu);
}

}  // namespace pivotnmt::metrics
