#pragma once

#include <string>
#include <vector>

namespace pivotnmt::metrics {

enum class MetricKind { SentenceBleu, CorpusBleu, SentenceChrf };

inline const char* metric_name(MetricKind k) {
    switch (k) {
        case MetricKind::SentenceBleu: return "sentence_bleu";
        case MetricKind::CorpusBleu: return "corpus_bleu";
        case MetricKind::SentenceChrf: return "sentence_chrf";
    }
    return "unknown";
}

// BLEU values are on 0..100, chrF on 0..1. For BLEU, `matches`/`totals` are
// the clipped and total n-gram counts per order; for chrF they are the
// character n-gram matches and hypothesis counts, with `reference_counts`
// holding the reference n-gram counts.
struct MetricScore {
    double value = 0.0;
    MetricKind kind = MetricKind::SentenceBleu;
    std::vector<std::size_t> matches;
    std::vector<std::size_t> totals;
    std::vector<std::size_t> reference_counts;
    std::size_t hypothesis_length = 0;
    std::size_t reference_length = 0;
};

}  // namespace pivotnmt::metrics
