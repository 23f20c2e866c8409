#pragma once

#include <map>
#include <string>

#include "pivotnmt/data/bpe.hpp"
#include "pivotnmt/errors.hpp"
#include "pivotnmt/metrics/score.hpp"

namespace pivotnmt::metrics {

inline constexpr std::size_t kChrfOrder = 6;
inline constexpr double kChrfBeta = 2.0;

// Character n-gram F-score. Whitespace is removed before extraction, so
// n-grams may span word boundaries. Precision and recall are averaged over
// the orders present in both strings, then combined with beta = 2.
inline MetricScore sentence_chrf(const std::string& hypothesis, const std::string& reference) {
    std::string ref_chars, hyp_chars;
    for (const auto& w : data::split_words(reference)) ref_chars += w;
    for (const auto& w : data::split_words(hypothesis)) hyp_chars += w;
    if (ref_chars.empty()) throw InputError("sentence_chrf: empty reference");
    const auto hyp = data::utf8_chars(hyp_chars);
    const auto ref = data::utf8_chars(ref_chars);

    MetricScore out;
    out.kind = MetricKind::SentenceChrf;
    out.hypothesis_length = hyp.size();
    out.reference_length = ref.size();
    double avg_p = 0.0, avg_r = 0.0;
    std::size_t effective = 0;
    for (std::size_t n = 1; n <= kChrfOrder; ++n) {
        std::map<std::string, std::size_t> h, r;
        auto gram = [](const std::vector<std::string>& cs, std::size_t i, std::size_t len) {
            std::string g;
            for (std::size_t k = 0; k < len; ++k) g += cs[i + k];
            return g;
        };
        std::size_t nh = 0, nr = 0, nm = 0;
        for (std::size_t i = 0; i + n <= hyp.size(); ++i, ++nh) ++h[gram(hyp, i, n)];
        for (std::size_t i = 0; i + n <= ref.size(); ++i, ++nr) ++r[gram(ref, i, n)];
        for (const auto& [g, c] : h) {
            auto it = r.find(g);
            if (it != r.end()) nm += std::min(c, it->second);
        }
        out.matches.push_back(nm);
        out.totals.push_back(nh);
        out.reference_counts.push_back(nr);
        if (nh > 0 && nr > 0) {
            avg_p += static_cast<double>(nm) / static_cast<double>(nh);
            avg_r += static_cast<double>(nm) / static_cast<double>(nr);
            ++effective;
        }
    }
    if (effective == 0) return out;
    avg_p /= static_cast<double>(effective);
    avg_r /= static_cast<double>(effective);
    if (avg_p + avg_r > 0.0) {
        const double b2 = kChrfBeta * kChrfBeta;
        out.value = (1.0 + b2) * avg_p * avg_r / (b2 * avg_p + avg_r);
    }
    return out;
}

}  // namespace pivotnmt::metrics
