#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pivotnmt/errors.hpp"
#include "pivotnmt/pivot/cascade.hpp"

namespace pivotnmt::analysis {

struct CorrelationRecord {
    double pivot_bleu = 0.0;
    double target_bleu = 0.0;
};

struct CorrelationSummary {
    std::optional<double> pearson;  // empty when a column is constant
    std::optional<double> spearman;
    std::size_t count = 0;
};

inline constexpr const char* kUndefined = "undefined";

inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw DimensionError("pearson: column lengths differ");
    const std::size_t n = x.size();
    if (n < 2) return std::nullopt;
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return std::nullopt;
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

inline CorrelationSummary summarize(const std::vector<CorrelationRecord>& records) {
    std::vector<double> x, y;
    for (const auto& r : records) {
        x.push_back(r.pivot_bleu);
        y.push_back(r.target_bleu);
    }
    CorrelationSummary s;
    s.count = records.size();
    s.pearson = pearson(x, y);
    if (s.pearson) s.spearman = pearson(average_ranks(x), average_ranks(y));
    return s;
}

// Pivot-vs-target sentence BLEU of each cascade result. Every result must
// carry both scores, i.e. come from a three-way evaluation.
inline std::vector<CorrelationRecord> correlation_records(const std::vector<pivot::CascadeResult>& results) {
    std::vector<CorrelationRecord> out;
    out.reserve(results.size());
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& r = results[i];
        if (std::isnan(r.pivot_bleu) || std::isnan(r.target_bleu)) {
            throw InputError("correlation: sentence " + std::to_string(i) + " lacks a pivot or target reference score");
        }
        out.push_back({r.pivot_bleu, r.target_bleu});
    }
    return out;
}

struct CorrelationAnalysis {
    std::vector<CorrelationRecord> records;
    CorrelationSummary summary;
};

inline CorrelationAnalysis pivot_target_correlation(const std::vector<pivot::CascadeResult>& results) {
    CorrelationAnalysis a;
    a.records = correlation_records(results);
    a.summary = summarize(a.records);
    return a;
}

inline std::string format_correlation(const std::optional<double>& v) {
    if (!v) return kUndefined;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", *v);
    return buf;
}

inline void write_correlation_tsv(const std::vector<CorrelationRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "pivot_bleu\ttarget_bleu\n";
    char buf[64];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%.4f\t%.4f\n", r.pivot_bleu, r.target_bleu);
        out << buf;
    }
    if (!out) throw IoError("write failed for " + path);
}

// Plot geometry shared by the SVG writer and its tests.
struct ScatterGeometry {
    double width = 480.0, height = 480.0;
    double left = 60.0, right = 20.0, top = 20.0, bottom = 60.0;

    double x(double bleu) const { return left + std::clamp(bleu, 0.0, 100.0) / 100.0 * (width - left - right); }
    double y(double bleu) const {
        return height - bottom - std::clamp(bleu, 0.0, 100.0) / 100.0 * (height - top - bottom);
    }
};

// Writes a standalone SVG scatter (one <circle> per record) and the TSV of
// the same records next to it, with the extension replaced by .tsv.
inline void emit_scatter(const std::vector<CorrelationRecord>& records, const std::string& svg_path,
                         const ScatterGeometry& g = {}) {
    if (records.empty()) throw InputError("emit_scatter: no records");
    std::ostringstream s;
    char buf[160];
    s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    std::snprintf(buf, sizeof(buf),
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" viewBox=\"0 0 %g %g\">\n",
                  g.width, g.height, g.width, g.height);
    s << buf;
    s << "<rect x=\"0\" y=\"0\" width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    std::snprintf(buf, sizeof(buf), "<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"none\" stroke=\"black\"/>\n",
                  g.left, g.top, g.width - g.left - g.right, g.height - g.top - g.bottom);
    s << buf;
    s << "<g font-family=\"sans-serif\" font-size=\"11\" fill=\"black\">\n";
    for (int t = 0; t <= 100; t += 20) {
        std::snprintf(buf, sizeof(buf), "<text x=\"%.2f\" y=\"%.2f\" text-anchor=\"middle\">%d</text>\n", g.x(t),
                      g.height - g.bottom + 16, t);
        s << buf;
        std::snprintf(buf, sizeof(buf), "<text x=\"%.2f\" y=\"%.2f\" text-anchor=\"end\">%d</text>\n", g.left - 6,
                      g.y(t) + 4, t);
        s << buf;
    }
    std::snprintf(buf, sizeof(buf), "<text x=\"%.2f\" y=\"%.2f\" text-anchor=\"middle\">pivot BLEU</text>\n",
                  (g.left + g.width - g.right) / 2, g.height - 18);
    s << buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"16\" y=\"%.2f\" text-anchor=\"middle\" transform=\"rotate(-90 16 %.2f)\">target BLEU</text>\n",
                  (g.top + g.height - g.bottom) / 2, (g.top + g.height - g.bottom) / 2);
    s << buf;
    s << "</g>\n<g fill=\"#1f77b4\" fill-opacity=\"0.5\">\n";
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"2.5\"/>\n", g.x(r.pivot_bleu),
                      g.y(r.target_bleu));
        s << buf;
    }
    s << "</g>\n</svg>\n";
    std::ofstream out(svg_path, std::ios::binary);
    if (!out) throw IoError("emit_scatter: cannot write " + svg_path);
    out << s.str();
    if (!out) throw IoError("emit_scatter: write failed for " + svg_path);
    out.close();
    write_correlation_tsv(records, std::filesystem::path(svg_path).replace_extension(".tsv").string());
}

}  // namespace pivotnmt::analysis
