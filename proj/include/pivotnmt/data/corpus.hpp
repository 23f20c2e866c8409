#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pivotnmt/data/bpe.hpp"
#include "pivotnmt/data/vocab.hpp"
#include "pivotnmt/errors.hpp"

namespace pivotnmt::data {

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(std::move(line));
    }
    return lines;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    for (const auto& l : lines) out << l << '\n';
    if (!out) throw IoError("write failed for " + path);
}

// Line-aligned text corpus; `pivot` is empty for two-way data.
struct TextCorpus {
    std::vector<std::string> source;
    std::vector<std::string> pivot;
    std::vector<std::string> target;

    std::size_t size() const { return source.size(); }
    bool has_pivot() const { return !pivot.empty(); }
};

// Reads `<prefix>.<suffix>` files for the given suffixes, checking alignment.
inline std::vector<std::vector<std::string>> read_aligned(const std::string& prefix,
                                                          const std::vector<std::string>& suffixes) {
    std::vector<std::vector<std::string>> sides;
    for (const auto& s : suffixes) sides.push_back(read_lines(prefix + "." + s));
    for (const auto& side : sides) {
        if (side.size() != sides.front().size()) {
            throw InputError("corpus " + prefix + ": files are not line-aligned");
        }
    }
    return sides;
}

struct EncodedPair {
    TokenIds source;  // ends with EOS
    TokenIds target;  // ends with EOS
};

inline std::vector<EncodedPair> encode_pairs(const Tokenizer& tok, const std::vector<std::string>& source,
                                             const std::vector<std::string>& target) {
    if (source.size() != target.size()) throw InputError("encode_pairs: line-count mismatch");
    std::vector<EncodedPair> out;
    out.reserve(source.size());
    for (std::size_t i = 0; i < source.size(); ++i) out.push_back({tok.encode(source[i]), tok.encode(target[i])});
    return out;
}

// Greedy in-order packing: a batch's padded size (count x longest) stays
// within `budget` unless a single sentence alone exceeds it.
inline std::vector<std::vector<std::size_t>> batch_by_tokens(const std::vector<std::size_t>& lengths,
                                                             std::size_t budget) {
    budget = std::max<std::size_t>(budget, 1);
    std::vector<std::vector<std::size_t>> batches;
    std::vector<std::size_t> current;
    std::size_t longest = 0;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        const std::size_t grown = std::max(longest, lengths[i]);
        if (!current.empty() && (current.size() + 1) * grown > budget) {
            batches.push_back(std::move(current));
            current.clear();
            longest = 0;
        }
        current.push_back(i);
        longest = std::max(longest, lengths[i]);
    }
    if (!current.empty()) batches.push_back(std::move(current));
    return batches;
}

inline std::vector<std::vector<std::size_t>> batch_by_tokens(const std::vector<EncodedPair>& corpus,
                                                             std::size_t budget) {
    std::vector<std::size_t> lengths;
    lengths.reserve(corpus.size());
    for (const auto& p : corpus) lengths.push_back(std::max(p.source.size(), p.target.size()));
    return batch_by_tokens(lengths, budget);
}

// Fixed-count batches in the given order.
inline std::vector<std::vector<std::size_t>> batch_by_count(const std::vector<std::size_t>& order,
                                                            std::size_t batch_size) {
    batch_size = std::max<std::size_t>(batch_size, 1);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
    }
    return batches;
}

}  // namespace pivotnmt::data
