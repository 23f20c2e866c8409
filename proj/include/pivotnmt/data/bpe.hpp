#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pivotnmt/data/vocab.hpp"
#include "pivotnmt/errors.hpp"

namespace pivotnmt::data {

// Whitespace pre-tokenisation.
inline std::vector<std::string> split_words(const std::string& line) {
    std::vector<std::string> words;
    std::istringstream is(line);
    std::string w;
    while (is >> w) words.push_back(std::move(w));
    return words;
}

inline std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

// Splits UTF-8 text into code points.
inline std::vector<std::string> utf8_chars(const std::string& word) {
    std::vector<std::string> chars;
    for (std::size_t i = 0; i < word.size();) {
        const auto c = static_cast<unsigned char>(word[i]);
        std::size_t len = 1;
        if ((c & 0xE0) == 0xC0) len = 2;
        else if ((c & 0xF0) == 0xE0) len = 3;
        else if ((c & 0xF8) == 0xF0) len = 4;
        len = std::min(len, word.size() - i);
        chars.push_back(word.substr(i, len));
        i += len;
    }
    return chars;
}

// Ordered merge list. Words are segmented into characters followed by a
// separate end-of-word symbol, so merges never cross word boundaries.
struct BpeModel {
    std::vector<std::pair<std::string, std::string>> merges;
    std::string end_of_word = "</w>";

    std::vector<std::string> initial_symbols(const std::string& word) const {
        auto symbols = utf8_chars(word);
        symbols.push_back(end_of_word);
        return symbols;
    }

    // Applies merges in rank order until no ranked pair remains.
    std::vector<std::string> segment(const std::string& word) const {
        ensure_ranks();
        auto symbols = initial_symbols(word);
        while (symbols.size() > 1) {
            std::size_t best_rank = merges.size();
            for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
                auto it = ranks_.find({symbols[i], symbols[i + 1]});
                if (it != ranks_.end() && it->second < best_rank) best_rank = it->second;
            }
            if (best_rank == merges.size()) break;
            const auto& [left, right] = merges[best_rank];
            std::vector<std::string> next;
            next.reserve(symbols.size());
            for (std::size_t i = 0; i < symbols.size();) {
                if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
                    next.push_back(left + right);
                    i += 2;
                } else {
                    next.push_back(symbols[i]);
                    ++i;
                }
            }
            symbols = std::move(next);
        }
        return symbols;
    }

    // One merge per line, `left<SPACE>right`, in training order.
    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("bpe: cannot write " + path);
        for (const auto& [l, r] : merges) out << l << ' ' << r << '\n';
        if (!out) throw IoError("bpe: write failed for " + path);
    }

    static BpeModel load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("bpe: cannot read " + path);
        BpeModel model;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto sp = line.find(' ');
            if (sp == std::string::npos || line.find(' ', sp + 1) != std::string::npos) {
                throw InputError("bpe: malformed merge line '" + line + "'");
            }
            model.merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
        }
        return model;
    }

private:
    void ensure_ranks() const {
        if (ranked_count_ == merges.size()) return;
        ranks_.clear();
        for (std::size_t i = 0; i < merges.size(); ++i) ranks_.try_emplace(merges[i], i);
        ranked_count_ = merges.size();
    }

    mutable std::map<std::pair<std::string, std::string>, std::size_t> ranks_;
    mutable std::size_t ranked_count_ = static_cast<std::size_t>(-1);
};

// Learns up to `merge_count` merges jointly over all corpora (each a list of
// lines). Stops early once no pair occurs at least twice. Ties are broken by
// the lexicographically smallest pair.
inline BpeModel train_bpe(const std::vector<std::vector<std::string>>& corpora, std::size_t merge_count) {
    std::map<std::string, std::size_t> word_freq;
    for (const auto& corpus : corpora) {
        for (const auto& line : corpus) {
            for (auto& w : split_words(line)) ++word_freq[w];
        }
    }
    if (word_freq.empty()) throw InputError("train_bpe: corpora contain no words");

    BpeModel model;
    std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
    words.reserve(word_freq.size());
    for (const auto& [w, f] : word_freq) words.emplace_back(model.initial_symbols(w), f);

    while (model.merges.size() < merge_count) {
        std::map<std::pair<std::string, std::string>, std::size_t> pair_freq;
        for (const auto& [symbols, f] : words) {
            for (std::size_t i = 0; i + 1 < symbols.size(); ++i) pair_freq[{symbols[i], symbols[i + 1]}] += f;
        }
        const std::pair<std::string, std::string>* best = nullptr;
        std::size_t best_count = 0;
        for (const auto& [pair, count] : pair_freq) {
            if (count > best_count) {
                best = &pair;
                best_count = count;
            }
        }
        if (best == nullptr || best_count < 2) break;
        const auto merge = *best;
        model.merges.push_back(merge);
        const std::string joined = merge.first + merge.second;
        for (auto& [symbols, f] : words) {
            std::vector<std::string> next;
            next.reserve(symbols.size());
            for (std::size_t i = 0; i < symbols.size();) {
                if (i + 1 < symbols.size() && symbols[i] == merge.first && symbols[i + 1] == merge.second) {
                    next.push_back(joined);
                    i += 2;
                } else {
                    next.push_back(symbols[i]);
                    ++i;
                }
            }
            symbols = std::move(next);
        }
    }
    return model;
}

// Reserved tokens, then every base symbol in sorted order, then merge outputs in merge order.
inline Vocabulary build_vocabulary(const BpeModel& bpe, const std::vector<std::vector<std::string>>& corpora) {
    std::set<std::string> chars;
    for (const auto& corpus : corpora) {
        for (const auto& line : corpus) {
            for (const auto& w : split_words(line)) {
                for (auto& c : utf8_chars(w)) chars.insert(std::move(c));
            }
        }
    }
    for (const auto& [l, r] : bpe.merges) {
        for (const auto* s : {&l, &r}) {
            if (*s != bpe.end_of_word && utf8_chars(*s).size() == 1) chars.insert(*s);
        }
    }
    Vocabulary vocab;
    for (const auto& c : chars) vocab.add(c);
    vocab.add(bpe.end_of_word);
    for (const auto& [l, r] : bpe.merges) vocab.add(l + r);
    return vocab;
}

// BPE segmentation plus vocabulary lookup. Caches word segmentations; not
// safe for concurrent use from several threads.
class Tokenizer {
public:
    Tokenizer(BpeModel bpe, Vocabulary vocab) : bpe_(std::move(bpe)), vocab_(std::move(vocab)) {}

    const BpeModel& bpe() const { return bpe_; }
    const Vocabulary& vocab() const { return vocab_; }

    // Subword ids of `sentence` followed by EOS. Unknown symbols map to UNK.
    TokenIds encode(const std::string& sentence) const {
        TokenIds ids;
        for (const auto& w : split_words(sentence)) {
            const TokenIds& piece = encode_word(w);
            ids.insert(ids.end(), piece.begin(), piece.end());
        }
        ids.push_back(kEos);
        return ids;
    }

    // Drops reserved ids and undoes the segmentation.
    std::string decode(const TokenIds& ids) const {
        std::vector<std::string> words;
        std::string current;
        const std::string& eow = bpe_.end_of_word;
        for (int id : ids) {
            const std::string& tok = vocab_.token(id);
            if (is_reserved(id)) continue;
            if (tok.size() >= eow.size() && tok.compare(tok.size() - eow.size(), eow.size(), eow) == 0) {
                current += tok.substr(0, tok.size() - eow.size());
                if (!current.empty()) words.push_back(std::move(current));
                current.clear();
            } else {
                current += tok;
            }
        }
        if (!current.empty()) words.push_back(std::move(current));
        return join_words(words);
    }

private:
    const TokenIds& encode_word(const std::string& word) const {
        auto it = cache_.find(word);
        if (it != cache_.end()) return it->second;
        TokenIds ids;
        for (const auto& sym : bpe_.segment(word)) ids.push_back(vocab_.id(sym));
        return cache_.emplace(word, std::move(ids)).first->second;
    }

    BpeModel bpe_;
    Vocabulary vocab_;
    mutable std::unordered_map<std::string, TokenIds> cache_;
};

}  // namespace pivotnmt::data
