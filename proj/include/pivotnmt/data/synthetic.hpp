#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "pivotnmt/data/bpe.hpp"
#include "pivotnmt/data/corpus.hpp"
#include "pivotnmt/errors.hpp"
#include "pivotnmt/numerics/rng.hpp"

namespace pivotnmt::data {

// Deterministic language triple. Sentences are sequences of word indices in
// [0, alphabet_size); each language renders index i as its own surface word.
//   piv = F1(src): substitute through src_to_piv, then reverse every
//                  consecutive block of reorder_window words.
//   trg = F2(piv): substitute through piv_to_trg, monotone.
// With noise_rate > 0 every generated output word is, with that probability,
// replaced by a uniformly drawn word of its language.
struct SyntheticTaskSpec {
    std::size_t alphabet_size = 40;
    std::size_t min_length = 4;
    std::size_t max_length = 16;
    std::vector<std::size_t> src_to_piv;
    std::size_t reorder_window = 3;
    std::vector<std::size_t> piv_to_trg;
    double noise_rate = 0.1;
    std::uint64_t seed = 1;

    void validate() const {
        if (alphabet_size < 2) throw InputError("synthetic spec: alphabet_size must be >= 2");
        if (min_length < 1 || min_length > max_length) throw InputError("synthetic spec: bad length range");
        if (reorder_window < 1) throw InputError("synthetic spec: reorder_window must be >= 1");
        if (noise_rate < 0.0 || noise_rate >= 1.0) throw InputError("synthetic spec: noise_rate must be in [0,1)");
        for (const auto* table : {&src_to_piv, &piv_to_trg}) {
            if (table->size() != alphabet_size) throw InputError("synthetic spec: substitution table size mismatch");
            std::vector<std::size_t> sorted = *table;
            std::sort(sorted.begin(), sorted.end());
            for (std::size_t i = 0; i < sorted.size(); ++i) {
                if (sorted[i] != i) throw InputError("synthetic spec: substitution table is not a permutation");
            }
        }
    }
};

inline void to_json(nlohmann::json& j, const SyntheticTaskSpec& s) {
    j = nlohmann::json{{"alphabet_size", s.alphabet_size}, {"min_length", s.min_length},
                       {"max_length", s.max_length},       {"src_to_piv", s.src_to_piv},
                       {"reorder_window", s.reorder_window}, {"piv_to_trg", s.piv_to_trg},
                       {"noise_rate", s.noise_rate},       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticTaskSpec& s) {
    for (const char* key : {"alphabet_size", "min_length", "max_length", "src_to_piv", "reorder_window", "piv_to_trg",
                            "noise_rate", "seed"}) {
        if (!j.contains(key)) throw InputError(std::string("synthetic spec: missing field '") + key + "'");
    }
    j.at("alphabet_size").get_to(s.alphabet_size);
    j.at("min_length").get_to(s.min_length);
    j.at("max_length").get_to(s.max_length);
    j.at("src_to_piv").get_to(s.src_to_piv);
    j.at("reorder_window").get_to(s.reorder_window);
    j.at("piv_to_trg").get_to(s.piv_to_trg);
    j.at("noise_rate").get_to(s.noise_rate);
    j.at("seed").get_to(s.seed);
    s.validate();
}

// Draws both substitution tables from `seed`.
inline SyntheticTaskSpec make_task_spec(std::size_t alphabet_size, std::size_t min_length, std::size_t max_length,
                                        std::size_t reorder_window, double noise_rate, std::uint64_t seed) {
    SyntheticTaskSpec s;
    s.alphabet_size = alphabet_size;
    s.min_length = min_length;
    s.max_length = max_length;
    s.reorder_window = reorder_window;
    s.noise_rate = noise_rate;
    s.seed = seed;
    nn::Rng rng(seed ^ 0x5eed7ab1e5ULL);
    for (auto* table : {&s.src_to_piv, &s.piv_to_trg}) {
        table->resize(alphabet_size);
        for (std::size_t i = 0; i < alphabet_size; ++i) (*table)[i] = i;
        rng.shuffle(*table);
    }
    s.validate();
    return s;
}

enum class Language { Source = 0, Pivot = 1, Target = 2 };

// Surface words of one language: distinct lowercase strings of 2-4 letters.
inline std::vector<std::string> lexicon(const SyntheticTaskSpec& spec, Language lang) {
    nn::Rng rng(spec.seed * 0x9E3779B97F4A7C15ULL + 0x1000ULL * (static_cast<std::uint64_t>(lang) + 1));
    std::vector<std::string> words;
    std::unordered_set<std::string> seen;
    while (words.size() < spec.alphabet_size) {
        const std::size_t len = 2 + rng.uniform_int(3);
        std::string w;
        for (std::size_t i = 0; i < len; ++i) w += static_cast<char>('a' + rng.uniform_int(26));
        if (seen.insert(w).second) words.push_back(std::move(w));
    }
    return words;
}

using WordSeq = std::vector<std::size_t>;

inline WordSeq apply_f1(const SyntheticTaskSpec& spec, const WordSeq& src) {
    WordSeq out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = spec.src_to_piv.at(src[i]);
    for (std::size_t start = 0; start < out.size(); start += spec.reorder_window) {
        const std::size_t end = std::min(out.size(), start + spec.reorder_window);
        std::reverse(out.begin() + static_cast<std::ptrdiff_t>(start), out.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

inline WordSeq apply_f2(const SyntheticTaskSpec& spec, const WordSeq& piv) {
    WordSeq out(piv.size());
    for (std::size_t i = 0; i < piv.size(); ++i) out[i] = spec.piv_to_trg.at(piv[i]);
    return out;
}

struct CorpusSizes {
    std::size_t src_piv = 0;
    std::size_t piv_trg = 0;
    std::size_t src_trg = 0;
    std::size_t three_way_test = 0;
    std::size_t three_way_dev = 0;
};

struct SyntheticCorpora {
    TextCorpus src_piv;
    TextCorpus piv_trg;
    TextCorpus src_trg;
    TextCorpus test;
    TextCorpus dev;
};

class SyntheticGenerator {
public:
    explicit SyntheticGenerator(SyntheticTaskSpec spec)
        : spec_(std::move(spec)),
          rng_(spec_.seed),
          words_{lexicon(spec_, Language::Source), lexicon(spec_, Language::Pivot), lexicon(spec_, Language::Target)} {
        spec_.validate();
    }

    const std::vector<std::string>& words(Language lang) const { return words_[static_cast<std::size_t>(lang)]; }

    std::string render(const WordSeq& seq, Language lang) const {
        std::vector<std::string> out;
        for (std::size_t w : seq) out.push_back(words(lang).at(w));
        return join_words(out);
    }

    // A source sentence not produced before by this generator.
    WordSeq fresh_source() {
        for (;;) {
            const std::size_t span = spec_.max_length - spec_.min_length + 1;
            const std::size_t len = spec_.min_length + rng_.uniform_int(span);
            WordSeq s(len);
            for (auto& w : s) w = rng_.uniform_int(spec_.alphabet_size);
            if (used_.insert(s).second) return s;
        }
    }

    WordSeq noisy(WordSeq seq) {
        if (spec_.noise_rate <= 0.0) return seq;
        for (auto& w : seq) {
            if (rng_.uniform() < spec_.noise_rate) w = rng_.uniform_int(spec_.alphabet_size);
        }
        return seq;
    }

    SyntheticCorpora generate(const CorpusSizes& sizes) {
        SyntheticCorpora c;
        for (std::size_t i = 0; i < sizes.src_piv; ++i) {
            const WordSeq src = fresh_source();
            c.src_piv.source.push_back(render(src, Language::Source));
            c.src_piv.target.push_back(render(noisy(apply_f1(spec_, src)), Language::Pivot));
        }
        for (std::size_t i = 0; i < sizes.piv_trg; ++i) {
            const WordSeq piv = apply_f1(spec_, fresh_source());
            c.piv_trg.source.push_back(render(piv, Language::Pivot));
            c.piv_trg.target.push_back(render(noisy(apply_f2(spec_, piv)), Language::Target));
        }
        for (std::size_t i = 0; i < sizes.src_trg; ++i) {
            const WordSeq src = fresh_source();
            c.src_trg.source.push_back(render(src, Language::Source));
            c.src_trg.target.push_back(render(noisy(apply_f2(spec_, apply_f1(spec_, src))), Language::Target));
        }
        auto three_way = [&](TextCorpus& out, std::size_t n) {
            for (std::size_t i = 0; i < n; ++i) {
                const WordSeq src = fresh_source();
                const WordSeq piv = apply_f1(spec_, src);
                out.source.push_back(render(src, Language::Source));
                out.pivot.push_back(render(noisy(piv), Language::Pivot));
                out.target.push_back(render(noisy(apply_f2(spec_, piv)), Language::Target));
            }
        };
        three_way(c.test, sizes.three_way_test);
        three_way(c.dev, sizes.three_way_dev);
        return c;
    }

private:
    SyntheticTaskSpec spec_;
    nn::Rng rng_;
    std::vector<std::string> words_[3];
    std::set<WordSeq> used_;
};

// File names written by gen_synthetic_corpus, relative to the output directory.
struct CorpusLayout {
    std::string src_piv = "src_piv";
    std::string piv_trg = "piv_trg";
    std::string src_trg = "src_trg";
    std::string test = "test";
    std::string dev = "dev";
};

// Writes every corpus as aligned `<prefix>.src/.piv/.trg` files under `dir`.
// Returns the written paths in a fixed order.
inline std::vector<std::string> gen_synthetic_corpus(const SyntheticTaskSpec& spec, const CorpusSizes& sizes,
                                                     const std::string& dir, const CorpusLayout& layout = {}) {
    namespace fs = std::filesystem;
    using Side = std::pair<std::string, const std::vector<std::string>*>;
    struct Output {
        const std::string* prefix;
        std::vector<Side> sides;
        std::size_t count;
    };
    SyntheticGenerator gen(spec);
    const SyntheticCorpora c = gen.generate(sizes);
    const std::vector<Output> outputs = {
        {&layout.src_piv, {{"src", &c.src_piv.source}, {"piv", &c.src_piv.target}}, sizes.src_piv},
        {&layout.piv_trg, {{"piv", &c.piv_trg.source}, {"trg", &c.piv_trg.target}}, sizes.piv_trg},
        {&layout.src_trg, {{"src", &c.src_trg.source}, {"trg", &c.src_trg.target}}, sizes.src_trg},
        {&layout.test, {{"src", &c.test.source}, {"piv", &c.test.pivot}, {"trg", &c.test.target}}, sizes.three_way_test},
        {&layout.dev, {{"src", &c.dev.source}, {"piv", &c.dev.pivot}, {"trg", &c.dev.target}}, sizes.three_way_dev},
    };
    std::set<std::string> claimed;
    for (const auto& o : outputs) {
        if (o.count == 0) continue;
        for (const auto& side : o.sides) {
            const std::string p = (fs::path(dir) / (*o.prefix + "." + side.first)).lexically_normal().string();
            if (!claimed.insert(p).second) throw IoError("gen_synthetic_corpus: output path used twice: " + p);
        }
    }
    fs::create_directories(dir);
    std::vector<std::string> written;
    for (const auto& o : outputs) {
        if (o.count == 0) continue;
        for (const auto& [suffix, lines] : o.sides) {
            const std::string p = (fs::path(dir) / (*o.prefix + "." + suffix)).string();
            write_lines(p, *lines);
            written.push_back(p);
        }
    }
    return written;
}

}  // namespace pivotnmt::data
