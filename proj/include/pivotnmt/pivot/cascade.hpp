#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "pivotnmt/data/corpus.hpp"
#include "pivotnmt/metrics/bleu.hpp"
#include "pivotnmt/model/ar_model.hpp"
#include "pivotnmt/model/cmlm_model.hpp"

namespace pivotnmt::pivot {

using data::TokenIds;
using model::ArModel;
using model::CmlmModel;
using model::Hypothesis;
using nn::Tensor;

struct DecodeConfig {
    std::size_t pivot_beam = 1;   // AR first stage: 1 is greedy
    std::size_t target_beam = 1;  // second stage: 1 is greedy
    std::size_t iterations = 5;   // CMLM first stage mask-predict iterations
    std::size_t max_len = 0;      // AR output cap in tokens incl. EOS; 0 means the model's max_positions
    double length_penalty = 1.0;
    std::size_t batch_size = 64;
    std::size_t threads = 1;
};

struct CascadeResult {
    Hypothesis pivot;
    Hypothesis target;
    // Sentence BLEU against the references; NaN when no reference was given.
    double pivot_bleu = std::numeric_limits<double>::quiet_NaN();
    double target_bleu = std::numeric_limits<double>::quiet_NaN();
};

inline std::size_t ar_max_len(const ArModel& m, const DecodeConfig& cfg) {
    const std::size_t cap = m.config().max_positions;
    return cfg.max_len == 0 ? cap : std::min(cfg.max_len, cap);
}

// Source ids the second stage reads for a pivot payload. A pivot that hit the
// first stage's length cap is cut so that payload plus EOS fits `max_positions`.
inline TokenIds pivot_as_source(const TokenIds& payload,
                                std::size_t max_positions = std::numeric_limits<std::size_t>::max()) {
    const std::size_t keep = std::min(payload.size(), max_positions - 1);
    TokenIds ids(payload.begin(), payload.begin() + static_cast<std::ptrdiff_t>(keep));
    ids.push_back(data::kEos);
    return ids;
}

inline TokenIds pivot_as_source(const Hypothesis& pivot,
                                std::size_t max_positions = std::numeric_limits<std::size_t>::max()) {
    return pivot_as_source(pivot.tokens, max_positions);
}

inline std::vector<Hypothesis> decode_ar(const ArModel& m, const std::vector<const TokenIds*>& sources, std::size_t beam,
                                         const DecodeConfig& cfg) {
    if (beam == 0) throw ConfigError("decode: beam size must be >= 1");
    const std::size_t max_len = ar_max_len(m, cfg);
    if (beam == 1) return model::greedy_decode_batch(m, sources, max_len);
    std::vector<Hypothesis> out;
    out.reserve(sources.size());
    for (const TokenIds* s : sources) {
        auto beams = model::beam_decode(m, *s, beam, max_len, cfg.length_penalty);
        out.push_back(beams.empty() ? Hypothesis{} : std::move(beams.front()));
    }
    return out;
}

inline std::vector<Hypothesis> decode_pivots(const ArModel& s2p, const std::vector<const TokenIds*>& sources,
                                             const DecodeConfig& cfg) {
    return decode_ar(s2p, sources, cfg.pivot_beam, cfg);
}

inline std::vector<Hypothesis> decode_pivots(const CmlmModel& s2p, const std::vector<const TokenIds*>& sources,
                                             const DecodeConfig& cfg) {
    return model::mask_predict_decode_batch(s2p, sources, cfg.iterations);
}

template <typename Src2Piv>
void check_joint_vocabulary(const Src2Piv& s2p, const ArModel& p2t) {
    if (s2p.config().vocab_size != p2t.config().vocab_size) {
        throw ConfigError("cascade: src->piv vocabulary size " + std::to_string(s2p.config().vocab_size) +
                          " differs from piv->trg vocabulary size " + std::to_string(p2t.config().vocab_size));
    }
}

// Two-step decoding for a batch: the best pivot hypothesis of each source is
// translated by the second stage, which never sees the source itself.
template <typename Src2Piv>
std::vector<CascadeResult> two_step_decode_batch(const Src2Piv& s2p, const ArModel& p2t,
                                                 const std::vector<const TokenIds*>& sources, const DecodeConfig& cfg) {
    check_joint_vocabulary(s2p, p2t);
    std::vector<CascadeResult> out(sources.size());
    if (sources.empty()) return out;
    std::vector<Hypothesis> pivots = decode_pivots(s2p, sources, cfg);
    std::vector<TokenIds> pivot_sources;
    pivot_sources.reserve(pivots.size());
    for (const auto& p : pivots) pivot_sources.push_back(pivot_as_source(p, p2t.config().max_positions));
    std::vector<const TokenIds*> ptrs;
    for (const auto& p : pivot_sources) ptrs.push_back(&p);
    std::vector<Hypothesis> targets = decode_ar(p2t, ptrs, cfg.target_beam, cfg);
    for (std::size_t i = 0; i < sources.size(); ++i) {
        out[i].pivot = std::move(pivots[i]);
        out[i].target = std::move(targets[i]);
    }
    return out;
}

template <typename Src2Piv>
CascadeResult two_step_decode(const Src2Piv& s2p, const ArModel& p2t, const TokenIds& source,
                              const DecodeConfig& cfg) {
    return two_step_decode_batch(s2p, p2t, {&source}, cfg).front();
}

// Decodes `sources` in fixed-size batches, optionally on several threads.
// Each sentence's result is independent of the batching.
template <typename Src2Piv>
std::vector<CascadeResult> cascade_all(const Src2Piv& s2p, const ArModel& p2t, const std::vector<TokenIds>& sources,
                                       const DecodeConfig& cfg) {
    std::vector<CascadeResult> out(sources.size());
    const std::size_t bs = std::max<std::size_t>(cfg.batch_size, 1);
    const std::size_t nbatches = (sources.size() + bs - 1) / bs;
    auto run = [&](std::size_t worker, std::size_t workers) {
        for (std::size_t b = worker; b < nbatches; b += workers) {
            std::vector<const TokenIds*> ptrs;
            for (std::size_t i = b * bs; i < std::min(sources.size(), (b + 1) * bs); ++i) ptrs.push_back(&sources[i]);
            auto res = two_step_decode_batch(s2p, p2t, ptrs, cfg);
            for (std::size_t i = 0; i < res.size(); ++i) out[b * bs + i] = std::move(res[i]);
        }
    };
    const std::size_t workers = std::clamp<std::size_t>(cfg.threads, 1, std::max<std::size_t>(nbatches, 1));
    if (workers == 1) {
        run(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w, workers);
        for (auto& t : pool) t.join();
    }
    return out;
}

struct CascadeEvaluation {
    metrics::MetricScore bleu;
    std::vector<CascadeResult> results;
    std::vector<std::string> pivot_lines;
    std::vector<std::string> target_lines;
};

// Corpus BLEU of the cascade on `corpus.source` against `corpus.target`.
// When the corpus has a pivot side, per-sentence pivot BLEU is filled too.
template <typename Src2Piv>
CascadeEvaluation evaluate_cascade(const Src2Piv& s2p, const ArModel& p2t, const data::Tokenizer& tok,
                                   const data::TextCorpus& corpus, const DecodeConfig& cfg) {
    if (corpus.source.size() != corpus.target.size() || (corpus.has_pivot() && corpus.pivot.size() != corpus.size())) {
        throw InputError("evaluate_cascade: test files are not line-aligned");
    }
    std::vector<TokenIds> sources;
    sources.reserve(corpus.size());
    for (const auto& s : corpus.source) sources.push_back(tok.encode(s));
    CascadeEvaluation ev;
    ev.results = cascade_all(s2p, p2t, sources, cfg);
    for (std::size_t i = 0; i < ev.results.size(); ++i) {
        auto& r = ev.results[i];
        ev.pivot_lines.push_back(tok.decode(r.pivot.tokens));
        ev.target_lines.push_back(tok.decode(r.target.tokens));
        if (!data::split_words(corpus.target[i]).empty()) {
            r.target_bleu = metrics::sentence_bleu(ev.target_lines.back(), corpus.target[i]).value;
        }
        if (corpus.has_pivot() && !data::split_words(corpus.pivot[i]).empty()) {
            r.pivot_bleu = metrics::sentence_bleu(ev.pivot_lines.back(), corpus.pivot[i]).value;
        }
    }
    ev.bleu = metrics::corpus_bleu(ev.target_lines, corpus.target);
    return ev;
}

// Translates each line with one AR model, in batches of cfg.batch_size.
inline std::vector<std::string> translate_lines(const ArModel& m, const data::Tokenizer& tok,
                                                const std::vector<std::string>& sources, const DecodeConfig& cfg) {
    std::vector<TokenIds> enc;
    enc.reserve(sources.size());
    for (const auto& s : sources) enc.push_back(tok.encode(s));
    std::vector<std::string> lines;
    lines.reserve(sources.size());
    const std::size_t bs = std::max<std::size_t>(cfg.batch_size, 1);
    for (std::size_t start = 0; start < enc.size(); start += bs) {
        std::vector<const TokenIds*> ptrs;
        for (std::size_t i = start; i < std::min(enc.size(), start + bs); ++i) ptrs.push_back(&enc[i]);
        for (const auto& h : decode_ar(m, ptrs, cfg.pivot_beam, cfg)) lines.push_back(tok.decode(h.tokens));
    }
    return lines;
}

struct DirectEvaluation {
    metrics::MetricScore bleu;
    std::vector<std::string> lines;
};

// Corpus BLEU of a single AR model translating source -> target directly.
inline DirectEvaluation evaluate_direct(const ArModel& m, const data::Tokenizer& tok,
                                        const std::vector<std::string>& sources,
                                        const std::vector<std::string>& references, const DecodeConfig& cfg) {
    if (sources.size() != references.size()) throw InputError("evaluate: line-count mismatch");
    DirectEvaluation ev;
    ev.lines = translate_lines(m, tok, sources, cfg);
    ev.bleu = metrics::corpus_bleu(ev.lines, references);
    return ev;
}

// Sequence-level distillation: every pivot line is replaced by the teacher's
// best beam hypothesis for its source. Sources are kept verbatim.
inline data::TextCorpus distill_corpus(const ArModel& teacher, const data::Tokenizer& tok,
                                       const data::TextCorpus& src_piv, std::size_t beam_size,
                                       const DecodeConfig& base = {}) {
    DecodeConfig cfg = base;
    cfg.pivot_beam = beam_size;
    data::TextCorpus out;
    out.source = src_piv.source;
    out.target = translate_lines(teacher, tok, src_piv.source, cfg);
    return out;
}

}  // namespace pivotnmt::pivot
