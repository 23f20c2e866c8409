#pragma once

#include <chrono>
#include <cmath>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "pivotnmt/model/ar_model.hpp"
#include "pivotnmt/model/cmlm_model.hpp"

namespace pivotnmt::analysis {

using data::TokenIds;
using nn::Tensor;

struct TimingStats {
    double mean_ms = 0.0;
    double stddev_ms = 0.0;
    std::vector<double> samples_ms;

    static TimingStats from(std::vector<double> samples) {
        TimingStats t;
        t.samples_ms = std::move(samples);
        const auto n = static_cast<double>(t.samples_ms.size());
        if (t.samples_ms.empty()) return t;
        for (double s : t.samples_ms) t.mean_ms += s;
        t.mean_ms /= n;
        if (t.samples_ms.size() > 1) {
            double ss = 0.0;
            for (double s : t.samples_ms) ss += (s - t.mean_ms) * (s - t.mean_ms);
            t.stddev_ms = std::sqrt(ss / (n - 1.0));
        }
        return t;
    }

    // Normal-approximation 95% interval of the mean.
    double half_width() const {
        return samples_ms.empty() ? 0.0 : 1.96 * stddev_ms / std::sqrt(static_cast<double>(samples_ms.size()));
    }
};

struct BenchRecord {
    std::string model_kind;  // "na" or "ar"
    std::size_t batch_size = 0;
    std::size_t k_hat_max = 0;  // longest sampled output (NA: K-hat, AR: emitted length)
    std::size_t sentences = 0;
    std::size_t total_decoder_passes = 0;  // summed per-sentence pass counts
    std::size_t batch_decoder_passes = 0;  // passes actually run, summed over batches
    bool pass_counts_exact = true;         // NA: every sentence 1; AR: every sentence its emitted length
    TimingStats decoder;                   // decoder passes plus sampling, per repetition over the corpus
    TimingStats encoder;                   // reported separately, per repetition
};

struct BenchReport {
    std::vector<BenchRecord> records;
    std::size_t repetitions = 0;
    bool na_faster = false;
    double speedup = 0.0;             // AR mean / NA mean
    bool intervals_overlap = false;   // when set, the comparison is not conclusive
    std::string warning;
};

inline nlohmann::json to_json(const TimingStats& t, bool with_samples) {
    nlohmann::json j{{"mean_ms", t.mean_ms}, {"stddev_ms", t.stddev_ms}};
    if (with_samples) j["samples_ms"] = t.samples_ms;
    return j;
}

// `with_timing = false` drops every wall-clock field, leaving the part of the
// report that is reproducible across runs.
inline nlohmann::json to_json(const BenchReport& r, bool with_timing = true) {
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& b : r.records) {
        nlohmann::json j{{"model_kind", b.model_kind},
                         {"batch_size", b.batch_size},
                         {"k_hat_max", b.k_hat_max},
                         {"sentences", b.sentences},
                         {"total_decoder_passes", b.total_decoder_passes},
                         {"batch_decoder_passes", b.batch_decoder_passes},
                         {"pass_counts_exact", b.pass_counts_exact}};
        if (with_timing) {
            j["decoder"] = to_json(b.decoder, true);
            j["encoder"] = to_json(b.encoder, false);
        }
        recs.push_back(std::move(j));
    }
    nlohmann::json out{{"records", recs}, {"repetitions", r.repetitions}};
    if (with_timing) {
        out["na_faster"] = r.na_faster;
        out["speedup"] = r.speedup;
        out["intervals_overlap"] = r.intervals_overlap;
        out["warning"] = r.warning;
    }
    return out;
}

struct BenchConfig {
    std::size_t batch_size = 64;
    std::size_t repetitions = 5;
    // Longest pivot either model may produce: AR sampling stops after this
    // many passes and predicted NA lengths are clipped to it. Zero means the
    // CMLM's K_max for NA and the position limit for AR.
    std::size_t k_hat_max = 0;
    std::uint64_t seed = 1;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

inline std::vector<std::vector<const TokenIds*>> make_batches(const std::vector<TokenIds>& corpus, std::size_t bs) {
    std::vector<std::vector<const TokenIds*>> out;
    for (std::size_t i = 0; i < corpus.size(); i += bs) {
        std::vector<const TokenIds*> b;
        for (std::size_t j = i; j < std::min(corpus.size(), i + bs); ++j) b.push_back(&corpus[j]);
        out.push_back(std::move(b));
    }
    return out;
}

}  // namespace detail

// Times one-pass parallel sampling against left-to-right sampling over the
// corpus. Repetition 0 is a warm-up and is not reported.
inline BenchReport bench_sampling(const model::ArModel& ar, const model::CmlmModel& cmlm,
                                  const std::vector<TokenIds>& corpus, const BenchConfig& cfg) {
    if (corpus.empty()) throw InputError("bench_sampling: empty corpus");
    if (cfg.repetitions < 3) throw ConfigError("bench_sampling: at least 3 repetitions required");
    if (cfg.batch_size == 0) throw ConfigError("bench_sampling: batch size must be >= 1");
    if (cfg.k_hat_max > cmlm.max_length()) throw ConfigError("bench_sampling: k_hat_max exceeds the CMLM K_max");
    nn::NoGradGuard no_grad;
    const auto batches = detail::make_batches(corpus, cfg.batch_size);
    BenchRecord na, ar_rec;
    na.model_kind = "na";
    ar_rec.model_kind = "ar";
    na.batch_size = ar_rec.batch_size = cfg.batch_size;
    std::vector<double> na_dec, na_enc, ar_dec, ar_enc;
    const std::size_t ar_cap = cfg.k_hat_max ? cfg.k_hat_max : ar.config().max_positions;

    for (std::size_t rep = 0; rep <= cfg.repetitions; ++rep) {
        const bool record = rep > 0;
        const bool count = rep == 1;
        nn::Rng rng(cfg.seed + rep);
        double enc_ms = 0.0, dec_ms = 0.0;
        for (const auto& b : batches) {
            auto t0 = detail::Clock::now();
            const auto src = model::PaddedBatch::from(b, cmlm.config().max_positions);
            const Tensor memory = cmlm.core().encode(src, model::ForwardContext{});
            std::vector<std::size_t> lengths;
            const Tensor ll = cmlm.length_logits(memory, src);
            for (std::size_t i = 0; i < b.size(); ++i) {
                const std::size_t k = model::argmax_length(
                    std::span<const double>(ll.data()).subspan(i * cmlm.max_length(), cmlm.max_length()));
                lengths.push_back(cfg.k_hat_max ? std::min(k, cfg.k_hat_max) : k);
            }
            enc_ms += detail::ms_since(t0);
            t0 = detail::Clock::now();
            const auto slots = model::fully_masked(lengths, cmlm.config().max_positions);
            const model::RowMatrix logits = cmlm.parallel_logits(memory, src, slots);
            const auto samples = model::draw_parallel({logits.data(), static_cast<std::size_t>(logits.size())}, slots.len,
                                                      cmlm.config().vocab_size, lengths, rng);
            dec_ms += detail::ms_since(t0);
            if (count) {
                na.batch_decoder_passes += 1;
                for (const auto& s : samples) {
                    na.sentences += 1;
                    na.total_decoder_passes += s.decoder_passes;
                    na.k_hat_max = std::max(na.k_hat_max, s.hypothesis.tokens.size());
                    na.pass_counts_exact = na.pass_counts_exact && s.decoder_passes == 1;
                }
            }
        }
        if (record) {
            na_enc.push_back(enc_ms);
            na_dec.push_back(dec_ms);
        }

        enc_ms = dec_ms = 0.0;
        for (const auto& b : batches) {
            auto t0 = detail::Clock::now();
            model::ArDecoderState state(ar, b, ar_cap);
            enc_ms += detail::ms_since(t0);
            t0 = detail::Clock::now();
            const auto hyps = model::sample_from_state(state, rng);
            dec_ms += detail::ms_since(t0);
            if (count) {
                ar_rec.batch_decoder_passes += state.steps_taken();
                for (const auto& h : hyps) {
                    const std::size_t emitted = h.tokens.size() + (h.finished ? 1 : 0);
                    ar_rec.sentences += 1;
                    ar_rec.total_decoder_passes += h.decoder_passes;
                    ar_rec.k_hat_max = std::max(ar_rec.k_hat_max, emitted);
                    ar_rec.pass_counts_exact = ar_rec.pass_counts_exact && h.decoder_passes == emitted;
                }
            }
        }
        if (record) {
            ar_enc.push_back(enc_ms);
            ar_dec.push_back(dec_ms);
        }
    }
    na.decoder = TimingStats::from(na_dec);
    na.encoder = TimingStats::from(na_enc);
    ar_rec.decoder = TimingStats::from(ar_dec);
    ar_rec.encoder = TimingStats::from(ar_enc);

    BenchReport rep;
    rep.repetitions = cfg.repetitions;
    rep.na_faster = na.decoder.mean_ms < ar_rec.decoder.mean_ms;
    rep.speedup = na.decoder.mean_ms > 0.0 ? ar_rec.decoder.mean_ms / na.decoder.mean_ms : 0.0;
    const double na_hi = na.decoder.mean_ms + na.decoder.half_width();
    const double na_lo = na.decoder.mean_ms - na.decoder.half_width();
    const double ar_hi = ar_rec.decoder.mean_ms + ar_rec.decoder.half_width();
    const double ar_lo = ar_rec.decoder.mean_ms - ar_rec.decoder.half_width();
    rep.intervals_overlap = na_lo <= ar_hi && ar_lo <= na_hi;
    if (rep.intervals_overlap) rep.warning = "confidence intervals overlap; the timing comparison is inconclusive";
    rep.records = {std::move(na), std::move(ar_rec)};
    return rep;
}

}  // namespace pivotnmt::analysis
