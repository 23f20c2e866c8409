#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "pivotnmt/metrics/bleu.hpp"
#include "pivotnmt/metrics/chrf.hpp"
#include "pivotnmt/numerics/adam.hpp"
#include "pivotnmt/pivot/cascade.hpp"

namespace pivotnmt::pivot {

enum class RewardKind { NegCE, SentBleu, SentChrf };

inline RewardKind parse_reward(const std::string& s) {
    if (s == "negce") return RewardKind::NegCE;
    if (s == "bleu") return RewardKind::SentBleu;
    if (s == "chrf") return RewardKind::SentChrf;
    throw ConfigError("unknown reward '" + s + "' (expected negce, bleu or chrf)");
}

inline std::string reward_name(RewardKind k) {
    switch (k) {
        case RewardKind::NegCE: return "negce";
        case RewardKind::SentBleu: return "bleu";
        case RewardKind::SentChrf: return "chrf";
    }
    return "unknown";
}

// Likelihood: r = sum log p / (divisor * I), which rewards pivots that make the
// reference likely. `Paper` (`--negce-sign paper`): r = +CE / (divisor * I),
// the opposite sign, kept for ablation.
enum class NegCeSign { Likelihood, Paper };

struct RlConfig {
    RewardKind reward = RewardKind::NegCE;
    double learning_rate = 5e-6;
    nn::UpdateRule optimizer = nn::UpdateRule::Adam;
    std::size_t batch_size = 16;
    std::size_t target_beam = 1;
    double negce_divisor = 10.0;
    NegCeSign negce_sign = NegCeSign::Likelihood;
    std::uint64_t seed = 1;
    std::size_t epochs = 10;
    bool baseline = false;
    double baseline_decay = 0.9;
    bool sample_length = false;
    std::size_t dev_iterations = 5;
    std::size_t max_target_len = 0;  // 0: piv->trg max_positions

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("rl: learning rate must be > 0");
        if (!(negce_divisor > 0.0)) throw ConfigError("rl: NegCE divisor must be > 0");
        if (batch_size == 0) throw ConfigError("rl: batch size must be >= 1");
        if (target_beam == 0) throw ConfigError("rl: target beam must be >= 1");
        if (dev_iterations == 0) throw ConfigError("rl: dev iterations must be >= 1");
        if (baseline_decay < 0.0 || baseline_decay >= 1.0) throw ConfigError("rl: baseline decay must be in [0,1)");
    }
};

namespace detail {

inline DecodeConfig target_decode(const RlConfig& cfg) {
    DecodeConfig d;
    d.target_beam = cfg.target_beam;
    d.max_len = cfg.max_target_len;
    return d;
}

}  // namespace detail

// Rewards for a batch of pivots (payload ids, no EOS) and target references
// (encoded, EOS-terminated). p2t is only read.
inline std::vector<double> compute_rewards(RewardKind kind, const ArModel& p2t, const data::Tokenizer& tok,
                                           const std::vector<const TokenIds*>& pivots,
                                           const std::vector<const TokenIds*>& references, const RlConfig& cfg) {
    if (pivots.size() != references.size()) throw DimensionError("compute_reward: one reference per pivot required");
    for (const TokenIds* r : references) {
        if (r->empty() || (r->size() == 1 && r->front() == data::kEos)) {
            throw InputError("compute_reward: empty reference");
        }
    }
    nn::NoGradGuard no_grad;
    std::vector<TokenIds> sources;
    sources.reserve(pivots.size());
    for (const TokenIds* p : pivots) sources.push_back(pivot_as_source(*p, p2t.config().max_positions));
    std::vector<const TokenIds*> src_ptrs;
    for (const auto& s : sources) src_ptrs.push_back(&s);
    std::vector<double> out(pivots.size());
    if (kind == RewardKind::NegCE) {
        const auto ll = model::sequence_log_likelihood(p2t, src_ptrs, references);
        const double sign = cfg.negce_sign == NegCeSign::Likelihood ? 1.0 : -1.0;
        for (std::size_t i = 0; i < ll.size(); ++i) {
            out[i] = sign * ll[i] / (cfg.negce_divisor * static_cast<double>(references[i]->size()));
        }
        return out;
    }
    const auto hyps = decode_ar(p2t, src_ptrs, cfg.target_beam, detail::target_decode(cfg));
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        const std::string h = tok.decode(hyps[i].tokens);
        const std::string r = tok.decode(*references[i]);
        out[i] = kind == RewardKind::SentBleu ? metrics::sentence_bleu(h, r).value : metrics::sentence_chrf(h, r).value;
    }
    return out;
}

inline double compute_reward(RewardKind kind, const ArModel& p2t, const data::Tokenizer& tok, const TokenIds& pivot,
                             const TokenIds& reference, const RlConfig& cfg) {
    return compute_rewards(kind, p2t, tok, {&pivot}, {&reference}, cfg).front();
}

// Scores sampled pivots (payload ids); one reward per pivot.
using RewardFn = std::function<std::vector<double>(const std::vector<const TokenIds*>& pivots)>;

struct Surrogate {
    Tensor objective;  // mean_b (r_b - baseline) * log p(z_b | f_b), tape-tracked
    std::vector<double> rewards;
    std::vector<Hypothesis> pivots;
    double mean_reward = 0.0;
};

// Builds the REINFORCE surrogate for a batch of sources: predict each pivot
// length (argmax, or a draw when cfg.sample_length), sample every slot from
// one fully masked decoder pass, score the samples, and weight each sampled
// sequence's log-probability by its reward. Rewards are not differentiated.
inline Surrogate reinforce_surrogate(const CmlmModel& cmlm, const std::vector<const TokenIds*>& sources,
                                     const RewardFn& reward_fn, const RlConfig& cfg, nn::Rng& rng,
                                     double baseline = 0.0) {
    const auto& mc = cmlm.config();
    const model::PaddedBatch src = model::PaddedBatch::from(sources, mc.max_positions);
    const model::ForwardContext eval{};
    const Tensor memory = cmlm.core().encode(src, eval);
    std::vector<std::size_t> lengths;
    {
        const Tensor len_logits = cmlm.length_logits(memory, src);
        const std::size_t C = cmlm.max_length();
        std::vector<double> lp(C), p(C);
        for (std::size_t i = 0; i < sources.size(); ++i) {
            nn::detail::log_softmax_rows(len_logits.data().data() + i * C, lp.data(), 1, C);
            if (cfg.sample_length) {
                for (std::size_t c = 0; c < C; ++c) p[c] = std::exp(lp[c]);
                lengths.push_back(rng.categorical(p) + 1);
            } else {
                lengths.push_back(model::argmax_length(lp));
            }
        }
    }
    const model::PaddedBatch slots = model::fully_masked(lengths, mc.max_positions);
    const Tensor logits = cmlm.token_logits(memory, src, slots, eval);
    auto samples = model::draw_parallel(logits.data(), slots.len, mc.vocab_size, lengths, rng);

    Surrogate out;
    std::vector<int> targets(slots.batch * slots.len, data::kPad);
    std::vector<const TokenIds*> pivots;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& t = samples[i].hypothesis.tokens;
        std::copy(t.begin(), t.end(), targets.begin() + static_cast<std::ptrdiff_t>(i * slots.len));
        pivots.push_back(&t);
    }
    out.rewards = reward_fn(pivots);
    if (out.rewards.size() != samples.size()) throw DimensionError("reinforce: one reward per sample required");
    for (auto& s : samples) out.pivots.push_back(std::move(s.hypothesis));
    double sum = 0.0;
    for (double r : out.rewards) sum += r;
    out.mean_reward = sum / static_cast<double>(out.rewards.size());
    std::vector<double> weights(targets.size(), 0.0);
    if (std::isfinite(out.mean_reward)) {
        for (std::size_t i = 0; i < lengths.size(); ++i) {
            const double w = (out.rewards[i] - baseline) / static_cast<double>(lengths.size());
            for (std::size_t k = 0; k < lengths[i]; ++k) weights[i * slots.len + k] = w;
        }
    }
    out.objective = nn::weighted_sum(nn::token_log_likelihood(logits, targets, data::kPad), weights);
    return out;
}

struct StepResult {
    double mean_reward = 0.0;
    bool skipped = false;
    std::vector<double> rewards;
    std::vector<Hypothesis> pivots;
};

// Exponential moving average of past batch-mean rewards.
struct RewardBaseline {
    double value = 0.0;
    bool initialised = false;

    void update(double mean, double decay) {
        value = initialised ? decay * value + (1.0 - decay) * mean : mean;
        initialised = true;
    }
};

// One REINFORCE update on a batch of (source, target reference) pairs, with
// rewards from the frozen piv->trg model. The optimizer minimises, so the
// negated surrogate is backpropagated; this ascends the expected reward.
inline StepResult reinforce_step(CmlmModel& cmlm, const ArModel& p2t, const data::Tokenizer& tok,
                                 const std::vector<const data::EncodedPair*>& batch, const RlConfig& cfg,
                                 nn::Optimizer& optimizer, nn::Rng& rng, RewardBaseline* baseline = nullptr) {
    check_joint_vocabulary(cmlm, p2t);
    StepResult res;
    if (batch.empty()) return res;
    std::vector<const TokenIds*> srcs, refs;
    for (const auto* p : batch) {
        srcs.push_back(&p->source);
        refs.push_back(&p->target);
    }
    const RewardFn reward_fn = [&](const std::vector<const TokenIds*>& pivots) {
        return compute_rewards(cfg.reward, p2t, tok, pivots, refs, cfg);
    };
    const double b = (baseline && baseline->initialised) ? baseline->value : 0.0;
    Surrogate sur = reinforce_surrogate(cmlm, srcs, reward_fn, cfg, rng, b);
    res.mean_reward = sur.mean_reward;
    res.rewards = std::move(sur.rewards);
    res.pivots = std::move(sur.pivots);
    if (!std::isfinite(res.mean_reward)) {
        std::cerr << "warning: non-finite reward in reinforce step; update skipped\n";
        res.skipped = true;
        return res;
    }
    optimizer.zero_grad();
    nn::backward(nn::scale(sur.objective, -1.0));
    optimizer.step();
    if (baseline) baseline->update(res.mean_reward, cfg.baseline_decay);
    return res;
}

struct EpochRecord {
    std::size_t epoch = 0;
    double mean_reward = 0.0;
    double dev_bleu = 0.0;
    double wall_seconds = 0.0;
    std::size_t skipped_steps = 0;
};

struct RlReport {
    double initial_dev_bleu = 0.0;
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;  // 0: no epoch beat the pre-trained model
    double best_dev_bleu = 0.0;
};

inline double cascade_dev_bleu(const CmlmModel& cmlm, const ArModel& p2t, const data::Tokenizer& tok,
                               const data::TextCorpus& dev, const RlConfig& cfg) {
    DecodeConfig d = detail::target_decode(cfg);
    d.iterations = cfg.dev_iterations;
    return evaluate_cascade(cmlm, p2t, tok, dev, d).bleu.value;
}

// Epochs of shuffled reinforce_step batches over the src->trg corpus. After
// each epoch the cascade's dev BLEU is measured; `cmlm` ends holding the best
// parameters seen (the pre-trained ones if no epoch improved on them).
inline RlReport rl_finetune(CmlmModel& cmlm, const ArModel& p2t, const data::Tokenizer& tok,
                            const std::vector<data::EncodedPair>& train, const data::TextCorpus& dev,
                            const RlConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    cfg.validate();
    check_joint_vocabulary(cmlm, p2t);
    if (train.empty()) throw InputError("rl_finetune: empty training corpus");
    nn::Rng rng(cfg.seed);
    nn::Optimizer opt(cmlm.params().tensors(), nn::AdamHyper{cfg.learning_rate, 0.9, 0.98, 1e-8}, cfg.optimizer);
    RewardBaseline baseline;
    RlReport report;
    report.initial_dev_bleu = cascade_dev_bleu(cmlm, p2t, tok, dev, cfg);
    report.best_dev_bleu = report.initial_dev_bleu;
    CmlmModel best = cmlm.clone();
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        rng.shuffle(order);
        double reward_sum = 0.0;
        std::size_t counted = 0;
        EpochRecord rec;
        rec.epoch = epoch;
        for (const auto& idx : data::batch_by_count(order, cfg.batch_size)) {
            std::vector<const data::EncodedPair*> batch;
            for (std::size_t i : idx) batch.push_back(&train[i]);
            const StepResult s = reinforce_step(cmlm, p2t, tok, batch, cfg, opt, rng, cfg.baseline ? &baseline : nullptr);
            if (s.skipped) {
                ++rec.skipped_steps;
                continue;
            }
            reward_sum += s.mean_reward * static_cast<double>(batch.size());
            counted += batch.size();
        }
        rec.mean_reward = counted ? reward_sum / static_cast<double>(counted) : 0.0;
        rec.dev_bleu = cascade_dev_bleu(cmlm, p2t, tok, dev, cfg);
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (rec.dev_bleu > report.best_dev_bleu) {
            report.best_dev_bleu = rec.dev_bleu;
            report.best_epoch = epoch;
            best.copy_parameters_from(cmlm);
        }
        report.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    cmlm.copy_parameters_from(best);
    return report;
}

}  // namespace pivotnmt::pivot
