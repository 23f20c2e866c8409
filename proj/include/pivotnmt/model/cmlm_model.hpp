#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pivotnmt/data/corpus.hpp"
#include "pivotnmt/model/transformer.hpp"
#include "pivotnmt/numerics/adam.hpp"

namespace pivotnmt::model {

// The masked decoder never emits a reserved id, EOS included: its output
// length is fixed by the length head.
inline constexpr std::array<int, 6> kCmlmBlockedIds = {data::kPad,  data::kBos,  data::kEos,
                                                       data::kUnk,  data::kMask, data::kLength};

// Conditional masked LM: bidirectional decoder over K target slots plus a
// length head on mean-pooled encoder states (classes are lengths 1..K_max).
class CmlmModel {
public:
    static constexpr const char* kKind = "cmlm";

    CmlmModel(const TransformerConfig& cfg, std::uint64_t seed) {
        if (cfg.max_target_length == 0) throw ConfigError("cmlm: max_target_length must be >= 1");
        if (cfg.max_target_length > cfg.max_positions) {
            throw ConfigError("cmlm: max_target_length exceeds max_positions");
        }
        nn::Rng rng(seed);
        core_ = TransformerCore(cfg, params_, rng, false);
        length_ = LinearLayer::create(params_, "length.projection", cfg.dim, cfg.max_target_length, rng);
    }

    CmlmModel(CmlmModel&&) = default;
    CmlmModel& operator=(CmlmModel&&) = default;
    CmlmModel(const CmlmModel&) = delete;
    CmlmModel& operator=(const CmlmModel&) = delete;

    CmlmModel clone() const {
        CmlmModel copy(config(), 0);
        copy.copy_parameters_from(*this);
        return copy;
    }
    void copy_parameters_from(const CmlmModel& other) { copy_parameters(params_, other.params_); }

    const TransformerConfig& config() const { return core_.config(); }
    std::size_t max_length() const { return config().max_target_length; }
    ParameterList& params() { return params_; }
    const ParameterList& params() const { return params_; }
    const TransformerCore& core() const { return core_; }
    std::span<const int> blocked_ids() const { return kCmlmBlockedIds; }

    // Length logits [batch, K_max] from encoder states.
    Tensor length_logits(const Tensor& memory, const PaddedBatch& src) const {
        return length_(nn::segment_mean(memory, src.batch, src.len, src.lengths));
    }

    // Token logits [batch*len, V] for (partially) masked decoder inputs.
    Tensor token_logits(const Tensor& memory, const PaddedBatch& src, const PaddedBatch& slots,
                        const ForwardContext& ctx) const {
        return core_.project(core_.decode_hidden(slots, memory, src, ctx), blocked_ids());
    }

    // Same logits as token_logits in evaluation mode, computed off the tape.
    RowMatrix parallel_logits(const Tensor& memory, const PaddedBatch& src, const PaddedBatch& slots) const {
        return core_.infer_logits(slots, memory, src, blocked_ids());
    }

private:
    ParameterList params_;
    TransformerCore core_;
    LinearLayer length_;
};

struct MaskingPlan {
    std::size_t length = 0;
    std::vector<std::size_t> masked;    // ascending positions, 0-based
    std::vector<std::size_t> observed;  // ascending complement
};

struct MaskedTarget {
    MaskingPlan plan;
    TokenIds input;  // target with masked slots replaced by MASK
};

// Draws m uniformly from 1..K, then m distinct positions uniformly.
inline MaskedTarget mask_targets(const TokenIds& target, nn::Rng& rng) {
    const std::size_t K = target.size();
    if (K == 0) throw InputError("mask_targets: empty target");
    const std::size_t m = 1 + rng.uniform_int(K);
    std::vector<std::size_t> order(K);
    std::iota(order.begin(), order.end(), 0);
    // partial Fisher-Yates: the first m entries are a uniform m-subset
    for (std::size_t i = 0; i < m; ++i) std::swap(order[i], order[i + rng.uniform_int(K - i)]);
    MaskedTarget out;
    out.plan.length = K;
    out.plan.masked.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m));
    std::sort(out.plan.masked.begin(), out.plan.masked.end());
    out.input = target;
    std::vector<char> is_masked(K, 0);
    for (std::size_t p : out.plan.masked) {
        is_masked[p] = 1;
        out.input[p] = data::kMask;
    }
    for (std::size_t p = 0; p < K; ++p) {
        if (!is_masked[p]) out.plan.observed.push_back(p);
    }
    return out;
}

// Pivot payload of an encoded sequence: the ids before the trailing EOS.
inline TokenIds strip_eos(const TokenIds& ids) {
    TokenIds out = ids;
    if (!out.empty() && out.back() == data::kEos) out.pop_back();
    return out;
}

inline PaddedBatch fully_masked(const std::vector<std::size_t>& lengths, std::size_t max_positions) {
    std::vector<TokenIds> slots;
    slots.reserve(lengths.size());
    for (std::size_t k : lengths) slots.emplace_back(k, data::kMask);
    return PaddedBatch::from(slots, max_positions);
}

struct CmlmLosses {
    double token_loss = 0.0;   // mean CE per masked position
    double length_loss = 0.0;  // mean CE per sentence
};

// Masked-token CE plus weighted length CE, one Adam update. Pair targets are
// encoded pivots (EOS-terminated); the slots are the payload without EOS.
inline CmlmLosses train_step_cmlm(CmlmModel& model, const std::vector<const data::EncodedPair*>& batch,
                                  nn::Optimizer& optimizer, nn::Rng& rng, std::size_t first_index = 0) {
    const auto& cfg = model.config();
    std::vector<const TokenIds*> srcs;
    std::vector<TokenIds> inputs;
    std::vector<int> length_targets;
    std::vector<std::size_t> lengths;
    std::vector<TokenIds> payloads;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        for (const TokenIds* s : {&batch[i]->source, &batch[i]->target}) {
            for (int id : *s) {
                if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
                    throw ConfigError("batch token id " + std::to_string(id) + " outside model vocabulary");
                }
            }
        }
        TokenIds payload = strip_eos(batch[i]->target);
        if (payload.size() > model.max_length()) {
            throw InputError("train_step_cmlm: sentence " + std::to_string(first_index + i) + " has pivot length " +
                             std::to_string(payload.size()) + " > K_max " + std::to_string(model.max_length()));
        }
        if (payload.empty()) {
            throw InputError("train_step_cmlm: sentence " + std::to_string(first_index + i) + " has an empty pivot");
        }
        srcs.push_back(&batch[i]->source);
        lengths.push_back(payload.size());
        length_targets.push_back(static_cast<int>(payload.size() - 1));
        payloads.push_back(std::move(payload));
    }
    std::vector<std::size_t> masked_counts;
    for (const auto& p : payloads) {
        MaskedTarget mt = mask_targets(p, rng);
        inputs.push_back(std::move(mt.input));
        masked_counts.push_back(mt.plan.masked.size());
    }
    const PaddedBatch src = PaddedBatch::from(srcs, cfg.max_positions);
    const PaddedBatch slots = PaddedBatch::from(inputs, cfg.max_positions);
    std::vector<int> targets(slots.batch * slots.len, data::kPad);
    std::size_t masked_total = 0;
    for (std::size_t i = 0; i < payloads.size(); ++i) {
        for (std::size_t k = 0; k < payloads[i].size(); ++k) {
            if (inputs[i][k] == data::kMask) targets[i * slots.len + k] = payloads[i][k];
        }
        masked_total += masked_counts[i];
    }
    const ForwardContext ctx{true, &rng, cfg.dropout};
    optimizer.zero_grad();
    const Tensor memory = model.core().encode(src, ctx);
    const Tensor token_sum =
        smoothed_token_loss(model.token_logits(memory, src, slots, ctx), targets, cfg.label_smoothing,
                            model.blocked_ids());
    const Tensor length_sum = nn::cross_entropy(model.length_logits(memory, src), length_targets, -1);
    const Tensor token_mean = nn::scale(token_sum, 1.0 / static_cast<double>(masked_total));
    const Tensor length_mean = nn::scale(length_sum, 1.0 / static_cast<double>(batch.size()));
    nn::backward(nn::add(token_mean, nn::scale(length_mean, cfg.length_loss_weight)));
    optimizer.step();
    return {token_mean.item(), length_mean.item()};
}

// Masked-token CE per masked position without an update, for dev monitoring.
// Masks are drawn from `rng`, so a fixed seed gives a fixed evaluation.
inline double masked_token_loss(const CmlmModel& model, const std::vector<data::EncodedPair>& corpus, nn::Rng& rng,
                                std::size_t batch_size = 64) {
    nn::NoGradGuard no_grad;
    const auto& cfg = model.config();
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < corpus.size(); start += batch_size) {
        const std::size_t end = std::min(corpus.size(), start + batch_size);
        std::vector<const TokenIds*> srcs;
        std::vector<TokenIds> payloads, inputs;
        for (std::size_t i = start; i < end; ++i) {
            srcs.push_back(&corpus[i].source);
            payloads.push_back(strip_eos(corpus[i].target));
            if (payloads.back().empty() || payloads.back().size() > model.max_length()) {
                throw InputError("masked_token_loss: sentence " + std::to_string(i) + " has unusable pivot length");
            }
            inputs.push_back(mask_targets(payloads.back(), rng).input);
        }
        const PaddedBatch src = PaddedBatch::from(srcs, cfg.max_positions);
        const PaddedBatch slots = PaddedBatch::from(inputs, cfg.max_positions);
        std::vector<int> targets(slots.batch * slots.len, data::kPad);
        for (std::size_t i = 0; i < payloads.size(); ++i) {
            for (std::size_t k = 0; k < payloads[i].size(); ++k) {
                if (inputs[i][k] == data::kMask) {
                    targets[i * slots.len + k] = payloads[i][k];
                    ++count;
                }
            }
        }
        const Tensor memory = model.core().encode(src, ForwardContext{});
        total += nn::cross_entropy(model.token_logits(memory, src, slots, ForwardContext{}), targets, data::kPad).item();
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

// Length-head log-distribution for each source, row i over lengths 1..K_max.
inline std::vector<std::vector<double>> length_log_probs(const CmlmModel& model,
                                                         const std::vector<const TokenIds*>& sources) {
    nn::NoGradGuard no_grad;
    const PaddedBatch src = PaddedBatch::from(sources, model.config().max_positions);
    const Tensor lp = nn::log_softmax(model.length_logits(model.core().encode(src, ForwardContext{}), src));
    std::vector<std::vector<double>> out(sources.size());
    const std::size_t C = model.max_length();
    for (std::size_t i = 0; i < sources.size(); ++i) out[i].assign(lp.data().begin() + i * C, lp.data().begin() + (i + 1) * C);
    return out;
}

inline std::size_t argmax_length(std::span<const double> row) {
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) + 1;
}

inline std::vector<std::size_t> predict_length_batch(const CmlmModel& model,
                                                     const std::vector<const TokenIds*>& sources) {
    std::vector<std::size_t> out;
    for (const auto& row : length_log_probs(model, sources)) out.push_back(argmax_length(row));
    return out;
}

inline std::size_t predict_length(const CmlmModel& model, const TokenIds& source) {
    return predict_length_batch(model, {&source}).front();
}

// Number of slots re-masked after iteration t of T for a length-K output.
inline std::size_t remask_count(std::size_t K, std::size_t t, std::size_t T) {
    return (K * (T - t) + T - 1) / T;
}

// Mask-predict: start fully masked at the predicted length, fill masked slots
// with their argmax, re-mask the least confident slots on a linear schedule.
// The length may be forced through `lengths` (same order as sources).
inline std::vector<Hypothesis> mask_predict_decode_batch(const CmlmModel& model,
                                                         const std::vector<const TokenIds*>& sources,
                                                         std::size_t iterations,
                                                         std::vector<std::size_t> lengths = {}) {
    if (iterations == 0) throw ConfigError("mask_predict_decode: iterations must be >= 1");
    std::vector<Hypothesis> hyps(sources.size());
    if (sources.empty()) return hyps;
    nn::NoGradGuard no_grad;
    const auto& cfg = model.config();
    const PaddedBatch src = PaddedBatch::from(sources, cfg.max_positions);
    const Tensor memory = model.core().encode(src, ForwardContext{});
    if (lengths.empty()) {
        const Tensor lp = model.length_logits(memory, src);
        const std::size_t C = model.max_length();
        for (std::size_t i = 0; i < sources.size(); ++i) {
            lengths.push_back(argmax_length(std::span<const double>(lp.data()).subspan(i * C, C)));
        }
    }
    std::vector<TokenIds> tokens;
    std::vector<std::vector<double>> conf;
    for (std::size_t k : lengths) {
        tokens.emplace_back(k, data::kMask);
        conf.emplace_back(k, 0.0);
    }
    const std::size_t V = cfg.vocab_size;
    std::vector<double> row(V);
    for (std::size_t t = 1; t <= iterations; ++t) {
        const PaddedBatch slots = PaddedBatch::from(tokens, cfg.max_positions);
        const RowMatrix logits = model.parallel_logits(memory, src, slots);
        bool any_masked = false;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const std::size_t K = tokens[i].size();
            ++hyps[i].decoder_passes;
            for (std::size_t k = 0; k < K; ++k) {
                if (tokens[i][k] != data::kMask) continue;
                nn::detail::log_softmax_rows(logits.data() + (i * slots.len + k) * V, row.data(), 1, V);
                const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
                tokens[i][k] = static_cast<int>(best);
                conf[i][k] = row[best];
            }
            if (t < iterations) {
                const std::size_t n = remask_count(K, t, iterations);
                std::vector<std::size_t> order(K);
                std::iota(order.begin(), order.end(), 0);
                std::stable_sort(order.begin(), order.end(),
                                 [&](std::size_t a, std::size_t b) { return conf[i][a] < conf[i][b]; });
                for (std::size_t j = 0; j < n; ++j) tokens[i][order[j]] = data::kMask;
                any_masked = any_masked || n > 0;
            }
        }
        if (!any_masked) break;
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        hyps[i].tokens = tokens[i];
        hyps[i].score = std::accumulate(conf[i].begin(), conf[i].end(), 0.0);
        hyps[i].finished = true;
    }
    return hyps;
}

inline Hypothesis mask_predict_decode(const CmlmModel& model, const TokenIds& source, std::size_t iterations) {
    return mask_predict_decode_batch(model, {&source}, iterations).front();
}

struct ParallelSample {
    Hypothesis hypothesis;  // score holds the log-probability
    double log_prob = 0.0;
    std::size_t decoder_passes = 1;
};

// Draws every slot independently from one decoder pass over a fully masked
// input; `logits` must hold that pass's output rows [batch*stride, V].
inline std::vector<ParallelSample> draw_parallel(std::span<const double> logits, std::size_t stride, std::size_t V,
                                                 const std::vector<std::size_t>& lengths, nn::Rng& rng) {
    std::vector<ParallelSample> out(lengths.size());
    std::vector<double> w(V);
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        ParallelSample& s = out[i];
        for (std::size_t k = 0; k < lengths[i]; ++k) {
            const double* row = logits.data() + (i * stride + k) * V;
            const double mx = *std::max_element(row, row + V);
            double z = 0.0;
            for (std::size_t j = 0; j < V; ++j) z += (w[j] = std::exp(row[j] - mx));
            const std::size_t tok = rng.categorical(w);
            s.hypothesis.tokens.push_back(static_cast<int>(tok));
            s.log_prob += row[tok] - (mx + std::log(z));
        }
        s.hypothesis.score = s.log_prob;
        s.hypothesis.finished = true;
        s.hypothesis.decoder_passes = 1;
    }
    return out;
}

inline std::vector<ParallelSample> sample_parallel_batch(const CmlmModel& model,
                                                         const std::vector<const TokenIds*>& sources,
                                                         const std::vector<std::size_t>& lengths, nn::Rng& rng) {
    if (lengths.size() != sources.size()) throw DimensionError("sample_parallel: one length per source required");
    for (std::size_t k : lengths) {
        if (k < 1 || k > model.max_length()) throw InputError("sample_parallel: length outside [1, K_max]");
    }
    if (sources.empty()) return {};
    nn::NoGradGuard no_grad;
    const auto& cfg = model.config();
    const PaddedBatch src = PaddedBatch::from(sources, cfg.max_positions);
    const PaddedBatch slots = fully_masked(lengths, cfg.max_positions);
    const Tensor memory = model.core().encode(src, ForwardContext{});
    const RowMatrix logits = model.parallel_logits(memory, src, slots);
    return draw_parallel({logits.data(), static_cast<std::size_t>(logits.size())}, slots.len, cfg.vocab_size, lengths,
                         rng);
}

inline ParallelSample sample_parallel(const CmlmModel& model, const TokenIds& source, std::size_t length,
                                      nn::Rng& rng) {
    return sample_parallel_batch(model, {&source}, {length}, rng).front();
}

// Tape-tracked per-slot log-likelihoods [batch*stride] of `pivots` under the
// fully masked input of each pivot's length (0 on padding slots).
struct PivotLikelihood {
    Tensor token_log_probs;
    std::size_t stride = 0;
};

inline PivotLikelihood pivot_log_likelihood(const CmlmModel& model, const std::vector<const TokenIds*>& sources,
                                            const std::vector<const TokenIds*>& pivots) {
    const auto& cfg = model.config();
    std::vector<std::size_t> lengths;
    for (const auto* p : pivots) {
        if (p->empty() || p->size() > model.max_length()) {
            throw InputError("sample_logprob: pivot length outside [1, K_max]");
        }
        lengths.push_back(p->size());
    }
    const PaddedBatch src = PaddedBatch::from(sources, cfg.max_positions);
    const PaddedBatch slots = fully_masked(lengths, cfg.max_positions);
    std::vector<int> targets(slots.batch * slots.len, data::kPad);
    for (std::size_t i = 0; i < pivots.size(); ++i) {
        std::copy(pivots[i]->begin(), pivots[i]->end(), targets.begin() + static_cast<std::ptrdiff_t>(i * slots.len));
    }
    const Tensor memory = model.core().encode(src, ForwardContext{});
    return {nn::token_log_likelihood(model.token_logits(memory, src, slots, ForwardContext{}), targets, data::kPad),
            slots.len};
}

// Differentiable log p_sp(pivot | fully masked input, source).
inline Tensor sample_logprob(const CmlmModel& model, const TokenIds& source, const TokenIds& pivot) {
    return nn::sum(pivot_log_likelihood(model, {&source}, {&pivot}).token_log_probs);
}

}  // namespace pivotnmt::model
