#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include "pivotnmt/data/corpus.hpp"
#include "pivotnmt/model/transformer.hpp"
#include "pivotnmt/numerics/adam.hpp"

namespace pivotnmt::model {

// Ids the autoregressive decoder may never emit.
inline constexpr std::array<int, 5> kArBlockedIds = {data::kPad, data::kBos, data::kUnk, data::kMask, data::kLength};

// Autoregressive encoder-decoder transformer with a causally masked decoder.
class ArModel {
public:
    static constexpr const char* kKind = "ar";

    ArModel(const TransformerConfig& cfg, std::uint64_t seed) {
        nn::Rng rng(seed);
        core_ = TransformerCore(cfg, params_, rng, true);
    }

    ArModel(ArModel&&) = default;
    ArModel& operator=(ArModel&&) = default;
    ArModel(const ArModel&) = delete;
    ArModel& operator=(const ArModel&) = delete;

    // Deep copy with independent parameter storage.
    ArModel clone() const {
        ArModel copy(config(), 0);
        copy.copy_parameters_from(*this);
        return copy;
    }

    void copy_parameters_from(const ArModel& other) { copy_parameters(params_, other.params_); }

    const TransformerConfig& config() const { return core_.config(); }
    ParameterList& params() { return params_; }
    const ParameterList& params() const { return params_; }
    const TransformerCore& core() const { return core_; }
    std::span<const int> blocked_ids() const { return kArBlockedIds; }

    // Teacher-forced logits [batch*tgt_len, V] for decoder inputs `dec_in`.
    Tensor logits(const PaddedBatch& src, const PaddedBatch& dec_in, const ForwardContext& ctx) const {
        const Tensor memory = core_.encode(src, ctx);
        return core_.project(core_.decode_hidden(dec_in, memory, src, ctx), blocked_ids());
    }

private:
    ParameterList params_;
    TransformerCore core_;
};

// Teacher-forcing layout for a batch of (source, target) pairs; both sides end with EOS.
struct TeacherForcedBatch {
    PaddedBatch source;
    PaddedBatch decoder_input;  // BOS + target[:-1]
    std::vector<int> targets;   // target, PAD-padded to decoder_input.len
    std::size_t target_tokens = 0;

    static TeacherForcedBatch from(const std::vector<const data::EncodedPair*>& pairs, std::size_t max_positions) {
        TeacherForcedBatch b;
        std::vector<const TokenIds*> srcs;
        std::vector<TokenIds> dec_in;
        for (const auto* p : pairs) {
            srcs.push_back(&p->source);
            TokenIds in{data::kBos};
            in.insert(in.end(), p->target.begin(), p->target.end() - 1);
            dec_in.push_back(std::move(in));
        }
        b.source = PaddedBatch::from(srcs, max_positions);
        b.decoder_input = PaddedBatch::from(dec_in, max_positions);
        b.targets.assign(b.decoder_input.batch * b.decoder_input.len, data::kPad);
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            const TokenIds& t = pairs[i]->target;
            for (std::size_t k = 0; k < t.size(); ++k) b.targets[i * b.decoder_input.len + k] = t[k];
            b.target_tokens += t.size();
        }
        return b;
    }
};

inline void check_vocabulary(const TransformerConfig& cfg, const std::vector<const data::EncodedPair*>& pairs) {
    for (const auto* p : pairs) {
        for (const TokenIds* s : {&p->source, &p->target}) {
            for (int id : *s) {
                if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
                    throw ConfigError("batch token id " + std::to_string(id) + " outside model vocabulary of " +
                                      std::to_string(cfg.vocab_size));
                }
            }
        }
    }
}

// Summed teacher-forced loss over the batch's non-PAD target positions.
inline Tensor mle_loss(const ArModel& model, const TeacherForcedBatch& b, const ForwardContext& ctx) {
    const Tensor logits = model.logits(b.source, b.decoder_input, ctx);
    return smoothed_token_loss(logits, b.targets, model.config().label_smoothing, model.blocked_ids());
}

// One maximum-likelihood update; returns the per-token mean loss.
inline double train_step_mle(ArModel& model, const std::vector<const data::EncodedPair*>& batch,
                             nn::Optimizer& optimizer, nn::Rng& rng) {
    check_vocabulary(model.config(), batch);
    const auto b = TeacherForcedBatch::from(batch, model.config().max_positions);
    const ForwardContext ctx{true, &rng, model.config().dropout};
    optimizer.zero_grad();
    const Tensor loss = nn::scale(mle_loss(model, b, ctx), 1.0 / static_cast<double>(b.target_tokens));
    nn::backward(loss);
    optimizer.step();
    return loss.item();
}

// Cached left-to-right decoder evaluation for inference. Each row is one
// partial hypothesis bound to a source sentence; every step() is one decoder
// pass that consumes one token per row.
class ArDecoderState {
public:
    ArDecoderState(const ArModel& model, const std::vector<const TokenIds*>& sources, std::size_t max_steps)
        : model_(&model), max_steps_(max_steps) {
        const auto& cfg = model.config();
        const std::size_t D = cfg.dim, L = cfg.layers;
        if (max_steps_ > cfg.max_positions) max_steps_ = cfg.max_positions;
        nn::NoGradGuard no_grad;
        source_batch_ = PaddedBatch::from(sources, cfg.max_positions);
        const Tensor memory = model.core().encode(source_batch_, ForwardContext{});
        const std::size_t rows_total = source_batch_.batch * source_batch_.len;
        RowMatrix mem = nn::ConstMatrixMap(memory.data().data(), static_cast<Eigen::Index>(rows_total),
                                           static_cast<Eigen::Index>(D));
        cross_keys_.resize(L);
        cross_values_.resize(L);
        for (std::size_t l = 0; l < L; ++l) {
            const auto& layer = model.core().decoder_layers()[l];
            detail::apply_linear(mem, layer.cross_attn.key, cross_keys_[l]);
            detail::apply_linear(mem, layer.cross_attn.value, cross_values_[l]);
        }
        row_source_.resize(sources.size());
        std::iota(row_source_.begin(), row_source_.end(), 0);
        self_keys_.assign(L, std::vector<RowMatrix>(sources.size(), RowMatrix(max_steps_, D)));
        self_values_ = self_keys_;
    }

    std::size_t rows() const { return row_source_.size(); }
    std::size_t steps_taken() const { return step_; }
    std::size_t max_steps() const { return max_steps_; }
    std::size_t source_of(std::size_t row) const { return row_source_[row]; }

    // Rebinds rows: new row i continues the history of old row parents[i].
    void reorder(const std::vector<std::size_t>& parents) {
        std::vector<std::size_t> src(parents.size());
        for (std::size_t i = 0; i < parents.size(); ++i) src[i] = row_source_.at(parents[i]);
        for (std::size_t l = 0; l < self_keys_.size(); ++l) {
            std::vector<RowMatrix> k, v;
            k.reserve(parents.size());
            v.reserve(parents.size());
            for (std::size_t p : parents) {
                k.push_back(self_keys_[l][p]);
                v.push_back(self_values_[l][p]);
            }
            self_keys_[l] = std::move(k);
            self_values_[l] = std::move(v);
        }
        row_source_ = std::move(src);
    }

    // Feeds one token per row at the next position; returns log-probabilities [rows, V].
    RowMatrix step(std::span<const int> tokens) {
        const auto& cfg = model_->config();
        const auto& core = model_->core();
        if (tokens.size() != rows()) throw DimensionError("decoder step: one token per row required");
        if (step_ >= max_steps_) throw ContractError("decoder step: maximum length reached");
        const auto N = static_cast<Eigen::Index>(rows());
        const auto D = static_cast<Eigen::Index>(cfg.dim);
        const std::size_t H = cfg.heads, dh = cfg.dim / H;
        const double emb_scale = std::sqrt(static_cast<double>(cfg.dim));
        const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

        RowMatrix x(N, D);
        const double* emb = core.token_embedding().data().data();
        const double* pos = core.decoder_positions().data().data() + step_ * cfg.dim;
        for (Eigen::Index r = 0; r < N; ++r) {
            const double* e = emb + static_cast<std::size_t>(tokens[static_cast<std::size_t>(r)]) * cfg.dim;
            for (Eigen::Index j = 0; j < D; ++j) x(r, j) = e[j] * emb_scale + pos[j];
        }
        RowMatrix h, q, k, v, att(N, D), proj;
        std::vector<double> weights(std::max(max_steps_, source_batch_.len));
        for (std::size_t l = 0; l < core.decoder_layers().size(); ++l) {
            const auto& layer = core.decoder_layers()[l];
            // causal self-attention over cached positions 0..step_
            detail::layer_norm_rows(x, layer.self_norm, h);
            detail::apply_linear(h, layer.self_attn.query, q);
            detail::apply_linear(h, layer.self_attn.key, k);
            detail::apply_linear(h, layer.self_attn.value, v);
            for (Eigen::Index r = 0; r < N; ++r) {
                self_keys_[l][static_cast<std::size_t>(r)].row(static_cast<Eigen::Index>(step_)) = k.row(r);
                self_values_[l][static_cast<std::size_t>(r)].row(static_cast<Eigen::Index>(step_)) = v.row(r);
                attend(q.row(r), self_keys_[l][static_cast<std::size_t>(r)], self_values_[l][static_cast<std::size_t>(r)],
                       0, step_ + 1, H, dh, att_scale, weights, att.row(r));
            }
            detail::apply_linear(att, layer.self_attn.output, proj);
            x += proj;
            // cross-attention over the row's source
            detail::layer_norm_rows(x, layer.cross_norm, h);
            detail::apply_linear(h, layer.cross_attn.query, q);
            for (Eigen::Index r = 0; r < N; ++r) {
                const std::size_t b = row_source_[static_cast<std::size_t>(r)];
                attend(q.row(r), cross_keys_[l], cross_values_[l], b * source_batch_.len, source_batch_.lengths[b], H,
                       dh, att_scale, weights, att.row(r));
            }
            detail::apply_linear(att, layer.cross_attn.output, proj);
            x += proj;
            detail::layer_norm_rows(x, layer.ff_norm, h);
            detail::apply_linear(h, layer.ff.up, q);
            if (layer.ff.gelu) {
                q = q.unaryExpr([](double z) { return 0.5 * z * (1.0 + std::erf(z / std::numbers::sqrt2)); });
            } else {
                q = q.cwiseMax(0.0);
            }
            detail::apply_linear(q, layer.ff.down, proj);
            x += proj;
        }
        detail::layer_norm_rows(x, core.decoder_norm(), h);
        RowMatrix logits;
        detail::apply_linear(h, core.output_layer(), logits);
        for (int id : model_->blocked_ids()) logits.col(id).setConstant(nn::kBlockedLogit);
        RowMatrix out(N, logits.cols());
        nn::detail::log_softmax_rows(logits.data(), out.data(), static_cast<std::size_t>(N),
                                     static_cast<std::size_t>(logits.cols()));
        ++step_;
        return out;
    }

private:
    template <typename QRow, typename OutRow>
    static void attend(const QRow& query, const RowMatrix& keys, const RowMatrix& values, std::size_t first,
                       std::size_t count, std::size_t heads, std::size_t dh, double scale, std::vector<double>& w,
                       OutRow&& out) {
        for (std::size_t hd = 0; hd < heads; ++hd) {
            const auto c0 = static_cast<Eigen::Index>(hd * dh);
            const auto width = static_cast<Eigen::Index>(dh);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < count; ++j) {
                w[j] = query.segment(c0, width).dot(keys.row(static_cast<Eigen::Index>(first + j)).segment(c0, width)) *
                       scale;
                mx = std::max(mx, w[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < count; ++j) z += (w[j] = std::exp(w[j] - mx));
            auto seg = out.segment(c0, width);
            seg.setZero();
            for (std::size_t j = 0; j < count; ++j) {
                seg += (w[j] / z) * values.row(static_cast<Eigen::Index>(first + j)).segment(c0, width);
            }
        }
    }

    const ArModel* model_;
    std::size_t max_steps_;
    std::size_t step_ = 0;
    PaddedBatch source_batch_;
    std::vector<RowMatrix> cross_keys_, cross_values_;
    std::vector<std::vector<RowMatrix>> self_keys_, self_values_;
    std::vector<std::size_t> row_source_;
};

// Left-to-right argmax until EOS or max_len steps, for a batch of sources.
// Ties go to the lowest token id.
inline std::vector<Hypothesis> greedy_decode_batch(const ArModel& model, const std::vector<const TokenIds*>& sources,
                                                   std::size_t max_len) {
    std::vector<Hypothesis> hyps(sources.size());
    if (sources.empty() || max_len == 0) return hyps;
    ArDecoderState state(model, sources, max_len);
    std::vector<int> tokens(sources.size(), data::kBos);
    std::size_t alive = sources.size();
    while (alive > 0 && state.steps_taken() < state.max_steps()) {
        const RowMatrix lp = state.step(tokens);
        for (std::size_t r = 0; r < sources.size(); ++r) {
            Hypothesis& hyp = hyps[r];
            if (hyp.finished) continue;
            Eigen::Index best = 0;
            lp.row(static_cast<Eigen::Index>(r)).maxCoeff(&best);
            hyp.score += lp(static_cast<Eigen::Index>(r), best);
            ++hyp.decoder_passes;
            if (best == data::kEos) {
                hyp.finished = true;
                --alive;
            } else {
                hyp.tokens.push_back(static_cast<int>(best));
            }
            tokens[r] = static_cast<int>(best);
        }
    }
    return hyps;
}

inline Hypothesis greedy_decode(const ArModel& model, const TokenIds& source, std::size_t max_len) {
    return greedy_decode_batch(model, {&source}, max_len).front();
}

inline double length_normalized(const Hypothesis& h, double length_penalty) {
    const double len = static_cast<double>(h.tokens.size() + (h.finished ? 1 : 0));
    return h.score / std::pow(std::max(len, 1.0), length_penalty);
}

// Beam search. Candidates are ranked by cumulative log-probability; an EOS
// candidate ranked within the top `beam_size` is finalised. Search stops once
// `beam_size` hypotheses are final or max_len steps are taken, in which case
// the surviving prefixes are returned as unfinished hypotheses. The result is
// sorted by score / length^length_penalty, best first.
inline std::vector<Hypothesis> beam_decode(const ArModel& model, const TokenIds& source, std::size_t beam_size,
                                           std::size_t max_len, double length_penalty = 1.0) {
    if (beam_size == 0) throw ConfigError("beam_decode: beam size must be >= 1");
    std::vector<Hypothesis> finished;
    if (max_len == 0) return finished;
    ArDecoderState state(model, {&source}, max_len);
    std::vector<Hypothesis> alive(1);
    std::vector<int> last{data::kBos};
    struct Candidate {
        double score;
        std::size_t parent;
        int token;
    };
    while (!alive.empty() && state.steps_taken() < state.max_steps()) {
        const RowMatrix lp = state.step(last);
        std::vector<Candidate> cands;
        const auto V = static_cast<std::size_t>(lp.cols());
        for (std::size_t r = 0; r < alive.size(); ++r) {
            for (std::size_t t = 0; t < V; ++t) {
                const double s = lp(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(t));
                if (s <= nn::kBlockedLogit / 2) continue;
                cands.push_back({alive[r].score + s, r, static_cast<int>(t)});
            }
        }
        const std::size_t keep = std::min(cands.size(), 2 * beam_size);
        std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                          [](const Candidate& a, const Candidate& b) {
                              if (a.score != b.score) return a.score > b.score;
                              if (a.parent != b.parent) return a.parent < b.parent;
                              return a.token < b.token;
                          });
        std::vector<Hypothesis> next;
        std::vector<std::size_t> parents;
        std::vector<int> next_tokens;
        for (std::size_t i = 0; i < keep; ++i) {
            const Candidate& c = cands[i];
            if (c.token == data::kEos) {
                if (i < beam_size && finished.size() < beam_size) {
                    Hypothesis h = alive[c.parent];
                    h.score = c.score;
                    h.finished = true;
                    h.decoder_passes = state.steps_taken();
                    finished.push_back(std::move(h));
                }
                continue;
            }
            if (next.size() < beam_size) {
                Hypothesis h = alive[c.parent];
                h.score = c.score;
                h.tokens.push_back(c.token);
                h.decoder_passes = state.steps_taken();
                next.push_back(std::move(h));
                parents.push_back(c.parent);
                next_tokens.push_back(c.token);
            }
        }
        if (finished.size() >= beam_size) break;
        alive = std::move(next);
        if (alive.empty()) break;
        state.reorder(parents);
        last = std::move(next_tokens);
    }
    if (finished.size() < beam_size) {
        for (auto& h : alive) finished.push_back(std::move(h));
    }
    std::stable_sort(finished.begin(), finished.end(), [length_penalty](const Hypothesis& a, const Hypothesis& b) {
        return length_normalized(a, length_penalty) > length_normalized(b, length_penalty);
    });
    if (finished.size() > beam_size) finished.resize(beam_size);
    return finished;
}

// Per-position multinomial sampling from an already encoded decoder state
// until every row has emitted EOS or the state's step cap is reached.
// decoder_passes equals the number of emitted tokens, EOS included.
inline std::vector<Hypothesis> sample_from_state(ArDecoderState& state, nn::Rng& rng) {
    const std::size_t n = state.rows();
    std::vector<Hypothesis> hyps(n);
    std::vector<int> tokens(n, data::kBos);
    std::size_t alive = n;
    std::vector<double> probs;
    while (alive > 0 && state.steps_taken() < state.max_steps()) {
        const RowMatrix lp = state.step(tokens);
        probs.resize(static_cast<std::size_t>(lp.cols()));
        for (std::size_t r = 0; r < n; ++r) {
            Hypothesis& hyp = hyps[r];
            if (hyp.finished) continue;
            for (std::size_t j = 0; j < probs.size(); ++j) {
                probs[j] = std::exp(lp(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)));
            }
            const int tok = static_cast<int>(rng.categorical(probs));
            hyp.score += lp(static_cast<Eigen::Index>(r), tok);
            ++hyp.decoder_passes;
            if (tok == data::kEos) {
                hyp.finished = true;
                --alive;
            } else {
                hyp.tokens.push_back(tok);
            }
            tokens[r] = tok;
        }
    }
    return hyps;
}

inline std::vector<Hypothesis> sample_autoregressive_batch(const ArModel& model,
                                                           const std::vector<const TokenIds*>& sources,
                                                           std::size_t max_len, nn::Rng& rng) {
    if (sources.empty() || max_len == 0) return std::vector<Hypothesis>(sources.size());
    ArDecoderState state(model, sources, max_len);
    return sample_from_state(state, rng);
}

inline Hypothesis sample_autoregressive(const ArModel& model, const TokenIds& source, std::size_t max_len,
                                        nn::Rng& rng) {
    return sample_autoregressive_batch(model, {&source}, max_len, rng).front();
}

// Sum of log p(target_i | target_<i, source) over target (EOS included), no tape.
inline std::vector<double> sequence_log_likelihood(const ArModel& model, const std::vector<const TokenIds*>& sources,
                                                   const std::vector<const TokenIds*>& targets) {
    nn::NoGradGuard no_grad;
    std::vector<data::EncodedPair> pairs;
    pairs.reserve(sources.size());
    for (std::size_t i = 0; i < sources.size(); ++i) pairs.push_back({*sources[i], *targets[i]});
    std::vector<const data::EncodedPair*> ptrs;
    for (const auto& p : pairs) ptrs.push_back(&p);
    const auto b = TeacherForcedBatch::from(ptrs, model.config().max_positions);
    const Tensor lp = nn::token_log_likelihood(model.logits(b.source, b.decoder_input, ForwardContext{}), b.targets,
                                               data::kPad);
    std::vector<double> out(sources.size(), 0.0);
    for (std::size_t i = 0; i < sources.size(); ++i) {
        for (std::size_t t = 0; t < b.decoder_input.len; ++t) out[i] += lp[i * b.decoder_input.len + t];
    }
    return out;
}

}  // namespace pivotnmt::model
