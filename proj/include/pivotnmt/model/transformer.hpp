#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "pivotnmt/data/vocab.hpp"
#include "pivotnmt/errors.hpp"
#include "pivotnmt/numerics/ops.hpp"
#include "pivotnmt/numerics/rng.hpp"
#include "pivotnmt/numerics/tensor.hpp"

namespace pivotnmt::model {

using data::TokenIds;
using nn::RowMatrix;
using nn::Tensor;

struct TransformerConfig {
    std::size_t vocab_size = 0;
    std::size_t layers = 2;
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t ff_dim = 128;
    std::size_t max_positions = 64;
    double dropout = 0.1;
    std::string activation = "relu";  // relu | gelu
    double label_smoothing = 0.0;
    // CMLM only: number of length classes (lengths 1..max_target_length).
    std::size_t max_target_length = 48;
    double length_loss_weight = 0.1;

    void validate() const {
        if (vocab_size <= static_cast<std::size_t>(data::kNumReserved)) throw ConfigError("model: vocabulary too small");
        if (layers == 0 || dim == 0 || ff_dim == 0 || heads == 0) throw ConfigError("model: zero-sized dimension");
        if (dim % heads != 0) throw ConfigError("model: dim must be divisible by heads");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0,1)");
        if (activation != "relu" && activation != "gelu") throw ConfigError("model: activation must be relu or gelu");
        if (max_positions < 2) throw ConfigError("model: max_positions too small");
    }
};

inline void to_json(nlohmann::json& j, const TransformerConfig& c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size},
                       {"layers", c.layers},
                       {"dim", c.dim},
                       {"heads", c.heads},
                       {"ff_dim", c.ff_dim},
                       {"max_positions", c.max_positions},
                       {"dropout", c.dropout},
                       {"activation", c.activation},
                       {"label_smoothing", c.label_smoothing},
                       {"max_target_length", c.max_target_length},
                       {"length_loss_weight", c.length_loss_weight}};
}

// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, TransformerConfig& c) {
    const TransformerConfig d;
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.layers = j.value("layers", d.layers);
    c.dim = j.value("dim", d.dim);
    c.heads = j.value("heads", d.heads);
    c.ff_dim = j.value("ff_dim", d.ff_dim);
    c.max_positions = j.value("max_positions", d.max_positions);
    c.dropout = j.value("dropout", d.dropout);
    c.activation = j.value("activation", d.activation);
    c.label_smoothing = j.value("label_smoothing", d.label_smoothing);
    c.max_target_length = j.value("max_target_length", d.max_target_length);
    c.length_loss_weight = j.value("length_loss_weight", d.length_loss_weight);
}

// Generated sequence. `tokens` never contains EOS; `decoder_passes` counts the
// decoder forward evaluations spent producing it.
struct Hypothesis {
    TokenIds tokens;
    double score = 0.0;
    bool finished = false;
    std::size_t decoder_passes = 0;
};

// Named parameters in a fixed registration order (the checkpoint order).
class ParameterList {
public:
    Tensor add(std::string name, nn::Shape shape, std::vector<double> values) {
        Tensor t = Tensor::parameter(std::move(shape), std::move(values));
        entries_.emplace_back(std::move(name), t);
        return t;
    }

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        for (const auto& [n, t] : entries_) out.push_back(t);
        return out;
    }
    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : entries_) n += t.size();
        return n;
    }
    void zero_grad() {
        for (auto& [n, t] : entries_) t.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

// Copies parameter values between two lists with identical layout.
inline void copy_parameters(ParameterList& dst, const ParameterList& src) {
    const auto& d = dst.entries();
    const auto& s = src.entries();
    if (d.size() != s.size()) throw ConfigError("parameter layout mismatch");
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d[i].first != s[i].first || d[i].second.shape() != s[i].second.shape()) {
            throw ConfigError("parameter layout mismatch at " + s[i].first);
        }
        Tensor t = d[i].second;
        std::copy(s[i].second.data().begin(), s[i].second.data().end(), t.values().begin());
    }
}

struct ForwardContext {
    bool training = false;
    nn::Rng* rng = nullptr;
    double dropout = 0.0;

    Tensor drop(const Tensor& x) const {
        if (!training || dropout <= 0.0) return x;
        if (rng == nullptr) throw ContractError("forward: training mode needs an rng");
        return nn::dropout(x, dropout, *rng, true);
    }
};

namespace init {

inline std::vector<double> xavier(nn::Rng& rng, std::size_t in, std::size_t out) {
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    std::vector<double> v(in * out);
    for (double& x : v) x = (2.0 * rng.uniform() - 1.0) * a;
    return v;
}

inline std::vector<double> normal(nn::Rng& rng, std::size_t n, double stddev) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal() * stddev;
    return v;
}

// Sinusoidal table [positions, dim]: sin on even, cos on odd columns.
// Positions stay trainable; this only sets their starting point, which a
// fully masked decoder input relies on to tell its slots apart.
inline std::vector<double> sinusoidal(std::size_t positions, std::size_t dim) {
    std::vector<double> v(positions * dim);
    for (std::size_t p = 0; p < positions; ++p) {
        for (std::size_t i = 0; i < dim; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
            const double a = static_cast<double>(p) * freq;
            v[p * dim + i] = i % 2 == 0 ? std::sin(a) : std::cos(a);
        }
    }
    return v;
}

}  // namespace init

struct LinearLayer {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]

    static LinearLayer create(ParameterList& params, const std::string& name, std::size_t in, std::size_t out,
                              nn::Rng& rng) {
        return {params.add(name + ".weight", {in, out}, init::xavier(rng, in, out)),
                params.add(name + ".bias", {out}, std::vector<double>(out, 0.0))};
    }
    Tensor operator()(const Tensor& x) const { return nn::linear(x, weight, bias); }
};

struct LayerNormLayer {
    Tensor gain;
    Tensor bias;

    static LayerNormLayer create(ParameterList& params, const std::string& name, std::size_t dim) {
        return {params.add(name + ".gain", {dim}, std::vector<double>(dim, 1.0)),
                params.add(name + ".bias", {dim}, std::vector<double>(dim, 0.0))};
    }
    Tensor operator()(const Tensor& x) const { return nn::layer_norm(x, gain, bias); }
};

struct AttentionLayer {
    LinearLayer query, key, value, output;

    static AttentionLayer create(ParameterList& params, const std::string& name, std::size_t dim, nn::Rng& rng) {
        AttentionLayer a;
        a.query = LinearLayer::create(params, name + ".query", dim, dim, rng);
        a.key = LinearLayer::create(params, name + ".key", dim, dim, rng);
        a.value = LinearLayer::create(params, name + ".value", dim, dim, rng);
        a.output = LinearLayer::create(params, name + ".output", dim, dim, rng);
        return a;
    }

    Tensor operator()(const Tensor& queries, const Tensor& memory, const nn::AttentionLayout& layout) const {
        return output(nn::attention(query(queries), key(memory), value(memory), layout));
    }
};

struct FeedForwardLayer {
    LinearLayer up, down;
    bool gelu = false;

    static FeedForwardLayer create(ParameterList& params, const std::string& name, std::size_t dim, std::size_t ff,
                                   bool gelu, nn::Rng& rng) {
        return {LinearLayer::create(params, name + ".up", dim, ff, rng),
                LinearLayer::create(params, name + ".down", ff, dim, rng), gelu};
    }
    Tensor operator()(const Tensor& x) const {
        const Tensor h = up(x);
        return down(gelu ? nn::gelu(h) : nn::relu(h));
    }
};

struct EncoderLayer {
    LayerNormLayer attn_norm, ff_norm;
    AttentionLayer self_attn;
    FeedForwardLayer ff;
};

struct DecoderLayer {
    LayerNormLayer self_norm, cross_norm, ff_norm;
    AttentionLayer self_attn, cross_attn;
    FeedForwardLayer ff;
};

// Right-padded batch of id sequences laid out as [batch*len] rows.
struct PaddedBatch {
    std::size_t batch = 0;
    std::size_t len = 0;
    std::vector<int> ids;
    std::vector<int> positions;
    std::vector<std::uint8_t> valid;
    std::vector<std::size_t> lengths;

    static PaddedBatch from(const std::vector<const TokenIds*>& seqs, std::size_t max_positions) {
        PaddedBatch b;
        b.batch = seqs.size();
        for (const auto* s : seqs) {
            if (s->empty()) throw InputError("batch: empty sequence");
            b.len = std::max(b.len, s->size());
        }
        if (b.len > max_positions) {
            throw InputError("batch: sequence of length " + std::to_string(b.len) + " exceeds max_positions " +
                             std::to_string(max_positions));
        }
        b.ids.assign(b.batch * b.len, data::kPad);
        b.positions.assign(b.batch * b.len, 0);
        b.valid.assign(b.batch * b.len, 0);
        for (std::size_t i = 0; i < b.batch; ++i) {
            const TokenIds& s = *seqs[i];
            b.lengths.push_back(s.size());
            for (std::size_t t = 0; t < b.len; ++t) {
                b.positions[i * b.len + t] = static_cast<int>(t);
                if (t < s.size()) {
                    b.ids[i * b.len + t] = s[t];
                    b.valid[i * b.len + t] = 1;
                }
            }
        }
        return b;
    }

    static PaddedBatch from(const std::vector<TokenIds>& seqs, std::size_t max_positions) {
        std::vector<const TokenIds*> ptrs;
        for (const auto& s : seqs) ptrs.push_back(&s);
        return from(ptrs, max_positions);
    }
};

namespace detail {

inline void layer_norm_rows(const RowMatrix& x, const LayerNormLayer& ln, RowMatrix& out) {
    const std::size_t n = static_cast<std::size_t>(x.cols());
    out.resize(x.rows(), x.cols());
    const double* g = ln.gain.data().data();
    const double* b = ln.bias.data().data();
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += x(r, static_cast<Eigen::Index>(j));
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double c = x(r, static_cast<Eigen::Index>(j)) - mu;
            var += c * c;
        }
        var /= static_cast<double>(n);
        const double rstd = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t j = 0; j < n; ++j) {
            const auto jj = static_cast<Eigen::Index>(j);
            out(r, jj) = (x(r, jj) - mu) * rstd * g[j] + b[j];
        }
    }
}

inline void apply_linear(const RowMatrix& x, const LinearLayer& lin, RowMatrix& out) {
    const auto in = static_cast<Eigen::Index>(lin.weight.dim(0));
    const auto o = static_cast<Eigen::Index>(lin.weight.dim(1));
    out.noalias() = x * nn::ConstMatrixMap(lin.weight.data().data(), in, o);
    out.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(lin.bias.data().data(), o);
}


// Inference-only multi-head attention on row-major blocks: q [batch*q_len, D],
// k and v [batch*k_len, D]. Keys flagged 0 in key_valid get zero weight.
inline void attention_rows(const RowMatrix& q, const RowMatrix& k, const RowMatrix& v, std::size_t batch,
                           std::size_t q_len, std::size_t k_len, std::size_t heads,
                           const std::vector<std::uint8_t>& key_valid, bool causal, RowMatrix& out) {
    const auto D = q.cols();
    const auto dh = D / static_cast<Eigen::Index>(heads);
    const auto Tq = static_cast<Eigen::Index>(q_len), Tk = static_cast<Eigen::Index>(k_len);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    out.resize(q.rows(), D);
    RowMatrix s(Tq, Tk);
    for (std::size_t b = 0; b < batch; ++b) {
        const auto r0 = static_cast<Eigen::Index>(b) * Tq, k0 = static_cast<Eigen::Index>(b) * Tk;
        const std::uint8_t* valid = key_valid.data() + b * k_len;
        for (std::size_t h = 0; h < heads; ++h) {
            const auto c0 = static_cast<Eigen::Index>(h) * dh;
            s.noalias() = q.block(r0, c0, Tq, dh) * k.block(k0, c0, Tk, dh).transpose();
            for (Eigen::Index i = 0; i < Tq; ++i) {
                const Eigen::Index last = causal ? std::min(i + 1, Tk) : Tk;
                double mx = -std::numeric_limits<double>::infinity();
                for (Eigen::Index j = 0; j < last; ++j) {
                    if (valid[j]) mx = std::max(mx, s(i, j) * scale);
                }
                double z = 0.0;
                for (Eigen::Index j = 0; j < Tk; ++j) {
                    const double w = (j < last && valid[j]) ? std::exp(s(i, j) * scale - mx) : 0.0;
                    s(i, j) = w;
                    z += w;
                }
                if (z > 0.0) s.row(i) /= z;
            }
            out.block(r0, c0, Tq, dh).noalias() = s * v.block(k0, c0, Tk, dh);
        }
    }
}

}  // namespace detail

// Encoder-decoder stack shared by the autoregressive and the masked model.
// Pre-norm residual blocks; learned positions; input embedding shared by
// both sides over the joint vocabulary.
class TransformerCore {
public:
    TransformerCore() = default;
    TransformerCore(const TransformerConfig& cfg, ParameterList& params, nn::Rng& rng, bool causal_decoder)
        : cfg_(cfg), causal_(causal_decoder) {
        cfg_.validate();
        const std::size_t D = cfg_.dim, V = cfg_.vocab_size, P = cfg_.max_positions;
        const bool gelu = cfg_.activation == "gelu";
        embed_ = params.add("embed.tokens", {V, D}, init::normal(rng, V * D, 1.0 / std::sqrt(static_cast<double>(D))));
        enc_pos_ = params.add("encoder.positions", {P, D}, init::sinusoidal(P, D));
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            const std::string n = "encoder.layer" + std::to_string(l);
            EncoderLayer layer;
            layer.attn_norm = LayerNormLayer::create(params, n + ".attn_norm", D);
            layer.self_attn = AttentionLayer::create(params, n + ".self_attn", D, rng);
            layer.ff_norm = LayerNormLayer::create(params, n + ".ff_norm", D);
            layer.ff = FeedForwardLayer::create(params, n + ".ff", D, cfg_.ff_dim, gelu, rng);
            encoder_.push_back(layer);
        }
        enc_norm_ = LayerNormLayer::create(params, "encoder.final_norm", D);
        dec_pos_ = params.add("decoder.positions", {P, D}, init::sinusoidal(P, D));
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            const std::string n = "decoder.layer" + std::to_string(l);
            DecoderLayer layer;
            layer.self_norm = LayerNormLayer::create(params, n + ".self_norm", D);
            layer.self_attn = AttentionLayer::create(params, n + ".self_attn", D, rng);
            layer.cross_norm = LayerNormLayer::create(params, n + ".cross_norm", D);
            layer.cross_attn = AttentionLayer::create(params, n + ".cross_attn", D, rng);
            layer.ff_norm = LayerNormLayer::create(params, n + ".ff_norm", D);
            layer.ff = FeedForwardLayer::create(params, n + ".ff", D, cfg_.ff_dim, gelu, rng);
            decoder_.push_back(layer);
        }
        dec_norm_ = LayerNormLayer::create(params, "decoder.final_norm", D);
        output_ = LinearLayer::create(params, "output.projection", D, V, rng);
    }

    const TransformerConfig& config() const { return cfg_; }

    Tensor embed(const PaddedBatch& b, const Tensor& positions, const ForwardContext& ctx) const {
        const Tensor tok = nn::scale(nn::embedding(embed_, b.ids), std::sqrt(static_cast<double>(cfg_.dim)));
        return ctx.drop(nn::add(tok, nn::embedding(positions, b.positions)));
    }

    // Encoder states [batch*len, dim].
    Tensor encode(const PaddedBatch& src, const ForwardContext& ctx) const {
        Tensor x = embed(src, enc_pos_, ctx);
        const nn::AttentionLayout layout{src.batch, src.len, src.len, cfg_.heads, src.valid, false};
        for (const auto& layer : encoder_) {
            const Tensor h = layer.attn_norm(x);
            x = nn::add(x, ctx.drop(layer.self_attn(h, h, layout)));
            x = nn::add(x, ctx.drop(layer.ff(layer.ff_norm(x))));
        }
        return enc_norm_(x);
    }

    // Final decoder hidden states [batch*len, dim].
    Tensor decode_hidden(const PaddedBatch& tgt, const Tensor& memory, const PaddedBatch& src,
                         const ForwardContext& ctx) const {
        Tensor x = embed(tgt, dec_pos_, ctx);
        const nn::AttentionLayout self_layout{tgt.batch, tgt.len, tgt.len, cfg_.heads, tgt.valid, causal_};
        const nn::AttentionLayout cross_layout{tgt.batch, tgt.len, src.len, cfg_.heads, src.valid, false};
        for (const auto& layer : decoder_) {
            const Tensor h = layer.self_norm(x);
            x = nn::add(x, ctx.drop(layer.self_attn(h, h, self_layout)));
            x = nn::add(x, ctx.drop(layer.cross_attn(layer.cross_norm(x), memory, cross_layout)));
            x = nn::add(x, ctx.drop(layer.ff(layer.ff_norm(x))));
        }
        return dec_norm_(x);
    }

    // Decoder pass without the autodiff tape: logits [batch*len, V] with the
    // blocked columns set to kBlockedLogit. Matches project(decode_hidden(..))
    // in evaluation mode up to rounding.
    RowMatrix infer_logits(const PaddedBatch& tgt, const Tensor& memory, const PaddedBatch& src,
                           std::span<const int> blocked) const {
        const auto D = static_cast<Eigen::Index>(cfg_.dim);
        const auto rows = static_cast<Eigen::Index>(tgt.batch * tgt.len);
        const double emb_scale = std::sqrt(static_cast<double>(cfg_.dim));
        RowMatrix x(rows, D);
        for (Eigen::Index r = 0; r < rows; ++r) {
            const double* e = embed_.data().data() + static_cast<std::size_t>(tgt.ids[static_cast<std::size_t>(r)]) * cfg_.dim;
            const double* p = dec_pos_.data().data() + static_cast<std::size_t>(tgt.positions[static_cast<std::size_t>(r)]) * cfg_.dim;
            for (Eigen::Index j = 0; j < D; ++j) x(r, j) = e[j] * emb_scale + p[j];
        }
        const RowMatrix mem = nn::ConstMatrixMap(memory.data().data(), memory.rows(), D);
        RowMatrix h, q, k, v, att, proj;
        for (const auto& layer : decoder_) {
            detail::layer_norm_rows(x, layer.self_norm, h);
            detail::apply_linear(h, layer.self_attn.query, q);
            detail::apply_linear(h, layer.self_attn.key, k);
            detail::apply_linear(h, layer.self_attn.value, v);
            detail::attention_rows(q, k, v, tgt.batch, tgt.len, tgt.len, cfg_.heads, tgt.valid, causal_, att);
            detail::apply_linear(att, layer.self_attn.output, proj);
            x += proj;
            detail::layer_norm_rows(x, layer.cross_norm, h);
            detail::apply_linear(h, layer.cross_attn.query, q);
            detail::apply_linear(mem, layer.cross_attn.key, k);
            detail::apply_linear(mem, layer.cross_attn.value, v);
            detail::attention_rows(q, k, v, tgt.batch, tgt.len, src.len, cfg_.heads, src.valid, false, att);
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
        detail::layer_norm_rows(x, dec_norm_, h);
        RowMatrix logits;
        detail::apply_linear(h, output_, logits);
        for (int id : blocked) logits.col(id).setConstant(nn::kBlockedLogit);
        return logits;
    }

    Tensor project(const Tensor& hidden, std::span<const int> blocked) const {
        return nn::block_columns(output_(hidden), blocked);
    }

    const Tensor& token_embedding() const { return embed_; }
    const Tensor& decoder_positions() const { return dec_pos_; }
    const std::vector<DecoderLayer>& decoder_layers() const { return decoder_; }
    const LayerNormLayer& decoder_norm() const { return dec_norm_; }
    const LinearLayer& output_layer() const { return output_; }
    bool causal() const { return causal_; }

private:
    TransformerConfig cfg_;
    bool causal_ = true;
    Tensor embed_, enc_pos_, dec_pos_;
    std::vector<EncoderLayer> encoder_;
    std::vector<DecoderLayer> decoder_;
    LayerNormLayer enc_norm_, dec_norm_;
    LinearLayer output_;
};

// Label-smoothed token loss: (1-eps) * CE + eps * mean over allowed ids of -log p.
// Returns the summed loss over non-PAD targets.
inline Tensor smoothed_token_loss(const Tensor& logits, std::span<const int> targets, double epsilon,
                                  std::span<const int> blocked) {
    const Tensor ce = nn::cross_entropy(logits, targets, data::kPad);
    if (epsilon <= 0.0) return ce;
    const std::size_t V = logits.cols();
    std::vector<char> is_blocked(V, 0);
    for (int b : blocked) is_blocked[static_cast<std::size_t>(b)] = 1;
    std::size_t allowed = 0;
    for (char c : is_blocked) allowed += c ? 0 : 1;
    std::vector<double> w(logits.size(), 0.0);
    for (std::size_t r = 0; r < targets.size(); ++r) {
        if (targets[r] == data::kPad) continue;
        for (std::size_t j = 0; j < V; ++j) {
            if (!is_blocked[j]) w[r * V + j] = -epsilon / static_cast<double>(allowed);
        }
    }
    return nn::add(nn::scale(ce, 1.0 - epsilon), nn::weighted_sum(nn::log_softmax(logits), w));
}

}  // namespace pivotnmt::model
