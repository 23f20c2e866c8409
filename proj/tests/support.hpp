#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "pivotnmt/model/ar_model.hpp"
#include "pivotnmt/model/cmlm_model.hpp"
#include "pivotnmt/numerics/ops.hpp"
#include "pivotnmt/numerics/rng.hpp"

namespace testing_support {

using pivotnmt::nn::Tensor;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    std::string worst;
};

// |a - n| / max(|a|, |n|, floor): the floor keeps coordinates whose true
// gradient is ~0 from dividing finite-difference noise by ~0.
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares backward() against central differences for every coordinate of
// every leaf (or `max_coords` evenly spaced coordinates per leaf when set).
inline GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn, std::vector<Tensor> leaves,
                                       double h = 1e-5, std::size_t max_coords = 0) {
    for (auto& l : leaves) l.zero_grad();
    pivotnmt::nn::backward(loss_fn());
    GradCheckResult res;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor& leaf = leaves[li];
        const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
        const std::size_t n = leaf.size();
        const std::size_t stride = (max_coords == 0 || max_coords >= n) ? 1 : n / max_coords;
        for (std::size_t i = 0; i < n; i += stride) {
            const double orig = leaf.values()[i];
            double fp, fm;
            {
                pivotnmt::nn::NoGradGuard ng;
                leaf.values()[i] = orig + h;
                fp = loss_fn().item();
                leaf.values()[i] = orig - h;
                fm = loss_fn().item();
            }
            leaf.values()[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double e = relative_error(analytic[i], numeric);
            ++res.coordinates;
            if (e > res.max_rel_error) {
                res.max_rel_error = e;
                res.worst = "leaf " + std::to_string(li) + " coord " + std::to_string(i) + ": analytic " +
                            std::to_string(analytic[i]) + " numeric " + std::to_string(numeric);
            }
        }
    }
    return res;
}

inline std::vector<double> random_values(pivotnmt::nn::Rng& rng, std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal() * scale;
    return v;
}

inline Tensor random_leaf(pivotnmt::nn::Rng& rng, pivotnmt::nn::Shape shape, double scale = 1.0) {
    const std::size_t n = pivotnmt::nn::shape_numel(shape);
    return Tensor::parameter(std::move(shape), random_values(rng, n, scale));
}

// Tiny dropout-free transformer configuration for property tests.
inline pivotnmt::model::TransformerConfig micro_config(std::size_t vocab, std::size_t layers = 2, std::size_t dim = 8,
                                                       std::size_t heads = 2, std::size_t ff = 12,
                                                       std::size_t max_positions = 8, std::size_t max_target = 4) {
    pivotnmt::model::TransformerConfig c;
    c.vocab_size = vocab;
    c.layers = layers;
    c.dim = dim;
    c.heads = heads;
    c.ff_dim = ff;
    c.max_positions = max_positions;
    c.dropout = 0.0;
    c.max_target_length = max_target;
    return c;
}

inline Tensor find_param(const pivotnmt::model::ParameterList& params, const std::string& name) {
    for (const auto& [n, t] : params.entries()) {
        if (n == name) return t;
    }
    throw std::out_of_range("no parameter " + name);
}

inline void fill(Tensor t, double v) {
    for (double& x : t.values()) x = v;
}

inline std::vector<std::vector<double>> snapshot(const pivotnmt::model::ParameterList& params) {
    std::vector<std::vector<double>> out;
    for (const auto& [n, t] : params.entries()) out.emplace_back(t.data().begin(), t.data().end());
    return out;
}

// Zeroes every parameter, then sets layer-norm gains to 1: the network then
// passes embeddings straight through its residual stream.
inline void make_transparent(pivotnmt::model::ParameterList& params) {
    for (const auto& [name, t] : params.entries()) {
        const bool gain = name.size() > 5 && name.compare(name.size() - 5, 5, ".gain") == 0;
        fill(t, gain ? 1.0 : 0.0);
    }
}

// Autoregressive model whose next token is a fixed function of the previous
// one: next[prev] for every listed prev (BOS included). `sharpness` scales
// the winning margin; 100 makes the distribution one-hot in double precision.
inline pivotnmt::model::ArModel make_transition_ar(std::size_t vocab, const std::map<int, int>& next,
                                                   double sharpness = 100.0) {
    auto cfg = micro_config(vocab, 1, vocab, 1, 4, 8);
    pivotnmt::model::ArModel m(cfg, 1);
    make_transparent(m.params());
    const std::size_t D = vocab;
    Tensor emb = find_param(m.params(), "embed.tokens");
    for (std::size_t t = 0; t < vocab; ++t) emb.values()[t * D + t] = 1.0;
    Tensor w = find_param(m.params(), "output.projection.weight");
    for (const auto& [prev, nxt] : next) {
        for (std::size_t d = 0; d < D; ++d) {
            const double centred = (d == static_cast<std::size_t>(prev) ? 1.0 : 0.0) - 1.0 / static_cast<double>(D);
            w.values()[d * vocab + static_cast<std::size_t>(nxt)] += sharpness * centred;
        }
    }
    return m;
}

// Autoregressive copy model: position p of the output is the source token at
// position p, so the decoded hypothesis is the source payload. Built from one
// cross-attention head that matches decoder and encoder positions.
inline pivotnmt::model::ArModel make_identity_ar(std::size_t vocab, std::size_t positions = 8) {
    const std::size_t D = vocab + positions;
    auto cfg = micro_config(vocab, 1, D, 1, 4, positions);
    pivotnmt::model::ArModel m(cfg, 1);
    auto& params = m.params();
    make_transparent(params);
    const double a = std::sqrt(static_cast<double>(D));
    Tensor emb = find_param(params, "embed.tokens");
    for (std::size_t t = 0; t < vocab; ++t) emb.values()[t * D + t] = 1.0;
    for (const char* name : {"encoder.positions", "decoder.positions"}) {
        Tensor pos = find_param(params, name);
        for (std::size_t p = 0; p < positions; ++p) pos.values()[p * D + vocab + p] = a;
    }
    Tensor wq = find_param(params, "decoder.layer0.cross_attn.query.weight");
    Tensor wk = find_param(params, "decoder.layer0.cross_attn.key.weight");
    Tensor wv = find_param(params, "decoder.layer0.cross_attn.value.weight");
    Tensor wo = find_param(params, "decoder.layer0.cross_attn.output.weight");
    for (std::size_t d = vocab; d < D; ++d) {
        wq.values()[d * D + d] = 20.0;
        wk.values()[d * D + d] = 1.0;
    }
    for (std::size_t d = 0; d < vocab; ++d) {
        wv.values()[d * D + d] = 1.0;
        wo.values()[d * D + d] = 10.0;
    }
    Tensor out = find_param(params, "output.projection.weight");
    for (std::size_t d = 0; d < vocab; ++d) out.values()[d * vocab + d] = 40.0;
    return m;
}

// Random id sequence over the non-reserved ids, EOS-terminated.
inline pivotnmt::data::TokenIds random_sentence(pivotnmt::nn::Rng& rng, std::size_t vocab, std::size_t min_len,
                                                std::size_t max_len) {
    const std::size_t len = min_len + rng.uniform_int(max_len - min_len + 1);
    pivotnmt::data::TokenIds s;
    for (std::size_t i = 0; i < len; ++i) {
        s.push_back(pivotnmt::data::kNumReserved +
                    static_cast<int>(rng.uniform_int(vocab - pivotnmt::data::kNumReserved)));
    }
    s.push_back(pivotnmt::data::kEos);
    return s;
}

}  // namespace testing_support
