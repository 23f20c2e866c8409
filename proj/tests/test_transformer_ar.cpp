#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "pivotnmt/model/ar_model.hpp"
#include "pivotnmt/numerics/adam.hpp"
#include "support.hpp"

namespace {

using namespace pivotnmt;
using model::ArModel;
using model::Hypothesis;
using data::EncodedPair;
using nn::Tensor;
using data::TokenIds;
using testing_support::micro_config;
using testing_support::random_sentence;

std::vector<const EncodedPair*> pointers(const std::vector<EncodedPair>& v) {
    std::vector<const EncodedPair*> out;
    for (const auto& p : v) out.push_back(&p);
    return out;
}

// Teacher-forced log-probability of `target` (EOS included or not) computed
// from the full parallel forward pass; an oracle independent of the
// incremental decoder.
double full_forward_score(const ArModel& m, const TokenIds& source, const TokenIds& target) {
    nn::NoGradGuard guard;
    TokenIds dec_in{data::kBos};
    dec_in.insert(dec_in.end(), target.begin(), target.end());
    const auto src = model::PaddedBatch::from(std::vector<TokenIds>{source}, m.config().max_positions);
    const auto dec = model::PaddedBatch::from(std::vector<TokenIds>{dec_in}, m.config().max_positions);
    const auto lp = nn::log_softmax(m.logits(src, dec, model::ForwardContext{}));
    const std::size_t V = m.config().vocab_size;
    double s = 0.0;
    for (std::size_t t = 0; t < target.size(); ++t) s += lp[t * V + static_cast<std::size_t>(target[t])];
    return s;
}

TEST(ArOverfit, ThirtyTwoSentencesReachLowLoss) {
    nn::Rng rng(7);
    std::vector<EncodedPair> corpus;
    for (int i = 0; i < 32; ++i) corpus.push_back({random_sentence(rng, 20, 3, 7), random_sentence(rng, 20, 3, 7)});
    ArModel m(micro_config(20, 2, 32, 4, 64, 8), 3);
    nn::Optimizer opt(m.params().tensors(), nn::AdamHyper{3e-3, 0.9, 0.98, 1e-9});
    double loss = 0.0;
    for (int step = 0; step < 200; ++step) loss = model::train_step_mle(m, pointers(corpus), opt, rng);
    EXPECT_LT(loss, 0.1);
}

TEST(ArTraining, CertainModelHasZeroLoss) {
    // BOS -> 7 -> 9 -> 8 -> EOS with probability one at every step.
    auto m = testing_support::make_transition_ar(10, {{data::kBos, 7}, {7, 9}, {9, 8}, {8, data::kEos}});
    std::vector<EncodedPair> batch{{{6, data::kEos}, {7, 9, 8, data::kEos}}};
    nn::Optimizer opt(m.params().tensors(), nn::AdamHyper{1e-4, 0.9, 0.98, 1e-9});
    nn::Rng rng(1);
    EXPECT_LT(model::train_step_mle(m, pointers(batch), opt, rng), 1e-12);
}

TEST(ArTraining, OutOfVocabularyIdIsConfigError) {
    ArModel m(micro_config(10), 1);
    std::vector<EncodedPair> batch{{{6, 12, data::kEos}, {7, data::kEos}}};
    nn::Optimizer opt(m.params().tensors(), nn::AdamHyper{});
    nn::Rng rng(1);
    EXPECT_THROW(model::train_step_mle(m, pointers(batch), opt, rng), ConfigError);
}

TEST(ArTraining, PaddingContributesNothing) {
    nn::Rng rng(11);
    ArModel m(micro_config(12, 2, 8, 2, 12, 10), 5);
    const EncodedPair a{random_sentence(rng, 12, 2, 2), random_sentence(rng, 12, 1, 1)};
    const EncodedPair b{random_sentence(rng, 12, 6, 6), random_sentence(rng, 12, 6, 6)};
    auto loss_of = [&](const std::vector<const EncodedPair*>& pairs) {
        const auto tf = model::TeacherForcedBatch::from(pairs, 10);
        return model::mle_loss(m, tf, model::ForwardContext{});
    };
    m.params().zero_grad();
    const Tensor joint = loss_of({&a, &b});
    nn::backward(joint);
    const auto joint_grads = m.params().tensors();
    std::vector<std::vector<double>> g_joint;
    for (const auto& t : joint_grads) g_joint.emplace_back(t.grad().begin(), t.grad().end());

    m.params().zero_grad();
    const Tensor la = loss_of({&a});
    nn::backward(la);
    std::vector<std::vector<double>> g_sum;
    for (const auto& t : m.params().tensors()) g_sum.emplace_back(t.grad().begin(), t.grad().end());
    m.params().zero_grad();
    const Tensor lb = loss_of({&b});
    nn::backward(lb);
    const auto ts = m.params().tensors();
    for (std::size_t i = 0; i < ts.size(); ++i) {
        for (std::size_t j = 0; j < g_sum[i].size(); ++j) g_sum[i][j] += ts[i].grad()[j];
    }
    EXPECT_NEAR(joint.item(), la.item() + lb.item(), 1e-10);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        for (std::size_t j = 0; j < g_sum[i].size(); ++j) ASSERT_NEAR(g_joint[i][j], g_sum[i][j], 1e-9);
    }

    // The PAD embedding row receives exactly zero gradient.
    m.params().zero_grad();
    nn::backward(loss_of({&a, &b}));
    const Tensor emb = testing_support::find_param(m.params(), "embed.tokens");
    for (std::size_t d = 0; d < 8; ++d) EXPECT_EQ(emb.grad()[static_cast<std::size_t>(data::kPad) * 8 + d], 0.0);
}

TEST(ArTraining, LossGradientMatchesFiniteDifferences) {
    nn::Rng rng(4);
    ArModel m(micro_config(11, 2, 8, 2, 12, 8), 9);
    const EncodedPair p{random_sentence(rng, 11, 3, 3), random_sentence(rng, 11, 2, 4)};
    const auto tf = model::TeacherForcedBatch::from({&p}, 8);
    auto res = testing_support::check_gradients([&] { return model::mle_loss(m, tf, model::ForwardContext{}); },
                                                m.params().tensors(), 1e-5, 12);
    EXPECT_LT(res.max_rel_error, 1e-5) << res.worst;
}

TEST(ArCausality, FutureTargetTokensDoNotAffectEarlierLogits) {
    nn::Rng rng(5);
    ArModel m(micro_config(14, 2, 8, 2, 12, 10), 2);
    nn::NoGradGuard guard;
    const TokenIds src = random_sentence(rng, 14, 4, 4);
    TokenIds dec{data::kBos, 6, 7, 8, 9, 10};
    const auto sb = model::PaddedBatch::from(std::vector<TokenIds>{src}, 10);
    const auto base = m.logits(sb, model::PaddedBatch::from(std::vector<TokenIds>{dec}, 10), model::ForwardContext{});
    const std::size_t V = 14;
    for (std::size_t i = 0; i + 1 < dec.size(); ++i) {
        TokenIds perturbed = dec;
        for (std::size_t j = i + 1; j < dec.size(); ++j) perturbed[j] = 13 - (perturbed[j] % 7);
        const auto out =
            m.logits(sb, model::PaddedBatch::from(std::vector<TokenIds>{perturbed}, 10), model::ForwardContext{});
        for (std::size_t r = 0; r <= i; ++r) {
            for (std::size_t v = 0; v < V; ++v) ASSERT_EQ(out[r * V + v], base[r * V + v]) << "row " << r;
        }
    }
}

TEST(ArCausality, PaddingInBatchDoesNotChangeLogits) {
    nn::Rng rng(6);
    ArModel m(micro_config(14, 2, 8, 2, 12, 10), 2);
    nn::NoGradGuard guard;
    const TokenIds s1 = random_sentence(rng, 14, 2, 2), s2 = random_sentence(rng, 14, 7, 7);
    const TokenIds d1{data::kBos, 7, 8}, d2{data::kBos, 6, 6, 6, 6, 6};
    const auto alone = m.logits(model::PaddedBatch::from(std::vector<TokenIds>{s1}, 10),
                                model::PaddedBatch::from(std::vector<TokenIds>{d1}, 10), model::ForwardContext{});
    const auto joint = m.logits(model::PaddedBatch::from(std::vector<TokenIds>{s1, s2}, 10),
                                model::PaddedBatch::from(std::vector<TokenIds>{d1, d2}, 10), model::ForwardContext{});
    const std::size_t V = 14;
    for (std::size_t t = 0; t < d1.size(); ++t) {
        for (std::size_t v = 0; v < V; ++v) EXPECT_NEAR(joint[t * V + v], alone[t * V + v], 1e-12);
    }
}

TEST(ArDecoderState, IncrementalStepsMatchFullForward) {
    nn::Rng rng(8);
    ArModel m(micro_config(13, 2, 8, 2, 12, 10), 4);
    const TokenIds s1 = random_sentence(rng, 13, 3, 5), s2 = random_sentence(rng, 13, 6, 8);
    const TokenIds t1{6, 9, 12, 7}, t2{11, 10, 6, 8};
    model::ArDecoderState state(m, {&s1, &s2}, 10);
    std::vector<int> inputs{data::kBos, data::kBos};
    const std::size_t V = 13;
    nn::NoGradGuard guard;
    auto full_lp = [&](const TokenIds& src, const TokenIds& tgt) {
        TokenIds dec{data::kBos};
        dec.insert(dec.end(), tgt.begin(), tgt.end());
        return nn::log_softmax(m.logits(model::PaddedBatch::from(std::vector<TokenIds>{src}, 10),
                                        model::PaddedBatch::from(std::vector<TokenIds>{dec}, 10),
                                        model::ForwardContext{}));
    };
    const auto f1 = full_lp(s1, t1), f2 = full_lp(s2, t2);
    for (std::size_t t = 0; t < t1.size(); ++t) {
        const auto lp = state.step(inputs);
        for (std::size_t v = 0; v < V; ++v) {
            EXPECT_NEAR(lp(0, static_cast<Eigen::Index>(v)), f1[t * V + v], 1e-10);
            EXPECT_NEAR(lp(1, static_cast<Eigen::Index>(v)), f2[t * V + v], 1e-10);
        }
        inputs = {t1[t], t2[t]};
    }
}

TEST(ArGreedy, FollowsHandBuiltLookupPath) {
    auto m = testing_support::make_transition_ar(10, {{data::kBos, 7}, {7, 9}, {9, 8}, {8, data::kEos}});
    const Hypothesis h = model::greedy_decode(m, {6, 6, data::kEos}, 8);
    EXPECT_EQ(h.tokens, (TokenIds{7, 9, 8}));
    EXPECT_TRUE(h.finished);
    EXPECT_EQ(h.decoder_passes, 4u);
    EXPECT_NEAR(h.score, 0.0, 1e-12);
}

TEST(ArGreedy, ImmediateEosGivesEmptyHypothesis) {
    auto m = testing_support::make_transition_ar(10, {{data::kBos, data::kEos}});
    const Hypothesis h = model::greedy_decode(m, {6, data::kEos}, 8);
    EXPECT_TRUE(h.tokens.empty());
    EXPECT_TRUE(h.finished);
    EXPECT_EQ(h.decoder_passes, 1u);
}

TEST(ArGreedy, MaxLenCapsOutput) {
    auto m = testing_support::make_transition_ar(10, {{data::kBos, 6}, {6, 7}, {7, 6}});
    const Hypothesis h = model::greedy_decode(m, {6, data::kEos}, 3);
    EXPECT_EQ(h.tokens, (TokenIds{6, 7, 6}));
    EXPECT_FALSE(h.finished);
    EXPECT_EQ(h.decoder_passes, 3u);
}

TEST(ArGreedy, NeverEmitsReservedIds) {
    nn::Rng rng(21);
    ArModel m(micro_config(12, 2, 8, 2, 12, 10), 6);
    for (int i = 0; i < 50; ++i) {
        const Hypothesis h = model::greedy_decode(m, random_sentence(rng, 12, 1, 8), 10);
        for (int t : h.tokens) EXPECT_GE(t, data::kNumReserved);
    }
}

TEST(ArBeam, BeamOneEqualsGreedy) {
    nn::Rng rng(31);
    ArModel m(micro_config(12, 2, 8, 2, 12, 10), 12);
    for (int i = 0; i < 100; ++i) {
        const TokenIds s = random_sentence(rng, 12, 1, 8);
        const Hypothesis g = model::greedy_decode(m, s, 10);
        const auto b = model::beam_decode(m, s, 1, 10);
        ASSERT_EQ(b.size(), 1u);
        EXPECT_EQ(b.front().tokens, g.tokens) << "input " << i;
        EXPECT_EQ(b.front().finished, g.finished);
        EXPECT_NEAR(b.front().score, g.score, 1e-9);
    }
}

struct Enumerated {
    TokenIds tokens;
    bool finished;
    double score;
};

// Every output the decoder can produce with payload ids {6,7} and max_len 3.
std::vector<Enumerated> enumerate_outputs(const ArModel& m, const TokenIds& src) {
    std::vector<Enumerated> out;
    std::vector<TokenIds> prefixes{{}};
    for (std::size_t len = 0; len <= 3; ++len) {
        std::vector<TokenIds> next;
        for (const auto& p : prefixes) {
            if (len < 3) {
                TokenIds fin = p;
                fin.push_back(data::kEos);
                out.push_back({p, true, full_forward_score(m, src, fin)});
            } else {
                out.push_back({p, false, full_forward_score(m, src, p)});
            }
            for (int t : {6, 7}) {
                TokenIds q = p;
                q.push_back(t);
                next.push_back(q);
            }
        }
        prefixes = std::move(next);
    }
    return out;
}

TEST(ArBeam, ExhaustiveBeamMatchesBruteForce) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        ArModel m(micro_config(8, 2, 8, 2, 12, 6), seed);
        for (const auto& [name, param] : m.params().entries()) {
            if (name.find("output.projection") != std::string::npos) {
                Tensor t = param;
                for (double& x : t.values()) x *= 4.0;
            }
        }
        const TokenIds src{6, 7, static_cast<int>(6 + seed % 2), data::kEos};
        const auto all = enumerate_outputs(m, src);
        ASSERT_EQ(all.size(), 15u);
        for (double lp : {1.0, 0.0}) {
            const auto beams = model::beam_decode(m, src, 27, 3, lp);
            ASSERT_FALSE(beams.empty());
            auto norm = [lp](const Enumerated& e) {
                const double len = static_cast<double>(e.tokens.size() + (e.finished ? 1 : 0));
                return e.score / std::pow(len, lp);
            };
            const auto best = *std::max_element(all.begin(), all.end(),
                                                [&](const auto& a, const auto& b) { return norm(a) < norm(b); });
            EXPECT_EQ(beams.front().tokens, best.tokens) << "seed " << seed << " lp " << lp;
            EXPECT_EQ(beams.front().finished, best.finished);
            EXPECT_NEAR(model::length_normalized(beams.front(), lp), norm(best), 1e-9);
            for (const auto& h : beams) {
                const auto it = std::find_if(all.begin(), all.end(), [&](const auto& e) {
                    return e.tokens == h.tokens && e.finished == h.finished;
                });
                ASSERT_NE(it, all.end());
                EXPECT_NEAR(h.score, it->score, 1e-9);
            }
        }
    }
}

TEST(ArBeam, ScoresAreNonIncreasing) {
    nn::Rng rng(41);
    ArModel m(micro_config(12, 2, 8, 2, 12, 10), 13);
    for (int i = 0; i < 20; ++i) {
        const auto beams = model::beam_decode(m, random_sentence(rng, 12, 2, 8), 4, 10);
        for (std::size_t k = 1; k < beams.size(); ++k) {
            EXPECT_GE(model::length_normalized(beams[k - 1], 1.0), model::length_normalized(beams[k], 1.0));
        }
    }
}

TEST(ArBeam, ZeroBeamIsConfigError) {
    ArModel m(micro_config(12), 1);
    EXPECT_THROW(model::beam_decode(m, {6, data::kEos}, 0, 5), ConfigError);
}

// All weights zero and output bias fixing p(6)=0.7, p(7)=0.3.
ArModel two_token_model() {
    ArModel m(micro_config(8, 1, 8, 1, 4, 4), 1);
    testing_support::make_transparent(m.params());
    Tensor bias = testing_support::find_param(m.params(), "output.projection.bias");
    bias.values()[data::kEos] = -1000.0;
    bias.values()[6] = std::log(0.7);
    bias.values()[7] = std::log(0.3);
    return m;
}

TEST(ArSampling, FirstTokenFrequencyMatchesModel) {
    const ArModel m = two_token_model();
    nn::Rng rng(2024);
    const TokenIds src{6, data::kEos};
    std::vector<const TokenIds*> batch(1000, &src);
    std::size_t sixes = 0, total = 0;
    for (int rep = 0; rep < 100; ++rep) {
        for (const auto& h : model::sample_autoregressive_batch(m, batch, 1, rng)) {
            ASSERT_EQ(h.tokens.size(), 1u);
            EXPECT_EQ(h.decoder_passes, 1u);
            sixes += h.tokens[0] == 6;
            ++total;
        }
    }
    EXPECT_NEAR(static_cast<double>(sixes) / static_cast<double>(total), 0.7, 0.005);
}

TEST(ArSampling, PassCountEqualsEmittedLength) {
    nn::Rng rng(51);
    ArModel m(micro_config(12, 2, 8, 2, 12, 10), 14);
    for (int i = 0; i < 200; ++i) {
        const Hypothesis h = model::sample_autoregressive(m, random_sentence(rng, 12, 1, 8), 10, rng);
        EXPECT_EQ(h.decoder_passes, h.tokens.size() + (h.finished ? 1 : 0));
        for (int t : h.tokens) EXPECT_GE(t, data::kNumReserved);
    }
}

TEST(ArSampling, DeterministicModelSamplesEqualGreedy) {
    auto m = testing_support::make_transition_ar(10, {{data::kBos, 7}, {7, 9}, {9, 8}, {8, data::kEos}});
    nn::Rng rng(3);
    const TokenIds src{6, data::kEos};
    const Hypothesis g = model::greedy_decode(m, src, 8);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(model::sample_autoregressive(m, src, 8, rng).tokens, g.tokens);
}

TEST(ArSampling, ScoreIsSequenceLogLikelihood) {
    nn::Rng rng(61);
    ArModel m(micro_config(12, 2, 8, 2, 12, 10), 15);
    for (int i = 0; i < 20; ++i) {
        const TokenIds src = random_sentence(rng, 12, 1, 6);
        const Hypothesis h = model::sample_autoregressive(m, src, 10, rng);
        if (!h.finished) continue;
        TokenIds tgt = h.tokens;
        tgt.push_back(data::kEos);
        EXPECT_NEAR(model::sequence_log_likelihood(m, {&src}, {&tgt}).front(), h.score, 1e-9);
    }
}

}  // namespace
