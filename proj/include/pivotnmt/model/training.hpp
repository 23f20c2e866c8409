#pragma once

#include <chrono>
#include <functional>
#include <limits>
#include <nlohmann/json.hpp>
#include <vector>

#include "pivotnmt/data/corpus.hpp"
#include "pivotnmt/model/ar_model.hpp"
#include "pivotnmt/model/cmlm_model.hpp"
#include "pivotnmt/numerics/adam.hpp"

namespace pivotnmt::model {

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t max_tokens = 1024;  // padded tokens per batch
    double peak_lr = 1e-3;
    std::uint64_t warmup_steps = 400;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    std::uint64_t seed = 1;

    void validate() const {
        if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
        if (max_tokens == 0) throw ConfigError("train: max_tokens must be >= 1");
        if (!(peak_lr > 0.0)) throw ConfigError("train: learning rate must be > 0");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"epochs", c.epochs},  {"max_tokens", c.max_tokens}, {"peak_lr", c.peak_lr},
                       {"warmup_steps", c.warmup_steps}, {"beta1", c.beta1}, {"beta2", c.beta2},
                       {"eps", c.eps},        {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    const TrainConfig d;
    c.epochs = j.value("epochs", d.epochs);
    c.max_tokens = j.value("max_tokens", d.max_tokens);
    c.peak_lr = j.value("peak_lr", d.peak_lr);
    c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.eps = j.value("eps", d.eps);
    c.seed = j.value("seed", d.seed);
}

struct TrainEpoch {
    std::size_t epoch = 0;
    std::uint64_t steps = 0;  // cumulative optimizer steps
    double train_loss = 0.0;  // mean of per-batch token losses
    double dev_loss = 0.0;    // per-token CE on the dev pairs
    double wall_seconds = 0.0;
};

struct TrainReport {
    std::vector<TrainEpoch> epochs;
    std::size_t best_epoch = 0;
    double best_dev_loss = std::numeric_limits<double>::infinity();
};

inline nlohmann::json to_json(const TrainEpoch& e, bool with_timing = true) {
    nlohmann::json j{{"epoch", e.epoch}, {"steps", e.steps}, {"train_loss", e.train_loss}, {"dev_loss", e.dev_loss}};
    if (with_timing) j["wall_seconds"] = e.wall_seconds;
    return j;
}

// Per-token teacher-forced CE (no label smoothing) over `pairs`.
inline double ar_dev_loss(const ArModel& model, const std::vector<data::EncodedPair>& pairs, std::size_t max_tokens) {
    if (pairs.empty()) return 0.0;
    nn::NoGradGuard no_grad;
    double total = 0.0;
    std::size_t tokens = 0;
    for (const auto& idx : data::batch_by_tokens(pairs, max_tokens)) {
        std::vector<const data::EncodedPair*> batch;
        for (std::size_t i : idx) batch.push_back(&pairs[i]);
        const auto b = TeacherForcedBatch::from(batch, model.config().max_positions);
        total += nn::cross_entropy(model.logits(b.source, b.decoder_input, ForwardContext{}), b.targets, data::kPad)
                     .item();
        tokens += b.target_tokens;
    }
    return total / static_cast<double>(tokens);
}

// Fixed mask draws so that successive epochs are scored on the same masks.
inline double cmlm_dev_loss(const CmlmModel& model, const std::vector<data::EncodedPair>& pairs,
                            std::uint64_t mask_seed = 17) {
    if (pairs.empty()) return 0.0;
    nn::Rng rng(mask_seed);
    return masked_token_loss(model, pairs, rng);
}

namespace detail {

template <typename Model, typename StepFn, typename DevFn>
TrainReport train_loop(Model& model, const std::vector<data::EncodedPair>& train,
                       const std::vector<data::EncodedPair>& dev, const TrainConfig& cfg, StepFn step_fn,
                       DevFn dev_fn, const std::function<void(const TrainEpoch&)>& on_epoch) {
    cfg.validate();
    if (train.empty()) throw InputError("train: empty training corpus");
    nn::Rng rng(cfg.seed);
    nn::Optimizer opt(model.params().tensors(), nn::AdamHyper{cfg.peak_lr, cfg.beta1, cfg.beta2, cfg.eps});
    const nn::InverseSqrtSchedule schedule{cfg.peak_lr, cfg.warmup_steps};
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    TrainReport report;
    Model best = model.clone();
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        rng.shuffle(order);
        std::vector<std::size_t> lengths;
        lengths.reserve(order.size());
        for (std::size_t i : order) lengths.push_back(std::max(train[i].source.size(), train[i].target.size()));
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (const auto& positions : data::batch_by_tokens(lengths, cfg.max_tokens)) {
            std::vector<const data::EncodedPair*> batch;
            for (std::size_t p : positions) batch.push_back(&train[order[p]]);
            opt.set_lr(schedule.at(opt.steps() + 1));
            loss_sum += step_fn(model, batch, opt, rng, order[positions.front()]);
            ++batches;
        }
        TrainEpoch rec;
        rec.epoch = epoch;
        rec.steps = opt.steps();
        rec.train_loss = loss_sum / static_cast<double>(batches);
        rec.dev_loss = dev.empty() ? rec.train_loss : dev_fn(model);
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (rec.dev_loss < report.best_dev_loss) {
            report.best_dev_loss = rec.dev_loss;
            report.best_epoch = epoch;
            best.copy_parameters_from(model);
        }
        report.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    model.copy_parameters_from(best);
    return report;
}

}  // namespace detail

// Maximum-likelihood pre-training. The model ends holding the parameters of
// the epoch with the lowest dev loss.
inline TrainReport train_ar(ArModel& model, const std::vector<data::EncodedPair>& train,
                            const std::vector<data::EncodedPair>& dev, const TrainConfig& cfg,
                            const std::function<void(const TrainEpoch&)>& on_epoch = {}) {
    return detail::train_loop(
        model, train, dev, cfg,
        [](ArModel& m, const std::vector<const data::EncodedPair*>& b, nn::Optimizer& opt, nn::Rng& rng,
           std::size_t) { return train_step_mle(m, b, opt, rng); },
        [&](const ArModel& m) { return ar_dev_loss(m, dev, cfg.max_tokens); }, on_epoch);
}

// CMLM pre-training; selection uses the masked-token dev loss.
inline TrainReport train_cmlm(CmlmModel& model, const std::vector<data::EncodedPair>& train,
                              const std::vector<data::EncodedPair>& dev, const TrainConfig& cfg,
                              const std::function<void(const TrainEpoch&)>& on_epoch = {}) {
    // Checked up front: shuffled batches would otherwise report batch offsets.
    for (std::size_t i = 0; i < train.size(); ++i) {
        const std::size_t k = strip_eos(train[i].target).size();
        if (k == 0 || k > model.max_length()) {
            throw InputError("train_cmlm: sentence " + std::to_string(i) + " has pivot length " + std::to_string(k) +
                             " outside 1.." + std::to_string(model.max_length()));
        }
    }
    return detail::train_loop(
        model, train, dev, cfg,
        [](CmlmModel& m, const std::vector<const data::EncodedPair*>& b, nn::Optimizer& opt, nn::Rng& rng,
           std::size_t first) { return train_step_cmlm(m, b, opt, rng, first).token_loss; },
        [&](const CmlmModel& m) { return cmlm_dev_loss(m, dev); }, on_epoch);
}

}  // namespace pivotnmt::model
