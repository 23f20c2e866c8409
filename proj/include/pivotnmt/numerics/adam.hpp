#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pivotnmt/numerics/tensor.hpp"

namespace pivotnmt::nn {

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
};

// Moment buffers and step counter for one parameter.
struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t step = 0;
    AdamHyper hyper;

    AdamState() = default;
    AdamState(std::size_t n, AdamHyper h) : m(n, 0.0), v(n, 0.0), hyper(h) {}
};

// One bias-corrected Adam update of `params` in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state) {
    if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size()) {
        throw DimensionError("adam_step: params " + std::to_string(params.size()) + ", grads " +
                             std::to_string(grads.size()) + ", state " + std::to_string(state.m.size()));
    }
    const AdamHyper& h = state.hyper;
    if (!(h.lr > 0.0)) throw ConfigError("adam_step: learning rate must be positive");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(h.beta1, t);
    const double bc2 = 1.0 - std::pow(h.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        params[i] -= h.lr * m_hat / (std::sqrt(v_hat) + h.eps);
    }
}

// How a parameter list is moved along its gradient.
enum class UpdateRule { Adam, PlainDescent };

// Owns per-parameter state for a fixed list of parameter tensors.
// Always descends the accumulated grads; callers that ascend negate their objective.
class Optimizer {
public:
    Optimizer(std::vector<Tensor> params, AdamHyper hyper, UpdateRule rule = UpdateRule::Adam)
        : params_(std::move(params)), hyper_(hyper), rule_(rule) {
        for (const Tensor& p : params_) states_.emplace_back(p.size(), hyper_);
    }

    void set_lr(double lr) {
        hyper_.lr = lr;
        for (auto& s : states_) s.hyper.lr = lr;
    }
    double lr() const { return hyper_.lr; }
    UpdateRule rule() const { return rule_; }

    void zero_grad() {
        for (Tensor& p : params_) p.zero_grad();
    }

    void step() {
        ++steps_;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            std::span<double> grad = p.grad();
            if (rule_ == UpdateRule::Adam) {
                adam_step(p.values(), grad, states_[i]);
            } else {
                auto values = p.values();
                for (std::size_t j = 0; j < values.size(); ++j) values[j] -= hyper_.lr * grad[j];
            }
        }
    }

    std::uint64_t steps() const { return steps_; }
    const std::vector<AdamState>& states() const { return states_; }
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    std::vector<AdamState> states_;
    AdamHyper hyper_;
    UpdateRule rule_;
    std::uint64_t steps_ = 0;
};

// Linear warmup followed by inverse-square-root decay.
struct InverseSqrtSchedule {
    double peak_lr = 1e-3;
    std::uint64_t warmup_steps = 1000;

    double at(std::uint64_t step) const {
        const double s = static_cast<double>(std::max<std::uint64_t>(step, 1));
        const double w = static_cast<double>(std::max<std::uint64_t>(warmup_steps, 1));
        return peak_lr * std::min(s / w, std::sqrt(w / s));
    }
};

}  // namespace pivotnmt::nn
