#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "a2fpn/tensor.hpp"

namespace a2fpn {

// Per-parameter Adam state. Moment arrays start at zero; the step counter
// increments by exactly one per update.
struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

// One bias-corrected Adam update of `param` along `grad`.
inline void adam_step(std::span<double> param, std::span<const double> grad, AdamState& state,
                      double lr) {
    if (param.size() != grad.size() || param.size() != state.m.size() ||
        param.size() != state.v.size())
        throw ShapeError("adam_step: parameter/gradient/moment sizes disagree");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        param[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
}

inline void adam_step(Tensor& param, AdamState& state, double lr) {
    adam_step(param.mutable_data(), param.grad(), state, lr);
}

struct NamedParam {
    std::string name;
    Tensor tensor;
};

// Adam over a fixed parameter list; states are created lazily on first step.
class Adam {
public:
    explicit Adam(double lr = 3e-4) : lr_(lr) {}

    void step(std::vector<NamedParam>& params) {
        if (states_.empty())
            for (const NamedParam& p : params) states_.emplace_back(p.tensor.numel());
        if (states_.size() != params.size())
            throw UsageError("Adam: parameter list changed between steps");
        for (std::size_t i = 0; i < params.size(); ++i)
            adam_step(params[i].tensor, states_[i], lr_);
    }

    double learning_rate() const { return lr_; }

private:
    double lr_;
    std::vector<AdamState> states_;
};

inline void zero_grads(std::vector<NamedParam>& params) {
    for (NamedParam& p : params) p.tensor.zero_grad();
}

}  // namespace a2fpn
