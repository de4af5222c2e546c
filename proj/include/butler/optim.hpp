#pragma once

#include <cmath>

#include "butler/autograd.hpp"

namespace butler {

// Adam with bias correction. One state per parameter; the step counter
// increases by exactly 1 per update and the grad is reset afterwards.
template <typename F>
struct AdamState {
    Tensor<F> m;
    Tensor<F> v;
    int64_t step = 0;
    F lr = F(3e-4);
    F beta1 = F(0.9);
    F beta2 = F(0.999);
    F eps = F(1e-8);

    explicit AdamState(const Parameter<F>& p, F lr_ = F(3e-4))
        : m(Tensor<F>::zeros(p.value.shape)), v(Tensor<F>::zeros(p.value.shape)), lr(lr_) {}
};

template <typename F>
void adam_step(Parameter<F>& p, AdamState<F>& s) {
    s.step += 1;
    const F bc1 = F(1) - std::pow(s.beta1, F(s.step));
    const F bc2 = F(1) - std::pow(s.beta2, F(s.step));
    for (size_t i = 0; i < p.value.data.size(); ++i) {
        F g = p.grad.data[i];
        s.m.data[i] = s.beta1 * s.m.data[i] + (F(1) - s.beta1) * g;
        s.v.data[i] = s.beta2 * s.v.data[i] + (F(1) - s.beta2) * g * g;
        F mhat = s.m.data[i] / bc1;
        F vhat = s.v.data[i] / bc2;
        p.value.data[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
    }
    p.zero_grad();
}

}  // namespace butler
