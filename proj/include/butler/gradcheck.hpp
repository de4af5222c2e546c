#pragma once

#include <functional>
#include <vector>

#include "butler/autograd.hpp"

namespace butler {

// Loss builders receive a fresh tape, register the parameters they need as
// leaves, and return a scalar var.
template <typename F>
using LossBuilder = std::function<Var<F>(Tape<F>&)>;

// Max over coordinates of |analytic − central| / (|central| + 1e-8),
// with analytic gradients supplied by the caller (one tensor per parameter,
// in the same order).
template <typename F>
double finite_diff_error(const LossBuilder<F>& f, const std::vector<Parameter<F>*>& params,
                         double eps, const std::vector<Tensor<F>>& analytic) {
    if (eps < 1e-5 || eps > 1e-2)
        throw ContractError("finite-difference step " + std::to_string(eps) +
                            " outside [1e-5, 1e-2]");
    auto eval = [&]() -> double {
        Tape<F> t;
        Var<F> out = f(t);
        double v = double(t.value(out).at(0));
        if (!std::isfinite(v)) throw EvalError("loss evaluated non-finite");
        return v;
    };
    double max_err = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter<F>& p = *params[pi];
        for (size_t i = 0; i < p.value.data.size(); ++i) {
            F saved = p.value.data[i];
            p.value.data[i] = saved + F(eps);
            double fp = eval();
            p.value.data[i] = saved - F(eps);
            double fm = eval();
            p.value.data[i] = saved;
            double central = (fp - fm) / (2.0 * eps);
            double err = std::abs(double(analytic[pi].data[i]) - central) /
                         (std::abs(central) + 1e-8);
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

// Runs the tape to get analytic gradients, then compares them against
// central differences coordinate by coordinate.
template <typename F>
double finite_diff_check(const LossBuilder<F>& f, const std::vector<Parameter<F>*>& params,
                         double eps) {
    for (Parameter<F>* p : params) p->zero_grad();
    {
        Tape<F> t;
        Var<F> out = f(t);
        if (t.value(out).numel() != 1) throw ContractError("gradient check needs a scalar loss");
        t.backward(out);
    }
    std::vector<Tensor<F>> analytic;
    analytic.reserve(params.size());
    for (Parameter<F>* p : params) analytic.push_back(p->grad);
    for (Parameter<F>* p : params) p->zero_grad();
    return finite_diff_error(f, params, eps, analytic);
}

}  // namespace butler
