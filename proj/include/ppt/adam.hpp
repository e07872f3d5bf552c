#pragma once

#include <cmath>

#include "ppt/tensor.hpp"

namespace ppt {

struct AdamHyper {
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct OptState {
    int64_t step_count = 0;
    NamedTensors first_moment;
    NamedTensors second_moment;
    AdamHyper hyper;

    static OptState init(const ParamStore& params, AdamHyper hyper = {}) {
        OptState s;
        s.hyper = hyper;
        for (const auto& [name, t] : params) {
            s.first_moment.add(name, Tensor(t.shape, 0.0));
            s.second_moment.add(name, Tensor(t.shape, 0.0));
        }
        return s;
    }
};

// Standard Adam with bias correction, in place.
inline void adam_step(ParamStore& params, const GradStore& grads, OptState& state) {
    check_mirrors(grads, params, "adam_step grads");
    check_mirrors(state.first_moment, params, "adam_step moments");
    check(state.step_count >= 0, "adam_step: negative step count");

    const AdamHyper& h = state.hyper;
    const int64_t t = ++state.step_count;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));

    auto gi = grads.begin();
    auto mi = state.first_moment.begin();
    auto vi = state.second_moment.begin();
    for (auto& [name, p] : params) {
        auto g = gi->second.arr();
        auto m = mi->second.arr();
        auto v = vi->second.arr();
        m = h.beta1 * m + (1.0 - h.beta1) * g;
        v = h.beta2 * v + (1.0 - h.beta2) * g.square();
        p.arr() -= h.learning_rate * (m / bc1) / ((v / bc2).sqrt() + h.epsilon);
        ++gi, ++mi, ++vi;
    }
    params.check_finite("adam_step: updated parameters");
}

}  // namespace ppt
