#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>

#include "ppt/tape.hpp"

namespace ppt {

// Evaluates the loss at fixed parameter values without building gradients.
inline double loss_value(const ParamStore& params,
                         const std::function<Tape::Ref(Tape&, const ParamRefs&)>& build_loss) {
    Tape tape(false);
    ParamRefs refs = bind_params(tape, params);
    Tape::Ref loss = build_loss(tape, refs);
    check(tape.value(loss).numel() == 1, "loss_value: loss must be scalar");
    return tape.value(loss).data[0];
}

struct GradcheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Central-difference check of every gradient entry against the tape.
// Relative error uses max(|analytic|, |numeric|, floor) as the denominator.
inline GradcheckResult gradcheck(const ParamStore& params,
                                 const std::function<Tape::Ref(Tape&, const ParamRefs&)>& build_loss,
                                 double step = 1e-6, double floor = 1e-3) {
    auto [value, grads] = value_and_grad(params, build_loss);
    (void)value;
    ParamStore probe = params;
    GradcheckResult res;
    for (auto& [name, t] : probe) {
        const Tensor& g = grads.at(name);
        for (size_t i = 0; i < t.data.size(); ++i) {
            const double saved = t.data[i];
            t.data[i] = saved + step;
            const double up = loss_value(probe, build_loss);
            t.data[i] = saved - step;
            const double down = loss_value(probe, build_loss);
            t.data[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double analytic = g.data[i];
            const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
            const double rel = std::fabs(analytic - numeric) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = name;
                res.worst_index = i;
                res.analytic = analytic;
                res.numeric = numeric;
            }
        }
    }
    return res;
}

}  // namespace ppt
