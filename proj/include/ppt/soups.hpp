#pragma once

#include <cmath>
#include <vector>

#include "ppt/model.hpp"

namespace ppt {

// Elementwise convex combination into an existing mirror of the base models.
// A one-hot weight vector short-circuits to an exact copy of that base model.
inline void interpolate_into(ParamStore& dst, const std::vector<ParamStore>& models,
                             const std::vector<double>& weights) {
    check(!models.empty(), "interpolate: no models");
    check(weights.size() == models.size(), "interpolate: one weight per model");
    double total = 0.0;
    int hot = -1;
    for (size_t i = 0; i < weights.size(); ++i) {
        check(weights[i] >= 0.0, "interpolate: weights must be >= 0");
        if (weights[i] == 1.0) hot = static_cast<int>(i);
        total += weights[i];
    }
    check(std::abs(total - 1.0) <= 1e-9, "interpolate: weights must sum to 1");
    for (size_t m = 1; m < models.size(); ++m)
        check_mirrors(models[m], models[0], "interpolate models");
    check_mirrors(dst, models[0], "interpolate destination");

    if (hot >= 0) {
        auto src = models[static_cast<size_t>(hot)].begin();
        for (auto& [name, t] : dst) {
            t.data = src->second.data;
            ++src;
        }
        return;
    }
    std::vector<decltype(models[0].begin())> its;
    for (const auto& m : models) its.push_back(m.begin());
    for (auto& [name, t] : dst) {
        auto acc = t.arr();
        acc = weights[0] * its[0]->second.arr();
        for (size_t m = 1; m < models.size(); ++m) acc += weights[m] * its[m]->second.arr();
        for (auto& it : its) ++it;
    }
}

inline ParamStore interpolate(const std::vector<ParamStore>& models,
                              const std::vector<double>& weights) {
    check(!models.empty(), "interpolate: no models");
    ParamStore dst;
    for (const auto& [name, t] : models[0]) dst.add(name, Tensor(t.shape, 0.0));
    interpolate_into(dst, models, weights);
    return dst;
}

// The interpolated family is represented by its base models plus weight
// vectors; members are materialized one at a time on demand (the full family
// would not fit in memory at the default model size).
struct SoupEnsemble {
    ModelConfig model_cfg;
    std::vector<ParamStore> base_models;
    std::vector<std::vector<double>> weight_vectors;

    int size() const { return static_cast<int>(weight_vectors.size()); }

    ParamStore scratch() const {
        ParamStore s;
        for (const auto& [name, t] : base_models.at(0)) s.add(name, Tensor(t.shape, 0.0));
        return s;
    }

    void materialize_into(int i, ParamStore& dst) const {
        check(i >= 0 && i < size(), "ensemble: model index out of range");
        interpolate_into(dst, base_models, weight_vectors[static_cast<size_t>(i)]);
    }

    ParamStore materialize(int i) const {
        ParamStore dst = scratch();
        materialize_into(i, dst);
        return dst;
    }
};

// The K simplex vertices first (so every pure group has an exact in-ensemble
// match), then M-K uniform draws from the simplex.
inline SoupEnsemble build_ensemble(Rng& rng, const ModelConfig& model_cfg,
                                   std::vector<ParamStore> base_models, int M) {
    const int K = static_cast<int>(base_models.size());
    check(K >= 1, "build_ensemble: no base models");
    check(M >= K, "build_ensemble: M must be >= number of base models");
    for (int m = 1; m < K; ++m)
        check_mirrors(base_models[static_cast<size_t>(m)], base_models[0], "ensemble models");

    SoupEnsemble e;
    e.model_cfg = model_cfg;
    e.base_models = std::move(base_models);
    for (int g = 0; g < K; ++g) {
        std::vector<double> w(static_cast<size_t>(K), 0.0);
        w[static_cast<size_t>(g)] = 1.0;
        e.weight_vectors.push_back(std::move(w));
    }
    for (int i = K; i < M; ++i) e.weight_vectors.push_back(rng.dirichlet_uniform(K));
    return e;
}

struct SelectionState {
    std::vector<double> cumulative_scores;
    int best_index = 0;

    void validate() const {
        check(!cumulative_scores.empty(), "selection: no scores");
        check(best_index >= 0 && best_index < static_cast<int>(cumulative_scores.size()),
              "selection: best_index out of range");
        for (double s : cumulative_scores) check(std::isfinite(s), "selection: non-finite score");
    }
};

// Scores start at zero and the incumbent best model is a uniform random pick.
inline SelectionState init_selection(Rng& rng, int M) {
    check(M >= 1, "init_selection: M must be >= 1");
    SelectionState s;
    s.cumulative_scores.assign(static_cast<size_t>(M), 0.0);
    s.best_index = static_cast<int>(rng.below(static_cast<uint64_t>(M)));
    return s;
}

inline double log_prob_empty_history(const ParamStore& params, const ModelConfig& cfg,
                                     const Context& x, int action) {
    check(action >= 0 && action < cfg.num_actions, "log_prob: action out of range");
    Tape tape(false);
    ParamRefs refs = bind_params(tape, params);
    Tape::Ref logp = tape.log_softmax_rows(
        policy_logits(tape, refs, cfg, encode_sequence(cfg, {x}, {}), {{0, 1}}));
    return tape.value(logp).at(0, action);
}

// Highest cumulative score wins; ties go to the lowest index.
inline int select_best(const std::vector<double>& scores) {
    check(!scores.empty(), "select_best: empty score vector");
    int best = 0;
    for (int i = 1; i < static_cast<int>(scores.size()); ++i)
        if (scores[static_cast<size_t>(i)] > scores[static_cast<size_t>(best)]) best = i;
    return best;
}

// Adds each member's log-probability of the observed winner (empty history)
// to its cumulative score, then re-selects the best member.
inline SelectionState ps_select_step(const SelectionState& state, const SoupEnsemble& ensemble,
                                     const Context& x_val, int winner) {
    state.validate();
    check(static_cast<int>(state.cumulative_scores.size()) == ensemble.size(),
          "ps_select_step: state/ensemble size mismatch");
    SelectionState next = state;
    ParamStore scratch = ensemble.scratch();
    for (int i = 0; i < ensemble.size(); ++i) {
        ensemble.materialize_into(i, scratch);
        next.cumulative_scores[static_cast<size_t>(i)] +=
            log_prob_empty_history(scratch, ensemble.model_cfg, x_val, winner);
    }
    next.best_index = select_best(next.cumulative_scores);
    next.validate();
    return next;
}

}  // namespace ppt
