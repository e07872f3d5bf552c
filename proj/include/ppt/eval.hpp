#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "ppt/datagen.hpp"
#include "ppt/model.hpp"
#include "ppt/soups.hpp"

namespace ppt {

struct TurnRecord {
    std::string method;
    std::string user;
    int seed = 0;
    int turn = 0;
    double reward = 0.0;
    double accuracy = 0.0;
};

using CurveTable = std::vector<TurnRecord>;

// Batched distribution provider: one distribution per query context.
using PolicyBatchFn =
    std::function<std::vector<std::vector<double>>(const std::vector<Context>&)>;

struct Metrics {
    double mean_expected_reward = 0.0;
    double accuracy = 0.0;
};

inline int argmax_lowest(const std::vector<double>& v) {
    int best = 0;
    for (size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[static_cast<size_t>(best)]) best = static_cast<int>(i);
    return best;
}

// Mean expected noiseless reward of the policy and the frequency with which
// its argmax action equals the user's best table action. Ties break to the
// lowest action index on both sides.
inline Metrics metrics(const PolicyBatchFn& policy, const EnvSpec& spec, const UserProfile& user,
                       const std::vector<Context>& test) {
    check(!test.empty(), "metrics: no test contexts");
    const int best_action = user.best_action(spec.reward_table);
    const auto dists = policy(test);
    check(dists.size() == test.size(), "metrics: one distribution per context required");
    Metrics m;
    for (size_t i = 0; i < test.size(); ++i) {
        const auto& p = dists[i];
        check(static_cast<int>(p.size()) == spec.num_actions, "metrics: distribution size mismatch");
        double expected = 0.0;
        for (int a = 0; a < spec.num_actions; ++a)
            expected += p[static_cast<size_t>(a)] * spec.reward(user, a, test[i], 0.0);
        m.mean_expected_reward += expected;
        if (argmax_lowest(p) == best_action) m.accuracy += 1.0;
    }
    m.mean_expected_reward /= static_cast<double>(test.size());
    m.accuracy /= static_cast<double>(test.size());
    return m;
}

// Test and validation contexts drawn without replacement from the offline
// contexts; the two sets are disjoint and shared by both methods.
inline std::pair<std::vector<Context>, std::vector<Context>> pick_eval_contexts(
    Rng& rng, const OfflineDataset& dataset, int L, int turns) {
    check(L >= 1 && turns >= 1, "pick_eval_contexts: L and turns must be >= 1");
    const std::vector<Context> all = dataset.all_contexts();
    check(static_cast<int>(all.size()) >= L + turns,
          cat("pick_eval_contexts: need ", L + turns, " contexts, dataset has ", all.size()));
    std::vector<int> idx(all.size());
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    std::vector<Context> test, val;
    for (int i = 0; i < L; ++i) test.push_back(all[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
    for (int i = 0; i < turns; ++i)
        val.push_back(all[static_cast<size_t>(idx[static_cast<size_t>(L + i)])]);
    return {std::move(test), std::move(val)};
}

namespace detail {

// two distinct actions: first by a categorical draw, second from the
// renormalized remainder
inline std::pair<int, int> draw_distinct_pair(Rng& rng, const std::vector<double>& dist) {
    const int a1 = rng.categorical(dist);
    std::vector<double> rest = dist;
    rest[static_cast<size_t>(a1)] = 0.0;
    double total = 0.0;
    for (double p : rest) total += p;
    check(total > 0.0, "draw_distinct_pair: degenerate distribution");
    for (double& p : rest) p /= total;
    const int a2 = rng.categorical(rest);
    return {a1, a2};
}

}  // namespace detail

// Online in-context personalization: each turn first records the policy's
// metrics on the test contexts given the current history, then interacts on
// the turn's validation context (two sampled responses, user feedback) and
// appends the outcome to the history.
inline CurveTable eval_ppt_online(Rng& rng, const ParamStore& params, const ModelConfig& cfg,
                                  const EnvSpec& spec, const UserProfile& user,
                                  const std::string& user_label, int seed,
                                  const std::vector<Context>& test,
                                  const std::vector<Context>& val,
                                  std::vector<PreferenceTriple>* history_out = nullptr) {
    check(!val.empty(), "eval_ppt_online: no validation contexts");
    check(static_cast<int>(val.size()) <= cfg.max_positions - 1,
          "eval_ppt_online: more turns than the model can condition on");
    CurveTable table;
    std::vector<PreferenceTriple> history;
    for (int t = 1; t <= static_cast<int>(val.size()); ++t) {
        Metrics m = metrics([&](const std::vector<Context>& q) { return policy_batch(params, cfg, history, q); },
                            spec, user, test);
        table.push_back({"ppt", user_label, seed, t, m.mean_expected_reward, m.accuracy});

        const Context& x = val[static_cast<size_t>(t - 1)];
        auto [a1, a2] = detail::draw_distinct_pair(rng, policy_at(params, cfg, history, x));
        auto [w, l] = spec.sample_preference(rng, user, a1, a2, x);
        history.push_back({x, w, l});
    }
    if (history_out != nullptr) *history_out = std::move(history);
    return table;
}

struct PsSelectionTrace {
    std::string user;
    int seed = 0;
    struct Entry {
        int turn = 0;
        int winner = 0;
        int best_index = 0;
        double best_score = 0.0;
    };
    std::vector<Entry> entries;
    std::vector<double> final_scores;
};

// Online best-soup selection: each turn records the incumbent best model's
// metrics, then draws a uniform distinct response pair on the turn's
// validation context, gets the user's ranking, and re-scores the ensemble by
// the winner's log-probability.
inline CurveTable eval_ps_online(Rng& rng, const SoupEnsemble& ensemble, const EnvSpec& spec,
                                 const UserProfile& user, const std::string& user_label, int seed,
                                 const std::vector<Context>& test, const std::vector<Context>& val,
                                 PsSelectionTrace* trace_out = nullptr) {
    check(!val.empty(), "eval_ps_online: no validation contexts");
    CurveTable table;
    SelectionState state = init_selection(rng, ensemble.size());
    ParamStore current = ensemble.materialize(state.best_index);
    const std::vector<double> uniform(static_cast<size_t>(ensemble.model_cfg.num_actions),
                                      1.0 / ensemble.model_cfg.num_actions);
    PsSelectionTrace trace;
    trace.user = user_label;
    trace.seed = seed;
    for (int t = 1; t <= static_cast<int>(val.size()); ++t) {
        Metrics m = metrics(
            [&](const std::vector<Context>& q) { return policy_batch(current, ensemble.model_cfg, {}, q); },
            spec, user, test);
        table.push_back({"ps", user_label, seed, t, m.mean_expected_reward, m.accuracy});

        const Context& x = val[static_cast<size_t>(t - 1)];
        auto [a1, a2] = detail::draw_distinct_pair(rng, uniform);
        auto [w, l] = spec.sample_preference(rng, user, a1, a2, x);
        state = ps_select_step(state, ensemble, x, w);
        ensemble.materialize_into(state.best_index, current);
        trace.entries.push_back(
            {t, w, state.best_index, state.cumulative_scores[static_cast<size_t>(state.best_index)]});
    }
    trace.final_scores = state.cumulative_scores;
    if (trace_out) *trace_out = std::move(trace);
    return table;
}

// ---- CSV and summaries ----

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

inline void write_csv(const CurveTable& table, const std::filesystem::path& path) {
    check(!table.empty(), "write_csv: empty table");
    std::ofstream out(path, std::ios::trunc);
    check(out.good(), "cannot open csv for writing: " + path.string());
    out << "method,user,seed,turn,reward,accuracy\n";
    for (const auto& r : table)
        out << r.method << ',' << r.user << ',' << r.seed << ',' << r.turn << ','
            << detail::fmt_double(r.reward) << ',' << detail::fmt_double(r.accuracy) << "\n";
    out.close();
    check(out.good(), "csv write failed: " + path.string());
}

inline CurveTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    check(in.good(), "cannot open csv: " + path.string());
    std::string line;
    check(static_cast<bool>(std::getline(in, line)), "csv is empty: " + path.string());
    check(line == "method,user,seed,turn,reward,accuracy",
          "unexpected csv header in " + path.string());
    CurveTable table;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        size_t start = 0;
        while (true) {
            size_t comma = line.find(',', start);
            fields.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        check(fields.size() == 6, cat(path.string(), ":", lineno, ": expected 6 csv fields"));
        TurnRecord r;
        r.method = fields[0];
        r.user = fields[1];
        try {
            r.seed = std::stoi(fields[2]);
            r.turn = std::stoi(fields[3]);
            r.reward = std::stod(fields[4]);
            r.accuracy = std::stod(fields[5]);
        } catch (const std::exception&) {
            throw check_error(cat(path.string(), ":", lineno, ": malformed csv number"));
        }
        table.push_back(std::move(r));
    }
    check(!table.empty(), "csv has no records: " + path.string());
    return table;
}

struct SummaryRow {
    std::string method;
    std::string user;
    int turn = 0;
    int n = 0;
    double reward_mean = 0.0;
    double reward_stderr = 0.0;
    double accuracy_mean = 0.0;
    double accuracy_stderr = 0.0;
};

// Aggregates across seeds per (method, user, turn), in first-appearance
// order. stderr is the sample standard deviation over seeds divided by
// sqrt(n); zero when n = 1.
inline std::vector<SummaryRow> summarize(const CurveTable& table) {
    check(!table.empty(), "summarize: empty table");
    std::vector<SummaryRow> rows;
    std::vector<std::vector<std::pair<double, double>>> samples;
    auto find_row = [&](const TurnRecord& r) -> size_t {
        for (size_t i = 0; i < rows.size(); ++i)
            if (rows[i].method == r.method && rows[i].user == r.user && rows[i].turn == r.turn)
                return i;
        rows.push_back({r.method, r.user, r.turn, 0, 0.0, 0.0, 0.0, 0.0});
        samples.emplace_back();
        return rows.size() - 1;
    };
    for (const auto& r : table) samples[find_row(r)].push_back({r.reward, r.accuracy});

    for (size_t i = 0; i < rows.size(); ++i) {
        const auto& s = samples[i];
        const auto n = static_cast<double>(s.size());
        rows[i].n = static_cast<int>(s.size());
        for (const auto& [rw, ac] : s) {
            rows[i].reward_mean += rw / n;
            rows[i].accuracy_mean += ac / n;
        }
        if (s.size() > 1) {
            double vr = 0.0, va = 0.0;
            for (const auto& [rw, ac] : s) {
                vr += (rw - rows[i].reward_mean) * (rw - rows[i].reward_mean);
                va += (ac - rows[i].accuracy_mean) * (ac - rows[i].accuracy_mean);
            }
            rows[i].reward_stderr = std::sqrt(vr / (n - 1.0)) / std::sqrt(n);
            rows[i].accuracy_stderr = std::sqrt(va / (n - 1.0)) / std::sqrt(n);
        }
    }
    return rows;
}

}  // namespace ppt
