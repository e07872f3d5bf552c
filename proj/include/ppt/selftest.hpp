#pragma once

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ppt/checkpoint.hpp"
#include "ppt/config.hpp"
#include "ppt/datagen.hpp"
#include "ppt/dpo.hpp"
#include "ppt/env.hpp"
#include "ppt/eval.hpp"
#include "ppt/experiment.hpp"
#include "ppt/gradcheck.hpp"
#include "ppt/model.hpp"
#include "ppt/rng.hpp"
#include "ppt/soups.hpp"
#include "ppt/tape.hpp"

namespace ppt::selftest {

struct Check {
    std::string name;
    std::function<void()> fn;
};

namespace detail {

inline void near(double got, double want, double tol, const std::string& what) {
    check(std::isfinite(got), what + ": non-finite value");
    check(std::fabs(got - want) <= tol,
          cat(what, ": got ", got, ", want ", want, " (tol ", tol, ")"));
}

inline bool same_bits(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

inline bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

inline bool same_bits(const ParamStore& a, const ParamStore& b) {
    if (a.size() != b.size()) return false;
    auto ia = a.begin();
    auto ib = b.begin();
    for (; ia != a.end(); ++ia, ++ib)
        if (ia->first != ib->first || !same_bits(ia->second, ib->second)) return false;
    return true;
}

inline ModelConfig tiny_model() {
    ModelConfig m;
    m.layers = 2;
    m.heads = 2;
    m.hidden = 16;
    m.max_positions = 8;
    return m;
}

// init_params leaves the output head at zero; for checks that need a
// non-uniform policy the head is randomized too
inline ParamStore random_model(const Rng& base, const ModelConfig& cfg) {
    ParamStore p = init_params(base, cfg);
    Rng r = base.fork("head");
    for (double& v : p.at("head.w").data) v = r.gaussian(0.0, 0.02);
    for (double& v : p.at("head.b").data) v = r.gaussian(0.0, 0.02);
    return p;
}

inline PreferenceTriple random_triple(Rng& r, int context_dim = 3, int num_actions = 4) {
    PreferenceTriple t;
    t.x = sample_context(r, context_dim);
    t.winner = static_cast<int>(r.below(static_cast<uint64_t>(num_actions)));
    t.loser = (t.winner + 1 + static_cast<int>(r.below(static_cast<uint64_t>(num_actions - 1)))) %
              num_actions;
    return t;
}

inline HistorySequence random_sequence(Rng& r, int len, int group = 0) {
    HistorySequence s;
    s.group = group;
    for (int i = 0; i < len; ++i) s.triples.push_back(random_triple(r));
    return s;
}

inline std::filesystem::path scratch_dir() {
    auto dir = std::filesystem::temp_directory_path() / "ppt-selftest";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    check(in.good(), "cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::string triple_key(const PreferenceTriple& t) {
    std::string k = cat(t.winner, "|", t.loser);
    for (double v : t.x.x) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "|%.17g", v);
        k += buf;
    }
    return k;
}

inline std::vector<std::string> pool_keys(const OfflineDataset& ds, int g) {
    std::vector<std::string> keys;
    for (const auto& t : ds.pool(g)) keys.push_back(triple_key(t));
    std::sort(keys.begin(), keys.end());
    return keys;
}

template <class Fn>
inline void expect_throw(const std::string& what, Fn&& fn) {
    bool threw = false;
    try {
        fn();
    } catch (const check_error&) {
        threw = true;
    }
    check(threw, what + ": expected a validation error");
}

}  // namespace detail

inline std::vector<Check> all_checks() {
    namespace d = detail;
    std::vector<Check> checks;
    auto add = [&](std::string name, std::function<void()> fn) {
        checks.push_back({std::move(name), std::move(fn)});
    };

    // ---- autodiff and optimizer ----

    add("numcore/grad-quadratic", [] {
        ParamStore p;
        p.add("w", Tensor::scalar(3.0));
        auto [v, g] = value_and_grad(p, [](Tape& t, const ParamRefs& r) {
            return t.sum_all(t.mul(r.at("w"), r.at("w")));
        });
        d::near(v, 9.0, 1e-12, "w^2 at w=3");
        d::near(g.at("w").data[0], 6.0, 1e-12, "d(w^2)/dw at w=3");
    });

    add("numcore/grad-constant-loss", [] {
        ParamStore p;
        p.add("w", Tensor::row({1.0, 2.0}));
        auto [v, g] = value_and_grad(
            p, [](Tape& t, const ParamRefs&) { return t.constant(Tensor::scalar(5.0)); });
        d::near(v, 5.0, 0.0, "constant loss value");
        for (double gv : g.at("w").data) d::near(gv, 0.0, 0.0, "constant loss gradient");
    });

    add("numcore/gradcheck-transformer-dpo", [] {
        const ModelConfig cfg = d::tiny_model();
        Rng r(2024);
        ParamStore params = d::random_model(r.fork("model"), cfg);
        Rng dr = r.fork("data");
        std::vector<HistorySequence> seqs = {d::random_sequence(dr, 3, 0), d::random_sequence(dr, 3, 1)};
        DpoBatch batch = make_sequence_batch(cfg, {&seqs[0], &seqs[1]});
        ReferencePolicy ref;
        auto res = gradcheck(params, [&](Tape& t, const ParamRefs& refs) {
            return dpo_loss_graph(t, refs, cfg, batch, ref, 1.0);
        });
        check(res.max_rel_err <= 1e-5,
              cat("gradcheck: max rel err ", res.max_rel_err, " at ", res.worst_param, "[",
                  res.worst_index, "] analytic ", res.analytic, " numeric ", res.numeric));
    });

    add("numcore/adam-zero-grad", [] {
        ParamStore p;
        p.add("w", Tensor::row({1.0, 2.0, 3.0}));
        const ParamStore before = p;
        GradStore g;
        g.add("w", Tensor({3}, 0.0));
        OptState s = OptState::init(p);
        adam_step(p, g, s);
        check(d::same_bits(p, before), "zero gradient must leave parameters untouched");
    });

    add("numcore/adam-step1", [] {
        ParamStore p;
        p.add("w", Tensor::scalar(1.0));
        GradStore g;
        g.add("w", Tensor::scalar(1.0));
        AdamHyper h;
        h.learning_rate = 0.1;
        OptState s = OptState::init(p, h);
        adam_step(p, g, s);
        d::near(p.at("w").data[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-12,
                "first Adam step moves by ~lr against the gradient");
    });

    add("numcore/adam-determinism", [] {
        auto run = [] {
            ParamStore p;
            p.add("w", Tensor::row({0.5, -1.5, 2.0}));
            OptState s = OptState::init(p);
            for (int i = 0; i < 5; ++i) {
                auto [v, g] = value_and_grad(p, [](Tape& t, const ParamRefs& r) {
                    return t.sum_all(t.mul(r.at("w"), r.at("w")));
                });
                (void)v;
                adam_step(p, g, s);
            }
            return p;
        };
        check(d::same_bits(run(), run()), "identical inputs must give bit-identical trajectories");
    });

    // ---- rng ----

    add("numcore/rng-fork-order", [] {
        Rng parent(7);
        Rng a1 = parent.fork("a");
        Rng b1 = parent.fork("b");
        Rng b2 = parent.fork("b");
        Rng a2 = parent.fork("a");
        for (int i = 0; i < 16; ++i) {
            check(a1.uniform() == a2.uniform(), "fork(name) must not depend on fork order");
            check(b1.uniform() == b2.uniform(), "fork(name) must not depend on fork order");
        }
        Rng c1 = parent.fork("x", 3);
        Rng c2 = parent.fork("x").fork(3);
        for (int i = 0; i < 16; ++i)
            check(c1.uniform() == c2.uniform(), "fork(name, idx) must equal fork(name).fork(idx)");
        Rng i0 = parent.fork(static_cast<uint64_t>(0));
        Rng i1 = parent.fork(static_cast<uint64_t>(1));
        check(i0.uniform() != i1.uniform(), "sibling index streams must differ");
    });

    add("numcore/rng-categorical", [] {
        Rng r(11);
        std::vector<double> point = {0.0, 1.0, 0.0};
        for (int i = 0; i < 64; ++i) check(r.categorical(point) == 1, "point mass must always hit");
        std::vector<double> uni(4, 0.25);
        std::vector<int> count(4, 0);
        const int n = 20000;
        for (int i = 0; i < n; ++i) ++count[static_cast<size_t>(r.categorical(uni))];
        for (int a = 0; a < 4; ++a)
            d::near(static_cast<double>(count[static_cast<size_t>(a)]) / n, 0.25, 0.01,
                    cat("uniform categorical frequency of ", a));
        d::expect_throw("unnormalized distribution",
                        [&] { return Rng(1).categorical(std::vector<double>{0.5, 0.4}); });
        d::expect_throw("negative probability",
                        [&] { return Rng(1).categorical(std::vector<double>{1.5, -0.5}); });
    });

    add("numcore/rng-gaussian-zero-sigma", [] {
        Rng r(3);
        for (int i = 0; i < 8; ++i)
            check(r.gaussian(2.5, 0.0) == 2.5, "zero stddev must return the mean exactly");
    });

    add("numcore/rng-dirichlet", [] {
        Rng r(5);
        std::vector<double> mean(3, 0.0);
        const int n = 6000;
        for (int i = 0; i < n; ++i) {
            std::vector<double> w = r.dirichlet_uniform(3);
            double total = 0.0;
            for (size_t k = 0; k < 3; ++k) {
                check(w[k] > 0.0 && w[k] < 1.0, "dirichlet entries must lie in (0, 1)");
                total += w[k];
                mean[k] += w[k];
            }
            d::near(total, 1.0, 1e-12, "dirichlet sample sum");
        }
        for (size_t k = 0; k < 3; ++k)
            d::near(mean[k] / n, 1.0 / 3.0, 0.01, cat("dirichlet mean of coordinate ", k));
    });

    add("numcore/checkpoint-roundtrip", [] {
        const auto dir = d::scratch_dir();
        const ModelConfig cfg = d::tiny_model();
        ParamStore p = d::random_model(Rng(99), cfg);
        p.at("head.b").data[0] = -0.0;
        p.at("head.b").data[1] = 1e-300;
        p.at("head.b").data[2] = std::numbers::pi;
        nlohmann::json meta = {{"purpose", "roundtrip"}};
        const auto path = dir / "ckpt.json";
        save_checkpoint(path, p, meta);
        nlohmann::json meta2;
        ParamStore q = load_checkpoint(path, &meta2);
        check(d::same_bits(p, q), "checkpoint load must reproduce parameters bit-exactly");
        check(meta2 == meta, "checkpoint metadata must round-trip");
        const std::string manifest1 = d::file_bytes(path);
        const std::string blob1 = d::file_bytes(blob_path_for(path));
        save_checkpoint(path, q, meta2);
        check(d::file_bytes(path) == manifest1, "re-saving must write an identical manifest");
        check(d::file_bytes(blob_path_for(path)) == blob1, "re-saving must write an identical blob");
    });

    // ---- preference environment ----

    add("env/reward-mixture-identity", [] {
        const EnvSpec spec = EnvSpec::defaults();
        Rng r(21);
        for (int trial = 0; trial < 32; ++trial) {
            const Context x = sample_context(r, spec.context_dim);
            const UserProfile u = sample_mixed_user(r, spec.num_groups);
            const double s = spec.context_scale(x);
            for (int a = 0; a < spec.num_actions; ++a) {
                double want = 0.0;
                for (int g = 0; g < spec.num_groups; ++g)
                    want += u.weights[static_cast<size_t>(g)] *
                            spec.reward_table[static_cast<size_t>(g)][static_cast<size_t>(a)] * s;
                d::near(spec.reward(u, a, x, 0.0), want, 1e-12, "reward factorization");
            }
        }
    });

    add("env/preference-complement", [] {
        const EnvSpec spec = EnvSpec::defaults();
        Rng r(22);
        for (int trial = 0; trial < 64; ++trial) {
            const Context x = sample_context(r, spec.context_dim);
            const UserProfile u = sample_mixed_user(r, spec.num_groups);
            const int a1 = static_cast<int>(r.below(4));
            const int a2 = (a1 + 1 + static_cast<int>(r.below(3))) % 4;
            const double p12 = spec.preference_prob(u, a1, a2, x);
            const double p21 = spec.preference_prob(u, a2, a1, x);
            check(p12 + p21 == 1.0, "preference probabilities must sum to exactly 1");
            check(p12 > 0.0 && p12 < 1.0, "preference probability must be strictly inside (0, 1)");
        }
    });

    add("env/pure-argmax", [] {
        const EnvSpec spec = EnvSpec::defaults();
        Rng r(23);
        for (int g = 0; g < spec.num_groups; ++g) {
            const UserProfile u = UserProfile::pure(g, spec.num_groups);
            int row_best = 0;
            for (int a = 1; a < spec.num_actions; ++a)
                if (spec.reward_table[static_cast<size_t>(g)][static_cast<size_t>(a)] >
                    spec.reward_table[static_cast<size_t>(g)][static_cast<size_t>(row_best)])
                    row_best = a;
            check(u.best_action(spec.reward_table) == row_best, "best_action must match the table row");
            for (int trial = 0; trial < 16; ++trial) {
                Context x = sample_context(r, spec.context_dim);
                if (spec.context_scale(x) <= 0.1) continue;
                int arg = 0;
                for (int a = 1; a < spec.num_actions; ++a)
                    if (spec.reward(u, a, x, 0.0) > spec.reward(u, arg, x, 0.0)) arg = a;
                check(arg == row_best, "pure-group reward argmax must be context independent");
            }
        }
    });

    add("env/preference-sample-rate", [] {
        EnvSpec spec = EnvSpec::defaults();
        spec.noise_sigma = 0.0;
        const UserProfile u = UserProfile::pure(0, spec.num_groups);
        const Context x{{0.5, 0.5, 0.5}};
        d::near(spec.context_scale(x), 1.0, 1e-12, "scale of the unit-sum context");
        Rng r(24);
        const int n = 20000;
        int w03 = 0, w23 = 0;
        for (int i = 0; i < n; ++i) {
            if (spec.sample_preference(r, u, 0, 3, x).first == 0) ++w03;
            if (spec.sample_preference(r, u, 2, 3, x).first == 2) ++w23;
        }
        d::near(static_cast<double>(w03) / n, sigmoid(6.0), 0.004, "win rate at reward gap 6");
        d::near(static_cast<double>(w23) / n, sigmoid(2.0), 0.010, "win rate at reward gap 2");
        auto [w, l] = spec.sample_preference(r, u, 1, 2, x);
        check((w == 1 && l == 2) || (w == 2 && l == 1), "sampled pair must permute the candidates");
    });

    add("env/uniform-policy-reward", [] {
        const EnvSpec spec = EnvSpec::defaults();
        Rng r(25);
        for (int trial = 0; trial < 32; ++trial) {
            const Context x = sample_context(r, spec.context_dim);
            const UserProfile u = sample_mixed_user(r, spec.num_groups);
            double mean = 0.0;
            for (int a = 0; a < spec.num_actions; ++a) mean += 0.25 * spec.reward(u, a, x, 0.0);
            d::near(mean, 4.0 * spec.context_scale(x), 1e-12,
                    "uniform policy reward must be 4x the context scale");
        }
    });

    add("env/context-and-user-sampling", [] {
        Rng r(26);
        double mean = 0.0;
        const int n = 5000;
        for (int i = 0; i < n; ++i) {
            const Context x = sample_context(r, 3);
            check(x.x.size() == 3, "context dimension");
            for (double v : x.x) {
                check(v >= 0.0 && v < 1.0, "context coordinates must lie in [0, 1)");
                mean += v;
            }
            const EnvSpec spec = EnvSpec::defaults();
            const double rw = spec.reward(sample_mixed_user(r, 3), static_cast<int>(r.below(4)), x, 0.0);
            check(rw >= 0.0 && rw <= 14.0, "noiseless rewards must lie in [0, 14]");
        }
        d::near(mean / (3 * n), 0.5, 0.008, "context coordinate mean");
        const UserProfile u = sample_mixed_user(r, 3);
        double total = 0.0;
        for (double w : u.weights) {
            check(w >= 0.0, "mixed user weights must be non-negative");
            total += w;
        }
        d::near(total, 1.0, 1e-12, "mixed user weight sum");
    });

    // ---- offline data generation ----

    add("datagen/accounting", [] {
        Rng r = Rng(31).fork("data");
        OfflineDataset ds = generate_offline(r, EnvSpec::defaults(), 500, {1.0, 0.8, 0.6}, 15);
        ds.validate();
        const std::vector<size_t> pools = {500, 400, 300};
        const std::vector<size_t> seqs = {33, 26, 20};
        const std::vector<size_t> rems = {5, 10, 0};
        for (int g = 0; g < 3; ++g) {
            check(ds.pool_size(g) == pools[static_cast<size_t>(g)], cat("pool size of group ", g));
            check(ds.sequences[static_cast<size_t>(g)].size() == seqs[static_cast<size_t>(g)],
                  cat("sequence count of group ", g));
            check(ds.remainders[static_cast<size_t>(g)].size() == rems[static_cast<size_t>(g)],
                  cat("remainder size of group ", g));
        }
        check(ds.num_sequences() == 79, "total sequence count");
    });

    add("datagen/context-sharing", [] {
        Rng r = Rng(32).fork("data");
        OfflineDataset ds = generate_offline(r, EnvSpec::defaults(), 500, {1.0, 0.8, 0.6}, 15);
        check(ds.all_contexts().size() == 500, "distinct contexts across the dataset");
        std::set<std::vector<double>> shared;
        for (const auto& t : ds.pool(0)) shared.insert(t.x.x);
        check(shared.size() == 500, "full-coverage group must annotate every context once");
        size_t inside = 0;
        std::set<std::vector<double>> g2;
        for (const auto& t : ds.pool(2)) {
            g2.insert(t.x.x);
            if (shared.count(t.x.x) > 0) ++inside;
        }
        check(g2.size() == 300 && inside == ds.pool_size(2),
              "partial-coverage group must reuse a 300-context prefix of the shared pool");
    });

    add("datagen/pair-marginals", [] {
        Rng r = Rng(33).fork("data");
        OfflineDataset ds = generate_offline(r, EnvSpec::defaults(), 500, {1.0, 0.8, 0.6}, 15);
        std::map<std::pair<int, int>, int> freq;
        int total = 0;
        for (int g = 0; g < ds.num_groups(); ++g)
            for (const auto& t : ds.pool(g)) {
                check(t.winner != t.loser, "candidates must be distinct");
                check(t.winner >= 0 && t.winner < 4 && t.loser >= 0 && t.loser < 4,
                      "actions must be in range");
                ++freq[{std::min(t.winner, t.loser), std::max(t.winner, t.loser)}];
                ++total;
            }
        check(total == 1200, "total triple count");
        check(freq.size() == 6, "all unordered action pairs must occur");
        for (const auto& [pair, n] : freq)
            d::near(static_cast<double>(n) / total, 1.0 / 6.0, 0.033,
                    cat("frequency of pair (", pair.first, ",", pair.second, ")"));
    });

    add("datagen/winner-reflects-group", [] {
        Rng r = Rng(34).fork("data");
        const EnvSpec spec = EnvSpec::defaults();
        OfflineDataset ds = generate_offline(r, spec, 500, {1.0, 0.8, 0.6}, 15);
        for (int g = 0; g < ds.num_groups(); ++g) {
            int agree = 0, n = 0;
            for (const auto& t : ds.pool(g)) {
                const auto& row = spec.reward_table[static_cast<size_t>(g)];
                if (row[static_cast<size_t>(t.winner)] > row[static_cast<size_t>(t.loser)]) ++agree;
                ++n;
            }
            check(n > 0 && static_cast<double>(agree) / n >= 0.85,
                  cat("group ", g, " winners must usually follow the group reward: ",
                      static_cast<double>(agree) / n));
        }
    });

    add("datagen/roundtrip-bytes", [] {
        const auto dir = d::scratch_dir();
        Rng r = Rng(35).fork("data");
        OfflineDataset ds = generate_offline(r, EnvSpec::defaults(), 60, {1.0, 0.8, 0.6}, 7, 35);
        ds.config_hash = "deadbeefdeadbeef";
        const auto p1 = dir / "a.jsonl";
        const auto p2 = dir / "b.jsonl";
        save_dataset(ds, p1);
        OfflineDataset ld = load_dataset(p1);
        save_dataset(ld, p2);
        check(d::file_bytes(p1) == d::file_bytes(p2), "save/load/save must be byte-identical");
        check(ld.seed == 35 && ld.config_hash == ds.config_hash, "header fields must round-trip");
        for (int g = 0; g < 3; ++g)
            check(d::pool_keys(ds, g) == d::pool_keys(ld, g), "loaded pools must match");
    });

    add("datagen/reshuffle-conserves", [] {
        Rng r = Rng(36).fork("data");
        OfflineDataset ds = generate_offline(r, EnvSpec::defaults(), 200, {1.0, 0.8, 0.6}, 15);
        Rng e0 = Rng(36).fork("epoch").fork(0);
        OfflineDataset rs = reshuffle_epoch(e0, ds);
        rs.validate();
        bool any_diff = false;
        for (int g = 0; g < 3; ++g) {
            check(d::pool_keys(ds, g) == d::pool_keys(rs, g),
                  "reshuffle must conserve each group's triple multiset");
            check(rs.sequences[static_cast<size_t>(g)].size() ==
                      ds.sequences[static_cast<size_t>(g)].size(),
                  "reshuffle must conserve the sequence count");
            for (size_t i = 0; i < ds.sequences[static_cast<size_t>(g)].size(); ++i) {
                const auto& a = ds.sequences[static_cast<size_t>(g)][i].triples;
                const auto& b = rs.sequences[static_cast<size_t>(g)][i].triples;
                for (size_t j = 0; j < a.size(); ++j)
                    if (!(a[j] == b[j])) any_diff = true;
            }
        }
        check(any_diff, "reshuffle with a fresh stream must change the packing");
    });

    add("datagen/load-errors", [] {
        const auto dir = d::scratch_dir();
        auto write_file = [&](const std::string& name, const std::string& text) {
            const auto p = dir / name;
            std::ofstream out(p);
            out << text;
            return p;
        };
        const std::string header = R"({"n_c":4,"coverage":[1.0],"T":2,"seed":0})";
        const auto garbled = write_file("garbled.jsonl", header + "\nnot json\n");
        try {
            load_dataset(garbled);
            check(false, "malformed line must be rejected");
        } catch (const check_error& e) {
            check(std::string(e.what()).find(":2:") != std::string::npos,
                  "parse error must cite the line number");
        }
        const auto badgroup = write_file(
            "badgroup.jsonl",
            header + "\n" +
                R"({"group":7,"triples":[{"x":[0.1,0.2,0.3],"w":0,"l":1},{"x":[0.1,0.2,0.3],"w":0,"l":1}]})" +
                "\n");
        d::expect_throw("out-of-range group", [&] { load_dataset(badgroup); });
        const auto toolong = write_file(
            "toolong.jsonl",
            header + "\n" +
                R"({"group":0,"triples":[{"x":[0.1],"w":0,"l":1},{"x":[0.1],"w":0,"l":1},{"x":[0.1],"w":0,"l":1}]})" +
                "\n");
        d::expect_throw("record longer than T", [&] { load_dataset(toolong); });
        const auto selfpair = write_file(
            "selfpair.jsonl",
            header + "\n" + R"({"group":0,"triples":[{"x":[0.1],"w":2,"l":2}]})" + "\n");
        d::expect_throw("winner equal to loser", [&] { load_dataset(selfpair); });
    });

    // ---- policy model ----

    add("model/uniform-at-init", [] {
        const ModelConfig cfg = d::tiny_model();
        ParamStore p = init_params(Rng(41), cfg);
        Rng r(42);
        std::vector<PreferenceTriple> history = {d::random_triple(r), d::random_triple(r)};
        const std::vector<double> probs = policy_at(p, cfg, history, sample_context(r, 3));
        for (double v : probs) check(v == 0.25, "zero output head must give exactly uniform policy");
    });

    add("model/row-normalization", [] {
        const ModelConfig cfg = d::tiny_model();
        ParamStore p = d::random_model(Rng(43), cfg);
        Rng r(44);
        for (int len = 1; len <= cfg.max_positions; ++len) {
            std::vector<Context> ctx;
            std::vector<PreferenceTriple> completed;
            for (int i = 0; i < len; ++i) ctx.push_back(sample_context(r, 3));
            for (int i = 0; i + 1 < len; ++i) completed.push_back(d::random_triple(r));
            Tensor probs = forward(p, cfg, encode_sequence(cfg, ctx, completed));
            check(probs.rows() == len, "one output row per position");
            for (int64_t i = 0; i < probs.rows(); ++i) {
                double total = 0.0;
                for (int64_t a = 0; a < probs.cols(); ++a) {
                    check(probs.at(i, a) > 0.0, "policy probabilities must be strictly positive");
                    total += probs.at(i, a);
                }
                d::near(total, 1.0, 1e-12, cat("row sum at length ", len, " position ", i));
            }
        }
    });

    add("model/causality", [] {
        const ModelConfig cfg = d::tiny_model();
        ParamStore p = d::random_model(Rng(45), cfg);
        Rng r(46);
        std::vector<Context> ctx;
        std::vector<PreferenceTriple> completed;
        for (int i = 0; i < 6; ++i) ctx.push_back(sample_context(r, 3));
        for (int i = 0; i < 5; ++i) completed.push_back(d::random_triple(r));
        Tensor tokens = encode_sequence(cfg, ctx, completed);
        Tensor base = forward(p, cfg, tokens);
        Tensor bumped = tokens;
        bumped.at(3, 0) += 0.7;
        Tensor out = forward(p, cfg, bumped);
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t a = 0; a < out.cols(); ++a)
                check(out.at(i, a) == base.at(i, a),
                      "outputs before a perturbed position must be bit-identical");
        bool row3 = false;
        for (int64_t a = 0; a < out.cols(); ++a)
            if (out.at(3, a) != base.at(3, a)) row3 = true;
        check(row3, "the perturbed position itself must change");
    });

    add("model/segment-isolation", [] {
        const ModelConfig cfg = d::tiny_model();
        ParamStore p = d::random_model(Rng(47), cfg);
        Rng r(48);
        std::vector<HistorySequence> seqs = {d::random_sequence(r, 3), d::random_sequence(r, 3)};
        DpoBatch packed = make_sequence_batch(cfg, {&seqs[0], &seqs[1]});
        Tensor joint = forward(p, cfg, packed.tokens, packed.segments);
        for (int s = 0; s < 2; ++s) {
            DpoBatch solo = make_sequence_batch(cfg, {&seqs[static_cast<size_t>(s)]});
            Tensor alone = forward(p, cfg, solo.tokens, solo.segments);
            for (int64_t i = 0; i < alone.rows(); ++i)
                for (int64_t a = 0; a < alone.cols(); ++a)
                    d::near(joint.at(3 * s + i, a), alone.at(i, a), 1e-12,
                            "packed segments must match standalone forwards");
        }
    });

    add("model/param-count", [] {
        ModelConfig full;
        check(param_count(init_params(Rng(1), full)) == 4748036, "default parameter count");
        check(param_count(init_params(Rng(1), d::tiny_model())) == 7028, "tiny parameter count");
    });

    add("model/encode-decode", [] {
        const ModelConfig cfg = d::tiny_model();
        Rng r(49);
        std::vector<Context> ctx;
        std::vector<PreferenceTriple> completed;
        for (int i = 0; i < 4; ++i) ctx.push_back(sample_context(r, 3));
        for (int i = 0; i < 3; ++i) completed.push_back(d::random_triple(r));
        Tensor tokens = encode_sequence(cfg, ctx, completed);
        check(tokens.rows() == 4 && tokens.cols() == cfg.token_dim(), "token tensor shape");
        for (int d0 = 0; d0 < cfg.context_dim; ++d0)
            check(tokens.at(0, d0) == ctx[0].x[static_cast<size_t>(d0)], "query context copied");
        for (int c = cfg.context_dim; c < cfg.token_dim(); ++c)
            check(tokens.at(0, c) == 0.0, "first token must carry no outcome");
        for (int64_t i = 1; i < 4; ++i) {
            PreferenceTriple got = decode_token_outcome(cfg, tokens, i);
            const PreferenceTriple& want = completed[static_cast<size_t>(i - 1)];
            check(got.winner == want.winner && got.loser == want.loser && got.x.x == want.x.x,
                  "decoded outcome must match the completed turn");
        }
    });

    add("model/policy-batch-consistency", [] {
        const ModelConfig cfg = d::tiny_model();
        ParamStore p = d::random_model(Rng(50), cfg);
        Rng r(51);
        std::vector<PreferenceTriple> history = {d::random_triple(r), d::random_triple(r)};
        std::vector<Context> queries = {sample_context(r, 3), sample_context(r, 3),
                                        sample_context(r, 3)};
        auto rows = policy_batch(p, cfg, history, queries);
        check(rows.size() == queries.size(), "one distribution per query");
        for (size_t q = 0; q < queries.size(); ++q) {
            const auto solo = policy_at(p, cfg, history, queries[q]);
            for (size_t a = 0; a < solo.size(); ++a)
                d::near(rows[q][a], solo[a], 1e-12, "batched policy must match single-query policy");
        }
    });

    // ---- preference tuning ----

    add("dpo/ln2-at-init", [] {
        const ModelConfig cfg = d::tiny_model();
        ParamStore p = init_params(Rng(61), cfg);
        Rng r(62);
        std::vector<HistorySequence> seqs = {d::random_sequence(r, 4, 0), d::random_sequence(r, 4, 1)};
        const double loss = history_dpo_loss(p, cfg, {&seqs[0], &seqs[1]}, ReferencePolicy{}, 1.0);
        d::near(loss, std::log(2.0), 1e-9, "loss at a uniform policy with uniform reference");
    });

    add("dpo/uniform-ref-cancellation", [] {
        const ModelConfig cfg = d::tiny_model();
        ParamStore p = d::random_model(Rng(63), cfg);
        Rng r(64);
        std::vector<HistorySequence> seqs = {d::random_sequence(r, 3, 0), d::random_sequence(r, 4, 1)};
        const double loss = history_dpo_loss(p, cfg, {&seqs[0], &seqs[1]}, ReferencePolicy{}, 1.5);
        double manual = 0.0;
        int n = 0;
        for (const auto& s : seqs)
            for (size_t t = 0; t < s.triples.size(); ++t) {
                std::vector<PreferenceTriple> history(s.triples.begin(),
                                                      s.triples.begin() + static_cast<ptrdiff_t>(t));
                const auto probs = policy_at(p, cfg, history, s.triples[t].x);
                const double lw = std::log(probs[static_cast<size_t>(s.triples[t].winner)]);
                const double ll = std::log(probs[static_cast<size_t>(s.triples[t].loser)]);
                manual += softplus(-1.5 * (lw - ll));
                ++n;
            }
        d::near(loss, manual / n, 1e-9,
                "uniform reference must reduce the loss to the policy log-ratio");
    });

    add("dpo/beta-scaling", [] {
        ParamStore p;
        Tensor logits({1, 4});
        logits.at(0, 0) = std::log(0.4);
        for (int a = 1; a < 4; ++a) logits.at(0, a) = std::log(0.2);
        p.add("logits", logits);
        auto loss_at = [&](double beta) {
            return loss_value(p, [&](Tape& t, const ParamRefs& r) {
                Tape::Ref lp = t.log_softmax_rows(r.at("logits"));
                Tape::Ref lw = t.pick_columns(lp, {0});
                Tape::Ref ll = t.pick_columns(lp, {1});
                return t.mean_all(t.softplus(t.neg(t.scale(t.sub(lw, ll), beta))));
            });
        };
        d::near(loss_at(1.0), std::log(1.5), 1e-12, "single-pair loss at beta 1");
        d::near(loss_at(2.0), std::log(1.25), 1e-12, "single-pair loss at beta 2");
    });

    add("dpo/loss-positive", [] {
        const ModelConfig cfg = d::tiny_model();
        Rng r(65);
        for (int trial = 0; trial < 4; ++trial) {
            ParamStore p = d::random_model(Rng(66 + trial), cfg);
            Rng dr = r.fork(static_cast<uint64_t>(trial));
            std::vector<PreferenceTriple> triples;
            for (int i = 0; i < 5; ++i) triples.push_back(d::random_triple(dr));
            const double loss = standard_dpo_loss(p, cfg, triples, ReferencePolicy{}, 1.0);
            check(std::isfinite(loss) && loss > 0.0, "loss must be positive and finite");
        }
    });

    add("dpo/step-improves-margin", [] {
        const ModelConfig cfg = d::tiny_model();
        ParamStore p = d::random_model(Rng(67), cfg);
        Rng r(68);
        std::vector<PreferenceTriple> triples = {d::random_triple(r)};
        DpoBatch batch = make_triple_batch(cfg, triples);
        auto margin = [&] {
            const auto probs = policy_at(p, cfg, {}, triples[0].x);
            return probs[static_cast<size_t>(triples[0].winner)] -
                   probs[static_cast<size_t>(triples[0].loser)];
        };
        const double before = margin();
        OptState opt = OptState::init(p);
        const double loss0 = ppt::detail::train_step(p, opt, cfg, batch, ReferencePolicy{}, 1.0).loss;
        check(std::isfinite(loss0), "step loss must be finite");
        check(margin() > before, "a gradient step must widen the winner-loser margin");
    });

    add("dpo/monotone-early-epochs", [] {
        Rng root(69);
        Rng dr = root.fork("data");
        OfflineDataset ds = generate_offline(dr, EnvSpec::defaults(), 100, {1.0, 0.8, 0.6}, 15);
        ModelConfig mc;
        mc.layers = 2;
        mc.hidden = 64;
        DpoConfig dc;
        dc.epochs = 5;
        auto [params, report] = train_ppt(root.fork("train"), ds, mc, dc);
        check(report.epoch_mean_loss.size() == 5, "one mean loss per epoch");
        d::near(report.initial_loss, std::log(2.0), 1e-9, "training starts at the uniform-policy loss");
        int inversions = 0;
        for (size_t e = 1; e < report.epoch_mean_loss.size(); ++e) {
            const double rise = report.epoch_mean_loss[e] - report.epoch_mean_loss[e - 1];
            if (rise > 0.0) {
                ++inversions;
                check(rise <= 1e-3, cat("epoch loss rose by ", rise));
            }
        }
        check(inversions <= 1, "early epoch losses must be monotone up to one small inversion");
        check(report.final_loss < report.initial_loss, "training must reduce the loss");
        check(params.num_values() > 0 && report.steps == 5, "report bookkeeping");
    });

    add("dpo/train-determinism", [] {
        Rng root(70);
        Rng dr = root.fork("data");
        OfflineDataset ds = generate_offline(dr, EnvSpec::defaults(), 45, {1.0, 0.8, 0.6}, 15);
        ModelConfig mc = d::tiny_model();
        mc.max_positions = 16;
        DpoConfig dc;
        dc.epochs = 2;
        dc.batch_size = 2;
        auto [p1, r1] = train_ppt(root.fork("train"), ds, mc, dc);
        auto [p2, r2] = train_ppt(root.fork("train"), ds, mc, dc);
        check(d::same_bits(p1, p2), "same stream must give bit-identical trained parameters");
        check(r1.final_loss == r2.final_loss, "same stream must give identical reported losses");
    });

    // ---- model soups ----

    add("soups/vertex-identity", [] {
        const ModelConfig cfg = d::tiny_model();
        std::vector<ParamStore> base;
        for (int g = 0; g < 3; ++g) base.push_back(d::random_model(Rng(81 + g), cfg));
        Rng r(84);
        SoupEnsemble ens = build_ensemble(r, cfg, base, 6);
        check(ens.size() == 6, "ensemble size");
        for (int g = 0; g < 3; ++g) {
            check(ens.weight_vectors[static_cast<size_t>(g)][static_cast<size_t>(g)] == 1.0,
                  "vertex weights must be one-hot");
            check(d::same_bits(ens.materialize(g), base[static_cast<size_t>(g)]),
                  "vertex members must reproduce the base models bit-exactly");
        }
    });

    add("soups/convex-bounds", [] {
        const ModelConfig cfg = d::tiny_model();
        std::vector<ParamStore> base;
        for (int g = 0; g < 3; ++g) base.push_back(d::random_model(Rng(85 + g), cfg));
        Rng r(88);
        SoupEnsemble ens = build_ensemble(r, cfg, base, 13);
        for (int m = 3; m < ens.size(); ++m) {
            double wsum = 0.0;
            for (double w : ens.weight_vectors[static_cast<size_t>(m)]) {
                check(w >= 0.0, "soup weights must be non-negative");
                wsum += w;
            }
            d::near(wsum, 1.0, 1e-9, "soup weights must sum to 1");
            ParamStore mixed = ens.materialize(m);
            auto i0 = base[0].begin();
            auto i1 = base[1].begin();
            auto i2 = base[2].begin();
            for (auto& [name, t] : mixed) {
                for (size_t k = 0; k < t.data.size(); ++k) {
                    const double lo = std::min({i0->second.data[k], i1->second.data[k],
                                                i2->second.data[k]});
                    const double hi = std::max({i0->second.data[k], i1->second.data[k],
                                                i2->second.data[k]});
                    check(t.data[k] >= lo - 1e-12 && t.data[k] <= hi + 1e-12,
                          "interpolates must stay inside the convex hull");
                }
                ++i0, ++i1, ++i2;
            }
        }
    });

    add("soups/interpolate-arithmetic", [] {
        ParamStore a, b;
        a.add("w", Tensor::scalar(2.0));
        b.add("w", Tensor::scalar(4.0));
        ParamStore mix = interpolate({a, b}, {0.25, 0.75});
        check(mix.at("w").data[0] == 3.5, "weighted average of 2 and 4 at (0.25, 0.75)");
        const double gap = (0.0 + std::log(0.9)) - (0.0 + std::log(0.1));
        d::near(gap, std::log(9.0), 1e-12, "one-step score gap at win probabilities 0.9 vs 0.1");
    });

    add("soups/score-recompute", [] {
        const ModelConfig cfg = d::tiny_model();
        std::vector<ParamStore> base;
        for (int g = 0; g < 3; ++g) base.push_back(d::random_model(Rng(91 + g), cfg));
        Rng r(94);
        SoupEnsemble ens = build_ensemble(r, cfg, base, 5);
        SelectionState state = init_selection(r, ens.size());
        std::vector<std::pair<Context, int>> observed;
        for (int t = 0; t < 4; ++t) {
            const Context x = sample_context(r, 3);
            const int winner = static_cast<int>(r.below(4));
            observed.push_back({x, winner});
            state = ps_select_step(state, ens, x, winner);
        }
        for (int m = 0; m < ens.size(); ++m) {
            ParamStore model = ens.materialize(m);
            double want = 0.0;
            for (const auto& [x, w] : observed) want += log_prob_empty_history(model, cfg, x, w);
            d::near(state.cumulative_scores[static_cast<size_t>(m)], want, 1e-9,
                    cat("cumulative score of member ", m));
        }
        check(state.best_index == select_best(state.cumulative_scores),
              "incumbent must be the score argmax");
    });

    add("soups/select-best-rule", [] {
        check(select_best({1.0, 3.0, 3.0}) == 1, "ties must go to the lowest index");
        check(select_best({2.0, 2.0}) == 0, "ties must go to the lowest index");
        check(select_best({-5.0}) == 0, "single member");
        Rng r(95);
        std::vector<double> scores;
        for (int i = 0; i < 10; ++i) scores.push_back(r.gaussian(0.0, 1.0));
        std::vector<double> shifted = scores;
        for (double& s : shifted) s += 17.25;
        check(select_best(scores) == select_best(shifted),
              "adding a constant to every score must not change the argmax");
    });

    // ---- online evaluation ----

    add("eval/metrics-closed-forms", [] {
        const EnvSpec spec = EnvSpec::defaults();
        Rng r(101);
        std::vector<Context> test;
        for (int i = 0; i < 40; ++i) test.push_back(sample_context(r, 3));
        double s_bar = 0.0;
        for (const auto& x : test) s_bar += spec.context_scale(x);
        s_bar /= static_cast<double>(test.size());
        for (int g = 0; g < spec.num_groups; ++g) {
            const UserProfile u = UserProfile::pure(g, spec.num_groups);
            auto uniform = [&](const std::vector<Context>& q) {
                return std::vector<std::vector<double>>(q.size(), std::vector<double>(4, 0.25));
            };
            Metrics mu = metrics(uniform, spec, u, test);
            d::near(mu.mean_expected_reward, 4.0 * s_bar, 1e-9, "uniform policy reward");
            const int best = u.best_action(spec.reward_table);
            auto point = [&](const std::vector<Context>& q) {
                std::vector<double> row(4, 0.0);
                row[static_cast<size_t>(best)] = 1.0;
                return std::vector<std::vector<double>>(q.size(), row);
            };
            Metrics mp = metrics(point, spec, u, test);
            d::near(mp.mean_expected_reward, 7.0 * s_bar, 1e-9, "oracle point-mass reward");
            d::near(mp.accuracy, 1.0, 0.0, "oracle point-mass accuracy");
            Metrics mu2 = metrics(uniform, spec, u, test);
            check(mu2.mean_expected_reward == mu.mean_expected_reward &&
                      mu2.accuracy == mu.accuracy,
                  "metrics must be a pure function of policy and contexts");
        }
    });

    add("eval/context-split", [] {
        Rng dr = Rng(102).fork("data");
        OfflineDataset ds = generate_offline(dr, EnvSpec::defaults(), 60, {1.0, 0.8, 0.6}, 10);
        Rng c1 = Rng(102).fork("contexts");
        Rng c2 = Rng(102).fork("contexts");
        auto [test1, val1] = pick_eval_contexts(c1, ds, 20, 8);
        auto [test2, val2] = pick_eval_contexts(c2, ds, 20, 8);
        check(test1.size() == 20 && val1.size() == 8, "split sizes");
        std::set<std::vector<double>> seen;
        for (const auto& x : test1) seen.insert(x.x);
        for (const auto& x : val1) check(seen.insert(x.x).second, "test/validation must be disjoint");
        check(seen.size() == 28, "all split contexts must be distinct");
        for (size_t i = 0; i < 20; ++i) check(test1[i].x == test2[i].x, "split must be deterministic");
        for (size_t i = 0; i < 8; ++i) check(val1[i].x == val2[i].x, "split must be deterministic");
        std::set<std::vector<double>> all;
        for (const auto& x : ds.all_contexts()) all.insert(x.x);
        for (const auto& x : seen) check(all.count(x) == 1, "split must draw from the dataset pool");
    });

    add("eval/ppt-online-contract", [] {
        const ModelConfig cfg = d::tiny_model();
        ParamStore p = d::random_model(Rng(103), cfg);
        const EnvSpec spec = EnvSpec::defaults();
        Rng r(104);
        std::vector<Context> test, val;
        for (int i = 0; i < 10; ++i) test.push_back(sample_context(r, 3));
        for (int i = 0; i < 5; ++i) val.push_back(sample_context(r, 3));
        const UserProfile u = UserProfile::pure(1, 3);

        Metrics first = metrics(
            [&](const std::vector<Context>& q) { return policy_batch(p, cfg, {}, q); }, spec, u, test);
        Rng e1 = Rng(105).fork("eval");
        std::vector<PreferenceTriple> history;
        CurveTable table = eval_ppt_online(e1, p, cfg, spec, u, "group2", 1, test, val, &history);
        check(table.size() == 5, "one record per turn");
        check(table[0].reward == first.mean_expected_reward && table[0].accuracy == first.accuracy,
              "turn 1 must be measured before any interaction");
        for (size_t t = 0; t < table.size(); ++t) {
            const TurnRecord& rec = table[t];
            check(rec.method == "ppt" && rec.user == "group2" && rec.seed == 1, "record labels");
            check(rec.turn == static_cast<int>(t) + 1, "turns must count from 1");
            check(rec.reward >= 0.0 && rec.reward <= 14.0, "rewards must lie in [0, 14]");
            check(rec.accuracy >= 0.0 && rec.accuracy <= 1.0, "accuracy must lie in [0, 1]");
        }
        check(history.size() == 5, "one history entry per turn");
        for (size_t t = 0; t < history.size(); ++t) {
            check(history[t].x.x == val[t].x, "history must follow the validation contexts in order");
            check(history[t].winner != history[t].loser, "history outcomes must be distinct pairs");
        }
        Rng e2 = Rng(105).fork("eval");
        CurveTable again = eval_ppt_online(e2, p, cfg, spec, u, "group2", 1, test, val);
        for (size_t t = 0; t < table.size(); ++t)
            check(again[t].reward == table[t].reward && again[t].accuracy == table[t].accuracy,
                  "same stream must reproduce the curve exactly");
    });

    add("eval/ps-online-contract", [] {
        const ModelConfig cfg = d::tiny_model();
        std::vector<ParamStore> base;
        for (int g = 0; g < 3; ++g) base.push_back(d::random_model(Rng(106 + g), cfg));
        Rng sr(109);
        SoupEnsemble ens = build_ensemble(sr, cfg, base, 4);
        const EnvSpec spec = EnvSpec::defaults();
        Rng r(110);
        std::vector<Context> test, val;
        for (int i = 0; i < 8; ++i) test.push_back(sample_context(r, 3));
        for (int i = 0; i < 4; ++i) val.push_back(sample_context(r, 3));
        const UserProfile u = sample_mixed_user(r, 3);
        Rng e1 = Rng(111).fork("eval");
        PsSelectionTrace trace;
        CurveTable table = eval_ps_online(e1, ens, spec, u, "mixed", 2, test, val, &trace);
        check(table.size() == 4, "one record per turn");
        for (size_t t = 0; t < table.size(); ++t) {
            check(table[t].method == "ps" && table[t].user == "mixed" && table[t].seed == 2,
                  "record labels");
            check(table[t].turn == static_cast<int>(t) + 1, "turns must count from 1");
            check(table[t].reward >= 0.0 && table[t].reward <= 14.0, "rewards must lie in [0, 14]");
        }
        check(trace.entries.size() == 4 && trace.final_scores.size() == 4, "selection trace shape");
        for (const auto& e : trace.entries) {
            check(e.best_index >= 0 && e.best_index < ens.size(), "selected member in range");
            check(e.winner >= 0 && e.winner < 4, "traced winner in range");
        }
        check(trace.entries.back().best_index == select_best(trace.final_scores),
              "final incumbent must be the argmax of the final scores");
    });

    add("eval/csv-roundtrip", [] {
        const auto dir = d::scratch_dir();
        CurveTable table = {
            {"ppt", "group1", 1, 1, 4.123456789012345, 0.25},
            {"ppt", "group1", 1, 2, 5.0, 1.0},
            {"ps", "mixed", 2, 1, 1e-17, 0.0},
        };
        const auto path = dir / "curve.csv";
        write_csv(table, path);
        CurveTable back = read_csv(path);
        check(back.size() == table.size(), "row count");
        for (size_t i = 0; i < table.size(); ++i) {
            check(back[i].method == table[i].method && back[i].user == table[i].user &&
                      back[i].seed == table[i].seed && back[i].turn == table[i].turn,
                  "label fields must round-trip");
            check(back[i].reward == table[i].reward && back[i].accuracy == table[i].accuracy,
                  "numeric fields must round-trip bit-exactly");
        }
        const std::string bytes = d::file_bytes(path);
        check(bytes.rfind("method,user,seed,turn,reward,accuracy\n", 0) == 0, "csv header");
    });

    add("eval/summary-statistics", [] {
        CurveTable table = {
            {"ppt", "group1", 1, 1, 1.0, 0.0},
            {"ppt", "group1", 2, 1, 3.0, 1.0},
            {"ps", "group1", 1, 1, 5.0, 0.5},
        };
        auto rows = summarize(table);
        check(rows.size() == 2, "one summary row per (method, user, turn)");
        check(rows[0].method == "ppt" && rows[0].n == 2, "seed grouping");
        d::near(rows[0].reward_mean, 2.0, 1e-15, "mean reward over seeds");
        d::near(rows[0].reward_stderr, 1.0, 1e-15, "stderr of {1,3}");
        d::near(rows[0].accuracy_mean, 0.5, 1e-15, "mean accuracy over seeds");
        check(rows[1].n == 1 && rows[1].reward_stderr == 0.0, "single seed has zero stderr");
    });

    // ---- configuration ----

    add("config/presets", [] {
        ExperimentConfig p500 = preset_config("paper-500");
        p500.validate();
        check(p500.data.n_c == 500 && p500.model.layers == 6 && p500.model.hidden == 256 &&
                  p500.dpo.epochs == 60 && p500.eval.seeds == std::vector<int>({1, 2, 3}),
              "paper-500 preset values");
        ExperimentConfig p1000 = preset_config("paper-1000");
        p1000.validate();
        check(p1000.data.n_c == 1000 && p1000.model.layers == 6, "paper-1000 preset values");
        ExperimentConfig ci = preset_config("ci");
        ci.validate();
        check(ci.data.n_c == 100 && ci.model.layers == 2 && ci.model.hidden == 64 &&
                  ci.dpo.epochs == 10 && ci.eval.seeds == std::vector<int>({1}),
              "ci preset values");
        bool threw = false;
        try {
            preset_config("nope");
        } catch (const config_error&) {
            threw = true;
        }
        check(threw, "unknown preset must be rejected");
    });

    add("config/hash-covers-semantics", [] {
        ExperimentConfig a = preset_config("paper-500");
        ExperimentConfig b = preset_config("paper-500");
        check(a.hash() == b.hash(), "equal configs must hash equally");
        b.workdir = "/somewhere/else";
        check(a.hash() == b.hash(), "the working directory must not affect the hash");
        b.seed = 42;
        check(a.hash() != b.hash(), "seed changes must change the hash");
        ExperimentConfig c = preset_config("paper-500");
        c.dpo.beta = 2.0;
        check(a.hash() != c.hash(), "hyperparameter changes must change the hash");
        check(a.hash() != preset_config("ci").hash(), "presets must hash differently");
    });

    add("config/unknown-keys-rejected", [] {
        auto apply = [](const nlohmann::json& j) {
            ExperimentConfig cfg = preset_config("ci");
            apply_config_json(cfg, j);
            return cfg;
        };
        bool threw = false;
        try {
            apply({{"daat", nlohmann::json::object()}});
        } catch (const config_error& e) {
            threw = std::string(e.what()).find("daat") != std::string::npos;
        }
        check(threw, "top-level unknown keys must be named in the error");
        threw = false;
        try {
            apply({{"dpo", {{"beta", 1.0}, {"bogus", 2}}}});
        } catch (const config_error& e) {
            threw = std::string(e.what()).find("bogus") != std::string::npos;
        }
        check(threw, "nested unknown keys must be named in the error");
        ExperimentConfig ok = apply({{"dpo", {{"beta", 0.5}}}, {"data", {{"n_c", 120}}}});
        check(ok.dpo.beta == 0.5 && ok.data.n_c == 120, "known keys must apply");
    });

    add("config/validation-ranges", [] {
        auto expect_reject = [](const std::function<void(ExperimentConfig&)>& tweak,
                                const std::string& what) {
            ExperimentConfig cfg = preset_config("ci");
            tweak(cfg);
            bool threw = false;
            try {
                cfg.validate();
            } catch (const config_error&) {
                threw = true;
            }
            check(threw, what + ": expected the config to be rejected");
        };
        expect_reject([](ExperimentConfig& c) { c.data.n_c = c.data.T - 1; }, "n_c below T");
        expect_reject([](ExperimentConfig& c) { c.data.coverage = {1.0, 0.8}; }, "coverage count");
        expect_reject([](ExperimentConfig& c) { c.data.coverage[2] = 0.0; }, "zero coverage");
        expect_reject([](ExperimentConfig& c) { c.data.coverage[0] = 1.2; }, "coverage above 1");
        expect_reject([](ExperimentConfig& c) { c.soups.M = 2; }, "fewer soups than groups");
        expect_reject([](ExperimentConfig& c) { c.model.max_positions = c.data.T - 1; },
                      "max_positions below T");
        expect_reject([](ExperimentConfig& c) { c.eval.seeds = {1, 1}; }, "duplicate seeds");
        expect_reject([](ExperimentConfig& c) { c.dpo.beta = 0.0; }, "non-positive beta");
    });

    // ---- experiment plumbing ----

    add("experiment/dataset-ensure-stable", [] {
        const auto dir = d::scratch_dir();
        ExperimentConfig cfg = preset_config("ci");
        OfflineDataset first = ensure_dataset(cfg, 1, dir, true);
        const auto path = dataset_path(dir, 1);
        const std::string bytes1 = d::file_bytes(path);
        OfflineDataset second = ensure_dataset(cfg, 1, dir, false);
        check(d::file_bytes(path) == bytes1, "re-ensuring must not rewrite the dataset");
        for (int g = 0; g < 3; ++g)
            check(d::pool_keys(first, g) == d::pool_keys(second, g),
                  "loaded dataset must match the generated one");
        check(first.config_hash == cfg.hash(), "dataset header must carry the config hash");
    });

    return checks;
}

inline int run_selftest(std::ostream& out) {
    int failures = 0;
    const auto checks = all_checks();
    for (const auto& c : checks) {
        try {
            c.fn();
            out << "[ok]   " << c.name << "\n";
        } catch (const std::exception& e) {
            ++failures;
            out << "[FAIL] " << c.name << ": " << e.what() << "\n";
        }
        out.flush();
    }
    if (failures == 0)
        out << "selftest: " << checks.size() << " checks passed\n";
    else
        out << "selftest: " << failures << " of " << checks.size() << " checks FAILED\n";
    return failures;
}

}  // namespace ppt::selftest
