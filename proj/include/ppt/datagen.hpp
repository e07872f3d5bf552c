#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ppt/env.hpp"

namespace ppt {

struct PreferenceTriple {
    Context x;
    int winner = 0;
    int loser = 0;

    bool operator==(const PreferenceTriple& o) const {
        return x.x == o.x.x && winner == o.winner && loser == o.loser;
    }
};

struct HistorySequence {
    int group = 0;
    std::vector<PreferenceTriple> triples;
};

// Stratified offline preference data. Each group's triples live in full
// length-T sequences plus a remainder of fewer than T triples; the remainder
// is excluded from sequence training for the epoch but returns on reshuffle,
// and the full pool backs the per-group baseline training.
struct OfflineDataset {
    int n_c = 0;
    std::vector<double> coverage;
    int T = 0;
    uint64_t seed = 0;
    std::string config_hash;

    std::vector<std::vector<HistorySequence>> sequences;   // per group, each length exactly T
    std::vector<std::vector<PreferenceTriple>> remainders;  // per group, length < T

    int num_groups() const { return static_cast<int>(coverage.size()); }

    size_t num_sequences() const {
        size_t n = 0;
        for (const auto& gs : sequences) n += gs.size();
        return n;
    }

    std::vector<PreferenceTriple> pool(int group) const {
        const auto g = static_cast<size_t>(group);
        std::vector<PreferenceTriple> out;
        for (const auto& s : sequences[g]) out.insert(out.end(), s.triples.begin(), s.triples.end());
        out.insert(out.end(), remainders[g].begin(), remainders[g].end());
        return out;
    }

    size_t pool_size(int group) const {
        const auto g = static_cast<size_t>(group);
        size_t n = remainders[g].size();
        for (const auto& s : sequences[g]) n += s.triples.size();
        return n;
    }

    // Unique contexts across all groups, in group-major pool order. With
    // nested coverage this recovers every annotated context exactly once.
    std::vector<Context> all_contexts() const {
        std::vector<Context> out;
        std::map<std::vector<double>, bool> seen;
        for (int g = 0; g < num_groups(); ++g)
            for (const auto& t : pool(g)) {
                if (seen.emplace(t.x.x, true).second) out.push_back(t.x);
            }
        return out;
    }

    void validate() const {
        check(n_c >= 0 && T >= 1, "dataset: bad n_c/T");
        check(sequences.size() == coverage.size() && remainders.size() == coverage.size(),
              "dataset: per-group list count mismatch");
        for (const auto& gs : sequences)
            for (const auto& s : gs) {
                check(static_cast<int>(s.triples.size()) == T, "dataset: sequence length != T");
                for (const auto& t : s.triples)
                    check(t.winner != t.loser, "dataset: triple winner equals loser");
            }
        for (const auto& gr : remainders) {
            check(static_cast<int>(gr.size()) < T, "dataset: remainder not shorter than T");
            for (const auto& t : gr) check(t.winner != t.loser, "dataset: triple winner equals loser");
        }
    }
};

namespace detail {

// floor(count / T) sequences of length exactly T over a random order;
// leftovers become the remainder
inline void partition_group(Rng& rng, int group, std::vector<PreferenceTriple> triples, int T,
                            std::vector<HistorySequence>& sequences_out,
                            std::vector<PreferenceTriple>& remainder_out) {
    rng.shuffle(triples);
    sequences_out.clear();
    remainder_out.clear();
    const size_t full = triples.size() / static_cast<size_t>(T);
    for (size_t s = 0; s < full; ++s) {
        HistorySequence seq;
        seq.group = group;
        seq.triples.assign(triples.begin() + static_cast<ptrdiff_t>(s * static_cast<size_t>(T)),
                           triples.begin() + static_cast<ptrdiff_t>((s + 1) * static_cast<size_t>(T)));
        sequences_out.push_back(std::move(seq));
    }
    remainder_out.assign(triples.begin() + static_cast<ptrdiff_t>(full * static_cast<size_t>(T)),
                         triples.end());
}

}  // namespace detail

// Samples N_c contexts and one fixed random permutation of them; group g
// annotates the first floor(coverage[g] * N_c) contexts of that permutation
// (so lower-coverage groups see nested subsets). Candidate pairs are two
// distinct uniform actions; the pure-group annotator ranks them.
inline OfflineDataset generate_offline(Rng& rng, const EnvSpec& spec, int n_c,
                                       const std::vector<double>& coverage, int T,
                                       uint64_t seed_echo = 0) {
    spec.validate();
    check(T >= 1, "generate_offline: T must be >= 1");
    check(n_c >= T, "generate_offline: n_c must be >= T (no full sequence possible)");
    check(static_cast<int>(coverage.size()) == spec.num_groups,
          "generate_offline: one coverage fraction per group");
    for (double c : coverage)
        check(c > 0.0 && c <= 1.0, "generate_offline: coverage fractions must lie in (0, 1]");

    std::vector<Context> contexts;
    contexts.reserve(static_cast<size_t>(n_c));
    for (int i = 0; i < n_c; ++i) contexts.push_back(sample_context(rng, spec.context_dim));

    std::vector<int> perm(static_cast<size_t>(n_c));
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);

    OfflineDataset ds;
    ds.n_c = n_c;
    ds.coverage = coverage;
    ds.T = T;
    ds.seed = seed_echo;
    ds.sequences.resize(coverage.size());
    ds.remainders.resize(coverage.size());

    for (int g = 0; g < spec.num_groups; ++g) {
        const int count = static_cast<int>(std::floor(coverage[static_cast<size_t>(g)] * n_c));
        const UserProfile user = UserProfile::pure(g, spec.num_groups);
        std::vector<PreferenceTriple> triples;
        triples.reserve(static_cast<size_t>(count));
        for (int i = 0; i < count; ++i) {
            const Context& x = contexts[static_cast<size_t>(perm[static_cast<size_t>(i)])];
            int a1 = static_cast<int>(rng.below(static_cast<uint64_t>(spec.num_actions)));
            int a2 = a1;
            while (a2 == a1) a2 = static_cast<int>(rng.below(static_cast<uint64_t>(spec.num_actions)));
            auto [w, l] = spec.sample_preference(rng, user, a1, a2, x);
            triples.push_back({x, w, l});
        }
        detail::partition_group(rng, g, std::move(triples), T, ds.sequences[static_cast<size_t>(g)],
                                ds.remainders[static_cast<size_t>(g)]);
    }
    return ds;
}

// Re-partitions each group's full triple pool into fresh random length-T
// sequences. The triple multiset is unchanged.
inline OfflineDataset reshuffle_epoch(Rng& rng, const OfflineDataset& ds) {
    OfflineDataset out = ds;
    for (int g = 0; g < ds.num_groups(); ++g)
        detail::partition_group(rng, g, ds.pool(g), ds.T, out.sequences[static_cast<size_t>(g)],
                                out.remainders[static_cast<size_t>(g)]);
    return out;
}

namespace detail {

inline nlohmann::json triple_to_json(const PreferenceTriple& t) {
    return {{"x", t.x.x}, {"w", t.winner}, {"l", t.loser}};
}

inline PreferenceTriple triple_from_json(const nlohmann::json& j) {
    PreferenceTriple t;
    t.x.x = j.at("x").get<std::vector<double>>();
    t.winner = j.at("w").get<int>();
    t.loser = j.at("l").get<int>();
    check(t.winner != t.loser, "triple winner equals loser");
    return t;
}

}  // namespace detail

// JSON-lines: line 1 is the header, then one record per sequence in group
// order, with each group's remainder (if any) as a trailing short record.
inline void save_dataset(const OfflineDataset& ds, const std::filesystem::path& path) {
    ds.validate();
    std::ofstream out(path, std::ios::trunc);
    check(out.good(), "cannot open dataset file for writing: " + path.string());

    nlohmann::json header = {
        {"n_c", ds.n_c}, {"coverage", ds.coverage}, {"T", ds.T}, {"seed", ds.seed}};
    if (!ds.config_hash.empty()) header["config_hash"] = ds.config_hash;
    out << header.dump() << "\n";

    auto write_record = [&](int group, const std::vector<PreferenceTriple>& triples) {
        nlohmann::json rec = {{"group", group}, {"triples", nlohmann::json::array()}};
        for (const auto& t : triples) rec["triples"].push_back(detail::triple_to_json(t));
        out << rec.dump() << "\n";
    };
    for (int g = 0; g < ds.num_groups(); ++g) {
        for (const auto& s : ds.sequences[static_cast<size_t>(g)]) write_record(g, s.triples);
        if (!ds.remainders[static_cast<size_t>(g)].empty())
            write_record(g, ds.remainders[static_cast<size_t>(g)]);
    }
    out.close();
    check(out.good(), "dataset write failed: " + path.string());
}

inline OfflineDataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    check(in.good(), "cannot open dataset file: " + path.string());

    OfflineDataset ds;
    std::string line;
    int lineno = 0;
    auto fail = [&](const std::string& msg) -> check_error {
        return check_error(path.string() + ":" + std::to_string(lineno) + ": " + msg);
    };

    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw fail(e.what());
        }
        try {
            if (lineno == 1) {
                ds.n_c = j.at("n_c").get<int>();
                ds.coverage = j.at("coverage").get<std::vector<double>>();
                ds.T = j.at("T").get<int>();
                ds.seed = j.at("seed").get<uint64_t>();
                ds.config_hash = j.value("config_hash", std::string());
                check(ds.T >= 1, "header: T must be >= 1");
                ds.sequences.resize(ds.coverage.size());
                ds.remainders.resize(ds.coverage.size());
                continue;
            }
            const int g = j.at("group").get<int>();
            check(g >= 0 && g < ds.num_groups(), "record group out of range");
            std::vector<PreferenceTriple> triples;
            for (const auto& tj : j.at("triples")) triples.push_back(detail::triple_from_json(tj));
            check(!triples.empty(), "record has no triples");
            check(static_cast<int>(triples.size()) <= ds.T, "record longer than T");
            if (static_cast<int>(triples.size()) == ds.T) {
                HistorySequence seq;
                seq.group = g;
                seq.triples = std::move(triples);
                ds.sequences[static_cast<size_t>(g)].push_back(std::move(seq));
            } else {
                auto& rem = ds.remainders[static_cast<size_t>(g)];
                rem.insert(rem.end(), triples.begin(), triples.end());
                check(static_cast<int>(rem.size()) < ds.T, "remainder records exceed T - 1 triples");
            }
        } catch (const nlohmann::json::exception& e) {
            throw fail(e.what());
        } catch (const check_error& e) {
            throw fail(e.what());
        }
    }
    check(lineno >= 1, "dataset file is empty: " + path.string());
    ds.validate();
    return ds;
}

}  // namespace ppt
