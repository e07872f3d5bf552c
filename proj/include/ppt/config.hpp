#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ppt/dpo.hpp"
#include "ppt/env.hpp"

namespace ppt {

// Bad configuration is a usage error (CLI exit 1), not a failed check.
struct config_error : check_error {
    using check_error::check_error;
};

struct DataConfig {
    int n_c = 500;
    std::vector<double> coverage{1.0, 0.8, 0.6};
    int T = 15;
};

struct SoupsConfig {
    int M = 100;
};

struct EvalConfig {
    int L = 50;
    int turns = 15;
    std::vector<int> seeds{1, 2, 3};
};

struct ExperimentConfig {
    uint64_t seed = 0;
    EnvSpec env = EnvSpec::defaults();
    DataConfig data;
    ModelConfig model;
    DpoConfig dpo;
    SoupsConfig soups;
    EvalConfig eval;
    std::string workdir;

    void validate() const {
        try {
            env.validate();
            model.validate();
            dpo.validate();
        } catch (const check_error& e) {
            throw config_error(e.what());
        }
        auto require = [](bool ok, const std::string& msg) {
            if (!ok) throw config_error(msg);
        };
        require(static_cast<int>(data.coverage.size()) == env.num_groups,
                "data.coverage: one fraction per group required");
        for (double c : data.coverage)
            require(c > 0.0 && c <= 1.0, "data.coverage: fractions must lie in (0, 1]");
        require(data.T >= 1, "data.T: must be >= 1");
        require(data.n_c >= data.T, "data.n_c: must be >= data.T");
        require(model.num_actions == env.num_actions, "model.num_actions: must match env.num_actions");
        require(model.context_dim == env.context_dim, "model.context_dim: must match env.context_dim");
        require(model.max_positions >= data.T, "model.max_positions: must be >= data.T");
        require(model.max_positions >= eval.turns + 1,
                "model.max_positions: must be >= eval.turns + 1");
        require(soups.M >= env.num_groups, "soups.M: must be >= env.num_groups");
        require(eval.L >= 1, "eval.L: must be >= 1");
        require(eval.turns >= 1, "eval.turns: must be >= 1");
        require(!eval.seeds.empty(), "eval.seeds: at least one seed required");
        for (size_t i = 0; i < eval.seeds.size(); ++i)
            for (size_t j = i + 1; j < eval.seeds.size(); ++j)
                require(eval.seeds[i] != eval.seeds[j], "eval.seeds: seeds must be distinct");
        double max_cov = 0.0;
        for (double c : data.coverage) max_cov = std::max(max_cov, c);
        require(static_cast<int>(std::floor(max_cov * data.n_c)) >= eval.L + eval.turns,
                "eval.L + eval.turns: exceeds the number of annotated contexts");
        for (int g = 0; g < env.num_groups; ++g)
            require(static_cast<int>(std::floor(data.coverage[static_cast<size_t>(g)] * data.n_c)) >=
                        data.T,
                    cat("data.coverage: group ", g, " yields no full training sequence"));
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["env"] = {{"num_groups", env.num_groups},       {"num_actions", env.num_actions},
                    {"context_dim", env.context_dim},     {"encoder_w", env.encoder_w},
                    {"encoder_b", env.encoder_b},         {"reward_table", env.reward_table},
                    {"noise_sigma", env.noise_sigma}};
        j["data"] = {{"n_c", data.n_c}, {"coverage", data.coverage}, {"T", data.T}};
        j["model"] = {{"layers", model.layers},
                      {"heads", model.heads},
                      {"hidden", model.hidden},
                      {"max_positions", model.max_positions},
                      {"num_actions", model.num_actions},
                      {"context_dim", model.context_dim}};
        j["dpo"] = {{"beta", dpo.beta},
                    {"learning_rate", dpo.learning_rate},
                    {"epochs", dpo.epochs},
                    {"batch_size", dpo.batch_size},
                    {"batch_triples", dpo.batch_triples}};
        j["soups"] = {{"M", soups.M}};
        j["eval"] = {{"L", eval.L}, {"turns", eval.turns}, {"seeds", eval.seeds}};
        if (!workdir.empty()) j["workdir"] = workdir;
        return j;
    }

    // Canonical identity of a run: sorted-key serialization of everything
    // except the output location.
    std::string hash() const {
        nlohmann::json j = to_json();
        j.erase("workdir");
        return hex64(fnv1a64(j.dump()));
    }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys,
                           const std::string& where) {
    if (!j.is_object()) throw config_error(where + ": expected an object");
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* k : keys)
            if (item.key() == k) {
                known = true;
                break;
            }
        if (!known) throw config_error(where + ": unknown key \"" + item.key() + "\"");
    }
}

template <class T>
void get_if(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const nlohmann::json::exception& e) {
        throw config_error(where + "." + key + ": " + e.what());
    }
}

}  // namespace detail

// Overlays `j` onto `cfg` (missing keys keep their current values); rejects
// unknown keys at every level.
inline void apply_config_json(ExperimentConfig& cfg, const nlohmann::json& j) {
    using detail::get_if;
    using detail::reject_unknown;
    reject_unknown(j, {"seed", "env", "data", "model", "dpo", "soups", "eval", "workdir"}, "config");
    get_if(j, "seed", cfg.seed, "config");
    get_if(j, "workdir", cfg.workdir, "config");
    if (j.contains("env")) {
        const auto& e = j.at("env");
        reject_unknown(e,
                       {"num_groups", "num_actions", "context_dim", "encoder_w", "encoder_b",
                        "reward_table", "noise_sigma"},
                       "env");
        get_if(e, "num_groups", cfg.env.num_groups, "env");
        get_if(e, "num_actions", cfg.env.num_actions, "env");
        get_if(e, "context_dim", cfg.env.context_dim, "env");
        get_if(e, "encoder_w", cfg.env.encoder_w, "env");
        get_if(e, "encoder_b", cfg.env.encoder_b, "env");
        get_if(e, "reward_table", cfg.env.reward_table, "env");
        get_if(e, "noise_sigma", cfg.env.noise_sigma, "env");
        if (!e.contains("encoder_w") && cfg.env.context_dim != 3) {
            cfg.env.encoder_w.assign(EnvSpec::kEncDim,
                                     std::vector<double>(static_cast<size_t>(cfg.env.context_dim),
                                                         1.0 / (2.0 * cfg.env.context_dim)));
        }
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        reject_unknown(d, {"n_c", "coverage", "T"}, "data");
        get_if(d, "n_c", cfg.data.n_c, "data");
        get_if(d, "coverage", cfg.data.coverage, "data");
        get_if(d, "T", cfg.data.T, "data");
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        reject_unknown(m, {"layers", "heads", "hidden", "max_positions", "num_actions", "context_dim"},
                       "model");
        get_if(m, "layers", cfg.model.layers, "model");
        get_if(m, "heads", cfg.model.heads, "model");
        get_if(m, "hidden", cfg.model.hidden, "model");
        get_if(m, "max_positions", cfg.model.max_positions, "model");
        get_if(m, "num_actions", cfg.model.num_actions, "model");
        get_if(m, "context_dim", cfg.model.context_dim, "model");
    }
    if (j.contains("dpo")) {
        const auto& d = j.at("dpo");
        reject_unknown(d, {"beta", "learning_rate", "epochs", "batch_size", "batch_triples"}, "dpo");
        get_if(d, "beta", cfg.dpo.beta, "dpo");
        get_if(d, "learning_rate", cfg.dpo.learning_rate, "dpo");
        get_if(d, "epochs", cfg.dpo.epochs, "dpo");
        get_if(d, "batch_size", cfg.dpo.batch_size, "dpo");
        get_if(d, "batch_triples", cfg.dpo.batch_triples, "dpo");
    }
    if (j.contains("soups")) {
        const auto& s = j.at("soups");
        reject_unknown(s, {"M"}, "soups");
        get_if(s, "M", cfg.soups.M, "soups");
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        reject_unknown(e, {"L", "turns", "seeds"}, "eval");
        get_if(e, "L", cfg.eval.L, "eval");
        get_if(e, "turns", cfg.eval.turns, "eval");
        get_if(e, "seeds", cfg.eval.seeds, "eval");
    }
}

inline ExperimentConfig preset_config(const std::string& name) {
    ExperimentConfig cfg;  // defaults are the N_c = 500 experiment
    if (name == "paper-500") {
        return cfg;
    }
    if (name == "paper-1000") {
        cfg.data.n_c = 1000;
        return cfg;
    }
    if (name == "ci") {
        cfg.data.n_c = 100;
        cfg.model.layers = 2;
        cfg.model.hidden = 64;
        cfg.dpo.epochs = 10;
        cfg.eval.seeds = {1};
        return cfg;
    }
    throw config_error("unknown preset \"" + name + "\" (expected paper-500, paper-1000, or ci)");
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in.good()) throw config_error("cannot open config file: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw config_error(path.string() + ": " + e.what());
    }
    ExperimentConfig cfg;
    apply_config_json(cfg, j);
    cfg.validate();
    return cfg;
}

}  // namespace ppt
