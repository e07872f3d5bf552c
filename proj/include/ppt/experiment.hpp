#pragma once

#include <atomic>
#include <exception>
#include <filesystem>
#include <thread>
#include <vector>

#include "ppt/checkpoint.hpp"
#include "ppt/config.hpp"
#include "ppt/eval.hpp"

namespace ppt {

struct RunOptions {
    std::filesystem::path workdir;
    bool train_missing = false;
    int jobs = 1;
};

inline std::filesystem::path dataset_path(const std::filesystem::path& workdir, int seed) {
    return workdir / cat("dataset-s", seed, ".jsonl");
}
inline std::filesystem::path ppt_ckpt_path(const std::filesystem::path& workdir, int seed) {
    return workdir / cat("ppt-s", seed, ".json");
}
inline std::filesystem::path ps_ckpt_path(const std::filesystem::path& workdir, int group, int seed) {
    return workdir / cat("ps-g", group + 1, "-s", seed, ".json");
}

inline Rng seed_stream(const ExperimentConfig& cfg, int seed) {
    return Rng(cfg.seed).fork("run").fork(static_cast<uint64_t>(seed));
}

// Generates (if absent) and then loads the per-seed dataset. The on-disk file
// is always the source of truth so fresh and resumed runs see identical data.
inline OfflineDataset ensure_dataset(const ExperimentConfig& cfg, int seed,
                                     const std::filesystem::path& workdir, bool regenerate = false) {
    const auto path = dataset_path(workdir, seed);
    if (regenerate || !std::filesystem::exists(path)) {
        Rng rng = seed_stream(cfg, seed).fork("data");
        OfflineDataset ds = generate_offline(rng, cfg.env, cfg.data.n_c, cfg.data.coverage,
                                             cfg.data.T, static_cast<uint64_t>(seed));
        ds.config_hash = cfg.hash();
        save_dataset(ds, path);
    }
    OfflineDataset ds = load_dataset(path);
    check(ds.config_hash.empty() || ds.config_hash == cfg.hash(),
          "dataset " + path.string() + " was generated under a different config; remove it or change --workdir");
    check(ds.n_c == cfg.data.n_c && ds.T == cfg.data.T && ds.coverage == cfg.data.coverage,
          "dataset " + path.string() + " does not match the requested data config");
    return ds;
}

namespace detail {

inline nlohmann::json model_cfg_json(const ModelConfig& m) {
    return {{"layers", m.layers},     {"heads", m.heads},
            {"hidden", m.hidden},     {"max_positions", m.max_positions},
            {"num_actions", m.num_actions}, {"context_dim", m.context_dim}};
}

inline nlohmann::json report_json(const TrainReport& r) {
    return {{"label", r.label},
            {"initial_loss", r.initial_loss},
            {"final_loss", r.final_loss},
            {"epoch_mean_loss", r.epoch_mean_loss},
            {"steps", r.steps},
            {"wall_seconds", r.wall_seconds},
            {"beta", r.config.beta},
            {"learning_rate", r.config.learning_rate},
            {"epochs", r.config.epochs},
            {"batch_size", r.config.batch_size},
            {"batch_triples", r.config.batch_triples}};
}

inline void verify_ckpt_meta(const nlohmann::json& meta, const ExperimentConfig& cfg, int seed,
                             const std::filesystem::path& path) {
    check(meta.value("config_hash", std::string()) == cfg.hash(),
          "checkpoint " + path.string() + " was trained under a different config; remove it or change --workdir");
    check(meta.value("seed", -1) == seed, "checkpoint " + path.string() + " has a mismatched seed");
    check(meta.value("model", nlohmann::json()) == model_cfg_json(cfg.model),
          "checkpoint " + path.string() + " has a mismatched model configuration");
}

}  // namespace detail

// Loads the history-dependent policy for one seed, training and saving it
// first when permitted.
inline ParamStore ensure_ppt(const ExperimentConfig& cfg, int seed, const OfflineDataset& ds,
                             const std::filesystem::path& workdir, bool train_missing,
                             std::vector<TrainReport>* reports = nullptr) {
    const auto path = ppt_ckpt_path(workdir, seed);
    if (!std::filesystem::exists(path)) {
        check(train_missing, "missing checkpoint " + path.string() +
                                 "; run the train-ppt subcommand first or pass --train-missing");
        Rng rng = seed_stream(cfg, seed).fork("ppt");
        auto [params, report] = train_ppt(rng, ds, cfg.model, cfg.dpo);
        nlohmann::json meta = {{"config_hash", cfg.hash()},
                               {"seed", seed},
                               {"label", report.label},
                               {"model", detail::model_cfg_json(cfg.model)},
                               {"report", detail::report_json(report)}};
        save_checkpoint(path, params, meta);
        if (reports) reports->push_back(std::move(report));
    }
    nlohmann::json meta;
    ParamStore params = load_checkpoint(path, &meta);
    detail::verify_ckpt_meta(meta, cfg, seed, path);
    return params;
}

// Loads the K per-group baseline models for one seed, training and saving
// them first when permitted. Either every checkpoint exists or none may.
inline std::vector<ParamStore> ensure_ps(const ExperimentConfig& cfg, int seed,
                                         const OfflineDataset& ds,
                                         const std::filesystem::path& workdir, bool train_missing,
                                         std::vector<TrainReport>* reports = nullptr) {
    const int K = cfg.env.num_groups;
    int present = 0;
    for (int g = 0; g < K; ++g)
        if (std::filesystem::exists(ps_ckpt_path(workdir, g, seed))) ++present;
    if (present != 0 && present != K)
        throw check_error(cat("found ", present, " of ", K,
                              " per-group checkpoints for seed ", seed,
                              "; remove the partial set and retrain"));
    if (present == 0) {
        check(train_missing, "missing checkpoint " + ps_ckpt_path(workdir, 0, seed).string() +
                                 "; run the train-ps subcommand first or pass --train-missing");
        Rng rng = seed_stream(cfg, seed).fork("ps");
        auto [models, group_reports] = train_ps_models(rng, ds, cfg.model, cfg.dpo);
        for (int g = 0; g < K; ++g) {
            nlohmann::json meta = {{"config_hash", cfg.hash()},
                                   {"seed", seed},
                                   {"label", group_reports[static_cast<size_t>(g)].label},
                                   {"model", detail::model_cfg_json(cfg.model)},
                                   {"report", detail::report_json(group_reports[static_cast<size_t>(g)])}};
            save_checkpoint(ps_ckpt_path(workdir, g, seed), models[static_cast<size_t>(g)], meta);
        }
        if (reports)
            for (auto& r : group_reports) reports->push_back(std::move(r));
    }
    std::vector<ParamStore> models;
    for (int g = 0; g < K; ++g) {
        nlohmann::json meta;
        models.push_back(load_checkpoint(ps_ckpt_path(workdir, g, seed), &meta));
        detail::verify_ckpt_meta(meta, cfg, seed, ps_ckpt_path(workdir, g, seed));
    }
    return models;
}

struct SeedEvalResult {
    int seed = 0;
    CurveTable table;  // ppt block then ps block, users in order, turns ascending
    std::vector<TrainReport> reports;
    std::vector<PsSelectionTrace> traces;
    std::vector<double> mixed_weights;
    double s_bar_test = 0.0;
};

inline SeedEvalResult run_seed(const ExperimentConfig& cfg, int seed, const RunOptions& opt) {
    SeedEvalResult out;
    out.seed = seed;

    OfflineDataset ds = ensure_dataset(cfg, seed, opt.workdir);
    ParamStore ppt_params = ensure_ppt(cfg, seed, ds, opt.workdir, opt.train_missing, &out.reports);
    std::vector<ParamStore> ps_models =
        ensure_ps(cfg, seed, ds, opt.workdir, opt.train_missing, &out.reports);

    Rng soup_rng = seed_stream(cfg, seed).fork("soup");
    SoupEnsemble ensemble = build_ensemble(soup_rng, cfg.model, std::move(ps_models), cfg.soups.M);

    Rng eval_rng = seed_stream(cfg, seed).fork("eval");
    Rng ctx_rng = eval_rng.fork("contexts");
    auto [test, val] = pick_eval_contexts(ctx_rng, ds, cfg.eval.L, cfg.eval.turns);
    for (const auto& x : test) out.s_bar_test += cfg.env.context_scale(x);
    out.s_bar_test /= static_cast<double>(test.size());

    Rng mix_rng = eval_rng.fork("mixed-user");
    UserProfile mixed = sample_mixed_user(mix_rng, cfg.env.num_groups);
    out.mixed_weights = mixed.weights;

    std::vector<std::pair<std::string, UserProfile>> users;
    for (int g = 0; g < cfg.env.num_groups; ++g)
        users.push_back({cat("group", g + 1), UserProfile::pure(g, cfg.env.num_groups)});
    users.push_back({"mixed", mixed});

    for (const auto& [label, user] : users) {
        Rng r = eval_rng.fork("ppt-" + label);
        CurveTable t = eval_ppt_online(r, ppt_params, cfg.model, cfg.env, user, label, seed, test, val);
        out.table.insert(out.table.end(), t.begin(), t.end());
    }
    for (const auto& [label, user] : users) {
        Rng r = eval_rng.fork("ps-" + label);
        PsSelectionTrace trace;
        CurveTable t = eval_ps_online(r, ensemble, cfg.env, user, label, seed, test, val, &trace);
        out.table.insert(out.table.end(), t.begin(), t.end());
        out.traces.push_back(std::move(trace));
    }
    return out;
}

struct ExperimentResult {
    CurveTable table;
    std::vector<TrainReport> reports;
    std::vector<PsSelectionTrace> traces;
    nlohmann::json meta;  // config_hash, seeds, per-seed s_bar and mixed weights
};

// Full protocol: per seed, make sure data and checkpoints exist, build the
// interpolated ensemble, and evaluate both methods on the shared context
// sets. Seeds fan out over `jobs` threads; results are assembled in config
// order regardless of completion order.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opt) {
    cfg.validate();
    std::filesystem::create_directories(opt.workdir);

    const auto& seeds = cfg.eval.seeds;
    std::vector<SeedEvalResult> results(seeds.size());
    std::vector<std::exception_ptr> errors(seeds.size());

    const int jobs = std::max(1, std::min<int>(opt.jobs, static_cast<int>(seeds.size())));
    if (jobs == 1) {
        for (size_t i = 0; i < seeds.size(); ++i) {
            try {
                results[i] = run_seed(cfg, seeds[i], opt);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    } else {
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int j = 0; j < jobs; ++j)
            pool.emplace_back([&] {
                for (size_t i = next.fetch_add(1); i < seeds.size(); i = next.fetch_add(1)) {
                    try {
                        results[i] = run_seed(cfg, seeds[i], opt);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        for (auto& t : pool) t.join();
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    ExperimentResult out;
    out.meta = {{"config_hash", cfg.hash()}, {"seeds", seeds}};
    nlohmann::json s_bar = nlohmann::json::object();
    nlohmann::json mixed = nlohmann::json::object();
    for (auto& r : results) {
        out.table.insert(out.table.end(), r.table.begin(), r.table.end());
        for (auto& rep : r.reports) out.reports.push_back(std::move(rep));
        for (auto& tr : r.traces) out.traces.push_back(std::move(tr));
        s_bar[std::to_string(r.seed)] = r.s_bar_test;
        mixed[std::to_string(r.seed)] = r.mixed_weights;
    }
    out.meta["s_bar"] = std::move(s_bar);
    out.meta["mixed_weights"] = std::move(mixed);
    return out;
}

}  // namespace ppt
