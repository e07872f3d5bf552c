#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ppt/config.hpp"
#include "ppt/experiment.hpp"
#include "ppt/report.hpp"
#include "ppt/selftest.hpp"

namespace fs = std::filesystem;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::string preset;
    std::string workdir;
    uint64_t seed = 0;
    bool seed_set = false;
    int jobs = 1;
};

ppt::ExperimentConfig resolve_config(const GlobalArgs& args) {
    ppt::ExperimentConfig cfg;
    if (!args.config_path.empty())
        cfg = ppt::load_config(args.config_path);
    else
        cfg = ppt::preset_config(args.preset.empty() ? "paper-500" : args.preset);
    if (args.seed_set) cfg.seed = args.seed;
    cfg.validate();
    return cfg;
}

fs::path resolve_workdir(const GlobalArgs& args, const ppt::ExperimentConfig& cfg) {
    if (!args.workdir.empty()) return args.workdir;
    if (const char* env = std::getenv("PPT_WORKDIR"); env != nullptr && *env != '\0') return env;
    if (!cfg.workdir.empty()) return cfg.workdir;
    if (!args.config_path.empty()) return fs::path("runs") / ("config-" + cfg.hash().substr(0, 8));
    return fs::path("runs") / (args.preset.empty() ? "paper-500" : args.preset);
}

void log_event(const fs::path& workdir, const nlohmann::json& event) {
    std::ofstream out(workdir / "runlog.jsonl", std::ios::app);
    ppt::check(out.good(), "cannot append to " + (workdir / "runlog.jsonl").string());
    out << event.dump() << "\n";
}

void log_reports(const fs::path& wd, const std::string& hash,
                 const std::vector<ppt::TrainReport>& reports) {
    for (const auto& r : reports)
        log_event(wd, {{"event", "train"}, {"config_hash", hash}, {"report", ppt::detail::report_json(r)}});
}

int cmd_gen_data(const ppt::ExperimentConfig& cfg, const fs::path& wd, bool regenerate) {
    fs::create_directories(wd);
    for (int seed : cfg.eval.seeds) {
        ppt::OfflineDataset ds = ppt::ensure_dataset(cfg, seed, wd, regenerate);
        nlohmann::json pools = nlohmann::json::array();
        std::cout << "seed " << seed << ": " << ppt::dataset_path(wd, seed).filename().string();
        for (int g = 0; g < ds.num_groups(); ++g) {
            pools.push_back({{"group", g + 1},
                             {"triples", ds.pool_size(g)},
                             {"sequences", ds.sequences[static_cast<size_t>(g)].size()},
                             {"remainder", ds.remainders[static_cast<size_t>(g)].size()}});
            std::cout << (g == 0 ? "  " : "  |  ") << "group " << g + 1 << ": "
                      << ds.pool_size(g) << " triples, "
                      << ds.sequences[static_cast<size_t>(g)].size() << " sequences, "
                      << ds.remainders[static_cast<size_t>(g)].size() << " leftover";
        }
        std::cout << "\n";
        log_event(wd, {{"event", "gen_data"},
                       {"config_hash", cfg.hash()},
                       {"seed", seed},
                       {"path", ppt::dataset_path(wd, seed).filename().string()},
                       {"groups", pools}});
    }
    return 0;
}

int cmd_train_ppt(const ppt::ExperimentConfig& cfg, const fs::path& wd) {
    fs::create_directories(wd);
    for (int seed : cfg.eval.seeds) {
        ppt::OfflineDataset ds = ppt::ensure_dataset(cfg, seed, wd);
        std::vector<ppt::TrainReport> reports;
        ppt::ensure_ppt(cfg, seed, ds, wd, true, &reports);
        if (reports.empty()) {
            std::cout << "seed " << seed << ": " << ppt::ppt_ckpt_path(wd, seed).filename().string()
                      << " already trained, skipping\n";
            continue;
        }
        const auto& r = reports.front();
        std::cout << "seed " << seed << ": loss " << r.initial_loss << " -> " << r.final_loss
                  << " over " << r.steps << " steps (" << r.wall_seconds << "s)\n";
        log_reports(wd, cfg.hash(), reports);
    }
    return 0;
}

int cmd_train_ps(const ppt::ExperimentConfig& cfg, const fs::path& wd) {
    fs::create_directories(wd);
    for (int seed : cfg.eval.seeds) {
        ppt::OfflineDataset ds = ppt::ensure_dataset(cfg, seed, wd);
        std::vector<ppt::TrainReport> reports;
        ppt::ensure_ps(cfg, seed, ds, wd, true, &reports);
        if (reports.empty()) {
            std::cout << "seed " << seed << ": all group models already trained, skipping\n";
            continue;
        }
        for (const auto& r : reports)
            std::cout << "seed " << seed << " " << r.label << ": loss " << r.initial_loss << " -> "
                      << r.final_loss << " over " << r.steps << " steps (" << r.wall_seconds
                      << "s)\n";
        log_reports(wd, cfg.hash(), reports);
    }
    return 0;
}

void print_digest(const ppt::ExperimentConfig& cfg, const ppt::CurveTable& table) {
    const auto rows = ppt::summarize(table);
    for (int turn : {1, cfg.eval.turns}) {
        std::cout << "turn " << turn << ":\n";
        for (const auto& r : rows) {
            if (r.turn != turn) continue;
            std::cout << "  " << r.method << " / " << r.user << ": reward " << r.reward_mean
                      << " +/- " << r.reward_stderr << ", accuracy " << r.accuracy_mean << "\n";
        }
    }
}

int cmd_eval(const ppt::ExperimentConfig& cfg, const fs::path& wd, bool train_missing, int jobs) {
    ppt::RunOptions opt;
    opt.workdir = wd;
    opt.train_missing = train_missing;
    opt.jobs = jobs;
    ppt::ExperimentResult res = ppt::run_experiment(cfg, opt);

    const fs::path csv = wd / "eval.csv";
    ppt::write_csv(res.table, csv);
    std::ofstream meta(ppt::csv_meta_path(csv), std::ios::trunc);
    ppt::check(meta.good(), "cannot write " + ppt::csv_meta_path(csv).string());
    meta << res.meta.dump(2) << "\n";
    meta.close();
    ppt::check(meta.good(), "write failed: " + ppt::csv_meta_path(csv).string());

    log_reports(wd, cfg.hash(), res.reports);
    log_event(wd, {{"event", "eval"},
                   {"config_hash", cfg.hash()},
                   {"rows", res.table.size()},
                   {"csv", csv.filename().string()},
                   {"meta", res.meta}});

    std::cout << "wrote " << csv.string() << " (" << res.table.size() << " rows)\n";
    print_digest(cfg, res.table);
    return 0;
}

int cmd_report(const fs::path& wd, std::vector<std::string> csvs, std::string out_dir) {
    if (csvs.empty()) csvs.push_back((wd / "eval.csv").string());
    if (out_dir.empty()) out_dir = (wd / "report").string();
    std::vector<fs::path> paths(csvs.begin(), csvs.end());
    ppt::Report rep = ppt::build_report(paths);
    ppt::write_report_files(rep, out_dir);
    std::cout << "config " << rep.config_hash << ", " << rep.summary.size()
              << " summary rows from " << paths.size() << " table(s)\n";
    for (const char* name : {"summary.csv", "rewards.svg", "accuracy.svg"})
        std::cout << "wrote " << (fs::path(out_dir) / name).string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Personalized preference-tuning workbench"};
    app.require_subcommand(1);

    GlobalArgs args;
    auto* config_opt = app.add_option("--config", args.config_path, "JSON config file");
    auto* preset_opt =
        app.add_option("--preset", args.preset, "named preset: paper-500, paper-1000, ci");
    config_opt->excludes(preset_opt);
    preset_opt->excludes(config_opt);
    auto* seed_opt = app.add_option("--seed", args.seed, "override the master seed");
    app.add_option("--workdir", args.workdir, "working directory (or set PPT_WORKDIR)");
    app.add_option("--jobs", args.jobs, "parallel evaluation seeds")->check(CLI::Range(1, 64));

    auto* gen = app.add_subcommand("gen-data", "generate the offline preference datasets");
    bool fresh = false;
    gen->add_flag("--fresh", fresh, "regenerate even if the dataset files exist");
    auto* tppt = app.add_subcommand("train-ppt", "train the history-conditioned policy");
    auto* tps = app.add_subcommand("train-ps", "train the per-group policies");
    auto* ev = app.add_subcommand("eval", "run the online personalization comparison");
    bool train_missing = false;
    ev->add_flag("--train-missing", train_missing, "train any missing checkpoints first");
    auto* rep = app.add_subcommand("report", "summarize evaluation tables");
    std::vector<std::string> rep_csvs;
    std::string rep_out;
    rep->add_option("--csv", rep_csvs, "evaluation tables to merge");
    rep->add_option("--out", rep_out, "report output directory");
    auto* self = app.add_subcommand("selftest", "run the built-in invariant checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }
    args.seed_set = seed_opt->count() > 0;

    try {
        if (self->parsed()) return ppt::selftest::run_selftest(std::cout) == 0 ? 0 : 2;

        const ppt::ExperimentConfig cfg = resolve_config(args);
        const fs::path wd = resolve_workdir(args, cfg);
        std::cout << "config " << cfg.hash() << ", workdir " << wd.string() << "\n";

        if (gen->parsed()) return cmd_gen_data(cfg, wd, fresh);
        if (tppt->parsed()) return cmd_train_ppt(cfg, wd);
        if (tps->parsed()) return cmd_train_ps(cfg, wd);
        if (ev->parsed()) return cmd_eval(cfg, wd, train_missing, args.jobs);
        if (rep->parsed()) return cmd_report(wd, rep_csvs, rep_out);
        return 1;
    } catch (const ppt::config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
