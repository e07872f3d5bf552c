#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ppt/gradcheck.hpp"
#include "ppt/report.hpp"
#include "ppt/selftest.hpp"

namespace fs = std::filesystem;
using namespace ppt;
namespace st = ppt::selftest::detail;

namespace {

constexpr double kLn2 = 0.6931471805599453;

struct Verdict {
    int num;
    std::string name;
    bool ok;
    std::string detail;
};

std::vector<Verdict> g_verdicts;

void record(int num, const std::string& name, bool ok, const std::string& detail) {
    g_verdicts.push_back({num, name, ok, detail});
    std::cout << "[info] finished check " << num << " (" << name << "): "
              << (ok ? "ok" : "FAILED") << "\n"
              << std::flush;
}

void info(const std::string& msg) { std::cout << "[info] " << msg << "\n" << std::flush; }

struct CmdResult {
    int code = -1;
    std::string out;
    double seconds = 0.0;
};

CmdResult run_cmd(const std::string& cmd) {
    const auto t0 = std::chrono::steady_clock::now();
    CmdResult r;
    FILE* pipe = popen(("env -u PPT_WORKDIR " + cmd + " 2>&1").c_str(), "r");
    if (pipe == nullptr) {
        r.out = "popen failed";
        return r;
    }
    char buf[4096];
    size_t n = 0;
    while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) r.out.append(buf, n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

std::string tail_lines(const std::string& s, int keep = 8) {
    std::vector<std::string> lines;
    std::stringstream ss(s);
    std::string line;
    while (std::getline(ss, line)) lines.push_back(line);
    std::string out;
    const size_t start = lines.size() > static_cast<size_t>(keep) ? lines.size() - keep : 0;
    for (size_t i = start; i < lines.size(); ++i) out += lines[i] + (i + 1 < lines.size() ? " | " : "");
    return out;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

// ---- library-level checks ----

void check_ln2_anchor() {
    double dev = 0.0;
    Rng r(101);
    for (int trial = 0; trial < 5; ++trial) {
        const ModelConfig cfg = st::tiny_model();
        HistorySequence s1 = st::random_sequence(r, 2 + trial, 0);
        HistorySequence s2 = st::random_sequence(r, 7 - trial, 1);
        ParamStore p = init_params(Rng(200 + static_cast<uint64_t>(trial)), cfg);
        dev = std::max(dev, std::fabs(history_dpo_loss(p, cfg, {&s1, &s2}, {}, 1.0) - kLn2));
        std::vector<PreferenceTriple> ts;
        for (int i = 0; i < 6; ++i) ts.push_back(st::random_triple(r));
        dev = std::max(dev, std::fabs(standard_dpo_loss(p, cfg, ts, {}, 1.0) - kLn2));
    }
    const ModelConfig full;
    ParamStore p = init_params(Rng(300), full);
    HistorySequence s = st::random_sequence(r, 15, 2);
    dev = std::max(dev, std::fabs(history_dpo_loss(p, full, {&s}, {}, 1.0) - kLn2));
    record(3, "fresh-head loss anchor", dev <= 1e-9,
           "max |loss - ln 2| = " + fmt(dev) + " over 11 batches (tol 1e-9)");
}

void check_gradients() {
    const ModelConfig cfg = st::tiny_model();
    double worst = 0.0;
    std::string worst_param;
    for (int restart = 0; restart < 5; ++restart) {
        Rng r(500 + static_cast<uint64_t>(restart));
        ParamStore params = st::random_model(Rng(600 + static_cast<uint64_t>(restart)), cfg);
        HistorySequence s1 = st::random_sequence(r, 3, 0);
        HistorySequence s2 = st::random_sequence(r, 2, 1);
        DpoBatch batch = make_sequence_batch(cfg, {&s1, &s2});
        GradcheckResult res = gradcheck(
            params,
            [&](Tape& tape, const ParamRefs& refs) {
                return dpo_loss_graph(tape, refs, cfg, batch, ReferencePolicy{}, 1.0);
            },
            1e-6);
        if (res.max_rel_err > worst) {
            worst = res.max_rel_err;
            worst_param = res.worst_param;
        }
    }
    record(4, "finite-difference gradient oracle", worst <= 1e-5,
           "worst relative error " + fmt(worst) + " (" + worst_param +
               ") over 5 restarts x " + cat(param_count(init_params(Rng(1), cfg))) +
               " parameters (tol 1e-5)");
}

void check_preference_sampler() {
    EnvSpec spec = EnvSpec::defaults();
    spec.noise_sigma = 0.0;
    const Context x{{0.5, 0.5, 0.5}};  // context scale exactly 1
    const UserProfile g1 = UserProfile::pure(0, 3);
    Rng r = Rng(7).fork("bt-check");
    const int n = 20000;
    int wins = 0;
    for (int i = 0; i < n; ++i) {
        auto [w, l] = spec.sample_preference(r, g1, 0, 1, x);  // reward gap 7 - 5 = 2
        wins += w == 0 ? 1 : 0;
    }
    const double freq = static_cast<double>(wins) / n;
    record(5, "pairwise comparison sampler", std::fabs(freq - 0.8808) <= 0.010,
           "winner frequency " + fmt(freq) + " at gap 2 over 20000 draws (want 0.8808 +/- 0.010)");
}

void check_soup_identities() {
    const ModelConfig cfg = st::tiny_model();
    std::vector<ParamStore> base = {st::random_model(Rng(701), cfg), st::random_model(Rng(702), cfg),
                                    st::random_model(Rng(703), cfg)};
    Rng sr = Rng(704).fork("soup");
    SoupEnsemble ens = build_ensemble(sr, cfg, base, 8);

    bool vertex_ok = true;
    for (int g = 0; g < 3; ++g)
        vertex_ok = vertex_ok && st::same_bits(ens.materialize(g), base[static_cast<size_t>(g)]);

    bool hull_ok = true;
    Rng wr(705);
    for (int trial = 0; trial < 10; ++trial) {
        ParamStore mix = interpolate(base, wr.dirichlet_uniform(3));
        auto i0 = base[0].begin();
        auto i1 = base[1].begin();
        auto i2 = base[2].begin();
        for (const auto& [name, t] : mix) {
            for (size_t k = 0; k < t.data.size(); ++k) {
                const double lo =
                    std::min({i0->second.data[k], i1->second.data[k], i2->second.data[k]});
                const double hi =
                    std::max({i0->second.data[k], i1->second.data[k], i2->second.data[k]});
                if (t.data[k] < lo - 1e-15 || t.data[k] > hi + 1e-15) hull_ok = false;
            }
            ++i0;
            ++i1;
            ++i2;
        }
    }

    Rng cr(706);
    std::vector<Context> test, val;
    for (int i = 0; i < 3; ++i) test.push_back(sample_context(cr, 3));
    for (int i = 0; i < 5; ++i) val.push_back(sample_context(cr, 3));
    Rng er = Rng(707).fork("ps-run");
    PsSelectionTrace trace;
    eval_ps_online(er, ens, EnvSpec::defaults(), UserProfile::pure(1, 3), "g2", 1, test, val, &trace);

    double score_dev = 0.0;
    std::vector<double> recomputed(static_cast<size_t>(ens.size()), 0.0);
    for (size_t t = 0; t < trace.entries.size(); ++t) {
        for (int i = 0; i < ens.size(); ++i)
            recomputed[static_cast<size_t>(i)] +=
                log_prob_empty_history(ens.materialize(i), cfg, val[t], trace.entries[t].winner);
        const auto best = static_cast<size_t>(trace.entries[t].best_index);
        score_dev = std::max(score_dev, std::fabs(recomputed[best] - trace.entries[t].best_score));
    }
    for (int i = 0; i < ens.size(); ++i)
        score_dev = std::max(score_dev, std::fabs(recomputed[static_cast<size_t>(i)] -
                                                  trace.final_scores[static_cast<size_t>(i)]));

    record(6, "soup interpolation identities", vertex_ok && hull_ok && score_dev <= 1e-9,
           std::string("vertex copy ") + (vertex_ok ? "exact" : "BROKEN") + ", hull bound " +
               (hull_ok ? "holds" : "BROKEN") + ", trace score recomputation dev " + fmt(score_dev) +
               " (tol 1e-9)");
}

void check_data_accounting() {
    Rng r = Rng(1).fork("data");
    OfflineDataset ds = generate_offline(r, EnvSpec::defaults(), 500, {1.0, 0.8, 0.6}, 15, 1);
    const bool ok = ds.pool_size(0) == 500 && ds.pool_size(1) == 400 && ds.pool_size(2) == 300 &&
                    ds.sequences[0].size() == 33 && ds.sequences[1].size() == 26 &&
                    ds.sequences[2].size() == 20;
    record(7, "offline data accounting", ok,
           cat("pools (", ds.pool_size(0), ", ", ds.pool_size(1), ", ", ds.pool_size(2),
               "), sequences (", ds.sequences[0].size(), ", ", ds.sequences[1].size(), ", ",
               ds.sequences[2].size(), ") for 500 contexts at coverage (1.0, 0.8, 0.6)"));
}

void check_causality() {
    const ModelConfig cfg = st::tiny_model();
    Rng r(801);
    bool ok = true;
    for (int trial = 0; trial < 20; ++trial) {
        ParamStore p = st::random_model(Rng(900 + static_cast<uint64_t>(trial)), cfg);
        const int len = 2 + static_cast<int>(r.below(7));
        Tensor tokens({len, cfg.token_dim()});
        for (double& v : tokens.data) v = r.uniform();
        const auto t = static_cast<int64_t>(r.below(static_cast<uint64_t>(len)));
        const auto col = static_cast<int64_t>(r.below(static_cast<uint64_t>(cfg.token_dim())));

        Tensor base = forward(p, cfg, tokens);
        Tensor bumped = tokens;
        bumped.at(t, col) += 0.9;
        Tensor after = forward(p, cfg, bumped);
        for (int64_t i = 0; i < t; ++i)
            if (std::memcmp(base.data.data() + i * base.cols(), after.data.data() + i * after.cols(),
                            static_cast<size_t>(base.cols()) * sizeof(double)) != 0)
                ok = false;
    }
    record(8, "per-position causality", ok,
           ok ? "positions before every perturbed token bit-identical in 20 random cases"
              : "an earlier position changed after a later-token perturbation");
}

// ---- pipeline-level checks through the command-line binary ----

struct PresetRun {
    bool ok = false;
    double seconds = 0.0;
    std::vector<SummaryRow> rows;
    double s_bar_mean = 0.0;
    std::string err;
};

PresetRun run_preset(const std::string& cli, const std::string& preset, const fs::path& wd) {
    PresetRun pr;
    info("running " + preset + " pipeline (train + eval, seeds from the preset) ...");
    CmdResult r = run_cmd("'" + cli + "' --preset " + preset + " --workdir '" + wd.string() +
                          "' eval --train-missing");
    pr.seconds = r.seconds;
    if (r.code != 0) {
        pr.err = preset + " exited " + cat(r.code) + ": " + tail_lines(r.out);
        return pr;
    }
    try {
        pr.rows = summarize(read_csv(wd / "eval.csv"));
        const nlohmann::json meta = nlohmann::json::parse(slurp(csv_meta_path(wd / "eval.csv")));
        int n = 0;
        for (const auto& [seed, v] : meta.at("s_bar").items()) {
            pr.s_bar_mean += v.get<double>();
            ++n;
        }
        pr.s_bar_mean /= n;
        pr.ok = true;
    } catch (const std::exception& e) {
        pr.err = preset + " output unreadable: " + e.what();
    }
    info(preset + " finished in " + fmt(pr.seconds) + "s");
    return pr;
}

const SummaryRow* find_row(const std::vector<SummaryRow>& rows, const std::string& method,
                           const std::string& user, int turn) {
    for (const auto& r : rows)
        if (r.method == method && r.user == user && r.turn == turn) return &r;
    return nullptr;
}

struct ShapeCheck {
    bool ok = true;
    std::string detail;
};

// per pure group: turn-15 reward at least 1.0 above turn 1; per panel: final
// ppt reward at or above final ps reward
ShapeCheck shape_conditions(const PresetRun& pr, int last_turn) {
    ShapeCheck s;
    if (!pr.ok) return {false, pr.err};
    std::string gains = "gains";
    for (const std::string& g : {"group1", "group2", "group3"}) {
        const SummaryRow* first = find_row(pr.rows, "ppt", g, 1);
        const SummaryRow* last = find_row(pr.rows, "ppt", g, last_turn);
        if (first == nullptr || last == nullptr) return {false, "missing rows for " + g};
        const double gain = last->reward_mean - first->reward_mean;
        gains += " " + g + " " + (gain >= 0 ? "+" : "") + fmt(gain);
        if (gain < 1.0) s.ok = false;
    }
    int dominated = 0;
    for (const std::string& u : {"group1", "group2", "group3", "mixed"}) {
        const SummaryRow* ppt = find_row(pr.rows, "ppt", u, last_turn);
        const SummaryRow* ps = find_row(pr.rows, "ps", u, last_turn);
        if (ppt == nullptr || ps == nullptr) return {false, "missing final rows for " + u};
        if (ppt->reward_mean >= ps->reward_mean) ++dominated;
    }
    if (dominated < 4) s.ok = false;
    s.detail = gains + " (want >= +1.0); final ppt >= ps in " + cat(dominated) + "/4 panels";
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    std::string cli;
    fs::path workdir;
    for (int i = 1; i + 1 < argc; i += 2) {
        const std::string flag = argv[i];
        if (flag == "--ppt")
            cli = argv[i + 1];
        else if (flag == "--workdir")
            workdir = argv[i + 1];
        else {
            std::cerr << "unknown flag " << flag << "\n";
            return 2;
        }
    }
    if (cli.empty() || workdir.empty()) {
        std::cerr << "usage: acceptance --ppt <cli-binary> --workdir <scratch-dir>\n";
        return 2;
    }
    fs::create_directories(workdir);

    check_ln2_anchor();
    check_gradients();
    check_preference_sampler();
    check_soup_identities();
    check_data_accounting();
    check_causality();

    // ci preset end to end, timed together with the invariant suite
    const fs::path ci_a = workdir / "ci-a";
    const fs::path ci_b = workdir / "ci-b";
    fs::remove_all(ci_a);
    fs::remove_all(ci_b);
    info("running ci pipeline twice plus selftest ...");
    CmdResult ci1 = run_cmd("'" + cli + "' --preset ci --workdir '" + ci_a.string() +
                            "' eval --train-missing");
    CmdResult self = run_cmd("'" + cli + "' selftest");
    const double ci_total = ci1.seconds + self.seconds;
    record(10, "ci pipeline plus selftest", ci1.code == 0 && self.code == 0 && ci_total <= 300.0,
           "pipeline " + fmt(ci1.seconds) + "s + selftest " + fmt(self.seconds) + "s = " +
               fmt(ci_total) + "s (limit 300s)" +
               (ci1.code == 0 ? "" : "; pipeline failed: " + tail_lines(ci1.out)) +
               (self.code == 0 ? "" : "; selftest failed: " + tail_lines(self.out)));

    CmdResult ci2 = run_cmd("'" + cli + "' --preset ci --workdir '" + ci_b.string() +
                            "' eval --train-missing");
    CmdResult ci3 = run_cmd("'" + cli + "' --preset ci --workdir '" + ci_a.string() + "' eval");
    const std::string bytes_a = slurp(ci_a / "eval.csv");
    const bool det_ok = ci2.code == 0 && ci3.code == 0 && !bytes_a.empty() &&
                        bytes_a == slurp(ci_b / "eval.csv") && bytes_a == slurp(ci_a / "eval.csv");
    record(9, "byte-identical repeated evaluation", det_ok,
           det_ok ? "fresh-workdir rerun and checkpoint-reload rerun both byte-identical"
                  : "eval tables differ across identical runs");

    // the two paper-scale presets back the curve-shape and quality conditions
    PresetRun p500 = run_preset(cli, "paper-500", workdir / "paper-500");
    PresetRun p1000 = run_preset(cli, "paper-1000", workdir / "paper-1000");
    info("paper-500 wall " + fmt(p500.seconds) + "s (reported target 3600s); paper-1000 wall " +
         fmt(p1000.seconds) + "s (reported target 2x = " + fmt(2 * p500.seconds) + "s)");

    const ShapeCheck s500 = shape_conditions(p500, 15);
    const ShapeCheck s1000 = shape_conditions(p1000, 15);
    record(1, "online gain and final dominance", s500.ok && s1000.ok,
           "500: " + s500.detail + " | 1000: " + s1000.detail);

    bool acc_ok = p500.ok;
    bool ps_floor_ok = p500.ok;
    std::string detail2;
    if (p500.ok) {
        std::string accs = "final ppt accuracy";
        std::string floors = "final ps reward vs uniform 4.0*s_bar=" + fmt(4.0 * p500.s_bar_mean);
        for (const std::string& g : {"group1", "group2", "group3"}) {
            const SummaryRow* acc = find_row(p500.rows, "ppt", g, 15);
            const SummaryRow* ps = find_row(p500.rows, "ps", g, 15);
            if (acc == nullptr || ps == nullptr) {
                acc_ok = ps_floor_ok = false;
                break;
            }
            accs += " " + g + " " + fmt(acc->accuracy_mean);
            floors += " " + g + " " + fmt(ps->reward_mean);
            if (acc->accuracy_mean < 0.8) acc_ok = false;
            if (ps->reward_mean < 4.0 * p500.s_bar_mean) ps_floor_ok = false;
        }
        detail2 = accs + " (want >= 0.8); " + floors;
    } else {
        detail2 = p500.err;
    }
    record(2, "personalization quality", acc_ok && ps_floor_ok, detail2);

    std::sort(g_verdicts.begin(), g_verdicts.end(),
              [](const Verdict& a, const Verdict& b) { return a.num < b.num; });
    int failures = 0;
    std::cout << "\n";
    for (const auto& v : g_verdicts) {
        std::cout << (v.ok ? "[PASS] " : "[FAIL] ") << v.num << ". " << v.name << ": " << v.detail
                  << "\n";
        if (!v.ok) ++failures;
    }
    std::cout << "acceptance: " << (g_verdicts.size() - static_cast<size_t>(failures)) << "/"
              << g_verdicts.size() << " passed\n";
    return failures == 0 ? 0 : 1;
}
