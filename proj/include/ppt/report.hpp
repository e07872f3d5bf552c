#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ppt/eval.hpp"

namespace ppt {

struct Report {
    std::string config_hash;
    std::vector<int> seeds;
    std::vector<SummaryRow> summary;
};

inline std::filesystem::path csv_meta_path(const std::filesystem::path& csv) {
    return std::filesystem::path(csv.string() + ".meta.json");
}

// Merges one or more curve CSVs. Every CSV must carry a sidecar meta file and
// all sidecars must agree on the config hash; mixing runs from different
// configurations is refused.
inline Report build_report(const std::vector<std::filesystem::path>& csvs) {
    check(!csvs.empty(), "report: no csv inputs");
    Report rep;
    CurveTable merged;
    for (const auto& csv : csvs) {
        CurveTable t = read_csv(csv);
        const auto meta_path = csv_meta_path(csv);
        std::ifstream mf(meta_path);
        check(mf.good(), "missing meta sidecar " + meta_path.string() +
                             " (eval writes it next to the csv); cannot verify the config hash");
        nlohmann::json meta;
        try {
            meta = nlohmann::json::parse(mf);
        } catch (const nlohmann::json::exception& e) {
            throw check_error(meta_path.string() + ": " + e.what());
        }
        const std::string hash = meta.value("config_hash", std::string());
        check(!hash.empty(), meta_path.string() + ": no config_hash");
        if (rep.config_hash.empty())
            rep.config_hash = hash;
        else
            check(rep.config_hash == hash,
                  "refusing to aggregate " + csv.string() + ": config hash mismatch (" + hash +
                      " vs " + rep.config_hash + ")");
        for (int s : meta.value("seeds", std::vector<int>{})) rep.seeds.push_back(s);
        merged.insert(merged.end(), t.begin(), t.end());
    }
    rep.summary = summarize(merged);
    return rep;
}

inline void write_summary_csv(const Report& rep, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    check(out.good(), "cannot open summary for writing: " + path.string());
    out << "# config_hash=" << rep.config_hash << "\n";
    out << "method,user,turn,n,reward_mean,reward_stderr,accuracy_mean,accuracy_stderr\n";
    for (const auto& r : rep.summary)
        out << r.method << ',' << r.user << ',' << r.turn << ',' << r.n << ','
            << detail::fmt_double(r.reward_mean) << ',' << detail::fmt_double(r.reward_stderr) << ','
            << detail::fmt_double(r.accuracy_mean) << ',' << detail::fmt_double(r.accuracy_stderr)
            << "\n";
    out.close();
    check(out.good(), "summary write failed: " + path.string());
}

namespace detail {

inline std::string fmt_tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

}  // namespace detail

// One panel per user: metric vs turn for each method, mean line with stderr
// whiskers. Self-contained SVG, two panels per row.
inline std::string render_curves_svg(const Report& rep, bool accuracy) {
    std::vector<std::string> users, methods;
    for (const auto& r : rep.summary) {
        if (std::find(users.begin(), users.end(), r.user) == users.end()) users.push_back(r.user);
        if (std::find(methods.begin(), methods.end(), r.method) == methods.end())
            methods.push_back(r.method);
    }
    const char* colors[] = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd"};
    const int pw = 440, ph = 300, margin = 54, gap = 26;
    const int cols = users.size() > 1 ? 2 : 1;
    const int rows = (static_cast<int>(users.size()) + cols - 1) / cols;
    const int W = cols * pw + (cols + 1) * gap;
    const int H = rows * ph + (rows + 1) * gap + 24;

    std::string s;
    auto add = [&](const std::string& t) { s += t; };
    add(cat("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"", W, "\" height=\"", H,
            "\" viewBox=\"0 0 ", W, " ", H, "\">\n"));
    add("<desc>config_hash=" + rep.config_hash + "</desc>\n");
    add("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    const std::string metric = accuracy ? "accuracy" : "reward";
    add(cat("<text x=\"", W / 2, "\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" ",
            "font-size=\"15\" font-weight=\"bold\">", metric, " vs turn</text>\n"));

    for (size_t u = 0; u < users.size(); ++u) {
        const int px = gap + static_cast<int>(u % static_cast<size_t>(cols)) * (pw + gap);
        const int py = 24 + gap + static_cast<int>(u / static_cast<size_t>(cols)) * (ph + gap);
        const int x0 = px + margin, x1 = px + pw - 16;
        const int y0 = py + 28, y1 = py + ph - margin + 14;

        int tmin = 1 << 30, tmax = 0;
        double vmin = 1e300, vmax = -1e300;
        for (const auto& r : rep.summary) {
            if (r.user != users[u]) continue;
            const double m = accuracy ? r.accuracy_mean : r.reward_mean;
            const double e = accuracy ? r.accuracy_stderr : r.reward_stderr;
            tmin = std::min(tmin, r.turn);
            tmax = std::max(tmax, r.turn);
            vmin = std::min(vmin, m - e);
            vmax = std::max(vmax, m + e);
        }
        if (vmax <= vmin) vmax = vmin + 1.0;
        const double pad = 0.06 * (vmax - vmin);
        vmin -= pad;
        vmax += pad;
        auto X = [&](double t) {
            return x0 + (t - tmin) / std::max(1.0, static_cast<double>(tmax - tmin)) * (x1 - x0);
        };
        auto Y = [&](double v) { return y1 - (v - vmin) / (vmax - vmin) * (y1 - y0); };

        add(cat("<rect x=\"", x0, "\" y=\"", y0, "\" width=\"", x1 - x0, "\" height=\"", y1 - y0,
                "\" fill=\"none\" stroke=\"#999\"/>\n"));
        add(cat("<text x=\"", (x0 + x1) / 2, "\" y=\"", py + 18,
                "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">",
                users[u], "</text>\n"));
        for (int k = 0; k <= 4; ++k) {
            const double v = vmin + (vmax - vmin) * k / 4.0;
            add(cat("<line x1=\"", x0, "\" y1=\"", Y(v), "\" x2=\"", x1, "\" y2=\"", Y(v),
                    "\" stroke=\"#eee\"/>\n"));
            add(cat("<text x=\"", x0 - 6, "\" y=\"", Y(v) + 4,
                    "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">",
                    detail::fmt_tick(v), "</text>\n"));
        }
        for (int t = tmin; t <= tmax; t += (tmax - tmin >= 10 ? 2 : 1))
            add(cat("<text x=\"", X(t), "\" y=\"", y1 + 16,
                    "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">", t,
                    "</text>\n"));
        add(cat("<text x=\"", (x0 + x1) / 2, "\" y=\"", y1 + 32,
                "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">turn</text>\n"));

        for (size_t m = 0; m < methods.size(); ++m) {
            std::string pts;
            for (const auto& r : rep.summary) {
                if (r.user != users[u] || r.method != methods[m]) continue;
                const double mv = accuracy ? r.accuracy_mean : r.reward_mean;
                const double ev = accuracy ? r.accuracy_stderr : r.reward_stderr;
                pts += cat(X(r.turn), ",", Y(mv), " ");
                if (ev > 0.0)
                    add(cat("<line x1=\"", X(r.turn), "\" y1=\"", Y(mv - ev), "\" x2=\"", X(r.turn),
                            "\" y2=\"", Y(mv + ev), "\" stroke=\"", colors[m % 4],
                            "\" stroke-width=\"1\"/>\n"));
            }
            add(cat("<polyline points=\"", pts, "\" fill=\"none\" stroke=\"", colors[m % 4],
                    "\" stroke-width=\"2\"/>\n"));
            add(cat("<text x=\"", x1 - 8, "\" y=\"", y0 + 16 + 14 * static_cast<int>(m),
                    "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" fill=\"",
                    colors[m % 4], "\">", methods[m], "</text>\n"));
        }
    }
    add("</svg>\n");
    return s;
}

inline void write_report_files(const Report& rep, const std::filesystem::path& out_dir) {
    check(!rep.summary.empty(), "report: nothing to write");
    std::filesystem::create_directories(out_dir);
    write_summary_csv(rep, out_dir / "summary.csv");
    for (bool accuracy : {false, true}) {
        const auto path = out_dir / (accuracy ? "accuracy.svg" : "rewards.svg");
        std::ofstream out(path, std::ios::trunc);
        check(out.good(), "cannot open svg for writing: " + path.string());
        out << render_curves_svg(rep, accuracy);
        out.close();
        check(out.good(), "svg write failed: " + path.string());
    }
}

}  // namespace ppt
