#pragma once

// Output artifacts: run manifests, Table-style variant comparisons, and SVG
// renderings of the CSV series. CSV is the source of truth; SVG is drawn from
// the same points.

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "l3prune/error.hpp"
#include "l3prune/eval.hpp"

namespace l3p {

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Manifest

// Same digest git uses for a blob: sha1("blob <len>\0" + content).
inline std::string git_blob_hash(const std::string& content) {
    const std::string header = "blob " + std::to_string(content.size()) + '\0';
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
    EVP_DigestUpdate(ctx, header.data(), header.size());
    EVP_DigestUpdate(ctx, content.data(), content.size());
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return os.str();
}

inline std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

struct RunManifest {
    std::string command;
    std::string config_path;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> settings;
    std::vector<std::filesystem::path> inputs;
    std::vector<std::string> outputs;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["command"] = command;
        j["config_path"] = config_path;
        j["seed"] = seed;
        j["settings"] = settings;
        j["inputs"] = nlohmann::ordered_json::array();
        for (const auto& p : inputs) {
            j["inputs"].push_back({{"path", p.string()}, {"hash", git_blob_hash(read_text_file(p))}});
        }
        j["outputs"] = outputs;
        j["started_at"] = utc_timestamp();
        return j;
    }

    // Creates the output directory; the manifest is its first file.
    void write(const std::filesystem::path& out_dir) const {
        std::filesystem::create_directories(out_dir);
        write_text_file(out_dir / "manifest.json", to_json().dump(2) + "\n");
    }
};

// ---------------------------------------------------------------------------
// SVG

struct PlotSeries {
    std::string name;
    std::vector<std::pair<double, double>> points;
    std::vector<std::string> labels;  // optional per-point label
};

struct PlotMarker {
    double x;
    double y;
    std::string label;
};

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

// Line plot with one <circle class="point"> per data point and highlighted
// markers drawn on top.
inline std::string svg_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                            const std::vector<PlotSeries>& series, const std::vector<PlotMarker>& markers = {}) {
    constexpr double W = 640, H = 400, L = 70, R = 20, T = 40, B = 50;
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series)
        for (auto [x, y] : s.points) {
            x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
        }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x0 -= 0.5, x1 += 0.5;
    if (y1 == y0) y0 -= 0.5, y1 += 0.5;
    const double ypad = 0.05 * (y1 - y0);
    y0 -= ypad, y1 += ypad;
    auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

    static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
    std::ostringstream os;
    os << std::setprecision(6);
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
       << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 "
       << W << ' ' << H << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << xml_escape(title)
       << "</text>\n"
       << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
       << "\" stroke=\"black\"/>\n"
       << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
       << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
       << xml_escape(x_label) << "</text>\n"
       << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
       << (T + H - B) / 2 << ")\">" << xml_escape(y_label) << "</text>\n";
    for (int i = 0; i <= 4; ++i) {
        const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
        os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-size=\"10\">" << xv
           << "</text>\n"
           << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 3 << "\" text-anchor=\"end\" font-size=\"10\">" << yv
           << "</text>\n";
    }
    for (std::size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const char* color = colors[si % std::size(colors)];
        os << "<g class=\"series\" data-name=\"" << xml_escape(s.name) << "\">\n";
        if (s.points.size() > 1) {
            os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
            for (auto [x, y] : s.points) os << px(x) << ',' << py(y) << ' ';
            os << "\"/>\n";
        }
        for (std::size_t i = 0; i < s.points.size(); ++i) {
            const auto [x, y] = s.points[i];
            os << "<circle class=\"point\" cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"2.5\" fill=\"" << color
               << "\" data-x=\"" << std::setprecision(17) << x << "\" data-y=\"" << y << std::setprecision(6) << '"';
            if (i < s.labels.size()) os << " data-label=\"" << xml_escape(s.labels[i]) << '"';
            os << "/>\n";
        }
        os << "</g>\n";
    }
    for (const auto& m : markers) {
        os << "<circle class=\"marker\" cx=\"" << px(m.x) << "\" cy=\"" << py(m.y)
           << "\" r=\"6\" fill=\"none\" stroke=\"red\" stroke-width=\"2\"/>\n"
           << "<text x=\"" << px(m.x) + 8 << "\" y=\"" << py(m.y) - 8 << "\" font-size=\"11\" fill=\"red\">"
           << xml_escape(m.label) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Multi-run report

struct RunSummary {
    EvalReport eval;
    std::optional<double> train_ms;
};

inline std::vector<RunSummary> sorted_by_params(std::vector<RunSummary> runs) {
    std::stable_sort(runs.begin(), runs.end(), [](const RunSummary& a, const RunSummary& b) {
        if (a.eval.model_params != b.eval.model_params) return a.eval.model_params < b.eval.model_params;
        return a.eval.label < b.eval.label;
    });
    return runs;
}

inline std::string score_vs_params_csv(const std::vector<RunSummary>& runs) {
    std::ostringstream os;
    os << "label,layers,params,score\n" << std::setprecision(17);
    for (const auto& r : sorted_by_params(runs)) {
        os << r.eval.label << ',' << r.eval.layers << ',' << r.eval.model_params << ',' << r.eval.score() << '\n';
    }
    return os.str();
}

inline std::string score_vs_params_svg(const std::vector<RunSummary>& runs) {
    PlotSeries s{"score", {}, {}};
    for (const auto& r : sorted_by_params(runs)) {
        s.points.emplace_back(static_cast<double>(r.eval.model_params), r.eval.score());
        s.labels.push_back(r.eval.label);
    }
    return svg_plot("Score vs. parameters", "parameters", "aggregate score (x100)", {s});
}

namespace detail {

inline std::string signed_delta(double v, int precision) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << (v >= 0 ? "+" : "") << v;
    return os.str();
}

inline std::string signed_count(long long v) { return (v >= 0 ? "+" : "") + std::to_string(v); }

inline std::string pad(const std::string& s, std::size_t w) {
    return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

}  // namespace detail

// Layers / Params / Score (and train time when known) for each run, with
// changes from the baseline in parentheses: "25 (-7)", "5.9K (78%)",
// "63.5 (-1.5)".
inline std::string variants_table(const std::vector<RunSummary>& runs, const RunSummary& baseline) {
    std::vector<std::vector<std::string>> cols;
    const bool timed = std::any_of(runs.begin(), runs.end(), [](const RunSummary& r) { return r.train_ms.has_value(); });
    for (const auto& r : runs) {
        std::vector<std::string> c;
        c.push_back(r.eval.label);
        const bool is_base = &r == &baseline || r.eval.label == baseline.eval.label;
        std::ostringstream layers, params, score, time;
        layers << r.eval.layers;
        params << r.eval.model_params;
        score << std::fixed << std::setprecision(1) << r.eval.score();
        if (!is_base) {
            layers << " (" << detail::signed_count(static_cast<long long>(r.eval.layers) -
                                                   static_cast<long long>(baseline.eval.layers))
                   << ')';
            params << " (" << std::llround(100.0 * static_cast<double>(r.eval.model_params) /
                                           static_cast<double>(baseline.eval.model_params))
                   << "%)";
            score << " (" << detail::signed_delta(r.eval.score() - baseline.eval.score(), 1) << ')';
        }
        c.push_back(layers.str());
        c.push_back(params.str());
        c.push_back(score.str());
        if (timed) {
            if (r.train_ms) {
                time << std::fixed << std::setprecision(1) << *r.train_ms / 1000.0 << " s";
            } else {
                time << "-";
            }
            c.push_back(time.str());
        }
        cols.push_back(std::move(c));
    }
    std::vector<std::string> rows{"", "Layers", "Params", "Score"};
    if (timed) rows.push_back("Train time");
    std::size_t head_w = 0;
    for (const auto& h : rows) head_w = std::max(head_w, h.size());
    std::vector<std::size_t> widths;
    for (const auto& c : cols) {
        std::size_t w = 0;
        for (const auto& cell : c) w = std::max(w, cell.size());
        widths.push_back(w);
    }
    std::ostringstream os;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        os << detail::pad(rows[r], head_w);
        for (std::size_t c = 0; c < cols.size(); ++c) os << " | " << detail::pad(cols[c][r], widths[c]);
        os << '\n';
    }
    return os.str();
}

}  // namespace l3p
