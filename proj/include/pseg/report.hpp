#pragma once

// metrics.csv, losses.svg and features.svg.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "pseg/metrics.hpp"
#include "pseg/tensor_io.hpp"

namespace pseg {

// Metrics of one evaluated slice.
struct SampleMetrics {
    std::size_t epoch = 0;
    std::string split;
    std::vector<ClassMetrics> classes;
};

// One CSV row; `cls` is a class id or "avg".
struct MetricRow {
    std::size_t epoch = 0;
    std::string split;
    std::string cls;
    std::optional<double> dice;
    std::optional<double> asd;

    bool operator==(const MetricRow&) const = default;
};

inline const char* kMetricsHeader = "epoch,split,class,dice,asd";

namespace detail {

inline std::optional<double> mean_defined(const std::vector<std::optional<double>>& v) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& x : v)
        if (x) {
            s += *x;
            ++n;
        }
    if (n == 0) return std::nullopt;
    return s / static_cast<double>(n);
}

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

inline std::optional<double> parse_cell(const std::string& s, std::size_t line) {
    if (s.empty()) return std::nullopt;
    double v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw FormatError("metrics.csv line " + std::to_string(line) + ": bad number '" + s + "'");
    }
    return v;
}

}  // namespace detail

// Per (epoch, split): one row per class with the mean over slices where the
// metric is defined, then an "avg" row averaging the defined class cells.
inline std::vector<MetricRow> summarize(const std::vector<SampleMetrics>& samples) {
    using Key = std::tuple<std::size_t, std::string>;
    std::map<Key, std::map<std::size_t, std::pair<std::vector<std::optional<double>>, std::vector<std::optional<double>>>>>
        groups;
    for (const auto& s : samples)
        for (const auto& c : s.classes) {
            auto& cell = groups[{s.epoch, s.split}][c.class_id];
            cell.first.push_back(c.dice);
            cell.second.push_back(c.asd);
        }
    std::vector<MetricRow> rows;
    for (const auto& [key, classes] : groups) {
        std::vector<std::optional<double>> dices, asds;
        for (const auto& [cls, vals] : classes) {
            MetricRow r{std::get<0>(key), std::get<1>(key), std::to_string(cls), detail::mean_defined(vals.first),
                        detail::mean_defined(vals.second)};
            dices.push_back(r.dice);
            asds.push_back(r.asd);
            rows.push_back(std::move(r));
        }
        rows.push_back({std::get<0>(key), std::get<1>(key), "avg", detail::mean_defined(dices),
                        detail::mean_defined(asds)});
    }
    return rows;
}

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::ostringstream os;
    os << kMetricsHeader << '\n';
    for (const auto& r : rows) {
        os << r.epoch << ',' << r.split << ',' << r.cls << ',' << (r.dice ? detail::format_double(*r.dice) : "") << ','
           << (r.asd ? detail::format_double(*r.asd) : "") << '\n';
    }
    return os.str();
}

inline std::vector<MetricRow> parse_metrics_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != kMetricsHeader) throw FormatError("metrics.csv: missing header");
    std::vector<MetricRow> rows;
    for (std::size_t ln = 2; std::getline(is, line); ++ln) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t start = 0;
        while (true) {
            const auto comma = line.find(',', start);
            cells.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (cells.size() != 5) throw FormatError("metrics.csv line " + std::to_string(ln) + ": expected 5 cells");
        MetricRow r;
        r.epoch = static_cast<std::size_t>(std::stoul(cells[0]));
        r.split = cells[1];
        r.cls = cells[2];
        r.dice = detail::parse_cell(cells[3], ln);
        r.asd = detail::parse_cell(cells[4], ln);
        rows.push_back(std::move(r));
    }
    return rows;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError(path.string() + ": cannot open for writing");
    f << text;
    if (!f) throw FormatError(path.string() + ": write failed");
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError(path.string() + ": cannot open");
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

// ---------------------------------------------------------------- SVG

struct LossCurve {
    std::string name;
    std::vector<double> values;   // one per epoch
};

namespace detail {

inline const char* palette(std::size_t i) {
    static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                   "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    return colors[i % 10];
}

inline std::string svg_open(int w, int h, const std::string& title) {
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 "
       << w << ' ' << h << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
       << title << "</text>\n";
    return os.str();
}

}  // namespace detail

// One polyline per curve, each scaled to its own [min,max] so components of
// very different magnitude stay readable.
inline std::string loss_svg(const std::vector<LossCurve>& curves) {
    const int W = 640, H = 400, L = 60, R = 160, T = 40, B = 40;
    std::ostringstream os;
    os << detail::svg_open(W, H, "training losses per epoch (each curve min-max scaled)");
    os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (std::size_t i = 0; i < curves.size(); ++i) {
        const auto& c = curves[i];
        os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (i + 1)
           << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" << detail::palette(i) << "\">" << c.name;
        if (!c.values.empty()) os << " (" << detail::format_double(c.values.back()) << ")";
        os << "</text>\n";
        if (c.values.size() < 2) continue;
        const auto [lo, hi] = std::minmax_element(c.values.begin(), c.values.end());
        const double span = *hi - *lo > 0 ? *hi - *lo : 1.0;
        os << "<polyline fill=\"none\" stroke=\"" << detail::palette(i) << "\" points=\"";
        for (std::size_t k = 0; k < c.values.size(); ++k) {
            const double x = L + (W - L - R) * static_cast<double>(k) / static_cast<double>(c.values.size() - 1);
            const double y = H - B - (H - T - B) * (c.values[k] - *lo) / span;
            os << x << ',' << y << ' ';
        }
        os << "\"/>\n";
    }
    os << "<text x=\"" << (W - R + L) / 2 << "\" y=\"" << H - 10
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">epoch</text>\n</svg>\n";
    return os.str();
}

inline std::string features_svg(const Projection2d& proj, const std::vector<std::size_t>& labels,
                                 const std::vector<std::string>& tags = {}) {
    const int W = 520, H = 520, M = 50;
    std::ostringstream os;
    os << detail::svg_open(W, H, "PCA projection of prototype features");
    double xmax = 1e-12, ymax = 1e-12;
    for (const auto& p : proj.points) {
        xmax = std::max(xmax, std::abs(p[0]));
        ymax = std::max(ymax, std::abs(p[1]));
    }
    for (std::size_t i = 0; i < proj.points.size(); ++i) {
        const double x = W / 2.0 + (W / 2.0 - M) * proj.points[i][0] / xmax;
        const double y = H / 2.0 - (H / 2.0 - M) * proj.points[i][1] / ymax;
        const std::size_t cls = i < labels.size() ? labels[i] : 0;
        const bool hollow = i < tags.size() && !tags[i].empty() && tags[i][0] == 't';
        os << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"3\" "
           << (hollow ? "fill=\"none\" stroke=\"" : "fill=\"") << detail::palette(cls) << "\"/>\n";
    }
    os << "<text x=\"10\" y=\"" << H - 10 << "\" font-family=\"sans-serif\" font-size=\"11\">PC1 var "
       << detail::format_double(proj.eigenvalues[0]) << ", PC2 var " << detail::format_double(proj.eigenvalues[1])
       << "; colour = class, hollow = target domain</text>\n</svg>\n";
    return os.str();
}

struct FeatureSet {
    std::vector<std::vector<double>> vectors;
    std::vector<std::size_t> labels;
    std::vector<std::string> tags;
};

// Writes metrics.csv, losses.svg and (given >= 3 vectors) features.svg.
inline std::vector<MetricRow> emit_report(const std::vector<SampleMetrics>& samples,
                                          const std::vector<LossCurve>& losses, const FeatureSet& features,
                                          const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw FormatError(out_dir.string() + ": " + ec.message());
    const auto rows = summarize(samples);
    write_text(out_dir / "metrics.csv", metrics_csv(rows));
    write_text(out_dir / "losses.svg", loss_svg(losses));
    if (features.vectors.size() >= 3) {
        write_text(out_dir / "features.svg",
                   features_svg(project_features_2d(features.vectors), features.labels, features.tags));
    }
    return rows;
}

}  // namespace pseg
