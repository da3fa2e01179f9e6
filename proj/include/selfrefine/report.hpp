#pragma once

// Deterministic result files: CSV tables plus static SVG bar/line charts
// laid out like the paper's accuracy figures.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "eval.hpp"
#include "instruct.hpp"
#include "refine.hpp"
#include "util.hpp"

namespace selfrefine::report {

inline std::string fmt(double v, const char* spec = "%.4f") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

// CSV fields here never contain commas or quotes; keep the writer dumb.
inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const auto& line : lines) out << line << '\n';
    if (!out) throw IoError("write failed: " + path);
}

inline void write_matrix_csv(const std::vector<eval::AccuracyCell>& cells,
                             const std::string& path) {
    std::vector<std::string> lines = {"trained_on,evaluated_on,regime,accuracy,stderr,n"};
    for (const auto& c : cells) {
        std::string row = c.trained_on + "," + c.evaluated_on + "," + eval::regime_name(c.regime);
        if (c.present)
            row += "," + fmt(c.accuracy) + "," + fmt(c.stderr_pct) + "," + std::to_string(c.n);
        else
            row += ",,,";  // absent cell: checkpoint was missing
        lines.push_back(row);
    }
    write_lines(path, lines);
}

inline void write_curve_csv(const std::vector<eval::CurveRow>& rows, const std::string& path) {
    std::vector<std::string> lines = {"fraction,regime,accuracy,stderr,n"};
    for (const auto& r : rows) {
        std::string row = fmt(r.fraction, "%.2f") + std::string(",") +
                          eval::curve_regime_name(r.regime);
        if (r.present)
            row += "," + fmt(r.accuracy) + "," + fmt(r.stderr_pct) + "," + std::to_string(r.n);
        else
            row += ",,,";
        lines.push_back(row);
    }
    write_lines(path, lines);
}

inline void write_instruct_log_csv(const std::vector<instruct::TrainLogRow>& log,
                                   const std::string& path) {
    std::vector<std::string> lines = {"step,lr,loss"};
    for (const auto& r : log)
        lines.push_back(std::to_string(r.step) + "," + fmt(r.lr, "%.8g") + "," +
                        fmt(r.loss, "%.6f"));
    write_lines(path, lines);
}

inline void write_refine_log_csv(const std::vector<refine::RefineLogRow>& log,
                                 const std::string& path) {
    std::vector<std::string> lines = {"step,lr,train_loss,val_loss"};
    for (const auto& r : log) {
        std::string row = std::to_string(r.step) + "," + fmt(r.lr, "%.8g") + ",";
        if (std::isfinite(r.train_loss)) row += fmt(r.train_loss, "%.6f");
        row += ",";
        if (std::isfinite(r.val_loss)) row += fmt(r.val_loss, "%.6f");
        lines.push_back(row);
    }
    write_lines(path, lines);
}

// ----------------------------- SVG charts -----------------------------

namespace detail {

inline const char* palette(size_t i) {
    static const char* colors[] = {"#4878cf", "#ee854a", "#6acc65", "#d65f5f",
                                   "#956cb4", "#8c613c", "#dc7ec0"};
    return colors[i % 7];
}

struct Canvas {
    std::string body;
    double width = 720, height = 420;
    double left = 60, right = 20, top = 36, bottom = 56;

    double plot_w() const { return width - left - right; }
    double plot_h() const { return height - top - bottom; }
    double y_of(double value, double vmax) const {
        return top + plot_h() * (1.0 - value / vmax);
    }

    void rect(double x, double y, double w, double h, const std::string& fill) {
        body += "<rect x=\"" + fmt(x, "%.2f") + "\" y=\"" + fmt(y, "%.2f") + "\" width=\"" +
                fmt(w, "%.2f") + "\" height=\"" + fmt(h, "%.2f") + "\" fill=\"" + fill + "\"/>\n";
    }
    void line(double x1, double y1, double x2, double y2, const std::string& stroke,
              double sw = 1.0) {
        body += "<line x1=\"" + fmt(x1, "%.2f") + "\" y1=\"" + fmt(y1, "%.2f") + "\" x2=\"" +
                fmt(x2, "%.2f") + "\" y2=\"" + fmt(y2, "%.2f") + "\" stroke=\"" + stroke +
                "\" stroke-width=\"" + fmt(sw, "%.2f") + "\"/>\n";
    }
    void text(double x, double y, const std::string& s, int size = 12,
              const std::string& anchor = "middle") {
        body += "<text x=\"" + fmt(x, "%.2f") + "\" y=\"" + fmt(y, "%.2f") + "\" font-size=\"" +
                std::to_string(size) + "\" font-family=\"sans-serif\" text-anchor=\"" + anchor +
                "\">" + s + "</text>\n";
    }
    void circle(double x, double y, double r, const std::string& fill) {
        body += "<circle cx=\"" + fmt(x, "%.2f") + "\" cy=\"" + fmt(y, "%.2f") + "\" r=\"" +
                fmt(r, "%.2f") + "\" fill=\"" + fill + "\"/>\n";
    }

    void axes(double vmax, const std::string& title) {
        line(left, top, left, top + plot_h(), "#222222");
        line(left, top + plot_h(), left + plot_w(), top + plot_h(), "#222222");
        for (int tick = 0; tick <= 5; ++tick) {
            const double v = vmax * tick / 5.0;
            const double y = y_of(v, vmax);
            line(left - 4, y, left, y, "#222222");
            text(left - 8, y + 4, fmt(v, "%.0f"), 11, "end");
        }
        text(left + plot_w() / 2, 20, title, 14);
    }

    std::string finish() const {
        return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(width, "%.0f") +
               "\" height=\"" + fmt(height, "%.0f") + "\" viewBox=\"0 0 " + fmt(width, "%.0f") +
               " " + fmt(height, "%.0f") + "\">\n<rect width=\"100%\" height=\"100%\" "
               "fill=\"white\"/>\n" +
               body + "</svg>\n";
    }
};

}  // namespace detail

// Grouped bar chart: one group per evaluated task, one bar per
// (trained_on, regime) series.
inline void write_matrix_svg(const std::vector<eval::AccuracyCell>& cells,
                             const std::string& path) {
    std::vector<std::string> groups;   // evaluated_on, insertion order
    std::vector<std::string> series;   // "regime(trained_on)"
    auto series_key = [](const eval::AccuracyCell& c) {
        return std::string(eval::regime_name(c.regime)) +
               (c.trained_on == "-" ? "" : "(" + c.trained_on + ")");
    };
    std::map<std::pair<std::string, std::string>, const eval::AccuracyCell*> lookup;
    for (const auto& c : cells) {
        if (!c.present) continue;
        if (std::find(groups.begin(), groups.end(), c.evaluated_on) == groups.end())
            groups.push_back(c.evaluated_on);
        const std::string key = series_key(c);
        if (std::find(series.begin(), series.end(), key) == series.end()) series.push_back(key);
        lookup[{c.evaluated_on, key}] = &c;
    }
    detail::Canvas cv;
    cv.axes(100.0, "Accuracy (%) by evaluation task");
    const double group_w = cv.plot_w() / std::max<size_t>(groups.size(), 1);
    const double bar_w = group_w * 0.8 / std::max<size_t>(series.size(), 1);
    for (size_t g = 0; g < groups.size(); ++g) {
        const double gx = cv.left + group_w * static_cast<double>(g) + group_w * 0.1;
        for (size_t s = 0; s < series.size(); ++s) {
            auto it = lookup.find({groups[g], series[s]});
            if (it == lookup.end()) continue;
            const double acc = it->second->accuracy;
            const double y = cv.y_of(acc, 100.0);
            cv.rect(gx + bar_w * static_cast<double>(s), y, bar_w * 0.92,
                    cv.top + cv.plot_h() - y, detail::palette(s));
        }
        cv.text(gx + group_w * 0.4, cv.top + cv.plot_h() + 16, groups[g], 12);
    }
    for (size_t s = 0; s < series.size(); ++s) {
        const double lx = cv.left + 8 + 170.0 * static_cast<double>(s % 4);
        const double ly = cv.height - 20 + 14.0 * static_cast<double>(s / 4);
        cv.rect(lx, ly - 9, 10, 10, detail::palette(s));
        cv.text(lx + 14, ly, series[s], 11, "start");
    }
    write_lines(path, {cv.finish()});
}

// Line chart: accuracy vs. demonstration fraction, one line per regime.
inline void write_curve_svg(const std::vector<eval::CurveRow>& rows, const std::string& path) {
    std::vector<eval::CurveRegime> regimes;
    std::vector<double> fractions;
    for (const auto& r : rows) {
        if (!r.present) continue;
        if (std::find(regimes.begin(), regimes.end(), r.regime) == regimes.end())
            regimes.push_back(r.regime);
        if (std::find(fractions.begin(), fractions.end(), r.fraction) == fractions.end())
            fractions.push_back(r.fraction);
    }
    std::sort(fractions.begin(), fractions.end());
    detail::Canvas cv;
    cv.axes(100.0, "Accuracy (%) by demonstration fraction");
    auto x_of = [&](double fraction) {
        if (fractions.size() < 2) return cv.left + cv.plot_w() / 2;
        const double lo = fractions.front(), hi = fractions.back();
        return cv.left + cv.plot_w() * (fraction - lo) / (hi - lo);
    };
    for (double f : fractions)
        cv.text(x_of(f), cv.top + cv.plot_h() + 16, fmt(f * 100.0, "%.0f") + "%", 12);
    for (size_t s = 0; s < regimes.size(); ++s) {
        double prev_x = 0, prev_y = 0;
        bool has_prev = false;
        for (double f : fractions) {
            for (const auto& r : rows) {
                if (!r.present || r.regime != regimes[s] || r.fraction != f) continue;
                const double x = x_of(f), y = cv.y_of(r.accuracy, 100.0);
                if (has_prev) cv.line(prev_x, prev_y, x, y, detail::palette(s), 2.0);
                cv.circle(x, y, 3.0, detail::palette(s));
                prev_x = x;
                prev_y = y;
                has_prev = true;
            }
        }
        const double lx = cv.left + 8 + 150.0 * static_cast<double>(s);
        cv.rect(lx, cv.height - 29, 10, 10, detail::palette(s));
        cv.text(lx + 14, cv.height - 20, eval::curve_regime_name(regimes[s]), 11, "start");
    }
    write_lines(path, {cv.finish()});
}

// Writes whatever inputs are non-empty; empty inputs get a header-only CSV
// and no chart, with a warning on stderr.
inline std::vector<std::string> emit_report(const std::vector<eval::AccuracyCell>& cells,
                                            const std::vector<eval::CurveRow>& curves,
                                            const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::vector<std::string> written;
    const std::string matrix_csv = out_dir + "/matrix.csv";
    write_matrix_csv(cells, matrix_csv);
    written.push_back(matrix_csv);
    if (cells.empty()) {
        std::cerr << "warning: no matrix cells; wrote header-only " << matrix_csv << "\n";
    } else {
        const std::string p = out_dir + "/matrix.svg";
        write_matrix_svg(cells, p);
        written.push_back(p);
    }
    const std::string curve_csv = out_dir + "/curve.csv";
    write_curve_csv(curves, curve_csv);
    written.push_back(curve_csv);
    if (curves.empty()) {
        std::cerr << "warning: no curve rows; wrote header-only " << curve_csv << "\n";
    } else {
        const std::string p = out_dir + "/curve.svg";
        write_curve_svg(curves, p);
        written.push_back(p);
    }
    return written;
}

}  // namespace selfrefine::report
