#pragma once

#include <string>
#include <vector>

#include "tdinf/evaluation.hpp"
#include "tdinf/io.hpp"

namespace tdinf {

inline std::string deletion_curve_csv(const DeletionCurve& c) {
    std::string out = "k,del_plus,del_minus,stderr_plus,stderr_minus\n";
    for (std::size_t i = 0; i < c.k_grid.size(); ++i) {
        out += std::to_string(c.k_grid[i]) + "," + fmt_double(c.del_plus[i]) + "," +
               fmt_double(c.del_minus[i]) + "," + fmt_double(c.stderr_plus[i]) + "," +
               fmt_double(c.stderr_minus[i]) + "\n";
    }
    return out;
}

// Minimal line plot: one polyline per series over a shared x grid.
inline std::string svg_line_plot(const std::vector<int>& xs,
                                 const std::vector<std::pair<std::string, std::vector<double>>>& series,
                                 const std::string& title) {
    const double width = 640, height = 420, ml = 70, mr = 20, mt = 40, mb = 50;
    double ymin = 0.0, ymax = 0.0;
    for (const auto& [name, v] : series)
        for (double y : v) {
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    if (ymax - ymin < 1e-12) {
        ymax += 1e-3;
        ymin -= 1e-3;
    }
    double xmin = xs.front(), xmax = xs.back();
    if (xmax - xmin < 1e-12) xmax = xmin + 1;
    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (width - ml - mr); };
    auto py = [&](double y) { return height - mb - (y - ymin) / (ymax - ymin) * (height - mt - mb); };

    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                      fmt_double(width) + "\" height=\"" + fmt_double(height) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += "<text x=\"" + fmt_double(width / 2) + "\" y=\"24\" text-anchor=\"middle\" "
           "font-family=\"sans-serif\" font-size=\"15\">" + title + "</text>\n";
    // axes
    svg += "<line x1=\"" + fmt_double(ml) + "\" y1=\"" + fmt_double(height - mb) + "\" x2=\"" +
           fmt_double(width - mr) + "\" y2=\"" + fmt_double(height - mb) +
           "\" stroke=\"black\"/>\n";
    svg += "<line x1=\"" + fmt_double(ml) + "\" y1=\"" + fmt_double(mt) + "\" x2=\"" +
           fmt_double(ml) + "\" y2=\"" + fmt_double(height - mb) + "\" stroke=\"black\"/>\n";
    if (ymin < 0 && ymax > 0)
        svg += "<line x1=\"" + fmt_double(ml) + "\" y1=\"" + fmt_double(py(0)) + "\" x2=\"" +
               fmt_double(width - mr) + "\" y2=\"" + fmt_double(py(0)) +
               "\" stroke=\"#cccccc\" stroke-dasharray=\"4 3\"/>\n";
    for (int x : xs)
        svg += "<text x=\"" + fmt_double(px(x)) + "\" y=\"" + fmt_double(height - mb + 18) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
               std::to_string(x) + "</text>\n";
    for (double q : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        double y = ymin + q * (ymax - ymin);
        svg += "<text x=\"" + fmt_double(ml - 6) + "\" y=\"" + fmt_double(py(y) + 4) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
               fmt_double(y) + "</text>\n";
    }

    int ci = 0;
    double legend_y = mt + 4;
    for (const auto& [name, v] : series) {
        const char* color = colors[ci % 5];
        std::string points;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!points.empty()) points += " ";
            points += fmt_double(px(xs[i])) + "," + fmt_double(py(v[i]));
        }
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
               "\" stroke-width=\"2\" points=\"" + points + "\"/>\n";
        svg += "<text x=\"" + fmt_double(width - mr - 150) + "\" y=\"" + fmt_double(legend_y) +
               "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" + color + "\">" + name +
               "</text>\n";
        legend_y += 16;
        ++ci;
    }
    svg += "</svg>\n";
    return svg;
}

inline std::string deletion_curve_svg(const DeletionCurve& c) {
    return svg_line_plot(
        c.k_grid,
        {{"del+ (remove proponents)", c.del_plus}, {"del- (remove opponents)", c.del_minus}},
        c.method + ", test " + std::to_string(c.test_id));
}

inline json deletion_curve_json(const DeletionCurve& c) {
    json j;
    j["test_id"] = c.test_id;
    j["method"] = c.method;
    j["k_grid"] = c.k_grid;
    j["del_plus"] = c.del_plus;
    j["del_minus"] = c.del_minus;
    j["stderr_plus"] = c.stderr_plus;
    j["stderr_minus"] = c.stderr_minus;
    j["per_seed_plus"] = c.per_seed_plus;
    j["per_seed_minus"] = c.per_seed_minus;
    j["repeats"] = c.repeats;
    j["auc_plus"] = c.auc_plus;
    j["auc_minus"] = c.auc_minus;
    return j;
}

// Fixed-width text table; the first row is the header.
inline std::string text_table(const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> widths;
    for (const auto& row : rows) {
        if (widths.size() < row.size()) widths.resize(row.size(), 0);
        for (std::size_t i = 0; i < row.size(); ++i)
            widths[i] = std::max(widths[i], row[i].size());
    }
    std::string out;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t i = 0; i < rows[r].size(); ++i) {
            std::string cell = rows[r][i];
            cell.resize(widths[i], ' ');
            out += cell;
            if (i + 1 < rows[r].size()) out += "  ";
        }
        out += "\n";
        if (r == 0) {
            for (std::size_t i = 0; i < widths.size(); ++i) {
                out += std::string(widths[i], '-');
                if (i + 1 < widths.size()) out += "  ";
            }
            out += "\n";
        }
    }
    return out;
}

}  // namespace tdinf
