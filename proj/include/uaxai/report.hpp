#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "uaxai/common.hpp"
#include "uaxai/metrics.hpp"
#include "uaxai/uarao.hpp"

namespace uaxai::report {

struct SvgStyle {
    double width = 960.0;
    double label_width = 150.0;
    double wave_height = 120.0;
    double strip_height = 18.0;
    double gap = 6.0;
};

namespace detail {
inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string escape(const std::string& s) {
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
}  // namespace detail

/// Grey level in [0, 255] for a value in [0, 1]: 0 is white, 1 is black.
inline int grey_level(double v) {
    return 255 - static_cast<int>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
}

/// One horizontal strip, min-max normalised. Runs of equal grey share a rect.
inline void strip(std::string& svg, const std::string& label, std::span<const double> values, double y,
                  const SvgStyle& st) {
    const Vector v = metrics::minmax_normalize(values);
    const double x0 = st.label_width;
    const double dx = (st.width - st.label_width) / static_cast<double>(v.size());
    svg += "<text x=\"4\" y=\"" + detail::num(y + st.strip_height * 0.75) + "\">" + detail::escape(label) + "</text>\n";
    for (std::size_t i = 0; i < v.size();) {
        const int g = grey_level(v[i]);
        std::size_t j = i + 1;
        while (j < v.size() && grey_level(v[j]) == g) ++j;
        if (g < 255) {
            svg += "<rect x=\"" + detail::num(x0 + dx * static_cast<double>(i)) + "\" y=\"" + detail::num(y) +
                   "\" width=\"" + detail::num(dx * static_cast<double>(j - i)) + "\" height=\"" +
                   detail::num(st.strip_height) + "\" fill=\"rgb(" + std::to_string(g) + "," + std::to_string(g) + "," +
                   std::to_string(g) + ")\"/>\n";
        }
        i = j;
    }
    svg += "<rect x=\"" + detail::num(x0) + "\" y=\"" + detail::num(y) + "\" width=\"" +
           detail::num(st.width - st.label_width) + "\" height=\"" + detail::num(st.strip_height) +
           "\" fill=\"none\" stroke=\"#888\" stroke-width=\"0.5\"/>\n";
}

/// Waveform on top, then the ground-truth mask (when known), every sampled
/// relevance map and every summary as grey strips sharing the time axis.
inline std::string render_svg(const uarao::ExplanationBundle& b, const SvgStyle& st = {}) {
    const std::size_t n = b.relevance.cols;
    if (n == 0) throw ShapeError("bundle holds no relevance maps");
    if (!b.input.empty() && b.input.size() != n) throw ShapeError("bundle input length differs from its maps");
    const std::size_t strips = (b.mask.empty() ? 0 : 1) + b.relevance.rows + b.summaries.size();
    const double height = 40.0 + (b.input.empty() ? 0.0 : st.wave_height + st.gap) +
                          static_cast<double>(strips) * (st.strip_height + st.gap) + 10.0;

    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::num(st.width) + "\" height=\"" +
                      detail::num(height) + "\" font-family=\"monospace\" font-size=\"11\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    std::string title = b.meta.value("posterior", std::string("?")) + " / " + b.meta.value("operator", std::string("?"));
    if (b.meta.contains("input_id")) title += " / " + b.meta["input_id"].get<std::string>();
    if (b.meta.contains("target_name")) title += " / target " + b.meta["target_name"].get<std::string>();
    svg += "<text x=\"4\" y=\"18\" font-size=\"13\">" + detail::escape(title) + "</text>\n";
    double y = 30.0;

    if (!b.input.empty()) {
        double peak = 0.0;
        for (double v : b.input) peak = std::max(peak, std::abs(v));
        if (!(peak > 0.0)) peak = 1.0;
        const double x0 = st.label_width, dx = (st.width - st.label_width) / static_cast<double>(n - 1 ? n - 1 : 1);
        const double mid = y + st.wave_height / 2.0, half = st.wave_height / 2.0 - 2.0;
        svg += "<text x=\"4\" y=\"" + detail::num(mid) + "\">waveform</text>\n";
        svg += "<line x1=\"" + detail::num(x0) + "\" y1=\"" + detail::num(mid) + "\" x2=\"" + detail::num(st.width) +
               "\" y2=\"" + detail::num(mid) + "\" stroke=\"#ccc\" stroke-width=\"0.5\"/>\n";
        svg += "<polyline fill=\"none\" stroke=\"black\" stroke-width=\"0.8\" points=\"";
        for (std::size_t i = 0; i < n; ++i) {
            if (i) svg += ' ';
            svg += detail::num(x0 + dx * static_cast<double>(i)) + "," + detail::num(mid - half * b.input[i] / peak);
        }
        svg += "\"/>\n";
        y += st.wave_height + st.gap;
    }
    if (!b.mask.empty()) {
        Vector m(b.mask.begin(), b.mask.end());
        strip(svg, "ground truth", m, y, st);
        y += st.strip_height + st.gap;
    }
    for (std::size_t s = 0; s < b.relevance.rows; ++s) {
        strip(svg, "sample " + std::to_string(s), b.relevance.row(s), y, st);
        y += st.strip_height + st.gap;
    }
    for (const auto& [name, map] : b.summaries) {
        strip(svg, name, map, y, st);
        y += st.strip_height + st.gap;
    }
    svg += "</svg>\n";
    return svg;
}

inline void write_svg(const std::filesystem::path& path, const uarao::ExplanationBundle& b, const SvgStyle& st = {}) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << render_svg(b, st);
    if (!out) throw IoError("write failed: " + path.string());
}

/// Markdown rendering of a macro table.
inline std::string table_markdown(const std::vector<metrics::TableRow>& rows) {
    std::string md = "| posterior | operator | summary | role | RMA | IoU | instances |\n|---|---|---|---|---|---|---|\n";
    auto cell = [](const metrics::Stat& s) {
        if (!std::isfinite(s.mean)) return std::string("n/a");
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.4f ± %.4f", s.mean, s.std);
        return std::string(buf);
    };
    for (const auto& r : rows)
        md += "| " + r.posterior + " | " + r.op + " | " + r.summary + " | " +
              (r.diagnostic ? "diagnostic" : "localisation") + " | " + cell(r.rma) + " | " + cell(r.iou) + " | " +
              std::to_string(r.instances) + " |\n";
    return md;
}

}  // namespace uaxai::report
