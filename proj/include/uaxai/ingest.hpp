#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "uaxai/common.hpp"
#include "uaxai/siggen.hpp"

namespace uaxai::ingest {

struct Recording {
    Vector t;  // seconds, strictly increasing
    Vector v;
};

struct IngestConfig {
    double fundamental_hz = 50.0;
    // Rate of a bare value column. Zero: the column spans exactly `cycles`
    // fundamental periods.
    double sample_rate_hz = 0.0;
    double start_s = 0.0;

    void validate() const {
        if (!(fundamental_hz > 0.0)) throw ConfigError("fundamental frequency must be positive");
        if (!(sample_rate_hz >= 0.0)) throw ConfigError("sample rate must be nonnegative");
        if (!(start_s >= 0.0)) throw ConfigError("window start must be nonnegative");
    }
};

namespace detail {
inline std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',' || ch == ';' || ch == '\t') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

inline bool parse_number(const std::string& s, double& v) {
    // strtod, unlike stream extraction, accepts nan and inf so they can be
    // reported as non-finite rather than as malformed.
    const char* b = s.c_str();
    char* end = nullptr;
    v = std::strtod(b, &end);
    if (end == b) return false;
    while (*end == ' ' || *end == '\t') ++end;
    return *end == '\0';
}
}  // namespace detail

/// CSV with either (time, value) rows or a single value column. A leading
/// non-numeric line is taken as a header.
inline Recording parse_csv(std::istream& in, const IngestConfig& cfg, std::size_t cycles) {
    cfg.validate();
    std::vector<Vector> rows;
    std::size_t width = 0;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto fields = detail::split_fields(line);
        Vector row;
        bool numeric = true;
        for (const auto& f : fields) {
            double v = 0.0;
            if (!detail::parse_number(f, v)) {
                numeric = false;
                break;
            }
            row.push_back(v);
        }
        if (!numeric) {
            if (rows.empty() && width == 0) {
                width = fields.size();  // header
                continue;
            }
            throw IoError("line " + std::to_string(line_no) + ": not a number");
        }
        for (double v : row)
            if (!std::isfinite(v)) throw NumericError("line " + std::to_string(line_no) + ": non-finite value");
        if (row.size() != 1 && row.size() != 2)
            throw IoError("line " + std::to_string(line_no) + ": expected 1 or 2 columns");
        if (!rows.empty() && row.size() != rows.front().size())
            throw IoError("line " + std::to_string(line_no) + ": column count changed");
        rows.push_back(std::move(row));
    }
    if (rows.size() < 2) throw IoError("recording needs at least two samples");
    Recording r;
    for (const auto& row : rows) r.v.push_back(row.back());
    if (rows.front().size() == 2) {
        for (const auto& row : rows) r.t.push_back(row[0]);
        for (std::size_t i = 1; i < r.t.size(); ++i)
            if (!(r.t[i] > r.t[i - 1])) throw IoError("time column must be strictly increasing");
    } else {
        const double fs = cfg.sample_rate_hz > 0.0
                              ? cfg.sample_rate_hz
                              : static_cast<double>(rows.size() - 1) * cfg.fundamental_hz / static_cast<double>(cycles);
        r.t.resize(rows.size());
        for (std::size_t i = 0; i < r.t.size(); ++i) r.t[i] = static_cast<double>(i) / fs;
    }
    return r;
}

inline Recording read_csv(const std::filesystem::path& path, const IngestConfig& cfg, std::size_t cycles) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open recording: " + path.string());
    try {
        return parse_csv(in, cfg, cycles);
    } catch (const Error& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

/// Linear interpolation at n points spaced over `cycles` fundamental periods
/// from cfg.start_s. For a value column without a rate the record spans
/// exactly the window, so the last point lands on the last sample.
inline Vector resample(const Recording& r, const IngestConfig& cfg, std::size_t n, std::size_t cycles) {
    if (r.t.size() < 2 || r.t.size() != r.v.size()) throw IoError("recording needs at least two samples");
    const double span = static_cast<double>(cycles) / cfg.fundamental_hz;
    const double dt = span / static_cast<double>(n);
    const double last = cfg.start_s + dt * static_cast<double>(n - 1);
    const double tol = 1e-9 * span;
    if (cfg.start_s < r.t.front() - tol || last > r.t.back() + dt)
        throw IoError("recording too short for " + std::to_string(cycles) + " cycles at " +
                      std::to_string(cfg.fundamental_hz) + " Hz from t = " + std::to_string(cfg.start_s) + " s");
    Vector out(n);
    std::size_t j = 0;
    for (std::size_t k = 0; k < n; ++k) {
        const double t = std::clamp(cfg.start_s + dt * static_cast<double>(k), r.t.front(), r.t.back());
        while (j + 2 < r.t.size() && r.t[j + 1] <= t) ++j;
        const double w = (t - r.t[j]) / (r.t[j + 1] - r.t[j]);
        out[k] = w <= 0.0 ? r.v[j] : (w >= 1.0 ? r.v[j + 1] : r.v[j] + w * (r.v[j + 1] - r.v[j]));
    }
    return out;
}

/// Nominal peak: median over cycles of the per-cycle peak |x|, so a sag or
/// swell shorter than half the record does not shift the scale.
inline double nominal_peak(const Vector& x, std::size_t cycles) {
    if (cycles == 0 || x.size() < cycles) throw ShapeError("fewer samples than cycles");
    const std::size_t per = x.size() / cycles;
    Vector peaks;
    for (std::size_t c = 0; c < cycles; ++c) {
        double p = 0.0;
        for (std::size_t i = c * per; i < (c + 1) * per; ++i) p = std::max(p, std::abs(x[i]));
        peaks.push_back(p);
    }
    std::sort(peaks.begin(), peaks.end());
    const std::size_t m = peaks.size() / 2;
    return peaks.size() % 2 ? peaks[m] : 0.5 * (peaks[m - 1] + peaks[m]);
}

inline Vector normalise(Vector x, std::size_t cycles, double amplitude) {
    const double peak = nominal_peak(x, cycles);
    if (!(peak > 0.0)) throw NumericError("recording is identically zero");
    for (auto& v : x) v *= amplitude / peak;
    return x;
}

/// One external instance in the dataset layout: no label, no mask.
inline Waveform to_instance(const Recording& r, const IngestConfig& cfg, const SignalConfig& signal, std::uint32_t index = 0) {
    signal.validate();
    Waveform w;
    w.x = normalise(resample(r, cfg, signal.n_samples, signal.cycles), signal.cycles, signal.amplitude);
    w.x0.assign(signal.n_samples, 0.0);
    w.d.assign(signal.n_samples, 0.0);
    w.noise.assign(signal.n_samples, 0.0);
    w.external = true;
    w.index = index;
    return w;
}

}  // namespace uaxai::ingest
