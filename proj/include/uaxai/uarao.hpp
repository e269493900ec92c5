#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "uaxai/attribution.hpp"
#include "uaxai/binio.hpp"
#include "uaxai/common.hpp"
#include "uaxai/posterior.hpp"

namespace uaxai::uarao {

// Row-major S x N matrix; row s is the map from parameter sample s.
struct SampleMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vector data;

    SampleMatrix() = default;
    SampleMatrix(std::size_t s, std::size_t n) : rows(s), cols(n), data(s * n, 0.0) {}

    static SampleMatrix from_rows(const std::vector<Vector>& rs) {
        if (rs.empty()) throw ShapeError("sample matrix needs at least one row");
        SampleMatrix m(rs.size(), rs.front().size());
        for (std::size_t s = 0; s < rs.size(); ++s) {
            if (rs[s].size() != m.cols) throw ShapeError("sample rows differ in length");
            std::copy(rs[s].begin(), rs[s].end(), m.data.begin() + static_cast<std::ptrdiff_t>(s * m.cols));
        }
        return m;
    }

    double at(std::size_t s, std::size_t n) const { return data[s * cols + n]; }
    double& at(std::size_t s, std::size_t n) { return data[s * cols + n]; }
    std::span<const double> row(std::size_t s) const { return {data.data() + s * cols, cols}; }
    Vector column(std::size_t n) const {
        Vector c(rows);
        for (std::size_t s = 0; s < rows; ++s) c[s] = at(s, n);
        return c;
    }
};

/// Empirical explanation distribution for one input: nonnegative relevance
/// rows plus the signed maps they came from.
struct ExplanationSamples {
    SampleMatrix relevance;
    SampleMatrix raw;
    attribution::Operator op = attribution::Operator::occlusion;
    posterior::Kind posterior = posterior::Kind::deterministic;
    std::string input_id;
    std::size_t target = 0;
    std::vector<std::uint64_t> sample_seeds;

    std::size_t samples() const { return relevance.rows; }
    std::size_t length() const { return relevance.cols; }
};

inline ExplanationSamples make_samples(const std::vector<attribution::SaliencyMap>& maps, posterior::Kind kind,
                                       std::string input_id = {}) {
    if (maps.empty()) throw ShapeError("no explanation maps");
    std::vector<Vector> raw, rel;
    for (const auto& m : maps) {
        raw.push_back(m.r);
        rel.push_back(attribution::to_relevance(m).r);
    }
    ExplanationSamples e;
    e.raw = SampleMatrix::from_rows(raw);
    e.relevance = SampleMatrix::from_rows(rel);
    e.op = maps.front().op;
    e.target = maps.front().target;
    e.posterior = kind;
    e.input_id = std::move(input_id);
    return e;
}

/// One relevance row per parameter sample, in sample order.
inline ExplanationSamples sample_explanations(std::span<const posterior::ParameterSample> draws,
                                              attribution::Operator op, std::span<const double> x, std::size_t c,
                                              const attribution::OperatorConfig& cfg, std::uint64_t lime_seed) {
    if (draws.empty()) throw ShapeError("no parameter samples");
    auto e = make_samples(attribution::explain(draws, op, x, c, cfg, lime_seed), draws.front().kind);
    for (const auto& d : draws) e.sample_seeds.push_back(d.seed);
    return e;
}

inline ExplanationSamples sample_explanations(const posterior::PosteriorApprox& post, attribution::Operator op,
                                              std::span<const double> x, std::size_t c, std::size_t S, Rng& rng,
                                              const attribution::OperatorConfig& cfg) {
    const auto draws = posterior::sample(post, S, rng);
    return sample_explanations(draws, op, x, c, cfg, rng.bits());
}

// ---------------------------------------------------------------------------
// Summaries

struct SummaryConfig {
    std::vector<double> alphas = {0.05, 0.25, 0.5, 0.75, 0.95};
    double kappa = 1e-8;
    // Relevance cutoff; unset means delta_fraction times the largest entry.
    std::optional<double> delta;
    double delta_fraction = 0.1;

    void validate() const {
        for (double a : alphas)
            if (!(a > 0.0 && a < 1.0)) throw ConfigError("quantile level must lie in (0, 1)");
        if (!(kappa > 0.0)) throw ConfigError("kappa must be positive");
        if (delta && !(*delta > 0.0)) throw ConfigError("delta must be positive");
        if (!(delta_fraction > 0.0)) throw ConfigError("delta_fraction must be positive");
    }
};

inline Vector mean_map(const SampleMatrix& e) {
    if (e.rows == 0) throw ShapeError("mean of zero samples");
    Vector m(e.cols, 0.0);
    for (std::size_t s = 0; s < e.rows; ++s)
        for (std::size_t n = 0; n < e.cols; ++n) m[n] += e.at(s, n);
    for (auto& v : m) v /= static_cast<double>(e.rows);
    return m;
}

// Unbiased, 1/(S-1).
inline Vector variance_map(const SampleMatrix& e) {
    if (e.rows < 2) throw ShapeError("variance undefined for fewer than two samples");
    const Vector m = mean_map(e);
    Vector v(e.cols, 0.0);
    for (std::size_t s = 0; s < e.rows; ++s)
        for (std::size_t n = 0; n < e.cols; ++n) {
            const double d = e.at(s, n) - m[n];
            v[n] += d * d;
        }
    for (auto& x : v) x /= static_cast<double>(e.rows - 1);
    return v;
}

inline Vector cv_map(const SampleMatrix& e, double kappa = 1e-8) {
    const Vector m = mean_map(e);
    Vector v = variance_map(e);
    for (std::size_t n = 0; n < v.size(); ++n) v[n] = std::sqrt(v[n]) / (std::abs(m[n]) + kappa);
    return v;
}

// 1-based rank ceil(alpha * S); the small slack absorbs representation error
// in alpha (0.15 * 20 must give 3, not 4).
inline std::size_t quantile_rank(double alpha, std::size_t S) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("quantile level must lie in (0, 1)");
    const double k = std::ceil(alpha * static_cast<double>(S) - 1e-9);
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(k, 1.0)), 1, S);
}

/// Per-column order statistic r_(ceil(alpha S)), no interpolation.
inline Vector quantile_map(const SampleMatrix& e, double alpha) {
    if (e.rows == 0) throw ShapeError("quantile of zero samples");
    const std::size_t k = quantile_rank(alpha, e.rows) - 1;
    Vector q(e.cols);
    Vector col(e.rows);
    for (std::size_t n = 0; n < e.cols; ++n) {
        for (std::size_t s = 0; s < e.rows; ++s) col[s] = e.at(s, n);
        std::nth_element(col.begin(), col.begin() + static_cast<std::ptrdiff_t>(k), col.end());
        q[n] = col[k];
    }
    return q;
}

inline double default_delta(const SampleMatrix& e, double fraction = 0.1) {
    double top = 0.0;
    for (double v : e.data) top = std::max(top, v);
    return fraction * top;
}

/// Indices where at least a fraction eta of the samples exceed delta.
inline std::vector<std::size_t> agreement_set(const SampleMatrix& e, double delta, double eta) {
    if (!(delta > 0.0)) throw ConfigError("delta must be positive");
    if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0, 1]");
    std::vector<std::size_t> out;
    for (std::size_t n = 0; n < e.cols; ++n) {
        std::size_t hits = 0;
        for (std::size_t s = 0; s < e.rows; ++s) hits += e.at(s, n) > delta ? 1 : 0;
        if (static_cast<double>(hits) / static_cast<double>(e.rows) >= eta) out.push_back(n);
    }
    return out;
}

inline std::vector<std::size_t> union_set(const SampleMatrix& e, double delta) {
    return agreement_set(e, delta, 1.0 / static_cast<double>(e.rows));
}

inline std::vector<std::size_t> intersection_set(const SampleMatrix& e, double delta) {
    return agreement_set(e, delta, 1.0);
}

enum class SummaryKind { mean, variance, cv, quantile, union_set, intersection_set };

struct Summary {
    SummaryKind kind = SummaryKind::mean;
    double alpha = 0.0;  // quantile only

    bool point_valued() const { return kind != SummaryKind::union_set && kind != SummaryKind::intersection_set; }
    // Dispersion maps are scored like the others but flagged in reports.
    bool diagnostic() const { return kind == SummaryKind::variance || kind == SummaryKind::cv; }
    bool operator==(const Summary&) const = default;

    std::string name() const {
        switch (kind) {
            case SummaryKind::mean: return "mean";
            case SummaryKind::variance: return "var";
            case SummaryKind::cv: return "cv";
            case SummaryKind::union_set: return "union";
            case SummaryKind::intersection_set: return "intersection";
            case SummaryKind::quantile: {
                char buf[16];
                std::snprintf(buf, sizeof buf, "q%02d", static_cast<int>(std::lround(alpha * 100)));
                return buf;
            }
        }
        return "?";
    }

    static Summary quantile(double a) { return {SummaryKind::quantile, a}; }
};

inline const std::vector<std::string>& summary_names() {
    static const std::vector<std::string> names = {"mean", "var", "cv", "q05", "q25", "q50",
                                                   "q75", "q95", "union", "intersection"};
    return names;
}

inline Summary summary_from_name(const std::string& name) {
    if (name == "mean") return {SummaryKind::mean};
    if (name == "var") return {SummaryKind::variance};
    if (name == "cv") return {SummaryKind::cv};
    if (name == "union") return {SummaryKind::union_set};
    if (name == "intersection") return {SummaryKind::intersection_set};
    if (name.size() == 3 && name[0] == 'q' && std::isdigit(static_cast<unsigned char>(name[1])) &&
        std::isdigit(static_cast<unsigned char>(name[2]))) {
        const int pct = std::stoi(name.substr(1));
        if (pct > 0) return Summary::quantile(pct / 100.0);
    }
    std::string valid;
    for (const auto& n : summary_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown summary '" + name + "' (valid: " + valid + ", or qNN)");
}

/// The eight point-valued summaries.
inline std::vector<Summary> point_summaries() {
    std::vector<Summary> out = {{SummaryKind::mean}, {SummaryKind::variance}, {SummaryKind::cv}};
    for (double a : SummaryConfig{}.alphas) out.push_back(Summary::quantile(a));
    return out;
}

inline std::vector<double> indicator(const std::vector<std::size_t>& set, std::size_t n) {
    Vector v(n, 0.0);
    for (auto i : set) v.at(i) = 1.0;
    return v;
}

/// Map for any summary; set-valued ones come back as 0/1 indicators.
inline Vector summary_map(const SampleMatrix& e, const Summary& s, const SummaryConfig& cfg = {}) {
    switch (s.kind) {
        case SummaryKind::mean: return mean_map(e);
        case SummaryKind::variance: return variance_map(e);
        case SummaryKind::cv: return cv_map(e, cfg.kappa);
        case SummaryKind::quantile: return quantile_map(e, s.alpha);
        case SummaryKind::union_set:
        case SummaryKind::intersection_set: {
            const double delta = cfg.delta ? *cfg.delta : default_delta(e, cfg.delta_fraction);
            if (!(delta > 0.0)) return Vector(e.cols, 0.0);  // all-zero maps: nothing is relevant
            return indicator(s.kind == SummaryKind::union_set ? union_set(e, delta) : intersection_set(e, delta), e.cols);
        }
    }
    throw ConfigError("unhandled summary");
}

// ---------------------------------------------------------------------------
// Affine-Gaussian toy: tau(theta) = A theta + b with theta ~ N(mu, diag sigma2).

struct AffineGaussianToy {
    Eigen::MatrixXd A;
    Eigen::VectorXd b;
    Eigen::VectorXd mu;
    Eigen::VectorXd sigma2;

    void validate() const {
        if (A.cols() != mu.size() || A.rows() != b.size() || sigma2.size() != mu.size())
            throw ShapeError("affine toy dimensions disagree");
        if ((sigma2.array() < 0.0).any()) throw ConfigError("negative variance");
    }

    // Closed form of the explanation distribution: Gaussian per coordinate.
    Vector mean() const {
        validate();
        const Eigen::VectorXd m = A * mu + b;
        return {m.data(), m.data() + m.size()};
    }

    Vector variance() const {
        validate();
        const Eigen::VectorXd v = A.array().square().matrix() * sigma2;
        return {v.data(), v.data() + v.size()};
    }

    SampleMatrix draw(std::size_t S, Rng& rng) const {
        validate();
        SampleMatrix e(S, static_cast<std::size_t>(A.rows()));
        Eigen::VectorXd theta(mu.size());
        for (std::size_t s = 0; s < S; ++s) {
            for (Eigen::Index j = 0; j < mu.size(); ++j) theta(j) = mu(j) + std::sqrt(sigma2(j)) * rng.normal();
            const Eigen::VectorXd r = A * theta + b;
            for (Eigen::Index n = 0; n < r.size(); ++n) e.at(s, static_cast<std::size_t>(n)) = r(n);
        }
        return e;
    }
};

inline double normal_cdf(double x, double mean, double sd) {
    if (sd == 0.0) return x < mean ? 0.0 : 1.0;
    return 0.5 * std::erfc(-(x - mean) / (sd * std::numbers::sqrt2));
}

/// W1 between two scalar Gaussians as the integral of |F1 - F2|, composite
/// Simpson over mean +- 12 sd.
inline double wasserstein1_numeric(double m1, double s1, double m2, double s2, std::size_t intervals = 20000) {
    if (s1 < 0.0 || s2 < 0.0) throw ConfigError("negative standard deviation");
    const double spread = 12.0 * std::max({s1, s2, 1e-12});
    const double lo = std::min(m1, m2) - spread;
    const double hi = std::max(m1, m2) + spread;
    if (intervals % 2) ++intervals;
    const double h = (hi - lo) / static_cast<double>(intervals);
    auto f = [&](double x) { return std::abs(normal_cdf(x, m1, s1) - normal_cdf(x, m2, s2)); };
    double acc = f(lo) + f(hi);
    for (std::size_t i = 1; i < intervals; ++i) acc += (i % 2 ? 4.0 : 2.0) * f(lo + h * static_cast<double>(i));
    return acc * h / 3.0;
}

// ---------------------------------------------------------------------------
// Results bundle: <stem>.uxex binary block, optional <stem>.jsonl

inline constexpr char kBundleMagic[] = "UXEX";
inline constexpr std::uint32_t kBundleVersion = 2;

struct ExplanationBundle {
    nlohmann::json meta;  // posterior, operator, S, target, seeds, instance
    SampleMatrix raw;
    SampleMatrix relevance;
    std::vector<std::pair<std::string, Vector>> summaries;
    Vector input;                     // explained waveform
    std::vector<std::uint8_t> mask;   // ground truth; empty for external recordings
};

inline ExplanationBundle make_bundle(const ExplanationSamples& e, const std::vector<Summary>& summaries,
                                     const SummaryConfig& cfg, nlohmann::json extra = nlohmann::json::object()) {
    cfg.validate();
    ExplanationBundle b;
    b.meta = std::move(extra);
    b.meta["posterior"] = posterior::kind_name(e.posterior);
    b.meta["operator"] = attribution::operator_name(e.op);
    b.meta["samples"] = e.samples();
    b.meta["length"] = e.length();
    b.meta["target"] = e.target;
    b.meta["input_id"] = e.input_id;
    b.meta["sample_seeds"] = e.sample_seeds;
    b.raw = e.raw;
    b.relevance = e.relevance;
    for (const auto& s : summaries) b.summaries.emplace_back(s.name(), summary_map(e.relevance, s, cfg));
    return b;
}

namespace detail {
inline void put_matrix(binio::Writer& w, const SampleMatrix& m) {
    w.put(static_cast<std::uint32_t>(m.rows));
    w.put(static_cast<std::uint32_t>(m.cols));
    for (double v : m.data) w.put(v);
}

inline SampleMatrix get_matrix(binio::Reader& r) {
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    SampleMatrix m(rows, cols);
    for (auto& v : m.data) v = r.get<double>();
    return m;
}
}  // namespace detail

inline void write_bundle(const std::filesystem::path& path, const ExplanationBundle& b) {
    binio::Writer w(path);
    w.put_bytes(kBundleMagic);
    w.put(kBundleVersion);
    w.put_string(b.meta.dump());
    detail::put_matrix(w, b.raw);
    detail::put_matrix(w, b.relevance);
    w.put(static_cast<std::uint32_t>(b.summaries.size()));
    for (const auto& [name, map] : b.summaries) {
        w.put_string(name);
        w.put(static_cast<std::uint32_t>(map.size()));
        for (double v : map) w.put(v);
    }
    w.put(static_cast<std::uint32_t>(b.input.size()));
    for (double v : b.input) w.put(v);
    w.put(static_cast<std::uint32_t>(b.mask.size()));
    for (auto v : b.mask) w.put(v);
    w.close();
}

inline ExplanationBundle read_bundle(const std::filesystem::path& path) {
    binio::Reader r(path);
    r.expect_magic(kBundleMagic);
    if (const auto v = r.get<std::uint32_t>(); v != kBundleVersion)
        throw IoError("unsupported bundle version " + std::to_string(v) + " in " + path.string());
    ExplanationBundle b;
    b.meta = nlohmann::json::parse(r.get_string());
    b.raw = detail::get_matrix(r);
    b.relevance = detail::get_matrix(r);
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        auto name = r.get_string();
        Vector map(r.get<std::uint32_t>());
        for (auto& v : map) v = r.get<double>();
        b.summaries.emplace_back(std::move(name), std::move(map));
    }
    b.input.resize(r.get<std::uint32_t>());
    for (auto& v : b.input) v = r.get<double>();
    b.mask.resize(r.get<std::uint32_t>());
    for (auto& v : b.mask) v = r.get<std::uint8_t>();
    return b;
}

// One JSON object per line: metadata, then each raw row, then each summary.
inline void write_bundle_jsonl(const std::filesystem::path& path, const ExplanationBundle& b) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << nlohmann::json{{"record", "meta"}, {"meta", b.meta}}.dump() << '\n';
    out << nlohmann::json{{"record", "input"}, {"x", b.input}, {"mask", b.mask}}.dump() << '\n';
    for (std::size_t s = 0; s < b.raw.rows; ++s) {
        const auto row = b.raw.row(s);
        out << nlohmann::json{{"record", "raw"}, {"sample", s}, {"r", Vector(row.begin(), row.end())}}.dump() << '\n';
    }
    for (const auto& [name, map] : b.summaries)
        out << nlohmann::json{{"record", "summary"}, {"summary", name}, {"r", map}}.dump() << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace uaxai::uarao
