#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "uaxai/attribution.hpp"
#include "uaxai/common.hpp"
#include "uaxai/posterior.hpp"
#include "uaxai/siggen.hpp"
#include "uaxai/uarao.hpp"

namespace uaxai::metrics {

inline GroundTruthMask mask_from_indices(std::vector<std::size_t> indices, std::size_t n) {
    GroundTruthMask m;
    m.mask.assign(n, 0);
    std::sort(indices.begin(), indices.end());
    indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
    for (auto i : indices) m.mask.at(i) = 1;
    m.indices = std::move(indices);
    return m;
}

namespace detail {
inline void check_relevance(std::span<const double> r, const GroundTruthMask& m) {
    if (r.size() != m.mask.size()) throw ShapeError("relevance map and mask differ in length");
    for (double v : r)
        if (!(v >= 0.0)) throw ConfigError("relevance must be nonnegative and finite");
}
}  // namespace detail

/// Share of relevance mass inside the mask. Missing when the mask is empty or
/// the map carries no mass.
inline std::optional<double> rma(std::span<const double> r, const GroundTruthMask& m) {
    detail::check_relevance(r, m);
    if (m.length() == 0) return std::nullopt;
    double inside = 0.0, total = 0.0;
    for (std::size_t n = 0; n < r.size(); ++n) {
        total += r[n];
        if (m.mask[n]) inside += r[n];
    }
    if (!(total > 0.0)) return std::nullopt;
    return inside / total;
}

/// Indices of the L largest values, ascending. Ties go to the lowest index.
inline std::vector<std::size_t> top_l(std::span<const double> r, std::size_t L) {
    if (L == 0 || L > r.size()) throw ConfigError("top-L needs 1 <= L <= N");
    std::vector<std::size_t> idx(r.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(L), idx.end(),
                      [&](std::size_t a, std::size_t b) { return r[a] > r[b] || (r[a] == r[b] && a < b); });
    idx.resize(L);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline std::optional<double> iou(std::span<const double> r, const GroundTruthMask& m) {
    detail::check_relevance(r, m);
    const std::size_t L = m.length();
    if (L == 0) return std::nullopt;
    std::size_t both = 0;
    for (auto i : top_l(r, L)) both += m.mask[i];
    return static_cast<double>(both) / static_cast<double>(2 * L - both);
}

/// (r - min) / (max - min); a constant map becomes all zeros.
inline Vector minmax_normalize(std::span<const double> r) {
    if (r.empty()) return {};
    const auto [lo, hi] = std::minmax_element(r.begin(), r.end());
    const double a = *lo, b = *hi;
    Vector out(r.size(), 0.0);
    if (!(b > a)) return out;
    for (std::size_t n = 0; n < r.size(); ++n) out[n] = (r[n] - a) / (b - a);
    return out;
}

// ---------------------------------------------------------------------------
// Records and aggregation

struct EvalRecord {
    std::uint32_t instance = 0;
    std::uint32_t split = 0;
    std::size_t cls = 0;
    std::string posterior;
    std::string op;
    std::string summary;
    std::optional<double> rma;
    std::optional<double> iou;
};

struct Stat {
    double mean = std::numeric_limits<double>::quiet_NaN();
    double std = std::numeric_limits<double>::quiet_NaN();
    std::size_t splits = 0;
};

// Mean and population standard deviation across splits.
inline Stat across_splits(const std::vector<double>& per_split) {
    Stat s;
    s.splits = per_split.size();
    if (per_split.empty()) return s;
    s.mean = std::accumulate(per_split.begin(), per_split.end(), 0.0) / static_cast<double>(per_split.size());
    double ss = 0.0;
    for (double v : per_split) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(per_split.size()));
    return s;
}

struct TableRow {
    std::string posterior;
    std::string op;
    std::string summary;
    bool diagnostic = false;
    int cls = -1;  // -1: macro over all disturbance classes
    Stat rma;
    Stat iou;
    std::size_t instances = 0;
    std::size_t missing_rma = 0;
    std::size_t missing_iou = 0;
};

/// Per-instance mean within each split, then mean +- std across splits.
/// Missing values are excluded and counted. Rows follow the first appearance
/// of each (posterior, operator, summary) in `records`, then class order.
inline std::vector<TableRow> aggregate(const std::vector<EvalRecord>& records, bool per_class) {
    using Key = std::tuple<std::size_t, int>;
    struct Acc {
        std::map<std::uint32_t, std::pair<double, std::size_t>> rma, iou;
        std::size_t instances = 0, missing_rma = 0, missing_iou = 0;
    };
    std::vector<std::tuple<std::string, std::string, std::string>> cells;
    std::map<std::tuple<std::string, std::string, std::string>, std::size_t> cell_index;
    std::map<Key, Acc> acc;
    for (const auto& r : records) {
        const auto name = std::make_tuple(r.posterior, r.op, r.summary);
        auto it = cell_index.find(name);
        if (it == cell_index.end()) {
            it = cell_index.emplace(name, cells.size()).first;
            cells.push_back(name);
        }
        auto& a = acc[Key{it->second, per_class ? static_cast<int>(r.cls) : -1}];
        ++a.instances;
        if (r.rma) {
            auto& [sum, n] = a.rma[r.split];
            sum += *r.rma;
            ++n;
        } else {
            ++a.missing_rma;
        }
        if (r.iou) {
            auto& [sum, n] = a.iou[r.split];
            sum += *r.iou;
            ++n;
        } else {
            ++a.missing_iou;
        }
    }
    auto split_means = [](const std::map<std::uint32_t, std::pair<double, std::size_t>>& m) {
        std::vector<double> v;
        for (const auto& [split, sn] : m) v.push_back(sn.first / static_cast<double>(sn.second));
        return v;
    };
    std::vector<TableRow> rows;
    for (const auto& [key, a] : acc) {
        const auto& [cell, cls] = key;
        TableRow row;
        std::tie(row.posterior, row.op, row.summary) = cells[cell];
        row.diagnostic = uarao::summary_from_name(row.summary).diagnostic();
        row.cls = cls;
        row.rma = across_splits(split_means(a.rma));
        row.iou = across_splits(split_means(a.iou));
        row.instances = a.instances;
        row.missing_rma = a.missing_rma;
        row.missing_iou = a.missing_iou;
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Evaluation harness

struct GridCell {
    std::string posterior;
    attribution::Operator op = attribution::Operator::occlusion;
    uarao::Summary summary;
};

/// Posteriors x occlusion x mean, ensemble x operators x mean, and ensemble x
/// occlusion x every point summary.
inline std::vector<GridCell> default_grid() {
    using attribution::Operator;
    const uarao::Summary mean{uarao::SummaryKind::mean};
    std::vector<GridCell> g;
    for (const char* p : {"deterministic", "ensemble", "laplace", "mc_dropout"}) g.push_back({p, Operator::occlusion, mean});
    g.push_back({"ensemble", Operator::gradcam, mean});
    g.push_back({"ensemble", Operator::lime, mean});
    for (const auto& s : uarao::point_summaries())
        if (!(s == mean)) g.push_back({"ensemble", Operator::occlusion, s});
    return g;
}

/// Every sampling posterior x every operator x every point summary.
inline std::vector<GridCell> full_grid() {
    using attribution::Operator;
    std::vector<GridCell> g;
    for (const char* p : {"ensemble", "laplace", "mc_dropout"})
        for (Operator op : {Operator::occlusion, Operator::gradcam, Operator::lime})
            for (const auto& s : uarao::point_summaries()) g.push_back({p, op, s});
    return g;
}

struct PosteriorEntry {
    const posterior::PosteriorApprox* approx = nullptr;
    std::size_t samples = 1;
};

struct AccuracyRecord {
    std::string posterior;
    std::uint32_t split = 0;
    std::string split_name;
    double accuracy = 0.0;
};

struct EvalConfig {
    std::vector<GridCell> grid = default_grid();
    attribution::OperatorConfig operators;
    uarao::SummaryConfig summaries;
    double epsilon = 1e-5;  // absolute mask threshold
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::function<void(std::size_t, std::size_t)> progress;  // (done, total) instances
};

struct EvalResult {
    std::vector<EvalRecord> records;
    std::vector<AccuracyRecord> accuracy;
};

inline std::uint64_t name_stream(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ull;
    return h;
}

namespace detail {

struct InstanceOutput {
    std::vector<EvalRecord> records;
    std::vector<std::uint8_t> correct;  // per posterior, in plan order
};

struct Plan {
    std::vector<std::string> posteriors;  // first-appearance order
    // per posterior: operators in first-appearance order, each with its summaries and grid rows
    std::vector<std::vector<std::pair<attribution::Operator, std::vector<uarao::Summary>>>> ops;
};

inline Plan make_plan(const std::vector<GridCell>& grid) {
    Plan p;
    for (const auto& c : grid) {
        auto pi = std::find(p.posteriors.begin(), p.posteriors.end(), c.posterior) - p.posteriors.begin();
        if (static_cast<std::size_t>(pi) == p.posteriors.size()) {
            p.posteriors.push_back(c.posterior);
            p.ops.emplace_back();
        }
        auto& ops = p.ops[static_cast<std::size_t>(pi)];
        auto oi = std::find_if(ops.begin(), ops.end(), [&](const auto& o) { return o.first == c.op; });
        if (oi == ops.end()) {
            ops.emplace_back(c.op, std::vector<uarao::Summary>{});
            oi = ops.end() - 1;
        }
        if (std::find(oi->second.begin(), oi->second.end(), c.summary) == oi->second.end())
            oi->second.push_back(c.summary);
    }
    return p;
}

}  // namespace detail

/// Scores every grid cell on every disturbance instance of `splits` against
/// its ground-truth mask, using the true label as the target class. Also
/// records posterior-predictive accuracy over all instances (normal included).
/// Per-instance randomness derives from (seed, split, instance, posterior), so
/// results do not depend on the thread count.
inline EvalResult evaluate(const std::vector<const Split*>& splits,
                           const std::map<std::string, PosteriorEntry>& posteriors, const EvalConfig& cfg) {
    if (splits.empty()) throw ConfigError("evaluation needs at least one test split");
    if (cfg.grid.empty()) throw ConfigError("evaluation grid is empty");
    cfg.summaries.validate();
    const auto plan = detail::make_plan(cfg.grid);
    std::string missing;
    for (const auto& name : plan.posteriors) {
        const auto it = posteriors.find(name);
        if (it == posteriors.end() || it->second.approx == nullptr) {
            missing += (missing.empty() ? "" : ", ") + name;
            continue;
        }
        for (const auto& c : cfg.grid)
            if (c.posterior == name && !c.summary.point_valued())
                throw ConfigError("only point-valued summaries can be scored (got " + c.summary.name() + ")");
        for (const auto& c : cfg.grid)
            if (c.posterior == name && it->second.samples < 2 &&
                (c.summary.kind == uarao::SummaryKind::variance || c.summary.kind == uarao::SummaryKind::cv))
                throw ConfigError("summary " + c.summary.name() + " needs at least two samples from posterior " + name);
    }
    if (!missing.empty()) throw ConfigError("missing posterior artefacts: " + missing + " (run train first)");

    std::vector<const Waveform*> items;
    for (const auto* s : splits)
        for (const auto& w : s->records) {
            if (w.external)
                throw ConfigError("split " + s->name + " holds external recordings without ground truth; use explain");
            items.push_back(&w);
        }
    std::vector<detail::InstanceOutput> out(items.size());
    std::atomic<std::size_t> done{0};
    std::mutex progress_lock;

    parallel_for(items.size(), cfg.threads, [&](std::size_t i) {
        const auto& w = *items[i];
        const std::size_t c = static_cast<std::size_t>(w.label);
        const bool scored = w.label != DisturbanceClass::normal;
        const auto mask = scored ? ground_truth_mask(w.d, cfg.epsilon) : GroundTruthMask{};
        auto& o = out[i];
        for (std::size_t p = 0; p < plan.posteriors.size(); ++p) {
            const auto& name = plan.posteriors[p];
            const auto& entry = posteriors.at(name);
            const std::uint64_t stream = derive_seed(cfg.seed, w.split_id, w.index, name_stream(name));
            Rng rng(stream);
            const auto draws = posterior::sample(*entry.approx, entry.samples, rng);
            const Vector probs = posterior::predictive(draws, w.x);
            o.correct.push_back(static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin()) == c);
            if (!scored) continue;
            for (const auto& [op, summaries] : plan.ops[p]) {
                const auto e = uarao::sample_explanations(draws, op, w.x, c, cfg.operators, derive_seed(stream, 1));
                for (const auto& s : summaries) {
                    const Vector map = uarao::summary_map(e.relevance, s, cfg.summaries);
                    o.records.push_back({w.index, w.split_id, c, name, std::string(attribution::operator_name(op)),
                                         s.name(), rma(map, mask), iou(map, mask)});
                }
            }
        }
        const std::size_t d = ++done;
        if (cfg.progress) {
            std::lock_guard lock(progress_lock);
            cfg.progress(d, items.size());
        }
    });

    EvalResult result;
    // Records in grid order within each instance.
    for (auto& o : out) {
        for (const auto& cell : cfg.grid)
            for (const auto& r : o.records)
                if (r.posterior == cell.posterior && r.op == attribution::operator_name(cell.op) &&
                    r.summary == cell.summary.name())
                    result.records.push_back(r);
    }
    std::size_t offset = 0;
    for (const auto* s : splits) {
        for (std::size_t p = 0; p < plan.posteriors.size(); ++p) {
            std::size_t hits = 0;
            for (std::size_t k = 0; k < s->records.size(); ++k) hits += out[offset + k].correct[p];
            result.accuracy.push_back({plan.posteriors[p], s->id, s->name,
                                       s->records.empty() ? 0.0
                                                          : static_cast<double>(hits) / static_cast<double>(s->records.size())});
        }
        offset += s->records.size();
    }
    return result;
}

// ---------------------------------------------------------------------------
// Reports

namespace detail {
inline std::string fmt(double v) {
    if (std::isnan(v)) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline std::ofstream open_csv(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    return out;
}
}  // namespace detail

inline void write_table_csv(const std::filesystem::path& path, const std::vector<TableRow>& rows, bool per_class) {
    auto out = detail::open_csv(path);
    out << "posterior,operator,summary,role";
    if (per_class) out << ",class";
    out << ",rma_mean,rma_std,iou_mean,iou_std,splits,instances,missing_rma,missing_iou\n";
    for (const auto& r : rows) {
        out << r.posterior << ',' << r.op << ',' << r.summary << ',' << (r.diagnostic ? "diagnostic" : "localisation");
        if (per_class) out << ',' << class_name(class_from_id(r.cls));
        out << ',' << detail::fmt(r.rma.mean) << ',' << detail::fmt(r.rma.std) << ',' << detail::fmt(r.iou.mean) << ','
            << detail::fmt(r.iou.std) << ',' << std::max(r.rma.splits, r.iou.splits) << ',' << r.instances << ','
            << r.missing_rma << ',' << r.missing_iou << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

inline void write_accuracy_csv(const std::filesystem::path& path, const std::vector<AccuracyRecord>& acc) {
    auto out = detail::open_csv(path);
    out << "posterior,split,accuracy\n";
    std::vector<std::string> names;
    for (const auto& a : acc)
        if (std::find(names.begin(), names.end(), a.posterior) == names.end()) names.push_back(a.posterior);
    for (const auto& name : names) {
        std::vector<double> v;
        for (const auto& a : acc)
            if (a.posterior == name) {
                out << name << ',' << a.split_name << ',' << detail::fmt(a.accuracy) << '\n';
                v.push_back(a.accuracy);
            }
        const auto s = across_splits(v);
        out << name << ",mean," << detail::fmt(s.mean) << '\n' << name << ",std," << detail::fmt(s.std) << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

inline void write_records_csv(const std::filesystem::path& path, const std::vector<EvalRecord>& records) {
    auto out = detail::open_csv(path);
    out << "split,instance,class,posterior,operator,summary,rma,iou\n";
    char buf[32];
    auto full = [&](const std::optional<double>& v) -> std::string {
        if (!v) return "";
        std::snprintf(buf, sizeof buf, "%.17g", *v);
        return buf;
    };
    for (const auto& r : records)
        out << r.split << ',' << r.instance << ',' << class_name(class_from_id(r.cls)) << ','
            << r.posterior << ',' << r.op << ',' << r.summary << ',' << full(r.rma) << ',' << full(r.iou) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

inline double mean_accuracy(const std::vector<AccuracyRecord>& acc, const std::string& posterior) {
    std::vector<double> v;
    for (const auto& a : acc)
        if (a.posterior == posterior) v.push_back(a.accuracy);
    if (v.empty()) throw ConfigError("no accuracy recorded for posterior " + posterior);
    return across_splits(v).mean;
}

inline const TableRow& find_row(const std::vector<TableRow>& rows, const std::string& posterior, const std::string& op,
                                const std::string& summary, int cls = -1) {
    for (const auto& r : rows)
        if (r.posterior == posterior && r.op == op && r.summary == summary && r.cls == cls) return r;
    throw ConfigError("no table row for " + posterior + "/" + op + "/" + summary);
}

}  // namespace uaxai::metrics
