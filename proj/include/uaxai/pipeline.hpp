#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "uaxai/attribution.hpp"
#include "uaxai/common.hpp"
#include "uaxai/config.hpp"
#include "uaxai/ingest.hpp"
#include "uaxai/metrics.hpp"
#include "uaxai/posterior.hpp"
#include "uaxai/report.hpp"
#include "uaxai/siggen.hpp"
#include "uaxai/tensornet.hpp"
#include "uaxai/uarao.hpp"

namespace uaxai::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// Split id of ingested recordings; only used to derive their random streams.
inline constexpr std::uint32_t kExternalSplitId = 1000;
inline constexpr const char* kExternalSplit = "external";

struct Paths {
    fs::path root;

    explicit Paths(fs::path r) : root(std::move(r)) {}
    explicit Paths(const RunConfig& cfg) : root(cfg.str("out_dir")) {}

    fs::path data() const { return root / "data"; }
    fs::path split(const std::string& name) const { return data() / (name + ".pqds"); }
    fs::path data_manifest() const { return data() / "manifest.json"; }
    fs::path models() const { return root / "models"; }
    fs::path member(std::size_t k) const { return models() / ("member_" + std::to_string(k)); }
    fs::path posterior(const std::string& name) const { return models() / name; }
    fs::path explain() const { return root / "explain"; }
    fs::path eval() const { return root / "eval"; }
    fs::path report() const { return root / "report"; }
};

inline std::size_t thread_count(const RunConfig& cfg) {
    const std::size_t t = cfg.count("threads");
    return t ? t : std::max(1u, std::thread::hardware_concurrency());
}

inline std::string fnv_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) h = (h ^ static_cast<unsigned char>(buf[i])) * 0x100000001b3ull;
        if (!in) break;
    }
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

inline json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

inline void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

inline bool same_fingerprint(const fs::path& meta, const json& fp) {
    if (!fs::exists(meta)) return false;
    try {
        return read_json(meta).value("fingerprint", json()) == fp;
    } catch (const IoError&) {
        return false;
    }
}

inline void write_resolved(const RunConfig& cfg, const std::string& command) {
    const Paths p(cfg);
    fs::create_directories(p.root);
    cfg.write_resolved(p.root / ("resolved." + command + ".cfg"));
}

// ---------------------------------------------------------------------------
// generate

inline json dataset_fingerprint(const RunConfig& cfg) {
    const auto s = cfg.signal();
    return {{"seed", cfg.seed()},
            {"n_samples", s.n_samples},
            {"cycles", s.cycles},
            {"amplitude", s.amplitude},
            {"snr_db", s.snr_db},
            {"epsilon", s.epsilon},
            {"train_per_class", cfg.count("data.train_per_class")},
            {"val_per_class", cfg.count("data.val_per_class")},
            {"test_per_class", cfg.count("data.test_per_class")},
            {"test_splits", cfg.count("data.test_splits")}};
}

/// Writes every split under data/. Returns false when an identical dataset
/// is already there.
inline bool generate(const RunConfig& cfg, std::ostream& log) {
    const Paths p(cfg);
    const json fp = dataset_fingerprint(cfg);
    if (same_fingerprint(p.data_manifest(), fp)) {
        bool intact = true;
        const json m = read_json(p.data_manifest());
        for (const auto& s : m.at("splits"))
            intact = intact && fs::exists(p.data() / s.at("file").get<std::string>()) &&
                     fnv_file(p.data() / s.at("file").get<std::string>()) == s.at("checksum").get<std::string>();
        if (intact) {
            log << "dataset up to date in " << p.data().string() << '\n';
            return false;
        }
    }
    fs::create_directories(p.data());
    const auto ds = generate_dataset(cfg.signal(), cfg.layout(), cfg.seed());
    json splits = json::array();
    for (const auto& s : ds.splits) {
        const auto path = p.split(s.name);
        write_split(path, s, ds.config);
        splits.push_back({{"name", s.name},
                          {"id", s.id},
                          {"file", path.filename().string()},
                          {"records", s.records.size()},
                          {"checksum", fnv_file(path)}});
        std::array<std::size_t, kNumClasses> counts{};
        for (const auto& w : s.records) ++counts[static_cast<std::size_t>(w.label)];
        log << "wrote " << path.string() << " (" << s.records.size() << " records)\n ";
        for (std::size_t c = 0; c < kNumClasses; ++c)
            log << ' ' << class_name(static_cast<DisturbanceClass>(c)) << '=' << counts[c];
        log << '\n';
    }
    write_json(p.data_manifest(), {{"format_version", kDatasetFormatVersion}, {"fingerprint", fp}, {"splits", splits}});
    return true;
}

/// Reads one generated split, checking it against the manifest and the
/// current configuration.
inline Split load_split(const RunConfig& cfg, const std::string& name, SignalConfig* config_out = nullptr) {
    const Paths p(cfg);
    if (name == kExternalSplit) {
        if (!fs::exists(p.split(name))) throw IoError("no ingested recordings in " + p.data().string() + " (run ingest first)");
        return read_split(p.split(name), config_out);
    }
    if (!fs::exists(p.data_manifest())) throw IoError("no dataset in " + p.data().string() + " (run generate first)");
    const json m = read_json(p.data_manifest());
    if (m.at("fingerprint") != dataset_fingerprint(cfg))
        throw IoError("dataset in " + p.data().string() + " was generated with a different configuration (rerun generate)");
    for (const auto& s : m.at("splits")) {
        if (s.at("name") != name) continue;
        const auto path = p.data() / s.at("file").get<std::string>();
        if (fnv_file(path) != s.at("checksum").get<std::string>()) throw IoError("checksum mismatch: " + path.string());
        return read_split(path, config_out);
    }
    throw ConfigError("dataset has no split '" + name + "'");
}

inline std::vector<std::string> test_split_names(const RunConfig& cfg) {
    const Paths p(cfg);
    if (!fs::exists(p.data_manifest())) throw IoError("no dataset in " + p.data().string() + " (run generate first)");
    std::vector<std::string> out;
    const json m = read_json(p.data_manifest());
    for (const auto& s : m.at("splits")) {
        const auto name = s.at("name").get<std::string>();
        if (name.rfind("test_", 0) == 0) out.push_back(name);
    }
    return out;
}

// ---------------------------------------------------------------------------
// train

enum class TrainTarget { all, baseline, ensemble, laplace, mc_dropout };

inline TrainTarget train_target_from_name(const std::string& s) {
    if (s == "all") return TrainTarget::all;
    if (s == "baseline" || s == "deterministic") return TrainTarget::baseline;
    if (s == "ensemble") return TrainTarget::ensemble;
    if (s == "laplace") return TrainTarget::laplace;
    if (s == "mc_dropout") return TrainTarget::mc_dropout;
    throw ConfigError("unknown training target '" + s + "' (valid: all, baseline, ensemble, laplace, mc_dropout)");
}

inline net::LabelledSet labelled(const Split& s) {
    net::LabelledSet out;
    for (const auto& w : s.records) {
        out.inputs.push_back(&w.x);
        out.labels.push_back(static_cast<std::size_t>(w.label));
    }
    return out;
}

inline std::uint64_t member_seed(std::uint64_t seed, std::size_t k) { return derive_seed(seed, 1000 + k); }

inline json training_fingerprint(const RunConfig& cfg) {
    return {{"dataset", dataset_fingerprint(cfg)},
            {"epochs", cfg.count("train.epochs")},
            {"patience", cfg.count("train.patience")},
            {"batch_size", cfg.count("train.batch_size")},
            {"learning_rate", cfg.real("train.learning_rate")},
            {"optimiser", cfg.str("train.optimiser")},
            {"weight_decay", cfg.real("train.weight_decay")},
            {"dropout_p", cfg.real("train.dropout_p")}};
}

struct TrainSummary {
    std::vector<std::size_t> trained;  // members fitted in this call
    std::vector<std::size_t> reused;   // members found on disk
    std::vector<std::string> posteriors;
};

/// Trains (or reuses) the members the target needs and writes the posterior
/// bundles under models/. Member 0 is the deterministic baseline and the MAP
/// network for MC dropout and Laplace.
inline TrainSummary train(const RunConfig& cfg, TrainTarget target, std::ostream& log) {
    const Paths p(cfg);
    const std::size_t M = cfg.count("train.ensemble");
    if (M == 0) throw ConfigError("train.ensemble must be positive");
    if ((target == TrainTarget::all || target == TrainTarget::ensemble) && M < 2)
        throw ConfigError("an ensemble needs train.ensemble >= 2");
    const auto tc = cfg.training();
    const std::size_t needed = (target == TrainTarget::all || target == TrainTarget::ensemble) ? M : 1;

    SignalConfig signal;
    const Split train_split = load_split(cfg, "train", &signal);
    Split val_split;
    if (cfg.count("data.val_per_class") > 0) val_split = load_split(cfg, "val");
    const auto train_set = labelled(train_split);
    const auto val_set = labelled(val_split);
    net::Architecture arch;
    arch.input_length = signal.n_samples;
    arch.dropout_p = tc.dropout_p;

    TrainSummary out;
    std::vector<net::NetworkParams> members;
    for (std::size_t k = 0; k < needed; ++k) {
        const auto dir = p.member(k);
        json fp = training_fingerprint(cfg);
        fp["member"] = k;
        fp["seed"] = member_seed(cfg.seed(), k);
        const auto ckpt = dir / "model.uxck";
        if (same_fingerprint(dir / "meta.json", fp) && fs::exists(ckpt)) {
            members.push_back(net::load_checkpoint(ckpt));
            out.reused.push_back(k);
            log << "member " << k << ": reusing " << ckpt.string() << '\n';
            continue;
        }
        fs::create_directories(dir);
        auto t = tc;
        t.seed = member_seed(cfg.seed(), k);
        const auto res = net::train(arch, train_set, val_set, t, [&](const net::EpochLog& e) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "member %zu epoch %3zu loss %.5f val_acc %.4f\n", k, e.epoch, e.train_loss,
                          e.val_acc);
            log << buf << std::flush;
        });
        net::save_checkpoint(ckpt, res.params);
        net::write_training_log(dir / "training_log.csv", res.log);
        const double best = res.log.at(res.best_epoch - 1).val_acc;
        write_json(dir / "meta.json", {{"fingerprint", fp}, {"best_epoch", res.best_epoch}, {"val_acc", best}});
        members.push_back(net::load_checkpoint(ckpt));
        out.trained.push_back(k);
    }

    auto save = [&](const std::string& name, const posterior::PosteriorApprox& post, json fp) {
        posterior::save_posterior(p.posterior(name), post);
        write_json(p.posterior(name) / "fingerprint.json", {{"fingerprint", fp}});
        out.posteriors.push_back(name);
        log << "wrote posterior " << p.posterior(name).string() << '\n';
    };
    json base_fp = training_fingerprint(cfg);
    base_fp["baseline_seed"] = member_seed(cfg.seed(), 0);

    save("deterministic", posterior::deterministic(members.front()), base_fp);
    if (target == TrainTarget::all || target == TrainTarget::ensemble) {
        json fp = training_fingerprint(cfg);
        fp["members"] = M;
        save("ensemble", posterior::make_ensemble(members), fp);
    }
    if (target == TrainTarget::all || target == TrainTarget::mc_dropout) {
        json fp = base_fp;
        fp["samples"] = cfg.count("mc_dropout.samples");
        save("mc_dropout", posterior::mc_dropout(members.front(), tc.dropout_p, cfg.count("mc_dropout.samples")), fp);
    }
    if (target == TrainTarget::all || target == TrainTarget::laplace) {
        json fp = base_fp;
        fp["damping"] = cfg.real("laplace.damping");
        fp["scaling"] = cfg.real("laplace.scaling");
        fp["samples"] = cfg.count("laplace.samples");
        fp["fisher_batch"] = cfg.count("laplace.batch_size");
        if (same_fingerprint(p.posterior("laplace") / "fingerprint.json", fp) &&
            fs::exists(p.posterior("laplace") / "manifest.json")) {
            log << "laplace: reusing " << p.posterior("laplace").string() << '\n';
            out.posteriors.push_back("laplace");
        } else {
            log << "laplace: diagonal Fisher over " << train_set.size() << " training instances\n";
            save("laplace",
                 posterior::fit_laplace(members.front(), train_set, cfg.real("laplace.damping"),
                                        cfg.real("laplace.scaling"), cfg.count("laplace.batch_size"),
                                        cfg.count("laplace.samples")),
                 fp);
        }
    }
    return out;
}

/// Loads posterior bundles by name, failing with one message that lists
/// every missing one.
inline std::map<std::string, posterior::PosteriorApprox> load_posteriors(const RunConfig& cfg,
                                                                          const std::vector<std::string>& names) {
    const Paths p(cfg);
    std::map<std::string, posterior::PosteriorApprox> out;
    std::string missing;
    for (const auto& name : names) {
        (void)posterior::kind_from_name(name);
        if (!fs::exists(p.posterior(name) / "manifest.json")) {
            missing += (missing.empty() ? "" : ", ") + name;
            continue;
        }
        out.emplace(name, posterior::load_posterior(p.posterior(name)));
    }
    if (!missing.empty())
        throw IoError("missing posterior artefacts in " + p.models().string() + ": " + missing + " (run train first)");
    return out;
}

// ---------------------------------------------------------------------------
// explain

inline std::vector<uarao::Summary> explain_summaries(const RunConfig& cfg, std::size_t S, std::ostream& log) {
    const auto names = cfg.list("explain.summaries");
    const bool all = names.size() == 1 && names[0] == "all";
    std::vector<uarao::Summary> out;
    std::vector<std::string> chosen = names;
    if (all) {
        chosen.clear();
        for (const auto& s : uarao::point_summaries()) chosen.push_back(s.name());
    }
    for (const auto& n : chosen) {
        const auto s = uarao::summary_from_name(n);
        if (S < 2 && (s.kind == uarao::SummaryKind::variance || s.kind == uarao::SummaryKind::cv)) {
            if (!all) throw ConfigError("summary " + n + " needs at least two posterior samples");
            log << "skipping " << n << ": a single posterior sample has no spread\n";
            continue;
        }
        out.push_back(s);
    }
    if (out.empty()) throw ConfigError("explain.summaries selects nothing");
    return out;
}

/// Explains the selected instances and writes one bundle per instance.
/// Posterior draws and LIME designs come from the same per-instance streams
/// as evaluation, so an explained instance matches its evaluation record.
inline std::vector<fs::path> explain(const RunConfig& cfg, std::ostream& log) {
    const Paths p(cfg);
    const auto post_name = cfg.str("explain.posterior");
    const auto op = attribution::operator_from_name(cfg.str("explain.operator"));
    const auto target_mode = cfg.str("explain.target");
    if (target_mode != "true" && target_mode != "predicted")
        throw ConfigError("explain.target must be true or predicted, got '" + target_mode + "'");
    const auto operators = cfg.operators();
    const auto sum_cfg = cfg.summaries();
    const bool jsonl = cfg.flag("explain.jsonl");
    std::vector<std::size_t> indices;
    for (const auto& s : cfg.list("explain.instances")) {
        std::size_t v = 0;
        const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || end != s.data() + s.size())
            throw ConfigError("explain.instances expects record indices, got '" + s + "'");
        indices.push_back(v);
    }
    if (indices.empty()) throw ConfigError("explain.instances is empty");
    for (const auto& n : cfg.list("explain.summaries"))
        if (n != "all") (void)uarao::summary_from_name(n);

    const auto split_name = cfg.str("explain.split");
    SignalConfig signal;
    const Split split = load_split(cfg, split_name, &signal);
    const auto posts = load_posteriors(cfg, {post_name});
    const auto& post = posts.at(post_name);
    const auto summaries = explain_summaries(cfg, post.default_samples, log);
    fs::create_directories(p.explain());

    std::vector<fs::path> written;
    for (std::size_t idx : indices) {
        if (idx >= split.records.size())
            throw ConfigError("split " + split_name + " has " + std::to_string(split.records.size()) +
                              " records, no index " + std::to_string(idx));
        const auto& w = split.records[idx];
        const std::uint64_t stream = derive_seed(cfg.seed(), w.split_id, w.index, metrics::name_stream(post_name));
        Rng rng(stream);
        const auto draws = posterior::sample(post, post.default_samples, rng);
        const Vector probs = posterior::predictive(draws, w.x);
        const auto predicted = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
        std::string mode = target_mode;
        if (w.external && mode == "true") {
            log << "record " << idx << " is an external recording without a label; explaining the predicted class\n";
            mode = "predicted";
        }
        const std::size_t target = mode == "true" ? static_cast<std::size_t>(w.label) : predicted;
        auto e = uarao::sample_explanations(draws, op, w.x, target, operators, derive_seed(stream, 1));
        e.input_id = split_name + "/" + std::to_string(idx);

        json extra = {{"split", split_name},
                      {"index", idx},
                      {"class", w.external ? std::string("unlabelled/external") : std::string(class_name(w.label))},
                      {"target_mode", mode},
                      {"target_name", std::string(class_name(class_from_id(static_cast<std::uint16_t>(target))))},
                      {"predicted", predicted},
                      {"predicted_name", std::string(class_name(class_from_id(static_cast<std::uint16_t>(predicted))))},
                      {"probabilities", probs},
                      {"seed", cfg.seed()},
                      {"stream", stream}};
        auto bundle = uarao::make_bundle(e, summaries, sum_cfg, extra);
        bundle.input = w.x;
        if (!w.external) bundle.mask = ground_truth_mask(w, signal).mask;

        const std::string stem = split_name + "_" + std::to_string(idx) + "_" + post_name + "_" +
                                 std::string(attribution::operator_name(op));
        const auto path = p.explain() / (stem + ".uxex");
        uarao::write_bundle(path, bundle);
        if (jsonl) uarao::write_bundle_jsonl(p.explain() / (stem + ".jsonl"), bundle);
        log << "wrote " << path.string() << " (target " << extra["target_name"].get<std::string>() << ", predicted "
            << extra["predicted_name"].get<std::string>() << ")\n";
        written.push_back(path);
    }
    return written;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOutput {
    metrics::EvalResult result;
    std::vector<metrics::TableRow> macro;
    std::vector<metrics::TableRow> per_class;
};

/// Keeps the first `limit` records of each class. Records keep their
/// indices, so their random streams do not change.
inline Split limit_per_class(const Split& s, std::size_t limit) {
    if (limit == 0) return s;
    Split out;
    out.name = s.name;
    out.id = s.id;
    std::array<std::size_t, kNumClasses> seen{};
    for (const auto& w : s.records)
        if (seen[static_cast<std::size_t>(w.label)]++ < limit) out.records.push_back(w);
    return out;
}

inline EvalOutput evaluate(const RunConfig& cfg, std::ostream& log) {
    const Paths p(cfg);
    metrics::EvalConfig ec;
    ec.grid = cfg.grid();
    ec.operators = cfg.operators();
    ec.summaries = cfg.summaries();
    ec.seed = cfg.seed();
    ec.threads = thread_count(cfg);

    auto names = cfg.list("eval.splits");
    if (names.size() == 1 && names[0] == "all") names = test_split_names(cfg);
    const std::size_t limit = cfg.count("eval.per_class_limit");
    std::vector<Split> splits;
    SignalConfig signal;
    for (const auto& n : names) {
        if (n == kExternalSplit) throw ConfigError("external recordings have no ground truth; use explain");
        splits.push_back(limit_per_class(load_split(cfg, n, &signal), limit));
    }
    if (splits.empty()) throw ConfigError("eval.splits selects nothing");
    ec.epsilon = signal.epsilon * signal.amplitude;

    std::vector<std::string> post_names;
    for (const auto& c : ec.grid)
        if (std::find(post_names.begin(), post_names.end(), c.posterior) == post_names.end())
            post_names.push_back(c.posterior);
    const auto posts = load_posteriors(cfg, post_names);
    std::map<std::string, metrics::PosteriorEntry> entries;
    for (const auto& [name, post] : posts) entries[name] = {&post, post.default_samples};

    std::size_t last_decile = 0;
    ec.progress = [&](std::size_t done, std::size_t total) {
        const std::size_t decile = done * 10 / total;
        if (decile != last_decile) {
            last_decile = decile;
            log << "evaluated " << done << "/" << total << " instances\n" << std::flush;
        }
    };
    std::vector<const Split*> ptrs;
    for (const auto& s : splits) ptrs.push_back(&s);

    EvalOutput out;
    out.result = metrics::evaluate(ptrs, entries, ec);
    out.macro = metrics::aggregate(out.result.records, false);
    out.per_class = metrics::aggregate(out.result.records, true);

    fs::create_directories(p.eval());
    metrics::write_table_csv(p.eval() / "macro.csv", out.macro, false);
    metrics::write_table_csv(p.eval() / "per_class.csv", out.per_class, true);
    metrics::write_accuracy_csv(p.eval() / "accuracy.csv", out.result.accuracy);
    metrics::write_records_csv(p.eval() / "records.csv", out.result.records);
    {
        std::ofstream md(p.eval() / "summary.md", std::ios::trunc);
        md << report::table_markdown(out.macro);
        if (!md) throw IoError("write failed: " + (p.eval() / "summary.md").string());
    }
    json grid = json::array();
    for (const auto& c : ec.grid)
        grid.push_back(c.posterior + ":" + std::string(attribution::operator_name(c.op)) + ":" + c.summary.name());
    json posteriors = json::object();
    for (const auto& [name, post] : posts) posteriors[name] = {{"samples", post.default_samples}};
    json member_seeds = json::array();
    for (std::size_t k = 0; k < cfg.count("train.ensemble"); ++k) member_seeds.push_back(member_seed(cfg.seed(), k));
    write_json(p.eval() / "manifest.json", {{"seed", cfg.seed()},
                                            {"dataset", dataset_fingerprint(cfg)},
                                            {"member_seeds", member_seeds},
                                            {"posteriors", posteriors},
                                            {"threads", ec.threads},
                                            {"splits", names},
                                            {"per_class_limit", limit},
                                            {"grid", grid},
                                            {"records", out.result.records.size()}});
    log << "wrote " << p.eval().string() << "/{macro,per_class,accuracy,records}.csv\n";
    return out;
}

// ---------------------------------------------------------------------------
// report

/// One SVG per explanation bundle, plus an index that also carries the
/// evaluation table when one exists.
inline std::vector<fs::path> report(const RunConfig& cfg, std::ostream& log) {
    const Paths p(cfg);
    std::vector<fs::path> bundles;
    if (fs::exists(p.explain()))
        for (const auto& e : fs::directory_iterator(p.explain()))
            if (e.path().extension() == ".uxex") bundles.push_back(e.path());
    std::sort(bundles.begin(), bundles.end());
    const bool have_eval = fs::exists(p.eval() / "summary.md");
    if (bundles.empty() && !have_eval) throw IoError("nothing to report in " + p.root.string() + " (run explain or eval first)");
    fs::create_directories(p.report());

    std::vector<fs::path> written;
    std::string index = "# Report\n\n";
    if (have_eval) {
        std::ifstream in(p.eval() / "summary.md");
        index += "## Localisation\n\n" + std::string(std::istreambuf_iterator<char>(in), {}) + "\n";
    }
    if (!bundles.empty()) index += "## Explanations\n\n";
    for (const auto& b : bundles) {
        const auto svg = p.report() / (b.stem().string() + ".svg");
        report::write_svg(svg, uarao::read_bundle(b));
        index += "- [" + b.stem().string() + "](" + svg.filename().string() + ")\n";
        written.push_back(svg);
        log << "wrote " << svg.string() << '\n';
    }
    const auto idx = p.report() / "index.md";
    std::ofstream out(idx, std::ios::trunc);
    out << index;
    if (!out) throw IoError("write failed: " + idx.string());
    written.push_back(idx);
    return written;
}

// ---------------------------------------------------------------------------
// ingest

inline ingest::IngestConfig ingest_config(const RunConfig& cfg) {
    ingest::IngestConfig c;
    c.fundamental_hz = cfg.real("ingest.fundamental_hz");
    c.sample_rate_hz = cfg.real("ingest.sample_rate_hz");
    c.start_s = cfg.real("ingest.start_s");
    c.validate();
    return c;
}

/// Converts recordings into the external split, one record per file in the
/// given order.
inline fs::path ingest_files(const RunConfig& cfg, const std::vector<fs::path>& files, std::ostream& log) {
    if (files.empty()) throw ConfigError("ingest needs at least one recording");
    const Paths p(cfg);
    const auto ic = ingest_config(cfg);
    const auto signal = cfg.signal();
    Split s;
    s.name = kExternalSplit;
    s.id = kExternalSplitId;
    json sources = json::array();
    for (std::size_t k = 0; k < files.size(); ++k) {
        auto w = ingest::to_instance(ingest::read_csv(files[k], ic, signal.cycles), ic, signal,
                                     static_cast<std::uint32_t>(k));
        w.split_id = s.id;
        s.records.push_back(std::move(w));
        sources.push_back({{"index", k}, {"file", files[k].string()}});
        log << "record " << k << " <- " << files[k].string() << '\n';
    }
    fs::create_directories(p.data());
    const auto path = p.split(kExternalSplit);
    write_split(path, s, signal);
    write_split_jsonl(p.data() / "external.jsonl", s, signal);
    write_json(p.data() / "external.json", {{"sources", sources},
                                            {"fundamental_hz", ic.fundamental_hz},
                                            {"sample_rate_hz", ic.sample_rate_hz},
                                            {"start_s", ic.start_s}});
    log << "wrote " << path.string() << " (" << s.records.size() << " records)\n";
    return path;
}

}  // namespace uaxai::pipeline
