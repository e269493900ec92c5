// Command-line front end. Every subcommand maps flags onto config keys and
// calls the matching pipeline stage.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "uaxai/pipeline.hpp"

namespace {

using uaxai::RunConfig;

struct Overrides {
    std::vector<std::pair<std::string, std::string*>> flags;
    std::vector<std::pair<std::string, std::vector<std::string>*>> lists;

    void apply(RunConfig& cfg) const {
        for (const auto& [key, v] : flags)
            if (!v->empty()) cfg.set(key, *v);
        for (const auto& [key, v] : lists) {
            if (v->empty()) continue;
            std::string joined;
            for (const auto& s : *v) joined += (joined.empty() ? "" : ",") + s;
            cfg.set(key, joined);
        }
    }
};

std::string joined_keys() {
    std::string out;
    for (const auto& k : uaxai::config_keys()) out += std::string(out.empty() ? "" : ", ") + k.key;
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Uncertainty-aware relevance attribution for power-quality disturbance classifiers"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, seed, out_dir, threads;
    std::vector<std::string> sets;
    app.add_option("--config", config_path, "key = value configuration file")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "master seed (required here or in the config)");
    app.add_option("--out-dir", out_dir, "artefact root (default: run)");
    app.add_option("--threads", threads, "worker threads, 0 = all cores (default: 1)");
    app.add_option("--set", sets, "override any config key, KEY=VALUE (repeatable)");

    Overrides ov;
    ov.flags = {{"seed", &seed}, {"out_dir", &out_dir}, {"threads", &threads}};

    auto* gen = app.add_subcommand("generate", "synthesise the train, validation and test splits");

    auto* train = app.add_subcommand("train", "train ensemble members and fit the posterior approximations");
    std::string ensemble, which = "all", epochs;
    train->add_option("--ensemble", ensemble, "ensemble size M (member 0 is the baseline)");
    train->add_option("--epochs", epochs, "epoch limit");
    train->add_option("--which", which, "all | baseline | ensemble | laplace | mc_dropout")
        ->check(CLI::IsMember({"all", "baseline", "deterministic", "ensemble", "laplace", "mc_dropout"}));
    ov.flags.emplace_back("train.ensemble", &ensemble);
    ov.flags.emplace_back("train.epochs", &epochs);

    auto* explain = app.add_subcommand("explain", "sample relevance maps for selected instances and summarise them");
    std::string post, op, target, split;
    std::vector<std::string> summaries, instances;
    bool no_jsonl = false;
    explain->add_option("--posterior", post, "deterministic | ensemble | mc_dropout | laplace");
    explain->add_option("--operator", op, "occlusion | gradcam | lime");
    explain->add_option("--summary", summaries, "summary names, or all (repeatable)")->delimiter(',');
    explain->add_option("--target", target, "attribution class: true label or predicted class")
        ->check(CLI::IsMember({"true", "predicted"}));
    explain->add_option("--split", split, "split name, or external for ingested recordings");
    explain->add_option("--instance", instances, "record indices (repeatable)")->delimiter(',');
    explain->add_flag("--no-jsonl", no_jsonl, "skip the JSON-lines mirror");
    ov.flags.emplace_back("explain.posterior", &post);
    ov.flags.emplace_back("explain.operator", &op);
    ov.flags.emplace_back("explain.target", &target);
    ov.flags.emplace_back("explain.split", &split);
    ov.lists.emplace_back("explain.summaries", &summaries);
    ov.lists.emplace_back("explain.instances", &instances);

    auto* eval = app.add_subcommand("eval", "score the evaluation grid on the test splits");
    std::string grid, limit;
    std::vector<std::string> splits;
    eval->add_option("--grid", grid, "default, full, or posterior:operator:summary list");
    eval->add_option("--splits", splits, "split names (default: every test split)")->delimiter(',');
    eval->add_option("--per-class-limit", limit, "score at most this many instances per class and split");
    ov.flags.emplace_back("eval.grid", &grid);
    ov.flags.emplace_back("eval.per_class_limit", &limit);
    ov.lists.emplace_back("eval.splits", &splits);

    auto* rep = app.add_subcommand("report", "render explanation bundles as SVG panels");

    auto* ing = app.add_subcommand("ingest", "convert measured recordings into the external split");
    std::vector<std::string> files;
    std::string f0, rate, start;
    ing->add_option("files", files, "CSV recordings: time,value rows or one value column")
        ->required()
        ->check(CLI::ExistingFile);
    ing->add_option("--fundamental", f0, "declared fundamental in Hz (default 50)");
    ing->add_option("--sample-rate", rate, "rate of a bare value column in Hz");
    ing->add_option("--start", start, "window start in seconds");
    ov.flags.emplace_back("ingest.fundamental_hz", &f0);
    ov.flags.emplace_back("ingest.sample_rate_hz", &rate);
    ov.flags.emplace_back("ingest.start_s", &start);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
        for (const auto& kv : sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw uaxai::ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
            cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        ov.apply(cfg);
        if (no_jsonl) cfg.set("explain.jsonl", "0");
        (void)cfg.seed();

        std::string command = app.get_subcommands().front()->get_name();
        uaxai::pipeline::write_resolved(cfg, command);
        if (gen->parsed()) {
            uaxai::pipeline::generate(cfg, std::cout);
        } else if (train->parsed()) {
            uaxai::pipeline::train(cfg, uaxai::pipeline::train_target_from_name(which), std::cout);
        } else if (explain->parsed()) {
            uaxai::pipeline::explain(cfg, std::cout);
        } else if (eval->parsed()) {
            uaxai::pipeline::evaluate(cfg, std::cout);
        } else if (rep->parsed()) {
            uaxai::pipeline::report(cfg, std::cout);
        } else if (ing->parsed()) {
            std::vector<std::filesystem::path> paths(files.begin(), files.end());
            uaxai::pipeline::ingest_files(cfg, paths, std::cout);
        }
        return 0;
    } catch (const uaxai::ConfigError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        if (std::string(e.what()).find("unknown config key") != std::string::npos)
            std::cerr << "valid keys: " << joined_keys() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
