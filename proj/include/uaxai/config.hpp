#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "uaxai/attribution.hpp"
#include "uaxai/common.hpp"
#include "uaxai/metrics.hpp"
#include "uaxai/siggen.hpp"
#include "uaxai/tensornet.hpp"
#include "uaxai/uarao.hpp"

namespace uaxai {

struct ConfigKey {
    const char* key;
    const char* fallback;  // nullptr: required
    const char* help;
};

// Every recognised key. The resolved copy of a run lists them in this order.
inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        {"seed", nullptr, "master seed; every random stream derives from it"},
        {"out_dir", "run", "artefact root"},
        {"threads", "1", "worker threads for explanation and evaluation"},

        {"signal.n_samples", "640", "samples per waveform"},
        {"signal.cycles", "10", "fundamental cycles per waveform"},
        {"signal.amplitude", "1", "nominal amplitude A"},
        {"signal.snr_db", "40", "additive noise level"},
        {"signal.epsilon", "1e-5", "mask threshold as a fraction of A"},

        {"data.train_per_class", "1000", ""},
        {"data.val_per_class", "100", ""},
        {"data.test_per_class", "100", ""},
        {"data.test_splits", "5", ""},

        {"train.epochs", "100", "upper bound; early stopping on validation accuracy"},
        {"train.patience", "8", ""},
        {"train.batch_size", "64", ""},
        {"train.learning_rate", "1e-3", ""},
        {"train.optimiser", "adam", "adam | sgd_momentum"},
        {"train.weight_decay", "0", ""},
        {"train.dropout_p", "0.2", ""},
        {"train.ensemble", "5", "ensemble members; member 0 is the deterministic baseline"},

        {"laplace.damping", "1e2", ""},
        {"laplace.scaling", "1.75e10", ""},
        {"laplace.samples", "20", ""},
        {"laplace.batch_size", "64", "batch size for the Fisher pass"},
        {"mc_dropout.samples", "20", ""},

        {"occlusion.window", "60", ""},
        {"occlusion.stride", "1", ""},
        {"occlusion.fill", "0", ""},
        {"lime.perturbations", "128", ""},
        {"lime.segment_width", "16", ""},
        {"lime.ridge", "1", ""},
        {"lime.kernel_width", "0.25", ""},

        {"summary.kappa", "1e-8", ""},
        {"summary.delta_fraction", "0.1", "set cutoff as a fraction of the largest sample entry"},

        {"explain.posterior", "ensemble", ""},
        {"explain.operator", "occlusion", ""},
        {"explain.summaries", "all", "comma list, or all point summaries"},
        {"explain.target", "true", "true | predicted"},
        {"explain.split", "test_0", ""},
        {"explain.instances", "0", "comma list of record indices"},
        {"explain.jsonl", "1", "also write a JSON-lines mirror"},

        {"eval.grid", "default", "default, full, or comma list of posterior:operator:summary"},
        {"eval.splits", "all", "all, or comma list of split names"},
        {"eval.per_class_limit", "0", "score at most this many instances per class and split (0: all)"},

        {"ingest.fundamental_hz", "50", "declared fundamental of external recordings"},
        {"ingest.sample_rate_hz", "0", "rate of a bare value column (0: the column spans exactly signal.cycles periods)"},
        {"ingest.start_s", "0", "window start in seconds"},
    };
    return keys;
}

/// key=value configuration with '#' comments. Unknown keys and malformed
/// values are errors; every lookup falls back to the documented default.
class RunConfig {
public:
    RunConfig() = default;

    static RunConfig parse(std::string_view text, const std::string& origin = "<config>") {
        RunConfig c;
        std::size_t line_no = 0;
        std::istringstream in{std::string(text)};
        for (std::string line; std::getline(in, line);) {
            ++line_no;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const auto s = trim(line);
            if (s.empty()) continue;
            const auto eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key=value");
            const std::string key = trim(s.substr(0, eq));
            if (c.values_.count(key))
                throw ConfigError(origin + ":" + std::to_string(line_no) + ": duplicate key " + key);
            c.set(key, trim(s.substr(eq + 1)));
        }
        return c;
    }

    static RunConfig load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config: " + path.string());
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path.string());
    }

    void set(const std::string& key, const std::string& value) {
        find_key(key);
        values_[key] = value;
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string str(const std::string& key) const {
        const auto& k = find_key(key);
        if (const auto it = values_.find(key); it != values_.end()) return it->second;
        if (!k.fallback) throw ConfigError("missing required key '" + key + "' (set it in the config or pass --" + key + ")");
        return k.fallback;
    }

    double real(const std::string& key) const {
        const auto s = str(key);
        try {
            std::size_t used = 0;
            const double v = std::stod(s, &used);
            if (used == s.size() && std::isfinite(v)) return v;
        } catch (const std::exception&) {
        }
        throw ConfigError("key '" + key + "' expects a number, got '" + s + "'");
    }

    std::uint64_t integer(const std::string& key) const {
        const auto s = str(key);
        std::uint64_t v = 0;
        const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || end != s.data() + s.size())
            throw ConfigError("key '" + key + "' expects a nonnegative integer, got '" + s + "'");
        return v;
    }

    std::size_t count(const std::string& key) const { return static_cast<std::size_t>(integer(key)); }

    bool flag(const std::string& key) const {
        const auto s = str(key);
        if (s == "1" || s == "true" || s == "yes") return true;
        if (s == "0" || s == "false" || s == "no") return false;
        throw ConfigError("key '" + key + "' expects true/false, got '" + s + "'");
    }

    std::vector<std::string> list(const std::string& key) const {
        std::vector<std::string> out;
        std::stringstream ss(str(key));
        for (std::string item; std::getline(ss, item, ',');)
            if (auto t = trim(item); !t.empty()) out.push_back(t);
        return out;
    }

    /// Every key with its effective value, in declaration order.
    std::string resolved() const {
        std::string out = "# resolved configuration\n";
        for (const auto& k : config_keys()) {
            if (!k.fallback && !has(k.key)) continue;
            out += std::string(k.key) + " = " + str(k.key);
            if (*k.help) out += "  # " + std::string(k.help);
            out += '\n';
        }
        return out;
    }

    void write_resolved(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + path.string());
        out << resolved();
        if (!out) throw IoError("write failed: " + path.string());
    }

    // Typed views -----------------------------------------------------------

    std::uint64_t seed() const { return integer("seed"); }

    SignalConfig signal() const {
        SignalConfig s;
        s.n_samples = count("signal.n_samples");
        s.cycles = count("signal.cycles");
        s.amplitude = real("signal.amplitude");
        s.snr_db = real("signal.snr_db");
        s.epsilon = real("signal.epsilon");
        s.validate();
        return s;
    }

    DatasetLayout layout() const {
        DatasetLayout l;
        l.train = SplitCounts::uniform(count("data.train_per_class"));
        l.val = SplitCounts::uniform(count("data.val_per_class"));
        l.test = SplitCounts::uniform(count("data.test_per_class"));
        l.n_test_splits = count("data.test_splits");
        return l;
    }

    net::TrainConfig training() const {
        net::TrainConfig t;
        t.epochs = count("train.epochs");
        t.patience = count("train.patience");
        t.batch_size = count("train.batch_size");
        t.learning_rate = real("train.learning_rate");
        const auto opt = str("train.optimiser");
        if (opt == "adam")
            t.optimiser = net::Optimiser::adam;
        else if (opt == "sgd_momentum")
            t.optimiser = net::Optimiser::sgd_momentum;
        else
            throw ConfigError("train.optimiser must be adam or sgd_momentum, got '" + opt + "'");
        t.weight_decay = real("train.weight_decay");
        t.dropout_p = real("train.dropout_p");
        t.seed = seed();
        t.validate();
        return t;
    }

    attribution::OperatorConfig operators() const {
        attribution::OperatorConfig o;
        o.occlusion.window = count("occlusion.window");
        o.occlusion.stride = count("occlusion.stride");
        o.occlusion.fill = real("occlusion.fill");
        o.lime.n_perturbations = count("lime.perturbations");
        o.lime.segment_width = count("lime.segment_width");
        o.lime.ridge = real("lime.ridge");
        o.lime.kernel_width = real("lime.kernel_width");
        o.lime.validate();
        return o;
    }

    uarao::SummaryConfig summaries() const {
        uarao::SummaryConfig s;
        s.kappa = real("summary.kappa");
        s.delta_fraction = real("summary.delta_fraction");
        s.validate();
        return s;
    }

    std::vector<metrics::GridCell> grid() const {
        const auto items = list("eval.grid");
        if (items.size() == 1 && items[0] == "default") return metrics::default_grid();
        if (items.size() == 1 && items[0] == "full") return metrics::full_grid();
        std::vector<metrics::GridCell> g;
        for (const auto& item : items) {
            const auto a = item.find(':'), b = item.rfind(':');
            if (a == std::string::npos || a == b)
                throw ConfigError("eval.grid entries look like posterior:operator:summary, got '" + item + "'");
            const auto post = item.substr(0, a);
            (void)posterior::kind_from_name(post);
            g.push_back({post, attribution::operator_from_name(item.substr(a + 1, b - a - 1)),
                         uarao::summary_from_name(item.substr(b + 1))});
        }
        if (g.empty()) throw ConfigError("eval.grid is empty");
        return g;
    }

    const std::map<std::string, std::string>& explicit_values() const { return values_; }

private:
    static std::string trim(std::string_view s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string_view::npos) return {};
        const auto e = s.find_last_not_of(" \t\r\n");
        return std::string(s.substr(b, e - b + 1));
    }

    static const ConfigKey& find_key(const std::string& key) {
        for (const auto& k : config_keys())
            if (key == k.key) return k;
        throw ConfigError("unknown config key '" + key + "'");
    }

    std::map<std::string, std::string> values_;
};

}  // namespace uaxai
