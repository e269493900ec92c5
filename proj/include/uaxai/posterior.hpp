#pragma once

// Approximate parameter posteriors and sampling from them: deep ensembles,
// MC dropout with frozen masks, and a diagonal Laplace approximation around a
// trained network. A single trained network is the degenerate one-member case.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "uaxai/common.hpp"
#include "uaxai/tensornet.hpp"

namespace uaxai::posterior {

using net::DropoutMask;
using net::NetworkParams;

enum class Kind { deterministic, deep_ensemble, mc_dropout, laplace_diag };

inline constexpr std::string_view kind_name(Kind k) {
    switch (k) {
        case Kind::deterministic: return "deterministic";
        case Kind::deep_ensemble: return "ensemble";
        case Kind::mc_dropout: return "mc_dropout";
        case Kind::laplace_diag: return "laplace";
    }
    return "?";
}

inline Kind kind_from_name(std::string_view s) {
    for (Kind k : {Kind::deterministic, Kind::deep_ensemble, Kind::mc_dropout, Kind::laplace_diag})
        if (kind_name(k) == s) return k;
    throw ConfigError("unknown posterior '" + std::string(s) + "' (valid: deterministic, ensemble, mc_dropout, laplace)");
}

using NetPtr = std::shared_ptr<const NetworkParams>;

/// One realisation of the parameters: a network plus a (possibly empty)
/// frozen dropout mask. Evaluating it is deterministic.
struct ParameterSample {
    Kind kind = Kind::deterministic;
    std::size_t index = 0;   // position in the draw
    std::uint64_t seed = 0;  // mask seed (MC dropout), 0 otherwise
    NetPtr params;
    DropoutMask mask;

    const NetworkParams& net() const { return *params; }
};

inline net::ForwardTrace evaluate(const ParameterSample& s, std::span<const double> x) {
    return net::forward(*s.params, x, s.mask);
}

struct PosteriorApprox {
    Kind kind = Kind::deterministic;
    std::vector<NetPtr> members;  // ensemble members, or the single MAP network
    Vector variance;              // laplace only
    double damping = 0.0;
    double scaling = 0.0;
    std::size_t default_samples = 1;

    const NetworkParams& map() const {
        if (members.empty()) throw ConfigError("posterior has no networks");
        return *members.front();
    }
    double dropout_p() const { return map().arch.dropout_p; }
};

inline double parameter_distance(const NetworkParams& a, const NetworkParams& b) {
    if (a.theta.size() != b.theta.size()) throw ShapeError("parameter vectors differ in length");
    double s = 0.0;
    for (std::size_t i = 0; i < a.theta.size(); ++i) s += (a.theta[i] - b.theta[i]) * (a.theta[i] - b.theta[i]);
    return std::sqrt(s);
}

inline PosteriorApprox deterministic(NetworkParams net) {
    PosteriorApprox p;
    p.kind = Kind::deterministic;
    p.members.push_back(std::make_shared<const NetworkParams>(std::move(net)));
    p.default_samples = 1;
    return p;
}

/// Wraps already trained members. Members must be pairwise distinct.
inline PosteriorApprox make_ensemble(std::vector<NetworkParams> members) {
    if (members.empty()) throw ConfigError("ensemble needs at least one member");
    for (std::size_t i = 0; i < members.size(); ++i)
        for (std::size_t j = i + 1; j < members.size(); ++j)
            if (!(parameter_distance(members[i], members[j]) > 0.0))
                throw ConfigError("ensemble members " + std::to_string(i) + " and " + std::to_string(j) +
                                  " are identical");
    if (members.size() == 1) return deterministic(std::move(members.front()));
    PosteriorApprox p;
    p.kind = Kind::deep_ensemble;
    for (auto& m : members) p.members.push_back(std::make_shared<const NetworkParams>(std::move(m)));
    p.default_samples = p.members.size();
    return p;
}

struct EnsembleResult {
    PosteriorApprox posterior;
    std::vector<net::TrainResult> runs;
};

/// Trains one member per seed. A diverging member surfaces as NumericError
/// naming its seed.
inline EnsembleResult fit_ensemble(const net::Architecture& arch, const net::LabelledSet& train_set,
                                   const net::LabelledSet& val_set, const net::TrainConfig& base,
                                   std::span<const std::uint64_t> seeds,
                                   const std::function<void(std::size_t, const net::EpochLog&)>& on_epoch = {}) {
    if (seeds.empty()) throw ConfigError("ensemble needs at least one seed");
    for (std::size_t i = 0; i < seeds.size(); ++i)
        for (std::size_t j = i + 1; j < seeds.size(); ++j)
            if (seeds[i] == seeds[j]) throw ConfigError("ensemble seeds must be distinct");
    EnsembleResult out;
    std::vector<NetworkParams> members;
    for (std::size_t m = 0; m < seeds.size(); ++m) {
        auto cfg = base;
        cfg.seed = seeds[m];
        std::function<void(const net::EpochLog&)> cb;
        if (on_epoch) cb = [&, m](const net::EpochLog& e) { on_epoch(m, e); };
        out.runs.push_back(net::train(arch, train_set, val_set, cfg, cb));
        members.push_back(out.runs.back().params);
    }
    out.posterior = make_ensemble(std::move(members));
    return out;
}

inline PosteriorApprox mc_dropout(NetworkParams net, double p, std::size_t default_samples = 20) {
    if (!(p > 0.0 && p < 1.0)) throw ConfigError("MC dropout needs 0 < p < 1");
    if (default_samples == 0) throw ConfigError("sample count must be positive");
    net.arch.dropout_p = p;
    PosteriorApprox out;
    out.kind = Kind::mc_dropout;
    out.members.push_back(std::make_shared<const NetworkParams>(std::move(net)));
    out.default_samples = default_samples;
    return out;
}

/// Diagonal empirical Fisher, F_i = (1/|D|) sum_b |b| g_b,i^2, where g_b is
/// the gradient of the mean loss over batch b. `batch_gradient(b)` returns g_b.
template <typename BatchGradient>
Vector diagonal_fisher(std::size_t dim, std::span<const std::size_t> batch_sizes, BatchGradient&& batch_gradient) {
    Vector f(dim, 0.0);
    std::size_t total = 0;
    for (std::size_t b = 0; b < batch_sizes.size(); ++b) {
        const Vector g = batch_gradient(b);
        if (g.size() != dim) throw ShapeError("gradient length mismatch in Fisher accumulation");
        const double w = static_cast<double>(batch_sizes[b]);
        for (std::size_t i = 0; i < dim; ++i) f[i] += w * g[i] * g[i];
        total += batch_sizes[b];
    }
    if (total == 0) throw ConfigError("Fisher needs at least one instance");
    for (auto& v : f) v /= static_cast<double>(total);
    for (std::size_t i = 0; i < dim; ++i)
        if (!std::isfinite(f[i])) throw NumericError("non-finite Fisher entry at parameter " + std::to_string(i));
    return f;
}

/// Fisher of the network's mean cross-entropy over consecutive batches of
/// `data`, with eval-mode (running-statistics) batch norm.
inline Vector network_fisher(const NetworkParams& net, const net::LabelledSet& data, std::size_t batch_size = 64) {
    if (data.size() == 0) throw ConfigError("Fisher needs a non-empty dataset");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    std::vector<std::size_t> sizes;
    for (std::size_t s = 0; s < data.size(); s += batch_size) sizes.push_back(std::min(batch_size, data.size() - s));
    Rng unused(0);
    return diagonal_fisher(net.param_count(), sizes, [&](std::size_t b) {
        const std::size_t start = b * batch_size, n = sizes[b];
        const std::span<const Vector* const> xs(data.inputs.data() + start, n);
        const std::span<const std::size_t> ys(data.labels.data() + start, n);
        return net::compute_batch(net, xs, ys, net::Mode::eval, unused, true).grad;
    });
}

/// precision_i = damping + scaling * F_i, variance_i = 1 / precision_i.
inline PosteriorApprox laplace_from_fisher(NetworkParams map, const Vector& fisher, double damping, double scaling,
                                           std::size_t default_samples = 20) {
    if (!(damping > 0.0)) throw ConfigError("Laplace damping must be positive");
    if (!(scaling >= 0.0)) throw ConfigError("Laplace scaling must be non-negative");
    if (fisher.size() != map.param_count()) throw ShapeError("Fisher length does not match the network");
    if (default_samples == 0) throw ConfigError("sample count must be positive");
    PosteriorApprox p;
    p.kind = Kind::laplace_diag;
    p.damping = damping;
    p.scaling = scaling;
    p.default_samples = default_samples;
    p.variance.resize(fisher.size());
    for (std::size_t i = 0; i < fisher.size(); ++i) {
        if (!std::isfinite(fisher[i]) || fisher[i] < 0.0)
            throw NumericError("invalid Fisher entry at parameter " + std::to_string(i));
        p.variance[i] = 1.0 / (damping + scaling * fisher[i]);
    }
    p.members.push_back(std::make_shared<const NetworkParams>(std::move(map)));
    return p;
}

inline PosteriorApprox fit_laplace(NetworkParams map, const net::LabelledSet& data, double damping = 1e2,
                                   double scaling = 1.75e10, std::size_t batch_size = 64,
                                   std::size_t default_samples = 20) {
    const Vector f = network_fisher(map, data, batch_size);
    return laplace_from_fisher(std::move(map), f, damping, scaling, default_samples);
}

/// S draws. Ensembles enumerate their members once each, so S must equal M.
inline std::vector<ParameterSample> sample(const PosteriorApprox& post, std::size_t S, Rng& rng) {
    if (S == 0) throw ConfigError("sample count must be positive");
    std::vector<ParameterSample> out;
    out.reserve(S);
    switch (post.kind) {
        case Kind::deterministic:
        case Kind::deep_ensemble:
            if (S != post.members.size())
                throw ConfigError("ensemble sample count is fixed at M = " + std::to_string(post.members.size()) +
                                  ", got S = " + std::to_string(S));
            for (std::size_t s = 0; s < S; ++s) out.push_back({post.kind, s, 0, post.members[s], {}});
            break;
        case Kind::mc_dropout: {
            const auto& m = post.map();
            for (std::size_t s = 0; s < S; ++s) {
                const std::uint64_t seed = rng.bits();
                out.push_back({post.kind, s, seed, post.members.front(),
                               DropoutMask::from_seed(m.arch.hidden, m.arch.dropout_p, seed)});
            }
            break;
        }
        case Kind::laplace_diag: {
            const auto& m = post.map();
            if (post.variance.size() != m.param_count()) throw ShapeError("Laplace variance length mismatch");
            for (std::size_t s = 0; s < S; ++s) {
                auto draw = std::make_shared<NetworkParams>(m);
                for (std::size_t i = 0; i < draw->theta.size(); ++i)
                    draw->theta[i] += std::sqrt(post.variance[i]) * rng.normal();
                out.push_back({post.kind, s, 0, std::move(draw), {}});
            }
            break;
        }
    }
    return out;
}

/// Mean of the sampled networks' class probabilities. Draws sharing one
/// network reuse its convolutional trunk.
inline Vector predictive(std::span<const ParameterSample> samples, std::span<const double> x) {
    if (samples.empty()) throw ConfigError("predictive needs at least one sample");
    Vector mean;
    net::ForwardTrace trunk;
    const NetworkParams* trunk_of = nullptr;
    for (const auto& s : samples) {
        const net::Layout lay(s.net().arch);
        if (trunk_of != s.params.get()) {
            net::trunk_forward(s.net(), lay, x, trunk);
            trunk_of = s.params.get();
        }
        net::head_forward(s.net(), lay, s.mask, trunk);
        if (mean.empty()) mean.assign(trunk.probs.size(), 0.0);
        for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += trunk.probs[c];
    }
    for (auto& v : mean) v /= static_cast<double>(samples.size());
    return mean;
}

inline Vector predictive(const PosteriorApprox& post, std::span<const double> x, std::size_t S, Rng& rng) {
    const auto draws = sample(post, S, rng);
    return predictive(draws, x);
}

// ---------------------------------------------------------------------------
// Bundle on disk: manifest.json plus member checkpoints; the Laplace variance
// is a checkpoint whose parameter vector holds the variances.

inline void save_posterior(const std::filesystem::path& dir, const PosteriorApprox& post) {
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["format_version"] = 1;
    j["kind"] = kind_name(post.kind);
    j["default_samples"] = post.default_samples;
    j["dropout_p"] = post.dropout_p();
    j["damping"] = post.damping;
    j["scaling"] = post.scaling;
    auto files = nlohmann::json::array();
    for (std::size_t m = 0; m < post.members.size(); ++m) {
        const std::string name = "member_" + std::to_string(m) + ".uxck";
        net::save_checkpoint(dir / name, *post.members[m]);
        files.push_back(name);
    }
    j["members"] = files;
    if (post.kind == Kind::laplace_diag) {
        auto holder = net::zero_network(post.map().arch);
        holder.theta = post.variance;
        net::save_checkpoint(dir / "variance.uxck", holder);
        j["variance"] = "variance.uxck";
    }
    const auto path = dir / "manifest.json";
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

inline PosteriorApprox load_posterior(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    std::ifstream in(path);
    if (!in) throw IoError("cannot open posterior manifest: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed posterior manifest " + path.string() + ": " + e.what());
    }
    PosteriorApprox p;
    p.kind = kind_from_name(j.at("kind").get<std::string>());
    p.default_samples = j.at("default_samples").get<std::size_t>();
    p.damping = j.value("damping", 0.0);
    p.scaling = j.value("scaling", 0.0);
    for (const auto& name : j.at("members")) {
        auto m = net::load_checkpoint(dir / name.get<std::string>());
        if (p.kind == Kind::mc_dropout) m.arch.dropout_p = j.at("dropout_p").get<double>();
        p.members.push_back(std::make_shared<const NetworkParams>(std::move(m)));
    }
    if (p.members.empty()) throw IoError("posterior bundle has no members: " + dir.string());
    if (p.kind == Kind::laplace_diag) {
        p.variance = net::load_checkpoint(dir / j.at("variance").get<std::string>()).theta;
        for (double v : p.variance)
            if (!(v > 0.0)) throw IoError("non-positive Laplace variance in " + dir.string());
    }
    return p;
}

}  // namespace uaxai::posterior
