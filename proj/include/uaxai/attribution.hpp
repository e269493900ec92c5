#pragma once

// Local relevance attribution: occlusion, Grad-CAM and LIME. Each maps
// (network sample, input, target class) to an input-length relevance map.
//
// The CNN paths share work across samples that differ only in their dropout
// mask: the convolutional trunk is evaluated once and only the head is rerun.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "uaxai/common.hpp"
#include "uaxai/posterior.hpp"
#include "uaxai/tensornet.hpp"

namespace uaxai::attribution {

using net::DropoutMask;
using net::NetworkParams;

enum class Operator { occlusion, gradcam, lime };

inline constexpr std::string_view operator_name(Operator op) {
    switch (op) {
        case Operator::occlusion: return "occlusion";
        case Operator::gradcam: return "gradcam";
        case Operator::lime: return "lime";
    }
    return "?";
}

inline Operator operator_from_name(std::string_view s) {
    for (Operator op : {Operator::occlusion, Operator::gradcam, Operator::lime})
        if (operator_name(op) == s) return op;
    throw ConfigError("unknown operator '" + std::string(s) + "' (valid: occlusion, gradcam, lime)");
}

struct OcclusionConfig {
    std::size_t window = 60;
    std::size_t stride = 1;
    double fill = 0.0;

    void validate(std::size_t n) const {
        if (window == 0 || stride == 0) throw ConfigError("occlusion window and stride must be positive");
        if (window > n) throw ShapeError("occlusion window longer than the input");
    }
    std::size_t windows(std::size_t n) const { return (n - window) / stride + 1; }
};

struct LimeConfig {
    std::size_t n_perturbations = 128;  // including the unperturbed row
    std::size_t segment_width = 16;
    double ridge = 1.0;
    double kernel_width = 0.25;
    double fill = 0.0;

    std::size_t segments(std::size_t n) const {
        if (segment_width == 0 || n % segment_width != 0)
            throw ConfigError("input length " + std::to_string(n) + " is not a multiple of the LIME segment width");
        return n / segment_width;
    }
    void validate() const {
        if (n_perturbations < 2) throw ConfigError("LIME needs at least two perturbations");
        if (!(ridge > 0.0) || !(kernel_width > 0.0)) throw ConfigError("LIME ridge and kernel width must be positive");
    }
};

struct OperatorConfig {
    OcclusionConfig occlusion;
    LimeConfig lime;
};

struct SaliencyMap {
    Vector r;
    bool nonnegative = false;
    Operator op = Operator::occlusion;
    std::size_t target = 0;
};

/// |r| elementwise.
inline SaliencyMap to_relevance(SaliencyMap m) {
    for (auto& v : m.r) v = std::abs(v);
    m.nonnegative = true;
    return m;
}

// ---------------------------------------------------------------------------
// Occlusion

/// Number of windows covering each position.
inline std::vector<std::size_t> occlusion_coverage(std::size_t n, const OcclusionConfig& cfg) {
    cfg.validate(n);
    std::vector<std::size_t> cover(n, 0);
    for (std::size_t w = 0, k = 0; w < cfg.windows(n); ++w, k += cfg.stride)
        for (std::size_t t = k; t < k + cfg.window; ++t) ++cover[t];
    return cover;
}

/// Spreads per-window drops over positions: r[n] = mean of the drops of the
/// windows covering n (0 where no window covers n).
inline Vector spread_drops(const Vector& drops, std::size_t n, const OcclusionConfig& cfg) {
    const auto cover = occlusion_coverage(n, cfg);
    if (drops.size() != cfg.windows(n)) throw ShapeError("one drop per window expected");
    Vector r(n, 0.0);
    for (std::size_t w = 0, k = 0; w < drops.size(); ++w, k += cfg.stride)
        for (std::size_t t = k; t < k + cfg.window; ++t) r[t] += drops[w];
    for (std::size_t t = 0; t < n; ++t)
        if (cover[t]) r[t] /= static_cast<double>(cover[t]);
    return r;
}

/// Occlusion for any model given as prob(x) = p(c | x).
template <typename Prob>
Vector occlusion(Prob&& prob, std::span<const double> x, const OcclusionConfig& cfg) {
    const std::size_t n = x.size();
    cfg.validate(n);
    const double base = prob(x);
    Vector xo(x.begin(), x.end());
    Vector drops(cfg.windows(n));
    for (std::size_t w = 0, k = 0; w < drops.size(); ++w, k += cfg.stride) {
        std::fill(xo.begin() + k, xo.begin() + k + cfg.window, cfg.fill);
        drops[w] = base - prob(std::span<const double>(xo));
        std::copy(x.begin() + k, x.begin() + k + cfg.window, xo.begin() + k);
    }
    return spread_drops(drops, n, cfg);
}

namespace detail {

// Recomputes the conv stack only where an occluded window can reach: conv4
// output t sees inputs [t, t + receptive field), so window [k, k + W) touches
// outputs [k - 10, k + W). The kernels compute every element the same way
// regardless of range, so the result equals a full forward pass bit for bit.
class OcclusionSweep {
public:
    OcclusionSweep(const NetworkParams& net, std::span<const double> x) : net_(net), lay_(net.arch), x_(x) {
        net::trunk_forward(net_, lay_, x_, base_);
        const auto& a = net_.arch;
        const std::size_t len = a.len4();
        prefix_.assign(a.channels_b * (len + 1), 0.0);
        suffix_.assign(a.channels_b * (len + 1), 0.0);
        for (std::size_t c = 0; c < a.channels_b; ++c) {
            const double* m = base_.a4.data() + c * len;
            double* pre = prefix_.data() + c * (len + 1);
            double* suf = suffix_.data() + c * (len + 1);
            // ReLU output is >= 0, so 0 is a neutral start for the running max.
            pre[0] = 0.0;
            for (std::size_t t = 0; t < len; ++t) pre[t + 1] = std::max(pre[t], m[t]);
            suf[len] = 0.0;
            for (std::size_t t = len; t-- > 0;) suf[t] = std::max(suf[t + 1], m[t]);
        }
    }

    const net::ForwardTrace& base() const { return base_; }
    const net::Layout& layout() const { return lay_; }

    // Pooled conv4 features of x with [k, k + width) set to fill.
    const Vector& pooled(std::size_t k, std::size_t width, double fill) {
        const auto& a = net_.arch;
        constexpr std::size_t rf = net::Architecture::kReceptiveField - 1;
        const std::size_t len4 = a.len4();
        const std::size_t lo = k > rf ? k - rf : 0;
        const std::size_t hi = std::min(len4, k + width);
        g_ = base_.g;
        if (lo >= hi) return g_;
        const std::size_t out = hi - lo, seg = out + rf;
        xs_.assign(x_.begin() + lo, x_.begin() + lo + seg);
        for (std::size_t t = std::max(k, lo); t < std::min(k + width, lo + seg); ++t) xs_[t - lo] = fill;

        const std::size_t l1 = seg - 2, l2 = l1 - 2, lp = l2 - 2, l3 = lp - 2;
        a1_.resize(a.channels_a * l1);
        a2_.resize(a.channels_a * l2);
        p1_.resize(a.channels_a * lp);
        n1_.resize(a.channels_a * lp);
        b1_.resize(a.channels_a * lp);
        a3_.resize(a.channels_b * l3);
        a4_.resize(a.channels_b * out);
        net::kernels::conv3(xs_.data(), 1, seg, net_.at(lay_.conv1_w), net_.at(lay_.conv1_b), a.channels_a,
                            a1_.data(), l1, l1);
        net::kernels::relu(a1_.data(), a1_.size());
        net::kernels::conv3(a1_.data(), a.channels_a, l1, net_.at(lay_.conv2_w), net_.at(lay_.conv2_b), a.channels_a,
                            a2_.data(), l2, l2);
        net::kernels::relu(a2_.data(), a2_.size());
        net::kernels::maxpool3(a2_.data(), a.channels_a, l2, p1_.data(), lp, lp, nullptr);
        net::detail::apply_bn(p1_.data(), a.channels_a, lp, net_.running[0].mean, net_.running[0].var,
                              net_.at(lay_.bn1_g), net_.at(lay_.bn1_b), n1_.data(), b1_.data());
        net::kernels::conv3(b1_.data(), a.channels_a, lp, net_.at(lay_.conv3_w), net_.at(lay_.conv3_b), a.channels_b,
                            a3_.data(), l3, l3);
        net::kernels::relu(a3_.data(), a3_.size());
        net::kernels::conv3(a3_.data(), a.channels_b, l3, net_.at(lay_.conv4_w), net_.at(lay_.conv4_b), a.channels_b,
                            a4_.data(), out, out);
        net::kernels::relu(a4_.data(), a4_.size());
        for (std::size_t c = 0; c < a.channels_b; ++c) {
            double m = std::max(prefix_[c * (len4 + 1) + lo], suffix_[c * (len4 + 1) + hi]);
            const double* v = a4_.data() + c * out;
            for (std::size_t t = 0; t < out; ++t) m = std::max(m, v[t]);
            g_[c] = m;
        }
        return g_;
    }

private:
    const NetworkParams& net_;
    net::Layout lay_;
    std::span<const double> x_;
    net::ForwardTrace base_;
    Vector prefix_, suffix_, g_;
    Vector xs_, a1_, a2_, p1_, n1_, b1_, a3_, a4_;
};

// Head evaluation from pooled features.
inline double head_probability(const NetworkParams& net, const net::Layout& lay, const Vector& g,
                               const DropoutMask& mask, std::size_t c, net::ForwardTrace& scratch) {
    scratch.g = g;
    net::head_forward(net, lay, mask, scratch);
    return scratch.probs[c];
}

}  // namespace detail

/// Signed occlusion maps of one network under each of `masks` (an empty
/// mask means plain eval mode).
inline std::vector<Vector> occlusion_maps(const NetworkParams& net, std::span<const DropoutMask> masks,
                                          std::span<const double> x, std::size_t c, const OcclusionConfig& cfg) {
    const std::size_t n = x.size();
    cfg.validate(n);
    if (c >= net.arch.classes) throw ShapeError("target class out of range");
    detail::OcclusionSweep sweep(net, x);
    net::ForwardTrace head = sweep.base();
    Vector base(masks.size());
    for (std::size_t s = 0; s < masks.size(); ++s)
        base[s] = detail::head_probability(net, sweep.layout(), sweep.base().g, masks[s], c, head);
    std::vector<Vector> drops(masks.size(), Vector(cfg.windows(n)));
    for (std::size_t w = 0, k = 0; w < cfg.windows(n); ++w, k += cfg.stride) {
        const Vector& g = sweep.pooled(k, cfg.window, cfg.fill);
        for (std::size_t s = 0; s < masks.size(); ++s)
            drops[s][w] = base[s] - detail::head_probability(net, sweep.layout(), g, masks[s], c, head);
    }
    std::vector<Vector> out;
    out.reserve(masks.size());
    for (const auto& d : drops) out.push_back(spread_drops(d, n, cfg));
    return out;
}

// ---------------------------------------------------------------------------
// Grad-CAM on the conv4 feature maps

/// d logit_c / d pooled-feature for an eval-mode head with the given mask.
/// `t` must hold a completed forward pass.
inline Vector pooled_gradient(const NetworkParams& net, const net::ForwardTrace& t, const DropoutMask& mask,
                              std::size_t c) {
    const auto& a = net.arch;
    const net::Layout lay(a);
    const auto& rs = net.running;
    const double* w2 = net.at(lay.fc2_w);
    const double* w1 = net.at(lay.fc1_w);
    const double* g3 = net.at(lay.bn3_g);
    const double* g2 = net.at(lay.bn2_g);
    const double keep_scale = mask.identity() ? 1.0 : 1.0 / (1.0 - a.dropout_p);
    Vector dz(a.hidden);
    for (std::size_t j = 0; j < a.hidden; ++j) {
        double d = w2[c * a.hidden + j] * g3[j] / std::sqrt(rs[2].var[j] + net::kBnEpsilon);
        if (!mask.identity()) d = mask.keep[j] ? d * keep_scale : 0.0;
        dz[j] = t.z1[j] > 0.0 ? d : 0.0;
    }
    Vector dg(a.channels_b, 0.0);
    for (std::size_t i = 0; i < a.channels_b; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.hidden; ++j) s += w1[j * a.channels_b + i] * dz[j];
        dg[i] = s * g2[i] / std::sqrt(rs[1].var[i] + net::kBnEpsilon);
    }
    return dg;
}

/// d logit_c / d conv4 feature maps (channels x len4). The global max routes
/// each channel's gradient to its (lowest-index) arg max.
inline Vector feature_map_gradient(const NetworkParams& net, const net::ForwardTrace& t, const DropoutMask& mask,
                                   std::size_t c) {
    const auto& a = net.arch;
    const Vector dg = pooled_gradient(net, t, mask, c);
    Vector d(a.channels_b * a.len4(), 0.0);
    for (std::size_t ch = 0; ch < a.channels_b; ++ch) d[ch * a.len4() + t.g_arg[ch]] = dg[ch];
    return d;
}

/// Linear resampling with half-sample alignment of both grids; positions
/// beyond the outermost source centres take the end values.
inline Vector resample_linear(std::span<const double> in, std::size_t out_len) {
    if (in.empty() || out_len == 0) throw ShapeError("cannot resample an empty signal");
    Vector out(out_len);
    const double ratio = static_cast<double>(in.size()) / static_cast<double>(out_len);
    const double last = static_cast<double>(in.size() - 1);
    for (std::size_t n = 0; n < out_len; ++n) {
        const double src = std::clamp((static_cast<double>(n) + 0.5) * ratio - 0.5, 0.0, last);
        const auto i0 = static_cast<std::size_t>(src);
        const std::size_t i1 = std::min(i0 + 1, in.size() - 1);
        const double f = src - static_cast<double>(i0);
        out[n] = in[i0] * (1.0 - f) + in[i1] * f;
    }
    return out;
}

/// Class activation on the conv4 grid: ReLU(sum_ch alpha_ch * A_ch) with
/// alpha_ch the temporal mean of the feature-map gradient.
inline Vector gradcam_activation(const NetworkParams& net, const net::ForwardTrace& t, const DropoutMask& mask,
                                 std::size_t c) {
    const auto& a = net.arch;
    const std::size_t len = a.len4();
    const Vector dg = pooled_gradient(net, t, mask, c);
    Vector cam(len, 0.0);
    for (std::size_t ch = 0; ch < a.channels_b; ++ch) {
        const double alpha = dg[ch] / static_cast<double>(len);
        const double* m = t.a4.data() + ch * len;
        for (std::size_t k = 0; k < len; ++k) cam[k] += alpha * m[k];
    }
    for (auto& v : cam) v = std::max(v, 0.0);
    return cam;
}

inline std::vector<Vector> gradcam_maps(const NetworkParams& net, std::span<const DropoutMask> masks,
                                        std::span<const double> x, std::size_t c) {
    if (c >= net.arch.classes) throw ShapeError("target class out of range");
    const net::Layout lay(net.arch);
    net::ForwardTrace t;
    net::trunk_forward(net, lay, x, t);
    std::vector<Vector> out;
    for (const auto& m : masks) {
        net::head_forward(net, lay, m, t);
        out.push_back(resample_linear(gradcam_activation(net, t, m, c), x.size()));
    }
    return out;
}

// ---------------------------------------------------------------------------
// LIME

struct LimeDesign {
    Eigen::MatrixXd z;  // rows x segments, entries 0 / 1
    Vector weights;     // exp(-d^2 / width^2), d = fraction of segments switched off
};

/// Row 0 keeps every segment; the remaining rows are uniform random masks.
inline LimeDesign lime_design(std::size_t segments, const LimeConfig& cfg, Rng& rng) {
    cfg.validate();
    LimeDesign d;
    d.z.resize(static_cast<Eigen::Index>(cfg.n_perturbations), static_cast<Eigen::Index>(segments));
    d.weights.resize(cfg.n_perturbations);
    for (std::size_t i = 0; i < cfg.n_perturbations; ++i) {
        std::size_t off = 0;
        for (std::size_t j = 0; j < segments; ++j) {
            const bool keep = i == 0 || rng.bernoulli(0.5);
            d.z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = keep ? 1.0 : 0.0;
            off += keep ? 0 : 1;
        }
        const double dist = static_cast<double>(off) / static_cast<double>(segments);
        d.weights[i] = std::exp(-(dist * dist) / (cfg.kernel_width * cfg.kernel_width));
    }
    return d;
}

/// Weighted ridge regression of `target` on the design with an unpenalised
/// intercept; returns the segment coefficients.
inline Vector lime_fit(const Eigen::MatrixXd& z, const Vector& target, const Vector& weights, double ridge) {
    const auto rows = z.rows(), cols = z.cols();
    if (static_cast<std::size_t>(rows) != target.size() || target.size() != weights.size())
        throw ShapeError("LIME design, target and weights disagree in length");
    bool identical = true;
    for (Eigen::Index i = 1; i < rows && identical; ++i) identical = z.row(i) == z.row(0);
    if (identical) throw NumericError("degenerate LIME design: all perturbation masks are identical");
    // Owned, aligned copies: reductions over a Map of std::vector storage
    // split differently depending on the heap address.
    const Eigen::VectorXd p = Eigen::Map<const Eigen::VectorXd>(target.data(), rows);
    const Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(weights.data(), rows);
    const double wsum = w.sum();
    if (!(wsum > 0.0)) throw NumericError("LIME sample weights sum to zero");
    const Eigen::RowVectorXd zbar = (w.asDiagonal() * z).colwise().sum() / wsum;
    const double pbar = w.dot(p) / wsum;
    const Eigen::MatrixXd zc = z.rowwise() - zbar;
    const Eigen::VectorXd pc = p.array() - pbar;
    Eigen::MatrixXd gram = zc.transpose() * w.asDiagonal() * zc;
    gram.diagonal().array() += ridge;
    const Eigen::VectorXd beta = gram.ldlt().solve(zc.transpose() * (w.asDiagonal() * pc));
    if (!beta.allFinite()) throw NumericError("LIME ridge solve produced non-finite coefficients");
    return Vector(beta.data(), beta.data() + cols);
}

inline Vector perturb_segments(std::span<const double> x, const Eigen::MatrixXd& z, Eigen::Index row,
                               std::size_t width, double fill) {
    Vector out(x.begin(), x.end());
    for (Eigen::Index j = 0; j < z.cols(); ++j)
        if (z(row, j) == 0.0)
            std::fill(out.begin() + j * width, out.begin() + (j + 1) * width, fill);
    return out;
}

inline Vector segments_to_map(const Vector& coef, std::size_t width) {
    Vector r(coef.size() * width);
    for (std::size_t j = 0; j < coef.size(); ++j) std::fill(r.begin() + j * width, r.begin() + (j + 1) * width, coef[j]);
    return r;
}

/// LIME for any model given as prob(x) = p(c | x).
template <typename Prob>
Vector lime(Prob&& prob, std::span<const double> x, const LimeConfig& cfg, Rng& rng) {
    const std::size_t segs = cfg.segments(x.size());
    const auto d = lime_design(segs, cfg, rng);
    Vector p(cfg.n_perturbations);
    for (Eigen::Index i = 0; i < d.z.rows(); ++i) {
        const Vector xp = perturb_segments(x, d.z, i, cfg.segment_width, cfg.fill);
        p[static_cast<std::size_t>(i)] = prob(std::span<const double>(xp));
    }
    return segments_to_map(lime_fit(d.z, p, d.weights, cfg.ridge), cfg.segment_width);
}

/// LIME maps of one network under each mask, all on the same design.
inline std::vector<Vector> lime_maps(const NetworkParams& net, std::span<const DropoutMask> masks,
                                     std::span<const double> x, std::size_t c, const LimeConfig& cfg, Rng& rng) {
    if (c >= net.arch.classes) throw ShapeError("target class out of range");
    const std::size_t segs = cfg.segments(x.size());
    const auto d = lime_design(segs, cfg, rng);
    const net::Layout lay(net.arch);
    std::vector<Vector> p(masks.size(), Vector(cfg.n_perturbations));
    net::ForwardTrace t;
    for (Eigen::Index i = 0; i < d.z.rows(); ++i) {
        const Vector xp = perturb_segments(x, d.z, i, cfg.segment_width, cfg.fill);
        net::trunk_forward(net, lay, xp, t);
        for (std::size_t s = 0; s < masks.size(); ++s) {
            net::head_forward(net, lay, masks[s], t);
            p[s][static_cast<std::size_t>(i)] = t.probs[c];
        }
    }
    std::vector<Vector> out;
    for (const auto& ps : p) out.push_back(segments_to_map(lime_fit(d.z, ps, d.weights, cfg.ridge), cfg.segment_width));
    return out;
}

// ---------------------------------------------------------------------------
// Dispatch over posterior samples

/// Signed maps for every sample, in sample order. Samples sharing a network
/// are evaluated together. LIME draws its design from `lime_seed`, so every
/// sample is explained on the same perturbations.
inline std::vector<SaliencyMap> explain(std::span<const posterior::ParameterSample> samples, Operator op,
                                        std::span<const double> x, std::size_t c, const OperatorConfig& cfg,
                                        std::uint64_t lime_seed) {
    std::vector<SaliencyMap> out(samples.size());
    std::vector<bool> done(samples.size(), false);
    for (std::size_t s = 0; s < samples.size(); ++s) {
        if (done[s]) continue;
        std::vector<std::size_t> group;
        std::vector<DropoutMask> masks;
        for (std::size_t u = s; u < samples.size(); ++u) {
            if (done[u] || samples[u].params.get() != samples[s].params.get()) continue;
            group.push_back(u);
            masks.push_back(samples[u].mask);
            done[u] = true;
        }
        const auto& net = samples[s].net();
        std::vector<Vector> maps;
        switch (op) {
            case Operator::occlusion: maps = occlusion_maps(net, masks, x, c, cfg.occlusion); break;
            case Operator::gradcam: maps = gradcam_maps(net, masks, x, c); break;
            case Operator::lime: {
                Rng rng(lime_seed);
                maps = lime_maps(net, masks, x, c, cfg.lime, rng);
                break;
            }
        }
        for (std::size_t g = 0; g < group.size(); ++g)
            out[group[g]] = SaliencyMap{std::move(maps[g]), op == Operator::gradcam, op, c};
    }
    return out;
}

inline void write_map_csv(const std::filesystem::path& path, const SaliencyMap& m) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "# operator=" << operator_name(m.op) << " target=" << m.target
        << " signedness=" << (m.nonnegative ? "nonnegative" : "signed") << '\n';
    out << "n,r\n";
    char buf[64];
    for (std::size_t n = 0; n < m.r.size(); ++n) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", n, m.r[n]);
        out << buf;
    }
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace uaxai::attribution
