#pragma once

// Small 1-D CNN engine: forward passes in train / eval / eval-with-dropout
// mode, exact reverse-mode gradients, Adam or SGD training, checkpoints.
//
// Layer stack (all convolutions kernel 3, stride 1, no padding):
//   conv1 -> ReLU -> conv2 -> ReLU -> maxpool(3, stride 1) -> BN1
//   -> conv3 -> ReLU -> conv4 -> ReLU -> global max pool -> BN2
//   -> FC1 -> ReLU -> dropout -> BN3 -> FC2 -> softmax

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uaxai/binio.hpp"
#include "uaxai/common.hpp"

namespace uaxai::net {

struct Architecture {
    std::size_t input_length = 640;
    std::size_t channels_a = 8;   // convolution_1, convolution_2
    std::size_t channels_b = 16;  // convolution_3, convolution_4
    std::size_t hidden = 64;      // fully_connected_1
    std::size_t classes = kNumClasses;
    double dropout_p = 0.2;

    static constexpr std::size_t kKernel = 3;
    static constexpr std::size_t kReceptiveField = 11;  // input samples seen by one conv4 output

    std::size_t len1() const { return input_length - 2; }
    std::size_t len2() const { return input_length - 4; }
    std::size_t len_pool() const { return input_length - 6; }
    std::size_t len3() const { return input_length - 8; }
    std::size_t len4() const { return input_length - 10; }

    std::array<std::size_t, 6> temporal_lengths() const { return {len1(), len2(), len_pool(), len3(), len4(), 1}; }

    void validate() const {
        if (input_length < kReceptiveField) throw ShapeError("input_length too short for the conv stack");
        if (channels_a == 0 || channels_b == 0 || hidden == 0 || classes < 2)
            throw ShapeError("architecture widths must be positive");
        if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout_p must lie in [0, 1)");
    }

    std::uint64_t hash() const {
        std::uint64_t h = 0x5EED0CA7;
        for (std::size_t v : {input_length, channels_a, channels_b, hidden, classes}) h = derive_seed(h, v);
        return derive_seed(h, std::bit_cast<std::uint64_t>(dropout_p));
    }

    bool operator==(const Architecture&) const = default;
};

struct Slot {
    std::size_t offset = 0;
    std::size_t size = 0;
};

// Offsets of every parameter tensor inside the flat vector.
struct Layout {
    Slot conv1_w, conv1_b, conv2_w, conv2_b, bn1_g, bn1_b;
    Slot conv3_w, conv3_b, conv4_w, conv4_b, bn2_g, bn2_b;
    Slot fc1_w, fc1_b, bn3_g, bn3_b, fc2_w, fc2_b;
    std::size_t total = 0;

    explicit Layout(const Architecture& a) {
        constexpr std::size_t K = Architecture::kKernel;
        auto take = [this](std::size_t n) {
            Slot s{total, n};
            total += n;
            return s;
        };
        conv1_w = take(a.channels_a * 1 * K);
        conv1_b = take(a.channels_a);
        conv2_w = take(a.channels_a * a.channels_a * K);
        conv2_b = take(a.channels_a);
        bn1_g = take(a.channels_a);
        bn1_b = take(a.channels_a);
        conv3_w = take(a.channels_b * a.channels_a * K);
        conv3_b = take(a.channels_b);
        conv4_w = take(a.channels_b * a.channels_b * K);
        conv4_b = take(a.channels_b);
        bn2_g = take(a.channels_b);
        bn2_b = take(a.channels_b);
        fc1_w = take(a.hidden * a.channels_b);
        fc1_b = take(a.hidden);
        bn3_g = take(a.hidden);
        bn3_b = take(a.hidden);
        fc2_w = take(a.classes * a.hidden);
        fc2_b = take(a.classes);
    }

    std::array<Slot, 6> batch_norm_slots() const { return {bn1_g, bn1_b, bn2_g, bn2_b, bn3_g, bn3_b}; }
};

struct BatchNormStats {
    Vector mean;
    Vector var;
};

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnMomentum = 0.1;
inline constexpr double kLogFloor = 1e-12;

struct NetworkParams {
    Architecture arch;
    Vector theta;
    std::array<BatchNormStats, 3> running;  // not part of theta

    std::size_t param_count() const { return theta.size(); }
    Layout layout() const { return Layout(arch); }

    const double* at(Slot s) const { return theta.data() + s.offset; }
    double* at(Slot s) { return theta.data() + s.offset; }
};

/// Zero weights, unit BN scale, unit running variance.
inline NetworkParams zero_network(const Architecture& arch) {
    arch.validate();
    NetworkParams p;
    p.arch = arch;
    const Layout lay(arch);
    p.theta.assign(lay.total, 0.0);
    for (Slot s : {lay.bn1_g, lay.bn2_g, lay.bn3_g}) std::fill_n(p.at(s), s.size, 1.0);
    const std::array<std::size_t, 3> widths = {arch.channels_a, arch.channels_b, arch.hidden};
    for (std::size_t k = 0; k < 3; ++k) p.running[k] = {Vector(widths[k], 0.0), Vector(widths[k], 1.0)};
    return p;
}

/// He-normal weights, zero biases.
inline NetworkParams initialize(const Architecture& arch, std::uint64_t seed) {
    NetworkParams p = zero_network(arch);
    const Layout lay(arch);
    Rng rng(seed);
    constexpr std::size_t K = Architecture::kKernel;
    auto fill = [&](Slot s, std::size_t fan_in) {
        const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (std::size_t i = 0; i < s.size; ++i) p.theta[s.offset + i] = sd * rng.normal();
    };
    fill(lay.conv1_w, K);
    fill(lay.conv2_w, arch.channels_a * K);
    fill(lay.conv3_w, arch.channels_a * K);
    fill(lay.conv4_w, arch.channels_b * K);
    fill(lay.fc1_w, arch.channels_b);
    fill(lay.fc2_w, arch.hidden);
    return p;
}

enum class Mode { train, eval, eval_dropout };

/// Binary keep-mask over the FC1 units. Empty = no dropout.
struct DropoutMask {
    std::vector<std::uint8_t> keep;

    bool identity() const { return keep.empty(); }

    static DropoutMask sample(std::size_t width, double p, Rng& rng) {
        DropoutMask m;
        m.keep.resize(width);
        for (auto& k : m.keep) k = rng.bernoulli(p) ? 0 : 1;
        return m;
    }
    static DropoutMask from_seed(std::size_t width, double p, std::uint64_t seed) {
        Rng rng(seed);
        return sample(width, p, rng);
    }
};

// ---------------------------------------------------------------------------
// Kernels. Loops over time are innermost so they vectorise; the per-element
// operation order does not depend on the range, which lets callers recompute
// any sub-range bit-identically.

namespace kernels {

// out[o][t] = b[o] + sum_i (w0 in[i][t] + w1 in[i][t+1] + w2 in[i][t+2])
inline void conv3(const double* __restrict in, std::size_t cin, std::size_t in_stride, const double* __restrict w,
                  const double* __restrict b, std::size_t cout, double* __restrict out, std::size_t out_stride,
                  std::size_t len) {
    std::size_t o = 0;
    // Four output rows per pass share the input loads.
    for (; o + 4 <= cout; o += 4) {
        double* __restrict y0 = out + o * out_stride;
        double* __restrict y1 = y0 + out_stride;
        double* __restrict y2 = y1 + out_stride;
        double* __restrict y3 = y2 + out_stride;
        std::fill(y0, y0 + len, b[o]);
        std::fill(y1, y1 + len, b[o + 1]);
        std::fill(y2, y2 + len, b[o + 2]);
        std::fill(y3, y3 + len, b[o + 3]);
        for (std::size_t i = 0; i < cin; ++i) {
            const double* __restrict x = in + i * in_stride;
            const double* k0 = w + (o * cin + i) * 3;
            const double* k1 = k0 + cin * 3;
            const double* k2 = k1 + cin * 3;
            const double* k3 = k2 + cin * 3;
            const double a0 = k0[0], a1 = k0[1], a2 = k0[2];
            const double b0 = k1[0], b1 = k1[1], b2 = k1[2];
            const double c0 = k2[0], c1 = k2[1], c2 = k2[2];
            const double d0 = k3[0], d1 = k3[1], d2 = k3[2];
            for (std::size_t t = 0; t < len; ++t) {
                const double x0 = x[t], x1 = x[t + 1], x2 = x[t + 2];
                y0[t] += a0 * x0 + a1 * x1 + a2 * x2;
                y1[t] += b0 * x0 + b1 * x1 + b2 * x2;
                y2[t] += c0 * x0 + c1 * x1 + c2 * x2;
                y3[t] += d0 * x0 + d1 * x1 + d2 * x2;
            }
        }
    }
    for (; o < cout; ++o) {
        double* __restrict y = out + o * out_stride;
        std::fill(y, y + len, b[o]);
        for (std::size_t i = 0; i < cin; ++i) {
            const double* __restrict x = in + i * in_stride;
            const double* wk = w + (o * cin + i) * 3;
            const double w0 = wk[0], w1 = wk[1], w2 = wk[2];
            for (std::size_t t = 0; t < len; ++t) y[t] += w0 * x[t] + w1 * x[t + 1] + w2 * x[t + 2];
        }
    }
}

inline void relu(double* v, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) v[i] = v[i] > 0.0 ? v[i] : 0.0;
}

// Accumulates weight / bias / input gradients of conv3.
inline void conv3_backward(const double* __restrict in, std::size_t cin, std::size_t in_stride,
                           const double* __restrict w, const double* __restrict dy, std::size_t cout,
                           std::size_t dy_stride, std::size_t len, double* __restrict dw, double* __restrict db,
                           double* __restrict din) {
    for (std::size_t o = 0; o < cout; ++o) {
        const double* __restrict g = dy + o * dy_stride;
        double sb = 0.0;
        for (std::size_t t = 0; t < len; ++t) sb += g[t];
        db[o] += sb;
        for (std::size_t i = 0; i < cin; ++i) {
            const double* __restrict x = in + i * in_stride;
            // Four independent partial sums per tap so the reduction vectorises.
            double p0[4] = {}, p1[4] = {}, p2[4] = {};
            std::size_t t = 0;
            for (; t + 4 <= len; t += 4) {
                for (std::size_t l = 0; l < 4; ++l) {
                    p0[l] += g[t + l] * x[t + l];
                    p1[l] += g[t + l] * x[t + l + 1];
                    p2[l] += g[t + l] * x[t + l + 2];
                }
            }
            for (; t < len; ++t) {
                p0[0] += g[t] * x[t];
                p1[0] += g[t] * x[t + 1];
                p2[0] += g[t] * x[t + 2];
            }
            const double s0 = (p0[0] + p0[1]) + (p0[2] + p0[3]);
            const double s1 = (p1[0] + p1[1]) + (p1[2] + p1[3]);
            const double s2 = (p2[0] + p2[1]) + (p2[2] + p2[3]);
            double* dwk = dw + (o * cin + i) * 3;
            dwk[0] += s0;
            dwk[1] += s1;
            dwk[2] += s2;
            if (din) {
                const double* wk = w + (o * cin + i) * 3;
                double* __restrict dx = din + i * in_stride;
                for (std::size_t t = 0; t < len; ++t) dx[t] += wk[0] * g[t];
                for (std::size_t t = 0; t < len; ++t) dx[t + 1] += wk[1] * g[t];
                for (std::size_t t = 0; t < len; ++t) dx[t + 2] += wk[2] * g[t];
            }
        }
    }
}

// Same contract as conv3_backward for a dy that is zero almost everywhere
// (everything upstream of the global max-pool). Only nonzero entries cost work.
inline void conv3_backward_sparse(const double* __restrict in, std::size_t cin, std::size_t in_stride,
                                  const double* __restrict w, const double* __restrict dy, std::size_t cout,
                                  std::size_t dy_stride, std::size_t len, double* __restrict dw,
                                  double* __restrict db, double* __restrict din) {
    for (std::size_t o = 0; o < cout; ++o) {
        const double* g = dy + o * dy_stride;
        for (std::size_t t = 0; t < len; ++t) {
            const double gt = g[t];
            if (gt == 0.0) continue;
            db[o] += gt;
            for (std::size_t i = 0; i < cin; ++i) {
                const double* x = in + i * in_stride + t;
                double* dwk = dw + (o * cin + i) * 3;
                dwk[0] += gt * x[0];
                dwk[1] += gt * x[1];
                dwk[2] += gt * x[2];
                if (din) {
                    const double* wk = w + (o * cin + i) * 3;
                    double* dx = din + i * in_stride + t;
                    dx[0] += wk[0] * gt;
                    dx[1] += wk[1] * gt;
                    dx[2] += wk[2] * gt;
                }
            }
        }
    }
}

// out[c][t] = max(in[c][t..t+2]); arg records the winning offset in the row.
inline void maxpool3(const double* in, std::size_t channels, std::size_t in_stride, double* out, std::size_t out_stride,
                     std::size_t len, std::uint32_t* arg) {
    for (std::size_t c = 0; c < channels; ++c) {
        const double* x = in + c * in_stride;
        double* y = out + c * out_stride;
        for (std::size_t t = 0; t < len; ++t) {
            std::size_t best = t;
            if (x[t + 1] > x[best]) best = t + 1;
            if (x[t + 2] > x[best]) best = t + 2;
            y[t] = x[best];
            if (arg) arg[c * out_stride + t] = static_cast<std::uint32_t>(best);
        }
    }
}

// Global max per channel, lowest index on ties.
inline void global_max(const double* in, std::size_t channels, std::size_t stride, std::size_t len, double* out,
                       std::uint32_t* arg) {
    for (std::size_t c = 0; c < channels; ++c) {
        const double* x = in + c * stride;
        std::size_t best = 0;
        for (std::size_t t = 1; t < len; ++t)
            if (x[t] > x[best]) best = t;
        out[c] = x[best];
        if (arg) arg[c] = static_cast<std::uint32_t>(best);
    }
}

// y = W x + b, W row-major [out][in]
inline void dense(const double* w, const double* b, const double* x, std::size_t n_in, std::size_t n_out, double* y) {
    for (std::size_t o = 0; o < n_out; ++o) {
        double s = b[o];
        const double* row = w + o * n_in;
        for (std::size_t i = 0; i < n_in; ++i) s += row[i] * x[i];
        y[o] = s;
    }
}

inline void dense_backward(const double* w, const double* x, const double* dy, std::size_t n_in, std::size_t n_out,
                           double* dw, double* db, double* dx) {
    for (std::size_t o = 0; o < n_out; ++o) {
        db[o] += dy[o];
        double* row = dw + o * n_in;
        for (std::size_t i = 0; i < n_in; ++i) row[i] += dy[o] * x[i];
    }
    if (dx) {
        for (std::size_t o = 0; o < n_out; ++o) {
            const double* row = w + o * n_in;
            for (std::size_t i = 0; i < n_in; ++i) dx[i] += row[i] * dy[o];
        }
    }
}

}  // namespace kernels

/// Softmax with max subtraction.
inline Vector softmax(const Vector& logits) {
    Vector p(logits.size());
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - m));
    for (auto& v : p) v /= z;
    return p;
}

/// -log p[y] with the probability floored at 1e-12.
inline double cross_entropy(const Vector& probs, std::size_t y) {
    if (y >= probs.size()) throw ShapeError("label out of range");
    return -std::log(std::max(probs[y], kLogFloor));
}

/// -log softmax(logits)[y] via log-sum-exp. Exact for any logits, so the
/// training loss stays differentiable where a floored probability would not.
inline double cross_entropy_logits(const Vector& logits, std::size_t y) {
    if (y >= logits.size()) throw ShapeError("label out of range");
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - m);
    return m + std::log(z) - logits[y];
}

inline double cross_entropy(std::span<const Vector> probs, std::span<const std::size_t> labels) {
    if (probs.size() != labels.size() || probs.empty()) throw ShapeError("batch size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) s += cross_entropy(probs[i], labels[i]);
    return s / static_cast<double>(probs.size());
}

/// Lowest index wins ties.
inline std::size_t argmax(const Vector& v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// ---------------------------------------------------------------------------
// Per-sample activations

struct ForwardTrace {
    Mode mode = Mode::eval;
    Vector a1, a2, p1, n1, b1, a3, a4;  // n1 = normalised p1 (pre scale/shift)
    std::vector<std::uint32_t> p1_arg, g_arg;
    Vector g, n2, b2, z1, h, hd, n3, b3, logits, probs;
    std::vector<std::uint8_t> keep;  // dropout keep-mask actually applied (empty = none)

    // convolution_4 feature maps, channels_b x len4, row-major.
    const Vector& conv4_maps() const { return a4; }
};

namespace detail {

inline void resize_trace(ForwardTrace& t, const Architecture& a) {
    t.a1.resize(a.channels_a * a.len1());
    t.a2.resize(a.channels_a * a.len2());
    t.p1.resize(a.channels_a * a.len_pool());
    t.p1_arg.resize(a.channels_a * a.len_pool());
    t.n1.resize(a.channels_a * a.len_pool());
    t.b1.resize(a.channels_a * a.len_pool());
    t.a3.resize(a.channels_b * a.len3());
    t.a4.resize(a.channels_b * a.len4());
    t.g.resize(a.channels_b);
    t.g_arg.resize(a.channels_b);
    t.n2.resize(a.channels_b);
    t.b2.resize(a.channels_b);
    t.z1.resize(a.hidden);
    t.h.resize(a.hidden);
    t.hd.resize(a.hidden);
    t.n3.resize(a.hidden);
    t.b3.resize(a.hidden);
    t.logits.resize(a.classes);
}

// conv1 -> conv2 -> pool
inline void stage_front(const NetworkParams& net, const Layout& lay, const double* x, ForwardTrace& t) {
    const auto& a = net.arch;
    kernels::conv3(x, 1, a.input_length, net.at(lay.conv1_w), net.at(lay.conv1_b), a.channels_a, t.a1.data(),
                   a.len1(), a.len1());
    kernels::relu(t.a1.data(), t.a1.size());
    kernels::conv3(t.a1.data(), a.channels_a, a.len1(), net.at(lay.conv2_w), net.at(lay.conv2_b), a.channels_a,
                   t.a2.data(), a.len2(), a.len2());
    kernels::relu(t.a2.data(), t.a2.size());
    kernels::maxpool3(t.a2.data(), a.channels_a, a.len2(), t.p1.data(), a.len_pool(), a.len_pool(), t.p1_arg.data());
}

// BN1 output -> conv3 -> conv4 -> global max
inline void stage_middle(const NetworkParams& net, const Layout& lay, ForwardTrace& t) {
    const auto& a = net.arch;
    kernels::conv3(t.b1.data(), a.channels_a, a.len_pool(), net.at(lay.conv3_w), net.at(lay.conv3_b), a.channels_b,
                   t.a3.data(), a.len3(), a.len3());
    kernels::relu(t.a3.data(), t.a3.size());
    kernels::conv3(t.a3.data(), a.channels_b, a.len3(), net.at(lay.conv4_w), net.at(lay.conv4_b), a.channels_b,
                   t.a4.data(), a.len4(), a.len4());
    kernels::relu(t.a4.data(), t.a4.size());
    kernels::global_max(t.a4.data(), a.channels_b, a.len4(), a.len4(), t.g.data(), t.g_arg.data());
}

inline void apply_bn(const double* in, std::size_t channels, std::size_t len, const Vector& mean, const Vector& var,
                     const double* gamma, const double* beta, double* normed, double* out) {
    for (std::size_t c = 0; c < channels; ++c) {
        const double inv = 1.0 / std::sqrt(var[c] + kBnEpsilon);
        for (std::size_t t = 0; t < len; ++t) {
            const double n = (in[c * len + t] - mean[c]) * inv;
            normed[c * len + t] = n;
            out[c * len + t] = gamma[c] * n + beta[c];
        }
    }
}

}  // namespace detail

/// Eval-mode head: g (pooled features) -> probs. A non-identity mask applies
/// inverted dropout with the architecture's p.
inline void head_forward(const NetworkParams& net, const Layout& lay, const DropoutMask& mask, ForwardTrace& t) {
    const auto& a = net.arch;
    const auto& rs = net.running;
    detail::apply_bn(t.g.data(), a.channels_b, 1, rs[1].mean, rs[1].var, net.at(lay.bn2_g), net.at(lay.bn2_b),
                     t.n2.data(), t.b2.data());
    kernels::dense(net.at(lay.fc1_w), net.at(lay.fc1_b), t.b2.data(), a.channels_b, a.hidden, t.z1.data());
    for (std::size_t j = 0; j < a.hidden; ++j) t.h[j] = t.z1[j] > 0.0 ? t.z1[j] : 0.0;
    t.keep = mask.keep;
    if (mask.identity()) {
        t.hd = t.h;
    } else {
        if (mask.keep.size() != a.hidden) throw ShapeError("dropout mask width mismatch");
        const double scale = 1.0 / (1.0 - a.dropout_p);
        for (std::size_t j = 0; j < a.hidden; ++j) t.hd[j] = mask.keep[j] ? t.h[j] * scale : 0.0;
    }
    detail::apply_bn(t.hd.data(), a.hidden, 1, rs[2].mean, rs[2].var, net.at(lay.bn3_g), net.at(lay.bn3_b),
                     t.n3.data(), t.b3.data());
    kernels::dense(net.at(lay.fc2_w), net.at(lay.fc2_b), t.b3.data(), a.hidden, a.classes, t.logits.data());
    t.probs = softmax(t.logits);
}

/// Eval-mode conv stack: x -> conv4 maps and pooled features.
inline void trunk_forward(const NetworkParams& net, const Layout& lay, std::span<const double> x, ForwardTrace& t) {
    const auto& a = net.arch;
    if (x.size() != a.input_length)
        throw ShapeError("input length " + std::to_string(x.size()) + " != " + std::to_string(a.input_length));
    detail::resize_trace(t, a);
    detail::stage_front(net, lay, x.data(), t);
    detail::apply_bn(t.p1.data(), a.channels_a, a.len_pool(), net.running[0].mean, net.running[0].var,
                     net.at(lay.bn1_g), net.at(lay.bn1_b), t.n1.data(), t.b1.data());
    detail::stage_middle(net, lay, t);
}

/// Eval or eval-with-dropout forward pass with an explicit (frozen) mask.
inline ForwardTrace forward(const NetworkParams& net, std::span<const double> x, const DropoutMask& mask) {
    const Layout lay(net.arch);
    ForwardTrace t;
    trunk_forward(net, lay, x, t);
    head_forward(net, lay, mask, t);
    t.mode = mask.identity() ? Mode::eval : Mode::eval_dropout;
    return t;
}

// ---------------------------------------------------------------------------
// Batched pass with gradients

struct BatchResult {
    double loss = 0.0;
    Vector grad;                   // d mean-loss / d theta (empty when not requested)
    std::vector<Vector> probs;
    std::array<BatchNormStats, 3> batch_stats;  // train mode only (biased variance)
    std::array<std::size_t, 3> stat_counts{};
};

namespace detail {

inline void batch_stats(const std::vector<ForwardTrace>& traces, Vector ForwardTrace::*field, std::size_t channels,
                        std::size_t len, BatchNormStats& out) {
    out.mean.assign(channels, 0.0);
    out.var.assign(channels, 0.0);
    const double count = static_cast<double>(traces.size() * len);
    for (std::size_t c = 0; c < channels; ++c) {
        double s = 0.0;
        for (const auto& t : traces)
            for (std::size_t k = 0; k < len; ++k) s += (t.*field)[c * len + k];
        const double m = s / count;
        double v = 0.0;
        for (const auto& t : traces)
            for (std::size_t k = 0; k < len; ++k) {
                const double d = (t.*field)[c * len + k] - m;
                v += d * d;
            }
        out.mean[c] = m;
        out.var[c] = v / count;
    }
}

// BN backward. In batch mode the statistics depend on the inputs; otherwise
// the layer is a fixed per-channel affine map.
inline void bn_backward(std::vector<ForwardTrace>& traces, Vector ForwardTrace::*normed, std::vector<Vector>& dy,
                        std::size_t channels, std::size_t len, const double* gamma, const Vector& var,
                        bool batch_mode, double* dgamma, double* dbeta, std::vector<Vector>& dx) {
    const double count = static_cast<double>(traces.size() * len);
    for (std::size_t c = 0; c < channels; ++c) {
        const double inv = 1.0 / std::sqrt(var[c] + kBnEpsilon);
        double sum_dy = 0.0, sum_dy_n = 0.0;
        for (std::size_t b = 0; b < traces.size(); ++b)
            for (std::size_t k = 0; k < len; ++k) {
                const double g = dy[b][c * len + k];
                sum_dy += g;
                sum_dy_n += g * (traces[b].*normed)[c * len + k];
            }
        dgamma[c] += sum_dy_n;
        dbeta[c] += sum_dy;
        for (std::size_t b = 0; b < traces.size(); ++b)
            for (std::size_t k = 0; k < len; ++k) {
                const double g = dy[b][c * len + k];
                double v;
                if (batch_mode) {
                    const double n = (traces[b].*normed)[c * len + k];
                    v = gamma[c] * inv * (g - sum_dy / count - n * sum_dy_n / count);
                } else {
                    v = gamma[c] * inv * g;
                }
                dx[b][c * len + k] = v;
            }
    }
}

}  // namespace detail

/// Mean cross-entropy over a batch and, optionally, its exact gradient.
/// train: batch-statistics BN, dropout masks drawn from rng.
/// eval: running-statistics BN, no dropout.
/// eval_dropout: running-statistics BN, dropout masks drawn from rng.
inline BatchResult compute_batch(const NetworkParams& net, std::span<const Vector* const> xs,
                                 std::span<const std::size_t> ys, Mode mode, Rng& rng, bool want_grad) {
    const auto& a = net.arch;
    const Layout lay(a);
    const std::size_t B = xs.size();
    if (B == 0) throw ShapeError("empty batch");
    if (ys.size() != B) throw ShapeError("label count mismatch");
    const bool batch_bn = mode == Mode::train;
    const bool use_dropout = mode != Mode::eval && a.dropout_p > 0.0;

    std::vector<ForwardTrace> tr(B);
    for (std::size_t b = 0; b < B; ++b) {
        if (xs[b]->size() != a.input_length) throw ShapeError("input length mismatch in batch");
        if (ys[b] >= a.classes) throw ShapeError("label out of range");
        detail::resize_trace(tr[b], a);
        tr[b].mode = mode;
        detail::stage_front(net, lay, xs[b]->data(), tr[b]);
    }

    BatchResult res;
    std::array<BatchNormStats, 3> stats;
    auto stats_for = [&](std::size_t k, Vector ForwardTrace::*field, std::size_t ch, std::size_t len) {
        if (batch_bn) {
            detail::batch_stats(tr, field, ch, len, stats[k]);
            res.stat_counts[k] = B * len;
        } else {
            stats[k] = net.running[k];
        }
    };

    stats_for(0, &ForwardTrace::p1, a.channels_a, a.len_pool());
    for (auto& t : tr) {
        detail::apply_bn(t.p1.data(), a.channels_a, a.len_pool(), stats[0].mean, stats[0].var, net.at(lay.bn1_g),
                         net.at(lay.bn1_b), t.n1.data(), t.b1.data());
        detail::stage_middle(net, lay, t);
    }
    stats_for(1, &ForwardTrace::g, a.channels_b, 1);
    const double keep_scale = use_dropout ? 1.0 / (1.0 - a.dropout_p) : 1.0;
    for (auto& t : tr) {
        detail::apply_bn(t.g.data(), a.channels_b, 1, stats[1].mean, stats[1].var, net.at(lay.bn2_g),
                         net.at(lay.bn2_b), t.n2.data(), t.b2.data());
        kernels::dense(net.at(lay.fc1_w), net.at(lay.fc1_b), t.b2.data(), a.channels_b, a.hidden, t.z1.data());
        for (std::size_t j = 0; j < a.hidden; ++j) t.h[j] = t.z1[j] > 0.0 ? t.z1[j] : 0.0;
        if (use_dropout) {
            t.keep = DropoutMask::sample(a.hidden, a.dropout_p, rng).keep;
            for (std::size_t j = 0; j < a.hidden; ++j) t.hd[j] = t.keep[j] ? t.h[j] * keep_scale : 0.0;
        } else {
            t.keep.clear();
            t.hd = t.h;
        }
    }
    stats_for(2, &ForwardTrace::hd, a.hidden, 1);
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        auto& t = tr[b];
        detail::apply_bn(t.hd.data(), a.hidden, 1, stats[2].mean, stats[2].var, net.at(lay.bn3_g), net.at(lay.bn3_b),
                         t.n3.data(), t.b3.data());
        kernels::dense(net.at(lay.fc2_w), net.at(lay.fc2_b), t.b3.data(), a.hidden, a.classes, t.logits.data());
        t.probs = softmax(t.logits);
        loss += cross_entropy_logits(t.logits, ys[b]);
    }
    res.loss = loss / static_cast<double>(B);
    res.probs.reserve(B);
    for (const auto& t : tr) res.probs.push_back(t.probs);
    if (batch_bn) res.batch_stats = stats;
    if (!want_grad) return res;

    Vector grad(lay.total, 0.0);
    double* G = grad.data();
    const double inv_b = 1.0 / static_cast<double>(B);

    // Head, per sample until BN3.
    std::vector<Vector> d_b3(B, Vector(a.hidden, 0.0));
    for (std::size_t b = 0; b < B; ++b) {
        auto& t = tr[b];
        Vector dlogits = t.probs;
        dlogits[ys[b]] -= 1.0;
        for (auto& v : dlogits) v *= inv_b;
        kernels::dense_backward(net.at(lay.fc2_w), t.b3.data(), dlogits.data(), a.hidden, a.classes,
                                G + lay.fc2_w.offset, G + lay.fc2_b.offset, d_b3[b].data());
    }
    std::vector<Vector> d_hd(B, Vector(a.hidden));
    detail::bn_backward(tr, &ForwardTrace::n3, d_b3, a.hidden, 1, net.at(lay.bn3_g), stats[2].var, batch_bn,
                        G + lay.bn3_g.offset, G + lay.bn3_b.offset, d_hd);
    std::vector<Vector> d_b2(B, Vector(a.channels_b, 0.0));
    for (std::size_t b = 0; b < B; ++b) {
        auto& t = tr[b];
        Vector dz(a.hidden);
        for (std::size_t j = 0; j < a.hidden; ++j) {
            double v = d_hd[b][j];
            if (!t.keep.empty()) v = t.keep[j] ? v * keep_scale : 0.0;
            dz[j] = t.z1[j] > 0.0 ? v : 0.0;
        }
        kernels::dense_backward(net.at(lay.fc1_w), t.b2.data(), dz.data(), a.channels_b, a.hidden,
                                G + lay.fc1_w.offset, G + lay.fc1_b.offset, d_b2[b].data());
    }
    std::vector<Vector> d_g(B, Vector(a.channels_b));
    detail::bn_backward(tr, &ForwardTrace::n2, d_b2, a.channels_b, 1, net.at(lay.bn2_g), stats[1].var, batch_bn,
                        G + lay.bn2_g.offset, G + lay.bn2_b.offset, d_g);

    // Conv stack back to BN1 output.
    std::vector<Vector> d_b1(B, Vector(a.channels_a * a.len_pool(), 0.0));
    Vector d_a4(a.channels_b * a.len4()), d_a3(a.channels_b * a.len3());
    for (std::size_t b = 0; b < B; ++b) {
        auto& t = tr[b];
        std::fill(d_a4.begin(), d_a4.end(), 0.0);
        for (std::size_t c = 0; c < a.channels_b; ++c) {
            const std::size_t idx = c * a.len4() + t.g_arg[c];
            if (t.a4[idx] > 0.0) d_a4[idx] = d_g[b][c];
        }
        std::fill(d_a3.begin(), d_a3.end(), 0.0);
        kernels::conv3_backward_sparse(t.a3.data(), a.channels_b, a.len3(), net.at(lay.conv4_w), d_a4.data(),
                                       a.channels_b, a.len4(), a.len4(), G + lay.conv4_w.offset,
                                       G + lay.conv4_b.offset, d_a3.data());
        for (std::size_t i = 0; i < d_a3.size(); ++i)
            if (!(t.a3[i] > 0.0)) d_a3[i] = 0.0;
        kernels::conv3_backward_sparse(t.b1.data(), a.channels_a, a.len_pool(), net.at(lay.conv3_w), d_a3.data(),
                                       a.channels_b, a.len3(), a.len3(), G + lay.conv3_w.offset,
                                       G + lay.conv3_b.offset, d_b1[b].data());
    }
    std::vector<Vector> d_p1(B, Vector(a.channels_a * a.len_pool()));
    detail::bn_backward(tr, &ForwardTrace::n1, d_b1, a.channels_a, a.len_pool(), net.at(lay.bn1_g), stats[0].var,
                        batch_bn, G + lay.bn1_g.offset, G + lay.bn1_b.offset, d_p1);

    Vector d_a2(a.channels_a * a.len2()), d_a1(a.channels_a * a.len1());
    for (std::size_t b = 0; b < B; ++b) {
        auto& t = tr[b];
        std::fill(d_a2.begin(), d_a2.end(), 0.0);
        for (std::size_t c = 0; c < a.channels_a; ++c)
            for (std::size_t k = 0; k < a.len_pool(); ++k)
                d_a2[c * a.len2() + t.p1_arg[c * a.len_pool() + k]] += d_p1[b][c * a.len_pool() + k];
        for (std::size_t i = 0; i < d_a2.size(); ++i)
            if (!(t.a2[i] > 0.0)) d_a2[i] = 0.0;
        std::fill(d_a1.begin(), d_a1.end(), 0.0);
        kernels::conv3_backward(t.a1.data(), a.channels_a, a.len1(), net.at(lay.conv2_w), d_a2.data(), a.channels_a,
                                a.len2(), a.len2(), G + lay.conv2_w.offset, G + lay.conv2_b.offset, d_a1.data());
        for (std::size_t i = 0; i < d_a1.size(); ++i)
            if (!(t.a1[i] > 0.0)) d_a1[i] = 0.0;
        kernels::conv3_backward(xs[b]->data(), 1, a.input_length, net.at(lay.conv1_w), d_a1.data(), a.channels_a,
                                a.len1(), a.len1(), G + lay.conv1_w.offset, G + lay.conv1_b.offset, nullptr);
    }
    res.grad = std::move(grad);
    return res;
}

/// Single-sample forward in any mode. train uses batch-of-one statistics;
/// dropout masks (train / eval_dropout) come from rng.
inline ForwardTrace forward(const NetworkParams& net, std::span<const double> x, Mode mode, Rng& rng) {
    if (mode == Mode::eval) return forward(net, x, DropoutMask{});
    if (mode == Mode::eval_dropout)
        return forward(net, x, DropoutMask::sample(net.arch.hidden, net.arch.dropout_p, rng));
    const Vector xv(x.begin(), x.end());
    const Vector* ptr = &xv;
    const std::size_t label = 0;
    // Re-run through the batch path to get batch-statistics BN.
    auto r = compute_batch(net, std::span<const Vector* const>(&ptr, 1), std::span<const std::size_t>(&label, 1), mode,
                           rng, false);
    ForwardTrace t;
    t.mode = mode;
    t.probs = r.probs.front();
    return t;
}

struct Prediction {
    Vector probs;
    std::size_t label = 0;
};

inline Prediction predict(const NetworkParams& net, std::span<const double> x) {
    auto t = forward(net, x, DropoutMask{});
    return {t.probs, argmax(t.probs)};
}

// ---------------------------------------------------------------------------
// Training

enum class Optimiser { adam, sgd_momentum };

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;
    Optimiser optimiser = Optimiser::adam;
    double weight_decay = 0.0;
    double dropout_p = 0.2;
    std::size_t patience = 8;  // epochs without validation improvement before stopping
    std::uint64_t seed = 0;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
        if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout_p must lie in [0, 1)");
        if (batch_size == 0 || epochs == 0) throw ConfigError("batch_size and epochs must be positive");
    }
};

struct LabelledSet {
    std::vector<const Vector*> inputs;
    std::vector<std::size_t> labels;

    std::size_t size() const { return inputs.size(); }
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_acc = 0.0;
};

struct TrainResult {
    NetworkParams params;
    std::vector<EpochLog> log;
    std::size_t best_epoch = 0;
};

inline double accuracy(const NetworkParams& net, const LabelledSet& data) {
    if (data.size() == 0) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < data.size(); ++i)
        if (predict(net, *data.inputs[i]).label == data.labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

class Adam {
public:
    Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : m_(n, 0.0), v_(n, 0.0), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(Vector& theta, const Vector& grad) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
            v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
            theta[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
        }
    }

private:
    Vector m_, v_;
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
};

class SgdMomentum {
public:
    SgdMomentum(std::size_t n, double lr, double momentum = 0.9) : v_(n, 0.0), lr_(lr), mu_(momentum) {}

    void step(Vector& theta, const Vector& grad) {
        for (std::size_t i = 0; i < theta.size(); ++i) {
            v_[i] = mu_ * v_[i] + grad[i];
            theta[i] -= lr_ * v_[i];
        }
    }

private:
    Vector v_;
    double lr_, mu_;
};

inline void update_running(NetworkParams& net, const BatchResult& r) {
    for (std::size_t k = 0; k < 3; ++k) {
        const double n = static_cast<double>(r.stat_counts[k]);
        const double unbias = n > 1.0 ? n / (n - 1.0) : 1.0;
        auto& run = net.running[k];
        for (std::size_t c = 0; c < run.mean.size(); ++c) {
            run.mean[c] = (1.0 - kBnMomentum) * run.mean[c] + kBnMomentum * r.batch_stats[k].mean[c];
            run.var[c] = (1.0 - kBnMomentum) * run.var[c] + kBnMomentum * r.batch_stats[k].var[c] * unbias;
        }
    }
}

/// Minibatch training with per-epoch validation. The returned parameters are
/// those of the best validation epoch. Deterministic given config.seed.
inline TrainResult train(const Architecture& arch_in, const LabelledSet& train_set, const LabelledSet& val_set,
                         const TrainConfig& config, const std::function<void(const EpochLog&)>& on_epoch = {}) {
    config.validate();
    if (train_set.size() == 0) throw ConfigError("training split is empty");
    Architecture arch = arch_in;
    arch.dropout_p = config.dropout_p;
    NetworkParams net = initialize(arch, derive_seed(config.seed, 1));
    const std::size_t n = train_set.size();

    std::optional<Adam> adam;
    std::optional<SgdMomentum> sgd;
    if (config.optimiser == Optimiser::adam)
        adam.emplace(net.theta.size(), config.learning_rate);
    else
        sgd.emplace(net.theta.size(), config.learning_rate);

    TrainResult result;
    result.params = net;
    double best_acc = -1.0;
    std::size_t since_best = 0;
    std::vector<std::size_t> order(n);
    std::vector<const Vector*> bx;
    std::vector<std::size_t> by;

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(derive_seed(config.seed, 2, epoch));
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        Rng dropout_rng(derive_seed(config.seed, 3, epoch));

        double loss_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < n; start += config.batch_size) {
            const std::size_t end = std::min(n, start + config.batch_size);
            if (end - start < 2 && n >= 2) continue;  // batch-stat BN needs two samples
            bx.clear();
            by.clear();
            for (std::size_t i = start; i < end; ++i) {
                bx.push_back(train_set.inputs[order[i]]);
                by.push_back(train_set.labels[order[i]]);
            }
            auto r = compute_batch(net, bx, by, Mode::train, dropout_rng, true);
            if (!std::isfinite(r.loss))
                throw NumericError("training diverged (loss is not finite) at epoch " + std::to_string(epoch) +
                                   ", seed " + std::to_string(config.seed));
            if (config.weight_decay > 0.0)
                for (std::size_t i = 0; i < r.grad.size(); ++i) r.grad[i] += config.weight_decay * net.theta[i];
            if (adam)
                adam->step(net.theta, r.grad);
            else
                sgd->step(net.theta, r.grad);
            update_running(net, r);
            loss_sum += r.loss * static_cast<double>(end - start);
            seen += end - start;
        }
        EpochLog log{epoch, seen ? loss_sum / static_cast<double>(seen) : 0.0,
                     val_set.size() ? accuracy(net, val_set) : accuracy(net, train_set)};
        result.log.push_back(log);
        if (on_epoch) on_epoch(log);
        if (log.val_acc > best_acc) {
            best_acc = log.val_acc;
            result.params = net;
            result.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= config.patience) {
            break;
        }
        if (best_acc >= 1.0) break;
    }
    return result;
}

inline void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "epoch,train_loss,val_acc\n";
    char buf[128];
    for (const auto& e : log) {
        std::snprintf(buf, sizeof buf, "%zu,%.8f,%.6f\n", e.epoch, e.train_loss, e.val_acc);
        out << buf;
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: "UXCK", version, architecture hash, param count, architecture
// fields, then theta and BN running stats as little-endian f32.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, const NetworkParams& net) {
    binio::Writer out(path);
    out.put_bytes("UXCK");
    out.put<std::uint32_t>(kCheckpointVersion);
    out.put<std::uint64_t>(net.arch.hash());
    out.put<std::uint32_t>(static_cast<std::uint32_t>(net.theta.size()));
    for (std::size_t v : {net.arch.input_length, net.arch.channels_a, net.arch.channels_b, net.arch.hidden,
                          net.arch.classes})
        out.put<std::uint32_t>(static_cast<std::uint32_t>(v));
    out.put<double>(net.arch.dropout_p);
    out.put_f32s(net.theta);
    for (const auto& s : net.running) {
        out.put_f32s(s.mean);
        out.put_f32s(s.var);
    }
    out.close();
}

inline NetworkParams load_checkpoint(const std::filesystem::path& path) {
    binio::Reader in(path);
    in.expect_magic("UXCK");
    const auto version = in.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version in " + path.string());
    const auto hash = in.get<std::uint64_t>();
    const auto count = in.get<std::uint32_t>();
    Architecture a;
    a.input_length = in.get<std::uint32_t>();
    a.channels_a = in.get<std::uint32_t>();
    a.channels_b = in.get<std::uint32_t>();
    a.hidden = in.get<std::uint32_t>();
    a.classes = in.get<std::uint32_t>();
    a.dropout_p = in.get<double>();
    if (a.hash() != hash) throw IoError("architecture hash mismatch in " + path.string());
    NetworkParams net = zero_network(a);
    if (net.theta.size() != count) throw IoError("parameter count mismatch in " + path.string());
    net.theta = in.get_f32s(count);
    for (auto& s : net.running) {
        s.mean = in.get_f32s(s.mean.size());
        s.var = in.get_f32s(s.var.size());
    }
    return net;
}

/// Rounds theta and running stats to the checkpoint precision, so that
/// load(save(net)) == net.
inline NetworkParams quantize(NetworkParams net) {
    for (auto& v : net.theta) v = to_f32(v);
    for (auto& s : net.running) {
        for (auto& v : s.mean) v = to_f32(v);
        for (auto& v : s.var) v = to_f32(v);
    }
    return net;
}

}  // namespace uaxai::net
