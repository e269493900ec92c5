#pragma once

// Synthetic power-quality-disturbance waveforms with exact disturbance
// components and epsilon ground-truth masks.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "uaxai/binio.hpp"
#include "uaxai/common.hpp"

namespace uaxai {

enum class DisturbanceClass : std::uint16_t {
    normal = 0,
    sag,
    swell,
    interruption,
    harmonics,
    flicker,
    oscillatory_transient,
    impulsive_transient,
    notch,
    spike,
    flicker_harmonics,
    flicker_sag,
    flicker_swell,
    interruption_harmonics,
    sag_harmonics,
    swell_harmonics,
};

inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "normal",         "sag",   "swell",         "interruption",  "harmonics",
    "flicker",        "oscillatory_transient",  "impulsive_transient",
    "notch",          "spike", "flicker+harmonics", "flicker+sag", "flicker+swell",
    "interruption+harmonics", "sag+harmonics",  "swell+harmonics",
};

inline std::string_view class_name(DisturbanceClass c) { return kClassNames.at(static_cast<std::size_t>(c)); }

inline DisturbanceClass class_from_id(int id) {
    if (id < 0 || id >= static_cast<int>(kNumClasses))
        throw ConfigError("invalid class id " + std::to_string(id));
    return static_cast<DisturbanceClass>(id);
}

inline DisturbanceClass class_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kClassNames.size(); ++i)
        if (kClassNames[i] == name) return static_cast<DisturbanceClass>(i);
    throw ConfigError("unknown class name '" + std::string(name) + "'");
}

struct SignalConfig {
    std::size_t n_samples = 640;
    std::size_t cycles = 10;
    double amplitude = 1.0;
    double snr_db = 40.0;
    // Mask threshold relative to amplitude; see ground_truth_mask.
    double epsilon = 1e-5;

    std::size_t samples_per_cycle() const { return n_samples / cycles; }
    double omega() const { return 2.0 * std::numbers::pi * static_cast<double>(cycles) / static_cast<double>(n_samples); }

    void validate() const {
        if (cycles == 0 || n_samples == 0 || n_samples % cycles != 0)
            throw ConfigError("n_samples must be a positive multiple of cycles");
        if (!(amplitude > 0.0)) throw ConfigError("amplitude must be positive");
        if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
        if (!std::isfinite(snr_db)) throw ConfigError("snr_db must be finite");
    }
};

// Parameter groups. A class reads only the groups of its constituents; the
// rest stay zero.
struct EventParams {  // sag / swell / interruption
    double magnitude = 0.0;
    std::size_t start = 0;
    std::size_t end = 0;
};

struct HarmonicParams {
    double a3 = 0.0, a5 = 0.0, a7 = 0.0;
};

struct FlickerParams {
    double amplitude = 0.0;
    double ratio = 0.0;  // envelope frequency / fundamental
};

struct OscillatoryParams {
    double magnitude = 0.0;
    double tau = 1.0;            // samples
    double ring_frequency = 0.0; // radians per sample
    std::size_t start = 0;
    std::size_t end = 0;
};

struct ImpulseParams {
    double magnitude = 0.0;
    std::size_t start = 0;
    std::size_t width = 0;
};

struct PulseTrainParams {  // notch / spike
    std::size_t count = 0;
    std::size_t width = 0;
    std::size_t first = 0;
    std::size_t spacing = 0;
    double depth = 0.0;
};

struct DisturbanceParams {
    DisturbanceClass cls = DisturbanceClass::normal;
    double phase = 0.0;
    EventParams event;
    HarmonicParams harmonics;
    FlickerParams flicker;
    OscillatoryParams oscillatory;
    ImpulseParams impulse;
    PulseTrainParams pulses;

    static constexpr std::size_t kWidth = 24;

    // Fixed-width real encoding used by the dataset format.
    std::array<double, kWidth> to_array() const {
        return {phase,
                event.magnitude,
                static_cast<double>(event.start),
                static_cast<double>(event.end),
                harmonics.a3,
                harmonics.a5,
                harmonics.a7,
                flicker.amplitude,
                flicker.ratio,
                oscillatory.magnitude,
                oscillatory.tau,
                oscillatory.ring_frequency,
                static_cast<double>(oscillatory.start),
                static_cast<double>(oscillatory.end),
                impulse.magnitude,
                static_cast<double>(impulse.start),
                static_cast<double>(impulse.width),
                static_cast<double>(pulses.count),
                static_cast<double>(pulses.width),
                static_cast<double>(pulses.first),
                static_cast<double>(pulses.spacing),
                pulses.depth,
                0.0,
                0.0};
    }

    static DisturbanceParams from_array(DisturbanceClass cls, const std::array<double, kWidth>& a) {
        auto idx = [](double v) { return static_cast<std::size_t>(std::llround(v)); };
        DisturbanceParams p;
        p.cls = cls;
        p.phase = a[0];
        p.event = {a[1], idx(a[2]), idx(a[3])};
        p.harmonics = {a[4], a[5], a[6]};
        p.flicker = {a[7], a[8]};
        p.oscillatory = {a[9], a[10], a[11], idx(a[12]), idx(a[13])};
        p.impulse = {a[14], idx(a[15]), idx(a[16])};
        p.pulses = {idx(a[17]), idx(a[18]), idx(a[19]), idx(a[20]), a[21]};
        return p;
    }
};

struct Waveform {
    Vector x;      // observed
    Vector x0;     // reference sinusoid
    Vector d;      // disturbance component
    Vector noise;  // x - x0 - d
    DisturbanceClass label = DisturbanceClass::normal;
    DisturbanceParams params;
    std::uint32_t split_id = 0;
    std::uint32_t index = 0;
    // Ingested recording: no label, no reference, no disturbance component.
    bool external = false;
};

struct GroundTruthMask {
    std::vector<std::uint8_t> mask;
    std::vector<std::size_t> indices;  // 0-based, sorted

    std::size_t length() const { return indices.size(); }
};

// Element i holds A*sin(omega*i + phase).
inline Vector reference_signal(const SignalConfig& config, double phase) {
    config.validate();
    const double w = config.omega();
    Vector out(config.n_samples);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = config.amplitude * std::sin(w * static_cast<double>(i) + phase);
    return out;
}

namespace detail {

enum Component : unsigned {
    kSag = 1u << 0,
    kSwell = 1u << 1,
    kInterruption = 1u << 2,
    kHarmonics = 1u << 3,
    kFlicker = 1u << 4,
    kOscillatory = 1u << 5,
    kImpulse = 1u << 6,
    kNotch = 1u << 7,
    kSpike = 1u << 8,
};

inline unsigned components_of(DisturbanceClass c) {
    using D = DisturbanceClass;
    switch (c) {
        case D::normal: return 0;
        case D::sag: return kSag;
        case D::swell: return kSwell;
        case D::interruption: return kInterruption;
        case D::harmonics: return kHarmonics;
        case D::flicker: return kFlicker;
        case D::oscillatory_transient: return kOscillatory;
        case D::impulsive_transient: return kImpulse;
        case D::notch: return kNotch;
        case D::spike: return kSpike;
        case D::flicker_harmonics: return kFlicker | kHarmonics;
        case D::flicker_sag: return kFlicker | kSag;
        case D::flicker_swell: return kFlicker | kSwell;
        case D::interruption_harmonics: return kInterruption | kHarmonics;
        case D::sag_harmonics: return kSag | kHarmonics;
        case D::swell_harmonics: return kSwell | kHarmonics;
    }
    throw ConfigError("invalid class id " + std::to_string(static_cast<int>(c)));
}

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline void check_interval(std::size_t start, std::size_t end, std::size_t n, const char* what) {
    if (!(start < end && end <= n)) throw ConfigError(std::string(what) + ": interval out of range");
}

}  // namespace detail

/// Disturbance component d for the given parameters, relative to the
/// reference x0. Composite classes sum their constituents.
inline Vector disturbance_component(const DisturbanceParams& p, const Vector& x0, const SignalConfig& config) {
    using namespace detail;
    const unsigned parts = components_of(p.cls);
    const std::size_t n = x0.size();
    const double w = config.omega();
    const double A = config.amplitude;
    Vector d(n, 0.0);

    auto event = [&](double scale) {
        check_interval(p.event.start, p.event.end, n, "event");
        for (std::size_t i = p.event.start; i < p.event.end; ++i) d[i] += scale * p.event.magnitude * x0[i];
    };
    if (parts & kSag) event(-1.0);
    if (parts & kSwell) event(+1.0);
    if (parts & kInterruption) event(-1.0);
    if (parts & kHarmonics) {
        const auto& h = p.harmonics;
        for (std::size_t i = 0; i < n; ++i) {
            const double arg = w * static_cast<double>(i) + p.phase;
            d[i] += A * (h.a3 * std::sin(3.0 * arg) + h.a5 * std::sin(5.0 * arg) + h.a7 * std::sin(7.0 * arg));
        }
    }
    if (parts & kFlicker) {
        for (std::size_t i = 0; i < n; ++i)
            d[i] += p.flicker.amplitude * std::sin(p.flicker.ratio * w * static_cast<double>(i)) * x0[i];
    }
    if (parts & kOscillatory) {
        const auto& o = p.oscillatory;
        check_interval(o.start, o.end, n, "oscillatory transient");
        for (std::size_t i = o.start; i < o.end; ++i) {
            const double k = static_cast<double>(i - o.start);
            d[i] += A * o.magnitude * std::exp(-k / o.tau) * std::sin(o.ring_frequency * k);
        }
    }
    if (parts & kImpulse) {
        const auto& im = p.impulse;
        check_interval(im.start, im.start + im.width, n, "impulsive transient");
        const double decay = static_cast<double>(im.width) / 3.0;
        for (std::size_t i = im.start; i < im.start + im.width; ++i)
            d[i] += A * im.magnitude * std::exp(-static_cast<double>(i - im.start) / decay);
    }
    if (parts & (kNotch | kSpike)) {
        const auto& pt = p.pulses;
        const double polarity = (parts & kNotch) ? -1.0 : 1.0;
        for (std::size_t k = 0; k < pt.count; ++k) {
            const std::size_t s = pt.first + k * pt.spacing;
            check_interval(s, s + pt.width, n, "pulse train");
            for (std::size_t i = s; i < s + pt.width; ++i) d[i] += polarity * A * pt.depth * sign(x0[i]);
        }
    }
    return d;
}

/// Draws parameters uniformly from the generator's declared ranges.
inline DisturbanceParams sample_params(DisturbanceClass cls, const SignalConfig& config, Rng& rng) {
    using namespace detail;
    config.validate();
    const unsigned parts = components_of(cls);
    const auto n = static_cast<std::int64_t>(config.n_samples);
    const auto spc = static_cast<std::int64_t>(config.samples_per_cycle());
    const double w = config.omega();

    DisturbanceParams p;
    p.cls = cls;
    p.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

    auto interval = [&](std::int64_t min_len, std::int64_t max_len) {
        max_len = std::min(max_len, n);
        min_len = std::clamp<std::int64_t>(min_len, 1, max_len);
        const std::int64_t len = rng.integer(min_len, max_len);
        const std::int64_t start = rng.integer(0, n - len);
        return std::pair<std::size_t, std::size_t>{static_cast<std::size_t>(start),
                                                   static_cast<std::size_t>(start + len)};
    };

    if (parts & (kSag | kSwell | kInterruption)) {
        if (parts & kSag) p.event.magnitude = rng.uniform(0.1, 0.9);
        if (parts & kSwell) p.event.magnitude = rng.uniform(0.1, 0.8);
        if (parts & kInterruption) p.event.magnitude = rng.uniform(0.9, 1.0);
        std::tie(p.event.start, p.event.end) = interval(spc, 9 * spc);
    }
    if (parts & kHarmonics) {
        p.harmonics = {rng.uniform(0.05, 0.15), rng.uniform(0.05, 0.15), rng.uniform(0.05, 0.15)};
    }
    if (parts & kFlicker) {
        p.flicker.amplitude = rng.uniform(0.08, 0.2);
        p.flicker.ratio = rng.uniform(0.1, 0.3);
    }
    if (parts & kOscillatory) {
        auto& o = p.oscillatory;
        o.magnitude = rng.uniform(0.5, 0.9);
        o.ring_frequency = rng.uniform(6.0 * w, 12.0 * w);
        const auto min_len = std::max<std::int64_t>(3, std::llround(0.05 * static_cast<double>(spc)));
        std::tie(o.start, o.end) = interval(min_len, 3 * spc);
        const double len = static_cast<double>(o.end - o.start);
        o.tau = std::max(1.0, rng.uniform(0.2 * len, 0.5 * len));
    }
    if (parts & kImpulse) {
        p.impulse.magnitude = rng.uniform(0.6, 1.2);
        p.impulse.width = static_cast<std::size_t>(rng.integer(2, 8));
        p.impulse.start = static_cast<std::size_t>(rng.integer(0, n - static_cast<std::int64_t>(p.impulse.width)));
    }
    if (parts & (kNotch | kSpike)) {
        auto& pt = p.pulses;
        pt.count = static_cast<std::size_t>(rng.integer(1, 6));
        pt.width = static_cast<std::size_t>(rng.integer(2, 8));
        pt.depth = rng.uniform(0.1, 0.4);
        pt.spacing = static_cast<std::size_t>(spc / 2);
        const auto span = static_cast<std::int64_t>((pt.count - 1) * pt.spacing + pt.width);
        pt.first = static_cast<std::size_t>(rng.integer(0, n - span));
    }
    return p;
}

inline double noise_stddev(const SignalConfig& config) {
    const double signal_power = 0.5 * config.amplitude * config.amplitude;
    return std::sqrt(signal_power / std::pow(10.0, config.snr_db / 10.0));
}

/// x = x0 + d + noise, with i.i.d. Gaussian noise at snr_db relative to the
/// reference power A^2/2.
inline Waveform synthesize(DisturbanceClass cls, const DisturbanceParams& params, const SignalConfig& config, Rng& rng) {
    config.validate();
    if (static_cast<std::size_t>(cls) >= kNumClasses) throw ConfigError("invalid class id");
    if (params.cls != cls) throw ConfigError("parameter record belongs to a different class");
    Waveform w;
    w.label = cls;
    w.params = params;
    w.x0 = reference_signal(config, params.phase);
    w.d = disturbance_component(params, w.x0, config);
    const double sigma = noise_stddev(config);
    w.noise.resize(config.n_samples);
    for (auto& v : w.noise) v = sigma * rng.normal();
    w.x.resize(config.n_samples);
    for (std::size_t i = 0; i < w.x.size(); ++i) w.x[i] = w.x0[i] + w.d[i] + w.noise[i];
    return w;
}

/// 1 where |d| exceeds epsilon (absolute, not relative).
inline GroundTruthMask ground_truth_mask(const Vector& d, double epsilon) {
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
    GroundTruthMask m;
    m.mask.resize(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        m.mask[i] = std::abs(d[i]) > epsilon ? 1 : 0;
        if (m.mask[i]) m.indices.push_back(i);
    }
    return m;
}

inline GroundTruthMask ground_truth_mask(const Waveform& w, double epsilon) { return ground_truth_mask(w.d, epsilon); }

inline GroundTruthMask ground_truth_mask(const Waveform& w, const SignalConfig& config) {
    return ground_truth_mask(w.d, config.epsilon * config.amplitude);
}

// ---------------------------------------------------------------------------
// Dataset generation and storage

struct SplitCounts {
    std::array<std::size_t, kNumClasses> per_class{};

    static SplitCounts uniform(std::size_t n) {
        SplitCounts c;
        c.per_class.fill(n);
        return c;
    }
    std::size_t total() const {
        std::size_t t = 0;
        for (auto v : per_class) t += v;
        return t;
    }
};

struct Split {
    std::string name;
    std::uint32_t id = 0;
    std::vector<Waveform> records;
};

struct Dataset {
    SignalConfig config;
    std::uint64_t seed = 0;
    std::vector<Split> splits;

    const Split& split(std::string_view name) const {
        for (const auto& s : splits)
            if (s.name == name) return s;
        throw ConfigError("dataset has no split '" + std::string(name) + "'");
    }
    std::vector<const Split*> test_splits() const {
        std::vector<const Split*> out;
        for (const auto& s : splits)
            if (s.name.rfind("test_", 0) == 0) out.push_back(&s);
        return out;
    }
};

struct DatasetLayout {
    SplitCounts train = SplitCounts::uniform(1000);
    SplitCounts val = SplitCounts::uniform(100);
    SplitCounts test = SplitCounts::uniform(100);
    std::size_t n_test_splits = 5;
};

/// Instances are generated class-major; each instance draws from its own
/// derived stream so the result does not depend on generation order.
inline Split generate_split(const std::string& name, std::uint32_t split_id, const SplitCounts& counts,
                            const SignalConfig& config, std::uint64_t seed) {
    Split s;
    s.name = name;
    s.id = split_id;
    s.records.reserve(counts.total());
    std::uint32_t index = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        const auto cls = static_cast<DisturbanceClass>(c);
        for (std::size_t k = 0; k < counts.per_class[c]; ++k) {
            Rng rng(derive_seed(seed, split_id, c, k));
            const auto params = sample_params(cls, config, rng);
            Waveform w = synthesize(cls, params, config, rng);
            w.split_id = split_id;
            w.index = index++;
            s.records.push_back(std::move(w));
        }
    }
    return s;
}

inline Dataset generate_dataset(const SignalConfig& config, const DatasetLayout& layout, std::uint64_t seed) {
    config.validate();
    if (layout.train.total() == 0 || layout.test.total() == 0 || layout.n_test_splits == 0)
        throw ConfigError("dataset counts must be positive");
    Dataset ds;
    ds.config = config;
    ds.seed = seed;
    ds.splits.push_back(generate_split("train", 0, layout.train, config, seed));
    if (layout.val.total() > 0) ds.splits.push_back(generate_split("val", 1, layout.val, config, seed));
    for (std::size_t k = 0; k < layout.n_test_splits; ++k)
        ds.splits.push_back(generate_split("test_" + std::to_string(k), static_cast<std::uint32_t>(2 + k),
                                           layout.test, config, seed));
    return ds;
}

inline constexpr std::uint32_t kDatasetFormatVersion = 1;
// Class id stored for external (unlabelled) records.
inline constexpr std::uint16_t kExternalClassId = 0xFFFF;

/// Split file: "PQDS", version, N, n_records, split id, signal config, then
/// per record class id (u16), params (f64 x 24), x, x0, d (f32 x N each).
/// Everything little-endian.
inline void write_split(const std::filesystem::path& path, const Split& split, const SignalConfig& config) {
    binio::Writer out(path);
    out.put_bytes("PQDS");
    out.put<std::uint32_t>(kDatasetFormatVersion);
    out.put<std::uint32_t>(static_cast<std::uint32_t>(config.n_samples));
    out.put<std::uint32_t>(static_cast<std::uint32_t>(split.records.size()));
    out.put<std::uint32_t>(split.id);
    out.put_string(split.name);
    out.put<std::uint32_t>(static_cast<std::uint32_t>(config.cycles));
    out.put<double>(config.amplitude);
    out.put<double>(config.snr_db);
    out.put<double>(config.epsilon);
    for (const auto& w : split.records) {
        out.put<std::uint16_t>(w.external ? kExternalClassId : static_cast<std::uint16_t>(w.label));
        for (double v : w.params.to_array()) out.put<double>(v);
        out.put_f32s(w.x);
        out.put_f32s(w.x0);
        out.put_f32s(w.d);
    }
    out.close();
}

inline Split read_split(const std::filesystem::path& path, SignalConfig* config_out = nullptr) {
    binio::Reader in(path);
    in.expect_magic("PQDS");
    const auto version = in.get<std::uint32_t>();
    if (version != kDatasetFormatVersion)
        throw IoError("unsupported dataset format version " + std::to_string(version) + " in " + path.string());
    SignalConfig config;
    config.n_samples = in.get<std::uint32_t>();
    const auto n_records = in.get<std::uint32_t>();
    Split s;
    s.id = in.get<std::uint32_t>();
    s.name = in.get_string();
    config.cycles = in.get<std::uint32_t>();
    config.amplitude = in.get<double>();
    config.snr_db = in.get<double>();
    config.epsilon = in.get<double>();
    s.records.reserve(n_records);
    for (std::uint32_t r = 0; r < n_records; ++r) {
        Waveform w;
        const auto id = in.get<std::uint16_t>();
        w.external = id == kExternalClassId;
        w.label = w.external ? DisturbanceClass::normal : class_from_id(id);
        std::array<double, DisturbanceParams::kWidth> raw{};
        for (auto& v : raw) v = in.get<double>();
        w.params = DisturbanceParams::from_array(w.label, raw);
        w.x = in.get_f32s(config.n_samples);
        w.x0 = in.get_f32s(config.n_samples);
        w.d = in.get_f32s(config.n_samples);
        w.noise.resize(config.n_samples);
        for (std::size_t i = 0; i < w.noise.size(); ++i) w.noise[i] = w.x[i] - w.x0[i] - w.d[i];
        w.split_id = s.id;
        w.index = r;
        s.records.push_back(std::move(w));
    }
    if (config_out) *config_out = config;
    return s;
}

inline nlohmann::json params_to_json(const DisturbanceParams& p) {
    const auto a = p.to_array();
    static constexpr std::array<const char*, DisturbanceParams::kWidth> keys = {
        "phase",       "event_magnitude", "event_start",   "event_end",   "a3",          "a5",
        "a7",          "flicker_amplitude", "flicker_ratio", "osc_magnitude", "osc_tau",   "osc_ring_frequency",
        "osc_start",   "osc_end",         "impulse_magnitude", "impulse_start", "impulse_width", "pulse_count",
        "pulse_width", "pulse_first",     "pulse_spacing", "pulse_depth", "reserved_0",  "reserved_1"};
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t i = 0; i < a.size(); ++i) j[keys[i]] = a[i];
    return j;
}

/// JSON-lines mirror of write_split: a header line, then one line per record.
inline void write_split_jsonl(const std::filesystem::path& path, const Split& split, const SignalConfig& config) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    auto f32 = [](const Vector& v) {
        std::vector<float> r(v.size());
        std::transform(v.begin(), v.end(), r.begin(), [](double x) { return static_cast<float>(x); });
        return r;
    };
    nlohmann::json header = {{"format_version", kDatasetFormatVersion},
                             {"n_samples", config.n_samples},
                             {"n_records", split.records.size()},
                             {"split", split.name},
                             {"split_id", split.id},
                             {"cycles", config.cycles},
                             {"amplitude", config.amplitude},
                             {"snr_db", config.snr_db},
                             {"epsilon", config.epsilon}};
    out << header.dump() << '\n';
    for (const auto& w : split.records) {
        nlohmann::json j = {{"index", w.index},
                            {"class_id", w.external ? static_cast<int>(kExternalClassId) : static_cast<int>(w.label)},
                            {"class", w.external ? std::string_view("unlabelled/external") : class_name(w.label)},
                            {"params", params_to_json(w.params)},
                            {"x", f32(w.x)},
                            {"x0", f32(w.x0)},
                            {"d", f32(w.d)}};
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace uaxai
