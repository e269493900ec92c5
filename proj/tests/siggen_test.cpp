#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>

#include "uaxai/siggen.hpp"

using namespace uaxai;
namespace fs = std::filesystem;

namespace {

const std::array<DisturbanceClass, 16> kAll = [] {
    std::array<DisturbanceClass, 16> a{};
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<DisturbanceClass>(i);
    return a;
}();

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

fs::path temp_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("uaxai_siggen_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST(ReferenceSignal, QuarterCycleIsPeak) {
    SignalConfig cfg;
    EXPECT_NEAR(reference_signal(cfg, 0.0)[16], 1.0, 1e-15);
    EXPECT_EQ(reference_signal(cfg, 0.0)[0], 0.0);
}

TEST(ReferenceSignal, CosineAtOrigin) {
    SignalConfig cfg;
    cfg.amplitude = 0.9;
    EXPECT_NEAR(reference_signal(cfg, std::numbers::pi / 2)[0], 0.9, 1e-15);
}

TEST(SignalConfig, RejectsInvalid) {
    SignalConfig cfg;
    cfg.n_samples = 641;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.epsilon = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.amplitude = -1.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Synthesize, NormalHasNoDisturbance) {
    SignalConfig cfg;
    Rng rng(1);
    auto p = sample_params(DisturbanceClass::normal, cfg, rng);
    auto w = synthesize(DisturbanceClass::normal, p, cfg, rng);
    for (double v : w.d) ASSERT_EQ(v, 0.0);
    for (std::size_t i = 0; i < w.x.size(); ++i) ASSERT_EQ(w.x[i], w.x0[i] + w.noise[i]);
    EXPECT_EQ(ground_truth_mask(w, cfg).length(), 0u);
}

TEST(Synthesize, SagIsScaledReferenceOnInterval) {
    SignalConfig cfg;
    DisturbanceParams p;
    p.cls = DisturbanceClass::sag;
    p.event = {0.5, 100, 300};
    Rng rng(2);
    auto w = synthesize(DisturbanceClass::sag, p, cfg, rng);
    for (std::size_t i = 0; i < w.d.size(); ++i) {
        const double expected = (i >= 100 && i < 300) ? -0.5 * w.x0[i] : 0.0;
        ASSERT_DOUBLE_EQ(w.d[i], expected) << i;
    }
}

TEST(Synthesize, HarmonicsFormulaAndNearFullMask) {
    SignalConfig cfg;
    DisturbanceParams p;
    p.cls = DisturbanceClass::harmonics;
    p.harmonics = {0.15, 0.1, 0.05};
    Rng rng(3);
    auto w = synthesize(DisturbanceClass::harmonics, p, cfg, rng);
    const double om = cfg.omega();
    std::size_t above = 0;
    for (std::size_t i = 0; i < w.d.size(); ++i) {
        const double n = static_cast<double>(i);
        const double expected = 0.15 * std::sin(3 * om * n) + 0.1 * std::sin(5 * om * n) + 0.05 * std::sin(7 * om * n);
        ASSERT_NEAR(w.d[i], expected, 1e-12);
        if (std::abs(expected) > cfg.epsilon) ++above;
    }
    const auto mask = ground_truth_mask(w, cfg);
    EXPECT_EQ(mask.length(), above);
    EXPECT_GE(static_cast<double>(mask.length()) / 640.0, 0.9);
}

TEST(Synthesize, InvalidClassIsConfigError) {
    SignalConfig cfg;
    Rng rng(4);
    DisturbanceParams p;
    p.cls = static_cast<DisturbanceClass>(42);
    EXPECT_THROW(synthesize(p.cls, p, cfg, rng), ConfigError);
    EXPECT_THROW(class_from_id(16), ConfigError);
    EXPECT_THROW(class_from_id(-1), ConfigError);
}

TEST(GroundTruthMask, DirectThresholding) {
    Vector d = {0, 0.5, -0.5, 0.01, 0, 0, 0, 0};
    auto m = ground_truth_mask(d, 0.02);
    EXPECT_EQ(m.indices, (std::vector<std::size_t>{1, 2}));  // 1-based {2, 3}
    EXPECT_EQ(m.length(), 2u);
    EXPECT_EQ(m.mask, (std::vector<std::uint8_t>{0, 1, 1, 0, 0, 0, 0, 0}));
    EXPECT_THROW(ground_truth_mask(d, 0.0), ConfigError);
}

TEST(GroundTruthMask, HarmonicFamilyCoversNearlyEverything) {
    SignalConfig cfg;
    for (auto cls : {DisturbanceClass::harmonics, DisturbanceClass::flicker, DisturbanceClass::flicker_harmonics,
                     DisturbanceClass::sag_harmonics, DisturbanceClass::swell_harmonics,
                     DisturbanceClass::interruption_harmonics}) {
        double total = 0.0;
        for (int k = 0; k < 50; ++k) {
            Rng rng(derive_seed(5, k));
            auto w = synthesize(cls, sample_params(cls, cfg, rng), cfg, rng);
            total += static_cast<double>(ground_truth_mask(w, cfg).length()) / 640.0;
        }
        EXPECT_GE(total / 50.0, 0.995) << class_name(cls);
    }
}

// Exact bookkeeping, parameter ranges and mask invariants for every class.
TEST(SiggenProperties, InvariantsHoldForAllClasses) {
    SignalConfig cfg;
    const double eps = cfg.epsilon * cfg.amplitude;
    for (auto cls : kAll) {
        for (int k = 0; k < 40; ++k) {
            Rng rng(derive_seed(6, static_cast<int>(cls), k));
            const auto p = sample_params(cls, cfg, rng);
            const auto w = synthesize(cls, p, cfg, rng);
            ASSERT_EQ(w.x.size(), 640u);
            for (std::size_t i = 0; i < w.x.size(); ++i) ASSERT_EQ(w.x[i], w.x0[i] + w.d[i] + w.noise[i]);

            const bool zero = std::all_of(w.d.begin(), w.d.end(), [](double v) { return v == 0.0; });
            ASSERT_EQ(zero, cls == DisturbanceClass::normal) << class_name(cls);

            const auto mask = ground_truth_mask(w, cfg);
            std::size_t count = 0;
            for (std::size_t i = 0; i < w.d.size(); ++i) {
                ASSERT_EQ(mask.mask[i] == 1, std::abs(w.d[i]) > eps);
                count += mask.mask[i];
            }
            ASSERT_EQ(count, mask.length());

            if (p.event.end > 0) {
                ASSERT_LT(p.event.start, p.event.end);
                ASSERT_LE(p.event.end, 640u);
                const auto len = p.event.end - p.event.start;
                ASSERT_GE(len, 64u);
                ASSERT_LE(len, 576u);
            }
            switch (cls) {
                case DisturbanceClass::sag: ASSERT_TRUE(p.event.magnitude >= 0.1 && p.event.magnitude <= 0.9); break;
                case DisturbanceClass::swell: ASSERT_TRUE(p.event.magnitude >= 0.1 && p.event.magnitude <= 0.8); break;
                case DisturbanceClass::interruption:
                    ASSERT_TRUE(p.event.magnitude >= 0.9 && p.event.magnitude <= 1.0);
                    break;
                case DisturbanceClass::harmonics:
                    for (double a : {p.harmonics.a3, p.harmonics.a5, p.harmonics.a7})
                        ASSERT_TRUE(a >= 0.05 && a <= 0.15);
                    break;
                case DisturbanceClass::flicker:
                    ASSERT_TRUE(p.flicker.amplitude >= 0.08 && p.flicker.amplitude <= 0.2);
                    ASSERT_TRUE(p.flicker.ratio >= 0.1 && p.flicker.ratio <= 0.3);
                    break;
                case DisturbanceClass::oscillatory_transient: {
                    const auto& o = p.oscillatory;
                    ASSERT_TRUE(o.magnitude >= 0.5 && o.magnitude <= 0.9);
                    ASSERT_TRUE(o.ring_frequency >= 6 * cfg.omega() && o.ring_frequency <= 12 * cfg.omega());
                    ASSERT_GE(o.end - o.start, 3u);
                    ASSERT_LE(o.end - o.start, 192u);
                    break;
                }
                case DisturbanceClass::impulsive_transient:
                    ASSERT_LE(p.impulse.width, 8u);
                    ASSERT_GE(p.impulse.width, 2u);
                    break;
                case DisturbanceClass::notch:
                case DisturbanceClass::spike:
                    ASSERT_TRUE(p.pulses.count >= 1 && p.pulses.count <= 6);
                    ASSERT_TRUE(p.pulses.width >= 2 && p.pulses.width <= 8);
                    ASSERT_TRUE(p.pulses.depth >= 0.1 && p.pulses.depth <= 0.4);
                    break;
                default: break;
            }
        }
    }
}

TEST(SiggenProperties, MaskIgnoresNoise) {
    SignalConfig cfg;
    for (auto cls : kAll) {
        Rng rng(derive_seed(7, static_cast<int>(cls)));
        const auto p = sample_params(cls, cfg, rng);
        Rng noise_a(100), noise_b(200);
        const auto wa = synthesize(cls, p, cfg, noise_a);
        const auto wb = synthesize(cls, p, cfg, noise_b);
        ASSERT_NE(wa.x, wb.x);
        ASSERT_EQ(ground_truth_mask(wa, cfg).indices, ground_truth_mask(wb, cfg).indices);
    }
}

TEST(SiggenProperties, EventMasksMatchIntervalBruteForce) {
    SignalConfig cfg;
    const double eps = cfg.epsilon * cfg.amplitude;
    for (auto cls : {DisturbanceClass::sag, DisturbanceClass::swell, DisturbanceClass::interruption}) {
        for (int k = 0; k < 30; ++k) {
            Rng rng(derive_seed(8, static_cast<int>(cls), k));
            const auto p = sample_params(cls, cfg, rng);
            const auto w = synthesize(cls, p, cfg, rng);
            std::vector<std::size_t> expected;
            for (std::size_t i = p.event.start; i < p.event.end; ++i)
                if (std::abs(w.x0[i]) * p.event.magnitude > eps) expected.push_back(i);
            ASSERT_EQ(ground_truth_mask(w, cfg).indices, expected);
        }
    }
}

TEST(SiggenProperties, CompositeIsSumOfConstituents) {
    SignalConfig cfg;
    using D = DisturbanceClass;
    const std::vector<std::tuple<D, D, D>> composites = {
        {D::flicker_harmonics, D::flicker, D::harmonics}, {D::flicker_sag, D::flicker, D::sag},
        {D::flicker_swell, D::flicker, D::swell},         {D::interruption_harmonics, D::interruption, D::harmonics},
        {D::sag_harmonics, D::sag, D::harmonics},         {D::swell_harmonics, D::swell, D::harmonics}};
    for (const auto& [comp, first, second] : composites) {
        Rng rng(derive_seed(9, static_cast<int>(comp)));
        auto p = sample_params(comp, cfg, rng);
        auto pa = p, pb = p;
        pa.cls = first;
        pb.cls = second;
        const auto x0 = reference_signal(cfg, p.phase);
        const auto d = disturbance_component(p, x0, cfg);
        const auto da = disturbance_component(pa, x0, cfg);
        const auto db = disturbance_component(pb, x0, cfg);
        for (std::size_t i = 0; i < d.size(); ++i) ASSERT_NEAR(d[i], da[i] + db[i], 1e-15) << class_name(comp);
    }
}

TEST(SiggenProperties, EmpiricalSnrWithinOneDb) {
    SignalConfig cfg;
    double snr_sum = 0.0;
    constexpr int kInstances = 120;
    for (int k = 0; k < kInstances; ++k) {
        Rng rng(derive_seed(10, k));
        const auto cls = static_cast<DisturbanceClass>(k % 16);
        const auto w = synthesize(cls, sample_params(cls, cfg, rng), cfg, rng);
        double ps = 0.0, pn = 0.0;
        for (std::size_t i = 0; i < w.x.size(); ++i) {
            ps += w.x0[i] * w.x0[i];
            pn += w.noise[i] * w.noise[i];
        }
        snr_sum += 10.0 * std::log10(ps / pn);
    }
    EXPECT_NEAR(snr_sum / kInstances, cfg.snr_db, 1.0);
}

TEST(Dataset, DeterministicFilesAndExactCounts) {
    SignalConfig cfg;
    DatasetLayout layout;
    layout.train = SplitCounts::uniform(3);
    layout.val = SplitCounts::uniform(1);
    layout.test = SplitCounts::uniform(2);
    layout.n_test_splits = 2;
    const auto a = generate_dataset(cfg, layout, 42);
    const auto b = generate_dataset(cfg, layout, 42);
    const auto dir = temp_dir("determinism");
    for (std::size_t s = 0; s < a.splits.size(); ++s) {
        write_split(dir / ("a_" + a.splits[s].name + ".pqd"), a.splits[s], cfg);
        write_split(dir / ("b_" + b.splits[s].name + ".pqd"), b.splits[s], cfg);
        ASSERT_EQ(slurp(dir / ("a_" + a.splits[s].name + ".pqd")), slurp(dir / ("b_" + b.splits[s].name + ".pqd")));
    }
    ASSERT_EQ(a.splits.size(), 4u);
    for (const auto& split : a.splits) {
        std::array<std::size_t, 16> hist{};
        for (const auto& w : split.records) ++hist[static_cast<std::size_t>(w.label)];
        const auto& expect = split.name == "train" ? layout.train : split.name == "val" ? layout.val : layout.test;
        EXPECT_EQ(hist, expect.per_class) << split.name;
    }
    const auto c = generate_dataset(cfg, layout, 43);
    EXPECT_NE(a.splits[0].records[0].x, c.splits[0].records[0].x);
}

TEST(Dataset, FiveSplitsGive7500EvaluatedWaveforms) {
    SignalConfig cfg;
    DatasetLayout layout;
    layout.train = SplitCounts::uniform(1);
    layout.val = SplitCounts{};
    layout.test = SplitCounts::uniform(100);
    const auto ds = generate_dataset(cfg, layout, 1);
    std::size_t evaluated = 0;
    for (const auto* split : ds.test_splits())
        for (const auto& w : split->records) evaluated += w.label != DisturbanceClass::normal;
    EXPECT_EQ(ds.test_splits().size(), 5u);
    EXPECT_EQ(evaluated, 7500u);
}

TEST(Dataset, FileRoundTripPreservesRecords) {
    SignalConfig cfg;
    auto split = generate_split("test_0", 2, SplitCounts::uniform(2), cfg, 11);
    const auto dir = temp_dir("roundtrip");
    write_split(dir / "s.pqd", split, cfg);
    SignalConfig loaded_cfg;
    const auto loaded = read_split(dir / "s.pqd", &loaded_cfg);
    EXPECT_EQ(loaded_cfg.n_samples, cfg.n_samples);
    EXPECT_EQ(loaded_cfg.snr_db, cfg.snr_db);
    EXPECT_EQ(loaded_cfg.epsilon, cfg.epsilon);
    ASSERT_EQ(loaded.records.size(), split.records.size());
    EXPECT_EQ(loaded.name, "test_0");
    for (std::size_t r = 0; r < split.records.size(); ++r) {
        const auto& a = split.records[r];
        const auto& b = loaded.records[r];
        ASSERT_EQ(a.label, b.label);
        ASSERT_EQ(a.params.to_array(), b.params.to_array());
        for (std::size_t i = 0; i < a.x.size(); ++i) {
            ASSERT_EQ(to_f32(a.x[i]), b.x[i]);
            ASSERT_EQ(to_f32(a.d[i]), b.d[i]);
        }
        // The mask survives f32 storage for every class.
        ASSERT_EQ(ground_truth_mask(a, cfg).indices, ground_truth_mask(b, cfg).indices);
    }
    write_split_jsonl(dir / "s.jsonl", split, cfg);
    std::ifstream in(dir / "s.jsonl");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        if (lines > 0) {
            EXPECT_EQ(j["x"].size(), 640u);
        }
        ++lines;
    }
    EXPECT_EQ(lines, split.records.size() + 1);
}

TEST(Dataset, IoFailureNamesPath) {
    SignalConfig cfg;
    Split s;
    try {
        write_split("/nonexistent_dir_uaxai/x.pqd", s, cfg);
        FAIL();
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent_dir_uaxai/x.pqd"), std::string::npos);
    }
    EXPECT_THROW(read_split("/nonexistent_dir_uaxai/y.pqd"), IoError);
}
