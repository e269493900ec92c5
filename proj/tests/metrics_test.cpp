#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "uaxai/metrics.hpp"

using namespace uaxai;
using namespace uaxai::metrics;

namespace {

const Vector kRamp = {0, 1, 2, 3, 0, 0, 0, 0};

// {3, 4, 5} one-based
GroundTruthMask ramp_mask() { return mask_from_indices({2, 3, 4}, 8); }

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Rma, Examples) {
    EXPECT_DOUBLE_EQ(*rma(Vector(640, 1.0), mask_from_indices([] {
                         std::vector<std::size_t> v;
                         for (std::size_t i = 100; i < 420; ++i) v.push_back(i);
                         return v;
                     }(), 640)),
                     0.5);
    EXPECT_EQ(*rma(Vector{0, 0, 2, 3, 0}, mask_from_indices({2, 3}, 5)), 1.0);
    EXPECT_DOUBLE_EQ(*rma(kRamp, ramp_mask()), 5.0 / 6.0);
}

TEST(Rma, UndefinedCasesAreMissing) {
    EXPECT_FALSE(rma(Vector(8, 0.0), ramp_mask()).has_value());
    EXPECT_FALSE(rma(kRamp, mask_from_indices({}, 8)).has_value());
    EXPECT_THROW(rma(Vector{-1, 1, 1, 1, 1, 1, 1, 1}, ramp_mask()), ConfigError);
    EXPECT_THROW(rma(Vector(7, 1.0), ramp_mask()), ShapeError);
}

TEST(TopL, Examples) {
    EXPECT_EQ(top_l(Vector{5, 4, 3, 2, 1}, 3), (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_EQ(top_l(Vector(6, 0.5), 3), (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_EQ(top_l(kRamp, 3), (std::vector<std::size_t>{1, 2, 3}));
    EXPECT_THROW(top_l(kRamp, 9), ConfigError);
    EXPECT_THROW(top_l(kRamp, 0), ConfigError);
}

TEST(Iou, Examples) {
    EXPECT_EQ(*iou(Vector{0, 0, 9, 8, 7, 0, 0, 0}, ramp_mask()), 1.0);
    EXPECT_EQ(*iou(Vector{9, 8, 7, 0, 0, 0, 0, 0}, mask_from_indices({5, 6, 7}, 8)), 0.0);
    EXPECT_EQ(*iou(kRamp, ramp_mask()), 0.5);
    EXPECT_FALSE(iou(kRamp, mask_from_indices({}, 8)).has_value());
}

TEST(MinMax, Examples) {
    EXPECT_EQ(minmax_normalize(Vector{1, 3, 5}), (Vector{0, 0.5, 1}));
    const Vector unit = {0, 0.25, 1, 0.5};
    EXPECT_EQ(minmax_normalize(unit), unit);
    EXPECT_EQ(minmax_normalize(Vector{2, 2, 2}), (Vector{0, 0, 0}));
    Rng rng(1);
    Vector r(20);
    for (auto& v : r) v = rng.uniform();
    Vector affine(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) affine[i] = 2.5 * r[i] + 7.0;
    const auto a = minmax_normalize(r), b = minmax_normalize(affine);
    for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(MetricProperties, ScalingAndMonotoneTransforms) {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t N = 4 + rng.below(60);
        Vector r(N);
        for (auto& v : r) v = rng.uniform();
        std::vector<std::size_t> idx;
        for (std::size_t n = 0; n < N; ++n)
            if (rng.bernoulli(0.3)) idx.push_back(n);
        if (idx.empty()) idx.push_back(0);
        const auto m = mask_from_indices(idx, N);
        Vector twice(N), squared(N);
        for (std::size_t n = 0; n < N; ++n) {
            twice[n] = 2.0 * r[n];
            squared[n] = r[n] * r[n];
        }
        EXPECT_EQ(rma(r, m), rma(twice, m));
        EXPECT_EQ(iou(r, m), iou(squared, m));
        const double a = *rma(r, m), b = *iou(r, m);
        EXPECT_GE(a, 0.0);
        EXPECT_LE(a, 1.0);
        EXPECT_GE(b, 0.0);
        EXPECT_LE(b, 1.0);
        const auto top = top_l(r, m.length());
        EXPECT_EQ(b == 1.0, top == m.indices);
    }
}

TEST(MetricProperties, FullMaskGivesUnitRmaForPositiveMap) {
    std::vector<std::size_t> all(640);
    std::iota(all.begin(), all.end(), 0);
    const auto m = mask_from_indices(all, 640);
    Rng rng(3);
    Vector r(640);
    for (auto& v : r) v = 0.01 + rng.uniform();
    EXPECT_EQ(*rma(r, m), 1.0);
    EXPECT_EQ(*iou(r, m), 1.0);
}

TEST(MetricOracles, ThousandRandomSmallInstancesMatchExactly) {
    const auto rep = uaxai::testing::metric_oracle_suite(1000, 4);
    EXPECT_EQ(rep.instances, 1000u);
    EXPECT_GT(rep.checks, 20000u);
    EXPECT_TRUE(rep.mismatches.empty()) << rep.mismatches.front();
}

TEST(Aggregate, PerSplitMeansThenAcrossSplits) {
    std::vector<EvalRecord> recs = {
        {0, 2, 1, "ensemble", "occlusion", "mean", 0.5, 1.0},  {1, 2, 1, "ensemble", "occlusion", "mean", 0.7, 0.0},
        {0, 3, 2, "ensemble", "occlusion", "mean", 0.2, 0.5},  {1, 3, 1, "ensemble", "occlusion", "mean", std::nullopt, 0.5},
        {0, 2, 1, "ensemble", "occlusion", "var", 0.1, 0.2},
    };
    const auto macro = aggregate(recs, false);
    ASSERT_EQ(macro.size(), 2u);
    const auto& m = find_row(macro, "ensemble", "occlusion", "mean");
    // split 2: rma 0.6, iou 0.5; split 3: rma 0.2, iou 0.5
    EXPECT_DOUBLE_EQ(m.rma.mean, 0.4);
    EXPECT_DOUBLE_EQ(m.rma.std, 0.2);
    EXPECT_DOUBLE_EQ(m.iou.mean, 0.5);
    EXPECT_EQ(m.iou.std, 0.0);
    EXPECT_EQ(m.instances, 4u);
    EXPECT_EQ(m.missing_rma, 1u);
    EXPECT_EQ(m.missing_iou, 0u);
    EXPECT_TRUE(find_row(macro, "ensemble", "occlusion", "var").diagnostic);
    const auto cls = aggregate(recs, true);
    EXPECT_EQ(find_row(cls, "ensemble", "occlusion", "mean", 2).rma.mean, 0.2);
    EXPECT_EQ(find_row(cls, "ensemble", "occlusion", "mean", 1).rma.splits, 1u);
}

// Independent streaming pass (Welford over split means) reproduces each cell.
TEST(Aggregate, StreamingRecomputationAgrees) {
    Rng rng(5);
    std::vector<EvalRecord> recs;
    for (std::uint32_t split = 2; split < 7; ++split)
        for (std::uint32_t i = 0; i < 60; ++i) {
            const std::size_t cls = 1 + rng.below(15);
            for (const char* s : {"mean", "q50"})
                recs.push_back({i, split, cls, "ensemble", "occlusion", s,
                                rng.bernoulli(0.05) ? std::nullopt : std::optional<double>(rng.uniform()), rng.uniform()});
        }
    for (bool per_class : {false, true}) {
        for (const auto& row : aggregate(recs, per_class)) {
            std::map<std::uint32_t, std::pair<double, std::size_t>> by_split;
            for (const auto& r : recs)
                if (r.summary == row.summary && (row.cls < 0 || static_cast<int>(r.cls) == row.cls) && r.rma) {
                    by_split[r.split].first += *r.rma;
                    ++by_split[r.split].second;
                }
            double mean = 0.0, m2 = 0.0;
            std::size_t k = 0;
            for (const auto& [split, sn] : by_split) {
                const double v = sn.first / static_cast<double>(sn.second);
                ++k;
                const double d = v - mean;
                mean += d / static_cast<double>(k);
                m2 += d * (v - mean);
            }
            EXPECT_NEAR(row.rma.mean, mean, 1e-12);
            EXPECT_NEAR(row.rma.std, std::sqrt(m2 / static_cast<double>(k)), 1e-12);
            EXPECT_EQ(row.rma.splits, k);
        }
    }
}

TEST(Grid, DefaultGridCoversTheThreeComparisons) {
    const auto g = default_grid();
    EXPECT_EQ(g.size(), 4u + 2u + 7u);
    std::size_t ensemble_occlusion = 0;
    for (const auto& c : g) ensemble_occlusion += c.posterior == "ensemble" && c.op == attribution::Operator::occlusion;
    EXPECT_EQ(ensemble_occlusion, 8u);
}

namespace {

struct SmallWorld {
    SignalConfig config;
    Dataset data;
    std::vector<net::NetworkParams> members;
    posterior::PosteriorApprox det, ens, drop;

    SmallWorld() {
        config.n_samples = 96;
        config.cycles = 4;
        DatasetLayout layout;
        layout.train = SplitCounts::uniform(1);
        layout.val = SplitCounts::uniform(0);
        layout.test = SplitCounts::uniform(2);
        layout.n_test_splits = 2;
        data = generate_dataset(config, layout, 9);
        auto arch = uaxai::testing::tiny_arch();
        arch.input_length = 96;
        arch.classes = 16;
        for (std::uint64_t k = 0; k < 3; ++k) members.push_back(uaxai::testing::random_net(arch, 40 + k));
        det = posterior::deterministic(members[0]);
        ens = posterior::make_ensemble(members);
        drop = posterior::mc_dropout(members[0], arch.dropout_p, 4);
    }

    std::map<std::string, PosteriorEntry> entries() const {
        return {{"deterministic", {&det, 1}}, {"ensemble", {&ens, 3}}, {"mc_dropout", {&drop, 4}}};
    }

    EvalConfig config_for(std::size_t threads) const {
        EvalConfig c;
        c.grid = {{"deterministic", attribution::Operator::occlusion, {uarao::SummaryKind::mean}},
                  {"ensemble", attribution::Operator::occlusion, {uarao::SummaryKind::mean}},
                  {"ensemble", attribution::Operator::occlusion, uarao::Summary::quantile(0.95)},
                  {"ensemble", attribution::Operator::gradcam, {uarao::SummaryKind::cv}},
                  {"mc_dropout", attribution::Operator::lime, {uarao::SummaryKind::mean}}};
        c.operators.occlusion.window = 8;
        c.operators.lime.segment_width = 8;
        c.operators.lime.n_perturbations = 24;
        c.seed = 77;
        c.threads = threads;
        return c;
    }
};

}  // namespace

TEST(Evaluate, ScoresDisturbanceInstancesDeterministicallyAcrossThreadCounts) {
    const SmallWorld w;
    const auto splits = w.data.test_splits();
    const auto one = evaluate(splits, w.entries(), w.config_for(1));
    const auto many = evaluate(splits, w.entries(), w.config_for(3));
    // 2 splits x 15 disturbance classes x 2 instances x 5 cells
    ASSERT_EQ(one.records.size(), 2u * 15u * 2u * 5u);
    ASSERT_EQ(one.records.size(), many.records.size());
    for (std::size_t i = 0; i < one.records.size(); ++i) {
        const auto& a = one.records[i];
        const auto& b = many.records[i];
        EXPECT_EQ(std::tie(a.split, a.instance, a.posterior, a.op, a.summary, a.rma, a.iou),
                  std::tie(b.split, b.instance, b.posterior, b.op, b.summary, b.rma, b.iou));
        EXPECT_NE(a.cls, 0u);
        if (a.rma) {
            EXPECT_GE(*a.rma, 0.0);
            EXPECT_LE(*a.rma, 1.0);
        }
        ASSERT_TRUE(a.iou.has_value());
        EXPECT_GE(*a.iou, 0.0);
        EXPECT_LE(*a.iou, 1.0);
    }
    ASSERT_EQ(one.accuracy.size(), 2u * 3u);
    for (std::size_t i = 0; i < one.accuracy.size(); ++i) EXPECT_EQ(one.accuracy[i].accuracy, many.accuracy[i].accuracy);
}

TEST(Evaluate, RecordsMatchDirectModuleCalls) {
    const SmallWorld w;
    const auto splits = w.data.test_splits();
    auto cfg = w.config_for(1);
    cfg.grid = {{"ensemble", attribution::Operator::occlusion, {uarao::SummaryKind::mean}}};
    const auto res = evaluate(splits, w.entries(), cfg);
    const auto& wave = splits[1]->records[5];
    const auto c = static_cast<std::size_t>(wave.label);
    Rng rng(0);
    const auto draws = posterior::sample(w.ens, 3, rng);
    const auto e = uarao::sample_explanations(draws, attribution::Operator::occlusion, wave.x, c, cfg.operators, 0);
    const auto map = uarao::mean_map(e.relevance);
    const auto mask = ground_truth_mask(wave.d, cfg.epsilon);
    const auto it = std::find_if(res.records.begin(), res.records.end(),
                                 [&](const EvalRecord& r) { return r.split == wave.split_id && r.instance == wave.index; });
    ASSERT_NE(it, res.records.end());
    EXPECT_EQ(it->rma, rma(map, mask));
    EXPECT_EQ(it->iou, iou(map, mask));
}

TEST(Evaluate, MissingArtefactsAndBadGridsAreErrors) {
    const SmallWorld w;
    const auto splits = w.data.test_splits();
    auto cfg = w.config_for(1);
    cfg.grid.push_back({"laplace", attribution::Operator::occlusion, {uarao::SummaryKind::mean}});
    try {
        evaluate(splits, w.entries(), cfg);
        FAIL() << "expected an error";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("laplace"), std::string::npos);
    }
    cfg = w.config_for(1);
    cfg.grid = {{"deterministic", attribution::Operator::occlusion, {uarao::SummaryKind::variance}}};
    EXPECT_THROW(evaluate(splits, w.entries(), cfg), ConfigError);
    cfg.grid = {{"ensemble", attribution::Operator::occlusion, {uarao::SummaryKind::union_set}}};
    EXPECT_THROW(evaluate(splits, w.entries(), cfg), ConfigError);
}

TEST(Reports, CsvLayoutAndDeterminism) {
    const SmallWorld w;
    const auto res = evaluate(w.data.test_splits(), w.entries(), w.config_for(2));
    const auto dir = std::filesystem::temp_directory_path() / "uaxai_metrics_reports";
    std::filesystem::create_directories(dir);
    write_table_csv(dir / "macro.csv", aggregate(res.records, false), false);
    write_table_csv(dir / "per_class.csv", aggregate(res.records, true), true);
    write_accuracy_csv(dir / "accuracy.csv", res.accuracy);
    const auto macro = slurp(dir / "macro.csv");
    EXPECT_EQ(macro.substr(0, macro.find('\n')),
              "posterior,operator,summary,role,rma_mean,rma_std,iou_mean,iou_std,splits,instances,missing_rma,missing_iou");
    EXPECT_EQ(std::count(macro.begin(), macro.end(), '\n'), 6);
    const auto per_class = slurp(dir / "per_class.csv");
    EXPECT_EQ(std::count(per_class.begin(), per_class.end(), '\n'), 1 + 5 * 15);
    EXPECT_NE(per_class.find(",sag,"), std::string::npos);
    EXPECT_NE(slurp(dir / "accuracy.csv").find("ensemble,mean,"), std::string::npos);
    write_table_csv(dir / "again.csv", aggregate(evaluate(w.data.test_splits(), w.entries(), w.config_for(1)).records, false),
                    false);
    EXPECT_EQ(slurp(dir / "again.csv"), macro);
    std::filesystem::remove_all(dir);
}
