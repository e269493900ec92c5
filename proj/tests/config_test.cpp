#include <gtest/gtest.h>

#include "uaxai/config.hpp"

using namespace uaxai;

TEST(RunConfig, ParsesCommentsAndBlankLines) {
    const auto c = RunConfig::parse("# header\n\nseed = 7   # trailing\nsignal.snr_db=30\n");
    EXPECT_EQ(c.seed(), 7u);
    EXPECT_DOUBLE_EQ(c.signal().snr_db, 30.0);
    EXPECT_EQ(c.signal().n_samples, 640u);
}

TEST(RunConfig, DefaultsMatchTheReferenceSetup) {
    auto c = RunConfig::parse("seed = 1");
    const auto t = c.training();
    EXPECT_EQ(t.epochs, 100u);
    EXPECT_EQ(t.batch_size, 64u);
    EXPECT_DOUBLE_EQ(t.learning_rate, 1e-3);
    EXPECT_EQ(t.patience, 8u);
    EXPECT_EQ(c.count("train.ensemble"), 5u);
    EXPECT_DOUBLE_EQ(c.real("laplace.damping"), 1e2);
    EXPECT_DOUBLE_EQ(c.real("laplace.scaling"), 1.75e10);
    EXPECT_EQ(c.count("mc_dropout.samples"), 20u);
    EXPECT_EQ(c.operators().occlusion.window, 60u);
    const auto l = c.layout();
    EXPECT_EQ(l.train.total(), 16000u);
    EXPECT_EQ(l.n_test_splits, 5u);
    EXPECT_EQ(c.grid().size(), metrics::default_grid().size());
}

TEST(RunConfig, RejectsMalformedInput) {
    EXPECT_THROW(RunConfig::parse("seed"), ConfigError);
    EXPECT_THROW(RunConfig::parse("seed = 1\nseed = 2"), ConfigError);
    EXPECT_THROW(RunConfig::parse("sede = 1"), ConfigError);
    EXPECT_THROW(RunConfig::parse("seed = x").seed(), ConfigError);
    EXPECT_THROW(RunConfig::parse("seed = -3").seed(), ConfigError);
    EXPECT_THROW(RunConfig::parse("signal.snr_db = 4o").signal(), ConfigError);
    EXPECT_THROW(RunConfig::parse("explain.jsonl = maybe").flag("explain.jsonl"), ConfigError);
    EXPECT_THROW(RunConfig::parse("signal.n_samples = 641").signal(), ConfigError);
    EXPECT_THROW(RunConfig::parse("train.optimiser = rmsprop").training(), ConfigError);
}

TEST(RunConfig, MissingSeedNamesTheFlag) {
    const RunConfig c;
    try {
        (void)c.seed();
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("--seed"), std::string::npos);
    }
}

TEST(RunConfig, OverridesReplaceFileValues) {
    auto c = RunConfig::parse("seed = 1\nthreads = 2");
    c.set("threads", "4");
    EXPECT_EQ(c.count("threads"), 4u);
    EXPECT_THROW(c.set("nope", "1"), ConfigError);
}

TEST(RunConfig, ResolvedListsEveryKeyAndReparses) {
    auto c = RunConfig::parse("seed = 3\nlime.ridge = 2");
    const auto text = c.resolved();
    const auto back = RunConfig::parse(text);
    for (const auto& k : config_keys()) EXPECT_EQ(back.str(k.key), c.str(k.key)) << k.key;
    EXPECT_EQ(back.explicit_values().size(), config_keys().size());
}

TEST(RunConfig, GridEntries) {
    auto c = RunConfig::parse("seed = 1\neval.grid = deterministic:occlusion:mean, ensemble:lime:q95");
    const auto g = c.grid();
    ASSERT_EQ(g.size(), 2u);
    EXPECT_EQ(g[1].posterior, "ensemble");
    EXPECT_EQ(g[1].op, attribution::Operator::lime);
    EXPECT_EQ(g[1].summary.name(), "q95");
    c.set("eval.grid", "ensemble:occlusion");
    EXPECT_THROW(c.grid(), ConfigError);
    c.set("eval.grid", "bayes:occlusion:mean");
    EXPECT_THROW(c.grid(), ConfigError);
    c.set("eval.grid", "ensemble:shap:mean");
    EXPECT_THROW(c.grid(), ConfigError);
    c.set("eval.grid", "ensemble:occlusion:q42x");
    EXPECT_THROW(c.grid(), ConfigError);
}
