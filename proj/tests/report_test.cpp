#include <gtest/gtest.h>

#include <regex>

#include "uaxai/report.hpp"

using namespace uaxai;

namespace {

uarao::ExplanationBundle sample_bundle() {
    uarao::ExplanationBundle b;
    b.meta = {{"posterior", "ensemble"}, {"operator", "occlusion"}, {"input_id", "test_0/3"}, {"target_name", "sag"}};
    const std::size_t n = 32;
    std::vector<Vector> rows;
    for (std::size_t s = 0; s < 3; ++s) {
        Vector r(n);
        for (std::size_t i = 0; i < n; ++i) r[i] = std::abs(std::sin(0.2 * static_cast<double>(i + s)));
        rows.push_back(r);
    }
    b.relevance = uarao::SampleMatrix::from_rows(rows);
    b.raw = b.relevance;
    b.summaries.emplace_back("mean", uarao::mean_map(b.relevance));
    b.summaries.emplace_back("flat", Vector(n, 2.0));
    b.input.resize(n);
    for (std::size_t i = 0; i < n; ++i) b.input[i] = std::sin(0.5 * static_cast<double>(i));
    b.mask.assign(n, 0);
    for (std::size_t i = 10; i < 20; ++i) b.mask[i] = 1;
    return b;
}

}  // namespace

TEST(Report, GreyLevelEndpoints) {
    EXPECT_EQ(report::grey_level(0.0), 255);
    EXPECT_EQ(report::grey_level(1.0), 0);
    EXPECT_EQ(report::grey_level(0.5), 127);
    EXPECT_EQ(report::grey_level(-3.0), 255);
    EXPECT_EQ(report::grey_level(7.0), 0);
}

TEST(Report, SvgIsByteIdenticalAcrossRenders) {
    const auto b = sample_bundle();
    EXPECT_EQ(report::render_svg(b), report::render_svg(b));
}

TEST(Report, SvgCarriesEveryStripWithValidGreys) {
    const auto svg = report::render_svg(sample_bundle());
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
    for (const char* label : {"waveform", "ground truth", "sample 0", "sample 2", "mean", "flat"})
        EXPECT_NE(svg.find(std::string(">") + label + "<"), std::string::npos) << label;
    const std::regex fill(R"(rgb\((\d+),(\d+),(\d+)\))");
    std::size_t count = 0;
    for (auto it = std::sregex_iterator(svg.begin(), svg.end(), fill); it != std::sregex_iterator(); ++it) {
        const int g = std::stoi((*it)[1]);
        EXPECT_GE(g, 0);
        EXPECT_LT(g, 255);
        EXPECT_EQ((*it)[1], (*it)[2]);
        ++count;
    }
    EXPECT_GT(count, 0u);
    // the mask strip has one black run; a constant map draws nothing
    EXPECT_NE(svg.find("fill=\"rgb(0,0,0)\""), std::string::npos);
}

TEST(Report, RejectsInconsistentBundles) {
    auto b = sample_bundle();
    b.input.pop_back();
    EXPECT_THROW(report::render_svg(b), ShapeError);
    EXPECT_THROW(report::render_svg(uarao::ExplanationBundle{}), ShapeError);
}

TEST(Report, MarkdownTable) {
    metrics::TableRow r;
    r.posterior = "ensemble";
    r.op = "occlusion";
    r.summary = "mean";
    r.rma = {0.5, 0.01, 5};
    r.instances = 10;
    const auto md = report::table_markdown({r});
    EXPECT_NE(md.find("| ensemble | occlusion | mean | localisation | 0.5000 ± 0.0100 | n/a | 10 |"), std::string::npos);
}
