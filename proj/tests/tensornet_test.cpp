#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>

#include "uaxai/siggen.hpp"
#include "uaxai/tensornet.hpp"
#include "support/gradcheck.hpp"

using namespace uaxai;
using namespace uaxai::net;

using uaxai::testing::pointers;
using uaxai::testing::random_inputs;
using uaxai::testing::random_net;
using uaxai::testing::RelativeError;
using uaxai::testing::tiny_arch;

namespace {

void expect_gradients_match(Mode mode, std::uint64_t seed, RelativeError kind) {
    const auto r = uaxai::testing::gradient_check(mode, seed, kind);
    EXPECT_EQ(r.checked, 100u);
    EXPECT_EQ(r.failed, 0u) << "worst " << r.worst << "; first: " << (r.failures.empty() ? "" : r.failures[0]);
}

}  // namespace

TEST(Architecture, TableTwoShapes) {
    Architecture a;
    EXPECT_EQ(a.temporal_lengths(), (std::array<std::size_t, 6>{638, 636, 634, 632, 630, 1}));
    const Layout lay(a);
    // conv1 32, conv2 200, bn1 16, conv3 400, conv4 784, bn2 32, fc1 1088, bn3 128, fc2 1040
    EXPECT_EQ(lay.total, 3720u);
    EXPECT_EQ(initialize(a, 1).param_count(), 3720u);
}

TEST(Forward, ZeroParametersGiveUniformProbabilities) {
    const auto net = zero_network(Architecture{});
    const Vector x(640, 0.3);
    const auto t = forward(net, x, DropoutMask{});
    for (double p : t.probs) EXPECT_NEAR(p, 0.0625, 1e-15);
    EXPECT_EQ(t.conv4_maps().size(), 16u * 630u);
    EXPECT_NEAR(cross_entropy(t.probs, 3), std::log(16.0), 1e-12);
}

TEST(Forward, WrongLengthIsShapeError) {
    const auto net = zero_network(Architecture{});
    EXPECT_THROW(forward(net, Vector(639, 0.0), DropoutMask{}), ShapeError);
}

TEST(Forward, EvalIsDeterministicAndOnSimplex) {
    const auto net = random_net(Architecture{}, 3);
    const auto xs = random_inputs(5, 640, 4);
    for (const auto& x : xs) {
        const auto a = forward(net, x, DropoutMask{});
        const auto b = forward(net, x, DropoutMask{});
        EXPECT_EQ(a.probs, b.probs);
        double s = 0.0;
        for (double p : a.probs) {
            EXPECT_GE(p, 0.0);
            s += p;
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Forward, GlobalMaxPoolIgnoresArgmaxPosition) {
    const auto net = random_net(Architecture{}, 5);
    Vector a(640, 0.0), b(640, 0.0);
    const Vector bump = {0.2, 0.9, -0.4, 1.3, 0.5};
    for (std::size_t k = 0; k < bump.size(); ++k) {
        a[100 + k] = bump[k];
        b[400 + k] = bump[k];
    }
    EXPECT_EQ(forward(net, a, DropoutMask{}).logits, forward(net, b, DropoutMask{}).logits);
}

TEST(Forward, DropoutMaskChangesOnlyWhenNotIdentity) {
    const auto net = random_net(Architecture{}, 6);
    const auto x = random_inputs(1, 640, 7)[0];
    DropoutMask all_kept;
    all_kept.keep.assign(64, 1);
    const auto plain = forward(net, x, DropoutMask{});
    const auto kept = forward(net, x, all_kept);
    // Keeping every unit still rescales by 1/(1-p).
    EXPECT_NE(plain.probs, kept.probs);
    const auto m = DropoutMask::from_seed(64, 0.2, 8);
    EXPECT_EQ(forward(net, x, m).probs, forward(net, x, m).probs);
}

TEST(Softmax, SumsToOneAndShiftInvariant) {
    Rng rng(9);
    for (int k = 0; k < 200; ++k) {
        Vector logits(16);
        for (auto& v : logits) v = 20.0 * rng.normal();
        auto p = softmax(logits);
        double s = 0.0;
        for (double v : p) s += v;
        ASSERT_NEAR(s, 1.0, 1e-6);
        const double c = 50.0 * rng.normal();
        for (auto& v : logits) v += c;
        const auto q = softmax(logits);
        for (std::size_t i = 0; i < p.size(); ++i) ASSERT_NEAR(p[i], q[i], 1e-6);
    }
}

TEST(Loss, ReferenceValues) {
    EXPECT_NEAR(cross_entropy(Vector(16, 1.0 / 16), 7), 2.7726, 1e-4);
    Vector onehot(16, 0.0);
    onehot[4] = 1.0;
    EXPECT_EQ(cross_entropy(onehot, 4), 0.0);
    Vector half(16, 0.5 / 15);
    half[2] = 0.5;
    EXPECT_NEAR(cross_entropy(half, 2), 0.6931, 1e-4);
    EXPECT_NEAR(cross_entropy(onehot, 0), -std::log(1e-12), 1e-9);  // floored
}

TEST(Predict, LowestIndexWinsTies) {
    Vector p(16, 0.0);
    p[3] = 0.5;
    p[7] = 0.5;
    EXPECT_EQ(argmax(p), 3u);
    Vector onehot(16, 0.0);
    onehot[11] = 1.0;
    EXPECT_EQ(argmax(onehot), 11u);
}

// Batch statistics in train mode leave some coordinates with gradients near
// 1e-8, below what a difference quotient resolves, hence the floored form.
TEST(Gradient, MatchesFiniteDifferencesTrainMode) { expect_gradients_match(Mode::train, 21, RelativeError::floored); }
TEST(Gradient, MatchesFiniteDifferencesEvalMode) { expect_gradients_match(Mode::eval, 22, RelativeError::plain); }
TEST(Gradient, MatchesFiniteDifferencesEvalDropoutMode) {
    expect_gradients_match(Mode::eval_dropout, 23, RelativeError::plain);
}

TEST(Gradient, PropertyAcrossSeeds) {
    for (std::uint64_t seed = 30; seed < 40; ++seed)
        for (Mode m : {Mode::train, Mode::eval, Mode::eval_dropout})
            expect_gradients_match(m, seed, RelativeError::floored);
}

TEST(Gradient, NoLearningSignalWhenPredictionsAreCertain) {
    const auto arch = tiny_arch();
    auto net = random_net(arch, 40);
    const Layout lay(arch);
    net.theta[lay.fc2_b.offset + 2] = 1000.0;
    const auto xs = random_inputs(4, arch.input_length, 41);
    const std::vector<std::size_t> ys(4, 2);
    Rng rng(1);
    const auto r = compute_batch(net, pointers(xs), ys, Mode::eval, rng, true);
    for (std::size_t k = 0; k < lay.fc2_b.size; ++k) EXPECT_EQ(r.grad[lay.fc2_b.offset + k], 0.0);
    EXPECT_EQ(r.loss, 0.0);
}

TEST(Gradient, DeterministicGivenDropoutSeed) {
    const auto arch = tiny_arch();
    const auto net = random_net(arch, 50);
    const auto xs = random_inputs(3, arch.input_length, 51);
    const std::vector<std::size_t> ys = {1, 1, 0};
    Rng r1(77), r2(77), r3(78);
    const auto a = compute_batch(net, pointers(xs), ys, Mode::train, r1, true).grad;
    const auto b = compute_batch(net, pointers(xs), ys, Mode::train, r2, true).grad;
    const auto c = compute_batch(net, pointers(xs), ys, Mode::train, r3, true).grad;
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    EXPECT_THROW(compute_batch(net, {}, {}, Mode::train, r1, true), ShapeError);
}

TEST(Gradient, EvalBatchMatchesSingleForward) {
    const auto net = random_net(Architecture{}, 60);
    const auto xs = random_inputs(3, 640, 61);
    const std::vector<std::size_t> ys = {0, 1, 2};
    Rng rng(1);
    const auto r = compute_batch(net, pointers(xs), ys, Mode::eval, rng, false);
    for (std::size_t b = 0; b < xs.size(); ++b) {
        const auto t = forward(net, xs[b], DropoutMask{});
        for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(r.probs[b][c], t.probs[c], 1e-15);
    }
}

namespace {

LabelledSet toy_set(const std::vector<Waveform>& ws) {
    LabelledSet s;
    for (const auto& w : ws) {
        s.inputs.push_back(&w.x);
        s.labels.push_back(static_cast<std::size_t>(w.label));
    }
    return s;
}

std::vector<Waveform> toy_waveforms() {
    SignalConfig cfg;
    std::vector<Waveform> ws;
    const std::vector<DisturbanceClass> classes = {DisturbanceClass::normal, DisturbanceClass::sag,
                                                   DisturbanceClass::swell, DisturbanceClass::harmonics,
                                                   DisturbanceClass::spike};
    for (std::size_t i = 0; i < 10; ++i) {
        Rng rng(derive_seed(70, i));
        const auto cls = classes[i % classes.size()];
        ws.push_back(synthesize(cls, sample_params(cls, cfg, rng), cfg, rng));
    }
    return ws;
}

}  // namespace

TEST(Train, OverfitsTenInstances) {
    const auto ws = toy_waveforms();
    const auto set = toy_set(ws);
    TrainConfig cfg;
    cfg.epochs = 300;
    cfg.batch_size = 10;
    cfg.learning_rate = 1e-2;
    cfg.patience = 300;
    cfg.seed = 3;
    const auto r = train(Architecture{}, set, set, cfg);
    EXPECT_EQ(accuracy(r.params, set), 1.0);
    for (std::size_t i = 0; i < set.size(); ++i) EXPECT_EQ(predict(r.params, ws[i].x).label, set.labels[i]);
    for (const auto& s : r.params.running)
        for (double v : s.var) EXPECT_GE(v, 0.0);
}

TEST(Train, SameSeedGivesIdenticalParameters) {
    const auto ws = toy_waveforms();
    const auto set = toy_set(ws);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.seed = 11;
    const auto a = train(Architecture{}, set, set, cfg);
    const auto b = train(Architecture{}, set, set, cfg);
    EXPECT_EQ(a.params.theta, b.params.theta);
    EXPECT_EQ(a.params.running[2].var, b.params.running[2].var);
    cfg.seed = 12;
    EXPECT_NE(train(Architecture{}, set, set, cfg).params.theta, a.params.theta);
}

TEST(Train, DivergenceAbortsWithDiagnostic) {
    const auto ws = toy_waveforms();
    const auto set = toy_set(ws);
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.batch_size = 5;
    cfg.learning_rate = 1e300;
    cfg.optimiser = Optimiser::sgd_momentum;
    EXPECT_THROW(train(Architecture{}, set, set, cfg), NumericError);
}

TEST(Checkpoint, RoundTripIsExactAfterQuantize) {
    const auto net = quantize(random_net(Architecture{}, 80));
    const auto path = std::filesystem::temp_directory_path() / "uaxai_ckpt_test.ckpt";
    save_checkpoint(path, net);
    const auto back = load_checkpoint(path);
    EXPECT_EQ(back.arch, net.arch);
    EXPECT_EQ(back.theta, net.theta);
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_EQ(back.running[k].mean, net.running[k].mean);
        EXPECT_EQ(back.running[k].var, net.running[k].var);
    }
    EXPECT_THROW(load_checkpoint("/nonexistent/uaxai.ckpt"), IoError);
}

TEST(Performance, BatchGradientTiming) {
    const auto net = random_net(Architecture{}, 90);
    const auto xs = random_inputs(64, 640, 91);
    const std::vector<std::size_t> ys(64, 3);
    Rng rng(1);
    const auto start = std::chrono::steady_clock::now();
    compute_batch(net, pointers(xs), ys, Mode::train, rng, true);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    RecordProperty("batch64_ms", std::to_string(ms));
    std::printf("batch of 64 forward+backward: %.1f ms\n", ms);
    SUCCEED();
}
