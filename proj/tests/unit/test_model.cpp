#include <gtest/gtest.h>

#include <algorithm>

#include "fuse/model.hpp"
#include "fuse/numerics/grad_check.hpp"
#include "fuse/synth.hpp"
#include "test_util.hpp"

using namespace fuse::model;
using fuse::data::WindowSample;
using fuse::num::Matrix;
using fuse::num::Rng;
using fuse::num::Tape;

namespace {

ModelConfig toy_config(fuse::fusion::FusionKind kind = fuse::fusion::FusionKind::CrossAttention) {
    ModelConfig c;
    c.n_nodes = 4;
    c.h_in = 6;
    c.h_out = 3;
    c.d_text = 16;
    c.st = {2, 8, 2, 0.0, true};
    c.fusion = {8, 2, 2, 16};
    c.kind = kind;
    return c;
}

Matrix ring_adjacency(std::size_t n) {
    fuse::graph::RoadNetwork net{{}, Matrix(n, n)};
    for (std::size_t i = 0; i < n; ++i) net.adjacency(i, (i + 1) % n) = net.adjacency((i + 1) % n, i) = 1.0;
    return fuse::graph::normalize_adjacency(net);
}

// Windows cut from a small noiseless synthetic series.
struct ToyData {
    std::vector<WindowSample> windows;
    std::vector<Matrix> texts;
    fuse::data::NormStats norm;
};

ToyData toy_data(std::size_t n_nodes, int h_in, int h_out, std::size_t d_text, double noise = 0.0) {
    fuse::synth::GeneratorConfig g;
    g.n_sensors = static_cast<int>(n_nodes);
    g.n_steps = 400;
    g.noise_std = noise;
    const auto net = fuse::synth::corridor_network(g.n_sensors, 1);
    const auto script = fuse::synth::random_script(g, 6, 2, 10, 20);
    const auto out = fuse::synth::generate(g, script, net);
    ToyData d;
    d.norm = fuse::data::fit_normalizer(out.series, {0, 280});
    d.windows = fuse::data::make_windows(out.series, d.norm, h_in, h_out, 3);
    Rng rng(3);
    for (std::size_t i = 0; i < d.windows.size(); ++i) {
        std::vector<std::string> texts(n_nodes);
        if (i % 3 == 0) texts[i % n_nodes] = "Severe storm flooding at " + fuse::synth::place_name(static_cast<int>(i % n_nodes));
        d.texts.push_back(fuse::textenc::embed(texts, d_text));
    }
    return d;
}

std::vector<Example> examples(const ToyData& d, std::size_t begin, std::size_t end) {
    std::vector<Example> out;
    for (std::size_t i = begin; i < end; ++i) out.push_back({&d.windows[i], &d.texts[i]});
    return out;
}

std::vector<Matrix> values_of(const fuse::num::ParamRefs& ps) {
    std::vector<Matrix> out;
    for (auto* p : ps) out.push_back(p->value);
    return out;
}

}  // namespace

TEST(ModelConfigTest, Validation) {
    auto c = toy_config();
    EXPECT_NO_THROW(c.validate());
    c.st.hidden = 16;
    EXPECT_THROW(c.validate(), ConfigError);
    c = toy_config();
    c.h_in = 1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = toy_config();
    EXPECT_EQ(ModelConfig::from_json(c.to_json()).to_json(), c.to_json());
}

TEST(Forward, ShapeAcrossVariants) {
    Rng rng(1);
    for (auto kind : {fuse::fusion::FusionKind::CrossAttention, fuse::fusion::FusionKind::Gating,
                      fuse::fusion::FusionKind::Add, fuse::fusion::FusionKind::Concat}) {
        Model m(toy_config(kind), ring_adjacency(4), {50, 10}, 7);
        Tape t;
        const auto f = m.forward(t, testutil::random_matrix(4, 6, rng), Matrix(4, 16));
        EXPECT_EQ(t.value(f.pred).rows(), 4u);
        EXPECT_EQ(t.value(f.pred).cols(), 3u);
    }
}

TEST(Forward, DisabledEqualsEmptyTexts) {
    Rng rng(2);
    auto cfg = toy_config();
    Model on(cfg, ring_adjacency(4), {50, 10}, 7);
    cfg.event_mode = EventMode::Disabled;
    Model off(cfg, ring_adjacency(4), {50, 10}, 7);
    const Matrix x = testutil::random_matrix(4, 6, rng);
    const Matrix empty = on.embed_texts({"", "", "", ""});
    const Matrix busy = on.embed_texts({"storm", "", "concert", "crash"});
    EXPECT_EQ(on.predict(x, empty), off.predict(x, busy));
    EXPECT_NE(on.predict(x, empty), on.predict(x, busy));
}

TEST(Forward, ComposesModuleOutputs) {
    Rng rng(3);
    Model m(toy_config(), ring_adjacency(4), {50, 10}, 9);
    const Matrix x = testutil::random_matrix(4, 6, rng);
    const Matrix text = m.embed_texts({"a", "b", "", "c"});
    Tape t;
    const Matrix e_st = t.value(fuse::stenc::encode(t, x, m.adjacency(), m.config().st, m.encoder()));
    const Matrix e_text = fuse::textenc::project(text, m.projection());
    const Matrix fused = t.value(fuse::fusion::variant_fuse(t, m.config().kind, t.constant(e_st), t.constant(e_text),
                                                            m.config().fusion, m.fusion_params()));
    Matrix expect = fuse::num::matmul(fused, m.decoder().w.value);
    for (std::size_t i = 0; i < expect.rows(); ++i)
        for (std::size_t c = 0; c < expect.cols(); ++c) expect(i, c) = (expect(i, c) + m.decoder().b.value(0, c)) * 10 + 50;
    const Matrix got = m.predict(x, text);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expect[i], 1e-12);
}

TEST(Forward, ShapeErrors) {
    Model m(toy_config(), ring_adjacency(4), {50, 10}, 1);
    EXPECT_THROW(m.predict(Matrix(4, 5), Matrix(4, 16)), ConfigError);
    EXPECT_THROW(m.predict(Matrix(4, 6), Matrix(3, 16)), ConfigError);
    EXPECT_THROW(m.embed_texts({"a"}), ConfigError);
    EXPECT_THROW(Model(toy_config(), ring_adjacency(3), {50, 10}, 1), ConfigError);
}

TEST(Parameters, FrozenTextEncoderIsNotOptimized) {
    for (auto kind : {fuse::fusion::FusionKind::CrossAttention, fuse::fusion::FusionKind::Add}) {
        Model m(toy_config(kind), ring_adjacency(4), {50, 10}, 1);
        for (auto* p : m.parameters()) {
            const bool known = p->name.rfind("st.", 0) == 0 || p->name.rfind("text_proj.", 0) == 0 ||
                               p->name.rfind("fusion.", 0) == 0 || p->name.rfind("decoder.", 0) == 0;
            EXPECT_TRUE(known) << p->name;
        }
        // The projection is the only text-side parameter set.
        const auto names = m.parameters();
        EXPECT_EQ(std::count_if(names.begin(), names.end(),
                                [](auto* p) { return p->name.rfind("text_proj.", 0) == 0; }),
                  2);
    }
}

TEST(Parameters, ZeroLearningRateStepIsNoOp) {
    const auto d = toy_data(4, 6, 3, 16);
    Model m(toy_config(), ring_adjacency(4), d.norm, 3);
    auto params = m.parameters();
    const auto before = values_of(params);
    fuse::num::Adam opt(params, {0.0});
    Tape t;
    const auto ex = examples(d, 0, 4);
    const auto bl = batch_loss(t, m, ex);
    t.backward(bl.loss);
    opt.step();
    EXPECT_EQ(values_of(params), before);
}

TEST(Loss, MissingTargetsContributeNoGradient) {
    auto d = toy_data(4, 6, 3, 16);
    Model m(toy_config(), ring_adjacency(4), d.norm, 3);
    WindowSample w = d.windows[0];
    w.y(1, 0) = 0.0;
    w.y(3, 2) = 0.0;
    Tape t;
    const auto f = m.forward(t, w.x, d.texts[0]);
    std::size_t count = 0;
    t.backward(masked_abs_error(t, m, f.pred, w.y, count));
    EXPECT_EQ(count, 10u);
    const Matrix& g = t.grad(f.pred);
    EXPECT_EQ(g(1, 0), 0.0);
    EXPECT_EQ(g(3, 2), 0.0);
    EXPECT_NE(g(0, 0), 0.0);
}

TEST(Loss, MaskedTargetValuesAreIgnored) {
    Matrix target{{9.0, 5.0}, {7.0, 9.0}}, mask{{0.0, 1.0}, {1.0, 0.0}};
    fuse::num::Parameter p("p", Matrix{{1.0, 2.0}, {3.0, 4.0}});
    Tape t;
    t.backward(t.masked_abs_sum(t.param(p), target, mask));
    const Matrix g0 = p.grad;
    target(0, 0) = -1000.0;
    target(1, 1) = 1e6;
    p.zero_grad();
    Tape t2;
    const double v = t2.scalar(t2.masked_abs_sum(t2.param(p), target, mask));
    t2.backward(t2.masked_abs_sum(t2.param(p), target, mask));
    EXPECT_EQ(p.grad, g0);
    EXPECT_DOUBLE_EQ(v, 3.0 + 4.0);
}

TEST(Train, PatienceStopsOnWorseningValidation) {
    // Train targets far above, validation targets far below: each epoch moves away from val.
    auto d = toy_data(4, 6, 3, 16);
    for (std::size_t i = 0; i < d.windows.size(); ++i) d.windows[i].y.fill(i < 8 ? 120.0 : 5.0);
    Model m(toy_config(), ring_adjacency(4), d.norm, 3);
    const auto tr = examples(d, 0, 8), va = examples(d, 8, 12);
    const auto res = train(m, tr, va, {1e-2, 4, 50, 1, 1});
    ASSERT_EQ(res.history.size(), 2u);
    EXPECT_GT(res.history[1].val_mae, res.history[0].val_mae);
    EXPECT_TRUE(res.early_stopped);
    EXPECT_EQ(res.best_epoch, 1);
}

TEST(Train, RestoresBestParameters) {
    const auto d = toy_data(4, 6, 3, 16, 1.0);
    Model m(toy_config(), ring_adjacency(4), d.norm, 5);
    const auto tr = examples(d, 0, 20), va = examples(d, 20, 26);
    const auto res = train(m, tr, va, {5e-3, 8, 6, 10, 2});
    EXPECT_DOUBLE_EQ(evaluate_mae(m, va), res.best_val);
}

TEST(Train, SameSeedSameHistory) {
    const auto d = toy_data(4, 6, 3, 16, 1.0);
    auto run = [&] {
        auto cfg = toy_config();
        cfg.st.dropout_rate = 0.2;
        Model m(cfg, ring_adjacency(4), d.norm, 5);
        const auto tr = examples(d, 0, 20), va = examples(d, 20, 26);
        auto res = train(m, tr, va, {5e-3, 8, 4, 10, 2});
        std::vector<std::pair<double, double>> h;
        for (const auto& r : res.history) h.emplace_back(r.train_mae, r.val_mae);
        return std::make_pair(h, res.rng_state);
    };
    EXPECT_EQ(run(), run());
}

TEST(Train, OverfitsFourNoiselessSamples) {
    const auto d = toy_data(4, 6, 3, 16, 0.0);
    Model m(toy_config(), ring_adjacency(4), d.norm, 11);
    const auto tr = examples(d, 0, 4);
    const auto res = train(m, tr, tr, {1e-2, 4, 4000, 4000, 3});
    EXPECT_LT(evaluate_mae(m, tr), 0.05) << "after " << res.history.size() << " epochs";
}

TEST(Train, DivergenceReportsContext) {
    auto d = toy_data(4, 6, 3, 16);
    d.norm.std = 1e308;
    Model m(toy_config(), ring_adjacency(4), d.norm, 1);
    const auto tr = examples(d, 0, 4);
    try {
        train(m, tr, tr, {1e-3, 2, 3, 3, 1});
        FAIL() << "expected divergence";
    } catch (const TrainingDiverged& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
        EXPECT_NE(msg.find("batch 0"), std::string::npos) << msg;
        EXPECT_NE(msg.find("lr"), std::string::npos) << msg;
    }
}

TEST(Train, HistoryCsv) {
    testutil::TempDir dir("history");
    write_history_csv(dir.file("h.csv"), {{1, 2.5, 3.0, 0.1}});
    EXPECT_EQ(testutil::read_file(dir.file("h.csv")).substr(0, 31), "epoch,train_mae,val_mae,seconds");
}

TEST(Checkpoint, RoundTripIsBitExact) {
    const auto d = toy_data(4, 6, 3, 16, 1.0);
    Model m(toy_config(fuse::fusion::FusionKind::Gating), ring_adjacency(4), d.norm, 5);
    const auto tr = examples(d, 0, 12), va = examples(d, 12, 16);
    const auto res = train(m, tr, va, {5e-3, 4, 2, 5, 2});
    testutil::TempDir dir("ckpt");
    save_checkpoint(dir.file("m.ckpt"), m, {2, res.best_val, res.rng_state});
    TrainState st;
    Model back = load_checkpoint(dir.file("m.ckpt"), &st);
    EXPECT_EQ(st.epoch, 2);
    EXPECT_EQ(st.best_val, res.best_val);
    EXPECT_EQ(st.rng_state, res.rng_state);
    for (const auto& ex : va) EXPECT_EQ(back.predict(ex.window->x, *ex.text), m.predict(ex.window->x, *ex.text));
    EXPECT_EQ(serialize_checkpoint(back, st), serialize_checkpoint(m, st));
}

TEST(Checkpoint, TruncatedOrCorruptedFailsChecksum) {
    Model m(toy_config(), ring_adjacency(4), {50, 10}, 5);
    const std::string buf = serialize_checkpoint(m, {});
    for (std::size_t cut : {std::size_t{3}, std::size_t{40}, buf.size() / 2, buf.size() - 1}) {
        try {
            deserialize_checkpoint(buf.substr(0, cut));
            FAIL() << "cut " << cut;
        } catch (const CheckpointError& e) {
            EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
        }
    }
    std::string flipped = buf;
    flipped[buf.size() / 2] ^= 0x10;
    EXPECT_THROW(deserialize_checkpoint(flipped), CheckpointError);
}

TEST(Checkpoint, VersionBumpRejected) {
    Model m(toy_config(), ring_adjacency(4), {50, 10}, 5);
    try {
        deserialize_checkpoint(serialize_checkpoint(m, {}, kCheckpointVersion + 1));
        FAIL();
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("unsupported checkpoint version 2"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, FullModelGradientCheck) {
    Rng rng(6);
    Model m(toy_config(), ring_adjacency(4), {50, 10}, 8);
    const Matrix x = testutil::random_matrix(4, 6, rng);
    const Matrix text = m.embed_texts({"storm", "crash at Downtown", "", "concert"});
    const Matrix readout = testutil::random_matrix(4, 3, rng);
    const auto rep = fuse::num::grad_check(
        [&](Tape& t) { return t.sum(t.hadamard(m.forward(t, x, text).pred, t.constant(readout))); }, m.parameters(),
        1e-5);
    for (const auto& e : rep.per_param) EXPECT_LT(e.max_rel_error, 1e-4) << e.name;
}
