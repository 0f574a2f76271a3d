#include <gtest/gtest.h>

#include <cmath>

#include "fuse/events/response.hpp"
#include "fuse/numerics/grad_check.hpp"
#include "fuse/synth.hpp"
#include "fuse/textenc.hpp"
#include "test_util.hpp"

using namespace fuse::textenc;
using fuse::num::Matrix;
using fuse::num::Rng;

namespace {

double row_norm(const Matrix& m, std::size_t r) {
    double s = 0;
    for (double v : m.row(r)) s += v * v;
    return std::sqrt(s);
}

// Sparse signed counts straight from the two hashes, compared token by token.
double cosine_oracle(const std::string& a, const std::string& b, std::size_t dim) {
    std::map<std::size_t, double> va, vb;
    for (const auto& t : tokenize(a)) va[token_bucket(t, dim)] += (token_hash(t, kSignSalt) & 1U) ? 1 : -1;
    for (const auto& t : tokenize(b)) vb[token_bucket(t, dim)] += (token_hash(t, kSignSalt) & 1U) ? 1 : -1;
    double dot = 0, na = 0, nb = 0;
    for (auto [k, v] : va) {
        na += v * v;
        if (vb.count(k)) dot += v * vb[k];
    }
    for (auto [k, v] : vb) nb += v * v;
    return dot / std::sqrt(na * nb);
}

// Every distinct per-query text the synthetic fixture can produce.
std::vector<std::string> fixture_corpus() {
    using namespace fuse::synth;
    GeneratorConfig cfg;
    cfg.n_steps = 2880;
    const auto net = corridor_network(cfg.n_sensors, cfg.seed);
    const auto script = random_script(cfg, 60, cfg.seed);
    const auto gen = generate(cfg, script, net);
    FixtureOptions opt;
    opt.prompts.assign(fuse::events::kAllPrompts.begin(), fuse::events::kAllPrompts.end());
    std::set<std::string> texts;
    const auto fixture = build_fixture(gen.series, net, script, opt);
    for (auto it = fixture.begin(); it != fixture.end(); ++it) {
        std::string joined;
        for (const auto& r : fuse::events::parse_response(it->get<std::string>()))
            joined += (joined.empty() ? "" : ", ") + r.text;
        texts.insert(joined);
    }
    return {texts.begin(), texts.end()};
}

}  // namespace

TEST(Tokenize, LowercaseAlphanumericRuns) {
    EXPECT_EQ(tokenize("LA Lakers' game (7:30 PM)"),
              (std::vector<std::string>{"la", "lakers", "game", "7", "30", "pm"}));
    EXPECT_TRUE(tokenize(" ,;").empty());
}

TEST(Embed, EmptyTextIsZeroRow) {
    const Matrix e = embed({"", "storm"}, 64);
    for (double v : e.row(0)) EXPECT_EQ(v, 0.0);
    EXPECT_NEAR(row_norm(e, 1), 1.0, 1e-12);
}

TEST(Embed, Deterministic) {
    const Matrix e = embed({"Severe storm flooding", "Severe storm flooding"}, 256);
    for (std::size_t c = 0; c < 256; ++c) EXPECT_EQ(e(0, c), e(1, c));
    EXPECT_EQ(embed({"Severe storm flooding"}, 256), embed({"severe STORM, flooding!"}, 256));
}

TEST(Embed, UnrelatedTextsAreDissimilar) {
    const Matrix e = embed({"lakers game", "severe storm flooding"}, 256);
    double dot = 0;
    for (std::size_t c = 0; c < 256; ++c) dot += e(0, c) * e(1, c);
    const double oracle = cosine_oracle("lakers game", "severe storm flooding", 256);
    EXPECT_NEAR(dot, oracle, 1e-12);
    EXPECT_LT(dot, 0.5);
}

TEST(Embed, RejectsTinyDimension) { EXPECT_THROW(embed({"x"}, 7), std::invalid_argument); }

TEST(Embed, FixtureCollisionRateBelowOnePercent) {
    const auto corpus = fixture_corpus();
    ASSERT_GT(corpus.size(), 100u);
    const auto rep = measure_collisions(corpus, 256);
    EXPECT_LT(rep.text_collision_rate(), 0.01) << rep.colliding_texts << " of " << rep.distinct_texts;
}

// Contract any frozen encoder must satisfy.
template <typename E>
class EncoderContract : public ::testing::Test {
protected:
    static E make();
};

template <>
HashedBagEncoder EncoderContract<HashedBagEncoder>::make() {
    return HashedBagEncoder(32);
}

template <>
LookupEncoder EncoderContract<LookupEncoder>::make() {
    LookupEncoder enc(32);
    Rng rng(4);
    for (const char* t : {"crash at Downtown", "storm", "concert"}) {
        std::vector<double> v(32);
        for (double& x : v) x = rng.normal();
        enc.add(t, v);
    }
    return enc;
}

using Encoders = ::testing::Types<HashedBagEncoder, LookupEncoder>;
TYPED_TEST_SUITE(EncoderContract, Encoders);

TYPED_TEST(EncoderContract, ShapeUnitRowsZeroRowsDeterminism) {
    const auto enc = TestFixture::make();
    const std::vector<std::string> texts{"crash at Downtown", "", "storm", "concert", "storm"};
    const Matrix a = enc.encode(texts);
    ASSERT_EQ(a.rows(), texts.size());
    ASSERT_EQ(a.cols(), enc.dim());
    for (std::size_t r = 0; r < texts.size(); ++r) {
        if (texts[r].empty()) {
            for (double v : a.row(r)) EXPECT_EQ(v, 0.0);
        } else {
            EXPECT_NEAR(row_norm(a, r), 1.0, 1e-9);
        }
    }
    EXPECT_EQ(enc.encode(texts), a);
}

TEST(ExternalEmbeddings, LoadsAndNormalizes) {
    testutil::TempDir dir("textenc");
    std::string csv = "sensor_id";
    for (int c = 0; c < 8; ++c) csv += ",f" + std::to_string(c);
    csv += "\n1,3,4,0,0,0,0,0,0\n";
    testutil::write_file(dir.file("e.csv"), csv);
    const Matrix e = load_external_embeddings(dir.file("e.csv"), 3);
    EXPECT_EQ(e.rows(), 3u);
    EXPECT_DOUBLE_EQ(e(1, 0), 0.6);
    EXPECT_DOUBLE_EQ(e(1, 1), 0.8);
    EXPECT_EQ(row_norm(e, 0), 0.0);
}

TEST(Projection, ZeroEmbeddingGivesBias) {
    Rng rng(1);
    Projection p(16, 4, rng);
    const Matrix out = project(Matrix(3, 16), p);
    for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Projection, IdentityWeights) {
    Rng rng(1);
    Projection p(8, 8, rng);
    p.w.value = Matrix(8, 8);
    for (std::size_t i = 0; i < 8; ++i) p.w.value(i, i) = 1.0;
    const Matrix e = embed({"a b c", "d"}, 8);
    EXPECT_EQ(project(e, p), e);
}

TEST(Projection, ShapeMismatch) {
    Rng rng(1);
    Projection p(16, 4, rng);
    EXPECT_THROW(project(Matrix(2, 8), p), fuse::num::ShapeError);
}

TEST(Projection, GradientMatchesFiniteDifferences) {
    Rng rng(2);
    Projection p(12, 5, rng);
    for (double& v : p.b.value.values()) v = rng.normal();
    const Matrix e = embed({"storm flooding", "concert", "crash near Downtown"}, 12);
    const Matrix readout = testutil::random_matrix(3, 5, rng);
    const auto rep = fuse::num::grad_check(
        [&](fuse::num::Tape& t) {
            auto out = project(t, t.constant(e), p);
            return t.sum(t.hadamard(t.hadamard(out, out), t.constant(readout)));
        },
        p.params(), 1e-5);
    EXPECT_LT(rep.max_rel_error, 1e-6);
}
