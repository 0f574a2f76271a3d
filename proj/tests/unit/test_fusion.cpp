#include <gtest/gtest.h>

#include <cmath>

#include "fuse/fusion.hpp"
#include "fuse/numerics/grad_check.hpp"
#include "test_util.hpp"

using namespace fuse::fusion;
using fuse::num::Matrix;
using fuse::num::Rng;
using fuse::num::Tape;

namespace {

Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix fuse_value(FusionKind kind, const Matrix& a, const Matrix& b, const FusionConfig& cfg, FusionParams& p) {
    Tape t;
    return t.value(variant_fuse(t, kind, t.constant(a), t.constant(b), cfg, p));
}

// Row-wise LN with gamma 1, beta 0, written out directly.
Matrix ln_oracle(const Matrix& x, double eps) {
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        long double mean = 0, var = 0;
        for (double v : x.row(r)) mean += v;
        mean /= x.cols();
        for (double v : x.row(r)) var += (v - mean) * (v - mean);
        var /= x.cols();
        for (std::size_t c = 0; c < x.cols(); ++c)
            out(r, c) = static_cast<double>((x(r, c) - mean) / std::sqrt(var + eps));
    }
    return out;
}

Matrix ffn_value(const Matrix& x, FusionParams& p) {
    Tape t;
    return t.value(ffn(t, t.constant(x), p.ffn));
}

void randomize_norms(FusionParams& p, Rng& rng) {
    for (auto* q : {&p.ln1_gamma, &p.ln1_beta, &p.ln2_gamma, &p.ln2_beta, &p.gate, &p.gate_ln_gamma, &p.gate_ln_beta})
        for (double& v : q->value.values()) v += 0.3 * rng.normal();
    for (auto& l : p.ffn)
        for (double& v : l.b.value.values()) v = 0.1 * rng.normal();
}

const std::vector<FusionKind> kKinds{FusionKind::CrossAttention, FusionKind::Gating, FusionKind::Add,
                                     FusionKind::Concat};

}  // namespace

TEST(Config, HeadsMustDivideWidth) {
    EXPECT_THROW((FusionConfig{10, 3, 2, 16}.validate()), ConfigError);
    EXPECT_NO_THROW((FusionConfig{12, 3, 2, 16}.validate()));
    EXPECT_THROW(fusion_kind_from("mean"), ConfigError);
}

TEST(CrossAttention, HandCaseSingleNode) {
    const FusionConfig cfg{2, 1, 1, 2};
    Rng rng(1);
    auto p = init_params(cfg, rng);
    for (auto* w : {&p.wq, &p.wk, &p.wv, &p.wo}) w->value = identity(2);
    p.ffn[0].w.value = Matrix(2, 2);
    const Matrix e_st{{1.0, 0.0}}, e_text{{0.0, 3.0}};
    // One key: the softmax weight is 1, so the attention output is v = [0, 3].
    // LN([1, 3]) = [-1, 1] / sqrt(1 + eps); the second LN sees a zero FFN.
    const double eps = cfg.ln_eps;
    const double a = 1.0 / std::sqrt(1.0 + eps);
    const double b = a / std::sqrt(a * a + eps);
    const Matrix out = fuse_value(FusionKind::CrossAttention, e_st, e_text, cfg, p);
    EXPECT_NEAR(out(0, 0), -b, 1e-12);
    EXPECT_NEAR(out(0, 1), b, 1e-12);
}

TEST(CrossAttention, ZeroTextReduction) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const FusionConfig cfg{8, 2, 2, 16};
        auto p = init_params(cfg, rng);
        randomize_norms(p, rng);
        const Matrix e_st = testutil::random_matrix(5, 8, rng);
        const Matrix out = fuse_value(FusionKind::CrossAttention, e_st, Matrix(5, 8), cfg, p);
        // ln1/ln2 gammas are not 1 here, so apply them on top of the plain LN oracle.
        auto affine = [](Matrix m, const Matrix& g, const Matrix& b) {
            for (std::size_t r = 0; r < m.rows(); ++r)
                for (std::size_t c = 0; c < m.cols(); ++c) m(r, c) = m(r, c) * g(0, c) + b(0, c);
            return m;
        };
        const Matrix hc = affine(ln_oracle(e_st, cfg.ln_eps), p.ln1_gamma.value, p.ln1_beta.value);
        Matrix inner = ffn_value(hc, p);
        for (std::size_t i = 0; i < inner.size(); ++i) inner[i] += hc[i];
        const Matrix expect = affine(ln_oracle(inner, cfg.ln_eps), p.ln2_gamma.value, p.ln2_beta.value);
        for (std::size_t i = 0; i < out.size(); ++i) ASSERT_NEAR(out[i], expect[i], 1e-6);
    }
}

TEST(CrossAttention, ShapeSweep) {
    Rng rng(3);
    for (int n : {1, 2, 7})
        for (int h : {1, 2, 4}) {
            const FusionConfig cfg{8, h, 2, 12};
            auto p = init_params(cfg, rng);
            const Matrix out = fuse_value(FusionKind::CrossAttention, testutil::random_matrix(n, 8, rng),
                                          testutil::random_matrix(n, 8, rng), cfg, p);
            EXPECT_EQ(out.rows(), static_cast<std::size_t>(n));
            EXPECT_EQ(out.cols(), 8u);
        }
}

TEST(CrossAttention, ShapeMismatchRejected) {
    Rng rng(3);
    const FusionConfig cfg{8, 2, 2, 12};
    auto p = init_params(cfg, rng);
    EXPECT_THROW(fuse_value(FusionKind::CrossAttention, Matrix(3, 8), Matrix(2, 8), cfg, p), fuse::num::ShapeError);
    EXPECT_THROW(fuse_value(FusionKind::Concat, Matrix(3, 6), Matrix(3, 6), cfg, p), fuse::num::ShapeError);
}

TEST(Attention, RowsSumToOne) {
    Rng rng(4);
    for (int draw = 0; draw < 100; ++draw) {
        const FusionConfig cfg{8, 4, 2, 16};
        auto p = init_params(cfg, rng);
        const auto maps = attention_weights(testutil::random_matrix(6, 8, rng, 3.0),
                                            testutil::random_matrix(6, 8, rng, 3.0), cfg, p);
        ASSERT_EQ(maps.size(), 4u);
        for (const auto& m : maps)
            for (std::size_t r = 0; r < m.rows(); ++r) {
                double s = 0;
                for (double v : m.row(r)) s += v;
                ASSERT_NEAR(s, 1.0, 1e-6);
            }
    }
}

TEST(Attention, UniformKeysGiveUniformRows) {
    Rng rng(5);
    const FusionConfig cfg{4, 2, 1, 4};
    auto p = init_params(cfg, rng);
    Matrix text(5, 4);
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 4; ++c) text(r, c) = 0.5 + c;
    for (const auto& m : attention_weights(testutil::random_matrix(5, 4, rng), text, cfg, p))
        for (double v : m.values()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(Attention, TwoNodeHandCase) {
    Rng rng(6);
    const FusionConfig cfg{2, 1, 1, 2};
    auto p = init_params(cfg, rng);
    p.wq.value = identity(2);
    p.wk.value = identity(2);
    const Matrix q{{1, 0}, {0, 2}}, k{{1, 1}, {3, -1}};
    const auto m = attention_weights(q, k, cfg, p)[0];
    for (std::size_t i = 0; i < 2; ++i) {
        double s[2];
        for (std::size_t j = 0; j < 2; ++j) s[j] = (q(i, 0) * k(j, 0) + q(i, 1) * k(j, 1)) / std::sqrt(2.0);
        const double z = std::exp(s[0]) + std::exp(s[1]);
        EXPECT_NEAR(m(i, 0), std::exp(s[0]) / z, 1e-15);
        EXPECT_NEAR(m(i, 1), std::exp(s[1]) / z, 1e-15);
    }
}

TEST(Attention, LargeScaleStaysFinite) {
    Rng rng(7);
    const FusionConfig cfg{8, 2, 2, 16};
    auto p = init_params(cfg, rng);
    const Matrix a = testutil::random_matrix(4, 8, rng, 1e3), b = testutil::random_matrix(4, 8, rng, 1e3);
    for (const auto& m : attention_weights(a, b, cfg, p))
        for (double v : m.values()) EXPECT_TRUE(std::isfinite(v));
    for (double v : fuse_value(FusionKind::CrossAttention, a, b, cfg, p).values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Fusion, JointPermutationEquivariance) {
    Rng rng(8);
    const std::size_t n = 6;
    const std::vector<std::size_t> perm{2, 5, 0, 4, 1, 3};
    for (auto kind : kKinds) {
        const FusionConfig cfg{8, 2, 2, 16};
        auto p = init_params(cfg, rng);
        randomize_norms(p, rng);
        const Matrix a = testutil::random_matrix(n, 8, rng), b = testutil::random_matrix(n, 8, rng);
        Matrix ap(n, 8), bp(n, 8);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < 8; ++c) {
                ap(i, c) = a(perm[i], c);
                bp(i, c) = b(perm[i], c);
            }
        const Matrix out = fuse_value(kind, a, b, cfg, p), outp = fuse_value(kind, ap, bp, cfg, p);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(outp(i, c), out(perm[i], c), 1e-12) << to_string(kind);
    }
}

TEST(Variants, AddWithZeroText) {
    Rng rng(9);
    const FusionConfig cfg{8, 2, 2, 16};
    auto p = init_params(cfg, rng);
    const Matrix a = testutil::random_matrix(3, 8, rng);
    EXPECT_EQ(fuse_value(FusionKind::Add, a, Matrix(3, 8), cfg, p), a);
    EXPECT_TRUE(p.params(FusionKind::Add).empty());
}

TEST(Variants, GatingClosedGateKeepsText) {
    Rng rng(10);
    const FusionConfig cfg{8, 2, 2, 16};
    auto p = init_params(cfg, rng);
    p.gate.value.fill(-800.0);
    const Matrix a = testutil::random_matrix(3, 8, rng), b = testutil::random_matrix(3, 8, rng);
    const Matrix out = fuse_value(FusionKind::Gating, a, b, cfg, p), expect = ln_oracle(b, cfg.ln_eps);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-12);
}

TEST(Variants, ConcatSelector) {
    Rng rng(11);
    const FusionConfig cfg{4, 2, 2, 8};
    auto p = init_params(cfg, rng);
    p.concat_w.value = Matrix(8, 4);
    for (std::size_t i = 0; i < 4; ++i) p.concat_w.value(i, i) = 1.0;
    const Matrix a = testutil::random_matrix(3, 4, rng);
    EXPECT_EQ(fuse_value(FusionKind::Concat, a, testutil::random_matrix(3, 4, rng), cfg, p), a);
}

TEST(Fusion, GradientMatchesFiniteDifferences) {
    Rng rng(12);
    const FusionConfig cfg{8, 2, 2, 16};
    for (auto kind : kKinds) {
        if (kind == FusionKind::Add) continue;
        auto p = init_params(cfg, rng);
        randomize_norms(p, rng);
        const Matrix a = testutil::random_matrix(4, 8, rng), b = testutil::random_matrix(4, 8, rng);
        const Matrix readout = testutil::random_matrix(4, 8, rng);
        const auto rep = fuse::num::grad_check(
            [&](Tape& t) {
                return t.sum(t.hadamard(variant_fuse(t, kind, t.constant(a), t.constant(b), cfg, p), t.constant(readout)));
            },
            p.params(kind), 1e-5);
        for (const auto& e : rep.per_param) EXPECT_LT(e.max_rel_error, 1e-4) << to_string(kind) << " " << e.name;
    }
}

TEST(Fusion, GradientFlowsIntoBothInputs) {
    Rng rng(13);
    const FusionConfig cfg{8, 2, 2, 16};
    auto p = init_params(cfg, rng);
    fuse::num::Parameter st("st", testutil::random_matrix(4, 8, rng)), text("text", testutil::random_matrix(4, 8, rng));
    const Matrix readout = testutil::random_matrix(4, 8, rng);
    const auto rep = fuse::num::grad_check(
        [&](Tape& t) {
            return t.sum(t.hadamard(cross_attention_fuse(t, t.param(st), t.param(text), cfg, p), t.constant(readout)));
        },
        {&st, &text}, 1e-5);
    EXPECT_LT(rep.max_rel_error, 1e-4);
}
