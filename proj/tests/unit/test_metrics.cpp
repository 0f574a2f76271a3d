#include <gtest/gtest.h>

#include <cmath>

#include "fuse/metrics.hpp"
#include "test_util.hpp"

using namespace fuse::metrics;
using fuse::events::EventRecord;
using fuse::events::Impact;
using fuse::num::Matrix;
using fuse::num::Rng;

namespace {

struct Brute {
    double mae, rmse, mape;
};

// Straight loops over the definitions, in long double.
Brute brute_force(const Matrix& y, const Matrix& yh, const Matrix& mask) {
    long double a = 0, s = 0, p = 0;
    long n = 0, np = 0;
    for (std::size_t i = 0; i < y.rows(); ++i)
        for (std::size_t j = 0; j < y.cols(); ++j) {
            if (y(i, j) == 0.0 || mask(i, j) == 0.0) continue;
            const long double e = static_cast<long double>(yh(i, j)) - y(i, j);
            a += e < 0 ? -e : e;
            s += e * e;
            ++n;
            if (std::abs(y(i, j)) >= 1.0) {
                p += (e < 0 ? -e : e) / std::abs(static_cast<long double>(y(i, j)));
                ++np;
            }
        }
    return {static_cast<double>(a / n), static_cast<double>(std::sqrt(s / n)), static_cast<double>(100 * p / np)};
}

fuse::data::TrafficSeries series_of_length(std::size_t t) {
    fuse::data::TrafficSeries s;
    s.values = Matrix(1, t, 1.0);
    s.start_time = fuse::Timestamp::parse("2012-03-01 00:00");
    return s;
}

EventRecord record(const fuse::data::TrafficSeries& s, std::size_t a, std::size_t b, Impact im) {
    return {0, s.time_at(a), s.time_at(b), im, im == Impact::None ? "" : "x"};
}

}  // namespace

TEST(Compute, HandCase) {
    const auto r = compute(Matrix{{1, 2}}, Matrix{{2, 4}});
    EXPECT_DOUBLE_EQ(r.mae, 1.5);
    EXPECT_DOUBLE_EQ(r.rmse, std::sqrt(2.5));
    // |2-1|/1 and |4-2|/2 are both 1
    EXPECT_DOUBLE_EQ(r.mape, 100.0);
    EXPECT_DOUBLE_EQ(r.mape, brute_force(Matrix{{1, 2}}, Matrix{{2, 4}}, Matrix(1, 2, 1.0)).mape);
    EXPECT_EQ(r.count, 2u);
}

TEST(Compute, PerfectPrediction) {
    const auto r = compute(Matrix{{3, 4}}, Matrix{{3, 4}});
    EXPECT_EQ(r.mae, 0.0);
    EXPECT_EQ(r.rmse, 0.0);
    EXPECT_EQ(r.mape, 0.0);
}

TEST(Compute, MissingTargetsExcluded) {
    const auto r = compute(Matrix{{0, 2}}, Matrix{{100, 2}});
    EXPECT_EQ(r.mae, 0.0);
    EXPECT_EQ(r.count, 1u);
}

TEST(Compute, MapeFloorAndErrors) {
    auto r = compute(Matrix{{0.5, 2}}, Matrix{{1.5, 3}});
    EXPECT_DOUBLE_EQ(r.mape, 50.0);
    EXPECT_EQ(r.mape_count, 1u);
    r = compute(Matrix{{0.5}}, Matrix{{1.0}});
    EXPECT_TRUE(std::isnan(r.mape));
    EXPECT_THROW(compute(Matrix{{0, 0}}, Matrix{{1, 1}}), MetricError);
    EXPECT_THROW(compute(Matrix{{1, 1}}, Matrix{{1, 1, 1}}), MetricError);
}

TEST(Compute, MatchesBruteForceOnRandomInstances) {
    Rng rng(99);
    for (int inst = 0; inst < 100; ++inst) {
        const std::size_t r = 1 + rng.below(8), c = 1 + rng.below(12);
        Matrix y(r, c), yh(r, c), mask(r, c, 1.0);
        for (std::size_t i = 0; i < y.size(); ++i) {
            y[i] = rng.uniform() < 0.15 ? 0.0 : rng.uniform(0.2, 80.0);
            yh[i] = y[i] + rng.normal() * 5.0;
            if (rng.uniform() < 0.1) mask[i] = 0.0;
        }
        y[0] = 30.0;
        mask[0] = 1.0;
        const auto got = compute(y, yh, &mask);
        const auto want = brute_force(y, yh, mask);
        ASSERT_NEAR(got.mae, want.mae, 1e-9);
        ASSERT_NEAR(got.rmse, want.rmse, 1e-9);
        ASSERT_NEAR(got.mape, want.mape, 1e-9);
        ASSERT_GE(got.rmse, got.mae);
    }
}

TEST(PerHorizon, StructureAndSlices) {
    Rng rng(1);
    std::vector<Prediction> preds;
    for (int k = 0; k < 5; ++k) {
        Matrix y(3, 12), yh(3, 12);
        for (std::size_t i = 0; i < y.size(); ++i) {
            y[i] = 10 + rng.uniform();
            yh[i] = y[i] + static_cast<double>(i % 12);  // error equals the step index
        }
        preds.push_back({static_cast<std::size_t>(k), y, yh});
    }
    const auto reps = per_horizon(preds);
    ASSERT_EQ(reps.size(), 4u);
    EXPECT_EQ(reps[0].horizon, "3");
    EXPECT_NEAR(reps[0].mae, 2.0, 1e-12);
    EXPECT_NEAR(reps[1].mae, 5.0, 1e-12);
    EXPECT_NEAR(reps[2].mae, 11.0, 1e-12);
    EXPECT_EQ(reps[3].horizon, "average");
    EXPECT_NEAR(reps[3].mae, 5.5, 1e-12);
    EXPECT_THROW(per_horizon(preds, {13}), MetricError);
}

TEST(PerHorizon, ConstantErrorIsEqualEverywhere) {
    std::vector<Prediction> preds{{0, Matrix(2, 12, 5.0), Matrix(2, 12, 6.0)}};
    for (const auto& r : per_horizon(preds)) EXPECT_DOUBLE_EQ(r.mae, 1.0);
}

TEST(PerHorizon, TwoStepBruteForce) {
    const Matrix y{{1, 2}, {3, 0}}, yh{{2, 2}, {1, 5}};
    const auto reps = per_horizon({{0, y, yh}}, {1, 2});
    EXPECT_DOUBLE_EQ(reps[0].mae, (1.0 + 2.0) / 2);
    EXPECT_DOUBLE_EQ(reps[1].mae, 0.0);
    EXPECT_EQ(reps[1].count, 1u);
    EXPECT_DOUBLE_EQ(reps[2].mae, 3.0 / 3);
}

TEST(Stratify, NoEventsGivesSingleNoneStratum) {
    const auto s = series_of_length(100);
    std::vector<Prediction> preds;
    for (std::size_t a = 0; a < 20; ++a) preds.push_back({a, Matrix(1, 12, 2.0), Matrix(1, 12, 3.0)});
    const auto strata = stratify(preds, s, {});
    ASSERT_EQ(strata.size(), 1u);
    EXPECT_EQ(strata[0].impact, Impact::None);
    EXPECT_EQ(strata[0].samples, 20u);
}

TEST(Stratify, CountsMatchScriptOracle) {
    const auto s = series_of_length(200);
    const std::vector<EventRecord> recs{record(s, 40, 49, Impact::High), record(s, 45, 60, Impact::Minor),
                                        record(s, 100, 110, Impact::Moderate), record(s, 150, 155, Impact::None)};
    std::vector<Prediction> preds;
    for (std::size_t a = 0; a < 180; ++a) preds.push_back({a, Matrix(1, 12, 2.0), Matrix(1, 12, 3.0)});
    // Oracle: the target window is [a+1, a+12]; take the max class over overlapping events.
    std::map<Impact, std::size_t> expect;
    for (std::size_t a = 0; a < 180; ++a) {
        Impact best = Impact::None;
        for (auto [lo, hi, im] : std::vector<std::tuple<std::size_t, std::size_t, Impact>>{
                 {40, 49, Impact::High}, {45, 60, Impact::Minor}, {100, 110, Impact::Moderate}, {150, 155, Impact::None}})
            if (a + 1 <= hi && a + 12 >= lo && static_cast<int>(im) > static_cast<int>(best)) best = im;
        ++expect[best];
    }
    const auto strata = stratify(preds, s, recs);
    std::size_t total = 0;
    for (const auto& st : strata) {
        EXPECT_EQ(st.samples, expect[st.impact]) << fuse::events::to_string(st.impact);
        total += st.samples;
    }
    EXPECT_EQ(total, preds.size());
    EXPECT_EQ(strata.size(), 4u);
}

TEST(Report, CsvLayout) {
    testutil::TempDir dir("metrics");
    const auto overall = per_horizon({{0, Matrix{{1, 2}}, Matrix{{2, 4}}}}, {1});
    write_report_csv(dir.file("r.csv"), overall, {});
    const auto text = testutil::read_file(dir.file("r.csv"));
    EXPECT_EQ(text.substr(0, text.find('\n')), "stratum,horizon,mae,rmse,mape,count");
    EXPECT_NE(text.find("all,average,1.5,"), std::string::npos);
}
