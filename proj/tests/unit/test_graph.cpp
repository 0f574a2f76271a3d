#include <gtest/gtest.h>

#include <cmath>

#include "fuse/graph.hpp"
#include "test_util.hpp"

using namespace fuse::graph;
using fuse::num::Matrix;
using fuse::num::Rng;

namespace {

Matrix sym_distances(std::size_t n, Rng& rng) {
    Matrix d(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) d(i, j) = d(j, i) = 3.0 * rng.uniform();
    return d;
}

double asymmetry(const Matrix& a) {
    double m = 0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - a(j, i)));
    return m;
}

}  // namespace

TEST(Haversine, KnownDistance) {
    // One degree of latitude along a meridian is R * pi / 180.
    EXPECT_NEAR(haversine_km({0, 34.0, -118.0}, {1, 35.0, -118.0}), kEarthRadiusKm * std::numbers::pi / 180.0, 1e-9);
    EXPECT_EQ(haversine_km({0, 10, 10}, {1, 10, 10}), 0.0);
}

TEST(Gaussian, ZeroDistanceGivesUnitWeight) {
    Matrix d{{0, 0}, {0, 0}};
    const auto net = build_adjacency_gaussian(d, 1.0);
    EXPECT_EQ(net.adjacency(0, 1), 1.0);
    EXPECT_EQ(net.adjacency(0, 0), 0.0);
}

TEST(Gaussian, FarPairIsThresholdedAway) {
    Matrix d{{0, 10}, {10, 0}};
    EXPECT_EQ(build_adjacency_gaussian(d, 1.0, 0.1).adjacency(0, 1), 0.0);
}

TEST(Gaussian, HandCaseThreeSensors) {
    Matrix d{{0, 1, 2}, {1, 0, 3}, {2, 3, 0}};
    const auto a = build_adjacency_gaussian(d, 2.0, 0.1).adjacency;
    EXPECT_DOUBLE_EQ(a(0, 1), std::exp(-0.25));
    EXPECT_DOUBLE_EQ(a(0, 2), std::exp(-1.0));
    EXPECT_DOUBLE_EQ(a(1, 2), std::exp(-2.25));
    EXPECT_EQ(asymmetry(a), 0.0);
}

TEST(Gaussian, RejectsAsymmetricAndNegative) {
    EXPECT_THROW(build_adjacency_gaussian(Matrix{{0, 1}, {2, 0}}, 1.0), GraphError);
    EXPECT_THROW(build_adjacency_gaussian(Matrix{{0, -1}, {-1, 0}}, 1.0), GraphError);
    EXPECT_THROW(build_adjacency_gaussian(Matrix{{0, 1}, {1, 0}}, 0.0), GraphError);
}

TEST(Gaussian, ThresholdingIsIdempotent) {
    Rng rng(3);
    const Matrix d = sym_distances(8, rng);
    const double sigma = 1.2;
    const auto net = build_adjacency_gaussian(d, sigma, 0.1);
    // Implied distances from the kept weights; dropped pairs become unlinked.
    Matrix implied(8, 8, std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < 8; ++i) implied(i, i) = 0.0;
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j)
            if (i != j && net.adjacency(i, j) > 0) implied(i, j) = sigma * std::sqrt(-std::log(net.adjacency(i, j)));
    const auto again = build_adjacency_gaussian(implied, sigma, 0.1);
    for (std::size_t i = 0; i < 64; ++i) {
        if (net.adjacency[i] > 0) EXPECT_NEAR(again.adjacency[i], net.adjacency[i], 1e-12);
        else EXPECT_EQ(again.adjacency[i], 0.0);
    }
}

TEST(Normalize, SingleNode) {
    RoadNetwork net{{{0, 0, 0}}, Matrix(1, 1)};
    EXPECT_EQ(normalize_adjacency(net), Matrix{{1.0}});
}

TEST(Normalize, TwoNodesUnitWeight) {
    RoadNetwork net{{}, Matrix{{0, 1}, {1, 0}}};
    const Matrix a = normalize_adjacency(net);
    for (double v : a.values()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Normalize, SymmetricAndSpectrallyBounded) {
    Rng rng(5);
    const auto net = build_adjacency_gaussian(sym_distances(5, rng), 1.5, 0.1);
    const Matrix a = normalize_adjacency(net);
    EXPECT_LT(asymmetry(a), 1e-12);
    // Power iteration on |A|: spectral radius of D^-1/2 (A+I) D^-1/2 is at most 1.
    Matrix v(5, 1, 1.0);
    double lambda = 0;
    for (int it = 0; it < 500; ++it) {
        Matrix w = fuse::num::matmul(a, v);
        double norm = 0;
        for (double x : w.values()) norm += x * x;
        norm = std::sqrt(norm);
        lambda = norm;
        for (double& x : w.values()) x /= norm;
        v = w;
    }
    EXPECT_LE(lambda, 1.0 + 1e-9);
}

TEST(Normalize, PermutationEquivariance) {
    Rng rng(9);
    const std::size_t n = 6;
    const auto net = build_adjacency_gaussian(sym_distances(n, rng), 1.5, 0.1);
    std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    RoadNetwork permuted{{}, Matrix(n, n)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) permuted.adjacency(i, j) = net.adjacency(perm[i], perm[j]);
    const Matrix a = normalize_adjacency(net), b = normalize_adjacency(permuted);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(b(i, j), a(perm[i], perm[j]), 1e-15);
}

TEST(FromAdjacency, SymmetrizesWithWarning) {
    testutil::WarningCapture cap;
    const auto net = from_adjacency({}, Matrix{{0, 1.0}, {0.5, 0}});
    EXPECT_DOUBLE_EQ(net.adjacency(0, 1), 0.75);
    EXPECT_DOUBLE_EQ(net.adjacency(1, 0), 0.75);
    ASSERT_EQ(cap.warnings.size(), 1u);
}

TEST(Files, SensorsAndDistances) {
    testutil::TempDir dir("graph");
    testutil::write_file(dir.file("sensors.csv"), "id,lat,lon\n1,34.1,-118.2\n0,34.0,-118.3\n");
    const auto sensors = load_sensors(dir.file("sensors.csv"));
    ASSERT_EQ(sensors.size(), 2u);
    EXPECT_EQ(sensors[0].id, 0);
    EXPECT_DOUBLE_EQ(sensors[1].lat, 34.1);

    testutil::write_file(dir.file("dist.csv"), "from,to,km\n0,1,2.5\n1,0,2.0\n");
    testutil::WarningCapture cap;
    const Matrix d = load_distances(dir.file("dist.csv"), 3);
    EXPECT_EQ(d(0, 1), 2.0);
    EXPECT_EQ(d(1, 0), 2.0);
    EXPECT_TRUE(std::isinf(d(0, 2)));
    EXPECT_EQ(cap.warnings.size(), 1u);
    const auto net = build_adjacency_gaussian(d, 2.0);
    EXPECT_EQ(net.adjacency(0, 2), 0.0);
}

TEST(Files, BadSensorFilesRejected) {
    testutil::TempDir dir("graph_bad");
    testutil::write_file(dir.file("a.csv"), "id,lat,lon\n0,95,0\n");
    EXPECT_THROW(load_sensors(dir.file("a.csv")), GraphError);
    testutil::write_file(dir.file("b.csv"), "id,lat,lon\n0,1,1\n2,1,1\n");
    EXPECT_THROW(load_sensors(dir.file("b.csv")), GraphError);
    testutil::write_file(dir.file("c.csv"), "sensor,lat,lon\n0,1,1\n");
    EXPECT_THROW(load_sensors(dir.file("c.csv")), GraphError);
}

TEST(Coordinates, DefaultSigmaIsSampleStd) {
    Matrix d{{0, 1, 3}, {1, 0, 2}, {3, 2, 0}};
    // values 1, 2, 3: sample std 1
    EXPECT_DOUBLE_EQ(default_sigma(d), 1.0);
}
