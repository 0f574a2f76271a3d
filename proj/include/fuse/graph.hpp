#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fuse/numerics/matrix.hpp"
#include "fuse/util/csv.hpp"
#include "fuse/util/log.hpp"

namespace fuse::graph {

using num::Matrix;

class GraphError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct Sensor {
    int id = 0;
    double lat = 0.0;
    double lon = 0.0;
};

/// Undirected weighted sensor graph. The stored adjacency has a zero diagonal;
/// self-loops are added by normalize_adjacency.
struct RoadNetwork {
    std::vector<Sensor> sensors;
    Matrix adjacency;

    std::size_t size() const noexcept { return adjacency.rows(); }
};

inline constexpr double kEarthRadiusKm = 6371.0088;
inline constexpr double kDefaultThreshold = 0.1;

inline double haversine_km(const Sensor& a, const Sensor& b) {
    constexpr double rad = std::numbers::pi / 180.0;
    const double dlat = (b.lat - a.lat) * rad;
    const double dlon = (b.lon - a.lon) * rad;
    const double s = std::sin(dlat / 2) * std::sin(dlat / 2) +
                     std::cos(a.lat * rad) * std::cos(b.lat * rad) * std::sin(dlon / 2) * std::sin(dlon / 2);
    return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(s)));
}

inline void validate_sensors(const std::vector<Sensor>& sensors) {
    for (std::size_t i = 0; i < sensors.size(); ++i) {
        const Sensor& s = sensors[i];
        if (s.id != static_cast<int>(i))
            throw GraphError("sensor ids must be dense and ordered: position " + std::to_string(i) + " has id " +
                             std::to_string(s.id));
        if (!(std::abs(s.lat) <= 90.0) || !(std::abs(s.lon) <= 180.0))
            throw GraphError("sensor " + std::to_string(s.id) + " has invalid coordinates");
    }
}

inline Matrix distance_matrix(const std::vector<Sensor>& sensors) {
    validate_sensors(sensors);
    const std::size_t n = sensors.size();
    Matrix d(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) d(i, j) = d(j, i) = haversine_km(sensors[i], sensors[j]);
    return d;
}

/// Sample standard deviation of the finite, nonzero off-diagonal distances.
inline double default_sigma(const Matrix& distances) {
    std::vector<double> vals;
    for (std::size_t i = 0; i < distances.rows(); ++i)
        for (std::size_t j = i + 1; j < distances.cols(); ++j) {
            const double v = distances(i, j);
            if (std::isfinite(v) && v > 0.0) vals.push_back(v);
        }
    if (vals.size() < 2) return 1.0;
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double ss = 0.0;
    for (double v : vals) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(vals.size() - 1));
    return sd > 0.0 ? sd : mean;
}

/// Thresholded Gaussian kernel: w_ij = exp(-d_ij^2 / sigma^2) when that value
/// reaches the threshold, else 0. Infinite distances mean "no road link".
inline RoadNetwork build_adjacency_gaussian(const Matrix& distances, double sigma,
                                            double threshold = kDefaultThreshold,
                                            std::vector<Sensor> sensors = {}) {
    const std::size_t n = distances.rows();
    if (distances.cols() != n) throw GraphError("distance matrix must be square, got " + distances.shape_str());
    if (!(sigma > 0.0)) throw GraphError("sigma must be positive");
    if (!(threshold >= 0.0 && threshold < 1.0)) throw GraphError("threshold must lie in [0, 1)");
    for (std::size_t i = 0; i < n; ++i) {
        if (distances(i, i) != 0.0) throw GraphError("distance diagonal must be zero at node " + std::to_string(i));
        for (std::size_t j = 0; j < n; ++j) {
            const double d = distances(i, j);
            if (std::isnan(d) || d < 0.0)
                throw GraphError("negative or NaN distance at (" + std::to_string(i) + "," + std::to_string(j) + ")");
            if (d != distances(j, i))
                throw GraphError("asymmetric distances at (" + std::to_string(i) + "," + std::to_string(j) + ")");
        }
    }
    if (sensors.empty()) {
        sensors.resize(n);
        for (std::size_t i = 0; i < n; ++i) sensors[i].id = static_cast<int>(i);
    } else if (sensors.size() != n) {
        throw GraphError("sensor count " + std::to_string(sensors.size()) + " does not match distances " +
                         distances.shape_str());
    }
    RoadNetwork net{std::move(sensors), Matrix(n, n)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double d = distances(i, j);
            const double w = std::isinf(d) ? 0.0 : std::exp(-(d * d) / (sigma * sigma));
            net.adjacency(i, j) = w >= threshold ? w : 0.0;
        }
    return net;
}

inline RoadNetwork build_from_coordinates(std::vector<Sensor> sensors, std::optional<double> sigma = std::nullopt,
                                          double threshold = kDefaultThreshold) {
    const Matrix d = distance_matrix(sensors);
    return build_adjacency_gaussian(d, sigma.value_or(default_sigma(d)), threshold, std::move(sensors));
}

/// Wraps a precomputed adjacency. Directed input is symmetrized as (A + A^T) / 2.
inline RoadNetwork from_adjacency(std::vector<Sensor> sensors, Matrix a) {
    const std::size_t n = a.rows();
    if (a.cols() != n) throw GraphError("adjacency must be square, got " + a.shape_str());
    bool asym = false;
    for (std::size_t i = 0; i < n; ++i) {
        a(i, i) = 0.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            if (a(i, j) != a(j, i)) asym = true;
            a(i, j) = a(j, i) = 0.5 * (a(i, j) + a(j, i));
        }
    }
    for (double v : a.values())
        if (!(v >= 0.0 && v <= 1.0)) throw GraphError("adjacency weights must lie in [0, 1]");
    if (asym) log_warn("adjacency was not symmetric; replaced by (A + A^T) / 2");
    if (sensors.empty()) {
        sensors.resize(n);
        for (std::size_t i = 0; i < n; ++i) sensors[i].id = static_cast<int>(i);
    }
    return {std::move(sensors), std::move(a)};
}

/// D^{-1/2} (A + I) D^{-1/2}.
inline Matrix normalize_adjacency(const RoadNetwork& net) {
    const std::size_t n = net.size();
    Matrix a = net.adjacency;
    for (std::size_t i = 0; i < n; ++i) a(i, i) = 1.0;
    std::vector<double> inv_sqrt(n);
    for (std::size_t i = 0; i < n; ++i) {
        double deg = 0.0;
        for (std::size_t j = 0; j < n; ++j) deg += a(i, j);
        inv_sqrt[i] = 1.0 / std::sqrt(deg);
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a(i, j) *= inv_sqrt[i] * inv_sqrt[j];
    return a;
}

/// Nodes within one hop (nonzero weight) of node i, excluding i.
inline std::vector<int> neighbors(const RoadNetwork& net, int i) {
    std::vector<int> out;
    for (std::size_t j = 0; j < net.size(); ++j)
        if (static_cast<int>(j) != i && net.adjacency(static_cast<std::size_t>(i), j) > 0.0)
            out.push_back(static_cast<int>(j));
    return out;
}

inline std::vector<Sensor> load_sensors(const std::string& path) {
    const auto t = csv::read(path);
    if (t.header != std::vector<std::string>{"id", "lat", "lon"})
        throw GraphError("'" + path + "': expected header id,lat,lon");
    std::vector<Sensor> out;
    for (const auto& r : t.rows)
        out.push_back({static_cast<int>(csv::to_int(r[0], "id")), csv::to_double(r[1], "lat"),
                       csv::to_double(r[2], "lon")});
    std::sort(out.begin(), out.end(), [](const Sensor& a, const Sensor& b) { return a.id < b.id; });
    validate_sensors(out);
    return out;
}

/// Reads `from,to,km` triplets into an N x N distance matrix. Missing pairs are
/// infinite; a pair listed in one direction only is mirrored, and when both
/// directions are listed the shorter one is kept.
inline Matrix load_distances(const std::string& path, std::size_t n) {
    const auto t = csv::read(path);
    if (t.header != std::vector<std::string>{"from", "to", "km"})
        throw GraphError("'" + path + "': expected header from,to,km");
    Matrix d(n, n, std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < n; ++i) d(i, i) = 0.0;
    bool conflict = false;
    for (const auto& r : t.rows) {
        const auto i = csv::to_int(r[0], "from"), j = csv::to_int(r[1], "to");
        const double km = csv::to_double(r[2], "km");
        if (i < 0 || j < 0 || static_cast<std::size_t>(i) >= n || static_cast<std::size_t>(j) >= n)
            throw GraphError("'" + path + "': sensor index out of range");
        if (km < 0.0) throw GraphError("'" + path + "': negative distance");
        if (i == j) continue;
        double& a = d(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
        double& b = d(static_cast<std::size_t>(j), static_cast<std::size_t>(i));
        if (std::isfinite(a) && a != km) conflict = true;
        const double v = std::min(a, km);
        a = b = v;
    }
    if (conflict) log_warn("'" + path + "': conflicting directed distances; kept the shorter");
    return d;
}

}  // namespace fuse::graph
