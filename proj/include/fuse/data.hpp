#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fuse/numerics/matrix.hpp"
#include "fuse/util/csv.hpp"
#include "fuse/util/log.hpp"
#include "fuse/util/time.hpp"

namespace fuse::data {

using num::Matrix;

class DataError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class SeriesKind { Speed, Flow };

inline const char* to_string(SeriesKind k) { return k == SeriesKind::Speed ? "speed" : "flow"; }
inline SeriesKind series_kind_from(const std::string& s) {
    if (s == "speed") return SeriesKind::Speed;
    if (s == "flow") return SeriesKind::Flow;
    throw DataError("unknown series kind '" + s + "'");
}

/// N x T traffic status. An exact 0 marks a missing observation.
struct TrafficSeries {
    Matrix values;
    int interval_minutes = 5;
    Timestamp start_time{};
    SeriesKind kind = SeriesKind::Speed;

    std::size_t nodes() const noexcept { return values.rows(); }
    std::size_t steps() const noexcept { return values.cols(); }
    Timestamp time_at(std::size_t t) const {
        return start_time.plus_minutes(static_cast<std::int64_t>(t) * interval_minutes);
    }
};

inline constexpr double kStdFloor = 1e-6;

struct NormStats {
    double mean = 0.0;
    double std = 1.0;
};

struct TimeRange {
    std::size_t begin = 0;
    std::size_t end = 0;  // exclusive
};

/// Global mean / population std over the observed (nonzero) entries of the range.
inline NormStats fit_normalizer(const TrafficSeries& series, TimeRange range) {
    if (range.begin >= range.end || range.end > series.steps())
        throw DataError("fit_normalizer: empty or out-of-bounds training range");
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t n = 0; n < series.nodes(); ++n)
        for (std::size_t t = range.begin; t < range.end; ++t)
            if (const double v = series.values(n, t); v != 0.0) {
                sum += v;
                ++count;
            }
    if (count == 0) throw DataError("fit_normalizer: every training entry is missing");
    const double mean = sum / static_cast<double>(count);
    double ss = 0.0;
    for (std::size_t n = 0; n < series.nodes(); ++n)
        for (std::size_t t = range.begin; t < range.end; ++t)
            if (const double v = series.values(n, t); v != 0.0) ss += (v - mean) * (v - mean);
    double sd = std::sqrt(ss / static_cast<double>(count));
    if (sd < kStdFloor) {
        log_warn("fit_normalizer: training values are (near) constant; std floored at 1e-6");
        sd = kStdFloor;
    }
    return {mean, sd};
}

/// 1 where observed, 0 where missing.
inline Matrix observed_mask(const Matrix& raw) {
    Matrix m(raw.rows(), raw.cols());
    for (std::size_t i = 0; i < raw.size(); ++i) m[i] = raw[i] != 0.0 ? 1.0 : 0.0;
    return m;
}

/// z-scores observed entries; missing entries stay 0.
inline Matrix normalize(const Matrix& raw, const NormStats& stats) {
    if (!(stats.std > 0.0)) throw DataError("normalize: std must be positive");
    Matrix z(raw.rows(), raw.cols());
    for (std::size_t i = 0; i < raw.size(); ++i) z[i] = raw[i] != 0.0 ? (raw[i] - stats.mean) / stats.std : 0.0;
    return z;
}

inline TrafficSeries normalize(const TrafficSeries& series, const NormStats& stats) {
    TrafficSeries out = series;
    out.values = normalize(series.values, stats);
    return out;
}

inline Matrix denormalize(const Matrix& z, const NormStats& stats) {
    Matrix out(z.rows(), z.cols());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] * stats.std + stats.mean;
    return out;
}

struct WindowSample {
    Matrix x;  // N x H_in, normalized
    Matrix y;  // N x H_out, original units (0 = missing)
    std::size_t t_anchor = 0;
};

inline std::size_t window_count(std::size_t steps, std::size_t h_in, std::size_t h_out, std::size_t stride) {
    if (steps < h_in + h_out) return 0;
    return (steps - h_in - h_out) / stride + 1;
}

/// Sliding windows in chronological order. The anchor is the last input step.
inline std::vector<WindowSample> make_windows(const TrafficSeries& raw, const NormStats& stats, std::size_t h_in,
                                              std::size_t h_out, std::size_t stride = 1) {
    if (h_in < 1 || h_out < 1) throw DataError("make_windows: H_in and H_out must be >= 1");
    if (stride < 1) throw DataError("make_windows: stride must be >= 1");
    const std::size_t steps = raw.steps(), n = raw.nodes();
    if (steps < h_in + h_out)
        throw DataError("make_windows: series has " + std::to_string(steps) + " steps; at least " +
                        std::to_string(h_in + h_out) + " required");
    const Matrix z = normalize(raw.values, stats);
    std::vector<WindowSample> out;
    const std::size_t count = window_count(steps, h_in, h_out, stride);
    out.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t start = k * stride;
        WindowSample w{Matrix(n, h_in), Matrix(n, h_out), start + h_in - 1};
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t t = 0; t < h_in; ++t) w.x(i, t) = z(i, start + t);
            for (std::size_t t = 0; t < h_out; ++t) w.y(i, t) = raw.values(i, start + h_in + t);
        }
        out.push_back(std::move(w));
    }
    return out;
}

struct SplitSpec {
    double train_frac = 0.7;
    double val_frac = 0.1;
    double test_frac = 0.2;

    void validate() const {
        for (double f : {train_frac, val_frac, test_frac})
            if (!(f > 0.0 && f < 1.0)) throw DataError("split fractions must each lie in (0, 1)");
        if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
            throw DataError("split fractions must sum to 1");
    }
};

template <typename T>
struct Split {
    std::vector<T> train, val, test;
    std::size_t train_planned = 0, val_planned = 0, test_planned = 0;
    /// Samples removed because their target window reached into the next split.
    std::size_t dropped = 0;
};

/// Contiguous chronological partition. When drop_boundary is set, trailing samples of
/// train/val whose target window overlaps the first target step of the following
/// split are removed (and counted), so no target step is shared across splits.
inline Split<WindowSample> chronological_split(std::vector<WindowSample> samples, const SplitSpec& spec,
                                               std::size_t h_out, bool drop_boundary = true) {
    spec.validate();
    Split<WindowSample> s;
    const std::size_t n = samples.size();
    if (n == 0) return s;
    if (n == 1) {
        log_warn("chronological_split: a single sample; everything goes to train");
        s.train = std::move(samples);
        s.train_planned = 1;
        return s;
    }
    const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.train_frac));
    const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.val_frac)));
    s.train_planned = n_train;
    s.val_planned = n_val;
    s.test_planned = n - n_train - n_val;
    for (std::size_t i = 0; i < n; ++i) {
        auto& dest = i < n_train ? s.train : (i < n_train + n_val ? s.val : s.test);
        dest.push_back(std::move(samples[i]));
    }
    if (drop_boundary) {
        auto trim = [&](std::vector<WindowSample>& earlier, const std::vector<WindowSample>& later) {
            if (later.empty()) return;
            const std::size_t next_first_target = later.front().t_anchor + 1;
            while (!earlier.empty() && earlier.back().t_anchor + h_out >= next_first_target) {
                earlier.pop_back();
                ++s.dropped;
            }
        };
        trim(s.val, s.test);
        trim(s.train, s.val.empty() ? s.test : s.val);
        if (s.dropped > 0)
            log_info("chronological_split: dropped " + std::to_string(s.dropped) + " boundary-crossing samples");
    }
    return s;
}

// ---- file formats ----

inline nlohmann::json sidecar_json(const TrafficSeries& s) {
    return {{"n", s.nodes()},
            {"t", s.steps()},
            {"interval_minutes", s.interval_minutes},
            {"start_time", s.start_time.str()},
            {"kind", to_string(s.kind)}};
}

/// CSV layout: header `t,v_0,...,v_{N-1}`, one row per time step.
inline void write_series_csv(const TrafficSeries& s, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << "t";
    for (std::size_t i = 0; i < s.nodes(); ++i) out << ",v_" << i;
    out << '\n';
    for (std::size_t t = 0; t < s.steps(); ++t) {
        out << t;
        for (std::size_t i = 0; i < s.nodes(); ++i) out << ',' << csv::fmt(s.values(i, t));
        out << '\n';
    }
}

/// Raw little-endian f64, T x N row-major.
inline void write_series_bin(const TrafficSeries& s, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    for (std::size_t t = 0; t < s.steps(); ++t)
        for (std::size_t i = 0; i < s.nodes(); ++i) {
            const double v = s.values(i, t);
            unsigned char b[8];
            std::uint64_t u;
            std::memcpy(&u, &v, 8);
            for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(u >> (8 * k));
            out.write(reinterpret_cast<const char*>(b), 8);
        }
}

inline void write_sidecar(const TrafficSeries& s, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << sidecar_json(s).dump(2) << '\n';
}

inline TrafficSeries read_series(const std::string& data_path, const std::string& sidecar_path) {
    std::ifstream side(sidecar_path);
    if (!side) throw DataError("cannot open sidecar '" + sidecar_path + "'");
    nlohmann::json meta;
    try {
        side >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("sidecar '" + sidecar_path + "': " + e.what());
    }
    TrafficSeries s;
    const auto n = meta.at("n").get<std::size_t>();
    const auto t = meta.at("t").get<std::size_t>();
    if (n < 1 || t < 1) throw DataError("sidecar: n and t must be >= 1");
    s.interval_minutes = meta.at("interval_minutes").get<int>();
    s.start_time = Timestamp::parse(meta.at("start_time").get<std::string>());
    s.kind = series_kind_from(meta.at("kind").get<std::string>());
    s.values = Matrix(n, t);

    const bool is_bin = data_path.size() >= 4 && data_path.compare(data_path.size() - 4, 4, ".bin") == 0;
    if (is_bin) {
        std::ifstream in(data_path, std::ios::binary);
        if (!in) throw DataError("cannot open '" + data_path + "'");
        for (std::size_t ti = 0; ti < t; ++ti)
            for (std::size_t i = 0; i < n; ++i) {
                unsigned char b[8];
                if (!in.read(reinterpret_cast<char*>(b), 8)) throw DataError("'" + data_path + "' is truncated");
                std::uint64_t u = 0;
                for (int k = 0; k < 8; ++k) u |= static_cast<std::uint64_t>(b[k]) << (8 * k);
                double v;
                std::memcpy(&v, &u, 8);
                s.values(i, ti) = v;
            }
    } else {
        const auto table = csv::read(data_path);
        if (table.header.size() != n + 1 || table.header[0] != "t")
            throw DataError("'" + data_path + "': header must be t,v_0..v_" + std::to_string(n - 1));
        if (table.rows.size() != t)
            throw DataError("'" + data_path + "': " + std::to_string(table.rows.size()) + " rows, sidecar says " +
                            std::to_string(t));
        for (std::size_t ti = 0; ti < t; ++ti)
            for (std::size_t i = 0; i < n; ++i) s.values(i, ti) = csv::to_double(table.rows[ti][i + 1], data_path);
    }
    for (double v : s.values.values())
        if (!std::isfinite(v) || v < 0.0) throw DataError("'" + data_path + "': values must be finite and >= 0");
    return s;
}

}  // namespace fuse::data
