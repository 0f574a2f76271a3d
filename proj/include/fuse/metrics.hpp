#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fuse/data.hpp"
#include "fuse/events/record.hpp"
#include "fuse/numerics/matrix.hpp"
#include "fuse/util/csv.hpp"

namespace fuse::metrics {

using num::Matrix;

class MetricError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Targets below this magnitude are excluded from MAPE only.
inline constexpr double kMapeFloor = 1.0;

struct MetricReport {
    double mae = 0.0;
    double rmse = 0.0;
    double mape = 0.0;  // percent; NaN when no target clears the MAPE floor
    std::size_t count = 0;
    std::size_t mape_count = 0;
    std::string horizon = "average";
};

/// Running sums for masked MAE / RMSE / MAPE.
class Accumulator {
public:
    /// Adds entries of columns [c0, c1). Missing targets (exact 0) and entries with a
    /// zero in `mask` are skipped.
    void add(const Matrix& y, const Matrix& y_hat, const Matrix* mask = nullptr, std::size_t c0 = 0,
             std::size_t c1 = static_cast<std::size_t>(-1)) {
        if (!y.same_shape(y_hat))
            throw MetricError("metrics: y " + y.shape_str() + " vs y_hat " + y_hat.shape_str());
        if (mask && !mask->same_shape(y)) throw MetricError("metrics: mask shape " + mask->shape_str());
        c1 = std::min(c1, y.cols());
        for (std::size_t r = 0; r < y.rows(); ++r)
            for (std::size_t c = c0; c < c1; ++c) {
                const double t = y(r, c);
                if (t == 0.0 || (mask && (*mask)(r, c) == 0.0)) continue;
                const double e = y_hat(r, c) - t;
                abs_ += std::abs(e);
                sq_ += e * e;
                ++n_;
                if (std::abs(t) >= kMapeFloor) {
                    ape_ += std::abs(e / t);
                    ++n_mape_;
                }
            }
    }

    std::size_t count() const noexcept { return n_; }

    MetricReport report(std::string horizon = "average") const {
        if (n_ == 0) throw MetricError("no evaluable entries");
        MetricReport r;
        r.count = n_;
        r.mape_count = n_mape_;
        r.mae = abs_ / static_cast<double>(n_);
        r.rmse = std::sqrt(sq_ / static_cast<double>(n_));
        r.mape = n_mape_ ? 100.0 * ape_ / static_cast<double>(n_mape_) : std::numeric_limits<double>::quiet_NaN();
        r.horizon = std::move(horizon);
        return r;
    }

private:
    double abs_ = 0.0, sq_ = 0.0, ape_ = 0.0;
    std::size_t n_ = 0, n_mape_ = 0;
};

inline MetricReport compute(const Matrix& y, const Matrix& y_hat, const Matrix* mask = nullptr) {
    Accumulator acc;
    acc.add(y, y_hat, mask);
    return acc.report();
}

/// One evaluated window: targets and predictions in original units.
struct Prediction {
    std::size_t t_anchor = 0;
    Matrix y;
    Matrix y_hat;
};

/// Reports for each listed horizon (1-based step) followed by the all-steps average.
inline std::vector<MetricReport> per_horizon(const std::vector<Prediction>& preds,
                                             const std::vector<int>& horizons = {3, 6, 12}) {
    if (preds.empty()) throw MetricError("no evaluable entries");
    const std::size_t h_out = preds.front().y.cols();
    std::vector<MetricReport> out;
    for (int h : horizons) {
        if (h < 1 || static_cast<std::size_t>(h) > h_out)
            throw MetricError("horizon " + std::to_string(h) + " exceeds H_out = " + std::to_string(h_out));
        Accumulator acc;
        for (const auto& p : preds) acc.add(p.y, p.y_hat, nullptr, static_cast<std::size_t>(h - 1), static_cast<std::size_t>(h));
        out.push_back(acc.report(std::to_string(h)));
    }
    Accumulator all;
    for (const auto& p : preds) all.add(p.y, p.y_hat);
    out.push_back(all.report("average"));
    return out;
}

/// Strongest impact among events whose window overlaps the sample's target window.
inline events::Impact label_sample(std::size_t t_anchor, std::size_t h_out, const data::TrafficSeries& series,
                                   const std::vector<events::EventRecord>& records) {
    const Timestamp first = series.time_at(t_anchor + 1);
    const Timestamp last = series.time_at(t_anchor + h_out);
    events::Impact best = events::Impact::None;
    for (const auto& r : records)
        if (r.window_start <= last && r.window_end >= first) best = events::max_impact(best, r.impact);
    return best;
}

struct StratumReport {
    events::Impact impact = events::Impact::None;
    std::size_t samples = 0;
    std::vector<MetricReport> reports;  // per horizon, then average

    const MetricReport& average() const { return reports.back(); }
};

/// Partitions predictions by label and reports each non-empty stratum, None first.
inline std::vector<StratumReport> stratify(const std::vector<Prediction>& preds, const data::TrafficSeries& series,
                                           const std::vector<events::EventRecord>& records,
                                           const std::vector<int>& horizons = {3, 6, 12}) {
    std::vector<std::vector<Prediction>> buckets(events::kAllImpacts.size());
    for (const auto& p : preds)
        buckets[static_cast<std::size_t>(label_sample(p.t_anchor, p.y.cols(), series, records))].push_back(p);
    std::vector<StratumReport> out;
    for (auto im : events::kAllImpacts) {
        auto& b = buckets[static_cast<std::size_t>(im)];
        if (b.empty()) continue;
        out.push_back({im, b.size(), per_horizon(b, horizons)});
    }
    return out;
}

inline std::string fmt_metric(double v) { return std::isnan(v) ? "nan" : csv::fmt(v); }

/// Report CSV: stratum,horizon,mae,rmse,mape,count. Overall rows use stratum "all".
inline void write_report_csv(const std::string& path, const std::vector<MetricReport>& overall,
                             const std::vector<StratumReport>& strata) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << "stratum,horizon,mae,rmse,mape,count\n";
    auto row = [&](const std::string& s, const MetricReport& r) {
        out << s << ',' << r.horizon << ',' << fmt_metric(r.mae) << ',' << fmt_metric(r.rmse) << ','
            << fmt_metric(r.mape) << ',' << r.count << '\n';
    };
    for (const auto& r : overall) row("all", r);
    for (const auto& s : strata)
        for (const auto& r : s.reports) row(events::to_string(s.impact), r);
}

}  // namespace fuse::metrics
