#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fuse/numerics/parameter.hpp"
#include "fuse/numerics/tape.hpp"

namespace fuse::num {

class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Builds the scalar loss on a fresh tape; parameters must enter through Tape::param.
using LossBuilder = std::function<Var(Tape&)>;

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::vector<GradCheckEntry> per_param;
};

inline double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

/// Compares analytic gradients against central differences (f(p+h) - f(p-h)) / 2h
/// entry by entry. Only trainable parameters are checked.
inline GradCheckReport grad_check(const LossBuilder& build, const ParamRefs& params, double h = 1e-6) {
    if (!(h >= 1e-7 && h <= 1e-3)) throw std::invalid_argument("grad_check: step must lie in [1e-7, 1e-3]");

    auto evaluate = [&](const std::string& who) {
        Tape t;
        const double v = t.scalar(build(t));
        if (!std::isfinite(v)) throw NonFiniteLoss("grad_check: non-finite loss while perturbing '" + who + "'");
        return v;
    };

    zero_grads(params);
    {
        Tape t;
        Var loss = build(t);
        if (!std::isfinite(t.scalar(loss))) throw NonFiniteLoss("grad_check: non-finite loss at base point");
        t.backward(loss);
    }

    GradCheckReport report;
    for (Parameter* p : params) {
        if (!p->trainable) continue;
        GradCheckEntry entry{p->name, 0.0};
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double saved = p->value[i];
            p->value[i] = saved + h;
            const double up = evaluate(p->name);
            p->value[i] = saved - h;
            const double down = evaluate(p->name);
            p->value[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            entry.max_rel_error = std::max(entry.max_rel_error, relative_error(p->grad[i], numeric));
        }
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        report.per_param.push_back(std::move(entry));
    }
    return report;
}

}  // namespace fuse::num
