#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "fuse/numerics/parameter.hpp"

namespace fuse::num {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adaptive-moment optimizer over a fixed parameter list.
class Adam {
public:
    Adam(ParamRefs params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        if (!(cfg_.lr >= 0.0)) throw std::invalid_argument("Adam: lr must be nonnegative");
        for (auto* p : params_) {
            m_.emplace_back(p->value.rows(), p->value.cols());
            v_.emplace_back(p->value.rows(), p->value.cols());
        }
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Parameter& p = *params_[k];
            if (!p.trainable) continue;
            Matrix& m = m_[k];
            Matrix& v = v_[k];
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double g = p.grad[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[i] / c1;
                const double vhat = v[i] / c2;
                p.value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    std::uint64_t steps() const noexcept { return t_; }
    const ParamRefs& params() const noexcept { return params_; }
    const AdamConfig& config() const noexcept { return cfg_; }

private:
    ParamRefs params_;
    AdamConfig cfg_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    std::uint64_t t_ = 0;
};

}  // namespace fuse::num
