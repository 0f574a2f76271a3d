#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "fuse/numerics/matrix.hpp"
#include "fuse/numerics/rng.hpp"

namespace fuse::num {

struct Parameter {
    Parameter() = default;
    Parameter(std::string n, Matrix v, bool train = true)
        : value(std::move(v)), grad(value.rows(), value.cols()), name(std::move(n)), trainable(train) {}

    Matrix value;
    Matrix grad;
    std::string name;
    bool trainable = true;

    void zero_grad() { grad.fill(0.0); }
};

/// Glorot/Xavier uniform draw in +-sqrt(6 / (rows + cols)).
inline Matrix xavier_init(std::size_t rows, std::size_t cols, Rng& rng) {
    if (rows == 0 || cols == 0) throw ShapeError("xavier_init: empty shape");
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Matrix m(rows, cols);
    for (double& v : m.values()) v = rng.uniform(-bound, bound);
    return m;
}

/// Non-owning list of parameters, in a stable order.
using ParamRefs = std::vector<Parameter*>;

inline void zero_grads(const ParamRefs& params) {
    for (auto* p : params) p->zero_grad();
}

}  // namespace fuse::num
