#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "fuse/numerics/matrix.hpp"
#include "fuse/numerics/parameter.hpp"
#include "fuse/numerics/rng.hpp"
#include "fuse/numerics/tape.hpp"

namespace fuse::stenc {

using num::Matrix;
using num::Parameter;
using num::Tape;
using num::Var;

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct STEncoderConfig {
    int layers = 2;
    int hidden = 32;
    int temporal_kernel = 3;
    double dropout_rate = 0.0;
    bool node_embedding = true;

    void validate() const {
        if (layers < 1) throw ConfigError("ST encoder needs at least one layer");
        if (hidden < 1) throw ConfigError("ST encoder hidden width must be >= 1");
        if (temporal_kernel < 1) throw ConfigError("temporal kernel must be >= 1");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
    }
};

struct STLayerParams {
    std::vector<Parameter> temporal;  // temporal_kernel matrices d x d; index j applies to step t - j
    Parameter temporal_bias;          // 1 x d
    Parameter spatial;                // d x d
    Parameter spatial_bias;           // 1 x d
};

struct STEncoderParams {
    Parameter input_w;   // 1 x d lift of the scalar reading
    Parameter input_b;   // 1 x d
    Parameter node_emb;  // N x d, present when node_embedding is on
    std::vector<STLayerParams> layers;

    num::ParamRefs params(const STEncoderConfig& cfg) {
        num::ParamRefs out{&input_w, &input_b};
        if (cfg.node_embedding) out.push_back(&node_emb);
        for (auto& l : layers) {
            for (auto& w : l.temporal) out.push_back(&w);
            out.push_back(&l.temporal_bias);
            out.push_back(&l.spatial);
            out.push_back(&l.spatial_bias);
        }
        return out;
    }
};

inline STEncoderParams init_params(const STEncoderConfig& cfg, std::size_t n_nodes, num::Rng& rng) {
    cfg.validate();
    const auto d = static_cast<std::size_t>(cfg.hidden);
    STEncoderParams p;
    p.input_w = Parameter("st.input_w", num::xavier_init(1, d, rng));
    p.input_b = Parameter("st.input_b", Matrix(1, d));
    Matrix emb(n_nodes, d);
    for (double& v : emb.values()) v = 0.1 * rng.normal();
    p.node_emb = Parameter("st.node_emb", std::move(emb), cfg.node_embedding);
    for (int l = 0; l < cfg.layers; ++l) {
        STLayerParams lp;
        const std::string prefix = "st.layer" + std::to_string(l) + ".";
        for (int j = 0; j < cfg.temporal_kernel; ++j) {
            Matrix w = num::xavier_init(d, d, rng);
            w *= 1.0 / static_cast<double>(cfg.temporal_kernel);
            lp.temporal.emplace_back(prefix + "temporal" + std::to_string(j), std::move(w));
        }
        lp.temporal_bias = Parameter(prefix + "temporal_b", Matrix(1, d));
        lp.spatial = Parameter(prefix + "spatial", num::xavier_init(d, d, rng));
        lp.spatial_bias = Parameter(prefix + "spatial_b", Matrix(1, d));
        p.layers.push_back(std::move(lp));
    }
    return p;
}

/// Trailing input steps that can influence the last-step output.
inline int receptive_field(const STEncoderConfig& cfg) { return 1 + cfg.layers * (cfg.temporal_kernel - 1); }

struct EncodeMode {
    bool training = false;
    num::Rng* dropout_rng = nullptr;
};

/// Reference encoder, per layer: causal temporal convolution + ReLU, graph mixing
/// A_hat * H * W + ReLU, residual add. The last time step's state is E_st (N x d).
/// Steps outside the receptive field of that output are never computed.
inline Var encode(Tape& tape, const Matrix& x, const Matrix& a_hat, const STEncoderConfig& cfg, STEncoderParams& p,
                  EncodeMode mode = {}) {
    cfg.validate();
    const std::size_t n = x.rows();
    const int h_in = static_cast<int>(x.cols());
    if (h_in < cfg.temporal_kernel)
        throw ConfigError("input window (" + std::to_string(h_in) + ") shorter than temporal kernel (" +
                          std::to_string(cfg.temporal_kernel) + ")");
    if (a_hat.rows() != n || a_hat.cols() != n)
        throw num::ShapeError("encode: adjacency " + a_hat.shape_str() + " for " + std::to_string(n) + " nodes");
    if (p.layers.size() != static_cast<std::size_t>(cfg.layers) || p.input_w.value.cols() != static_cast<std::size_t>(cfg.hidden))
        throw ConfigError("encode: parameters do not match the encoder config");
    if (cfg.node_embedding && p.node_emb.value.rows() != n)
        throw num::ShapeError("encode: node embedding has " + std::to_string(p.node_emb.value.rows()) + " rows for " +
                              std::to_string(n) + " nodes");

    const int k = cfg.temporal_kernel;
    const Var adj = tape.constant(a_hat);
    const Var w_in = tape.param(p.input_w);
    const Var b_in = tape.param(p.input_b);

    // States for steps [lo, h_in); earlier entries stay unset.
    const int lo = std::max(0, h_in - receptive_field(cfg));
    std::vector<Var> h(static_cast<std::size_t>(h_in));
    for (int t = lo; t < h_in; ++t) {
        Matrix col(n, 1);
        for (std::size_t i = 0; i < n; ++i) col(i, 0) = x(i, static_cast<std::size_t>(t));
        Var v = tape.add_row(tape.matmul(tape.constant(std::move(col)), w_in), b_in);
        if (cfg.node_embedding) v = tape.add(v, tape.param(p.node_emb));
        h[static_cast<std::size_t>(t)] = v;
    }

    for (int l = 0; l < cfg.layers; ++l) {
        auto& lp = p.layers[static_cast<std::size_t>(l)];
        const int out_lo = std::max(0, h_in - 1 - (cfg.layers - 1 - l) * (k - 1));
        std::vector<Var> next(static_cast<std::size_t>(h_in));
        const Var tb = tape.param(lp.temporal_bias);
        const Var ws = tape.param(lp.spatial);
        const Var bs = tape.param(lp.spatial_bias);
        for (int t = out_lo; t < h_in; ++t) {
            Var acc{};
            bool have = false;
            for (int j = 0; j < k && t - j >= 0; ++j) {
                const Var term = tape.matmul(h[static_cast<std::size_t>(t - j)], tape.param(lp.temporal[static_cast<std::size_t>(j)]));
                acc = have ? tape.add(acc, term) : term;
                have = true;
            }
            Var c = tape.relu(tape.add_row(acc, tb));
            Var s = tape.relu(tape.add_row(tape.matmul(tape.matmul(adj, c), ws), bs));
            if (mode.training && cfg.dropout_rate > 0.0 && mode.dropout_rng) {
                Matrix mask(n, static_cast<std::size_t>(cfg.hidden));
                const double keep = 1.0 - cfg.dropout_rate;
                for (double& m : mask.values()) m = mode.dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
                s = tape.hadamard(s, tape.constant(std::move(mask)));
            }
            next[static_cast<std::size_t>(t)] = tape.add(h[static_cast<std::size_t>(t)], s);
        }
        h = std::move(next);
    }
    return h[static_cast<std::size_t>(h_in - 1)];
}

}  // namespace fuse::stenc
