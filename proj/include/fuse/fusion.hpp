#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "fuse/numerics/matrix.hpp"
#include "fuse/numerics/parameter.hpp"
#include "fuse/numerics/rng.hpp"
#include "fuse/numerics/tape.hpp"

namespace fuse::fusion {

using num::Matrix;
using num::Parameter;
using num::Tape;
using num::Var;

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class FusionKind { CrossAttention, Gating, Add, Concat };

inline const char* to_string(FusionKind k) {
    switch (k) {
        case FusionKind::CrossAttention: return "cross_attention";
        case FusionKind::Gating: return "gating";
        case FusionKind::Add: return "add";
        case FusionKind::Concat: return "concat";
    }
    return "cross_attention";
}

inline FusionKind fusion_kind_from(const std::string& s) {
    for (FusionKind k : {FusionKind::CrossAttention, FusionKind::Gating, FusionKind::Add, FusionKind::Concat})
        if (s == to_string(k)) return k;
    throw ConfigError("unknown fusion kind '" + s + "'");
}

struct FusionConfig {
    int d = 32;
    int heads = 2;
    int ffn_depth = 2;  // number of linear layers in the FFN
    int ffn_width = 128;
    double ln_eps = num::kDefaultLayerNormEps;

    int head_dim() const { return d / heads; }

    void validate() const {
        if (d < 1 || heads < 1) throw ConfigError("fusion: d and heads must be >= 1");
        if (d % heads != 0)
            throw ConfigError("fusion: d (" + std::to_string(d) + ") is not divisible by heads (" +
                              std::to_string(heads) + ")");
        if (ffn_depth < 1 || ffn_width < 1) throw ConfigError("fusion: FFN depth and width must be >= 1");
    }
};

struct Linear {
    Parameter w;
    Parameter b;
};

struct FusionParams {
    Parameter wq, wk, wv, wo;  // d x d
    Parameter ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;  // 1 x d
    std::vector<Linear> ffn;
    // Variant-specific.
    Parameter gate;                    // 1 x d
    Parameter gate_ln_gamma, gate_ln_beta;
    Parameter concat_w;                // 2d x d

    num::ParamRefs params(FusionKind kind) {
        switch (kind) {
            case FusionKind::CrossAttention: {
                num::ParamRefs out{&wq, &wk, &wv, &wo, &ln1_gamma, &ln1_beta, &ln2_gamma, &ln2_beta};
                for (auto& l : ffn) {
                    out.push_back(&l.w);
                    out.push_back(&l.b);
                }
                return out;
            }
            case FusionKind::Gating: return {&gate, &gate_ln_gamma, &gate_ln_beta};
            case FusionKind::Add: return {};
            case FusionKind::Concat: return {&concat_w};
        }
        return {};
    }
};

inline FusionParams init_params(const FusionConfig& cfg, num::Rng& rng) {
    cfg.validate();
    const auto d = static_cast<std::size_t>(cfg.d);
    FusionParams p;
    p.wq = Parameter("fusion.wq", num::xavier_init(d, d, rng));
    p.wk = Parameter("fusion.wk", num::xavier_init(d, d, rng));
    p.wv = Parameter("fusion.wv", num::xavier_init(d, d, rng));
    p.wo = Parameter("fusion.wo", num::xavier_init(d, d, rng));
    p.ln1_gamma = Parameter("fusion.ln1_gamma", Matrix(1, d, 1.0));
    p.ln1_beta = Parameter("fusion.ln1_beta", Matrix(1, d));
    p.ln2_gamma = Parameter("fusion.ln2_gamma", Matrix(1, d, 1.0));
    p.ln2_beta = Parameter("fusion.ln2_beta", Matrix(1, d));
    std::size_t in = d;
    for (int l = 0; l < cfg.ffn_depth; ++l) {
        const std::size_t out = l + 1 == cfg.ffn_depth ? d : static_cast<std::size_t>(cfg.ffn_width);
        const std::string prefix = "fusion.ffn" + std::to_string(l);
        p.ffn.push_back({Parameter(prefix + ".w", num::xavier_init(in, out, rng)), Parameter(prefix + ".b", Matrix(1, out))});
        in = out;
    }
    p.gate = Parameter("fusion.gate", Matrix(1, d));
    p.gate_ln_gamma = Parameter("fusion.gate_ln_gamma", Matrix(1, d, 1.0));
    p.gate_ln_beta = Parameter("fusion.gate_ln_beta", Matrix(1, d));
    p.concat_w = Parameter("fusion.concat_w", num::xavier_init(2 * d, d, rng));
    return p;
}

/// Linear layers with ReLU between them (none after the last).
inline Var ffn(Tape& t, Var x, std::vector<Linear>& layers) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
        x = t.add_row(t.matmul(x, t.param(layers[l].w)), t.param(layers[l].b));
        if (l + 1 < layers.size()) x = t.relu(x);
    }
    return x;
}

inline void check_inputs(const Tape& t, Var e_st, Var e_text, const FusionConfig& cfg) {
    const Matrix& a = t.value(e_st);
    const Matrix& b = t.value(e_text);
    if (!a.same_shape(b) || a.cols() != static_cast<std::size_t>(cfg.d))
        throw num::ShapeError("fusion: e_st " + a.shape_str() + " and e_text " + b.shape_str() + " must both be N x " +
                              std::to_string(cfg.d));
}

/// Multi-head attention with E_st as queries and E_text as keys/values. When
/// `attention` is given it receives the per-head N x N softmax maps.
inline Var multi_head_attention(Tape& t, Var e_st, Var e_text, const FusionConfig& cfg, FusionParams& p,
                                std::vector<Var>* attention = nullptr) {
    cfg.validate();
    check_inputs(t, e_st, e_text, cfg);
    const Var q = t.matmul(e_st, t.param(p.wq));
    const Var k = t.matmul(e_text, t.param(p.wk));
    const Var v = t.matmul(e_text, t.param(p.wv));
    const auto dk = static_cast<std::size_t>(cfg.head_dim());
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<Var> heads;
    for (int h = 0; h < cfg.heads; ++h) {
        const std::size_t c0 = static_cast<std::size_t>(h) * dk, c1 = c0 + dk;
        const Var qh = cfg.heads == 1 ? q : t.slice_cols(q, c0, c1);
        const Var kh = cfg.heads == 1 ? k : t.slice_cols(k, c0, c1);
        const Var vh = cfg.heads == 1 ? v : t.slice_cols(v, c0, c1);
        const Var scores = t.scale(t.matmul(qh, t.transpose(kh)), inv_sqrt_dk);
        const Var attn = t.softmax_rows(scores);
        if (attention) attention->push_back(attn);
        heads.push_back(t.matmul(attn, vh));
    }
    const Var cat = heads.size() == 1 ? heads[0] : t.concat_cols(heads);
    return t.matmul(cat, t.param(p.wo));
}

/// H_C = LN(MHA + E_st); H_fused = LN(H_C + FFN(H_C)).
inline Var cross_attention_fuse(Tape& t, Var e_st, Var e_text, const FusionConfig& cfg, FusionParams& p,
                                std::vector<Var>* attention = nullptr) {
    const Var mha = multi_head_attention(t, e_st, e_text, cfg, p, attention);
    const Var hc = t.layer_norm_rows(t.add(mha, e_st), t.param(p.ln1_gamma), t.param(p.ln1_beta), cfg.ln_eps);
    return t.layer_norm_rows(t.add(hc, ffn(t, hc, p.ffn)), t.param(p.ln2_gamma), t.param(p.ln2_beta), cfg.ln_eps);
}

/// Gating: LN(sigmoid(g) * e_st + (1 - sigmoid(g)) * e_text) with a per-dimension gate.
/// Add: e_st + e_text. Concat: [e_st | e_text] * W_c.
inline Var variant_fuse(Tape& t, FusionKind kind, Var e_st, Var e_text, const FusionConfig& cfg, FusionParams& p) {
    cfg.validate();
    check_inputs(t, e_st, e_text, cfg);
    switch (kind) {
        case FusionKind::CrossAttention: return cross_attention_fuse(t, e_st, e_text, cfg, p);
        case FusionKind::Gating: {
            const Var s = t.sigmoid(t.param(p.gate));
            const Var one_minus = t.add_scalar(t.scale(s, -1.0), 1.0);
            const Var mixed = t.add(t.mul_row(e_st, s), t.mul_row(e_text, one_minus));
            return t.layer_norm_rows(mixed, t.param(p.gate_ln_gamma), t.param(p.gate_ln_beta), cfg.ln_eps);
        }
        case FusionKind::Add: return t.add(e_st, e_text);
        case FusionKind::Concat: return t.matmul(t.concat_cols({e_st, e_text}), t.param(p.concat_w));
    }
    throw ConfigError("unknown fusion kind");
}

/// Per-head attention maps (h matrices, N x N) for inspection.
inline std::vector<Matrix> attention_weights(const Matrix& e_st, const Matrix& e_text, const FusionConfig& cfg,
                                             FusionParams& p) {
    Tape t;
    std::vector<Var> maps;
    multi_head_attention(t, t.constant(e_st), t.constant(e_text), cfg, p, &maps);
    std::vector<Matrix> out;
    for (Var v : maps) out.push_back(t.value(v));
    return out;
}

}  // namespace fuse::fusion
