#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>
#include <nlohmann/json.hpp>

#include "fuse/data.hpp"
#include "fuse/fusion.hpp"
#include "fuse/metrics.hpp"
#include "fuse/numerics/adam.hpp"
#include "fuse/numerics/matrix.hpp"
#include "fuse/numerics/parameter.hpp"
#include "fuse/numerics/rng.hpp"
#include "fuse/numerics/tape.hpp"
#include "fuse/stenc.hpp"
#include "fuse/textenc.hpp"
#include "fuse/util/csv.hpp"
#include "fuse/util/log.hpp"

namespace fuse::model {

using num::Matrix;
using num::Parameter;
using num::Tape;
using num::Var;

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Disabled feeds all-zero text embeddings: the event-blind control.
enum class EventMode { Enabled, Disabled };

inline const char* to_string(EventMode m) { return m == EventMode::Enabled ? "enabled" : "disabled"; }
inline EventMode event_mode_from(const std::string& s) {
    if (s == "enabled") return EventMode::Enabled;
    if (s == "disabled") return EventMode::Disabled;
    throw ConfigError("unknown event mode '" + s + "'");
}

struct ModelConfig {
    std::size_t n_nodes = 0;
    int h_in = 12;
    int h_out = 12;
    std::size_t d_text = 256;
    stenc::STEncoderConfig st;
    fusion::FusionConfig fusion;
    fusion::FusionKind kind = fusion::FusionKind::CrossAttention;
    EventMode event_mode = EventMode::Enabled;

    std::size_t d() const { return static_cast<std::size_t>(fusion.d); }

    void validate() const {
        if (n_nodes < 1) throw ConfigError("model: n_nodes must be >= 1");
        if (h_in < 1 || h_out < 1) throw ConfigError("model: H_in and H_out must be >= 1");
        if (d_text < textenc::kMinTextDim) throw ConfigError("model: d_text must be >= 8");
        st.validate();
        fusion.validate();
        if (st.hidden != fusion.d)
            throw ConfigError("model: encoder width " + std::to_string(st.hidden) + " differs from fusion d " +
                              std::to_string(fusion.d));
        if (h_in < st.temporal_kernel) throw ConfigError("model: H_in shorter than the temporal kernel");
    }

    nlohmann::json to_json() const {
        return {{"n_nodes", n_nodes},
                {"h_in", h_in},
                {"h_out", h_out},
                {"d_text", d_text},
                {"st", {{"layers", st.layers}, {"hidden", st.hidden}, {"temporal_kernel", st.temporal_kernel},
                        {"dropout_rate", st.dropout_rate}, {"node_embedding", st.node_embedding}}},
                {"fusion", {{"d", fusion.d}, {"heads", fusion.heads}, {"ffn_depth", fusion.ffn_depth},
                            {"ffn_width", fusion.ffn_width}, {"ln_eps", fusion.ln_eps}}},
                {"kind", fusion::to_string(kind)},
                {"event_mode", to_string(event_mode)}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.n_nodes = j.at("n_nodes").get<std::size_t>();
        c.h_in = j.at("h_in").get<int>();
        c.h_out = j.at("h_out").get<int>();
        c.d_text = j.at("d_text").get<std::size_t>();
        const auto& s = j.at("st");
        c.st = {s.at("layers").get<int>(), s.at("hidden").get<int>(), s.at("temporal_kernel").get<int>(),
                s.at("dropout_rate").get<double>(), s.at("node_embedding").get<bool>()};
        const auto& f = j.at("fusion");
        c.fusion = {f.at("d").get<int>(), f.at("heads").get<int>(), f.at("ffn_depth").get<int>(),
                    f.at("ffn_width").get<int>(), f.at("ln_eps").get<double>()};
        c.kind = fusion::fusion_kind_from(j.at("kind").get<std::string>());
        c.event_mode = event_mode_from(j.at("event_mode").get<std::string>());
        c.validate();
        return c;
    }
};

struct DecoderParams {
    Parameter w;  // d x H_out
    Parameter b;  // 1 x H_out
};

/// Intermediate values of one forward pass.
struct ForwardVars {
    Var e_st;
    Var e_text;  // projected to d
    Var fused;
    Var pred;    // normalized, N x H_out
};

/// Encoder -> text projection -> fusion -> fully connected decoder.
class Model {
public:
    Model(ModelConfig cfg, Matrix a_hat, data::NormStats norm, std::uint64_t seed)
        : cfg_(std::move(cfg)), a_hat_(std::move(a_hat)), norm_(norm) {
        cfg_.validate();
        if (a_hat_.rows() != cfg_.n_nodes || a_hat_.cols() != cfg_.n_nodes)
            throw ConfigError("model: adjacency " + a_hat_.shape_str() + " for " + std::to_string(cfg_.n_nodes) + " nodes");
        const num::Rng root(seed);
        num::Rng r_st = root.split("st"), r_proj = root.split("proj"), r_fusion = root.split("fusion"),
                 r_dec = root.split("decoder");
        st_ = stenc::init_params(cfg_.st, cfg_.n_nodes, r_st);
        proj_ = textenc::Projection(cfg_.d_text, cfg_.d(), r_proj);
        fusion_ = fusion::init_params(cfg_.fusion, r_fusion);
        dec_.w = Parameter("decoder.w", num::xavier_init(cfg_.d(), static_cast<std::size_t>(cfg_.h_out), r_dec));
        dec_.b = Parameter("decoder.b", Matrix(1, static_cast<std::size_t>(cfg_.h_out)));
        zero_text_ = Matrix(cfg_.n_nodes, cfg_.d_text);
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    const Matrix& adjacency() const noexcept { return a_hat_; }
    const data::NormStats& norm() const noexcept { return norm_; }

    stenc::STEncoderParams& encoder() noexcept { return st_; }
    textenc::Projection& projection() noexcept { return proj_; }
    fusion::FusionParams& fusion_params() noexcept { return fusion_; }
    DecoderParams& decoder() noexcept { return dec_; }

    /// Parameters the optimizer updates for the configured variant. The frozen
    /// text encoder has none.
    num::ParamRefs parameters() {
        num::ParamRefs out = st_.params(cfg_.st);
        for (auto* p : proj_.params()) out.push_back(p);
        for (auto* p : fusion_.params(cfg_.kind)) out.push_back(p);
        out.push_back(&dec_.w);
        out.push_back(&dec_.b);
        return out;
    }

    /// Every named tensor, including inactive variant parameters (checkpoint contents).
    num::ParamRefs all_parameters() {
        num::ParamRefs out{&st_.input_w, &st_.input_b, &st_.node_emb};
        for (auto& l : st_.layers) {
            for (auto& w : l.temporal) out.push_back(&w);
            out.insert(out.end(), {&l.temporal_bias, &l.spatial, &l.spatial_bias});
        }
        out.insert(out.end(), {&proj_.w, &proj_.b});
        for (auto k : {fusion::FusionKind::CrossAttention, fusion::FusionKind::Gating, fusion::FusionKind::Concat})
            for (auto* p : fusion_.params(k)) out.push_back(p);
        out.insert(out.end(), {&dec_.w, &dec_.b});
        return out;
    }

    /// Frozen text embedding (N x d_text) for per-sensor event texts.
    Matrix embed_texts(const std::vector<std::string>& texts) const {
        if (texts.size() != cfg_.n_nodes)
            throw ConfigError("model: " + std::to_string(texts.size()) + " event texts for " +
                              std::to_string(cfg_.n_nodes) + " sensors");
        return textenc::embed(texts, cfg_.d_text);
    }

    ForwardVars forward(Tape& t, const Matrix& x, const Matrix& text_embedding, stenc::EncodeMode mode = {}) {
        if (x.rows() != cfg_.n_nodes || x.cols() != static_cast<std::size_t>(cfg_.h_in))
            throw ConfigError("model: input window " + x.shape_str() + ", expected " + std::to_string(cfg_.n_nodes) +
                              "x" + std::to_string(cfg_.h_in));
        if (text_embedding.rows() != cfg_.n_nodes || text_embedding.cols() != cfg_.d_text)
            throw ConfigError("model: text embedding " + text_embedding.shape_str() + ", expected " +
                              std::to_string(cfg_.n_nodes) + "x" + std::to_string(cfg_.d_text));
        ForwardVars f;
        f.e_st = stenc::encode(t, x, a_hat_, cfg_.st, st_, mode);
        const Matrix& text = cfg_.event_mode == EventMode::Disabled ? zero_text_ : text_embedding;
        f.e_text = textenc::project(t, t.constant(text), proj_);
        f.fused = fusion::variant_fuse(t, cfg_.kind, f.e_st, f.e_text, cfg_.fusion, fusion_);
        f.pred = t.add_row(t.matmul(f.fused, t.param(dec_.w)), t.param(dec_.b));
        return f;
    }

    ForwardVars forward(Tape& t, const data::WindowSample& s, const std::vector<std::string>& texts) {
        return forward(t, s.x, embed_texts(texts));
    }

    /// Predictions in original units.
    Matrix predict(const Matrix& x, const Matrix& text_embedding) {
        Tape t;
        return data::denormalize(t.value(forward(t, x, text_embedding).pred), norm_);
    }

private:
    ModelConfig cfg_;
    Matrix a_hat_;
    data::NormStats norm_;
    stenc::STEncoderParams st_;
    textenc::Projection proj_;
    fusion::FusionParams fusion_;
    DecoderParams dec_;
    Matrix zero_text_;
};

/// A training/evaluation sample paired with its frozen text embedding.
struct Example {
    const data::WindowSample* window = nullptr;
    const Matrix* text = nullptr;
};

/// Sum of |denormalized prediction - target| over observed targets, on the tape.
inline Var masked_abs_error(Tape& t, const Model& m, Var pred, const Matrix& y, std::size_t& count) {
    const Matrix mask = data::observed_mask(y);
    for (double v : mask.values()) count += v != 0.0 ? 1 : 0;
    const Var den = t.add_scalar(t.scale(pred, m.norm().std), m.norm().mean);
    return t.masked_abs_sum(den, y, mask);
}

/// Masked MAE of a batch, built on the tape. Returns the loss (or an invalid Var when
/// nothing is observed) and reports the summed error and count.
struct BatchLoss {
    Var loss;
    double abs_sum = 0.0;
    std::size_t count = 0;
};

inline BatchLoss batch_loss(Tape& t, Model& m, std::span<const Example> batch, stenc::EncodeMode mode = {}) {
    BatchLoss out;
    Var total{};
    bool have = false;
    for (const auto& ex : batch) {
        const ForwardVars f = m.forward(t, ex.window->x, *ex.text, mode);
        const Var e = masked_abs_error(t, m, f.pred, ex.window->y, out.count);
        total = have ? t.add(total, e) : e;
        have = true;
    }
    if (!have || out.count == 0) return out;
    out.abs_sum = t.scalar(total);
    out.loss = t.scale(total, 1.0 / static_cast<double>(out.count));
    return out;
}

inline std::vector<metrics::Prediction> predict_all(Model& m, std::span<const Example> examples) {
    std::vector<metrics::Prediction> out;
    out.reserve(examples.size());
    for (const auto& ex : examples)
        out.push_back({ex.window->t_anchor, ex.window->y, m.predict(ex.window->x, *ex.text)});
    return out;
}

inline double evaluate_mae(Model& m, std::span<const Example> examples) {
    metrics::Accumulator acc;
    for (const auto& ex : examples) acc.add(ex.window->y, m.predict(ex.window->x, *ex.text));
    return acc.report().mae;
}

struct TrainConfig {
    double lr = 1e-3;
    std::size_t batch_size = 32;
    int max_epochs = 100;
    int patience = 10;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
        if (patience < 1) throw ConfigError("train: patience must be >= 1");
    }
};

struct EpochRecord {
    int epoch = 0;
    double train_mae = 0.0;
    double val_mae = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    int best_epoch = 0;
    double best_val = std::numeric_limits<double>::infinity();
    bool early_stopped = false;
    std::string rng_state;
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Minibatch masked-MAE training with Adam and early stopping on validation MAE.
/// The best-validation parameters are restored before returning.
inline TrainResult train(Model& m, std::span<const Example> train_set, std::span<const Example> val_set,
                         const TrainConfig& tc) {
    tc.validate();
    if (train_set.empty() || val_set.empty()) throw ConfigError("train: train and validation splits must be nonempty");
    num::ParamRefs params = m.parameters();
    num::Adam opt(params, {tc.lr});
    num::Rng shuffle_rng = num::Rng(tc.seed).split("shuffle");
    num::Rng dropout_rng = num::Rng(tc.seed).split("dropout");

    std::vector<Matrix> best_values;
    auto snapshot = [&] {
        best_values.clear();
        for (auto* p : params) best_values.push_back(p->value);
    };
    snapshot();

    TrainResult res;
    int wait = 0;
    std::vector<std::size_t> order(train_set.size());
    for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), std::size_t{0});
        num::shuffle(order, shuffle_rng);
        double abs_sum = 0.0;
        std::size_t count = 0;
        std::vector<Example> batch;
        for (std::size_t start = 0, b = 0; start < order.size(); start += tc.batch_size, ++b) {
            batch.clear();
            for (std::size_t i = start; i < std::min(order.size(), start + tc.batch_size); ++i)
                batch.push_back(train_set[order[i]]);
            num::zero_grads(params);
            Tape t;
            const BatchLoss bl = batch_loss(t, m, batch, {true, &dropout_rng});
            if (bl.count == 0) continue;
            const double lv = t.scalar(bl.loss);
            if (!std::isfinite(lv))
                throw TrainingDiverged("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                                       ", batch " + std::to_string(b) + ", lr " + csv::fmt(tc.lr));
            t.backward(bl.loss);
            opt.step();
            abs_sum += bl.abs_sum;
            count += bl.count;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_mae = count ? abs_sum / static_cast<double>(count) : 0.0;
        rec.val_mae = evaluate_mae(m, val_set);
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.history.push_back(rec);
        if (!std::isfinite(rec.val_mae))
            throw TrainingDiverged("training diverged: non-finite validation MAE at epoch " + std::to_string(epoch) +
                                   ", lr " + csv::fmt(tc.lr));
        if (rec.val_mae < res.best_val) {
            res.best_val = rec.val_mae;
            res.best_epoch = epoch;
            snapshot();
            wait = 0;
        } else if (++wait >= tc.patience) {
            res.early_stopped = true;
            break;
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
    res.rng_state = shuffle_rng.state();
    return res;
}

inline void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << "epoch,train_mae,val_mae,seconds\n";
    for (const auto& r : history)
        out << r.epoch << ',' << csv::fmt(r.train_mae) << ',' << csv::fmt(r.val_mae) << ',' << csv::fmt(r.seconds) << '\n';
}

// ---- checkpoints ----
//
// Layout (little-endian): "FUSE" | u32 version | u64 header length | header JSON |
// f64 tensor data in header order | u32 CRC32 of everything before it.

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainState {
    int epoch = 0;
    double best_val = std::numeric_limits<double>::infinity();
    std::string rng_state;
};

namespace detail {

inline void put_u32(std::string& b, std::uint32_t v) {
    for (int k = 0; k < 4; ++k) b += static_cast<char>((v >> (8 * k)) & 0xff);
}
inline void put_u64(std::string& b, std::uint64_t v) {
    for (int k = 0; k < 8; ++k) b += static_cast<char>((v >> (8 * k)) & 0xff);
}
inline std::uint64_t get_le(const std::string& b, std::size_t off, int bytes) {
    std::uint64_t v = 0;
    for (int k = 0; k < bytes; ++k) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[off + k])) << (8 * k);
    return v;
}
inline std::uint32_t crc32_of(const std::string& b, std::size_t len) {
    return static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(b.data()), static_cast<uInt>(len)));
}

}  // namespace detail

inline std::string serialize_checkpoint(Model& m, const TrainState& st, std::uint32_t version = kCheckpointVersion) {
    nlohmann::json tensors = nlohmann::json::array();
    auto params = m.all_parameters();
    for (auto* p : params) tensors.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
    tensors.push_back({{"name", "graph.a_hat"}, {"rows", m.adjacency().rows()}, {"cols", m.adjacency().cols()}});
    const nlohmann::json header{{"config", m.config().to_json()},
                                {"norm", {{"mean", m.norm().mean}, {"std", m.norm().std}}},
                                {"rng_state", st.rng_state},
                                {"epoch", st.epoch},
                                {"best_val", std::isfinite(st.best_val) ? nlohmann::json(st.best_val) : nlohmann::json()},
                                {"tensors", tensors}};
    const std::string hj = header.dump();
    std::string buf = "FUSE";
    detail::put_u32(buf, version);
    detail::put_u64(buf, hj.size());
    buf += hj;
    auto put_matrix = [&](const Matrix& mat) {
        for (double v : mat.values()) {
            std::uint64_t u;
            std::memcpy(&u, &v, 8);
            detail::put_u64(buf, u);
        }
    };
    for (auto* p : params) put_matrix(p->value);
    put_matrix(m.adjacency());
    detail::put_u32(buf, detail::crc32_of(buf, buf.size()));
    return buf;
}

inline void save_checkpoint(const std::string& path, Model& m, const TrainState& st = {}) {
    const std::string buf = serialize_checkpoint(m, st);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("failed writing checkpoint '" + path + "'");
}

inline Model deserialize_checkpoint(const std::string& buf, TrainState* st = nullptr) {
    constexpr std::size_t kFixed = 4 + 4 + 8;
    if (buf.size() < kFixed + 4) throw CheckpointError("checkpoint checksum error: file too short");
    const auto stored = static_cast<std::uint32_t>(detail::get_le(buf, buf.size() - 4, 4));
    if (stored != detail::crc32_of(buf, buf.size() - 4)) throw CheckpointError("checkpoint checksum error: CRC32 mismatch");
    if (buf.compare(0, 4, "FUSE") != 0) throw CheckpointError("not a checkpoint: bad magic");
    const auto version = static_cast<std::uint32_t>(detail::get_le(buf, 4, 4));
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    const auto hlen = detail::get_le(buf, 8, 8);
    if (hlen > buf.size() - kFixed - 4) throw CheckpointError("checkpoint header length out of range");
    const auto header = nlohmann::json::parse(buf.substr(kFixed, hlen), nullptr, false);
    if (header.is_discarded()) throw CheckpointError("checkpoint header is not valid JSON");

    std::size_t off = kFixed + hlen;
    auto read_matrix = [&](std::size_t rows, std::size_t cols) {
        if (off + rows * cols * 8 > buf.size() - 4) throw CheckpointError("checkpoint tensor data truncated");
        Matrix mat(rows, cols);
        for (double& v : mat.values()) {
            const std::uint64_t u = detail::get_le(buf, off, 8);
            std::memcpy(&v, &u, 8);
            off += 8;
        }
        return mat;
    };

    const auto cfg = ModelConfig::from_json(header.at("config"));
    std::vector<std::pair<std::string, Matrix>> tensors;
    for (const auto& t : header.at("tensors"))
        tensors.emplace_back(t.at("name").get<std::string>(),
                             read_matrix(t.at("rows").get<std::size_t>(), t.at("cols").get<std::size_t>()));
    if (off != buf.size() - 4) throw CheckpointError("checkpoint has trailing bytes");
    if (tensors.empty() || tensors.back().first != "graph.a_hat") throw CheckpointError("checkpoint lacks graph.a_hat");

    const data::NormStats norm{header.at("norm").at("mean").get<double>(), header.at("norm").at("std").get<double>()};
    Model m(cfg, tensors.back().second, norm, 0);
    auto params = m.all_parameters();
    if (params.size() + 1 != tensors.size()) throw CheckpointError("checkpoint tensor count does not match config");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->name != tensors[i].first)
            throw CheckpointError("checkpoint tensor '" + tensors[i].first + "' where '" + params[i]->name + "' expected");
        if (!params[i]->value.same_shape(tensors[i].second))
            throw CheckpointError("checkpoint tensor '" + tensors[i].first + "' has the wrong shape");
        params[i]->value = std::move(tensors[i].second);
    }
    if (st) {
        st->epoch = header.at("epoch").get<int>();
        st->best_val = header.at("best_val").is_null() ? std::numeric_limits<double>::infinity()
                                                       : header.at("best_val").get<double>();
        st->rng_state = header.at("rng_state").get<std::string>();
    }
    return m;
}

inline Model load_checkpoint(const std::string& path, TrainState* st = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
    const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(buf, st);
}

}  // namespace fuse::model
