#pragma once

#include <algorithm>
#include <chrono>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fuse/data.hpp"
#include "fuse/events/prompt.hpp"
#include "fuse/events/retrieval.hpp"
#include "fuse/graph.hpp"
#include "fuse/metrics.hpp"
#include "fuse/model.hpp"
#include "fuse/numerics/grad_check.hpp"
#include "fuse/synth.hpp"
#include "fuse/textenc.hpp"
#include "fuse/util/csv.hpp"
#include "fuse/util/log.hpp"

namespace fuse::app {

namespace fs = std::filesystem;
using nlohmann::json;
using num::Matrix;

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// ---- run configuration ----

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& section) {
    if (!j.is_object()) throw ConfigError("config: section '" + section + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return it.key() == k; }))
            throw ConfigError("config: unknown key '" + (section.empty() ? "" : section + ".") + it.key() + "'");
}

template <typename T>
void read(const json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace detail

struct SynthSection {
    synth::GeneratorConfig gen;
    int event_count = 60;
    int min_duration = 18;
    int max_duration = 36;
    std::string script;  // event script JSON; empty = seeded random script
};

struct DataSection {
    std::string dir;  // dataset directory written by `synth`; empty = synthesize in memory
    int h_in = 12;
    int h_out = 12;
    int stride = 1;
    data::SplitSpec split;
    bool drop_boundary = true;
};

struct EventsSection {
    std::string provider = "mock";  // mock | live
    events::PromptId prompt = events::PromptId::P1;
    int grid_minutes = 5;
    std::string fixture;  // mock responses; empty = built from the synthetic script
    bool fixture_neighbors = true;  // built fixture: neighbors of an event's sensors report it too
    bool fixture_quiet = false;     // built fixture: quiet sensors answer "Typical traffic near <place>"
    std::string store;    // event store (cache) to read and update
    json live = json::object();
};

struct ModelSection {
    std::size_t d_text = 256;
    stenc::STEncoderConfig st;
    fusion::FusionConfig fusion;
    std::string variant = "cross_attention";  // a fusion kind or "disabled"
};

struct AblateSection {
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::vector<std::string> variants{"cross_attention", "gating", "add", "concat", "disabled"};
    std::vector<std::string> prompts{"P1", "P2", "P3", "P4", "P5"};
};

struct RunConfig {
    std::uint64_t seed = 1;
    std::string out = "fuse_out";
    SynthSection synth;
    DataSection data;
    EventsSection events;
    ModelSection model;
    model::TrainConfig train;
    std::vector<int> horizons{3, 6, 12};
    AblateSection ablate;

    json to_json() const {
        const auto& g = synth.gen;
        return {{"seed", seed},
                {"out", out},
                {"synth",
                 {{"n_sensors", g.n_sensors},
                  {"n_steps", g.n_steps},
                  {"interval_minutes", g.interval_minutes},
                  {"base_speed", g.base_speed},
                  {"daily_amplitude", g.daily_amplitude},
                  {"noise_std", g.noise_std},
                  {"neighbor_decay", g.neighbor_decay},
                  {"seed", g.seed},
                  {"start_time", g.start_time.str()},
                  {"event_count", synth.event_count},
                  {"min_duration", synth.min_duration},
                  {"max_duration", synth.max_duration},
                  {"script", synth.script}}},
                {"data",
                 {{"dir", data.dir},
                  {"h_in", data.h_in},
                  {"h_out", data.h_out},
                  {"stride", data.stride},
                  {"train_frac", data.split.train_frac},
                  {"val_frac", data.split.val_frac},
                  {"test_frac", data.split.test_frac},
                  {"drop_boundary", data.drop_boundary}}},
                {"events",
                 {{"provider", events.provider},
                  {"prompt", events::to_string(events.prompt)},
                  {"grid_minutes", events.grid_minutes},
                  {"fixture", events.fixture},
                  {"fixture_neighbors", events.fixture_neighbors},
                  {"fixture_quiet", events.fixture_quiet},
                  {"store", events.store},
                  {"live", events.live}}},
                {"model",
                 {{"d_text", model.d_text},
                  {"layers", model.st.layers},
                  {"temporal_kernel", model.st.temporal_kernel},
                  {"dropout", model.st.dropout_rate},
                  {"node_embedding", model.st.node_embedding},
                  {"d", model.fusion.d},
                  {"heads", model.fusion.heads},
                  {"ffn_depth", model.fusion.ffn_depth},
                  {"ffn_width", model.fusion.ffn_width},
                  {"variant", model.variant}}},
                {"train",
                 {{"lr", train.lr},
                  {"batch_size", train.batch_size},
                  {"max_epochs", train.max_epochs},
                  {"patience", train.patience}}},
                {"horizons", horizons},
                {"ablate", {{"seeds", ablate.seeds}, {"variants", ablate.variants}, {"prompts", ablate.prompts}}}};
    }

    static RunConfig from_json(const json& j) {
        using detail::check_keys;
        using detail::read;
        RunConfig c;
        try {
            check_keys(j, {"seed", "out", "synth", "data", "events", "model", "train", "horizons", "ablate"}, "");
            read(j, "seed", c.seed);
            read(j, "out", c.out);
            read(j, "horizons", c.horizons);
            if (j.contains("synth")) {
                const auto& s = j.at("synth");
                check_keys(s, {"n_sensors", "n_steps", "interval_minutes", "base_speed", "daily_amplitude", "noise_std",
                               "neighbor_decay", "seed", "start_time", "event_count", "min_duration", "max_duration",
                               "script"},
                           "synth");
                auto& g = c.synth.gen;
                read(s, "n_sensors", g.n_sensors);
                read(s, "n_steps", g.n_steps);
                read(s, "interval_minutes", g.interval_minutes);
                read(s, "base_speed", g.base_speed);
                read(s, "daily_amplitude", g.daily_amplitude);
                read(s, "noise_std", g.noise_std);
                read(s, "neighbor_decay", g.neighbor_decay);
                read(s, "seed", g.seed);
                if (s.contains("start_time")) g.start_time = Timestamp::parse(s.at("start_time").get<std::string>());
                read(s, "event_count", c.synth.event_count);
                read(s, "min_duration", c.synth.min_duration);
                read(s, "max_duration", c.synth.max_duration);
                read(s, "script", c.synth.script);
            }
            if (j.contains("data")) {
                const auto& d = j.at("data");
                check_keys(d, {"dir", "h_in", "h_out", "stride", "train_frac", "val_frac", "test_frac", "drop_boundary"},
                           "data");
                read(d, "dir", c.data.dir);
                read(d, "h_in", c.data.h_in);
                read(d, "h_out", c.data.h_out);
                read(d, "stride", c.data.stride);
                read(d, "train_frac", c.data.split.train_frac);
                read(d, "val_frac", c.data.split.val_frac);
                read(d, "test_frac", c.data.split.test_frac);
                read(d, "drop_boundary", c.data.drop_boundary);
            }
            if (j.contains("events")) {
                const auto& e = j.at("events");
                check_keys(e, {"provider", "prompt", "grid_minutes", "fixture", "fixture_neighbors", "fixture_quiet",
                               "store", "live"},
                           "events");
                read(e, "provider", c.events.provider);
                if (e.contains("prompt")) c.events.prompt = events::prompt_id_from(e.at("prompt").get<std::string>());
                read(e, "grid_minutes", c.events.grid_minutes);
                read(e, "fixture", c.events.fixture);
                read(e, "fixture_neighbors", c.events.fixture_neighbors);
                read(e, "fixture_quiet", c.events.fixture_quiet);
                read(e, "store", c.events.store);
                if (e.contains("live")) c.events.live = e.at("live");
            }
            if (j.contains("model")) {
                const auto& m = j.at("model");
                check_keys(m, {"d_text", "layers", "temporal_kernel", "dropout", "node_embedding", "d", "heads",
                               "ffn_depth", "ffn_width", "variant"},
                           "model");
                read(m, "d_text", c.model.d_text);
                read(m, "layers", c.model.st.layers);
                read(m, "temporal_kernel", c.model.st.temporal_kernel);
                read(m, "dropout", c.model.st.dropout_rate);
                read(m, "node_embedding", c.model.st.node_embedding);
                read(m, "d", c.model.fusion.d);
                read(m, "heads", c.model.fusion.heads);
                read(m, "ffn_depth", c.model.fusion.ffn_depth);
                read(m, "ffn_width", c.model.fusion.ffn_width);
                read(m, "variant", c.model.variant);
            }
            if (j.contains("train")) {
                const auto& t = j.at("train");
                check_keys(t, {"lr", "batch_size", "max_epochs", "patience"}, "train");
                read(t, "lr", c.train.lr);
                read(t, "batch_size", c.train.batch_size);
                read(t, "max_epochs", c.train.max_epochs);
                read(t, "patience", c.train.patience);
            }
            if (j.contains("ablate")) {
                const auto& a = j.at("ablate");
                check_keys(a, {"seeds", "variants", "prompts"}, "ablate");
                read(a, "seeds", c.ablate.seeds);
                read(a, "variants", c.ablate.variants);
                read(a, "prompts", c.ablate.prompts);
            }
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
        c.model.st.hidden = c.model.fusion.d;
        c.validate();
        return c;
    }

    void validate() const {
        synth.gen.validate();
        if (synth.event_count < 0) throw ConfigError("config: synth.event_count must be >= 0");
        if (synth.min_duration < 1 || synth.max_duration < synth.min_duration)
            throw ConfigError("config: synth event durations must satisfy 1 <= min <= max");
        if (data.h_in < 1 || data.h_out < 1 || data.stride < 1)
            throw ConfigError("config: data.h_in, data.h_out and data.stride must be >= 1");
        data.split.validate();
        if (events.provider != "mock" && events.provider != "live")
            throw ConfigError("config: events.provider must be mock or live");
        if (events.grid_minutes < 1) throw ConfigError("config: events.grid_minutes must be >= 1");
        variant_of(model.variant);
        train.validate();
        for (const auto& v : ablate.variants) variant_of(v);
        for (const auto& p : ablate.prompts) events::prompt_id_from(p);
        if (ablate.seeds.empty()) throw ConfigError("config: ablate.seeds must not be empty");
    }

    /// Fusion kind and event mode for a variant name.
    static std::pair<fusion::FusionKind, model::EventMode> variant_of(const std::string& name) {
        if (name == "disabled") return {fusion::FusionKind::CrossAttention, model::EventMode::Disabled};
        try {
            return {fusion::fusion_kind_from(name), model::EventMode::Enabled};
        } catch (const fusion::ConfigError&) {
            throw ConfigError("unknown variant '" + name + "' (cross_attention, gating, add, concat, disabled)");
        }
    }

    model::ModelConfig model_config(std::size_t n_nodes, const std::string& variant) const {
        model::ModelConfig m;
        m.n_nodes = n_nodes;
        m.h_in = data.h_in;
        m.h_out = data.h_out;
        m.d_text = model.d_text;
        m.st = model.st;
        m.st.hidden = model.fusion.d;
        m.fusion = model.fusion;
        std::tie(m.kind, m.event_mode) = variant_of(variant);
        m.validate();
        return m;
    }
};

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    return RunConfig::from_json(j);
}

inline void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
}

inline json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw std::runtime_error("'" + path.string() + "': " + e.what());
    }
}

/// Writes the fully resolved config next to a command's outputs.
inline void write_resolved_config(const RunConfig& cfg) {
    fs::create_directories(cfg.out);
    write_json(fs::path(cfg.out) / "resolved_config.json", cfg.to_json());
}

// ---- datasets ----

struct Dataset {
    graph::RoadNetwork net;
    data::TrafficSeries series;
    std::vector<events::EventRecord> records;  // ground truth used for stratification
    std::vector<synth::SynthEvent> script;     // empty for loaded datasets without one
};

inline Dataset synthesize(const RunConfig& cfg) {
    Dataset d;
    const auto& g = cfg.synth.gen;
    d.net = synth::corridor_network(g.n_sensors, g.seed);
    d.script = cfg.synth.script.empty()
                   ? synth::random_script(g, cfg.synth.event_count, g.seed, cfg.synth.min_duration, cfg.synth.max_duration)
                   : synth::script_from_json(read_json(cfg.synth.script));
    auto out = synth::generate(g, d.script, d.net);
    d.series = std::move(out.series);
    d.records = std::move(out.records);
    return d;
}

inline void write_adjacency_csv(const fs::path& path, const Matrix& a) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    for (std::size_t j = 0; j < a.cols(); ++j) out << (j ? "," : "") << "n" << j;
    out << '\n';
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) out << (j ? "," : "") << csv::fmt(a(i, j));
        out << '\n';
    }
}

inline Matrix read_adjacency_csv(const fs::path& path, std::size_t n) {
    const auto t = csv::read(path.string());
    if (t.header.size() != n || t.rows.size() != n)
        throw data::DataError("'" + path.string() + "' must hold an " + std::to_string(n) + "x" + std::to_string(n) +
                              " matrix");
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a(i, j) = csv::to_double(t.rows[i][j], path.string());
    return a;
}

inline void write_sensors_csv(const fs::path& path, const std::vector<graph::Sensor>& sensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << "id,lat,lon\n";
    for (const auto& s : sensors) out << s.id << ',' << csv::fmt(s.lat) << ',' << csv::fmt(s.lon) << '\n';
}

/// Dataset directory layout: series.bin + series.json (sidecar), series.csv, sensors.csv,
/// adjacency.csv, events.json (ground-truth records), script.json.
inline void write_dataset(const fs::path& dir, const Dataset& d) {
    fs::create_directories(dir);
    data::write_series_bin(d.series, (dir / "series.bin").string());
    data::write_series_csv(d.series, (dir / "series.csv").string());
    data::write_sidecar(d.series, (dir / "series.json").string());
    write_sensors_csv(dir / "sensors.csv", d.net.sensors);
    write_adjacency_csv(dir / "adjacency.csv", d.net.adjacency);
    write_json(dir / "events.json", synth::records_to_json(d.records));
    write_json(dir / "script.json", synth::script_to_json(d.script));
}

inline Dataset read_dataset(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw std::runtime_error("dataset directory '" + dir.string() + "' not found");
    Dataset d;
    d.series = data::read_series((dir / "series.bin").string(), (dir / "series.json").string());
    auto sensors = graph::load_sensors((dir / "sensors.csv").string());
    if (sensors.size() != d.series.nodes())
        throw data::DataError("sensors.csv lists " + std::to_string(sensors.size()) + " sensors, series has " +
                              std::to_string(d.series.nodes()));
    Matrix a = read_adjacency_csv(dir / "adjacency.csv", sensors.size());
    d.net = graph::from_adjacency(std::move(sensors), std::move(a));
    if (fs::exists(dir / "events.json")) d.records = synth::records_from_json(read_json(dir / "events.json"));
    if (fs::exists(dir / "script.json")) d.script = synth::script_from_json(read_json(dir / "script.json"));
    return d;
}

inline Dataset load_or_synthesize(const RunConfig& cfg) {
    return cfg.data.dir.empty() ? synthesize(cfg) : read_dataset(cfg.data.dir);
}

/// Mock responses for every prompt variant, built from the dataset's event script.
inline json fixture_for(const RunConfig& cfg, const Dataset& d, std::vector<events::PromptId> prompts) {
    synth::FixtureOptions opt;
    opt.h_in = cfg.data.h_in;
    opt.h_out = cfg.data.h_out;
    opt.grid_minutes = cfg.events.grid_minutes;
    opt.prompts = std::move(prompts);
    opt.neighbors = cfg.events.fixture_neighbors;
    opt.quiet_text = cfg.events.fixture_quiet;
    return synth::build_fixture(d.series, d.net, d.script, opt);
}

// ---- samples with event context ----

/// Windows, splits and per-sample text embeddings for one dataset and prompt.
struct Prepared {
    Matrix a_hat;
    data::NormStats norm;
    data::Split<data::WindowSample> split;
    std::deque<Matrix> embeddings;  // deduplicated per-sample text embeddings
    std::map<std::size_t, const Matrix*> text_of;  // anchor -> embedding
    std::map<std::size_t, std::vector<std::string>> texts_of;  // anchor -> per-sensor texts
    events::RetrievalStats retrieval;
    std::size_t requests = 0;

    std::vector<model::Example> examples(const std::vector<data::WindowSample>& s) const {
        std::vector<model::Example> out;
        out.reserve(s.size());
        for (const auto& w : s) out.push_back({&w, text_of.at(w.t_anchor)});
        return out;
    }
};

/// Normalizer fitted on the steps covered by training windows only.
inline data::NormStats fit_train_normalizer(const data::TrafficSeries& series, const DataSection& ds) {
    const std::size_t count = data::window_count(series.steps(), static_cast<std::size_t>(ds.h_in),
                                                 static_cast<std::size_t>(ds.h_out), static_cast<std::size_t>(ds.stride));
    if (count == 0) throw data::DataError("series too short for one window");
    const auto n_train = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(static_cast<double>(count) * ds.split.train_frac)));
    const std::size_t end = (n_train - 1) * static_cast<std::size_t>(ds.stride) + static_cast<std::size_t>(ds.h_in + ds.h_out);
    return data::fit_normalizer(series, {0, std::min(end, series.steps())});
}

inline Prepared prepare(const RunConfig& cfg, const Dataset& d, events::Provider& provider, events::EventCache& cache,
                        events::PromptId prompt, const events::RetrievalOptions& ropt = {}) {
    Prepared p;
    p.a_hat = graph::normalize_adjacency(d.net);
    p.norm = fit_train_normalizer(d.series, cfg.data);
    auto windows = data::make_windows(d.series, p.norm, static_cast<std::size_t>(cfg.data.h_in),
                                      static_cast<std::size_t>(cfg.data.h_out), static_cast<std::size_t>(cfg.data.stride));
    p.split = data::chronological_split(std::move(windows), cfg.data.split, static_cast<std::size_t>(cfg.data.h_out),
                                        cfg.data.drop_boundary);

    // One query per (sensor, window), keyed by the window's input start.
    std::vector<const data::WindowSample*> all;
    for (auto* part : {&p.split.train, &p.split.val, &p.split.test})
        for (const auto& w : *part) all.push_back(&w);
    const std::size_t n = d.series.nodes();
    std::vector<events::QueryRequest> batch;
    batch.reserve(all.size() * n);
    for (const auto* w : all) {
        const Timestamp start = d.series.time_at(w->t_anchor + 1 - static_cast<std::size_t>(cfg.data.h_in));
        for (std::size_t i = 0; i < n; ++i) batch.push_back({static_cast<int>(i), start});
    }
    p.requests = batch.size();
    const auto dd = events::dedup(batch, d.net.sensors, prompt, cfg.events.grid_minutes);
    const auto resolved = events::retrieve(
        provider, dd.keys, cache,
        [&](const events::QueryKey& k) {
            return events::key_prompt(k, cfg.data.h_in, cfg.data.h_out, d.series.interval_minutes);
        },
        ropt, &p.retrieval);
    const auto ctx = events::assemble(dd, resolved);

    std::map<std::vector<std::string>, const Matrix*> seen;
    for (std::size_t s = 0; s < all.size(); ++s) {
        std::vector<std::string> texts(ctx.texts.begin() + static_cast<std::ptrdiff_t>(s * n),
                                       ctx.texts.begin() + static_cast<std::ptrdiff_t>((s + 1) * n));
        auto it = seen.find(texts);
        if (it == seen.end()) {
            p.embeddings.push_back(textenc::embed(texts, cfg.model.d_text));
            it = seen.emplace(texts, &p.embeddings.back()).first;
        }
        p.text_of[all[s]->t_anchor] = it->second;
        p.texts_of[all[s]->t_anchor] = std::move(texts);
    }
    return p;
}

// ---- experiments ----

struct CellResult {
    std::string variant;
    std::string prompt = "P1";
    std::uint64_t seed = 0;
    double overall_mae = 0.0;
    std::map<events::Impact, double> stratum_mae;
    std::map<events::Impact, std::size_t> stratum_samples;
    int epochs = 0;
    int best_epoch = 0;
    double seconds = 0.0;
};

struct TrainedCell {
    std::unique_ptr<model::Model> model;
    model::TrainResult train;
};

inline TrainedCell train_cell(const RunConfig& cfg, const Prepared& p, std::size_t n_nodes, const std::string& variant,
                              std::uint64_t seed) {
    TrainedCell c;
    c.model = std::make_unique<model::Model>(cfg.model_config(n_nodes, variant), p.a_hat, p.norm, seed);
    auto tc = cfg.train;
    tc.seed = seed;
    const auto tr = p.examples(p.split.train);
    const auto va = p.examples(p.split.val);
    c.train = model::train(*c.model, tr, va, tc);
    return c;
}

inline CellResult evaluate_cell(model::Model& m, const Prepared& p, const Dataset& d) {
    CellResult r;
    const auto te = p.examples(p.split.test);
    const auto preds = model::predict_all(m, te);
    metrics::Accumulator all;
    for (const auto& pr : preds) all.add(pr.y, pr.y_hat);
    r.overall_mae = all.report().mae;
    for (const auto& s : metrics::stratify(preds, d.series, d.records, {})) {
        r.stratum_mae[s.impact] = s.average().mae;
        r.stratum_samples[s.impact] = s.samples;
    }
    return r;
}

inline CellResult run_cell(const RunConfig& cfg, const Prepared& p, const Dataset& d, const std::string& variant,
                           std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    auto c = train_cell(cfg, p, d.series.nodes(), variant, seed);
    CellResult r = evaluate_cell(*c.model, p, d);
    r.variant = variant;
    r.seed = seed;
    r.epochs = static_cast<int>(c.train.history.size());
    r.best_epoch = c.train.best_epoch;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Median over cells of one variant (and prompt) of overall or per-stratum MAE.
struct MedianRow {
    std::string variant;
    std::string prompt;
    double overall_mae = 0.0;
    std::map<events::Impact, double> stratum_mae;
};

inline MedianRow median_row(const std::vector<CellResult>& cells, const std::string& variant, const std::string& prompt) {
    MedianRow row{variant, prompt, 0.0, {}};
    std::vector<double> overall;
    std::map<events::Impact, std::vector<double>> strata;
    for (const auto& c : cells) {
        if (c.variant != variant || c.prompt != prompt) continue;
        overall.push_back(c.overall_mae);
        for (const auto& [im, v] : c.stratum_mae) strata[im].push_back(v);
    }
    row.overall_mae = median(overall);
    for (auto& [im, v] : strata) row.stratum_mae[im] = median(v);
    return row;
}

inline double stratum_or_nan(const std::map<events::Impact, double>& m, events::Impact im) {
    auto it = m.find(im);
    return it == m.end() ? std::numeric_limits<double>::quiet_NaN() : it->second;
}

inline void write_cells_csv(const fs::path& path, const std::vector<CellResult>& cells, const std::vector<MedianRow>& medians) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << "variant,prompt,seed,overall_mae,none_mae,minor_mae,moderate_mae,high_mae,epochs,best_epoch\n";
    auto strata = [&](const std::map<events::Impact, double>& m) {
        for (auto im : events::kAllImpacts) out << ',' << metrics::fmt_metric(stratum_or_nan(m, im));
    };
    for (const auto& c : cells) {
        out << c.variant << ',' << c.prompt << ',' << c.seed << ',' << metrics::fmt_metric(c.overall_mae);
        strata(c.stratum_mae);
        out << ',' << c.epochs << ',' << c.best_epoch << '\n';
    }
    for (const auto& m : medians) {
        out << m.variant << ',' << m.prompt << ",median," << metrics::fmt_metric(m.overall_mae);
        strata(m.stratum_mae);
        out << ",,\n";
    }
}

/// Relative MAE improvement of `model` over `baseline` (positive = better).
inline double improvement(double baseline, double model) { return (baseline - model) / baseline; }

// ---- gradient check on the toy configuration ----

struct GradGroupResult {
    std::string group;
    double max_rel_error = 0.0;
};

/// Full-model gradient checks (N=4, d=8, h=2, H_in=6, H_out=3) for every fusion variant,
/// grouped by component.
inline std::vector<GradGroupResult> toy_gradcheck(std::uint64_t seed) {
    num::Rng rng = num::Rng(seed).split("gradcheck");
    const std::size_t n = 4;
    model::ModelConfig mc;
    mc.n_nodes = n;
    mc.h_in = 6;
    mc.h_out = 3;
    mc.d_text = 16;
    mc.st = {2, 8, 3, 0.0, true};
    mc.fusion = {8, 2, 2, 16, num::kDefaultLayerNormEps};

    auto net = synth::corridor_network(static_cast<int>(n), seed);
    const Matrix a_hat = graph::normalize_adjacency(net);
    const data::NormStats norm{50.0, 10.0};
    Matrix x(n, 6), y(n, 3);
    for (double& v : x.values()) v = rng.normal();
    for (double& v : y.values()) v = 50.0 + 10.0 * rng.normal();
    y(1, 2) = 0.0;  // a missing target
    const Matrix text = textenc::embed({"accident at Downtown", "", "concert close to Echo", "rain"}, mc.d_text);
    // A random linear readout keeps the loss smooth; masked MAE has kinks.
    Matrix readout(n, 3);
    for (double& v : readout.values()) v = rng.normal();

    std::map<std::string, double> groups;
    for (auto kind : {fusion::FusionKind::CrossAttention, fusion::FusionKind::Gating, fusion::FusionKind::Add,
                      fusion::FusionKind::Concat}) {
        mc.kind = kind;
        model::Model m(mc, a_hat, norm, seed);
        // Start the gate away from 0 so both branches carry gradient.
        for (double& v : m.fusion_params().gate.value.values()) v = 0.3 * rng.normal();
        auto build = [&](num::Tape& t) {
            auto f = m.forward(t, x, text);
            return t.sum(t.hadamard(f.pred, t.constant(readout)));
        };
        const auto params = m.parameters();
        const auto rep = num::grad_check(build, params, 1e-5);
        for (const auto& e : rep.per_param) {
            const std::string& name = e.name;
            std::string group;
            if (name.rfind("st.", 0) == 0) group = "st_encoder";
            else if (name.rfind("text_proj", 0) == 0) group = "projection";
            else if (name.rfind("decoder", 0) == 0) group = "decoder";
            else group = std::string("fusion_") + fusion::to_string(kind);
            groups[group] = std::max(groups[group], e.max_rel_error);
        }
        if (kind == fusion::FusionKind::Add) groups.emplace("fusion_add", 0.0);
        // The masked MAE loss itself, away from its kinks.
        if (kind == fusion::FusionKind::CrossAttention) {
            auto build_mae = [&](num::Tape& t) {
                auto f = m.forward(t, x, text);
                std::size_t count = 0;
                return t.scale(model::masked_abs_error(t, m, f.pred, y, count), 1.0 / 11.0);
            };
            const auto rep2 = num::grad_check(build_mae, params, 1e-6);
            groups["masked_mae_loss"] = rep2.max_rel_error;
        }
    }
    std::vector<GradGroupResult> out;
    for (const auto& [g, e] : groups) out.push_back({g, e});
    return out;
}

}  // namespace fuse::app
