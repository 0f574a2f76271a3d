// fuse_cli: dataset synthesis, event retrieval, training, evaluation, ablations,
// gradient checks and embedding export. Errors print one "error: ..." line and exit nonzero.

#include <CLI11.hpp>
#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "fuse/app.hpp"
#include "fuse/events/live_provider.hpp"

namespace fs = std::filesystem;
using namespace fuse;
using app::RunConfig;
using nlohmann::json;

namespace {

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string provider;
    std::string variant;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config, "JSON run config (defaults when omitted)");
    cmd->add_option("--seed", f.seed, "overrides seed and synth.seed");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--provider", f.provider, "event provider")->check(CLI::IsMember({"mock", "live"}));
    cmd->add_option("--variant", f.variant, "cross_attention | gating | add | concat | disabled");
}

RunConfig resolve(const CommonFlags& f) {
    RunConfig cfg = f.config.empty() ? RunConfig{} : app::load_config(f.config);
    if (f.seed) {
        cfg.seed = *f.seed;
        cfg.synth.gen.seed = *f.seed;
    }
    if (!f.out.empty()) cfg.out = f.out;
    if (!f.provider.empty()) cfg.events.provider = f.provider;
    if (!f.variant.empty()) cfg.model.variant = f.variant;
    cfg.validate();
    app::write_resolved_config(cfg);
    return cfg;
}

/// Provider plus the retrieval options that go with it. Only provider=live opens sockets.
struct ProviderBox {
    std::unique_ptr<events::Provider> provider;
    events::RetrievalOptions options;
    events::MockProvider* mock = nullptr;
};

ProviderBox make_provider(const RunConfig& cfg, const app::Dataset& d, std::vector<events::PromptId> prompts) {
    ProviderBox box;
    if (cfg.events.provider == "live") {
        const auto live = events::LiveProviderConfig::from_json(cfg.events.live);
        box.options = live.retrieval_options();
        box.provider = std::make_unique<events::HttpProvider>(live);
        return box;
    }
    auto mock = std::make_unique<events::MockProvider>(
        cfg.events.fixture.empty() ? events::MockProvider::from_json(app::fixture_for(cfg, d, std::move(prompts)))
                                   : events::MockProvider::load(cfg.events.fixture));
    box.mock = mock.get();
    box.provider = std::move(mock);
    return box;
}

void load_store(const RunConfig& cfg, events::EventCache& cache) {
    if (!cfg.events.store.empty() && fs::exists(cfg.events.store)) cache.load_json(app::read_json(cfg.events.store));
}

std::string stratum_cell(const std::map<events::Impact, double>& m, events::Impact im) {
    return metrics::fmt_metric(app::stratum_or_nan(m, im));
}

// ---- synth ----

int cmd_synth(const RunConfig& cfg, const std::string& script) {
    RunConfig c = cfg;
    if (!script.empty()) c.synth.script = script;
    const auto d = app::synthesize(c);
    const fs::path dir = fs::path(c.out) / "dataset";
    app::write_dataset(dir, d);
    std::cout << "dataset " << dir.string() << ": " << d.series.nodes() << " sensors, " << d.series.steps()
              << " steps, " << d.script.size() << " events\n";
    return 0;
}

// ---- events ----

int cmd_events(const RunConfig& cfg) {
    const auto d = app::load_or_synthesize(cfg);
    auto box = make_provider(cfg, d, {cfg.events.prompt});
    events::EventCache cache;
    load_store(cfg, cache);
    const auto p = app::prepare(cfg, d, *box.provider, cache, cfg.events.prompt, box.options);
    const fs::path store = cfg.events.store.empty() ? fs::path(cfg.out) / "event_store.json" : fs::path(cfg.events.store);
    app::write_json(store, cache.to_json());
    const auto& s = p.retrieval;
    const json stats{{"requests", p.requests},       {"unique_keys", s.requested_keys},
                     {"cache_hits", s.cache_hits},   {"provider_calls", s.provider_keys},
                     {"fallbacks", s.fallbacks},     {"parse_errors", s.parse_errors},
                     {"prompt", events::to_string(cfg.events.prompt)}};
    app::write_json(fs::path(cfg.out) / "dedup_stats.json", stats);
    std::cout << "requests=" << p.requests << " unique_keys=" << s.requested_keys << " cache_hits=" << s.cache_hits
              << " provider_calls=" << s.provider_keys << " fallbacks=" << s.fallbacks
              << " parse_errors=" << s.parse_errors << " store=" << store.string() << '\n';
    if (s.fallbacks) log_warn(std::to_string(s.fallbacks) + " keys fell back to None-impact records");
    return 0;
}

// ---- train / eval ----

int cmd_train(const RunConfig& cfg) {
    const auto d = app::load_or_synthesize(cfg);
    auto box = make_provider(cfg, d, {cfg.events.prompt});
    events::EventCache cache;
    load_store(cfg, cache);
    const auto p = app::prepare(cfg, d, *box.provider, cache, cfg.events.prompt, box.options);
    auto c = app::train_cell(cfg, p, d.series.nodes(), cfg.model.variant, cfg.seed);
    const fs::path ckpt = fs::path(cfg.out) / "model.ckpt";
    model::save_checkpoint(ckpt.string(), *c.model, {c.train.best_epoch, c.train.best_val, c.train.rng_state});
    model::write_history_csv((fs::path(cfg.out) / "history.csv").string(), c.train.history);
    std::cout << "variant=" << cfg.model.variant << " epochs=" << c.train.history.size()
              << " best_epoch=" << c.train.best_epoch << " best_val_mae=" << metrics::fmt_metric(c.train.best_val)
              << " checkpoint=" << ckpt.string() << '\n';
    return 0;
}

std::string checkpoint_or_default(const RunConfig& cfg, const std::string& path) {
    const std::string p = path.empty() ? (fs::path(cfg.out) / "model.ckpt").string() : path;
    if (!fs::exists(p)) throw std::runtime_error("checkpoint '" + p + "' not found");
    return p;
}

/// Checks that a checkpoint fits the configured dataset.
void check_compatible(const model::Model& m, const RunConfig& cfg, const app::Dataset& d) {
    const auto& mc = m.config();
    if (mc.n_nodes != d.series.nodes() || mc.h_in != cfg.data.h_in || mc.h_out != cfg.data.h_out ||
        mc.d_text != cfg.model.d_text)
        throw std::runtime_error("checkpoint shapes (N=" + std::to_string(mc.n_nodes) + ", H_in=" +
                                 std::to_string(mc.h_in) + ", H_out=" + std::to_string(mc.h_out) +
                                 ", d_text=" + std::to_string(mc.d_text) + ") do not match the config");
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint) {
    auto m = model::load_checkpoint(checkpoint_or_default(cfg, checkpoint));
    const auto d = app::load_or_synthesize(cfg);
    check_compatible(m, cfg, d);
    auto box = make_provider(cfg, d, {cfg.events.prompt});
    events::EventCache cache;
    load_store(cfg, cache);
    const auto p = app::prepare(cfg, d, *box.provider, cache, cfg.events.prompt, box.options);
    // Normalization comes from the checkpoint; the prepared windows must use the same one.
    if (p.norm.mean != m.norm().mean || p.norm.std != m.norm().std)
        log_warn("dataset normalizer differs from the checkpoint's; windows are normalized with the dataset's");

    const auto te = p.examples(p.split.test);
    const auto preds = model::predict_all(m, te);
    const auto overall = metrics::per_horizon(preds, cfg.horizons);
    const auto strata = metrics::stratify(preds, d.series, d.records, cfg.horizons);
    const fs::path out(cfg.out);
    metrics::write_report_csv((out / "report.csv").string(), overall, strata);

    // Plot data: MAE per forecast step, overall and per stratum.
    {
        std::ofstream f(out / "horizon_mae.csv", std::ios::binary);
        f << "stratum,step,mae\n";
        const int h_out = cfg.data.h_out;
        std::vector<int> steps(static_cast<std::size_t>(h_out));
        for (int k = 0; k < h_out; ++k) steps[static_cast<std::size_t>(k)] = k + 1;
        for (const auto& r : metrics::per_horizon(preds, steps))
            if (r.horizon != "average") f << "all," << r.horizon << ',' << metrics::fmt_metric(r.mae) << '\n';
        for (const auto& s : metrics::stratify(preds, d.series, d.records, steps))
            for (const auto& r : s.reports)
                if (r.horizon != "average")
                    f << events::to_string(s.impact) << ',' << r.horizon << ',' << metrics::fmt_metric(r.mae) << '\n';
    }
    {
        std::ofstream f(out / "predictions.csv", std::ios::binary);
        f << "time,node,step,y,y_hat\n";
        for (const auto& pr : preds)
            for (std::size_t i = 0; i < pr.y.rows(); ++i)
                for (std::size_t k = 0; k < pr.y.cols(); ++k)
                    f << d.series.time_at(pr.t_anchor + 1 + k).str() << ',' << i << ',' << k + 1 << ','
                      << csv::fmt(pr.y(i, k)) << ',' << csv::fmt(pr.y_hat(i, k)) << '\n';
    }
    if (m.config().kind == fusion::FusionKind::CrossAttention && m.config().event_mode == model::EventMode::Enabled &&
        !te.empty()) {
        // Attention of the test sample with the strongest event label.
        std::size_t pick = 0;
        int best = -1;
        for (std::size_t s = 0; s < te.size(); ++s) {
            const int im = static_cast<int>(
                metrics::label_sample(te[s].window->t_anchor, static_cast<std::size_t>(cfg.data.h_out), d.series, d.records));
            if (im > best) best = im, pick = s;
        }
        num::Tape t;
        const auto fv = m.forward(t, te[pick].window->x, *te[pick].text);
        const auto maps = fusion::attention_weights(t.value(fv.e_st), t.value(fv.e_text), m.config().fusion,
                                                    m.fusion_params());
        std::ofstream f(out / "attention.csv", std::ios::binary);
        f << "head,query_node,key_node,weight\n";
        for (std::size_t h = 0; h < maps.size(); ++h)
            for (std::size_t q = 0; q < maps[h].rows(); ++q)
                for (std::size_t k = 0; k < maps[h].cols(); ++k)
                    f << h << ',' << q << ',' << k << ',' << csv::fmt(maps[h](q, k)) << '\n';
    }

    const auto& avg = overall.back();
    std::cout << "test mae=" << metrics::fmt_metric(avg.mae) << " rmse=" << metrics::fmt_metric(avg.rmse)
              << " mape=" << metrics::fmt_metric(avg.mape) << " samples=" << preds.size();
    for (const auto& s : strata)
        std::cout << ' ' << events::to_string(s.impact) << "_mae=" << metrics::fmt_metric(s.average().mae);
    std::cout << '\n';
    return 0;
}

// ---- ablate ----

int cmd_ablate(const RunConfig& cfg) {
    const auto d = app::load_or_synthesize(cfg);
    std::vector<events::PromptId> prompts{cfg.events.prompt};
    for (const auto& s : cfg.ablate.prompts) {
        const auto id = events::prompt_id_from(s);
        if (std::find(prompts.begin(), prompts.end(), id) == prompts.end()) prompts.push_back(id);
    }
    auto box = make_provider(cfg, d, prompts);
    events::EventCache cache;
    load_store(cfg, cache);

    std::vector<app::CellResult> cells;
    auto run = [&](const app::Prepared& p, const std::string& variant, events::PromptId prompt) {
        for (auto seed : cfg.ablate.seeds) {
            auto r = app::run_cell(cfg, p, d, variant, seed);
            r.prompt = events::to_string(prompt);
            std::cout << "cell variant=" << r.variant << " prompt=" << r.prompt << " seed=" << seed
                      << " mae=" << metrics::fmt_metric(r.overall_mae)
                      << " high_mae=" << stratum_cell(r.stratum_mae, events::Impact::High) << " epochs=" << r.epochs
                      << " seconds=" << csv::fmt(r.seconds) << '\n';
            cells.push_back(std::move(r));
        }
    };

    const std::string base_prompt = events::to_string(cfg.events.prompt);
    {
        const auto p = app::prepare(cfg, d, *box.provider, cache, cfg.events.prompt, box.options);
        for (const auto& v : cfg.ablate.variants) run(p, v, cfg.events.prompt);
    }
    // Prompt sweep with the cross-attention model.
    for (auto id : prompts) {
        if (id == cfg.events.prompt) {
            if (std::find(cfg.ablate.variants.begin(), cfg.ablate.variants.end(), "cross_attention") !=
                cfg.ablate.variants.end())
                continue;
        }
        const auto p = app::prepare(cfg, d, *box.provider, cache, id, box.options);
        run(p, "cross_attention", id);
    }

    std::vector<app::MedianRow> medians;
    for (const auto& v : cfg.ablate.variants) medians.push_back(app::median_row(cells, v, base_prompt));
    for (auto id : prompts)
        if (id != cfg.events.prompt) medians.push_back(app::median_row(cells, "cross_attention", events::to_string(id)));
    const fs::path out(cfg.out);
    app::write_cells_csv(out / "ablation.csv", cells, medians);

    // Fusion ordering on the High-impact stratum (median over seeds).
    std::vector<app::MedianRow> fusion_rows;
    for (const auto& m : medians)
        if (m.prompt == base_prompt && m.variant != "disabled") fusion_rows.push_back(m);
    std::stable_sort(fusion_rows.begin(), fusion_rows.end(), [](const auto& a, const auto& b) {
        return app::stratum_or_nan(a.stratum_mae, events::Impact::High) <
               app::stratum_or_nan(b.stratum_mae, events::Impact::High);
    });
    {
        std::ofstream f(out / "fusion_ordering.csv", std::ios::binary);
        f << "rank,variant,high_mae,overall_mae\n";
        for (std::size_t i = 0; i < fusion_rows.size(); ++i)
            f << i + 1 << ',' << fusion_rows[i].variant << ','
              << stratum_cell(fusion_rows[i].stratum_mae, events::Impact::High) << ','
              << metrics::fmt_metric(fusion_rows[i].overall_mae) << '\n';
    }

    // Improvement of each variant over the event-disabled baseline, per stratum.
    auto base = std::find_if(medians.begin(), medians.end(), [&](const auto& m) { return m.variant == "disabled"; });
    if (base != medians.end()) {
        std::ofstream f(out / "improvement.csv", std::ios::binary);
        f << "variant,prompt,overall,none,minor,moderate,high\n";
        for (const auto& m : medians) {
            if (m.variant == "disabled") continue;
            f << m.variant << ',' << m.prompt << ','
              << metrics::fmt_metric(app::improvement(base->overall_mae, m.overall_mae));
            for (auto im : events::kAllImpacts)
                f << ',' << metrics::fmt_metric(app::improvement(app::stratum_or_nan(base->stratum_mae, im),
                                                                 app::stratum_or_nan(m.stratum_mae, im)));
            f << '\n';
        }
    }
    for (const auto& m : medians)
        std::cout << "median variant=" << m.variant << " prompt=" << m.prompt
                  << " mae=" << metrics::fmt_metric(m.overall_mae)
                  << " high_mae=" << stratum_cell(m.stratum_mae, events::Impact::High) << '\n';
    return 0;
}

// ---- gradcheck ----

int cmd_gradcheck(const RunConfig& cfg) {
    constexpr double kTol = 1e-4;
    const auto t0 = std::chrono::steady_clock::now();
    const auto groups = app::toy_gradcheck(cfg.seed);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    bool ok = true;
    std::ofstream f(fs::path(cfg.out) / "gradcheck.csv", std::ios::binary);
    f << "group,max_rel_error,status\n";
    for (const auto& g : groups) {
        const bool pass = g.max_rel_error < kTol;
        ok = ok && pass;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.3e", g.max_rel_error);
        std::cout << g.group << ' ' << buf << ' ' << (pass ? "PASS" : "FAIL") << '\n';
        f << g.group << ',' << buf << ',' << (pass ? "PASS" : "FAIL") << '\n';
    }
    std::cout << (ok ? "PASS" : "FAIL") << " gradcheck tol=1e-4 seconds=" << csv::fmt(secs) << '\n';
    if (!ok) {
        std::cerr << "error: gradcheck exceeded tolerance 1e-4\n";
        return 2;
    }
    return 0;
}

// ---- export-embeddings ----

int cmd_export(const RunConfig& cfg, const std::string& checkpoint, std::size_t max_samples) {
    auto m = model::load_checkpoint(checkpoint_or_default(cfg, checkpoint));
    const auto d = app::load_or_synthesize(cfg);
    check_compatible(m, cfg, d);
    auto box = make_provider(cfg, d, {cfg.events.prompt});
    events::EventCache cache;
    load_store(cfg, cache);
    const auto p = app::prepare(cfg, d, *box.provider, cache, cfg.events.prompt, box.options);
    const auto te = p.examples(p.split.test);
    const std::size_t n_samples = std::min(max_samples, te.size());
    const std::size_t dim = static_cast<std::size_t>(m.config().d());

    std::ofstream f(fs::path(cfg.out) / "embeddings.csv", std::ios::binary);
    f << "sample,time,node,impact,kind";
    for (std::size_t c = 0; c < dim; ++c) f << ",c" << c;
    f << '\n';
    for (std::size_t s = 0; s < n_samples; ++s) {
        const auto& w = *te[s].window;
        const auto im = metrics::label_sample(w.t_anchor, static_cast<std::size_t>(cfg.data.h_out), d.series, d.records);
        num::Tape t;
        const auto fv = m.forward(t, w.x, *te[s].text);
        const std::pair<const char*, num::Var> kinds[] = {{"e_st", fv.e_st}, {"e_text", fv.e_text}, {"fused", fv.fused}};
        for (const auto& [name, var] : kinds) {
            const auto& v = t.value(var);
            for (std::size_t i = 0; i < v.rows(); ++i) {
                f << s << ',' << d.series.time_at(w.t_anchor).str() << ',' << i << ',' << events::to_string(im) << ','
                  << name;
                for (std::size_t c = 0; c < v.cols(); ++c) f << ',' << csv::fmt(v(i, c));
                f << '\n';
            }
        }
    }
    std::cout << "exported " << n_samples << " samples x " << d.series.nodes() << " nodes x 3 kinds to "
              << (fs::path(cfg.out) / "embeddings.csv").string() << '\n';
    return 0;
}

std::string one_line(std::string s) {
    for (char& c : s)
        if (c == '\n' || c == '\r') c = ' ';
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
    // The tape allocates and frees many mid-sized matrices per step; keep freed memory
    // in the heap instead of returning it to the kernel each time.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
#endif
    CLI::App cli{"Event-aware traffic forecasting toolkit"};
    cli.require_subcommand(1);
    CommonFlags flags;
    std::string script, checkpoint;
    std::size_t max_samples = 200;

    auto* synth = cli.add_subcommand("synth", "write a synthetic dataset");
    add_common(synth, flags);
    synth->add_option("--script", script, "event script JSON");
    auto* ev = cli.add_subcommand("events", "retrieve event texts into the event store");
    add_common(ev, flags);
    auto* train = cli.add_subcommand("train", "train one model, write checkpoint and history");
    add_common(train, flags);
    auto* eval = cli.add_subcommand("eval", "per-horizon and stratified test reports");
    add_common(eval, flags);
    eval->add_option("--checkpoint", checkpoint, "defaults to <out>/model.ckpt");
    auto* ablate = cli.add_subcommand("ablate", "fusion variants x seeds and the prompt sweep");
    add_common(ablate, flags);
    auto* grad = cli.add_subcommand("gradcheck", "full-model gradient check on the toy instance");
    add_common(grad, flags);
    auto* exp = cli.add_subcommand("export-embeddings", "E_st, projected E_text and fused rows as CSV");
    add_common(exp, flags);
    exp->add_option("--checkpoint", checkpoint, "defaults to <out>/model.ckpt");
    exp->add_option("--max-samples", max_samples, "test samples to export");

    try {
        cli.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return cli.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return cli.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << one_line(e.what()) << '\n';
        return e.get_exit_code() ? e.get_exit_code() : 1;
    }

    try {
        const RunConfig cfg = resolve(flags);
        if (*synth) return cmd_synth(cfg, script);
        if (*ev) return cmd_events(cfg);
        if (*train) return cmd_train(cfg);
        if (*eval) return cmd_eval(cfg, checkpoint);
        if (*ablate) return cmd_ablate(cfg);
        if (*grad) return cmd_gradcheck(cfg);
        if (*exp) return cmd_export(cfg, checkpoint, max_samples);
    } catch (const std::exception& e) {
        std::cerr << "error: " << one_line(e.what()) << '\n';
        return 1;
    }
    return 1;
}
