#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fuse/data.hpp"
#include "fuse/events/prompt.hpp"
#include "fuse/events/record.hpp"
#include "fuse/events/retrieval.hpp"
#include "fuse/graph.hpp"
#include "fuse/numerics/rng.hpp"

namespace fuse::synth {

using events::Impact;

class SynthError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class EventKind { Accident, Concert, Weather, Crime };

inline constexpr std::array<EventKind, 4> kAllKinds{EventKind::Accident, EventKind::Concert, EventKind::Weather,
                                                    EventKind::Crime};

inline const char* to_string(EventKind k) {
    static constexpr const char* kNames[] = {"accident", "concert", "weather", "crime"};
    return kNames[static_cast<int>(k)];
}

inline EventKind event_kind_from(const std::string& s) {
    for (EventKind k : kAllKinds)
        if (s == to_string(k)) return k;
    throw SynthError("unknown event kind '" + s + "'");
}

/// Speed multiplier at the plateau of an event of the given class.
inline double impact_factor(Impact i) {
    switch (i) {
        case Impact::None: return 1.0;
        case Impact::Minor: return 0.9;
        case Impact::Moderate: return 0.7;
        case Impact::High: return 0.4;
    }
    return 1.0;
}

inline constexpr int kRampSteps = 3;
inline constexpr double kNoiseAr = 0.8;

struct SynthEvent {
    std::vector<int> nodes;
    int start = 0;
    int duration = 1;
    Impact impact = Impact::None;
    EventKind kind = EventKind::Accident;
    std::string text;  // filled from templates when empty

    int end() const { return start + duration; }  // exclusive
};

struct GeneratorConfig {
    int n_sensors = 20;
    int n_steps = 2880;
    int interval_minutes = 5;
    double base_speed = 65.0;
    double daily_amplitude = 12.0;
    double noise_std = 1.5;
    double neighbor_decay = 0.5;
    std::uint64_t seed = 1;
    Timestamp start_time = Timestamp::parse("2012-03-01 00:00");

    void validate() const {
        if (n_sensors < 1 || n_steps < 1) throw SynthError("n_sensors and n_steps must be >= 1");
        if (interval_minutes < 1 || 1440 % interval_minutes != 0)
            throw SynthError("interval_minutes must divide a day");
        if (!(base_speed > daily_amplitude && daily_amplitude >= 0.0))
            throw SynthError("require base_speed > daily_amplitude >= 0");
        if (!(noise_std >= 0.0)) throw SynthError("noise_std must be >= 0");
        if (!(neighbor_decay >= 0.0 && neighbor_decay <= 1.0)) throw SynthError("neighbor_decay must lie in [0, 1]");
    }
};

// Single-token place names keep each sensor's name a distinct token for the text encoder.
inline std::string place_name(int sensor) {
    static constexpr std::array<const char*, 24> kPlaces{
        "Downtown", "Koreatown", "Hollywood", "Westlake",  "Chinatown", "Glendale",   "Burbank",  "Pasadena",
        "Inglewood", "Westwood", "Encino",    "Atwater",   "Silverlake", "Eastside",  "Brentwood", "Tarzana",
        "Reseda",   "Northridge", "Sunland",  "Tujunga",   "Altadena",  "Alhambra",   "Montebello", "Compton"};
    if (sensor >= 0 && sensor < static_cast<int>(kPlaces.size())) return kPlaces[static_cast<std::size_t>(sensor)];
    return "Sector" + std::to_string(sensor);
}

/// Descriptions share one severity word per class (minor / serious / severe).
inline std::string event_description(EventKind kind, Impact impact) {
    static constexpr const char* kText[4][4] = {
        // None, Minor, Moderate, High
        {"", "Minor fender bender on the shoulder", "Serious injury collision blocking two lanes",
         "Severe multi-vehicle crash with full freeway closure"},
        {"", "Minor crowds from a small club concert", "Serious congestion from a large arena concert",
         "Severe gridlock from a sold-out stadium concert"},
        {"", "Minor light drizzle", "Serious heavy rain with poor visibility", "Severe storm flooding with road closures"},
        {"", "Minor police activity", "Serious police activity closing a lane",
         "Severe police standoff with major road closures"},
    };
    return kText[static_cast<int>(kind)][static_cast<int>(impact)];
}

/// Sensors along a corridor out of downtown LA, about 1.5 km apart.
inline std::vector<graph::Sensor> corridor_sensors(int n, std::uint64_t seed) {
    num::Rng rng = num::Rng(seed).split("corridor");
    std::vector<graph::Sensor> out;
    double lat = 34.0522, lon = -118.2437;
    double heading = 0.6;
    for (int i = 0; i < n; ++i) {
        out.push_back({i, lat, lon});
        heading += rng.uniform(-0.25, 0.25);
        const double step_km = 1.5 + rng.uniform(-0.1, 0.1);
        lat += step_km / 111.0 * std::sin(heading);
        lon += step_km / (111.0 * std::cos(lat * std::numbers::pi / 180.0)) * std::cos(heading);
    }
    return out;
}

/// Corridor network where only consecutive sensors are linked.
inline graph::RoadNetwork corridor_network(int n, std::uint64_t seed) {
    return graph::build_from_coordinates(corridor_sensors(n, seed), 1.5, graph::kDefaultThreshold);
}

struct SynthOutput {
    data::TrafficSeries series;
    std::vector<events::EventRecord> records;  // one per (event, event node)
};

inline void validate_events(const std::vector<SynthEvent>& evs, int n_steps, int n_sensors) {
    for (std::size_t k = 0; k < evs.size(); ++k) {
        const auto& e = evs[k];
        const std::string tag = "event " + std::to_string(k);
        if (e.duration < 1) throw SynthError(tag + ": duration must be >= 1");
        if (e.nodes.empty()) throw SynthError(tag + ": no nodes");
        if (e.start < 0 || e.end() > n_steps) throw SynthError(tag + ": window outside [0, n_steps)");
        for (int v : e.nodes)
            if (v < 0 || v >= n_sensors) throw SynthError(tag + ": node " + std::to_string(v) + " out of range");
    }
}

/// Ramp weight in [0, 1] of an event at step t (0 outside the event window).
inline double ramp_weight(const SynthEvent& e, int t) {
    if (t < e.start || t >= e.end()) return 0.0;
    const double up = static_cast<double>(t - e.start + 1) / kRampSteps;
    const double down = static_cast<double>(e.end() - t) / kRampSteps;
    return std::min({1.0, up, down});
}

/// Where an event happens: the place names of its nodes, joined with "and".
inline std::string venue(const SynthEvent& e) {
    std::string v;
    for (std::size_t k = 0; k < e.nodes.size(); ++k) v += (k ? " and " : "") + place_name(e.nodes[k]);
    return v;
}

inline std::string ground_truth_text(const SynthEvent& e) {
    if (!e.text.empty()) return e.text;
    if (e.impact == Impact::None) return "";
    return event_description(e.kind, e.impact) + " at " + venue(e);
}

inline SynthOutput generate(const GeneratorConfig& cfg, const std::vector<SynthEvent>& evs,
                            const graph::RoadNetwork& net) {
    cfg.validate();
    if (static_cast<int>(net.size()) != cfg.n_sensors)
        throw SynthError("network has " + std::to_string(net.size()) + " nodes, config says " +
                         std::to_string(cfg.n_sensors));
    validate_events(evs, cfg.n_steps, cfg.n_sensors);

    const int n = cfg.n_sensors, steps = cfg.n_steps;
    const double steps_per_day = 1440.0 / cfg.interval_minutes;
    const num::Rng root(cfg.seed);
    num::Rng phase_rng = root.split("phase");
    num::Rng noise_rng = root.split("noise");

    SynthOutput out;
    out.series.values = num::Matrix(static_cast<std::size_t>(n), static_cast<std::size_t>(steps));
    out.series.interval_minutes = cfg.interval_minutes;
    out.series.start_time = cfg.start_time;
    out.series.kind = data::SeriesKind::Speed;

    const double innovation = cfg.noise_std * std::sqrt(1.0 - kNoiseAr * kNoiseAr);
    for (int i = 0; i < n; ++i) {
        const double phase = 2.0 * std::numbers::pi * phase_rng.uniform();
        double e = cfg.noise_std * noise_rng.normal();
        for (int t = 0; t < steps; ++t) {
            if (t > 0) e = kNoiseAr * e + innovation * noise_rng.normal();
            const double base =
                cfg.base_speed - cfg.daily_amplitude * std::sin(2.0 * std::numbers::pi * t / steps_per_day + phase);
            out.series.values(static_cast<std::size_t>(i), static_cast<std::size_t>(t)) = base + e;
        }
    }

    for (const auto& ev : evs) {
        if (ev.impact == Impact::None) {
            for (int v : ev.nodes)
                out.records.push_back({v, out.series.time_at(static_cast<std::size_t>(ev.start)),
                                       out.series.time_at(static_cast<std::size_t>(ev.end() - 1)), Impact::None, ""});
            continue;
        }
        const double drop = 1.0 - impact_factor(ev.impact);
        std::set<int> direct(ev.nodes.begin(), ev.nodes.end());
        std::set<int> nearby;
        for (int v : direct)
            for (int u : graph::neighbors(net, v))
                if (!direct.count(u)) nearby.insert(u);
        for (int t = ev.start; t < ev.end(); ++t) {
            const double w = ramp_weight(ev, t);
            for (int v : direct) out.series.values(static_cast<std::size_t>(v), static_cast<std::size_t>(t)) *= 1.0 - drop * w;
            for (int u : nearby)
                out.series.values(static_cast<std::size_t>(u), static_cast<std::size_t>(t)) *=
                    1.0 - drop * w * cfg.neighbor_decay;
        }
        for (int v : ev.nodes)
            out.records.push_back({v, out.series.time_at(static_cast<std::size_t>(ev.start)),
                                   out.series.time_at(static_cast<std::size_t>(ev.end() - 1)), ev.impact,
                                   ground_truth_text(ev)});
    }
    for (double& v : out.series.values.values()) v = std::max(0.0, v);
    return out;
}

/// A seeded script spread evenly in time. Impacts cycle High, Moderate, Minor, None so
/// every stretch of the series holds all four classes; kinds, timing and nodes are random.
inline std::vector<SynthEvent> random_script(const GeneratorConfig& cfg, int count, std::uint64_t seed,
                                             int min_duration = 18, int max_duration = 36) {
    num::Rng rng = num::Rng(seed).split("script");
    std::vector<SynthEvent> out;
    if (count <= 0) return out;
    const int slot = cfg.n_steps / count;
    static constexpr Impact kCycle[] = {Impact::High, Impact::Moderate, Impact::Minor, Impact::None};
    for (int k = 0; k < count; ++k) {
        SynthEvent e;
        e.impact = kCycle[k % 4];
        e.kind = kAllKinds[rng.below(4)];
        e.duration = min_duration + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_duration - min_duration + 1)));
        e.duration = std::min(e.duration, std::max(1, slot - 1));
        const int latest = std::max(0, slot - e.duration);
        e.start = k * slot + static_cast<int>(rng.below(static_cast<std::uint64_t>(latest + 1)));
        const int width = 1 + static_cast<int>(rng.below(2));
        const int first = static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, cfg.n_sensors - width + 1))));
        for (int v = first; v < std::min(cfg.n_sensors, first + width); ++v) e.nodes.push_back(v);
        out.push_back(std::move(e));
    }
    return out;
}

// ---- event script files ----

inline nlohmann::json to_json(const SynthEvent& e) {
    return {{"nodes", e.nodes},       {"start", e.start},          {"duration", e.duration},
            {"impact", events::to_string(e.impact)}, {"kind", to_string(e.kind)}, {"text", e.text}};
}

inline SynthEvent event_from_json(const nlohmann::json& j) {
    static const std::set<std::string> kKeys{"nodes", "start", "duration", "impact", "kind", "text"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!kKeys.count(it.key())) throw SynthError("event script: unknown key '" + it.key() + "'");
    SynthEvent e;
    e.nodes = j.at("nodes").get<std::vector<int>>();
    e.start = j.at("start").get<int>();
    e.duration = j.at("duration").get<int>();
    const auto im = events::impact_from(j.at("impact").get<std::string>());
    if (!im) throw SynthError("event script: unknown impact '" + j.at("impact").get<std::string>() + "'");
    e.impact = *im;
    e.kind = event_kind_from(j.value("kind", std::string("accident")));
    e.text = j.value("text", std::string());
    return e;
}

inline std::vector<SynthEvent> script_from_json(const nlohmann::json& j) {
    if (!j.is_array()) throw SynthError("event script must be a JSON array");
    std::vector<SynthEvent> out;
    for (const auto& e : j) out.push_back(event_from_json(e));
    return out;
}

inline nlohmann::json script_to_json(const std::vector<SynthEvent>& evs) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : evs) j.push_back(to_json(e));
    return j;
}

inline nlohmann::json records_to_json(const std::vector<events::EventRecord>& recs) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : recs)
        j.push_back({{"node_id", r.node_id},
                     {"window_start", r.window_start.str()},
                     {"window_end", r.window_end.str()},
                     {"impact", events::to_string(r.impact)},
                     {"text", r.text}});
    return j;
}

inline std::vector<events::EventRecord> records_from_json(const nlohmann::json& j) {
    std::vector<events::EventRecord> out;
    for (const auto& r : j) {
        const auto im = events::impact_from(r.at("impact").get<std::string>());
        if (!im) throw SynthError("events sidecar: bad impact");
        out.push_back({r.at("node_id").get<int>(), Timestamp::parse(r.at("window_start").get<std::string>()),
                       Timestamp::parse(r.at("window_end").get<std::string>()), *im, r.at("text").get<std::string>()});
    }
    return out;
}

// ---- mock provider fixtures ----

struct FixtureOptions {
    int h_in = 12;
    int h_out = 12;
    int grid_minutes = 5;
    std::vector<events::PromptId> prompts{events::PromptId::P1};
    bool neighbors = true;  // one-hop neighbors of an event's sensors also get its text
    bool quiet_text = false;  // sensors with nothing to report answer with a typical-traffic line
};

namespace detail {

/// One number per phrase: a bag-of-tokens encoder cannot tell two numbers apart.
inline std::string timing_phrase(const SynthEvent& e, int anchor, int h_out, int interval) {
    if (e.start > anchor) return "(starting in about " + std::to_string((e.start - anchor) * interval) + " minutes)";
    if (e.end() - 1 < anchor + h_out)
        return "(ongoing, clearing in about " + std::to_string((e.end() - anchor) * interval) + " minutes)";
    return "(ongoing)";
}

}  // namespace detail

/// What an ideal retriever answers when asked about the window after `anchor`: every
/// listed event by description and venue, under each prompt variant:
///   P1 every event; P2 only the strongest; P3 no weather; P4 no crime;
///   P5 no example in the prompt, so descriptions lose their severity detail.
inline std::string fixture_response(const std::vector<const SynthEvent*>& evs, int anchor, int h_out, int interval,
                                    events::PromptId prompt) {
    std::vector<const SynthEvent*> kept;
    for (const auto* e : evs) {
        if (prompt == events::PromptId::P3 && e->kind == EventKind::Weather) continue;
        if (prompt == events::PromptId::P4 && e->kind == EventKind::Crime) continue;
        kept.push_back(e);
    }
    if (prompt == events::PromptId::P2 && kept.size() > 1)
        kept = {*std::max_element(kept.begin(), kept.end(), [](const SynthEvent* a, const SynthEvent* b) {
            return static_cast<int>(a->impact) < static_cast<int>(b->impact);
        })};
    std::string text;
    nlohmann::json impacts = nlohmann::json::array();
    for (const auto* e : kept) {
        const std::string desc = prompt == events::PromptId::P5 ? std::string(to_string(e->kind)) + " reported"
                                                                : event_description(e->kind, e->impact);
        if (!text.empty()) text += ", ";
        text += desc + " at " + venue(*e) + " " + detail::timing_phrase(*e, anchor, h_out, interval);
        impacts.push_back(events::to_string(e->impact));
    }
    nlohmann::json j{{"Event", text}};
    if (!kept.empty()) j["Impact"] = impacts;
    return j.dump();
}

/// Builds a MockProvider fixture (canonical key -> response JSON). A sensor's query
/// returns the events at that sensor (and, with `neighbors`, at a one-hop neighbor) whose
/// window reaches the target window. Responses name the event's venue, not the queried sensor.
inline nlohmann::json build_fixture(const data::TrafficSeries& series, const graph::RoadNetwork& net,
                                    const std::vector<SynthEvent>& evs, const FixtureOptions& opt) {
    const int steps = static_cast<int>(series.steps());
    std::map<std::pair<int, int>, std::vector<const SynthEvent*>> by_query;  // (anchor, node)
    for (const auto& e : evs) {
        if (e.impact == Impact::None) continue;
        std::set<int> reach(e.nodes.begin(), e.nodes.end());
        if (opt.neighbors)
            for (int v : e.nodes)
                for (int u : graph::neighbors(net, v)) reach.insert(u);
        const int a_lo = std::max(opt.h_in - 1, e.start - opt.h_out);
        const int a_hi = std::min(steps - opt.h_out - 1, e.end() - 2);
        for (int a = a_lo; a <= a_hi; ++a)
            for (int u : reach) by_query[{a, u}].push_back(&e);
    }
    nlohmann::json fixture = nlohmann::json::object();
    auto put = [&](int anchor, int node, const auto& response) {
        const Timestamp input_start = series.time_at(static_cast<std::size_t>(anchor - opt.h_in + 1));
        for (auto p : opt.prompts) {
            const auto key = events::make_key(net.sensors.at(static_cast<std::size_t>(node)), input_start, p, opt.grid_minutes);
            fixture[key.canonical()] = response(p);
        }
    };
    for (const auto& [q, listed] : by_query)
        put(q.first, q.second, [&](events::PromptId p) {
            return fixture_response(listed, q.first, opt.h_out, series.interval_minutes, p);
        });
    if (opt.quiet_text) {
        // No "Impact" field, as in a plain LLM answer; the parser files these as Minor.
        for (int a = opt.h_in - 1; a + opt.h_out < steps; ++a)
            for (int u = 0; u < static_cast<int>(net.size()); ++u) {
                if (by_query.count({a, u})) continue;
                const std::string quiet = nlohmann::json{{"Event", "Typical traffic near " + place_name(u)}}.dump();
                put(a, u, [&](events::PromptId) { return quiet; });
            }
    }
    return fixture;
}

}  // namespace fuse::synth
