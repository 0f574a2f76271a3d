#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "fuse/events/prompt.hpp"
#include "fuse/events/record.hpp"
#include "fuse/events/response.hpp"
#include "fuse/graph.hpp"
#include "fuse/util/log.hpp"
#include "fuse/util/time.hpp"

namespace fuse::events {

/// Dedup bucket: coordinates rounded to 3 decimals, time floored to the query grid.
struct QueryKey {
    std::int64_t lat_milli = 0;
    std::int64_t lon_milli = 0;
    std::int64_t time_minutes = 0;
    PromptId prompt = PromptId::P1;

    friend auto operator<=>(const QueryKey&, const QueryKey&) = default;

    double lat() const { return static_cast<double>(lat_milli) / 1000.0; }
    double lon() const { return static_cast<double>(lon_milli) / 1000.0; }
    Timestamp time() const { return {time_minutes}; }

    /// "{lat}:{lon}:{time}:{template}", e.g. "34.052:-118.244:20120302T1740:P1".
    std::string canonical() const {
        auto coord = [](std::int64_t milli) {
            const std::int64_t a = milli < 0 ? -milli : milli;
            char buf[32];
            std::snprintf(buf, sizeof buf, "%s%lld.%03lld", milli < 0 ? "-" : "", static_cast<long long>(a / 1000),
                          static_cast<long long>(a % 1000));
            return std::string(buf);
        };
        const std::string t = time().str();  // YYYY-MM-DD HH:MM
        const std::string compact = t.substr(0, 4) + t.substr(5, 2) + t.substr(8, 2) + "T" + t.substr(11, 2) + t.substr(14, 2);
        return coord(lat_milli) + ":" + coord(lon_milli) + ":" + compact + ":" + to_string(prompt);
    }
};

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

inline QueryKey make_key(const graph::Sensor& s, Timestamp t, PromptId prompt, int grid_minutes) {
    if (grid_minutes < 1) throw std::invalid_argument("query grid must be >= 1 minute");
    return {std::llround(s.lat * 1000.0), std::llround(s.lon * 1000.0),
            floor_div(t.minutes, grid_minutes) * grid_minutes, prompt};
}

struct QueryRequest {
    int sensor = 0;
    Timestamp time{};  // first step of the input window
};

struct DedupResult {
    std::vector<QueryKey> keys;        // unique, in first-seen order
    std::vector<std::size_t> request;  // request i -> index into keys
};

inline DedupResult dedup(std::span<const QueryRequest> batch, const std::vector<graph::Sensor>& sensors,
                         PromptId prompt, int grid_minutes) {
    DedupResult r;
    std::map<QueryKey, std::size_t> seen;
    r.request.reserve(batch.size());
    for (const auto& q : batch) {
        if (q.sensor < 0 || static_cast<std::size_t>(q.sensor) >= sensors.size())
            throw std::out_of_range("dedup: sensor " + std::to_string(q.sensor) + " out of range");
        const QueryKey k = make_key(sensors[static_cast<std::size_t>(q.sensor)], q.time, prompt, grid_minutes);
        auto [it, inserted] = seen.emplace(k, r.keys.size());
        if (inserted) r.keys.push_back(k);
        r.request.push_back(it->second);
    }
    return r;
}

/// Map from QueryKey to parsed records, with exact hit/miss counters.
class EventCache {
public:
    std::optional<std::vector<EventRecord>> find(const QueryKey& k) const {
        std::shared_lock lock(mu_);
        auto it = map_.find(k);
        if (it == map_.end()) {
            ++misses_;
            return std::nullopt;
        }
        ++hits_;
        return it->second;
    }

    bool contains(const QueryKey& k) const {
        std::shared_lock lock(mu_);
        return map_.count(k) != 0;
    }

    /// First insertion wins.
    void insert(const QueryKey& k, std::vector<EventRecord> records) {
        std::unique_lock lock(mu_);
        map_.emplace(k, std::move(records));
    }

    std::size_t size() const {
        std::shared_lock lock(mu_);
        return map_.size();
    }
    std::uint64_t hits() const noexcept { return hits_; }
    std::uint64_t misses() const noexcept { return misses_; }

    nlohmann::json to_json() const;
    /// Adds entries from an event store written by to_json.
    void load_json(const nlohmann::json& j);

private:
    mutable std::shared_mutex mu_;
    std::map<QueryKey, std::vector<EventRecord>> map_;
    mutable std::atomic<std::uint64_t> hits_{0};
    mutable std::atomic<std::uint64_t> misses_{0};
};

class ProviderError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Source of raw event responses. fetch throws ProviderError on transport failure.
class Provider {
public:
    virtual ~Provider() = default;
    virtual std::string fetch(const QueryKey& key, const std::string& prompt) = 0;
};

/// Serves fixture responses by canonical key; unknown keys answer {"Event": ""}.
class MockProvider final : public Provider {
public:
    MockProvider() = default;
    explicit MockProvider(std::unordered_map<std::string, std::string> fixture) : fixture_(std::move(fixture)) {}
    MockProvider(MockProvider&& o) noexcept : fixture_(std::move(o.fixture_)), calls_(o.calls_.load()) {}

    static MockProvider from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw std::invalid_argument("fixture must be a JSON object keyed by canonical QueryKey");
        std::unordered_map<std::string, std::string> m;
        for (auto it = j.begin(); it != j.end(); ++it) m[it.key()] = it->is_string() ? it->get<std::string>() : it->dump();
        return MockProvider(std::move(m));
    }

    static MockProvider load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open fixture '" + path + "'");
        nlohmann::json j;
        in >> j;
        return from_json(j);
    }

    std::string fetch(const QueryKey& key, const std::string&) override {
        ++calls_;
        auto it = fixture_.find(key.canonical());
        return it == fixture_.end() ? std::string(R"({"Event": ""})") : it->second;
    }

    std::uint64_t calls() const noexcept { return calls_; }
    std::size_t fixture_size() const noexcept { return fixture_.size(); }

private:
    std::unordered_map<std::string, std::string> fixture_;
    std::atomic<std::uint64_t> calls_{0};
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

struct RetrievalOptions {
    int max_retries = 3;
    std::chrono::milliseconds initial_backoff{200};
    int max_concurrency = 1;
    double rate_per_second = 0.0;  // 0 disables rate limiting
    Sleeper sleep = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
};

struct RetrievalStats {
    std::size_t requested_keys = 0;
    std::size_t cache_hits = 0;
    std::size_t provider_keys = 0;
    std::size_t fallbacks = 0;
    std::size_t parse_errors = 0;
};

/// Spaces calls at least 1/rate apart; thread-safe.
class TokenBucket {
public:
    TokenBucket(double rate, Sleeper sleep) : rate_(rate), sleep_(std::move(sleep)) {}

    void acquire() {
        if (rate_ <= 0.0) return;
        using clock = std::chrono::steady_clock;
        const auto gap = std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(1.0 / rate_));
        clock::time_point slot;
        {
            std::lock_guard lock(mu_);
            const auto now = clock::now();
            slot = std::max(now, next_);
            next_ = slot + gap;
        }
        const auto wait = slot - clock::now();
        if (wait > clock::duration::zero()) sleep_(std::chrono::duration_cast<std::chrono::milliseconds>(wait));
    }

private:
    double rate_;
    Sleeper sleep_;
    std::mutex mu_;
    std::chrono::steady_clock::time_point next_{};
};

inline EventRecord fallback_record() { return EventRecord{}; }

/// Default prompt for a key: built-in template at the bucket coordinates.
inline std::string key_prompt(const QueryKey& k, int h_in, int h_out, int interval_minutes) {
    graph::Sensor s{0, k.lat(), k.lon()};
    return render_prompt(builtin_template(k.prompt), s, k.time(), h_in, h_out, interval_minutes);
}

/// Resolves every key through the cache, calling the provider once per cache miss.
/// Transport failures are retried with exponential backoff; a key that still fails,
/// or whose response cannot be parsed, resolves to a single None-impact record.
inline std::map<QueryKey, std::vector<EventRecord>> retrieve(
    Provider& provider, std::span<const QueryKey> keys, EventCache& cache,
    const std::function<std::string(const QueryKey&)>& prompt_for, const RetrievalOptions& opts = {},
    RetrievalStats* stats = nullptr) {
    std::map<QueryKey, std::vector<EventRecord>> out;
    std::vector<QueryKey> misses;
    std::set<QueryKey> pending;
    RetrievalStats st;
    for (const auto& k : keys) {
        if (out.count(k) || pending.count(k)) continue;
        ++st.requested_keys;
        if (auto hit = cache.find(k)) {
            ++st.cache_hits;
            out.emplace(k, std::move(*hit));
        } else {
            pending.insert(k);
            misses.push_back(k);
        }
    }
    st.provider_keys = misses.size();

    std::vector<std::vector<EventRecord>> results(misses.size());
    std::vector<char> fell_back(misses.size(), 0), parse_failed(misses.size(), 0);
    TokenBucket bucket(opts.rate_per_second, opts.sleep);
    std::atomic<std::size_t> next{0};

    auto worker = [&] {
        for (std::size_t i = next++; i < misses.size(); i = next++) {
            const QueryKey& k = misses[i];
            const std::string prompt = prompt_for(k);
            std::optional<std::string> raw;
            auto backoff = opts.initial_backoff;
            for (int attempt = 0; attempt <= opts.max_retries && !raw; ++attempt) {
                if (attempt > 0) {
                    opts.sleep(backoff);
                    backoff *= 2;
                }
                bucket.acquire();
                try {
                    raw = provider.fetch(k, prompt);
                } catch (const ProviderError& e) {
                    if (attempt == opts.max_retries)
                        log_warn("retrieval failed for " + k.canonical() + " after " +
                                 std::to_string(opts.max_retries + 1) + " attempts: " + e.what() +
                                 "; using None-impact fallback");
                }
            }
            if (!raw) {
                results[i] = {fallback_record()};
                fell_back[i] = 1;
                continue;
            }
            try {
                results[i] = parse_response(*raw);
            } catch (const ResponseParseError& e) {
                log_warn("unparseable response for " + k.canonical() + ": " + e.what() + "; using None-impact fallback");
                results[i] = {fallback_record()};
                parse_failed[i] = 1;
            }
        }
    };

    const int threads = std::max(1, std::min<int>(opts.max_concurrency, static_cast<int>(misses.size())));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    for (std::size_t i = 0; i < misses.size(); ++i) {
        // Fallbacks are not cached, so a later run can retry the key.
        if (!fell_back[i] && !parse_failed[i]) cache.insert(misses[i], results[i]);
        st.fallbacks += static_cast<std::size_t>(fell_back[i] + parse_failed[i]);
        st.parse_errors += static_cast<std::size_t>(parse_failed[i]);
        out.emplace(misses[i], std::move(results[i]));
    }
    if (stats) *stats = st;
    return out;
}

/// Joins each request's event texts with ", " and takes the strongest impact.
struct SensorContext {
    std::vector<std::string> texts;
    std::vector<Impact> impact;
};

inline SensorContext assemble(const DedupResult& d, const std::map<QueryKey, std::vector<EventRecord>>& resolved) {
    SensorContext c;
    for (std::size_t idx : d.request) {
        std::string text;
        Impact im = Impact::None;
        if (auto it = resolved.find(d.keys[idx]); it != resolved.end())
            for (const auto& r : it->second) {
                if (r.text.empty()) continue;
                if (!text.empty()) text += ", ";
                text += r.text;
                im = max_impact(im, r.impact);
            }
        c.texts.push_back(std::move(text));
        c.impact.push_back(im);
    }
    return c;
}

// ---- persistence of the cache (event store) ----

inline nlohmann::json record_to_json(const EventRecord& r) {
    return {{"impact", to_string(r.impact)}, {"text", r.text}};
}

inline nlohmann::json EventCache::to_json() const {
    std::shared_lock lock(mu_);
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, recs] : map_) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& r : recs) arr.push_back(record_to_json(r));
        j[k.canonical()] = std::move(arr);
    }
    return j;
}

inline QueryKey parse_canonical_key(const std::string& s) {
    // lat:lon:YYYYMMDDTHHMM:Pn
    const auto p1 = s.find(':');
    const auto p2 = s.find(':', p1 + 1);
    const auto p3 = s.find(':', p2 + 1);
    if (p1 == std::string::npos || p2 == std::string::npos || p3 == std::string::npos)
        throw std::invalid_argument("malformed query key '" + s + "'");
    auto milli = [&](const std::string& c) { return std::llround(std::stod(c) * 1000.0); };
    const std::string t = s.substr(p2 + 1, p3 - p2 - 1);
    if (t.size() != 13 || t[8] != 'T') throw std::invalid_argument("malformed time in query key '" + s + "'");
    const Timestamp ts = Timestamp::parse(t.substr(0, 4) + "-" + t.substr(4, 2) + "-" + t.substr(6, 2) + " " +
                                          t.substr(9, 2) + ":" + t.substr(11, 2));
    return {milli(s.substr(0, p1)), milli(s.substr(p1 + 1, p2 - p1 - 1)), ts.minutes, prompt_id_from(s.substr(p3 + 1))};
}

inline void EventCache::load_json(const nlohmann::json& j) {
    std::unique_lock lock(mu_);
    for (auto it = j.begin(); it != j.end(); ++it) {
        std::vector<EventRecord> recs;
        for (const auto& r : *it) {
            const auto im = impact_from(r.at("impact").get<std::string>());
            if (!im) throw std::invalid_argument("event store: bad impact in " + it.key());
            recs.push_back(EventRecord{-1, {}, {}, *im, r.at("text").get<std::string>()});
        }
        map_.emplace(parse_canonical_key(it.key()), std::move(recs));
    }
}

}  // namespace fuse::events
