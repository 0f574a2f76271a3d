#pragma once

#include <cctype>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fuse/events/record.hpp"

namespace fuse::events {

/// Recoverable: callers substitute a None-impact record.
class ResponseParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Splits on commas that are not inside parentheses; trims and drops empty pieces.
inline std::vector<std::string> split_event_list(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    int depth = 0;
    auto flush = [&] {
        std::size_t a = 0, b = cur.size();
        while (a < b && std::isspace(static_cast<unsigned char>(cur[a]))) ++a;
        while (b > a && std::isspace(static_cast<unsigned char>(cur[b - 1]))) --b;
        if (b > a) out.emplace_back(cur.substr(a, b - a));
        cur.clear();
    };
    for (char c : s) {
        if (c == '(') ++depth;
        else if (c == ')' && depth > 0) --depth;
        if (c == ',' && depth == 0) flush();
        else cur += c;
    }
    flush();
    return out;
}

namespace detail {

inline nlohmann::json parse_json_object(std::string_view raw) {
    auto try_parse = [](std::string_view s) {
        return nlohmann::json::parse(s.begin(), s.end(), nullptr, /*allow_exceptions=*/false);
    };
    nlohmann::json j = try_parse(raw);
    if (j.is_discarded() || !j.is_object()) {
        // Models often wrap the object in prose or code fences.
        const auto a = raw.find('{');
        const auto b = raw.rfind('}');
        if (a != std::string_view::npos && b != std::string_view::npos && b > a) j = try_parse(raw.substr(a, b - a + 1));
    }
    if (j.is_discarded() || !j.is_object()) throw ResponseParseError("response is not a JSON object");
    return j;
}

}  // namespace detail

/// Parses a provider response into event records (node id and window left unset).
/// A missing or empty "Event" field yields a single None-impact record. "Impact" may be
/// a string for the whole response or an array aligned with the events; absent or
/// unrecognized values default to Minor. A None impact collapses the response to one
/// None-impact record.
inline std::vector<EventRecord> parse_response(std::string_view raw) {
    const nlohmann::json j = detail::parse_json_object(raw);
    std::vector<EventRecord> out;
    const auto ev = j.find("Event");
    if (ev == j.end() || ev->is_null()) return {EventRecord{}};
    if (!ev->is_string()) throw ResponseParseError("\"Event\" field is not a string");
    const auto texts = split_event_list(ev->get_ref<const std::string&>());
    if (texts.empty()) return {EventRecord{}};

    auto impact_of = [&](std::size_t k) -> Impact {
        const auto im = j.find("Impact");
        if (im == j.end()) return Impact::Minor;
        const nlohmann::json* v = &*im;
        if (im->is_array()) {
            if (k >= im->size()) return Impact::Minor;
            v = &(*im)[k];
        }
        if (!v->is_string()) return Impact::Minor;
        return impact_from(v->get_ref<const std::string&>()).value_or(Impact::Minor);
    };

    for (std::size_t k = 0; k < texts.size(); ++k) {
        const Impact im = impact_of(k);
        if (im == Impact::None) continue;
        out.push_back(EventRecord{-1, {}, {}, im, texts[k]});
    }
    if (out.empty()) return {EventRecord{}};
    return out;
}

}  // namespace fuse::events
