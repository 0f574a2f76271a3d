#pragma once

#include <array>
#include <cctype>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>

#include "fuse/graph.hpp"
#include "fuse/util/time.hpp"

namespace fuse::events {

class TemplateError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class PromptId { P1, P2, P3, P4, P5 };

inline constexpr std::array<PromptId, 5> kAllPrompts{PromptId::P1, PromptId::P2, PromptId::P3, PromptId::P4,
                                                     PromptId::P5};

inline const char* to_string(PromptId id) {
    static constexpr const char* kNames[] = {"P1", "P2", "P3", "P4", "P5"};
    return kNames[static_cast<int>(id)];
}

inline PromptId prompt_id_from(std::string_view s) {
    for (PromptId id : kAllPrompts)
        if (s == to_string(id)) return id;
    throw TemplateError("unknown prompt template '" + std::string(s) + "'");
}

/// Prompt body with {lat}, {lon}, {timestamp} and {window} placeholders.
struct PromptTemplate {
    PromptId id = PromptId::P1;
    std::string body;
};

namespace detail {

inline constexpr std::string_view kPreamble =
    "Location: ({lat}, {lon})\n"
    "Timestamp: '{timestamp}'\n"
    "Event time window: {window}\n";

inline constexpr std::string_view kResponseFormat =
    "Return JSON only: {\"Event\": \"<events separated by commas>\", \"Impact\": \"<None|Minor|Moderate|High>\"}\n";

inline constexpr std::array<std::string_view, 5> kInstructions{
    "For each sensor, identify nearby events that could impact traffic (e.g., LA news, Severe Weather, concerts, "
    "crime). Example: Classic Cinema Night at Cinegrill Theater.",
    "For each sensor, identify the most influential event that could impact traffic (e.g., LA news, Severe "
    "Weather, concerts, crime). Example: Classic Cinema Night at Cinegrill Theater.",
    "For each sensor, identify nearby events that could impact traffic (e.g., LA news, concerts, crime). Example: "
    "Classic Cinema Night at Cinegrill Theater.",
    "For each sensor, identify nearby events that could impact traffic (e.g., LA news, Severe Weather, concerts). "
    "Example: Classic Cinema Night at Cinegrill Theater.",
    "For each sensor, identify nearby events that could impact traffic (e.g., LA news, Severe Weather, concerts).",
};

}  // namespace detail

inline PromptTemplate builtin_template(PromptId id) {
    std::string body(detail::kPreamble);
    body += detail::kInstructions[static_cast<int>(id)];
    body += '\n';
    body += detail::kResponseFormat;
    return {id, std::move(body)};
}

/// Expands {name} placeholders. A brace group that looks like an identifier but is
/// not one of the four known names is an error; other braces are literal text.
inline std::string expand(std::string_view body, std::string_view lat, std::string_view lon,
                          std::string_view timestamp, std::string_view window) {
    std::string out;
    out.reserve(body.size() + 64);
    for (std::size_t i = 0; i < body.size(); ++i) {
        if (body[i] != '{') {
            out += body[i];
            continue;
        }
        std::size_t j = i + 1;
        while (j < body.size() && (std::isalnum(static_cast<unsigned char>(body[j])) || body[j] == '_')) ++j;
        if (j == i + 1 || j >= body.size() || body[j] != '}') {
            out += body[i];
            continue;
        }
        const std::string_view name = body.substr(i + 1, j - i - 1);
        if (name == "lat") out += lat;
        else if (name == "lon") out += lon;
        else if (name == "timestamp") out += timestamp;
        else if (name == "window") out += window;
        else throw TemplateError("unknown placeholder '{" + std::string(name) + "}'");
        i = j;
    }
    return out;
}

/// Wall-clock description of prediction steps input_start + H_in ... input_start + H_in + H_out - 1.
inline std::string render_window(Timestamp input_start, int h_in, int h_out, int interval_minutes) {
    const Timestamp first = input_start.plus_minutes(static_cast<std::int64_t>(h_in) * interval_minutes);
    const Timestamp last = input_start.plus_minutes(static_cast<std::int64_t>(h_in + h_out - 1) * interval_minutes);
    std::string w = first.str();
    if (h_out > 1) w += " to " + last.str();
    return w + " (" + first.weekday_name() + ")";
}

inline std::string format_coord(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

/// Renders the retrieval prompt for one sensor. `input_start` is the first time step of
/// the input window; the rendered window covers the H_out prediction steps after it.
inline std::string render_prompt(const PromptTemplate& tpl, const graph::Sensor& sensor, Timestamp input_start,
                                 int h_in, int h_out, int interval_minutes = 5) {
    if (h_in < 1 || h_out < 1) throw TemplateError("render_prompt: H_in and H_out must be >= 1");
    return expand(tpl.body, format_coord(sensor.lat), format_coord(sensor.lon), input_start.str(),
                  render_window(input_start, h_in, h_out, interval_minutes));
}

}  // namespace fuse::events
