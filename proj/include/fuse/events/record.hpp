#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <optional>
#include <string>
#include <string_view>

#include "fuse/util/time.hpp"

namespace fuse::events {

enum class Impact { None = 0, Minor = 1, Moderate = 2, High = 3 };

inline constexpr std::array<Impact, 4> kAllImpacts{Impact::None, Impact::Minor, Impact::Moderate, Impact::High};

inline const char* to_string(Impact i) {
    switch (i) {
        case Impact::None: return "None";
        case Impact::Minor: return "Minor";
        case Impact::Moderate: return "Moderate";
        case Impact::High: return "High";
    }
    return "None";
}

/// Accepts "High", "high impact", "No Impact", ... Unrecognized text yields nullopt.
inline std::optional<Impact> impact_from(std::string_view s) {
    std::string t;
    for (char c : s) t += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    auto starts = [&](std::string_view p) { return t.rfind(p, 0) == 0; };
    if (starts("none") || starts("no impact") || t == "no") return Impact::None;
    if (starts("minor") || starts("low")) return Impact::Minor;
    if (starts("moderate") || starts("medium")) return Impact::Moderate;
    if (starts("high") || starts("severe") || starts("major")) return Impact::High;
    return std::nullopt;
}

/// One event description attached to a sensor for a time window.
/// Invariant: text is empty exactly when impact is None.
struct EventRecord {
    int node_id = -1;
    Timestamp window_start{};
    Timestamp window_end{};
    Impact impact = Impact::None;
    std::string text;

    friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

inline Impact max_impact(Impact a, Impact b) { return static_cast<int>(a) >= static_cast<int>(b) ? a : b; }

}  // namespace fuse::events
