#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fuse {

/// Wall-clock timestamp at minute resolution, stored as minutes since 1970-01-01 00:00.
struct Timestamp {
    std::int64_t minutes = 0;

    friend auto operator<=>(const Timestamp&, const Timestamp&) = default;
    Timestamp plus_minutes(std::int64_t m) const { return {minutes + m}; }

    /// Parses "YYYY-MM-DD HH:MM".
    static Timestamp parse(std::string_view s) {
        int y = 0, mo = 0, d = 0, h = 0, mi = 0;
        const std::string buf(s);
        char tail = 0;
        if (std::sscanf(buf.c_str(), "%4d-%2d-%2d %2d:%2d%c", &y, &mo, &d, &h, &mi, &tail) != 5)
            throw std::invalid_argument("timestamp: expected 'YYYY-MM-DD HH:MM', got '" + buf + "'");
        using namespace std::chrono;
        const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
        if (!ymd.ok() || h < 0 || h > 23 || mi < 0 || mi > 59)
            throw std::invalid_argument("timestamp: out-of-range field in '" + buf + "'");
        const auto days_since = sys_days{ymd}.time_since_epoch().count();
        return {static_cast<std::int64_t>(days_since) * 1440 + h * 60 + mi};
    }

    std::string str() const {
        using namespace std::chrono;
        const std::int64_t day_index = minutes >= 0 ? minutes / 1440 : (minutes - 1439) / 1440;
        const std::int64_t in_day = minutes - day_index * 1440;
        const year_month_day ymd{sys_days{days{day_index}}};
        char out[32];
        std::snprintf(out, sizeof out, "%04d-%02u-%02u %02d:%02d", static_cast<int>(ymd.year()),
                      static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                      static_cast<int>(in_day / 60), static_cast<int>(in_day % 60));
        return out;
    }

    /// "HH:MM" part only.
    std::string clock() const { return str().substr(11); }

    std::string weekday_name() const {
        static constexpr const char* kNames[] = {"Sunday", "Monday", "Tuesday", "Wednesday",
                                                 "Thursday", "Friday", "Saturday"};
        using namespace std::chrono;
        const std::int64_t day_index = minutes >= 0 ? minutes / 1440 : (minutes - 1439) / 1440;
        return kNames[weekday{sys_days{days{day_index}}}.c_encoding()];
    }
};

}  // namespace fuse
