#pragma once

#include <functional>
#include <iostream>
#include <string>
#include <string_view>

namespace fuse {

enum class LogLevel { Info, Warn };

using LogSink = std::function<void(LogLevel, std::string_view)>;

inline LogSink& log_sink() {
    static LogSink sink = [](LogLevel level, std::string_view msg) {
        std::cerr << (level == LogLevel::Warn ? "warning: " : "") << msg << '\n';
    };
    return sink;
}

inline bool& log_quiet_info() {
    static bool quiet = false;
    return quiet;
}

inline void log_warn(std::string_view msg) { log_sink()(LogLevel::Warn, msg); }
inline void log_info(std::string_view msg) {
    if (!log_quiet_info()) log_sink()(LogLevel::Info, msg);
}

/// Swaps in a sink for the lifetime of the guard (tests capture warnings with it).
class ScopedLogSink {
public:
    explicit ScopedLogSink(LogSink sink) : saved_(std::move(log_sink())) { log_sink() = std::move(sink); }
    ~ScopedLogSink() { log_sink() = std::move(saved_); }
    ScopedLogSink(const ScopedLogSink&) = delete;
    ScopedLogSink& operator=(const ScopedLogSink&) = delete;

private:
    LogSink saved_;
};

}  // namespace fuse
