#include "fedsim/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>

namespace fedsim {

namespace {

LogLevel level_from_env() {
    const char* env = std::getenv("FEDSIM_LOG");
    if (!env) return LogLevel::Warn;
    const std::string v = env;
    if (v == "quiet" || v == "off") return LogLevel::Quiet;
    if (v == "error") return LogLevel::Error;
    if (v == "warn") return LogLevel::Warn;
    if (v == "info") return LogLevel::Info;
    if (v == "debug") return LogLevel::Debug;
    return LogLevel::Warn;
}

std::atomic<int>& threshold() {
    static std::atomic<int> t{static_cast<int>(level_from_env())};
    return t;
}

std::mutex& sink_mutex() {
    static std::mutex m;
    return m;
}

const char* name(LogLevel level) {
    switch (level) {
        case LogLevel::Error: return "error";
        case LogLevel::Warn: return "warn";
        case LogLevel::Info: return "info";
        case LogLevel::Debug: return "debug";
        default: return "";
    }
}

}  // namespace

LogLevel log_level() { return static_cast<LogLevel>(threshold().load()); }

void set_log_level(LogLevel level) { threshold().store(static_cast<int>(level)); }

void log(LogLevel level, std::string_view message) {
    if (level == LogLevel::Quiet || static_cast<int>(level) > threshold().load()) return;
    std::lock_guard lock(sink_mutex());
    std::cerr << "[fedsim " << name(level) << "] " << message << '\n';
}

}  // namespace fedsim
