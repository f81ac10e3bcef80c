#pragma once

#include <string_view>

namespace fedsim {

enum class LogLevel { Quiet = 0, Error = 1, Warn = 2, Info = 3, Debug = 4 };

/// Threshold read once from FEDSIM_LOG (quiet|error|warn|info|debug); defaults to warn.
LogLevel log_level();
void set_log_level(LogLevel level);

/// Writes "[fedsim level] message" to stderr when level passes the threshold.
void log(LogLevel level, std::string_view message);

inline void log_warn(std::string_view m) { log(LogLevel::Warn, m); }
inline void log_info(std::string_view m) { log(LogLevel::Info, m); }
inline void log_debug(std::string_view m) { log(LogLevel::Debug, m); }

}  // namespace fedsim
