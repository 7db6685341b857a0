#pragma once

#include <functional>
#include <string>

namespace orthokd {

enum class LogLevel { Debug = 0, Info = 1, Warning = 2, Quiet = 3 };

void set_log_level(LogLevel level);
LogLevel log_level();

// Replaces the stderr sink (tests capture warnings this way). Pass an empty
// function to restore the default.
void set_log_sink(std::function<void(LogLevel, const std::string&)> sink);

void log_message(LogLevel level, const std::string& msg);
inline void log_debug(const std::string& msg) { log_message(LogLevel::Debug, msg); }
inline void log_info(const std::string& msg) { log_message(LogLevel::Info, msg); }
inline void log_warning(const std::string& msg) { log_message(LogLevel::Warning, msg); }

}  // namespace orthokd
