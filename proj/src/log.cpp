#include "orthokd/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace orthokd {

namespace {
std::atomic<LogLevel> g_level{LogLevel::Info};
std::mutex g_mutex;
std::function<void(LogLevel, const std::string&)> g_sink;
}  // namespace

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

void set_log_sink(std::function<void(LogLevel, const std::string&)> sink) {
  std::lock_guard<std::mutex> lock(g_mutex);
  g_sink = std::move(sink);
}

void log_message(LogLevel level, const std::string& msg) {
  std::lock_guard<std::mutex> lock(g_mutex);
  if (g_sink) {
    g_sink(level, msg);
    return;
  }
  if (level < g_level.load()) return;
  static const char* tags[] = {"debug", "info", "warning", ""};
  std::cerr << "[orthokd " << tags[static_cast<int>(level)] << "] " << msg << '\n';
}

}  // namespace orthokd
