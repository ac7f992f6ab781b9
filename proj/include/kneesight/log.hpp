#pragma once

// Minimal stderr logger. Verbosity comes from the KNEESIGHT_LOG environment
// variable: quiet | warn (default) | info | debug.

#include <cstdlib>
#include <iostream>
#include <string>

namespace kneesight {

enum class LogLevel { quiet = 0, warn = 1, info = 2, debug = 3 };

inline LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("KNEESIGHT_LOG");
    std::string v = env ? env : "warn";
    if (v == "quiet") return LogLevel::quiet;
    if (v == "info") return LogLevel::info;
    if (v == "debug") return LogLevel::debug;
    return LogLevel::warn;
  }();
  return level;
}

inline void log_warn(const std::string& msg) {
  if (log_level() >= LogLevel::warn) std::cerr << "[warn] " << msg << "\n";
}

inline void log_info(const std::string& msg) {
  if (log_level() >= LogLevel::info) std::cerr << "[info] " << msg << "\n";
}

inline void log_debug(const std::string& msg) {
  if (log_level() >= LogLevel::debug) std::cerr << "[debug] " << msg << "\n";
}

}  // namespace kneesight
