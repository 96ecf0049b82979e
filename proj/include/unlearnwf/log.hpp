#pragma once

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string_view>

namespace unlearnwf::log {

enum class Level { error = 0, info = 1, debug = 2 };

/// Threshold from UNLEARNWF_LOG (error|info|debug), default error.
inline Level threshold() {
  static const Level level = [] {
    const char* env = std::getenv("UNLEARNWF_LOG");
    const std::string_view v = env ? env : "";
    if (v == "debug") return Level::debug;
    if (v == "info") return Level::info;
    return Level::error;
  }();
  return level;
}

template <typename... Args>
void write(Level level, std::string_view tag, const Args&... args) {
  if (static_cast<int>(level) > static_cast<int>(threshold())) return;
  std::ostringstream os;
  os << "[unlearnwf " << tag << "] ";
  (os << ... << args);
  os << '\n';
  std::cerr << os.str();
}

template <typename... Args>
void error(const Args&... args) { write(Level::error, "error", args...); }
template <typename... Args>
void warn(const Args&... args) { write(Level::error, "warn", args...); }
template <typename... Args>
void info(const Args&... args) { write(Level::info, "info", args...); }
template <typename... Args>
void debug(const Args&... args) { write(Level::debug, "debug", args...); }

}  // namespace unlearnwf::log
