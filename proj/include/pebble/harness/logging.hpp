#pragma once

#include <cstdlib>
#include <memory>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace pebble::harness {

/// Level from PEBBLE_LOG_LEVEL (error, info or debug; default info).
inline spdlog::level::level_enum log_level_from_env() {
  const char* v = std::getenv("PEBBLE_LOG_LEVEL");
  if (!v || !*v) return spdlog::level::info;
  const std::string s(v);
  if (s == "error") return spdlog::level::err;
  if (s == "info") return spdlog::level::info;
  if (s == "debug") return spdlog::level::debug;
  throw std::invalid_argument("PEBBLE_LOG_LEVEL must be error, info or debug (got '" + s + "')");
}

inline std::shared_ptr<spdlog::logger> logger() {
  static std::shared_ptr<spdlog::logger> log = [] {
    auto l = spdlog::stderr_color_mt("pebble");
    l->set_pattern("[%l] %v");
    l->set_level(spdlog::level::info);
    return l;
  }();
  return log;
}

inline void configure_logging() { logger()->set_level(log_level_from_env()); }

}  // namespace pebble::harness
