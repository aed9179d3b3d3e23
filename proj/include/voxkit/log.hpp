#pragma once

#include <cstdlib>
#include <string>

#include <spdlog/spdlog.h>

namespace voxkit {

/// Applies VOXKIT_LOG (trace|debug|info|warn|error|off) to the default
/// logger. Unset means warn, which keeps batch output quiet.
inline void init_logging() {
  static const bool once = [] {
    const char* env = std::getenv("VOXKIT_LOG");
    spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::warn);
    spdlog::set_pattern("[voxkit %l] %v");
    return true;
  }();
  (void)once;
}

template <typename... Args>
void log_warn(fmt::format_string<Args...> fmt, Args&&... args) {
  init_logging();
  spdlog::warn(fmt, std::forward<Args>(args)...);
}

template <typename... Args>
void log_info(fmt::format_string<Args...> fmt, Args&&... args) {
  init_logging();
  spdlog::info(fmt, std::forward<Args>(args)...);
}

template <typename... Args>
void log_debug(fmt::format_string<Args...> fmt, Args&&... args) {
  init_logging();
  spdlog::debug(fmt, std::forward<Args>(args)...);
}

}  // namespace voxkit
