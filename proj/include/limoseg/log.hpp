#pragma once

#include <string_view>

namespace limoseg {

enum class LogLevel { kQuiet = 0, kWarn = 1, kInfo = 2 };

void set_log_level(LogLevel level);
LogLevel log_level();

/// Messages go to stderr, prefixed with their level.
void log_warn(std::string_view message);
void log_info(std::string_view message);

}  // namespace limoseg
