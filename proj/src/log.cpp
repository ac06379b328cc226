#include "limoseg/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace limoseg {

namespace {
std::atomic<LogLevel> g_level{LogLevel::kWarn};
std::mutex g_mutex;
}  // namespace

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

void log_warn(std::string_view message) {
    if (g_level < LogLevel::kWarn) return;
    std::lock_guard lock(g_mutex);
    std::cerr << "[warn] " << message << '\n';
}

void log_info(std::string_view message) {
    if (g_level < LogLevel::kInfo) return;
    std::lock_guard lock(g_mutex);
    std::cerr << "[info] " << message << '\n';
}

}  // namespace limoseg
