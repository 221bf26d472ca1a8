// SPDX-License-Identifier: Apache-2.0
#include "fmoe/log.hpp"

#include <iostream>
#include <mutex>

namespace fmoe {
namespace {
std::atomic<int> g_level{static_cast<int>(LogLevel::kInfo)};
std::atomic<std::size_t> g_warnings{0};
std::mutex g_mutex;
}  // namespace

void set_log_level(LogLevel level) { g_level = static_cast<int>(level); }
LogLevel log_level() { return static_cast<LogLevel>(g_level.load()); }
std::size_t warning_count() { return g_warnings.load(); }

void log(LogLevel level, std::string_view message) {
  if (level == LogLevel::kWarning) ++g_warnings;
  if (static_cast<int>(level) < g_level.load()) return;
  static constexpr const char* kNames[] = {"debug", "info", "warning", "error"};
  std::lock_guard lock(g_mutex);
  std::clog << "[" << kNames[static_cast<int>(level)] << "] " << message << '\n';
}

}  // namespace fmoe
