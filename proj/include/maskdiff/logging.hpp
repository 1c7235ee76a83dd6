// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>
#include <utility>

namespace maskdiff {

enum class LogLevel { debug = 0, info = 1, warning = 2, error = 3 };

using LogSink = std::function<void(LogLevel, std::string_view)>;

struct LogState {
  LogLevel threshold = LogLevel::warning;
  LogSink sink;
  std::mutex mutex;
};

inline LogState& log_state() {
  static LogState state;
  return state;
}

inline void set_log_level(LogLevel level) { log_state().threshold = level; }

/// Replaces the sink (stderr by default). Returns the previous sink.
inline LogSink set_log_sink(LogSink sink) {
  std::lock_guard lock(log_state().mutex);
  return std::exchange(log_state().sink, std::move(sink));
}

inline void log(LogLevel level, std::string_view message) {
  auto& st = log_state();
  if (level < st.threshold) return;
  std::lock_guard lock(st.mutex);
  if (st.sink) {
    st.sink(level, message);
    return;
  }
  static constexpr const char* kNames[] = {"debug", "info", "warning", "error"};
  std::cerr << "[maskdiff " << kNames[static_cast<int>(level)] << "] " << message << '\n';
}

inline void log_info(std::string_view m) { log(LogLevel::info, m); }
inline void log_warning(std::string_view m) { log(LogLevel::warning, m); }

}  // namespace maskdiff
