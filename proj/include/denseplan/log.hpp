#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace denseplan {

// Verbosity from the DENSEPLAN_LOG environment variable:
// "quiet"/"0" silences info output, "debug"/"2" enables debug output,
// anything else (or unset) means normal info output. Logs go to stderr so
// they never mix with CSV written to stdout or files.
inline int log_level() {
  static const int level = [] {
    const char* v = std::getenv("DENSEPLAN_LOG");
    if (v == nullptr) return 1;
    if (std::strcmp(v, "quiet") == 0 || std::strcmp(v, "0") == 0) return 0;
    if (std::strcmp(v, "debug") == 0 || std::strcmp(v, "2") == 0) return 2;
    return 1;
  }();
  return level;
}

inline void log_info(const std::string& msg) {
  if (log_level() >= 1) std::fprintf(stderr, "%s\n", msg.c_str());
}

inline void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::fprintf(stderr, "[debug] %s\n", msg.c_str());
}

}  // namespace denseplan
