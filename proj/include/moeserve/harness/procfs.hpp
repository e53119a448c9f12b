#pragma once

#include <sys/types.h>
#include <unistd.h>

#include <chrono>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "moeserve/util/io.hpp"

namespace moeserve {

struct ResourceSample {
  double cpu_percent = 0.0;  // 100 = one full core
  uint64_t rss_bytes = 0;
  bool alive = false;
};

// Per-process CPU/RSS from procfs. CPU percent is computed from the delta in
// utime+stime between consecutive samples of the same pid.
class ProcSampler {
 public:
  // Returns nullopt on the first observation of a pid (no delta yet) and a
  // terminal {0, 0, alive=false} sample when the process has exited.
  std::optional<ResourceSample> sample(pid_t pid) {
    auto now = std::chrono::steady_clock::now();
    uint64_t ticks = 0;
    uint64_t rss = 0;
    if (!read_proc(pid, &ticks, &rss)) {
      prev_.erase(pid);
      return ResourceSample{0.0, 0, false};
    }
    auto it = prev_.find(pid);
    if (it == prev_.end()) {
      prev_[pid] = {ticks, now};
      return std::nullopt;
    }
    double dt = std::chrono::duration<double>(now - it->second.when).count();
    double dticks = static_cast<double>(ticks - it->second.ticks);
    it->second = {ticks, now};
    ResourceSample s;
    s.alive = true;
    s.rss_bytes = rss;
    if (dt > 0.0)
      s.cpu_percent = 100.0 * (dticks / static_cast<double>(ticks_per_sec())) / dt;
    return s;
  }

  void forget(pid_t pid) { prev_.erase(pid); }

  static long ticks_per_sec() {
    static long tps = sysconf(_SC_CLK_TCK);
    return tps > 0 ? tps : 100;
  }

 private:
  struct Prev {
    uint64_t ticks;
    std::chrono::steady_clock::time_point when;
  };

  static bool read_proc(pid_t pid, uint64_t* ticks, uint64_t* rss_bytes) {
    auto stat = read_file("/proc/" + std::to_string(pid) + "/stat");
    if (!stat) return false;
    // comm may contain spaces; fields resume after the closing paren
    size_t close = stat->rfind(')');
    if (close == std::string::npos) return false;
    std::istringstream in(stat->substr(close + 1));
    std::string field;
    // fields after comm: state(1) ... utime is field 12, stime field 13
    uint64_t utime = 0, stime = 0, rss_pages = 0;
    for (int i = 1; in >> field; ++i) {
      if (i == 12) utime = std::stoull(field);
      if (i == 13) stime = std::stoull(field);
      if (i == 22) {
        rss_pages = std::stoull(field);
        break;
      }
    }
    *ticks = utime + stime;
    *rss_bytes = rss_pages * static_cast<uint64_t>(sysconf(_SC_PAGESIZE));
    return true;
  }

  std::map<pid_t, Prev> prev_;
};

}  // namespace moeserve
