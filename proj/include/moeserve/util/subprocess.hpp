#pragma once

#include <chrono>
#include <csignal>
#include <cstring>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <fcntl.h>
#include <spawn.h>
#include <sys/stat.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

extern char** environ;

namespace moeserve {

inline std::string self_exe_path() {
  char buf[4096];
  ssize_t n = ::readlink("/proc/self/exe", buf, sizeof(buf) - 1);
  if (n <= 0) throw std::runtime_error("cannot resolve /proc/self/exe");
  buf[n] = '\0';
  return std::string(buf);
}

// Spawns argv[0] with the given arguments. posix_spawn keeps this safe from
// multi-threaded callers (no fork of a threaded process). stdout/stderr can
// be redirected to a file (appended), which the harness uses for per-role
// logs.
inline pid_t spawn_process(const std::vector<std::string>& argv,
                           const std::string& output_path = "") {
  if (argv.empty()) throw std::invalid_argument("empty argv");
  std::vector<char*> cargv;
  cargv.reserve(argv.size() + 1);
  for (const auto& a : argv) cargv.push_back(const_cast<char*>(a.c_str()));
  cargv.push_back(nullptr);

  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  if (!output_path.empty()) {
    posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, output_path.c_str(),
                                     O_WRONLY | O_CREAT | O_APPEND, 0644);
    posix_spawn_file_actions_adddup2(&actions, STDOUT_FILENO, STDERR_FILENO);
  }
  pid_t pid = -1;
  int rc = ::posix_spawn(&pid, argv[0].c_str(), &actions, nullptr, cargv.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  if (rc != 0)
    throw std::runtime_error("posix_spawn failed for " + argv[0] + ": " +
                             std::strerror(rc));
  return pid;
}

inline bool process_alive(pid_t pid) {
  if (pid <= 0) return false;
  int status = 0;
  pid_t r = ::waitpid(pid, &status, WNOHANG);
  if (r == pid) return false;  // reaped just now
  if (r == 0) return true;
  return ::kill(pid, 0) == 0;
}

// Returns the exit status (or -signal) once the child exits, or nullopt if
// it is still running after wait_ms.
inline std::optional<int> wait_exit(pid_t pid, int64_t wait_ms) {
  auto deadline =
      std::chrono::steady_clock::now() + std::chrono::milliseconds(wait_ms);
  while (true) {
    int status = 0;
    pid_t r = ::waitpid(pid, &status, WNOHANG);
    if (r == pid) {
      if (WIFEXITED(status)) return WEXITSTATUS(status);
      if (WIFSIGNALED(status)) return -WTERMSIG(status);
      return 0;
    }
    if (r < 0) return -1;  // already reaped elsewhere
    if (std::chrono::steady_clock::now() >= deadline) return std::nullopt;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
}

// SIGTERM with a grace period, then SIGKILL; always reaps.
inline void terminate_process(pid_t pid, int64_t grace_ms = 3000) {
  if (pid <= 0) return;
  ::kill(pid, SIGTERM);
  if (wait_exit(pid, grace_ms)) return;
  ::kill(pid, SIGKILL);
  wait_exit(pid, 2000);
}

}  // namespace moeserve
