#pragma once

#include <atomic>
#include <chrono>
#include <memory>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "moeserve/platform/live.hpp"
#include "moeserve/runtime/block_host.hpp"
#include "moeserve/util/io.hpp"
#include "moeserve/util/subprocess.hpp"

namespace moeserve {

// In-process replica: a BlockHost owned by this replica. Each replica holds
// its own parameter copy so residency accounting means the same thing in
// both backends.
class BlockHostBackend : public ReplicaBackend {
 public:
  BlockHostBackend(const RunConfig& rc, const FunctionSpec& spec)
      : host_(rc.model, spec.layer, spec.block, pack_blocks(rc.model, rc.block_size)) {}

  HandleOutcome handle(const std::string& payload, int64_t) override {
    auto r = host_.handle_bytes(payload);
    if (!r.ok()) return HandleOutcome{HandleOutcome::Status::HandlerError, r.error};
    return HandleOutcome{HandleOutcome::Status::Ok, std::move(r.value)};
  }

  uint64_t resident_bytes() const override { return host_.resident_bytes(); }

 private:
  BlockHost host_;
};

inline BackendFactory make_inproc_factory(const RunConfig& rc) {
  return [rc](const FunctionSpec& spec) -> std::unique_ptr<ReplicaBackend> {
    return std::make_unique<BlockHostBackend>(rc, spec);
  };
}

// Subprocess replica: spawns this binary's `expert` subcommand, waits for it
// to publish its port, then forwards payloads over loopback HTTP. Boot cost
// is the real spawn plus weight derivation; LivePlatform adds the configured
// cold-start floor on top.
class WorkerProcessBackend : public ReplicaBackend {
 public:
  WorkerProcessBackend(const std::string& config_path, const FunctionSpec& spec,
                       const std::string& log_path = "", int64_t boot_timeout_ms = 20000) {
    static std::atomic<uint64_t> seq{0};
    port_file_ = "/tmp/moeserve-worker-" + std::to_string(::getpid()) + "-" +
                 std::to_string(seq.fetch_add(1)) + ".port";
    std::vector<std::string> argv = {
        self_exe_path(), "expert",
        "--config",      config_path,
        "--layer",       std::to_string(spec.layer),
        "--block",       std::to_string(spec.block),
        "--port",        "0",
        "--port-file",   port_file_};
    pid_ = spawn_process(argv, log_path);
    auto deadline =
        std::chrono::steady_clock::now() + std::chrono::milliseconds(boot_timeout_ms);
    while (true) {
      if (auto content = read_port_file(); content > 0) {
        port_ = content;
        break;
      }
      if (!process_alive(pid_)) {
        pid_ = -1;
        throw std::runtime_error("expert worker exited during startup");
      }
      if (std::chrono::steady_clock::now() >= deadline) {
        terminate_process(pid_);
        pid_ = -1;
        throw std::runtime_error("expert worker did not publish a port in time");
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    httplib::Client cli("127.0.0.1", port_);
    cli.set_connection_timeout(5);
    cli.set_read_timeout(5);
    auto res = cli.Get("/stats");
    if (!res || res->status != 200) {
      terminate_process(pid_);
      pid_ = -1;
      throw std::runtime_error("expert worker /stats not reachable after startup");
    }
    auto j = nlohmann::json::parse(res->body, nullptr, false);
    if (!j.is_discarded() && j.contains("resident_bytes"))
      resident_bytes_ = j["resident_bytes"].get<uint64_t>();
  }

  ~WorkerProcessBackend() override {
    if (pid_ > 0) terminate_process(pid_);
    ::unlink(port_file_.c_str());
  }

  HandleOutcome handle(const std::string& payload, int64_t timeout_ms) override {
    httplib::Client cli("127.0.0.1", port_);
    cli.set_connection_timeout(0, 500 * 1000);
    cli.set_read_timeout(timeout_ms / 1000, (timeout_ms % 1000) * 1000);
    auto res = cli.Post("/invoke", payload, "application/json");
    if (!res) {
      if (res.error() == httplib::Error::Read || res.error() == httplib::Error::Write)
        return HandleOutcome{HandleOutcome::Status::TimedOut,
                             "worker did not answer before the deadline"};
      return HandleOutcome{HandleOutcome::Status::ReplicaDead,
                           "worker connection failed: " + httplib::to_string(res.error())};
    }
    if (res->status == 200)
      return HandleOutcome{HandleOutcome::Status::Ok, res->body};
    return HandleOutcome{HandleOutcome::Status::HandlerError, res->body};
  }

  uint64_t resident_bytes() const override { return resident_bytes_; }
  int64_t pid() const override { return pid_; }

 private:
  int read_port_file() const {
    auto content = read_file(port_file_);
    if (!content || content->empty()) return 0;
    try {
      return std::stoi(*content);
    } catch (...) {
      return 0;
    }
  }

  pid_t pid_ = -1;
  int port_ = 0;
  std::string port_file_;
  uint64_t resident_bytes_ = 0;
};

// log_dir, when set, collects one log file per spawned worker.
inline BackendFactory make_subprocess_factory(const std::string& config_path,
                                              const std::string& log_dir = "") {
  auto seq = std::make_shared<std::atomic<uint64_t>>(0);
  return [config_path, log_dir, seq](const FunctionSpec& spec) -> std::unique_ptr<ReplicaBackend> {
    std::string log_path;
    if (!log_dir.empty())
      log_path = log_dir + "/worker-" + spec.name + "-" +
                 std::to_string(seq->fetch_add(1)) + ".log";
    return std::make_unique<WorkerProcessBackend>(config_path, spec, log_path);
  };
}

}  // namespace moeserve
