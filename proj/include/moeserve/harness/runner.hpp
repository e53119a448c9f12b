#pragma once

#include <sys/stat.h>
#include <sys/wait.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "moeserve/core/model.hpp"
#include "moeserve/harness/procfs.hpp"
#include "moeserve/harness/workload.hpp"
#include "moeserve/platform/types.hpp"
#include "moeserve/util/io.hpp"
#include "moeserve/util/subprocess.hpp"
#include "moeserve/util/text.hpp"

namespace moeserve {

enum class Strategy { Baseline, LocalDistribution, FaaSShared, FaaSPrivate };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Baseline: return "baseline";
    case Strategy::LocalDistribution: return "local";
    case Strategy::FaaSShared: return "shared";
    case Strategy::FaaSPrivate: return "private";
  }
  return "?";
}

inline std::optional<Strategy> parse_strategy(const std::string& s) {
  if (s == "baseline") return Strategy::Baseline;
  if (s == "local" || s == "local-distribution") return Strategy::LocalDistribution;
  if (s == "shared" || s == "faas-shared") return Strategy::FaaSShared;
  if (s == "private" || s == "faas-private") return Strategy::FaaSPrivate;
  return std::nullopt;
}

struct HarnessOptions {
  RunConfig rc;
  Strategy strategy = Strategy::Baseline;
  WorkloadSpec workload;
  int max_new = 8;
  int64_t window_ms = 10;           // shared-mode cross-tenant merge window
  int64_t timeout_ms = 10000;       // per expert invocation
  int retries = 2;
  int64_t cold_start_ms = 200;
  int64_t idle_timeout_ms = 30000;
  int max_replicas = 4;
  int concurrency_limit = 4;
  std::string backend = "process";  // platform worker backend
  std::string out_dir;
  int64_t sample_interval_ms = 1000;
  int64_t run_deadline_ms = 300000;
  std::string bin;                  // binary to spawn for every role
  bool quiet = false;
};

struct RequestRow {
  int tenant = 0;
  int idx = 0;
  std::string prompt;
  std::string text;
  int64_t latency_ms = 0;
  bool ok = false;
  std::string error;
  bool oracle_match = true;
};

struct RunSummary {
  bool ok = false;
  nlohmann::ordered_json json;
};

namespace harness_detail {

inline std::optional<std::pair<int, std::string>> http_get(const std::string& host,
                                                           int port,
                                                           const std::string& path,
                                                           int timeout_s = 10) {
  httplib::Client cli(host, port);
  cli.set_connection_timeout(timeout_s, 0);
  cli.set_read_timeout(timeout_s, 0);
  auto res = cli.Get(path.c_str());
  if (!res) return std::nullopt;
  return std::make_pair(res->status, res->body);
}

inline std::optional<std::pair<int, std::string>> http_post(const std::string& host,
                                                            int port,
                                                            const std::string& path,
                                                            const std::string& body,
                                                            int timeout_s = 10) {
  httplib::Client cli(host, port);
  cli.set_connection_timeout(timeout_s, 0);
  cli.set_read_timeout(timeout_s, 0);
  auto res = cli.Post(path.c_str(), body, "application/json");
  if (!res) return std::nullopt;
  return std::make_pair(res->status, res->body);
}

inline std::optional<int> wait_port_file(const std::string& path, pid_t pid,
                                         int64_t deadline_ms) {
  auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(deadline_ms);
  while (std::chrono::steady_clock::now() < deadline) {
    auto content = read_file(path);
    if (content && !content->empty()) {
      try {
        return std::stoi(*content);
      } catch (...) {
      }
    }
    if (!process_alive(pid)) return std::nullopt;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  return std::nullopt;
}

inline bool wait_healthz(const std::string& host, int port, int64_t deadline_ms) {
  auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(deadline_ms);
  while (std::chrono::steady_clock::now() < deadline) {
    auto r = http_get(host, port, "/healthz", 2);
    if (r && r->first == 200) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  return false;
}

inline double percentile(std::vector<int64_t> v, double p) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  double rank = p * (v.size() - 1);
  size_t lo = static_cast<size_t>(rank);
  size_t hi = std::min(lo + 1, v.size() - 1);
  double frac = rank - lo;
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

}  // namespace harness_detail

// Deploys one strategy topology as real processes, drives the tenant
// workload, samples every process at a fixed cadence, verifies every output
// against the monolithic engine, and writes the run directory:
// samples.csv, counters.csv, residency.csv, latencies.csv, outputs.txt,
// report.md, summary.json.
class HarnessRunner {
 public:
  explicit HarnessRunner(HarnessOptions opts) : opts_(std::move(opts)) {
    if (opts_.bin.empty()) opts_.bin = self_exe_path();
  }

  RunSummary run() {
    using namespace harness_detail;
    RunSummary summary;
    start_time_ = std::chrono::steady_clock::now();

    if (!prepare_dirs()) {
      summary.json["error"] = "cannot create run directory: " + opts_.out_dir;
      return summary;
    }
    std::string err;
    if (!deploy(&err)) {
      note("deploy failed: " + err);
      degraded_ = true;
      errors_.push_back("deploy: " + err);
      teardown();
      summary.json = build_summary();
      write_outputs(summary.json);
      return summary;
    }

    spawn_tenants();
    drive_and_sample();
    scrape();
    teardown();
    read_tenant_outputs();
    oracle_check();

    summary.json = build_summary();
    write_outputs(summary.json);
    summary.ok = summary.json["ok"].get<bool>();
    return summary;
  }

 private:
  struct Child {
    pid_t pid = -1;
    std::string role;
    std::string name;
    bool exited = false;
    int exit_code = -1;
  };

  void note(const std::string& msg) {
    if (!opts_.quiet) std::fprintf(stderr, "[harness] %s\n", msg.c_str());
  }

  bool prepare_dirs() {
    for (const std::string& d :
         {opts_.out_dir, opts_.out_dir + "/logs", opts_.out_dir + "/ports",
          opts_.out_dir + "/out"}) {
      if (mkdir(d.c_str(), 0755) != 0 && errno != EEXIST) return false;
    }
    config_path_ = opts_.out_dir + "/config.txt";
    write_file(config_path_, serialize_config(opts_.rc));
    return true;
  }

  pid_t spawn(const std::vector<std::string>& argv, const std::string& role,
              const std::string& name) {
    pid_t pid = spawn_process(argv, opts_.out_dir + "/logs/" + name + ".log");
    if (pid > 0) children_.push_back({pid, role, name, false, -1});
    return pid;
  }

  bool deploy(std::string* err) {
    using namespace harness_detail;
    switch (opts_.strategy) {
      case Strategy::Baseline:
        return true;
      case Strategy::LocalDistribution: {
        std::string pf = opts_.out_dir + "/ports/server.port";
        pid_t pid = spawn({opts_.bin, "local-server", "--config", config_path_, "--port",
                           "0", "--port-file", pf},
                          "server", "server");
        if (pid <= 0) {
          *err = "failed to spawn expert server";
          return false;
        }
        auto port = wait_port_file(pf, pid, 20000);
        if (!port || !wait_healthz("127.0.0.1", *port, 10000)) {
          *err = "expert server did not come up";
          return false;
        }
        server_port_ = *port;
        return true;
      }
      case Strategy::FaaSShared:
      case Strategy::FaaSPrivate: {
        std::string pf = opts_.out_dir + "/ports/platform.port";
        pid_t pid = spawn({opts_.bin, "platform", "--config", config_path_, "--port", "0",
                           "--port-file", pf, "--backend", opts_.backend,
                           "--max-replicas", std::to_string(opts_.max_replicas),
                           "--idle-timeout-ms", std::to_string(opts_.idle_timeout_ms),
                           "--cold-start-ms", std::to_string(opts_.cold_start_ms),
                           "--concurrency-limit", std::to_string(opts_.concurrency_limit),
                           "--worker-log-dir", opts_.out_dir + "/logs"},
                          "platform", "platform");
        if (pid <= 0) {
          *err = "failed to spawn platform";
          return false;
        }
        auto port = wait_port_file(pf, pid, 20000);
        if (!port || !wait_healthz("127.0.0.1", *port, 10000)) {
          *err = "platform did not come up";
          return false;
        }
        platform_port_ = *port;

        BlockMap bm = pack_blocks(opts_.rc.model, opts_.rc.block_size);
        for (const auto& e : bm.entries) {
          nlohmann::ordered_json reg;
          reg["name"] = e.name;
          reg["layer"] = e.layer;
          reg["block"] = e.block;
          reg["expert_begin"] = e.experts.front();
          reg["expert_end"] = e.experts.back() + 1;
          auto r = http_post("127.0.0.1", platform_port_, "/register", reg.dump());
          if (!r || r->first != 200) {
            *err = "function registration failed for " + e.name +
                   (r ? ": " + r->second : " (no response)");
            return false;
          }
        }

        int orch_count = opts_.strategy == Strategy::FaaSShared ? 1 : opts_.workload.tenants;
        std::string mode = opts_.strategy == Strategy::FaaSShared ? "shared" : "private";
        int64_t window = opts_.strategy == Strategy::FaaSShared ? opts_.window_ms : 0;
        for (int i = 0; i < orch_count; ++i) {
          std::string opf = opts_.out_dir + "/ports/orch-" + std::to_string(i) + ".port";
          pid_t opid =
              spawn({opts_.bin, "orchestrate", "--config", config_path_, "--gateway",
                     "127.0.0.1:" + std::to_string(platform_port_), "--mode", mode,
                     "--window-ms", std::to_string(window), "--timeout-ms",
                     std::to_string(opts_.timeout_ms), "--retries",
                     std::to_string(opts_.retries), "--port", "0", "--port-file", opf},
                    "orchestrator", "orch-" + std::to_string(i));
          if (opid <= 0) {
            *err = "failed to spawn orchestrator " + std::to_string(i);
            return false;
          }
          auto oport = wait_port_file(opf, opid, 20000);
          if (!oport || !wait_healthz("127.0.0.1", *oport, 10000)) {
            *err = "orchestrator " + std::to_string(i) + " did not come up";
            return false;
          }
          orch_ports_.push_back(*oport);
        }
        return true;
      }
    }
    *err = "unknown strategy";
    return false;
  }

  void spawn_tenants() {
    int64_t start_at = std::chrono::duration_cast<std::chrono::milliseconds>(
                           std::chrono::system_clock::now().time_since_epoch())
                           .count() +
                       400;
    for (int t = 0; t < opts_.workload.tenants; ++t) {
      std::vector<std::string> argv = {
          opts_.bin, "tenant",
          "--config", config_path_,
          "--tenant", std::to_string(t),
          "--requests", std::to_string(opts_.workload.requests),
          "--workload-seed", std::to_string(opts_.workload.seed),
          "--skew", std::to_string(opts_.workload.skew),
          "--max-new", std::to_string(opts_.max_new),
          "--out", tenant_out_path(t),
          "--start-at-ms", std::to_string(start_at),
          "--timeout-ms", std::to_string(opts_.timeout_ms),
          "--retries", std::to_string(opts_.retries)};
      switch (opts_.strategy) {
        case Strategy::Baseline:
          argv.insert(argv.end(), {"--role", "baseline"});
          break;
        case Strategy::LocalDistribution:
          argv.insert(argv.end(), {"--role", "trunk", "--server",
                                   "127.0.0.1:" + std::to_string(server_port_)});
          break;
        case Strategy::FaaSShared:
          argv.insert(argv.end(), {"--role", "thin", "--orchestrator",
                                   "127.0.0.1:" + std::to_string(orch_ports_[0])});
          break;
        case Strategy::FaaSPrivate:
          argv.insert(argv.end(), {"--role", "thin", "--orchestrator",
                                   "127.0.0.1:" + std::to_string(orch_ports_[t])});
          break;
      }
      pid_t pid = spawn(argv, "client", "tenant-" + std::to_string(t));
      if (pid <= 0) {
        degraded_ = true;
        errors_.push_back("failed to spawn tenant " + std::to_string(t));
      }
    }
  }

  std::string tenant_out_path(int t) const {
    return opts_.out_dir + "/out/tenant-" + std::to_string(t) + ".tsv";
  }

  void poll_children() {
    for (auto& c : children_) {
      if (c.exited || c.pid <= 0) continue;
      int status = 0;
      pid_t r = waitpid(c.pid, &status, WNOHANG);
      if (r == c.pid) {
        c.exited = true;
        c.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
      }
    }
  }

  bool tenants_running() {
    for (const auto& c : children_)
      if (c.role == "client" && !c.exited) return true;
    return false;
  }

  void sample_once(std::ofstream& samples) {
    using namespace harness_detail;
    double ts = std::chrono::duration<double>(
                    std::chrono::system_clock::now().time_since_epoch())
                    .count();
    auto emit = [&](const std::string& role, int64_t pid) {
      if (pid <= 0) return;
      auto s = sampler_.sample(static_cast<pid_t>(pid));
      if (!s) return;  // first observation, no delta yet
      char line[256];
      std::snprintf(line, sizeof(line), "%.3f,%s,%lld,%.2f,%llu\n", ts, role.c_str(),
                    static_cast<long long>(pid), s->cpu_percent,
                    static_cast<unsigned long long>(s->rss_bytes));
      samples << line;
    };
    for (const auto& c : children_)
      if (!c.exited) emit(c.role, c.pid);
    if (platform_port_ > 0) {
      auto r = http_get("127.0.0.1", platform_port_, "/functions", 2);
      if (r && r->first == 200) {
        try {
          auto j = nlohmann::json::parse(r->second);
          std::set<int64_t> seen;
          for (const auto& f : j) {
            for (const auto& rep : f.at("replicas")) {
              int64_t pid = rep.at("pid").get<int64_t>();
              if (pid > 0 && seen.insert(pid).second) {
                worker_pids_.insert(pid);
                emit("worker", pid);
              }
            }
          }
        } catch (...) {
        }
      }
    }
    samples.flush();
  }

  void drive_and_sample() {
    std::ofstream samples(opts_.out_dir + "/samples.csv");
    samples << "timestamp,role,pid,cpu_percent,rss_bytes\n";
    auto deadline = start_time_ + std::chrono::milliseconds(opts_.run_deadline_ms);
    auto next_sample = std::chrono::steady_clock::now();
    while (true) {
      poll_children();
      if (!tenants_running()) break;
      if (std::chrono::steady_clock::now() > deadline) {
        degraded_ = true;
        errors_.push_back("run deadline exceeded; terminating tenants");
        for (auto& c : children_)
          if (c.role == "client" && !c.exited) terminate_process(c.pid, 1000);
        poll_children();
        break;
      }
      if (std::chrono::steady_clock::now() >= next_sample) {
        sample_once(samples);
        next_sample += std::chrono::milliseconds(opts_.sample_interval_ms);
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    sample_once(samples);  // final snapshot before teardown
  }

  void scrape() {
    using namespace harness_detail;
    if (platform_port_ > 0) {
      if (auto r = http_get("127.0.0.1", platform_port_, "/counters"))
        if (r->first == 200) counters_json_ = nlohmann::json::parse(r->second, nullptr, false);
      if (auto r = http_get("127.0.0.1", platform_port_, "/functions"))
        if (r->first == 200) functions_json_ = nlohmann::json::parse(r->second, nullptr, false);
    }
    for (size_t i = 0; i < orch_ports_.size(); ++i) {
      if (auto r = http_get("127.0.0.1", orch_ports_[i], "/stats")) {
        if (r->first == 200) {
          auto j = nlohmann::json::parse(r->second, nullptr, false);
          if (!j.is_discarded()) orch_stats_.push_back(std::move(j));
        }
      }
    }
    if (server_port_ > 0) {
      if (auto r = http_get("127.0.0.1", server_port_, "/stats"))
        if (r->first == 200) server_stats_ = nlohmann::json::parse(r->second, nullptr, false);
    }
  }

  void teardown() {
    // orchestrators first, then the platform (which owns the workers), then
    // the expert server; clients exit on their own
    for (auto& c : children_) {
      if (c.exited) continue;
      if (c.role == "orchestrator") {
        terminate_process(c.pid, 2000);
        c.exited = true;
        c.exit_code = 0;
      }
    }
    for (auto& c : children_) {
      if (c.exited) continue;
      if (c.role == "platform" || c.role == "server") {
        terminate_process(c.pid, 4000);
        c.exited = true;
        c.exit_code = 0;
      }
    }
    for (auto& c : children_) {
      if (!c.exited) {
        terminate_process(c.pid, 1000);
        c.exited = true;
      }
    }
    // workers are children of the platform; sweep up any that survived it
    for (int64_t pid : worker_pids_)
      if (process_alive(static_cast<pid_t>(pid)))
        terminate_process(static_cast<pid_t>(pid), 500);
  }

  void read_tenant_outputs() {
    for (int t = 0; t < opts_.workload.tenants; ++t) {
      auto content = read_file(tenant_out_path(t));
      if (!content) {
        degraded_ = true;
        errors_.push_back("missing tenant output file for tenant " + std::to_string(t));
        continue;
      }
      std::istringstream in(*content);
      std::string line;
      int data_rows = 0;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
          parse_resident_footer(t, line);
          continue;
        }
        std::vector<std::string> fields;
        size_t pos = 0;
        while (true) {
          size_t tab = line.find('\t', pos);
          fields.push_back(line.substr(pos, tab == std::string::npos ? tab : tab - pos));
          if (tab == std::string::npos) break;
          pos = tab + 1;
        }
        if (fields.size() != 6) {
          degraded_ = true;
          errors_.push_back("malformed tenant row: " + line);
          continue;
        }
        RequestRow row;
        row.tenant = std::stoi(fields[0]);
        row.idx = std::stoi(fields[1]);
        std::string prompt, text;
        if (!unescape_bytes(fields[2], &prompt) || !unescape_bytes(fields[3], &text)) {
          degraded_ = true;
          errors_.push_back("bad escaping in tenant row: " + line);
          continue;
        }
        row.prompt = std::move(prompt);
        row.text = std::move(text);
        row.latency_ms = std::stoll(fields[4]);
        row.ok = fields[5] == "ok";
        if (!row.ok) row.error = fields[5];
        rows_.push_back(std::move(row));
        ++data_rows;
      }
      if (data_rows != opts_.workload.requests) {
        degraded_ = true;
        errors_.push_back("tenant " + std::to_string(t) + " produced " +
                          std::to_string(data_rows) + " rows, expected " +
                          std::to_string(opts_.workload.requests));
      }
    }
    std::sort(rows_.begin(), rows_.end(), [](const RequestRow& a, const RequestRow& b) {
      return std::tie(a.tenant, a.idx) < std::tie(b.tenant, b.idx);
    });
    for (const auto& c : children_) {
      if (c.role == "client" && c.exit_code != 0) {
        degraded_ = true;
        errors_.push_back(c.name + " exited with code " + std::to_string(c.exit_code));
      }
    }
  }

  void parse_resident_footer(int tenant, const std::string& line) {
    // #resident\ttrunk=N\texperts=N\ttotal=N
    uint64_t trunk = 0, experts = 0, total = 0;
    std::istringstream in(line);
    std::string tok;
    while (std::getline(in, tok, '\t')) {
      if (tok.rfind("trunk=", 0) == 0) trunk = std::stoull(tok.substr(6));
      if (tok.rfind("experts=", 0) == 0) experts = std::stoull(tok.substr(8));
      if (tok.rfind("total=", 0) == 0) total = std::stoull(tok.substr(6));
    }
    tenant_resident_[tenant] = {trunk, experts, total};
  }

  void oracle_check() {
    auto store = make_full_store(opts_.rc.model);
    Engine engine(store);
    std::map<std::string, std::string> memo;
    for (auto& row : rows_) {
      if (!row.ok) {
        degraded_ = true;
        row.oracle_match = false;
        continue;
      }
      auto it = memo.find(row.prompt);
      if (it == memo.end())
        it = memo.emplace(row.prompt, engine.generate(row.prompt, opts_.max_new).text).first;
      row.oracle_match = row.text == it->second;
      if (!row.oracle_match) {
        degraded_ = true;
        errors_.push_back("tenant " + std::to_string(row.tenant) + " request " +
                          std::to_string(row.idx) + " diverged from the reference output");
      }
    }
  }

  nlohmann::ordered_json build_summary() {
    using namespace harness_detail;
    nlohmann::ordered_json j;
    j["strategy"] = strategy_name(opts_.strategy);
    j["config"] = nlohmann::json::parse(config_to_json());
    j["workload"] = {{"seed", opts_.workload.seed},
                     {"tenants", opts_.workload.tenants},
                     {"requests", opts_.workload.requests},
                     {"skew", opts_.workload.skew},
                     {"max_new", opts_.max_new}};
    j["options"] = {{"window_ms", opts_.window_ms},
                    {"timeout_ms", opts_.timeout_ms},
                    {"retries", opts_.retries},
                    {"cold_start_ms", opts_.cold_start_ms},
                    {"idle_timeout_ms", opts_.idle_timeout_ms},
                    {"max_replicas", opts_.max_replicas},
                    {"concurrency_limit", opts_.concurrency_limit},
                    {"backend", opts_.backend}};

    int failed = 0, mismatched = 0;
    std::vector<int64_t> latencies;
    for (const auto& r : rows_) {
      if (!r.ok) ++failed;
      if (!r.oracle_match) ++mismatched;
      if (r.ok) latencies.push_back(r.latency_ms);
    }
    int expected = opts_.workload.tenants * opts_.workload.requests;
    j["requests"] = {{"expected", expected},
                     {"completed", rows_.size()},
                     {"failed", failed},
                     {"oracle_mismatches", mismatched}};
    double mean = 0.0;
    for (int64_t l : latencies) mean += static_cast<double>(l);
    if (!latencies.empty()) mean /= latencies.size();
    j["latency_ms"] = {{"mean", mean},
                       {"p50", percentile(latencies, 0.50)},
                       {"p95", percentile(latencies, 0.95)},
                       {"max", latencies.empty()
                                   ? 0
                                   : *std::max_element(latencies.begin(), latencies.end())}};

    // logical residency accounting
    uint64_t client_bytes = 0, client_expert_bytes = 0;
    for (const auto& [t, res] : tenant_resident_) {
      client_bytes += res.total;
      client_expert_bytes += res.experts;
    }
    uint64_t server_bytes = 0;
    if (server_stats_.is_object() && server_stats_.contains("resident_bytes"))
      server_bytes = server_stats_["resident_bytes"].get<uint64_t>();
    uint64_t orch_bytes = 0;
    uint64_t orch_issued = 0;
    nlohmann::ordered_json issued_per_layer = nlohmann::ordered_json::array();
    std::vector<uint64_t> issued_layers(opts_.rc.model.num_layers, 0);
    uint64_t orch_requests = 0;
    for (const auto& s : orch_stats_) {
      if (!s.is_object()) continue;
      orch_bytes += s.value("trunk_resident_bytes", uint64_t{0});
      orch_issued += s.value("issued_total", uint64_t{0});
      orch_requests += s.value("requests_served", uint64_t{0});
      if (s.contains("issued_per_layer")) {
        auto arr = s["issued_per_layer"];
        for (size_t l = 0; l < arr.size() && l < issued_layers.size(); ++l)
          issued_layers[l] += arr[l].get<uint64_t>();
      }
    }
    for (uint64_t v : issued_layers) issued_per_layer.push_back(v);

    uint64_t worker_bytes = 0;
    int warm_replicas = 0;
    nlohmann::ordered_json warm_functions = nlohmann::ordered_json::object();
    if (functions_json_.is_array()) {
      for (const auto& f : functions_json_) {
        for (const auto& rep : f.at("replicas")) {
          if (rep.at("phase").get<std::string>() == "warm") {
            ++warm_replicas;
            worker_bytes += rep.at("resident_bytes").get<uint64_t>();
            std::string fname = f.at("name").get<std::string>();
            if (!warm_functions.contains(fname))
              warm_functions[fname] = rep.at("resident_bytes").get<uint64_t>();
          }
        }
      }
    }
    j["warm_functions"] = warm_functions;

    uint64_t total_bytes = client_bytes + server_bytes + orch_bytes + worker_bytes;
    uint64_t expert_bytes = client_expert_bytes + server_bytes + worker_bytes;
    j["residency"] = {
        {"client_param_bytes", client_bytes},
        {"client_expert_param_bytes", client_expert_bytes},
        {"server_param_bytes", server_bytes},
        {"orchestrator_param_bytes", orch_bytes},
        {"worker_param_bytes", worker_bytes},
        {"warm_replicas", warm_replicas},
        {"total_param_bytes", total_bytes},
        {"expert_param_bytes", expert_bytes},
        {"per_tenant_param_bytes",
         static_cast<double>(total_bytes) / opts_.workload.tenants},
        {"model",
         {{"trunk_bytes", trunk_param_bytes(opts_.rc.model)},
          {"expert_bytes_all", expert_param_bytes_all(opts_.rc.model)},
          {"full_bytes", full_param_bytes(opts_.rc.model)}}}};

    // platform counters
    uint64_t invocations = 0, cold_starts = 0, bytes_in = 0, bytes_out = 0;
    std::vector<uint64_t> platform_layers(opts_.rc.model.num_layers, 0);
    std::map<std::string, int> fn_layer;
    if (functions_json_.is_array()) {
      for (const auto& f : functions_json_)
        fn_layer[f.at("name").get<std::string>()] = f.at("layer").get<int>();
    }
    nlohmann::ordered_json per_fn = nlohmann::ordered_json::array();
    if (counters_json_.is_object()) {
      for (auto it = counters_json_.begin(); it != counters_json_.end(); ++it) {
        const auto& c = it.value();
        uint64_t inv = c.value("invocations", uint64_t{0});
        invocations += inv;
        cold_starts += c.value("cold_starts", uint64_t{0});
        bytes_in += c.value("bytes_in", uint64_t{0});
        bytes_out += c.value("bytes_out", uint64_t{0});
        auto lit = fn_layer.find(it.key());
        if (lit != fn_layer.end() && lit->second < static_cast<int>(platform_layers.size()))
          platform_layers[lit->second] += inv;
        nlohmann::ordered_json row;
        row["function"] = it.key();
        row["invocations"] = inv;
        row["cold_starts"] = c.value("cold_starts", uint64_t{0});
        row["max_concurrent_replicas"] = c.value("max_concurrent_replicas", uint64_t{0});
        row["total_warm_ms"] = c.value("total_warm_ms", uint64_t{0});
        row["bytes_in"] = c.value("bytes_in", uint64_t{0});
        row["bytes_out"] = c.value("bytes_out", uint64_t{0});
        per_fn.push_back(std::move(row));
      }
    }
    nlohmann::ordered_json platform_per_layer = nlohmann::ordered_json::array();
    for (uint64_t v : platform_layers) platform_per_layer.push_back(v);
    j["counters"] = {{"invocations", invocations},
                     {"cold_starts", cold_starts},
                     {"bytes_in", bytes_in},
                     {"bytes_out", bytes_out},
                     {"functions", per_fn.size()},
                     {"per_layer_invocations", platform_per_layer},
                     {"per_function", per_fn}};
    j["orchestrator"] = {{"count", orch_stats_.size()},
                         {"requests_served", orch_requests},
                         {"issued_total", orch_issued},
                         {"issued_per_layer", issued_per_layer}};

    bool faas = opts_.strategy == Strategy::FaaSShared ||
                opts_.strategy == Strategy::FaaSPrivate;
    bool conservation_checked = faas && failed == 0 && !degraded_;
    bool conservation_equal = conservation_checked && invocations == orch_issued;
    j["conservation"] = {{"platform_invocations", invocations},
                         {"orchestrator_issued", orch_issued},
                         {"checked", conservation_checked},
                         {"equal", conservation_equal}};
    if (conservation_checked && !conservation_equal) {
      degraded_ = true;
      errors_.push_back("invocation conservation violated: platform " +
                        std::to_string(invocations) + " vs orchestrators " +
                        std::to_string(orch_issued));
    }

    j["degraded"] = degraded_;
    j["errors"] = errors_;
    bool ok = !degraded_ && failed == 0 && mismatched == 0 &&
              static_cast<int>(rows_.size()) == expected;
    j["ok"] = ok;
    return j;
  }

  std::string config_to_json() const {
    nlohmann::ordered_json c;
    c["model_seed"] = opts_.rc.model.model_seed;
    c["num_layers"] = opts_.rc.model.num_layers;
    c["embed_dim"] = opts_.rc.model.embed_dim;
    c["ffn_dim"] = opts_.rc.model.ffn_dim;
    c["num_experts"] = opts_.rc.model.num_experts;
    c["num_shared"] = opts_.rc.model.num_shared;
    c["top_k"] = opts_.rc.model.top_k;
    c["max_seq"] = opts_.rc.model.max_seq;
    c["block_size"] = opts_.rc.block_size;
    return c.dump();
  }

  void write_outputs(const nlohmann::ordered_json& summary) {
    // outputs.txt: canonical per-request outputs, identical across strategies
    {
      std::ofstream out(opts_.out_dir + "/outputs.txt");
      for (const auto& r : rows_)
        out << r.tenant << '\t' << r.idx << '\t' << escape_bytes(r.prompt) << '\t'
            << escape_bytes(r.text) << '\n';
    }
    {
      std::ofstream out(opts_.out_dir + "/latencies.csv");
      out << "strategy,tenant,idx,latency_ms,ok\n";
      for (const auto& r : rows_)
        out << strategy_name(opts_.strategy) << ',' << r.tenant << ',' << r.idx << ','
            << r.latency_ms << ',' << (r.ok ? 1 : 0) << '\n';
    }
    {
      std::ofstream out(opts_.out_dir + "/counters.csv");
      out << "function,invocations,cold_starts,max_concurrent_replicas,total_warm_ms,"
             "bytes_in,bytes_out\n";
      for (const auto& row : summary["counters"]["per_function"]) {
        out << row["function"].get<std::string>() << ',' << row["invocations"] << ','
            << row["cold_starts"] << ',' << row["max_concurrent_replicas"] << ','
            << row["total_warm_ms"] << ',' << row["bytes_in"] << ',' << row["bytes_out"]
            << '\n';
      }
    }
    {
      std::ofstream out(opts_.out_dir + "/residency.csv");
      out << "role,name,param_bytes,expert_param_bytes\n";
      for (const auto& [t, res] : tenant_resident_)
        out << "client,tenant-" << t << ',' << res.total << ',' << res.experts << '\n';
      if (server_stats_.is_object() && server_stats_.contains("resident_bytes"))
        out << "server,expert-server," << server_stats_["resident_bytes"] << ','
            << server_stats_["resident_bytes"] << '\n';
      for (size_t i = 0; i < orch_stats_.size(); ++i) {
        if (orch_stats_[i].is_object())
          out << "orchestrator,orch-" << i << ','
              << orch_stats_[i].value("trunk_resident_bytes", uint64_t{0}) << ",0\n";
      }
      if (functions_json_.is_array()) {
        for (const auto& f : functions_json_) {
          for (const auto& rep : f.at("replicas")) {
            if (rep.at("phase").get<std::string>() == "warm") {
              out << "worker," << f.at("name").get<std::string>() << '#'
                  << rep.at("id").get<int>() << ',' << rep.at("resident_bytes") << ','
                  << rep.at("resident_bytes") << '\n';
            }
          }
        }
      }
    }
    write_file(opts_.out_dir + "/summary.json", summary.dump(2) + "\n");
    write_report_md(summary);
  }

  void write_report_md(const nlohmann::ordered_json& s) {
    std::ostringstream md;
    md << "# Run report: " << s["strategy"].get<std::string>() << "\n\n";
    md << "| key | value |\n|---|---|\n";
    md << "| tenants | " << s["workload"]["tenants"] << " |\n";
    md << "| requests per tenant | " << s["workload"]["requests"] << " |\n";
    md << "| block size | " << s["config"]["block_size"] << " |\n";
    md << "| workload seed | " << s["workload"]["seed"] << " |\n";
    md << "| completed | " << s["requests"]["completed"] << " |\n";
    md << "| failed | " << s["requests"]["failed"] << " |\n";
    md << "| oracle mismatches | " << s["requests"]["oracle_mismatches"] << " |\n";
    md << "| mean latency (ms) | " << s["latency_ms"]["mean"] << " |\n";
    md << "| p95 latency (ms) | " << s["latency_ms"]["p95"] << " |\n";
    md << "| total param bytes | " << s["residency"]["total_param_bytes"] << " |\n";
    md << "| per-tenant param bytes | " << s["residency"]["per_tenant_param_bytes"]
       << " |\n";
    md << "| platform invocations | " << s["counters"]["invocations"] << " |\n";
    md << "| cold starts | " << s["counters"]["cold_starts"] << " |\n";
    md << "| degraded | " << (s["degraded"].get<bool>() ? "yes" : "no") << " |\n\n";

    md << "## Residency\n\n| role | name | param bytes | expert param bytes |\n";
    md << "|---|---|---|---|\n";
    for (const auto& [t, res] : tenant_resident_)
      md << "| client | tenant-" << t << " | " << res.total << " | " << res.experts
         << " |\n";
    if (server_stats_.is_object() && server_stats_.contains("resident_bytes"))
      md << "| server | expert-server | " << server_stats_["resident_bytes"] << " | "
         << server_stats_["resident_bytes"] << " |\n";
    for (size_t i = 0; i < orch_stats_.size(); ++i)
      if (orch_stats_[i].is_object())
        md << "| orchestrator | orch-" << i << " | "
           << orch_stats_[i].value("trunk_resident_bytes", uint64_t{0}) << " | 0 |\n";
    md << "\n## Per-role resource samples\n\n";
    md << role_sample_table();
    write_file(opts_.out_dir + "/report.md", md.str());
  }

  std::string role_sample_table() {
    auto content = read_file(opts_.out_dir + "/samples.csv");
    std::map<std::string, std::pair<double, uint64_t>> sums;  // role -> (cpu, rss)
    std::map<std::string, int> counts;
    if (content) {
      std::istringstream in(*content);
      std::string line;
      std::getline(in, line);  // header
      while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string ts, role, pid, cpu, rss;
        if (!std::getline(ls, ts, ',') || !std::getline(ls, role, ',') ||
            !std::getline(ls, pid, ',') || !std::getline(ls, cpu, ',') ||
            !std::getline(ls, rss, ','))
          continue;
        try {
          sums[role].first += std::stod(cpu);
          sums[role].second += std::stoull(rss);
          counts[role]++;
        } catch (...) {
        }
      }
    }
    std::ostringstream md;
    md << "| role | samples | avg cpu % | avg rss bytes |\n|---|---|---|---|\n";
    for (const auto& [role, sum] : sums) {
      int n = counts[role];
      md << "| " << role << " | " << n << " | " << (n ? sum.first / n : 0.0) << " | "
         << (n ? sum.second / n : 0) << " |\n";
    }
    return md.str();
  }

  struct Resident {
    uint64_t trunk = 0, experts = 0, total = 0;
  };

  HarnessOptions opts_;
  std::string config_path_;
  std::vector<Child> children_;
  std::chrono::steady_clock::time_point start_time_;
  int platform_port_ = 0;
  int server_port_ = 0;
  std::vector<int> orch_ports_;
  ProcSampler sampler_;
  std::set<int64_t> worker_pids_;
  std::vector<RequestRow> rows_;
  std::map<int, Resident> tenant_resident_;
  nlohmann::json counters_json_;
  nlohmann::json functions_json_;
  std::vector<nlohmann::json> orch_stats_;
  nlohmann::json server_stats_;
  bool degraded_ = false;
  std::vector<std::string> errors_;
};

inline RunSummary run_harness(const HarnessOptions& opts) {
  HarnessRunner runner(opts);
  return runner.run();
}

}  // namespace moeserve
