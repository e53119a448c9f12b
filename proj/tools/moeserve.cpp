#include <sys/stat.h>

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "moeserve/core/config.hpp"
#include "moeserve/core/model.hpp"
#include "moeserve/harness/report.hpp"
#include "moeserve/harness/runner.hpp"
#include "moeserve/harness/sweep.hpp"
#include "moeserve/harness/tenant.hpp"
#include "moeserve/harness/workload.hpp"
#include "moeserve/orchestrator/service.hpp"
#include "moeserve/platform/gateway.hpp"
#include "moeserve/runtime/expert_service.hpp"
#include "moeserve/runtime/local_server.hpp"
#include "moeserve/util/io.hpp"
#include "moeserve/util/text.hpp"

namespace {

std::function<void()> g_stop;

void handle_signal(int) {
  if (g_stop) g_stop();
}

void install_signal_handlers() {
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
}

moeserve::RunConfig load_config(const std::string& path, bool seed_set, uint64_t seed) {
  moeserve::RunConfig rc;
  if (!path.empty()) rc = moeserve::parse_config(moeserve::read_file_or_throw(path));
  if (seed_set) rc.model.model_seed = seed;
  rc.model.validate();
  return rc;
}

bool split_hostport(const std::string& s, std::string* host, int* port) {
  size_t colon = s.rfind(':');
  if (colon == std::string::npos || colon + 1 >= s.size()) return false;
  *host = s.substr(0, colon);
  try {
    *port = std::stoi(s.substr(colon + 1));
  } catch (...) {
    return false;
  }
  return *port > 0 && *port < 65536;
}

std::string default_run_dir(const std::string& tag) {
  auto now = std::chrono::system_clock::now().time_since_epoch();
  int64_t ms = std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
  return "runs/" + std::to_string(ms) + "-" + tag;
}

bool ensure_parent_dirs(const std::string& dir) {
  std::string acc;
  for (size_t i = 0; i <= dir.size(); ++i) {
    if (i == dir.size() || dir[i] == '/') {
      if (!acc.empty() && mkdir(acc.c_str(), 0755) != 0 && errno != EEXIST) return false;
    }
    if (i < dir.size()) acc.push_back(dir[i]);
  }
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace moeserve;

  CLI::App app{"moeserve: deterministic mixture-of-experts serving testbed"};
  app.fallthrough();
  app.require_subcommand(1);

  std::string config_path;
  uint64_t model_seed = 0;
  std::string log_level = "info";
  app.add_option("--config", config_path, "model/run config file");
  auto* seed_opt =
      app.add_option("--seed", model_seed, "override the model seed of the config");
  app.add_option("--log-level", log_level, "quiet|info|debug")->default_val("info");

  // ---- pack ----
  auto* pack = app.add_subcommand("pack", "print the block map for a config");
  int pack_block_size = -1;
  pack->add_option("--block-size", pack_block_size, "experts per block (defaults from config)");

  // ---- platform ----
  auto* platform = app.add_subcommand("platform", "run the function platform gateway");
  GatewayOptions gw_opts;
  platform->add_option("--host", gw_opts.host)->default_val("127.0.0.1");
  platform->add_option("--port", gw_opts.port)->default_val(0);
  platform->add_option("--port-file", gw_opts.port_file, "write the bound port here");
  platform->add_option("--clock", gw_opts.clock, "real|simulated")->default_val("real");
  platform->add_option("--backend", gw_opts.backend, "process|inproc")->default_val("process");
  platform->add_option("--max-replicas", gw_opts.max_replicas)->default_val(4);
  platform->add_option("--idle-timeout-ms", gw_opts.idle_timeout_ms)->default_val(30000);
  platform->add_option("--cold-start-ms", gw_opts.cold_start_ms)->default_val(200);
  platform->add_option("--concurrency-limit", gw_opts.concurrency_limit)->default_val(4);
  platform->add_option("--sim-service-ms", gw_opts.sim_service_ms)->default_val(5);
  platform->add_option("--worker-log-dir", gw_opts.worker_log_dir);

  // ---- expert ----
  auto* expert = app.add_subcommand("expert", "run one expert-block worker");
  ExpertServiceOptions ex_opts;
  expert->add_option("--layer", ex_opts.layer)->required();
  expert->add_option("--block", ex_opts.block)->required();
  expert->add_option("--host", ex_opts.host)->default_val("127.0.0.1");
  expert->add_option("--port", ex_opts.port)->default_val(0);
  expert->add_option("--port-file", ex_opts.port_file);

  // ---- orchestrate ----
  auto* orch = app.add_subcommand("orchestrate", "run the control-plane service");
  std::string orch_gateway;
  OrchestratorServiceOptions os_opts;
  orch->add_option("--gateway", orch_gateway, "host:port of the platform")->required();
  orch->add_option("--mode", os_opts.core.mode, "shared|private")->default_val("private");
  orch->add_option("--window-ms", os_opts.core.window_ms)->default_val(10);
  orch->add_option("--timeout-ms", os_opts.core.timeout_ms)->default_val(10000);
  orch->add_option("--retries", os_opts.core.retries)->default_val(2);
  orch->add_option("--host", os_opts.host)->default_val("127.0.0.1");
  orch->add_option("--port", os_opts.port)->default_val(0);
  orch->add_option("--port-file", os_opts.port_file);

  // ---- local-server ----
  auto* local = app.add_subcommand("local-server", "run the non-scaling expert server");
  LocalServerOptions ls_opts;
  local->add_option("--host", ls_opts.host)->default_val("127.0.0.1");
  local->add_option("--port", ls_opts.port)->default_val(0);
  local->add_option("--port-file", ls_opts.port_file);

  // ---- tenant (spawned by the harness; also usable standalone) ----
  auto* tenant = app.add_subcommand("tenant", "run one tenant client");
  TenantOptions tn_opts;
  std::string tn_server, tn_orch;
  tenant->add_option("--role", tn_opts.role, "baseline|trunk|thin")->required();
  tenant->add_option("--tenant", tn_opts.tenant)->default_val(0);
  tenant->add_option("--requests", tn_opts.requests)->default_val(5);
  tenant->add_option("--workload-seed", tn_opts.workload_seed)->default_val(42);
  tenant->add_option("--skew", tn_opts.skew)->default_val(1.0);
  tenant->add_option("--max-new", tn_opts.max_new)->default_val(8);
  tenant->add_option("--out", tn_opts.out_path, "per-request TSV output")->required();
  tenant->add_option("--start-at-ms", tn_opts.start_at_ms)->default_val(0);
  tenant->add_option("--server", tn_server, "trunk role: expert server host:port");
  tenant->add_option("--orchestrator", tn_orch, "thin role: orchestrator host:port");
  tenant->add_option("--window-ms", tn_opts.window_ms)->default_val(0);
  tenant->add_option("--timeout-ms", tn_opts.timeout_ms)->default_val(10000);
  tenant->add_option("--retries", tn_opts.retries)->default_val(2);

  // ---- run ----
  auto* run = app.add_subcommand("run", "deploy a strategy, drive the workload, report");
  std::string run_strategy = "baseline";
  HarnessOptions run_opts;
  run->add_option("--strategy", run_strategy, "baseline|local|shared|private")->required();
  run->add_option("--tenants", run_opts.workload.tenants)->default_val(6);
  run->add_option("--requests", run_opts.workload.requests)->default_val(5);
  run->add_option("--block-size", run_opts.rc.block_size, "override config block size");
  run->add_option("--workload-seed", run_opts.workload.seed)->default_val(42);
  run->add_option("--skew", run_opts.workload.skew)->default_val(1.0);
  run->add_option("--max-new", run_opts.max_new)->default_val(8);
  run->add_option("--window-ms", run_opts.window_ms)->default_val(10);
  run->add_option("--timeout-ms", run_opts.timeout_ms)->default_val(10000);
  run->add_option("--retries", run_opts.retries)->default_val(2);
  run->add_option("--cold-start-ms", run_opts.cold_start_ms)->default_val(200);
  run->add_option("--idle-timeout-ms", run_opts.idle_timeout_ms)->default_val(30000);
  run->add_option("--max-replicas", run_opts.max_replicas)->default_val(4);
  run->add_option("--concurrency-limit", run_opts.concurrency_limit)->default_val(4);
  run->add_option("--backend", run_opts.backend, "process|inproc workers")->default_val("process");
  run->add_option("--out", run_opts.out_dir, "run directory (default runs/<ts>-<strategy>)");
  run->add_option("--sample-interval-ms", run_opts.sample_interval_ms)->default_val(1000);
  run->add_option("--deadline-ms", run_opts.run_deadline_ms)->default_val(300000);
  bool run_quiet = false;
  run->add_flag("--quiet", run_quiet, "suppress progress notes");

  // ---- sweep ----
  auto* sweep = app.add_subcommand("sweep", "run the same workload across block sizes");
  std::string sweep_sizes = "1,2,3,4,6,8";
  std::string sweep_strategy = "shared";
  HarnessOptions sweep_base;
  std::string sweep_out;
  sweep->add_option("--sizes", sweep_sizes, "comma-separated block sizes");
  sweep->add_option("--strategy", sweep_strategy)->default_val("shared");
  sweep->add_option("--tenants", sweep_base.workload.tenants)->default_val(6);
  sweep->add_option("--requests", sweep_base.workload.requests)->default_val(5);
  sweep->add_option("--workload-seed", sweep_base.workload.seed)->default_val(42);
  sweep->add_option("--skew", sweep_base.workload.skew)->default_val(1.0);
  sweep->add_option("--max-new", sweep_base.max_new)->default_val(8);
  sweep->add_option("--window-ms", sweep_base.window_ms)->default_val(0);
  sweep->add_option("--timeout-ms", sweep_base.timeout_ms)->default_val(10000);
  sweep->add_option("--cold-start-ms", sweep_base.cold_start_ms)->default_val(0);
  sweep->add_option("--idle-timeout-ms", sweep_base.idle_timeout_ms)->default_val(120000);
  sweep->add_option("--max-replicas", sweep_base.max_replicas)->default_val(4);
  sweep->add_option("--backend", sweep_base.backend)->default_val("inproc");
  sweep->add_option("--out", sweep_out, "sweep directory (default runs/<ts>-sweep)");

  // ---- report ----
  auto* report = app.add_subcommand("report", "join run directories into tables");
  std::vector<std::string> report_dirs;
  std::string report_format = "md";
  report->add_option("--in", report_dirs, "run directories")->required()->expected(-1);
  report->add_option("--format", report_format, "md|csv")->default_val("md");

  // ---- oracle ----
  auto* oracle = app.add_subcommand("oracle", "print monolithic reference outputs");
  std::vector<std::string> oracle_prompts;
  int oracle_tenants = 0;
  int oracle_requests = 5;
  uint64_t oracle_wseed = 42;
  double oracle_skew = 1.0;
  int oracle_max_new = 8;
  oracle->add_option("--prompt", oracle_prompts, "prompt (repeatable; overrides workload)");
  oracle->add_option("--tenants", oracle_tenants, "generate the workload for T tenants");
  oracle->add_option("--requests", oracle_requests)->default_val(5);
  oracle->add_option("--workload-seed", oracle_wseed)->default_val(42);
  oracle->add_option("--skew", oracle_skew)->default_val(1.0);
  oracle->add_option("--max-new", oracle_max_new)->default_val(8);

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig rc = load_config(config_path, seed_opt->count() > 0, model_seed);

    if (*pack) {
      if (pack->count("--block-size") > 0) rc.block_size = pack_block_size;
      BlockMap bm = pack_blocks(rc.model, rc.block_size);
      std::fputs(serialize_blockmap(bm).c_str(), stdout);
      return 0;
    }

    if (*platform) {
      gw_opts.rc = rc;
      gw_opts.config_path = config_path;
      if (gw_opts.clock == "real" && gw_opts.backend == "process" && config_path.empty())
        throw std::invalid_argument("--config is required for process workers");
      Gateway gw(gw_opts);
      install_signal_handlers();
      g_stop = [&gw] { gw.stop(); };
      if (!gw.run()) {
        std::fprintf(stderr, "failed to bind %s:%d\n", gw_opts.host.c_str(), gw_opts.port);
        return 1;
      }
      std::fputs((counters_to_json(gw.counters()).dump(2) + "\n").c_str(), stdout);
      gw.shutdown();
      return 0;
    }

    if (*expert) {
      ex_opts.rc = rc;
      ExpertService svc(ex_opts);
      install_signal_handlers();
      g_stop = [&svc] { svc.stop(); };
      if (!svc.run()) {
        std::fprintf(stderr, "failed to bind %s:%d\n", ex_opts.host.c_str(), ex_opts.port);
        return 1;
      }
      std::fputs((svc.stats().dump(2) + "\n").c_str(), stdout);
      return 0;
    }

    if (*orch) {
      os_opts.core.rc = rc;
      std::string host;
      int port = 0;
      if (!split_hostport(orch_gateway, &host, &port))
        throw std::invalid_argument("--gateway must be host:port");
      OrchestratorService svc(os_opts, std::make_unique<HttpInvoker>(host, port));
      install_signal_handlers();
      g_stop = [&svc] { svc.stop(); };
      if (!svc.run()) {
        std::fprintf(stderr, "failed to bind %s:%d\n", os_opts.host.c_str(), os_opts.port);
        return 1;
      }
      std::fputs((svc.stats().dump(2) + "\n").c_str(), stdout);
      return 0;
    }

    if (*local) {
      ls_opts.rc = rc;
      LocalExpertServer svc(ls_opts);
      install_signal_handlers();
      g_stop = [&svc] { svc.stop(); };
      if (!svc.run()) {
        std::fprintf(stderr, "failed to bind %s:%d\n", ls_opts.host.c_str(), ls_opts.port);
        return 1;
      }
      std::fputs((svc.stats().dump(2) + "\n").c_str(), stdout);
      return 0;
    }

    if (*tenant) {
      tn_opts.rc = rc;
      if (tn_opts.role == "trunk") {
        if (!split_hostport(tn_server, &tn_opts.server_host, &tn_opts.server_port))
          throw std::invalid_argument("--server must be host:port for the trunk role");
      }
      if (tn_opts.role == "thin") {
        if (!split_hostport(tn_orch, &tn_opts.orch_host, &tn_opts.orch_port))
          throw std::invalid_argument("--orchestrator must be host:port for the thin role");
      }
      return run_tenant(tn_opts);
    }

    if (*run) {
      auto strat = parse_strategy(run_strategy);
      if (!strat) throw std::invalid_argument("unknown strategy: " + run_strategy);
      run_opts.strategy = *strat;
      run_opts.rc.model = rc.model;
      if (run->count("--block-size") == 0) run_opts.rc.block_size = rc.block_size;
      run_opts.quiet = run_quiet || log_level == "quiet";
      if (run_opts.out_dir.empty()) run_opts.out_dir = default_run_dir(run_strategy);
      if (!ensure_parent_dirs(run_opts.out_dir))
        throw std::runtime_error("cannot create " + run_opts.out_dir);
      RunSummary rs = run_harness(run_opts);
      std::fprintf(stdout, "%s\n", rs.json.dump(2).c_str());
      std::fprintf(stderr, "[run] %s: %s (%s/summary.json)\n", run_strategy.c_str(),
                   rs.ok ? "ok" : "FAILED", run_opts.out_dir.c_str());
      return rs.ok ? 0 : 1;
    }

    if (*sweep) {
      auto strat = parse_strategy(sweep_strategy);
      if (!strat) throw std::invalid_argument("unknown strategy: " + sweep_strategy);
      SweepOptions so;
      so.base = sweep_base;
      so.base.strategy = *strat;
      so.base.rc.model = rc.model;
      so.base.quiet = log_level == "quiet";
      so.out_dir = sweep_out.empty() ? default_run_dir("sweep") : sweep_out;
      if (!ensure_parent_dirs(so.out_dir))
        throw std::runtime_error("cannot create " + so.out_dir);
      std::istringstream sizes(sweep_sizes);
      std::string tok;
      while (std::getline(sizes, tok, ',')) {
        if (!tok.empty()) so.sizes.push_back(std::stoi(tok));
      }
      if (so.sizes.empty()) throw std::invalid_argument("--sizes is empty");
      SweepResult sr = run_sweep(so);
      std::fprintf(stdout, "%s\n", sr.json.dump(2).c_str());
      std::fprintf(stderr, "[sweep] %s (%s/sweep.json)\n", sr.ok ? "ok" : "FAILED",
                   so.out_dir.c_str());
      return sr.ok ? 0 : 1;
    }

    if (*report) {
      std::vector<RunDigest> digests;
      for (const auto& dir : report_dirs) {
        std::string err;
        auto d = load_run_dir(dir, &err);
        if (!d) {
          std::fprintf(stderr, "%s\n", err.c_str());
          return 1;
        }
        digests.push_back(std::move(*d));
      }
      if (report_format != "md" && report_format != "csv")
        throw std::invalid_argument("--format must be md or csv");
      std::fputs(render_report(build_report(digests), report_format).c_str(), stdout);
      return 0;
    }

    if (*oracle) {
      std::vector<std::pair<std::string, std::string>> labeled;  // label, prompt
      if (!oracle_prompts.empty()) {
        for (size_t i = 0; i < oracle_prompts.size(); ++i)
          labeled.emplace_back("prompt-" + std::to_string(i), oracle_prompts[i]);
      } else {
        int tenants = oracle_tenants > 0 ? oracle_tenants : 6;
        WorkloadSpec ws;
        ws.seed = oracle_wseed;
        ws.tenants = tenants;
        ws.requests = oracle_requests;
        ws.skew = oracle_skew;
        for (int t = 0; t < tenants; ++t) {
          auto prompts = tenant_prompts(ws, t);
          for (size_t i = 0; i < prompts.size(); ++i)
            labeled.emplace_back(std::to_string(t) + "\t" + std::to_string(i),
                                 prompts[i]);
        }
      }
      auto store = make_full_store(rc.model);
      Engine engine(store);
      for (const auto& [label, prompt] : labeled) {
        auto gr = engine.generate(prompt, oracle_max_new);
        std::fprintf(stdout, "%s\t%s\t%s\n", label.c_str(),
                     escape_bytes(prompt).c_str(), escape_bytes(gr.text).c_str());
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }

  return 0;
}
