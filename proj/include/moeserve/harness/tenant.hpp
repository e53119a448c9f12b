#pragma once

#include <chrono>
#include <fstream>
#include <memory>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "moeserve/core/model.hpp"
#include "moeserve/harness/workload.hpp"
#include "moeserve/orchestrator/orchestrator.hpp"
#include "moeserve/util/base64.hpp"
#include "moeserve/util/text.hpp"

namespace moeserve {

struct TenantOptions {
  RunConfig rc;
  std::string role = "baseline";  // baseline | trunk | thin
  int tenant = 0;
  int requests = 5;
  uint64_t workload_seed = 42;
  double skew = 1.0;
  int max_new = 8;
  std::string out_path;
  int64_t start_at_ms = 0;        // epoch ms; 0 = start immediately
  std::string server_host = "127.0.0.1";   // trunk: expert server
  int server_port = 0;
  std::string orch_host = "127.0.0.1";     // thin: orchestrator
  int orch_port = 0;
  int64_t window_ms = 0;
  int64_t timeout_ms = 10000;
  int retries = 2;
};

// One tenant client: generates its deterministic prompt stream and issues the
// R requests sequentially, timing each. The role decides where the model
// lives:
//   baseline - full model in this process
//   trunk    - trunk here, experts on a remote expert server
//   thin     - everything behind an orchestrator's /generate
// Output is a TSV of per-request rows plus a #resident accounting footer.
inline int run_tenant(const TenantOptions& opts) {
  WorkloadSpec wspec;
  wspec.seed = opts.workload_seed;
  wspec.tenants = opts.tenant + 1;
  wspec.requests = opts.requests;
  wspec.skew = opts.skew;
  std::vector<std::string> prompts = tenant_prompts(wspec, opts.tenant);

  std::unique_ptr<Engine> engine;
  std::shared_ptr<ParamStore> store;
  std::unique_ptr<OrchestratorCore> core;
  uint64_t trunk_bytes = 0;
  uint64_t expert_bytes = 0;

  if (opts.role == "baseline") {
    store = make_full_store(opts.rc.model);
    engine = std::make_unique<Engine>(store);
    trunk_bytes = trunk_param_bytes(opts.rc.model);
    expert_bytes = expert_param_bytes_all(opts.rc.model);
  } else if (opts.role == "trunk") {
    OrchestratorOptions oopts;
    oopts.rc = opts.rc;
    oopts.mode = "private";
    oopts.window_ms = 0;
    oopts.timeout_ms = opts.timeout_ms;
    oopts.retries = opts.retries;
    core = std::make_unique<OrchestratorCore>(
        oopts, std::make_unique<HttpInvoker>(opts.server_host, opts.server_port));
    trunk_bytes = core->trunk_resident_bytes();
  } else if (opts.role != "thin") {
    std::fprintf(stderr, "unknown tenant role: %s\n", opts.role.c_str());
    return 2;
  }

  if (opts.start_at_ms > 0) {
    auto target = std::chrono::system_clock::time_point(
        std::chrono::milliseconds(opts.start_at_ms));
    std::this_thread::sleep_until(target);
  }

  std::ofstream out(opts.out_path);
  if (!out) {
    std::fprintf(stderr, "cannot open output file: %s\n", opts.out_path.c_str());
    return 2;
  }

  bool all_ok = true;
  for (int i = 0; i < static_cast<int>(prompts.size()); ++i) {
    const std::string& prompt = prompts[i];
    std::string text;
    std::string error;
    auto t0 = std::chrono::steady_clock::now();
    try {
      if (opts.role == "baseline") {
        text = engine->generate(prompt, opts.max_new).text;
      } else if (opts.role == "trunk") {
        text = core->generate(prompt, opts.max_new).text;
      } else {
        httplib::Client cli(opts.orch_host, opts.orch_port);
        cli.set_read_timeout(opts.timeout_ms / 1000 + 120, 0);
        nlohmann::ordered_json body;
        body["tenant"] = "tenant-" + std::to_string(opts.tenant);
        body["prompt_b64"] = base64_encode(prompt);
        body["max_new"] = opts.max_new;
        auto res = cli.Post("/generate", body.dump(), "application/json");
        if (!res) {
          error = "orchestrator unreachable: " + httplib::to_string(res.error());
        } else if (res->status != 200) {
          error = "status " + std::to_string(res->status) + ": " + res->body;
        } else {
          auto j = nlohmann::json::parse(res->body);
          auto decoded = base64_decode(j.at("text_b64").get<std::string>());
          if (!decoded) {
            error = "orchestrator returned invalid base64";
          } else {
            text = *decoded;
          }
        }
      }
    } catch (const std::exception& e) {
      error = e.what();
    }
    auto latency = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::steady_clock::now() - t0)
                       .count();
    if (!error.empty()) all_ok = false;
    out << opts.tenant << '\t' << i << '\t' << escape_bytes(prompt) << '\t'
        << escape_bytes(text) << '\t' << latency << '\t'
        << (error.empty() ? "ok" : "error:" + escape_bytes(error)) << '\n';
    out.flush();
  }

  out << "#resident\ttrunk=" << trunk_bytes << "\texperts=" << expert_bytes
      << "\ttotal=" << (trunk_bytes + expert_bytes) << '\n';
  return all_ok ? 0 : 1;
}

}  // namespace moeserve
