#pragma once

#include <memory>
#include <mutex>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "moeserve/platform/live.hpp"
#include "moeserve/platform/sim.hpp"
#include "moeserve/runtime/backends.hpp"
#include "moeserve/runtime/block_host.hpp"
#include "moeserve/util/io.hpp"

namespace moeserve {

struct GatewayOptions {
  RunConfig rc;
  std::string config_path;           // handed to spawned worker processes
  std::string clock = "real";        // "real" | "simulated"
  std::string backend = "process";   // real clock: "process" | "inproc"
  std::string host = "127.0.0.1";
  int port = 0;
  std::string port_file;
  std::string worker_log_dir;
  // Defaults for registrations that do not override them.
  int max_replicas = 4;
  int64_t idle_timeout_ms = 30000;
  int64_t cold_start_ms = 200;
  int concurrency_limit = 4;
  int64_t sim_service_ms = 5;        // virtual execution time under the simulated clock
};

// HTTP face of the platform. Real clock runs a LivePlatform (worker
// subprocesses or in-process hosts); simulated clock runs a SimPlatform whose
// time only moves via POST /advance, with in-process handlers.
class Gateway {
 public:
  explicit Gateway(const GatewayOptions& opts) : opts_(opts) {
    if (opts_.clock == "simulated") {
      sim_ = std::make_unique<SimPlatform>();
    } else if (opts_.clock == "real") {
      live_ = std::make_unique<LivePlatform>();
    } else {
      throw std::invalid_argument("clock must be \"real\" or \"simulated\"");
    }
    if (live_) {
      if (opts_.backend == "process") {
        factory_ = make_subprocess_factory(opts_.config_path, opts_.worker_log_dir);
      } else if (opts_.backend == "inproc") {
        factory_ = make_inproc_factory(opts_.rc);
      } else {
        throw std::invalid_argument("backend must be \"process\" or \"inproc\"");
      }
    }
    // Every in-flight invocation parks a server thread until its replica
    // answers, so the pool must cover full fan-out bursts, not CPU count.
    server_.new_task_queue = [] { return new httplib::ThreadPool(64); };
    wire_routes();
  }

  ~Gateway() { shutdown(); }

  bool run() {
    int port = opts_.port;
    if (port == 0) {
      port = server_.bind_to_any_port(opts_.host.c_str());
      if (port < 0) return false;
    } else if (!server_.bind_to_port(opts_.host.c_str(), port)) {
      return false;
    }
    bound_port_ = port;
    if (!opts_.port_file.empty())
      write_file(opts_.port_file, std::to_string(port) + "\n");
    return server_.listen_after_bind();
  }

  void stop() { server_.stop(); }

  void shutdown() {
    if (live_) live_->shutdown();
  }

  int bound_port() const { return bound_port_; }

  PlatformCounters counters() {
    std::lock_guard<std::mutex> lk(mu_);
    return live_ ? live_->snapshot_counters() : sim_->snapshot_counters();
  }

 private:
  void wire_routes() {
    server_.Post("/register", [this](const httplib::Request& req, httplib::Response& res) {
      handle_register(req, res);
    });

    server_.Post(R"(/invoke/([A-Za-z0-9_\-\.]+))",
                 [this](const httplib::Request& req, httplib::Response& res) {
                   handle_invoke(req.matches[1], req.body, res);
                 });

    server_.Get("/functions", [this](const httplib::Request&, httplib::Response& res) {
      std::lock_guard<std::mutex> lk(mu_);
      auto fns = live_ ? live_->functions() : sim_->functions();
      res.set_content(functions_to_json(fns).dump(), "application/json");
    });

    server_.Get("/counters", [this](const httplib::Request&, httplib::Response& res) {
      std::lock_guard<std::mutex> lk(mu_);
      auto c = live_ ? live_->snapshot_counters() : sim_->snapshot_counters();
      res.set_content(counters_to_json(c).dump(), "application/json");
    });

    server_.Post("/advance", [this](const httplib::Request& req, httplib::Response& res) {
      if (!sim_) {
        res.status = 400;
        res.set_content("advance is only valid under the simulated clock", "text/plain");
        return;
      }
      int64_t ms = -1;
      try {
        auto j = nlohmann::json::parse(req.body);
        if (j.is_object() && j.contains("ms") && j["ms"].is_number_integer())
          ms = j["ms"].get<int64_t>();
      } catch (...) {
      }
      if (ms < 0) {
        res.status = 400;
        res.set_content("body must be {\"ms\": <nonnegative integer>}", "text/plain");
        return;
      }
      std::lock_guard<std::mutex> lk(mu_);
      sim_->advance(ms);
      nlohmann::ordered_json j;
      j["now_ms"] = sim_->now_ms();
      res.set_content(j.dump(), "application/json");
    });

    server_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("ok", "text/plain");
    });
  }

  void handle_register(const httplib::Request& req, httplib::Response& res) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(req.body);
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(std::string("bad json: ") + e.what(), "text/plain");
      return;
    }
    FunctionSpec spec;
    spec.max_replicas = opts_.max_replicas;
    spec.idle_timeout_ms = opts_.idle_timeout_ms;
    spec.cold_start_ms = opts_.cold_start_ms;
    spec.concurrency_limit = opts_.concurrency_limit;
    try {
      if (!j.is_object()) throw std::invalid_argument("body must be a json object");
      for (const char* key : {"name", "layer", "block", "expert_begin", "expert_end"})
        if (!j.contains(key))
          throw std::invalid_argument(std::string("missing field: ") + key);
      spec.name = j.at("name").get<std::string>();
      spec.layer = j.at("layer").get<int>();
      spec.block = j.at("block").get<int>();
      spec.expert_begin = j.at("expert_begin").get<int>();
      spec.expert_end = j.at("expert_end").get<int>();
      if (j.contains("max_replicas")) spec.max_replicas = j.at("max_replicas").get<int>();
      if (j.contains("idle_timeout_ms"))
        spec.idle_timeout_ms = j.at("idle_timeout_ms").get<int64_t>();
      if (j.contains("cold_start_ms"))
        spec.cold_start_ms = j.at("cold_start_ms").get<int64_t>();
      if (j.contains("concurrency_limit"))
        spec.concurrency_limit = j.at("concurrency_limit").get<int>();
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(std::string("bad registration: ") + e.what(), "text/plain");
      return;
    }

    std::lock_guard<std::mutex> lk(mu_);
    if (live_) {
      std::string err;
      if (!live_->register_function(spec, factory_, &err)) {
        res.status = err.find("already registered") != std::string::npos ? 409 : 400;
        res.set_content(err, "text/plain");
        return;
      }
    } else {
      try {
        auto host = std::make_shared<BlockHost>(opts_.rc.model, spec.layer, spec.block,
                                                pack_blocks(opts_.rc.model,
                                                            opts_.rc.block_size));
        sim_->register_function(spec, [host](const std::string& payload) {
          auto out = host->handle_bytes(payload);
          if (!out.ok()) throw std::runtime_error(out.error);
          return out.value;
        });
      } catch (const std::exception& e) {
        std::string err = e.what();
        res.status = err.find("already registered") != std::string::npos ? 409 : 400;
        res.set_content(err, "text/plain");
        return;
      }
    }
    nlohmann::ordered_json out;
    out["registered"] = spec.name;
    res.set_content(out.dump(), "application/json");
  }

  void handle_invoke(const std::string& name, const std::string& body,
                     httplib::Response& res) {
    InvokeResult r;
    if (live_) {
      r = live_->invoke(name, body, invoke_timeout_ms_);
    } else {
      std::lock_guard<std::mutex> lk(mu_);
      r = sim_->invoke_sync(name, body, opts_.sim_service_ms, invoke_timeout_ms_);
    }
    switch (r.status) {
      case InvokeResult::Status::Ok:
        res.set_content(r.body, "application/json");
        break;
      case InvokeResult::Status::NotFound:
        res.status = 404;
        res.set_content(r.body.empty() ? "no such function: " + name : r.body,
                        "text/plain");
        break;
      case InvokeResult::Status::Timeout:
        res.status = 504;
        res.set_content(r.body.empty() ? "invocation timed out" : r.body, "text/plain");
        break;
      case InvokeResult::Status::Upstream:
        res.status = 502;
        res.set_content(r.body.empty() ? "function failed" : r.body, "text/plain");
        break;
    }
  }

  GatewayOptions opts_;
  std::unique_ptr<SimPlatform> sim_;
  std::unique_ptr<LivePlatform> live_;
  BackendFactory factory_;
  httplib::Server server_;
  std::mutex mu_;  // guards sim_ (LivePlatform locks internally)
  int bound_port_ = -1;
  int64_t invoke_timeout_ms_ = 30000;
};

}  // namespace moeserve
