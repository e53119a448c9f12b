#pragma once

#include <memory>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "moeserve/orchestrator/orchestrator.hpp"
#include "moeserve/util/base64.hpp"
#include "moeserve/util/io.hpp"
#include "moeserve/util/text.hpp"

namespace moeserve {

struct OrchestratorServiceOptions {
  OrchestratorOptions core;
  std::string host = "127.0.0.1";
  int port = 0;
  std::string port_file;
};

// HTTP face of the control plane. Tenants POST /generate; the trunk runs
// here and expert batches go out through the configured invoker.
class OrchestratorService {
 public:
  OrchestratorService(const OrchestratorServiceOptions& opts,
                      std::unique_ptr<Invoker> invoker)
      : opts_(opts), core_(opts.core, std::move(invoker)) {
    // A /generate call holds its thread for the whole decode loop, so the
    // pool must exceed the number of concurrently served tenants.
    server_.new_task_queue = [] { return new httplib::ThreadPool(32); };
    server_.Post("/generate", [this](const httplib::Request& req, httplib::Response& res) {
      handle_generate(req, res);
    });
    server_.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(stats().dump(), "application/json");
    });
    server_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("ok", "text/plain");
    });
  }

  OrchestratorCore& core() { return core_; }

  nlohmann::ordered_json stats() {
    nlohmann::ordered_json j;
    j["mode"] = core_.options().mode;
    j["window_ms"] = core_.options().window_ms;
    j["block_size"] = core_.options().rc.block_size;
    j["trunk_resident_bytes"] = core_.trunk_resident_bytes();
    j["requests_served"] = core_.requests_served();
    nlohmann::ordered_json per_layer = nlohmann::ordered_json::array();
    for (int l = 0; l < core_.model().num_layers; ++l)
      per_layer.push_back(core_.issued_invocations(l));
    j["issued_per_layer"] = std::move(per_layer);
    j["issued_total"] = core_.total_issued_invocations();
    uint64_t served = core_.requests_served();
    j["mean_latency_ms"] =
        served == 0 ? 0.0 : static_cast<double>(core_.total_latency_ms()) / served;
    return j;
  }

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
  int bound_port() const { return bound_port_; }

 private:
  void handle_generate(const httplib::Request& req, httplib::Response& res) {
    std::string tenant;
    std::string prompt;
    int max_new = 0;
    try {
      auto j = nlohmann::json::parse(req.body);
      if (!j.is_object()) throw std::invalid_argument("body must be a json object");
      if (j.contains("tenant")) tenant = j.at("tenant").get<std::string>();
      bool have_plain = j.contains("prompt");
      bool have_b64 = j.contains("prompt_b64");
      if (have_plain == have_b64)
        throw std::invalid_argument("exactly one of prompt / prompt_b64 required");
      if (have_plain) {
        prompt = j.at("prompt").get<std::string>();
      } else {
        auto decoded = base64_decode(j.at("prompt_b64").get<std::string>());
        if (!decoded) throw std::invalid_argument("prompt_b64 is not valid base64");
        prompt = *decoded;
      }
      if (!j.contains("max_new") || !j.at("max_new").is_number_integer())
        throw std::invalid_argument("max_new (integer) required");
      max_new = j.at("max_new").get<int>();
      if (max_new < 0) throw std::invalid_argument("max_new must be nonnegative");
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(std::string("bad request: ") + e.what(), "text/plain");
      return;
    }

    try {
      OrchestratorCore::GenerateResult r = core_.generate(prompt, max_new);
      nlohmann::ordered_json j;
      j["tenant"] = tenant;
      j["text_b64"] = base64_encode(r.text);
      j["text_escaped"] = escape_bytes(r.text);
      j["new_token_count"] = r.new_ids.size();
      j["latency_ms"] = r.latency_ms;
      j["per_layer_invocations"] = r.per_layer_buckets;
      res.set_content(j.dump(), "application/json");
    } catch (const std::invalid_argument& e) {
      res.status = 400;
      res.set_content(std::string("bad request: ") + e.what(), "text/plain");
    } catch (const std::exception& e) {
      res.status = 502;
      res.set_content(std::string("generation failed: ") + e.what(), "text/plain");
    }
  }

  OrchestratorServiceOptions opts_;
  OrchestratorCore core_;
  httplib::Server server_;
  int bound_port_ = -1;
};

}  // namespace moeserve
