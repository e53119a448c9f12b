#pragma once

#include <map>
#include <memory>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "moeserve/runtime/block_host.hpp"
#include "moeserve/util/io.hpp"

namespace moeserve {

struct LocalServerOptions {
  RunConfig rc;
  std::string host = "127.0.0.1";
  int port = 0;
  std::string port_file;
};

// Always-on expert tier: every block of every layer resident in one process
// for the lifetime of the server. Same /invoke wire contract as the platform
// gateway, but no registration, scaling, or idle reclaim.
class LocalExpertServer {
 public:
  explicit LocalExpertServer(const LocalServerOptions& opts) : opts_(opts) {
    BlockMap bm = pack_blocks(opts_.rc.model, opts_.rc.block_size);
    for (const auto& e : bm.entries) {
      hosts_.emplace(e.name, std::make_unique<BlockHost>(opts_.rc.model, e.layer,
                                                         e.block, bm));
    }

    // Sized for concurrent per-layer fan-out from every tenant, since block
    // math is quick but each request holds a thread for its full round trip.
    server_.new_task_queue = [] { return new httplib::ThreadPool(64); };

    server_.Post(R"(/invoke/([A-Za-z0-9_\-\.]+))",
                 [this](const httplib::Request& req, httplib::Response& res) {
                   auto it = hosts_.find(req.matches[1]);
                   if (it == hosts_.end()) {
                     res.status = 404;
                     res.set_content("no such function: " + std::string(req.matches[1]),
                                     "text/plain");
                     return;
                   }
                   auto out = it->second->handle_bytes(req.body);
                   if (out.ok()) {
                     res.set_content(out.value, "application/json");
                   } else {
                     res.status = 502;
                     res.set_content(out.error, "text/plain");
                   }
                 });

    server_.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(stats().dump(), "application/json");
    });

    server_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("ok", "text/plain");
    });
  }

  nlohmann::ordered_json stats() const {
    nlohmann::ordered_json j;
    uint64_t total = 0;
    uint64_t served = 0;
    nlohmann::ordered_json blocks = nlohmann::ordered_json::array();
    for (const auto& [name, host] : hosts_) {
      total += host->resident_bytes();
      served += host->requests_served();
      nlohmann::ordered_json b;
      b["name"] = name;
      b["layer"] = host->layer();
      b["block"] = host->block();
      b["resident_bytes"] = host->resident_bytes();
      b["requests_served"] = host->requests_served();
      blocks.push_back(std::move(b));
    }
    j["resident_bytes"] = total;
    j["requests_served"] = served;
    j["blocks"] = std::move(blocks);
    return j;
  }

  uint64_t resident_bytes() const {
    uint64_t total = 0;
    for (const auto& [name, host] : hosts_) total += host->resident_bytes();
    return total;
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
  LocalServerOptions opts_;
  std::map<std::string, std::unique_ptr<BlockHost>> hosts_;
  httplib::Server server_;
  int bound_port_ = -1;
};

}  // namespace moeserve
