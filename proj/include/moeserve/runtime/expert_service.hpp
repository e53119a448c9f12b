#pragma once

#include <memory>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "moeserve/runtime/block_host.hpp"
#include "moeserve/util/io.hpp"

namespace moeserve {

struct ExpertServiceOptions {
  RunConfig rc;
  int layer = 0;
  int block = 0;
  std::string host = "127.0.0.1";
  int port = 0;               // 0 picks a free port
  std::string port_file;      // written after bind when non-empty
};

// Standalone expert worker: one block of experts behind POST /invoke.
// Stateless across requests; all parameters derive from the model seed at
// startup.
class ExpertService {
 public:
  explicit ExpertService(const ExpertServiceOptions& opts)
      : opts_(opts),
        host_(opts.rc.model, opts.layer, opts.block,
              pack_blocks(opts.rc.model, opts.rc.block_size)) {
    server_.Post("/invoke", [this](const httplib::Request& req, httplib::Response& res) {
      auto out = host_.handle_bytes(req.body);
      if (out.ok()) {
        res.set_content(out.value, "application/json");
      } else {
        res.status = 400;
        res.set_content(out.error, "text/plain");
      }
    });
    server_.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(stats().dump(), "application/json");
    });
    server_.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content("ok", "text/plain");
    });
  }

  nlohmann::ordered_json stats() const {
    nlohmann::ordered_json j;
    j["layer"] = host_.layer();
    j["block"] = host_.block();
    j["hosted_experts"] = host_.hosted();
    j["resident_bytes"] = host_.resident_bytes();
    j["requests_served"] = host_.requests_served();
    return j;
  }

  // Binds, publishes the port, and serves until stop(). Returns false if the
  // bind failed.
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
  const BlockHost& block_host() const { return host_; }

 private:
  ExpertServiceOptions opts_;
  BlockHost host_;
  httplib::Server server_;
  int bound_port_ = -1;
};

}  // namespace moeserve
