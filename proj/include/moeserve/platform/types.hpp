#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace moeserve {

enum class Phase { Cold, Starting, Warm, Draining };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::Cold: return "cold";
    case Phase::Starting: return "starting";
    case Phase::Warm: return "warm";
    case Phase::Draining: return "draining";
  }
  return "?";
}

struct FunctionSpec {
  std::string name;
  int layer = 0;
  int block = 0;
  int expert_begin = 0;  // hosted experts are [expert_begin, expert_end)
  int expert_end = 0;
  int max_replicas = 4;
  int64_t idle_timeout_ms = 30000;
  int64_t cold_start_ms = 200;
  int concurrency_limit = 4;
};

struct FunctionCounters {
  uint64_t invocations = 0;  // requests dispatched to a replica
  uint64_t cold_starts = 0;
  uint64_t max_concurrent_replicas = 0;
  uint64_t total_warm_ms = 0;
  uint64_t bytes_in = 0;
  uint64_t bytes_out = 0;
};

using PlatformCounters = std::map<std::string, FunctionCounters>;

struct ReplicaInfo {
  int id = 0;
  Phase phase = Phase::Cold;
  int in_flight = 0;
  int64_t pid = 0;           // subprocess replicas only
  uint64_t resident_bytes = 0;
};

struct FunctionInfo {
  FunctionSpec spec;
  std::vector<ReplicaInfo> replicas;
};

struct InvokeResult {
  enum class Status { Ok, NotFound, Timeout, Upstream };
  Status status = Status::Ok;
  std::string body;  // response payload when Ok, diagnostic otherwise

  bool ok() const { return status == Status::Ok; }
};

inline const char* invoke_status_name(InvokeResult::Status s) {
  switch (s) {
    case InvokeResult::Status::Ok: return "ok";
    case InvokeResult::Status::NotFound: return "not_found";
    case InvokeResult::Status::Timeout: return "timeout";
    case InvokeResult::Status::Upstream: return "upstream";
  }
  return "?";
}

inline nlohmann::ordered_json counters_to_json(const PlatformCounters& pc) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [name, c] : pc) {
    nlohmann::ordered_json f;
    f["invocations"] = c.invocations;
    f["cold_starts"] = c.cold_starts;
    f["max_concurrent_replicas"] = c.max_concurrent_replicas;
    f["total_warm_ms"] = c.total_warm_ms;
    f["bytes_in"] = c.bytes_in;
    f["bytes_out"] = c.bytes_out;
    j[name] = std::move(f);
  }
  return j;
}

inline PlatformCounters counters_from_json(const nlohmann::json& j) {
  PlatformCounters pc;
  for (auto it = j.begin(); it != j.end(); ++it) {
    FunctionCounters c;
    c.invocations = it.value().at("invocations").get<uint64_t>();
    c.cold_starts = it.value().at("cold_starts").get<uint64_t>();
    c.max_concurrent_replicas = it.value().at("max_concurrent_replicas").get<uint64_t>();
    c.total_warm_ms = it.value().at("total_warm_ms").get<uint64_t>();
    c.bytes_in = it.value().at("bytes_in").get<uint64_t>();
    c.bytes_out = it.value().at("bytes_out").get<uint64_t>();
    pc[it.key()] = c;
  }
  return pc;
}

inline nlohmann::ordered_json functions_to_json(const std::vector<FunctionInfo>& fns) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& f : fns) {
    nlohmann::ordered_json j;
    j["name"] = f.spec.name;
    j["layer"] = f.spec.layer;
    j["block"] = f.spec.block;
    j["expert_begin"] = f.spec.expert_begin;
    j["expert_end"] = f.spec.expert_end;
    j["max_replicas"] = f.spec.max_replicas;
    j["idle_timeout_ms"] = f.spec.idle_timeout_ms;
    j["cold_start_ms"] = f.spec.cold_start_ms;
    j["concurrency_limit"] = f.spec.concurrency_limit;
    nlohmann::ordered_json reps = nlohmann::ordered_json::array();
    for (const auto& r : f.replicas) {
      nlohmann::ordered_json rj;
      rj["id"] = r.id;
      rj["phase"] = phase_name(r.phase);
      rj["in_flight"] = r.in_flight;
      rj["pid"] = r.pid;
      rj["resident_bytes"] = r.resident_bytes;
      reps.push_back(std::move(rj));
    }
    j["replicas"] = std::move(reps);
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace moeserve
