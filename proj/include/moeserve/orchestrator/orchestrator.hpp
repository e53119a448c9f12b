#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

#include "moeserve/core/model.hpp"
#include "moeserve/platform/live.hpp"
#include "moeserve/platform/sim.hpp"
#include "moeserve/protocol/messages.hpp"

namespace moeserve {

// ---------------------------------------------------------------------------
// Invokers: how batched expert requests reach a platform. The orchestrator
// core is identical whether the gateway is an HTTP hop away, an object in
// this process, or a simulation.

struct InvokeOutcome {
  enum class Status { Ok, NotFound, Timeout, Upstream, Transport };
  Status status = Status::Ok;
  std::string body;
};

class Invoker {
 public:
  virtual ~Invoker() = default;
  virtual InvokeOutcome invoke(const std::string& fn, const std::string& payload,
                               int64_t timeout_ms) = 0;
  // SimPlatform is single-threaded; its invoker forbids concurrent dispatch.
  virtual bool supports_concurrent() const { return true; }
};

// Pools keep-alive connections: a fresh socket per dispatch would chew
// through ephemeral ports during a layer fan-out storm.
class HttpInvoker : public Invoker {
 public:
  HttpInvoker(std::string host, int port) : host_(std::move(host)), port_(port) {}

  InvokeOutcome invoke(const std::string& fn, const std::string& payload,
                       int64_t timeout_ms) override {
    std::unique_ptr<httplib::Client> cli = checkout();
    cli->set_read_timeout(timeout_ms / 1000, (timeout_ms % 1000) * 1000);
    auto res = cli->Post(("/invoke/" + fn).c_str(), payload, "application/json");
    if (!res) {
      // Drop the connection; the next call dials fresh.
      if (res.error() == httplib::Error::Read)
        return {InvokeOutcome::Status::Timeout, "gateway did not answer in time"};
      return {InvokeOutcome::Status::Transport,
              "gateway unreachable: " + httplib::to_string(res.error())};
    }
    checkin(std::move(cli));
    switch (res->status) {
      case 200: return {InvokeOutcome::Status::Ok, res->body};
      case 404: return {InvokeOutcome::Status::NotFound, res->body};
      case 504: return {InvokeOutcome::Status::Timeout, res->body};
      default: return {InvokeOutcome::Status::Upstream, res->body};
    }
  }

 private:
  std::unique_ptr<httplib::Client> checkout() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (!idle_.empty()) {
        auto cli = std::move(idle_.back());
        idle_.pop_back();
        return cli;
      }
    }
    auto cli = std::make_unique<httplib::Client>(host_, port_);
    cli->set_connection_timeout(0, 500 * 1000);
    cli->set_keep_alive(true);
    return cli;
  }

  void checkin(std::unique_ptr<httplib::Client> cli) {
    std::lock_guard<std::mutex> lk(mu_);
    if (idle_.size() < 64) idle_.push_back(std::move(cli));
  }

  std::string host_;
  int port_;
  std::mutex mu_;
  std::vector<std::unique_ptr<httplib::Client>> idle_;
};

class LiveInvoker : public Invoker {
 public:
  explicit LiveInvoker(LivePlatform* platform) : platform_(platform) {}

  InvokeOutcome invoke(const std::string& fn, const std::string& payload,
                       int64_t timeout_ms) override {
    InvokeResult r = platform_->invoke(fn, payload, timeout_ms);
    switch (r.status) {
      case InvokeResult::Status::Ok: return {InvokeOutcome::Status::Ok, std::move(r.body)};
      case InvokeResult::Status::NotFound:
        return {InvokeOutcome::Status::NotFound, std::move(r.body)};
      case InvokeResult::Status::Timeout:
        return {InvokeOutcome::Status::Timeout, std::move(r.body)};
      case InvokeResult::Status::Upstream:
        return {InvokeOutcome::Status::Upstream, std::move(r.body)};
    }
    return {InvokeOutcome::Status::Transport, "unreachable"};
  }

 private:
  LivePlatform* platform_;
};

class SimInvoker : public Invoker {
 public:
  SimInvoker(SimPlatform* platform, int64_t service_ms)
      : platform_(platform), service_ms_(service_ms) {}

  InvokeOutcome invoke(const std::string& fn, const std::string& payload,
                       int64_t timeout_ms) override {
    InvokeResult r = platform_->invoke_sync(fn, payload, service_ms_, timeout_ms);
    switch (r.status) {
      case InvokeResult::Status::Ok: return {InvokeOutcome::Status::Ok, std::move(r.body)};
      case InvokeResult::Status::NotFound:
        return {InvokeOutcome::Status::NotFound, std::move(r.body)};
      case InvokeResult::Status::Timeout:
        return {InvokeOutcome::Status::Timeout, std::move(r.body)};
      case InvokeResult::Status::Upstream:
        return {InvokeOutcome::Status::Upstream, std::move(r.body)};
    }
    return {InvokeOutcome::Status::Transport, "unreachable"};
  }

  bool supports_concurrent() const override { return false; }

 private:
  SimPlatform* platform_;
  int64_t service_ms_;
};

// ---------------------------------------------------------------------------

class DispatchError : public std::runtime_error {
 public:
  DispatchError(std::string fn, int layer, int block, const std::string& detail)
      : std::runtime_error("dispatch to " + fn + " (layer " + std::to_string(layer) +
                           ", block " + std::to_string(block) + ") failed: " + detail),
        function(std::move(fn)),
        layer(layer),
        block(block) {}

  std::string function;
  int layer;
  int block;
};

struct Provenance {
  int slot = 0;     // token position in the batch
  int expert = 0;
  float weight = 0.0f;
};

struct DispatchPlan {
  int layer = 0;
  std::map<int, std::vector<ExpertWorkItem>> buckets;  // block -> items
  std::map<uint64_t, Provenance> provenance;           // token_ref -> origin
};

// Buckets every (token, selected expert) pair by its hosting block and
// assigns fresh token_refs from the shared counter.
inline DispatchPlan plan_dispatch(int layer, const std::vector<GateDecision>& decisions,
                                  const std::vector<Vec>& activations,
                                  const BlockMap& bm, std::atomic<uint64_t>& next_ref) {
  if (decisions.size() != activations.size())
    throw std::invalid_argument("one activation per gate decision required");
  DispatchPlan plan;
  plan.layer = layer;
  for (size_t t = 0; t < decisions.size(); ++t) {
    const GateDecision& d = decisions[t];
    for (size_t j = 0; j < d.experts.size(); ++j) {
      int e = d.experts[j];
      if (e < 0 || e >= bm.num_experts)
        throw std::invalid_argument("gate selected an expert with no hosting block");
      int block = bm.block_for_expert(e);
      ExpertWorkItem item;
      item.token_ref = next_ref.fetch_add(1);
      item.expert = e;
      item.activation = activations[t];
      plan.provenance[item.token_ref] =
          Provenance{static_cast<int>(t), e, d.weights[j]};
      plan.buckets[block].push_back(std::move(item));
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Cross-tenant micro-batch merger (shared mode). Requests to the same
// function arriving within window_ms ride in one gateway invocation. The
// first arrival leads: it waits out the window, sends the merged batch, and
// wakes the joiners, each of which takes only its own token_refs. Merging
// never touches values, so outputs are unchanged.

class BucketMerger {
 public:
  using SendFn = std::function<std::map<uint64_t, Vec>(const ExpertBatchRequest&)>;

  explicit BucketMerger(int64_t window_ms) : window_ms_(window_ms) {}

  std::map<uint64_t, Vec> submit(const std::string& fn, ExpertBatchRequest req,
                                 const SendFn& send) {
    std::vector<uint64_t> own_refs;
    own_refs.reserve(req.items.size());
    for (const auto& it : req.items) own_refs.push_back(it.token_ref);

    std::unique_lock<std::mutex> lk(mu_);
    std::shared_ptr<Group> g;
    bool leader = false;
    auto it = open_.find(fn);
    if (it != open_.end() && !it->second->closing) {
      g = it->second;
      for (auto& item : req.items) g->req.items.push_back(std::move(item));
      g->joined++;
    } else {
      g = std::make_shared<Group>();
      g->req = std::move(req);
      open_[fn] = g;
      leader = true;
    }

    if (leader) {
      g->cv.wait_for(lk, std::chrono::milliseconds(window_ms_), [&] { return false; });
      g->closing = true;
      if (open_.count(fn) && open_[fn] == g) open_.erase(fn);
      ExpertBatchRequest merged = g->req;
      lk.unlock();
      std::map<uint64_t, Vec> outputs;
      std::string error;
      try {
        outputs = send(merged);
      } catch (const std::exception& e) {
        error = e.what();
      }
      lk.lock();
      g->outputs = std::move(outputs);
      g->error = std::move(error);
      g->done = true;
      g->cv.notify_all();
    } else {
      g->cv.wait(lk, [&] { return g->done; });
    }

    if (!g->error.empty()) throw std::runtime_error(g->error);
    std::map<uint64_t, Vec> own;
    for (uint64_t ref : own_refs) {
      auto oit = g->outputs.find(ref);
      if (oit == g->outputs.end())
        throw std::runtime_error("merged response missing token_ref " +
                                 std::to_string(ref));
      own.emplace(ref, oit->second);
    }
    return own;
  }

 private:
  struct Group {
    ExpertBatchRequest req;
    int joined = 0;
    bool closing = false;
    bool done = false;
    std::string error;
    std::map<uint64_t, Vec> outputs;
    std::condition_variable cv;
  };

  int64_t window_ms_;
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<Group>> open_;
};

// ---------------------------------------------------------------------------

struct OrchestratorOptions {
  RunConfig rc;
  std::string mode = "private";  // "shared" merges across tenants
  int64_t window_ms = 10;
  int64_t timeout_ms = 10000;
  int retries = 2;
};

// The control plane: holds the trunk (attention, routers, norms, shared
// experts, embeddings), plans per-layer dispatches, and aggregates remote
// expert outputs. Thread-safe; one instance serves concurrent tenants.
class OrchestratorCore {
 public:
  OrchestratorCore(const OrchestratorOptions& opts, std::unique_ptr<Invoker> invoker)
      : opts_(opts),
        bm_(pack_blocks(opts.rc.model, opts.rc.block_size)),
        trunk_(make_trunk_store(opts.rc.model)),
        invoker_(std::move(invoker)),
        issued_per_layer_(opts.rc.model.num_layers) {
    for (auto& c : issued_per_layer_) c.store(0);
    if (opts_.mode == "shared" && opts_.window_ms > 0) {
      if (!invoker_->supports_concurrent())
        throw std::invalid_argument(
            "cross-tenant merging requires a concurrency-capable invoker");
      merger_ = std::make_unique<BucketMerger>(opts_.window_ms);
    }
  }

  const ModelConfig& model() const { return opts_.rc.model; }
  const BlockMap& blockmap() const { return bm_; }
  uint64_t trunk_resident_bytes() const { return trunk_->resident_bytes(); }

  struct GenerateResult {
    std::string text;
    std::vector<int> new_ids;
    std::vector<uint64_t> per_layer_buckets;  // buckets this request planned
    int64_t latency_ms = 0;
  };

  // Runs one generation request end to end. Throws DispatchError (or
  // std::runtime_error for protocol violations) — never returns partial text.
  GenerateResult generate(const std::string& prompt, int max_new) {
    auto t0 = std::chrono::steady_clock::now();
    RemoteBackend backend(*this);
    Engine engine(trunk_, &backend);
    Engine::GenResult gr = engine.generate(prompt, max_new);
    GenerateResult out;
    out.text = std::move(gr.text);
    out.new_ids = std::move(gr.new_ids);
    out.per_layer_buckets = std::move(backend.planned_buckets);
    out.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
    requests_served_.fetch_add(1);
    total_latency_ms_.fetch_add(out.latency_ms);
    return out;
  }

  // Single forward pass through remote experts (exactly the monolithic
  // forward contract, with expert evaluation on the platform).
  Vec remote_forward(const std::vector<int>& ids) {
    RemoteBackend backend(*this);
    Engine engine(trunk_, &backend);
    return engine.forward(ids);
  }

  uint64_t issued_invocations(int layer) const { return issued_per_layer_[layer].load(); }

  uint64_t total_issued_invocations() const {
    uint64_t total = 0;
    for (const auto& c : issued_per_layer_) total += c.load();
    return total;
  }

  uint64_t requests_served() const { return requests_served_.load(); }
  uint64_t total_latency_ms() const { return total_latency_ms_.load(); }
  const OrchestratorOptions& options() const { return opts_; }

 private:
  // Per-request expert backend: plans, dispatches, matches, and re-orders
  // results to call order.
  struct RemoteBackend : ExpertBackend {
    explicit RemoteBackend(OrchestratorCore& core)
        : core(core), planned_buckets(core.opts_.rc.model.num_layers, 0) {}

    std::vector<Vec> eval_layer(int layer, const std::vector<ExpertCall>& calls) override {
      std::vector<GateDecision> decisions;  // one pseudo-decision per call
      std::vector<Vec> activations;
      decisions.reserve(calls.size());
      activations.reserve(calls.size());
      for (const auto& c : calls) {
        GateDecision d;
        d.experts = {c.expert};
        d.weights = {1.0f};
        decisions.push_back(std::move(d));
        activations.push_back(c.activation);
      }
      DispatchPlan plan =
          plan_dispatch(layer, decisions, activations, core.bm_, core.next_ref_);
      planned_buckets[layer] += plan.buckets.size();
      std::map<uint64_t, Vec> outputs = core.dispatch_layer(plan);
      // provenance slot i corresponds to calls[i] by construction above
      std::vector<Vec> results(calls.size());
      for (const auto& [ref, prov] : plan.provenance) {
        auto it = outputs.find(ref);
        if (it == outputs.end())
          throw std::runtime_error("dispatch lost token_ref " + std::to_string(ref));
        results[prov.slot] = std::move(it->second);
      }
      return results;
    }

    OrchestratorCore& core;
    std::vector<uint64_t> planned_buckets;
  };

  friend struct RemoteBackend;

  // One gateway invocation with retries and strict response matching.
  std::map<uint64_t, Vec> invoke_validated(const std::string& fn,
                                           const ExpertBatchRequest& req) {
    std::string payload = encode_request(req);
    std::string last_error;
    for (int attempt = 0; attempt <= opts_.retries; ++attempt) {
      InvokeOutcome out = invoker_->invoke(fn, payload, opts_.timeout_ms);
      switch (out.status) {
        case InvokeOutcome::Status::Ok: {
          issued_per_layer_[req.layer].fetch_add(1);
          return match_response(fn, req, out.body);
        }
        case InvokeOutcome::Status::NotFound:
          throw DispatchError(fn, req.layer, req.block,
                              "function not registered: " + out.body);
        case InvokeOutcome::Status::Timeout:
        case InvokeOutcome::Status::Upstream:
          issued_per_layer_[req.layer].fetch_add(1);
          last_error = out.body;
          break;
        case InvokeOutcome::Status::Transport:
          last_error = out.body;
          break;
      }
      // Brief backoff so a momentarily saturated gateway can drain its
      // accept queue before the next attempt.
      if (attempt < opts_.retries)
        std::this_thread::sleep_for(std::chrono::milliseconds(5 << attempt));
    }
    throw DispatchError(fn, req.layer, req.block,
                        "failed after " + std::to_string(opts_.retries + 1) +
                            " attempts: " + last_error);
  }

  std::map<uint64_t, Vec> match_response(const std::string& fn,
                                         const ExpertBatchRequest& req,
                                         const std::string& body) {
    auto decoded = decode_response(body);
    if (!decoded.ok())
      throw DispatchError(fn, req.layer, req.block, "bad response: " + decoded.error);
    const ExpertBatchResponse& resp = decoded.value;
    if (resp.items.size() != req.items.size())
      throw DispatchError(fn, req.layer, req.block,
                          "expected " + std::to_string(req.items.size()) +
                              " response items, got " + std::to_string(resp.items.size()));
    std::map<uint64_t, int> expected;
    for (const auto& it : req.items) expected[it.token_ref] = it.expert;
    std::map<uint64_t, Vec> outputs;
    for (auto& it : resp.items) {
      auto eit = expected.find(it.token_ref);
      if (eit == expected.end())
        throw DispatchError(fn, req.layer, req.block,
                            "response names unknown token_ref " +
                                std::to_string(it.token_ref));
      if (eit->second != it.expert)
        throw DispatchError(fn, req.layer, req.block,
                            "token_ref " + std::to_string(it.token_ref) +
                                " answered by wrong expert");
      if (static_cast<int>(it.output.size()) != opts_.rc.model.embed_dim)
        throw DispatchError(fn, req.layer, req.block, "output has wrong dimension");
      if (!outputs.emplace(it.token_ref, std::move(it.output)).second)
        throw DispatchError(fn, req.layer, req.block,
                            "duplicate token_ref " + std::to_string(it.token_ref) +
                                " in response");
    }
    return outputs;
  }

  std::map<uint64_t, Vec> dispatch_bucket(int layer, int block,
                                          std::vector<ExpertWorkItem> items) {
    ExpertBatchRequest req;
    req.model_seed = opts_.rc.model.model_seed;
    req.layer = layer;
    req.block = block;
    req.items = std::move(items);
    std::string fn = bm_.entry(layer, block).name;
    if (merger_) {
      return merger_->submit(fn, std::move(req), [this, &fn](const ExpertBatchRequest& r) {
        return invoke_validated(fn, r);
      });
    }
    return invoke_validated(fn, req);
  }

  std::map<uint64_t, Vec> dispatch_layer(const DispatchPlan& plan) {
    std::map<uint64_t, Vec> all;
    if (plan.buckets.empty()) return all;
    if (invoker_->supports_concurrent() && plan.buckets.size() > 1) {
      std::vector<std::future<std::map<uint64_t, Vec>>> futs;
      for (const auto& [block, items] : plan.buckets) {
        futs.push_back(std::async(std::launch::async,
                                  [this, layer = plan.layer, block = block,
                                   items = items]() mutable {
                                    return dispatch_bucket(layer, block, std::move(items));
                                  }));
      }
      std::string first_error;
      for (auto& f : futs) {
        try {
          auto part = f.get();
          for (auto& [ref, vec] : part) all.emplace(ref, std::move(vec));
        } catch (const std::exception& e) {
          if (first_error.empty()) first_error = e.what();
        }
      }
      if (!first_error.empty()) throw std::runtime_error(first_error);
    } else {
      for (const auto& [block, items] : plan.buckets) {
        auto part = dispatch_bucket(plan.layer, block, items);
        for (auto& [ref, vec] : part) all.emplace(ref, std::move(vec));
      }
    }
    return all;
  }

  OrchestratorOptions opts_;
  BlockMap bm_;
  std::shared_ptr<ParamStore> trunk_;
  std::unique_ptr<Invoker> invoker_;
  std::unique_ptr<BucketMerger> merger_;
  std::atomic<uint64_t> next_ref_{1};
  std::vector<std::atomic<uint64_t>> issued_per_layer_;
  std::atomic<uint64_t> requests_served_{0};
  std::atomic<uint64_t> total_latency_ms_{0};
};

}  // namespace moeserve
