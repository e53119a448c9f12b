#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "moeserve/platform/types.hpp"

namespace moeserve {

// Outcome of one replica-level request.
struct HandleOutcome {
  enum class Status { Ok, HandlerError, ReplicaDead, TimedOut };
  Status status = Status::Ok;
  std::string body;
};

// One live replica's execution engine. Constructed at boot (construction cost
// is real cold-start work: weight derivation, process spawn); handle() must be
// safe to call from several threads at once up to the concurrency limit.
class ReplicaBackend {
 public:
  virtual ~ReplicaBackend() = default;
  virtual HandleOutcome handle(const std::string& payload, int64_t timeout_ms) = 0;
  virtual uint64_t resident_bytes() const = 0;
  virtual int64_t pid() const { return 0; }
};

using BackendFactory =
    std::function<std::unique_ptr<ReplicaBackend>(const FunctionSpec&)>;

// Real-clock, multi-threaded platform. Replicas follow
// Cold -> Starting -> Warm -> Draining -> Cold; a request arriving when a
// function has no live replica boots one (that is the cold start, and the
// boot enforces the configured cold_start_ms as a floor). A background
// autoscaler adds replicas while requests queue and retires warm replicas
// after idle_timeout_ms. Dispatch picks the warm replica with the least work
// in flight, breaking ties toward the lowest replica id.
class LivePlatform {
 public:
  explicit LivePlatform(int64_t autoscale_interval_ms = 100)
      : autoscale_interval_ms_(autoscale_interval_ms),
        scaler_([this] { autoscale_loop(); }) {}

  ~LivePlatform() { shutdown(); }

  void shutdown() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (stopping_) return;
      stopping_ = true;
    }
    scaler_cv_.notify_all();
    scaler_.join();
    // Destroy replicas outside the registry lock; backends may reap processes.
    std::vector<std::unique_ptr<Replica>> graveyard;
    {
      std::lock_guard<std::mutex> lk(mu_);
      for (auto& [name, f] : funcs_) {
        for (auto& r : f->replicas) graveyard.push_back(std::move(r));
        f->replicas.clear();
        f->cv.notify_all();
      }
    }
    graveyard.clear();
  }

  bool register_function(const FunctionSpec& spec, BackendFactory factory,
                         std::string* err = nullptr) {
    std::lock_guard<std::mutex> lk(mu_);
    if (spec.max_replicas < 1) {
      if (err) *err = "max_replicas must be >= 1";
      return false;
    }
    if (funcs_.count(spec.name)) {
      if (err) *err = "function already registered: " + spec.name;
      return false;
    }
    auto f = std::make_unique<Func>();
    f->spec = spec;
    f->factory = std::move(factory);
    funcs_.emplace(spec.name, std::move(f));
    return true;
  }

  InvokeResult invoke(const std::string& name, const std::string& payload,
                      int64_t timeout_ms) {
    auto deadline = Clock::now() + std::chrono::milliseconds(timeout_ms);
    std::unique_lock<std::mutex> lk(mu_);
    auto it = funcs_.find(name);
    if (it == funcs_.end())
      return InvokeResult{InvokeResult::Status::NotFound, "unknown function " + name};
    Func& f = *it->second;

    while (true) {
      if (stopping_)
        return InvokeResult{InvokeResult::Status::Upstream, "platform shutting down"};
      Replica* r = pick_replica(f);
      if (r != nullptr) {
        r->in_flight++;
        r->last_used = Clock::now();
        f.counters.invocations++;
        f.counters.bytes_in += payload.size();
        ReplicaBackend* backend = r->backend.get();
        int replica_id = r->id;
        lk.unlock();
        int64_t remaining = std::chrono::duration_cast<std::chrono::milliseconds>(
                                deadline - Clock::now())
                                .count();
        HandleOutcome out = backend->handle(payload, remaining > 0 ? remaining : 1);
        lk.lock();
        Replica* again = find_replica(f, replica_id);
        if (again != nullptr) {
          again->in_flight--;
          again->last_used = Clock::now();
        }
        switch (out.status) {
          case HandleOutcome::Status::Ok:
            f.counters.bytes_out += out.body.size();
            f.cv.notify_all();
            return InvokeResult{InvokeResult::Status::Ok, std::move(out.body)};
          case HandleOutcome::Status::HandlerError:
            f.cv.notify_all();
            return InvokeResult{InvokeResult::Status::Upstream, std::move(out.body)};
          case HandleOutcome::Status::TimedOut:
            f.cv.notify_all();
            return InvokeResult{InvokeResult::Status::Timeout, std::move(out.body)};
          case HandleOutcome::Status::ReplicaDead: {
            if (again != nullptr) retire_replica_locked(f, replica_id);
            f.cv.notify_all();
            return InvokeResult{InvokeResult::Status::Upstream, std::move(out.body)};
          }
        }
      }
      if (f.replicas.empty() && !f.boot_pending) {
        f.counters.cold_starts++;
        if (!boot_locked(f, lk))  // synchronous: this request pays the cold start
          return InvokeResult{InvokeResult::Status::Upstream,
                              "replica boot failed: " + f.last_boot_error};
        continue;
      }
      f.waiting++;
      bool ok = f.cv.wait_until(lk, deadline, [&] {
        return stopping_ || pick_replica(f) != nullptr ||
               (f.replicas.empty() && !f.boot_pending);
      });
      f.waiting--;
      if (!ok)
        return InvokeResult{InvokeResult::Status::Timeout,
                            "no replica capacity before deadline"};
    }
  }

  PlatformCounters snapshot_counters() {
    std::lock_guard<std::mutex> lk(mu_);
    PlatformCounters pc;
    auto now = Clock::now();
    for (const auto& [name, f] : funcs_) {
      FunctionCounters c = f->counters;
      for (const auto& r : f->replicas)
        if (r->phase == Phase::Warm)
          c.total_warm_ms += std::chrono::duration_cast<std::chrono::milliseconds>(
                                 now - r->warm_since)
                                 .count();
      pc[name] = c;
    }
    return pc;
  }

  std::vector<FunctionInfo> functions() {
    std::lock_guard<std::mutex> lk(mu_);
    std::vector<FunctionInfo> out;
    for (const auto& [name, f] : funcs_) {
      FunctionInfo info;
      info.spec = f->spec;
      for (const auto& r : f->replicas) {
        ReplicaInfo ri;
        ri.id = r->id;
        ri.phase = r->phase;
        ri.in_flight = r->in_flight;
        if (r->backend) {
          ri.pid = r->backend->pid();
          ri.resident_bytes = r->backend->resident_bytes();
        }
        info.replicas.push_back(ri);
      }
      out.push_back(std::move(info));
    }
    return out;
  }

  int warm_replicas(const std::string& name) {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = funcs_.find(name);
    if (it == funcs_.end()) return 0;
    int n = 0;
    for (const auto& r : it->second->replicas)
      if (r->phase == Phase::Warm) ++n;
    return n;
  }

  // Total resident parameter bytes across warm replicas of all functions.
  uint64_t warm_resident_bytes() {
    std::lock_guard<std::mutex> lk(mu_);
    uint64_t total = 0;
    for (const auto& [name, f] : funcs_)
      for (const auto& r : f->replicas)
        if (r->phase == Phase::Warm && r->backend) total += r->backend->resident_bytes();
    return total;
  }

 private:
  using Clock = std::chrono::steady_clock;

  struct Replica {
    int id = 0;
    Phase phase = Phase::Cold;
    int in_flight = 0;
    Clock::time_point last_used{};
    Clock::time_point warm_since{};
    std::unique_ptr<ReplicaBackend> backend;
  };

  struct Func {
    FunctionSpec spec;
    BackendFactory factory;
    std::vector<std::unique_ptr<Replica>> replicas;  // ascending id
    int next_replica_id = 0;
    int waiting = 0;
    bool boot_pending = false;
    std::string last_boot_error;
    FunctionCounters counters;
    std::condition_variable cv;
  };

  Replica* pick_replica(Func& f) {
    Replica* best = nullptr;
    for (auto& r : f.replicas) {
      if (r->phase != Phase::Warm || r->in_flight >= f.spec.concurrency_limit) continue;
      if (best == nullptr || r->in_flight < best->in_flight) best = r.get();
    }
    return best;
  }

  Replica* find_replica(Func& f, int id) {
    for (auto& r : f.replicas)
      if (r->id == id) return r.get();
    return nullptr;
  }

  void retire_replica_locked(Func& f, int id) {
    for (auto it = f.replicas.begin(); it != f.replicas.end(); ++it) {
      if ((*it)->id == id) {
        fold_warm_time(f, **it);
        // Destruction happens here under the lock; backends whose teardown is
        // slow (process reap) keep it bounded by a kill timeout.
        f.replicas.erase(it);
        return;
      }
    }
  }

  void fold_warm_time(Func& f, Replica& r) {
    if (r.phase == Phase::Warm)
      f.counters.total_warm_ms += std::chrono::duration_cast<std::chrono::milliseconds>(
                                      Clock::now() - r.warm_since)
                                      .count();
  }

  // Boots one replica. Called with the lock held; releases it for the slow
  // construction work and reacquires before returning. Returns false when the
  // backend factory failed (the attempt is recorded in last_boot_error).
  bool boot_locked(Func& f, std::unique_lock<std::mutex>& lk) {
    f.boot_pending = true;
    auto placeholder = std::make_unique<Replica>();
    placeholder->id = f.next_replica_id++;
    placeholder->phase = Phase::Starting;
    int id = placeholder->id;
    f.replicas.push_back(std::move(placeholder));
    if (f.replicas.size() > f.counters.max_concurrent_replicas)
      f.counters.max_concurrent_replicas = f.replicas.size();
    FunctionSpec spec = f.spec;
    BackendFactory factory = f.factory;
    lk.unlock();

    auto t0 = Clock::now();
    std::unique_ptr<ReplicaBackend> backend;
    std::string boot_err;
    try {
      backend = factory(spec);
    } catch (const std::exception& e) {
      boot_err = e.what();
    }
    auto min_ready = t0 + std::chrono::milliseconds(spec.cold_start_ms);
    if (backend && Clock::now() < min_ready) std::this_thread::sleep_until(min_ready);

    lk.lock();
    Replica* r = find_replica(f, id);
    f.boot_pending = false;
    if (r == nullptr) {
      f.cv.notify_all();
      return false;  // platform shut down meanwhile
    }
    if (!backend) {
      f.last_boot_error = boot_err.empty() ? "backend factory failed" : boot_err;
      retire_replica_locked(f, id);
      f.cv.notify_all();
      return false;
    }
    r->backend = std::move(backend);
    r->phase = Phase::Warm;
    r->warm_since = Clock::now();
    r->last_used = r->warm_since;
    f.cv.notify_all();
    return true;
  }

  void autoscale_loop() {
    std::unique_lock<std::mutex> lk(mu_);
    while (!stopping_) {
      scaler_cv_.wait_for(lk, std::chrono::milliseconds(autoscale_interval_ms_),
                          [&] { return stopping_; });
      if (stopping_) break;
      auto now = Clock::now();
      for (auto& [name, f] : funcs_) {
        if (f->waiting > 0 && !f->boot_pending &&
            static_cast<int>(f->replicas.size()) < f->spec.max_replicas) {
          boot_locked(*f, lk);
          now = Clock::now();
        }
        for (auto it = f->replicas.begin(); it != f->replicas.end();) {
          Replica& r = **it;
          bool idle =
              r.phase == Phase::Warm && r.in_flight == 0 &&
              std::chrono::duration_cast<std::chrono::milliseconds>(now - r.last_used)
                      .count() >= f->spec.idle_timeout_ms;
          if (idle) {
            r.phase = Phase::Draining;
            fold_warm_time_draining(*f, r);
            it = f->replicas.erase(it);
          } else {
            ++it;
          }
        }
      }
    }
  }

  void fold_warm_time_draining(Func& f, Replica& r) {
    f.counters.total_warm_ms += std::chrono::duration_cast<std::chrono::milliseconds>(
                                    Clock::now() - r.warm_since)
                                    .count();
  }

  std::mutex mu_;
  std::condition_variable scaler_cv_;
  bool stopping_ = false;
  int64_t autoscale_interval_ms_;
  std::map<std::string, std::unique_ptr<Func>> funcs_;
  std::thread scaler_;
};

}  // namespace moeserve
