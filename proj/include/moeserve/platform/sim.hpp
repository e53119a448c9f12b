#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include "moeserve/platform/types.hpp"

namespace moeserve {

// Single-threaded discrete-event platform with a virtual clock. Replica
// lifecycle, queuing, autoscaling, cold starts, deadlines, and crash
// injection all run as ordered events, so a whole trace is reproducible
// bit-for-bit from the same inputs. Handlers execute at completion time.
//
// Time only moves inside run_until() / advance() / invoke_sync(); between
// calls the clock is frozen, which lets tests create precise idle gaps.

class SimPlatform {
 public:
  using Handler = std::function<std::string(const std::string&)>;
  // Consulted when a dispatched request is about to complete; returning true
  // crashes the replica, failing every request in flight on it.
  using CrashHook = std::function<bool(const std::string&, int, uint64_t)>;

  struct TraceEvent {
    int64_t at = 0;
    std::string kind;
    std::string fn;
    int replica = -1;
    uint64_t req = 0;

    bool operator==(const TraceEvent& o) const {
      return at == o.at && kind == o.kind && fn == o.fn && replica == o.replica &&
             req == o.req;
    }
  };

  struct RequestRecord {
    std::string fn;
    bool dispatched = false;
    bool resolved = false;
    InvokeResult result;
  };

  explicit SimPlatform(int64_t tick_interval_ms = 50)
      : tick_interval_ms_(tick_interval_ms) {}

  int64_t now_ms() const { return now_; }

  void register_function(const FunctionSpec& spec, Handler handler) {
    if (funcs_.count(spec.name))
      throw std::invalid_argument("function already registered: " + spec.name);
    if (spec.max_replicas < 1)
      throw std::invalid_argument("max_replicas must be >= 1");
    Func f;
    f.spec = spec;
    f.handler = std::move(handler);
    funcs_.emplace(spec.name, std::move(f));
    note(spec.name, "register", -1, 0);
  }

  // Submits a request. service_ms is the simulated execution time on a
  // replica; deadline_ms < 0 means no deadline. Returns the request id.
  uint64_t submit(const std::string& name, std::string payload, int64_t service_ms,
                  int64_t deadline_ms = -1) {
    uint64_t id = next_req_id_++;
    RequestState rs;
    rs.record.fn = name;
    rs.payload = std::move(payload);
    rs.service_ms = service_ms;
    requests_.emplace(id, std::move(rs));
    auto it = funcs_.find(name);
    if (it == funcs_.end()) {
      resolve(id, InvokeResult::Status::NotFound, "unknown function " + name);
      return id;
    }
    note(name, "submit", -1, id);
    unresolved_++;
    if (deadline_ms >= 0) push_event(now_ + deadline_ms, EventKind::Deadline, name, -1, id);
    Func& f = it->second;
    Replica* r = pick_replica(f);
    if (r != nullptr) {
      dispatch(f, *r, id);
    } else {
      f.queue.push_back(id);
      if (f.replicas.empty()) {
        f.counters.cold_starts++;
        note(name, "cold_start", -1, id);
        boot(f);
      }
    }
    ensure_tick();
    return id;
  }

  // Processes events until the given request resolves, advancing the clock.
  InvokeResult run_until(uint64_t id) {
    while (!requests_.at(id).record.resolved) {
      if (!step()) throw std::logic_error("event queue drained with request unresolved");
    }
    return requests_.at(id).record.result;
  }

  // Processes events until every submitted request has resolved.
  void run_until_idle() {
    while (unresolved_ > 0) {
      if (!step()) throw std::logic_error("event queue drained with requests unresolved");
    }
  }

  InvokeResult invoke_sync(const std::string& name, std::string payload,
                           int64_t service_ms, int64_t deadline_ms = -1) {
    return run_until(submit(name, std::move(payload), service_ms, deadline_ms));
  }

  // Moves the clock forward by dt, processing ticks, drains, and any other
  // events that fall inside the window.
  void advance(int64_t dt) {
    int64_t target = now_ + dt;
    while (!events_.empty() && events_.top().at <= target) step();
    now_ = target;
  }

  int warm_replicas(const std::string& name) const {
    auto it = funcs_.find(name);
    if (it == funcs_.end()) return 0;
    int n = 0;
    for (const auto& r : it->second.replicas)
      if (r.phase == Phase::Warm) ++n;
    return n;
  }

  int alive_replicas(const std::string& name) const {
    auto it = funcs_.find(name);
    return it == funcs_.end() ? 0 : static_cast<int>(it->second.replicas.size());
  }

  PlatformCounters snapshot_counters() const {
    PlatformCounters pc;
    for (const auto& [name, f] : funcs_) {
      FunctionCounters c = f.counters;
      for (const auto& r : f.replicas)
        if (r.phase == Phase::Warm)
          c.total_warm_ms += static_cast<uint64_t>(now_ - r.warm_since);
      pc[name] = c;
    }
    return pc;
  }

  std::vector<FunctionInfo> functions() const {
    std::vector<FunctionInfo> out;
    for (const auto& [name, f] : funcs_) {
      FunctionInfo info;
      info.spec = f.spec;
      for (const auto& r : f.replicas) {
        ReplicaInfo ri;
        ri.id = r.id;
        ri.phase = r.phase;
        ri.in_flight = r.in_flight;
        info.replicas.push_back(ri);
      }
      out.push_back(std::move(info));
    }
    return out;
  }

  const RequestRecord& record(uint64_t id) const { return requests_.at(id).record; }
  const std::vector<TraceEvent>& trace() const { return trace_; }
  void set_crash_hook(CrashHook hook) { crash_hook_ = std::move(hook); }
  size_t unresolved() const { return unresolved_; }

 private:
  enum class EventKind { ReplicaReady, Complete, Deadline, Tick };

  struct Event {
    int64_t at;
    uint64_t seq;
    EventKind kind;
    std::string fn;
    int replica;
    uint64_t req;
  };

  struct EventAfter {
    bool operator()(const Event& a, const Event& b) const {
      if (a.at != b.at) return a.at > b.at;
      return a.seq > b.seq;
    }
  };

  struct Replica {
    int id = 0;
    Phase phase = Phase::Cold;
    int in_flight = 0;
    int64_t last_used = 0;
    int64_t warm_since = 0;
  };

  struct RequestState {
    RequestRecord record;
    std::string payload;
    int64_t service_ms = 0;
  };

  struct Func {
    FunctionSpec spec;
    Handler handler;
    std::vector<Replica> replicas;  // non-cold replicas, ascending id
    std::deque<uint64_t> queue;
    FunctionCounters counters;
    int next_replica_id = 0;
  };

  void note(const std::string& fn, const char* kind, int replica, uint64_t req) {
    trace_.push_back(TraceEvent{now_, kind, fn, replica, req});
  }

  void push_event(int64_t at, EventKind kind, std::string fn, int replica, uint64_t req) {
    events_.push(Event{at, next_event_seq_++, kind, std::move(fn), replica, req});
  }

  void ensure_tick() {
    if (tick_scheduled_) return;
    for (const auto& [name, f] : funcs_) {
      if (!f.queue.empty() || !f.replicas.empty()) {
        push_event(now_ + tick_interval_ms_, EventKind::Tick, "", -1, 0);
        tick_scheduled_ = true;
        return;
      }
    }
  }

  Replica* pick_replica(Func& f) {
    Replica* best = nullptr;
    for (auto& r : f.replicas) {
      if (r.phase != Phase::Warm || r.in_flight >= f.spec.concurrency_limit) continue;
      if (best == nullptr || r.in_flight < best->in_flight) best = &r;
    }
    return best;
  }

  Replica* find_replica(Func& f, int id) {
    for (auto& r : f.replicas)
      if (r.id == id) return &r;
    return nullptr;
  }

  void boot(Func& f) {
    Replica r;
    r.id = f.next_replica_id++;
    r.phase = Phase::Starting;
    f.replicas.push_back(r);
    if (f.replicas.size() > f.counters.max_concurrent_replicas)
      f.counters.max_concurrent_replicas = f.replicas.size();
    note(f.spec.name, "boot", r.id, 0);
    push_event(now_ + f.spec.cold_start_ms, EventKind::ReplicaReady, f.spec.name, r.id, 0);
  }

  void dispatch(Func& f, Replica& r, uint64_t id) {
    RequestState& rs = requests_.at(id);
    rs.record.dispatched = true;
    r.in_flight++;
    r.last_used = now_;
    f.counters.invocations++;
    f.counters.bytes_in += rs.payload.size();
    note(f.spec.name, "dispatch", r.id, id);
    push_event(now_ + rs.service_ms, EventKind::Complete, f.spec.name, r.id, id);
  }

  void drain_queue(Func& f) {
    while (!f.queue.empty()) {
      Replica* r = pick_replica(f);
      if (r == nullptr) break;
      uint64_t id = f.queue.front();
      f.queue.pop_front();
      dispatch(f, *r, id);
    }
  }

  void resolve(uint64_t id, InvokeResult::Status status, std::string body) {
    RequestState& rs = requests_.at(id);
    if (rs.record.resolved) return;
    rs.record.resolved = true;
    rs.record.result.status = status;
    rs.record.result.body = std::move(body);
    if (status != InvokeResult::Status::NotFound) unresolved_--;
  }

  void remove_replica(Func& f, int id) {
    for (auto it = f.replicas.begin(); it != f.replicas.end(); ++it) {
      if (it->id == id) {
        if (it->phase == Phase::Warm)
          f.counters.total_warm_ms += static_cast<uint64_t>(now_ - it->warm_since);
        f.replicas.erase(it);
        return;
      }
    }
  }

  bool step() {
    if (events_.empty()) return false;
    Event ev = events_.top();
    events_.pop();
    now_ = ev.at;
    switch (ev.kind) {
      case EventKind::ReplicaReady: on_ready(ev); break;
      case EventKind::Complete: on_complete(ev); break;
      case EventKind::Deadline: on_deadline(ev); break;
      case EventKind::Tick: on_tick(); break;
    }
    return true;
  }

  void on_ready(const Event& ev) {
    Func& f = funcs_.at(ev.fn);
    Replica* r = find_replica(f, ev.replica);
    if (r == nullptr || r->phase != Phase::Starting) return;
    r->phase = Phase::Warm;
    r->warm_since = now_;
    r->last_used = now_;
    note(ev.fn, "ready", r->id, 0);
    drain_queue(f);
  }

  void on_complete(const Event& ev) {
    Func& f = funcs_.at(ev.fn);
    Replica* r = find_replica(f, ev.replica);
    if (r == nullptr) return;  // replica crashed while this request was in flight
    RequestState& rs = requests_.at(ev.req);
    if (crash_hook_ && !rs.record.resolved && crash_hook_(ev.fn, ev.replica, ev.req)) {
      note(ev.fn, "crash", ev.replica, ev.req);
      resolve(ev.req, InvokeResult::Status::Upstream,
              "replica crashed while serving request");
      note(ev.fn, "upstream", ev.replica, ev.req);
      fail_in_flight(f, ev.replica);
      remove_replica(f, ev.replica);
      // Backlog should not wait for the next tick after a crash.
      if (static_cast<int64_t>(f.queue.size()) > pending_capacity(f) &&
          static_cast<int>(f.replicas.size()) < f.spec.max_replicas)
        boot(f);
      drain_queue(f);
      return;
    }
    if (!rs.record.resolved) {
      try {
        std::string response = f.handler ? f.handler(rs.payload) : std::string();
        f.counters.bytes_out += response.size();
        resolve(ev.req, InvokeResult::Status::Ok, std::move(response));
        note(ev.fn, "complete", ev.replica, ev.req);
      } catch (const std::exception& e) {
        resolve(ev.req, InvokeResult::Status::Upstream,
                std::string("handler error: ") + e.what());
        note(ev.fn, "upstream", ev.replica, ev.req);
      }
    } else {
      note(ev.fn, "late_complete", ev.replica, ev.req);
    }
    r->in_flight--;
    r->last_used = now_;
    drain_queue(f);
  }

  void fail_in_flight(Func& f, int replica_id) {
    // A Complete event exists for every in-flight request on the replica;
    // scan the pending events for them and resolve as upstream errors.
    std::vector<Event> keep;
    keep.reserve(events_.size());
    while (!events_.empty()) {
      Event e = events_.top();
      events_.pop();
      if (e.kind == EventKind::Complete && e.fn == f.spec.name && e.replica == replica_id) {
        if (!requests_.at(e.req).record.resolved) {
          resolve(e.req, InvokeResult::Status::Upstream,
                  "replica crashed while serving request");
          note(f.spec.name, "upstream", replica_id, e.req);
        }
        continue;
      }
      keep.push_back(std::move(e));
    }
    for (auto& e : keep) events_.push(std::move(e));
  }

  void on_deadline(const Event& ev) {
    RequestState& rs = requests_.at(ev.req);
    if (rs.record.resolved) return;
    auto fit = funcs_.find(ev.fn);
    if (fit != funcs_.end()) {
      auto& q = fit->second.queue;
      for (auto it = q.begin(); it != q.end(); ++it) {
        if (*it == ev.req) {
          q.erase(it);
          break;
        }
      }
    }
    resolve(ev.req, InvokeResult::Status::Timeout, "deadline exceeded");
    note(ev.fn, "timeout", -1, ev.req);
  }

  // Capacity the current replicas can still absorb: starting replicas count
  // in full, warm ones by their free concurrency slots.
  static int64_t pending_capacity(const Func& f) {
    int64_t cap = 0;
    for (const auto& r : f.replicas) {
      if (r.phase == Phase::Starting) cap += f.spec.concurrency_limit;
      else if (r.phase == Phase::Warm) cap += f.spec.concurrency_limit - r.in_flight;
    }
    return cap;
  }

  void on_tick_function(Func& f) {
    if (static_cast<int64_t>(f.queue.size()) > pending_capacity(f) &&
        static_cast<int>(f.replicas.size()) < f.spec.max_replicas) {
      note(f.spec.name, "scale_up", -1, 0);
      boot(f);
    }
    for (auto it = f.replicas.begin(); it != f.replicas.end();) {
      if (it->phase == Phase::Warm && it->in_flight == 0 &&
          now_ - it->last_used >= f.spec.idle_timeout_ms) {
        it->phase = Phase::Draining;
        note(f.spec.name, "drain", it->id, 0);
        f.counters.total_warm_ms += static_cast<uint64_t>(now_ - it->warm_since);
        it = f.replicas.erase(it);
      } else {
        ++it;
      }
    }
  }

  void on_tick() {
    tick_scheduled_ = false;
    for (auto& [name, f] : funcs_) on_tick_function(f);
    ensure_tick();
  }

  int64_t tick_interval_ms_;
  int64_t now_ = 0;
  uint64_t next_req_id_ = 1;
  uint64_t next_event_seq_ = 0;
  bool tick_scheduled_ = false;
  size_t unresolved_ = 0;
  std::map<std::string, Func> funcs_;
  std::map<uint64_t, RequestState> requests_;
  std::priority_queue<Event, std::vector<Event>, EventAfter> events_;
  std::vector<TraceEvent> trace_;
  CrashHook crash_hook_;
};

}  // namespace moeserve
