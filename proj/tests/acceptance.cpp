// End-to-end acceptance checks for the serving testbed. Each check prints
// exactly one PASS/FAIL line; the exit code is the number of failures.
//
// The heavier checks drive the real cli binary (MOESERVE_BIN) so that the
// full process topology, wire protocol, and run-directory reporting are all
// exercised, not just the in-process libraries.

#include <moeserve/core/kernels.hpp>
#include <moeserve/core/model.hpp>
#include <moeserve/harness/workload.hpp>
#include <moeserve/orchestrator/orchestrator.hpp>
#include <moeserve/platform/sim.hpp>
#include <moeserve/runtime/backends.hpp>
#include <moeserve/runtime/block_host.hpp>
#include <moeserve/util/hash.hpp>
#include <moeserve/util/io.hpp>
#include <moeserve/util/subprocess.hpp>

#include <json.hpp>

#include <algorithm>
#include <barrier>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>
#include <vector>

using namespace moeserve;
using nlohmann::json;

namespace {

struct CheckFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void expect(bool cond, const std::string& detail) {
    if (!cond) throw CheckFailure(detail);
}

uint32_t bits_of(float f) {
    uint32_t u;
    std::memcpy(&u, &f, sizeof(u));
    return u;
}

bool bit_equal(const Vec& a, const Vec& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

std::string g_bin;   // cli binary under test
std::string g_work;  // scratch directory for run outputs

std::string bin_path() {
    if (g_bin.empty()) {
        const char* env = std::getenv("MOESERVE_BIN");
        expect(env != nullptr, "MOESERVE_BIN is not set");
        g_bin = env;
    }
    return g_bin;
}

struct CliResult {
    int exit_code = -1;
    std::string output;
};

CliResult run_cli(const std::vector<std::string>& args, int64_t wait_ms = 240000) {
    static int counter = 0;
    std::string log = g_work + "/cli-" + std::to_string(counter++) + ".log";
    std::vector<std::string> argv = {bin_path()};
    argv.insert(argv.end(), args.begin(), args.end());
    pid_t pid = spawn_process(argv, log);
    auto code = wait_exit(pid, wait_ms);
    CliResult r;
    if (!code) {
        terminate_process(pid, 2000);
        r.exit_code = -999;
    } else {
        r.exit_code = *code;
    }
    r.output = read_file(log).value_or("");
    return r;
}

json load_summary(const std::string& dir) {
    auto content = read_file(dir + "/summary.json");
    expect(content.has_value(), "missing " + dir + "/summary.json");
    json j = json::parse(*content, nullptr, false);
    expect(!j.is_discarded(), "corrupt " + dir + "/summary.json");
    return j;
}

void register_all(LivePlatform& platform, const RunConfig& rc) {
    auto bm = pack_blocks(rc.model, rc.block_size);
    auto factory = make_inproc_factory(rc);
    for (const auto& e : bm.entries) {
        FunctionSpec spec;
        spec.name = e.name;
        spec.layer = e.layer;
        spec.block = e.block;
        spec.expert_begin = e.experts.front();
        spec.expert_end = e.experts.back() + 1;
        spec.cold_start_ms = 0;
        spec.idle_timeout_ms = 600000;
        spec.concurrency_limit = 8;
        std::string err;
        expect(platform.register_function(spec, factory, &err), "register failed: " + err);
    }
}

uint64_t total_invocations(const PlatformCounters& pc) {
    uint64_t total = 0;
    for (const auto& [name, c] : pc) total += c.invocations;
    return total;
}

// ---- float64 reference kernels ------------------------------------------

std::vector<double> widen(const Vec& v) { return {v.begin(), v.end()}; }

std::vector<double> matvec64(const Mat& m, const std::vector<double>& x) {
    std::vector<double> y(m.rows, 0.0);
    for (int r = 0; r < m.rows; ++r) {
        double acc = 0.0;
        for (int c = 0; c < m.cols; ++c) acc += static_cast<double>(m.at(r, c)) * x[c];
        y[r] = acc;
    }
    return y;
}

std::vector<double> vecmat64(const std::vector<double>& x, const Mat& m) {
    std::vector<double> y(m.cols, 0.0);
    for (int c = 0; c < m.cols; ++c) {
        double acc = 0.0;
        for (int r = 0; r < m.rows; ++r) acc += x[r] * static_cast<double>(m.at(r, c));
        y[c] = acc;
    }
    return y;
}

std::vector<double> rms_norm64(const Vec& x, const Mat& gain) {
    double ss = 0.0;
    for (float v : x) ss += static_cast<double>(v) * v;
    double denom = std::sqrt(ss / static_cast<double>(x.size()) + 1e-6);
    std::vector<double> out(x.size());
    for (size_t i = 0; i < x.size(); ++i)
        out[i] = static_cast<double>(x[i]) *
                 static_cast<double>(gain.at(0, static_cast<int>(i))) / denom;
    return out;
}

std::vector<double> expert_ffn64(const Mat& w_gate, const Mat& w_up, const Mat& w_down,
                                 const Vec& x) {
    auto g = matvec64(w_gate, widen(x));
    auto u = matvec64(w_up, widen(x));
    for (size_t i = 0; i < g.size(); ++i) g[i] = g[i] / (1.0 + std::exp(-g[i])) * u[i];
    return matvec64(w_down, g);
}

std::vector<std::vector<double>> attention64(const ParamStore& store, int layer,
                                             const std::vector<Vec>& x) {
    const ModelConfig& cfg = store.config();
    int n = static_cast<int>(x.size());
    int d = cfg.embed_dim;
    std::string lp = "layer" + std::to_string(layer) + "/";
    const Mat& wq = store.get(lp + "wq");
    const Mat& wk = store.get(lp + "wk");
    const Mat& wv = store.get(lp + "wv");
    const Mat& wo = store.get(lp + "wo");
    std::vector<std::vector<double>> q(n), k(n), v(n), out(n);
    for (int t = 0; t < n; ++t) {
        q[t] = vecmat64(widen(x[t]), wq);
        k[t] = vecmat64(widen(x[t]), wk);
        v[t] = vecmat64(widen(x[t]), wv);
    }
    double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (int t = 0; t < n; ++t) {
        std::vector<double> s(t + 1);
        for (int u = 0; u <= t; ++u) {
            double acc = 0.0;
            for (int i = 0; i < d; ++i) acc += q[t][i] * k[u][i];
            s[u] = acc * scale;
        }
        double mx = *std::max_element(s.begin(), s.end());
        double sum = 0.0;
        for (double& e : s) {
            e = std::exp(e - mx);
            sum += e;
        }
        for (double& e : s) e /= sum;
        std::vector<double> ctx(d, 0.0);
        for (int u = 0; u <= t; ++u)
            for (int i = 0; i < d; ++i) ctx[i] += s[u] * v[u][i];
        out[t] = vecmat64(ctx, wo);
    }
    return out;
}

// Largest element deviation relative to the output's own magnitude.
double rel_err(const Vec& got, const std::vector<double>& want) {
    double scale = 1e-6;
    for (double w : want) scale = std::max(scale, std::abs(w));
    double worst = 0.0;
    for (size_t i = 0; i < got.size(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(got[i]) - want[i]) / scale);
    return worst;
}

Vec random_vec(std::mt19937& rng, int n, float lo = -2.0f, float hi = 2.0f) {
    std::uniform_real_distribution<float> dist(lo, hi);
    Vec v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

// ---- check 1: remote forward is bit-equal for every block size -----------

void check_remote_forward_equivalence() {
    ModelConfig cfg;  // L=4 d=32 f=64 E=8 S=1 k=2 seed 0
    Engine mono(make_full_store(cfg));

    SplitMix64 rng(4242);
    std::vector<std::string> prompts;
    for (int i = 0; i < 50; ++i) {
        int len = 1 + static_cast<int>(rng.next_below(12));
        std::string p;
        for (int c = 0; c < len; ++c)
            p.push_back(static_cast<char>(rng.next_below(256)));
        prompts.push_back(std::move(p));
    }

    for (int B = 1; B <= cfg.num_experts; ++B) {
        RunConfig rc;
        rc.model = cfg;
        rc.block_size = B;
        LivePlatform platform;
        register_all(platform, rc);
        OrchestratorOptions opts;
        opts.rc = rc;
        OrchestratorCore core(opts, std::make_unique<LiveInvoker>(&platform));
        for (size_t i = 0; i < prompts.size(); ++i) {
            auto ids = tokenize(prompts[i]);
            Vec got = core.remote_forward(ids);
            Vec want = mono.forward(ids);
            expect(bit_equal(got, want),
                   "logits diverge at block size " + std::to_string(B) + ", prompt " +
                       std::to_string(i));
        }
        platform.shutdown();
    }
}

// ---- check 2: all four strategies generate identical texts ---------------

void check_strategy_equivalence() {
    const std::vector<std::string> strategies = {"baseline", "local", "shared", "private"};
    std::map<std::string, std::string> outputs;
    for (const auto& s : strategies) {
        std::string dir = g_work + "/strategy-" + s;
        std::vector<std::string> args = {
            "run",      "--strategy", s,        "--tenants", "6",    "--requests",
            "5",        "--max-new",  "8",      "--out",     dir,    "--quiet",
            "--window-ms", "10",      "--cold-start-ms", "50"};
        auto r = run_cli(args);
        expect(r.exit_code == 0, s + " run exited " + std::to_string(r.exit_code) +
                                     " (see " + dir + ")");
        json summary = load_summary(dir);
        expect(summary.value("ok", false), s + " run not ok (see " + dir + ")");
        expect(summary["requests"]["completed"] == 30, s + ": expected 30 rows");
        expect(summary["requests"]["oracle_mismatches"] == 0, s + ": oracle mismatch");
        auto text = read_file(dir + "/outputs.txt");
        expect(text.has_value() && !text->empty(), s + ": missing outputs.txt");
        outputs[s] = *text;
    }
    for (const auto& s : strategies)
        expect(outputs[s] == outputs["baseline"],
               "outputs of " + s + " differ from baseline");
}

// ---- check 3: residency scales with tenants only for the baseline --------

void check_residency_scaling() {
    ModelConfig cfg;
    uint64_t expert_all = expert_param_bytes_all(cfg);
    uint64_t full = full_param_bytes(cfg);

    for (int t : {1, 2, 4, 8}) {
        std::string dir = g_work + "/residency-baseline-" + std::to_string(t);
        auto r = run_cli({"run", "--strategy", "baseline", "--tenants", std::to_string(t),
                          "--requests", "2", "--max-new", "4", "--out", dir, "--quiet"});
        expect(r.exit_code == 0, "baseline T=" + std::to_string(t) + " failed");
        json s = load_summary(dir);
        expect(s.value("ok", false), "baseline T=" + std::to_string(t) + " not ok");
        uint64_t client_experts = s["residency"]["client_expert_param_bytes"];
        expect(client_experts == static_cast<uint64_t>(t) * expert_all,
               "baseline expert bytes at T=" + std::to_string(t) + ": got " +
                   std::to_string(client_experts) + ", want " +
                   std::to_string(t * expert_all));
    }

    std::map<int, json> shared;
    for (int t : {1, 2, 4, 6, 8}) {
        std::string dir = g_work + "/residency-shared-" + std::to_string(t);
        auto r = run_cli({"run", "--strategy", "shared", "--tenants", std::to_string(t),
                          "--requests", "5", "--max-new", "8", "--out", dir, "--quiet",
                          "--backend", "inproc", "--cold-start-ms", "0", "--max-replicas",
                          "1", "--idle-timeout-ms", "600000", "--window-ms", "10"});
        expect(r.exit_code == 0, "shared T=" + std::to_string(t) + " failed (see " + dir + ")");
        json s = load_summary(dir);
        expect(s.value("ok", false), "shared T=" + std::to_string(t) + " not ok");
        shared[t] = s["residency"];
    }

    uint64_t steady = shared[1]["worker_param_bytes"];
    for (const auto& [t, res] : shared) {
        uint64_t worker = res["worker_param_bytes"];
        expect(worker == steady, "shared worker bytes vary with tenants: T=" +
                                     std::to_string(t) + " holds " + std::to_string(worker) +
                                     " vs " + std::to_string(steady));
        uint64_t orch = res["orchestrator_param_bytes"];
        expect(orch == trunk_param_bytes(cfg), "orchestrator trunk bytes off at T=" +
                                                   std::to_string(t));
        uint64_t clients = res["client_param_bytes"];
        expect(clients == 0, "thin tenants should hold no parameters");
    }
    expect(steady == expert_all,
           "expected every expert block warm in steady state, resident " +
               std::to_string(steady) + " of " + std::to_string(expert_all));

    // At T=6 the shared per-tenant share must be under a third of a
    // baseline tenant, which always holds the full model.
    uint64_t shared_total = shared[6]["total_param_bytes"];
    expect(3 * shared_total < 6 * full,
           "per-tenant residency not under one third of baseline: shared total " +
               std::to_string(shared_total) + ", full model " + std::to_string(full));
}

// ---- check 4: scale to zero and exact cold start accounting --------------

void check_scale_to_zero() {
    ModelConfig cfg;
    RunConfig rc;
    rc.model = cfg;
    rc.block_size = 3;
    auto bm = pack_blocks(cfg, rc.block_size);

    SimPlatform sim;
    std::vector<std::shared_ptr<BlockHost>> hosts;
    for (const auto& e : bm.entries) {
        auto host = std::make_shared<BlockHost>(cfg, e.layer, e.block, bm);
        hosts.push_back(host);
        FunctionSpec spec;
        spec.name = e.name;
        spec.layer = e.layer;
        spec.block = e.block;
        spec.expert_begin = e.experts.front();
        spec.expert_end = e.experts.back() + 1;
        spec.idle_timeout_ms = 5000;
        spec.cold_start_ms = 200;
        sim.register_function(spec, [host](const std::string& payload) {
            auto out = host->handle_bytes(payload);
            if (!out.ok()) throw std::runtime_error(out.error);
            return out.value;
        });
    }

    OrchestratorOptions opts;
    opts.rc = rc;
    OrchestratorCore core(opts, std::make_unique<SimInvoker>(&sim, 5));
    Engine mono(make_full_store(cfg));

    auto first = tokenize("warm everything up");
    expect(bit_equal(core.remote_forward(first), mono.forward(first)),
           "first pass diverged from the reference");

    sim.advance(5000 + 200);
    for (const auto& e : bm.entries) {
        expect(sim.warm_replicas(e.name) == 0,
               e.name + " still warm after the idle timeout");
        expect(sim.alive_replicas(e.name) == 0,
               e.name + " still has replicas after the idle timeout");
    }

    auto before = sim.snapshot_counters();
    auto second = tokenize("and back from zero");
    expect(bit_equal(core.remote_forward(second), mono.forward(second)),
           "post-idle pass diverged from the reference");
    auto after = sim.snapshot_counters();

    uint64_t cold_delta_total = 0;
    uint64_t touched = 0;
    for (const auto& e : bm.entries) {
        uint64_t inv_delta = after.at(e.name).invocations - before.at(e.name).invocations;
        uint64_t cold_delta = after.at(e.name).cold_starts - before.at(e.name).cold_starts;
        cold_delta_total += cold_delta;
        if (inv_delta > 0) {
            ++touched;
            expect(cold_delta == 1, e.name + ": expected exactly one cold start, saw " +
                                        std::to_string(cold_delta));
        } else {
            expect(cold_delta == 0, e.name + ": cold start without an invocation");
        }
    }
    expect(touched > 0, "the post-idle request touched no expert blocks");
    expect(cold_delta_total == touched,
           "cold starts (" + std::to_string(cold_delta_total) +
               ") do not equal blocks touched (" + std::to_string(touched) + ")");
}

// ---- check 5: block-size sweep trends -------------------------------------

void check_block_size_sweep() {
    ModelConfig cfg;
    std::string dir = g_work + "/sweep";
    auto r = run_cli({"sweep", "--sizes", "1,2,3,4,6,8", "--strategy", "shared",
                      "--tenants", "6", "--requests", "5", "--max-new", "8", "--window-ms",
                      "0", "--backend", "inproc", "--cold-start-ms", "0",
                      "--idle-timeout-ms", "600000", "--out", dir},
                     480000);
    expect(r.exit_code == 0, "sweep exited " + std::to_string(r.exit_code) + " (see " +
                                 dir + ")");
    auto content = read_file(dir + "/sweep.json");
    expect(content.has_value(), "missing sweep.json");
    json sweep = json::parse(*content);

    std::vector<std::vector<uint64_t>> per_layer;  // run -> layer -> invocations
    std::vector<int> sizes;
    for (const auto& run : sweep["runs"]) {
        expect(run.value("ok", false),
               "sweep run B=" + run["block_size"].dump() + " not ok");
        sizes.push_back(run["block_size"].get<int>());
        per_layer.push_back(run["per_layer_invocations"].get<std::vector<uint64_t>>());

        // Warm block residency must be exactly (hosted experts) x (per-expert
        // bytes): linear in the block size, with the tail block pro-rated.
        int B = run["block_size"].get<int>();
        auto bm = pack_blocks(cfg, B);
        const auto& block_bytes = run["block_resident_bytes"];
        expect(block_bytes.size() == bm.entries.size(),
               "B=" + std::to_string(B) + ": expected every block warm, saw " +
                   std::to_string(block_bytes.size()) + " of " +
                   std::to_string(bm.entries.size()));
        for (const auto& e : bm.entries) {
            expect(block_bytes.contains(e.name), "B=" + std::to_string(B) +
                                                     ": no warm replica for " + e.name);
            uint64_t got = block_bytes[e.name];
            uint64_t want = e.experts.size() * expert_param_bytes_one(cfg);
            expect(got == want, e.name + " at B=" + std::to_string(B) + ": resident " +
                                    std::to_string(got) + ", want " + std::to_string(want));
        }
    }

    expect(sizes == std::vector<int>{1, 2, 3, 4, 6, 8}, "unexpected sweep sizes");
    for (size_t i = 1; i < per_layer.size(); ++i) {
        for (size_t l = 0; l < per_layer[i].size(); ++l) {
            expect(per_layer[i][l] <= per_layer[i - 1][l],
                   "layer " + std::to_string(l) + " invocations rose from B=" +
                       std::to_string(sizes[i - 1]) + " (" +
                       std::to_string(per_layer[i - 1][l]) + ") to B=" +
                       std::to_string(sizes[i]) + " (" + std::to_string(per_layer[i][l]) +
                       ")");
        }
    }
}

// ---- check 6: cross-tenant batching reduces invocations -------------------

void check_cross_tenant_batching() {
    ModelConfig cfg;
    RunConfig rc;
    rc.model = cfg;
    rc.block_size = 3;
    const int tenants = 6;
    const int requests = 5;
    const int max_new = 8;
    WorkloadSpec wspec;
    wspec.tenants = tenants;
    wspec.requests = requests;

    Engine mono(make_full_store(cfg));
    std::map<std::string, std::string> want;
    for (int t = 0; t < tenants; ++t)
        for (const auto& p : tenant_prompts(wspec, t))
            if (!want.count(p)) want[p] = mono.generate(p, max_new).text;

    auto drive = [&](std::function<OrchestratorCore&(int)> core_for) -> uint64_t {
        std::barrier gate(tenants);
        std::vector<std::thread> threads;
        std::vector<std::string> errors(tenants);
        for (int t = 0; t < tenants; ++t) {
            threads.emplace_back([&, t] {
                auto prompts = tenant_prompts(wspec, t);
                gate.arrive_and_wait();
                for (const auto& p : prompts) {
                    auto out = core_for(t).generate(p, max_new);
                    if (out.text != want.at(p)) {
                        errors[t] = "tenant " + std::to_string(t) + " diverged on \"" + p +
                                    "\"";
                        return;
                    }
                }
            });
        }
        for (auto& th : threads) th.join();
        for (const auto& e : errors) expect(e.empty(), e);
        return 0;
    };

    uint64_t shared_inv = 0;
    {
        LivePlatform platform;
        register_all(platform, rc);
        OrchestratorOptions opts;
        opts.rc = rc;
        opts.mode = "shared";
        opts.window_ms = 50;
        OrchestratorCore core(opts, std::make_unique<LiveInvoker>(&platform));
        drive([&](int) -> OrchestratorCore& { return core; });
        shared_inv = total_invocations(platform.snapshot_counters());
        platform.shutdown();
    }

    uint64_t private_inv = 0;
    {
        LivePlatform platform;
        register_all(platform, rc);
        std::vector<std::unique_ptr<OrchestratorCore>> cores;
        for (int t = 0; t < tenants; ++t) {
            OrchestratorOptions opts;
            opts.rc = rc;
            opts.mode = "private";
            opts.window_ms = 0;
            cores.push_back(std::make_unique<OrchestratorCore>(
                opts, std::make_unique<LiveInvoker>(&platform)));
        }
        drive([&](int t) -> OrchestratorCore& { return *cores[t]; });
        private_inv = total_invocations(platform.snapshot_counters());
        platform.shutdown();
    }

    expect(shared_inv < private_inv,
           "shared orchestrator issued " + std::to_string(shared_inv) +
               " invocations, private issued " + std::to_string(private_inv));
}

// ---- check 7: platform request conservation under random load -------------

void check_platform_conservation() {
    SimPlatform sim;
    struct FnCfg {
        const char* name;
        int max_replicas;
        int64_t idle_ms;
        int64_t cold_ms;
        int conc;
    };
    const std::vector<FnCfg> fns = {{"fn-a", 1, 500, 50, 1},
                                    {"fn-b", 2, 2000, 100, 2},
                                    {"fn-c", 3, 10000, 200, 4},
                                    {"fn-d", 4, 30000, 150, 3}};
    for (const auto& f : fns) {
        FunctionSpec spec;
        spec.name = f.name;
        spec.max_replicas = f.max_replicas;
        spec.idle_timeout_ms = f.idle_ms;
        spec.cold_start_ms = f.cold_ms;
        spec.concurrency_limit = f.conc;
        sim.register_function(spec, [](const std::string& payload) -> std::string {
            if (payload.find("boom") != std::string::npos)
                throw std::runtime_error("synthetic handler failure");
            return payload;
        });
    }

    const int kRequests = 10000;
    std::mt19937 rng(7);
    std::vector<uint64_t> ids;
    ids.reserve(kRequests);
    for (int i = 0; i < kRequests; ++i) {
        std::string fn = (rng() % 50 == 0) ? "ghost" : fns[rng() % fns.size()].name;
        std::string payload = (rng() % 10 == 0) ? "boom" : "work";
        int64_t service = static_cast<int64_t>(rng() % 150);
        int64_t deadline = (rng() % 5 == 0) ? static_cast<int64_t>(rng() % 400) : -1;
        ids.push_back(sim.submit(fn, payload, service, deadline));
        if (rng() % 3 == 0) sim.advance(static_cast<int64_t>(rng() % 300));
    }
    sim.run_until_idle();
    sim.advance(120000);  // all idle timeouts fire

    expect(sim.unresolved() == 0, "requests left unresolved");
    std::map<InvokeResult::Status, uint64_t> by_status;
    for (uint64_t id : ids) {
        const auto& rec = sim.record(id);
        expect(rec.resolved, "request " + std::to_string(id) + " never resolved");
        by_status[rec.result.status]++;
    }
    uint64_t accounted = 0;
    for (const auto& [st, n] : by_status) accounted += n;
    expect(accounted == kRequests, "status partition does not cover every request");
    expect(by_status[InvokeResult::Status::Ok] > 0, "no request succeeded");
    expect(by_status[InvokeResult::Status::Upstream] > 0, "no handler failure observed");
    expect(by_status[InvokeResult::Status::NotFound] > 0, "no unknown-function observed");

    // Replica cap and boot/retire balance, reconstructed from the event trace.
    std::map<std::string, int> alive, max_alive, boots, drains;
    std::map<std::string, uint64_t> dispatches;
    for (const auto& ev : sim.trace()) {
        if (ev.kind == "boot") {
            alive[ev.fn]++;
            max_alive[ev.fn] = std::max(max_alive[ev.fn], alive[ev.fn]);
            boots[ev.fn]++;
        }
        if (ev.kind == "drain" || ev.kind == "crash") {
            alive[ev.fn]--;
            drains[ev.fn]++;
        }
        if (ev.kind == "dispatch") dispatches[ev.fn]++;
    }
    auto counters = sim.snapshot_counters();
    for (const auto& f : fns) {
        expect(max_alive[f.name] <= f.max_replicas,
               std::string(f.name) + " exceeded its replica cap: " +
                   std::to_string(max_alive[f.name]));
        expect(counters.at(f.name).max_concurrent_replicas <=
                   static_cast<uint64_t>(f.max_replicas),
               std::string(f.name) + " counter exceeded its replica cap");
        expect(boots[f.name] == drains[f.name],
               std::string(f.name) + " leaked replicas: " + std::to_string(boots[f.name]) +
                   " boots vs " + std::to_string(drains[f.name]) + " drains");
        expect(sim.alive_replicas(f.name) == 0,
               std::string(f.name) + " still has replicas after the final drain");
        expect(counters.at(f.name).invocations == dispatches[f.name],
               std::string(f.name) + " invocation counter disagrees with the trace");
    }
}

// ---- check 8: float32 kernels against the float64 oracle ------------------

void check_numeric_kernels() {
    ModelConfig cfg;
    ParamStore store(cfg);
    for (int l = 0; l < cfg.num_layers; ++l) {
        std::string lp = "layer" + std::to_string(l) + "/";
        for (const char* name : {"norm_a", "router", "wq", "wk", "wv", "wo"})
            store.materialize(lp + name);
    }
    materialize_expert(store, 0, 0);
    std::mt19937 rng(2024);

    double worst_norm = 0.0;
    for (int it = 0; it < 1000; ++it) {
        Vec x = random_vec(rng, cfg.embed_dim);
        const Mat& g = store.get("layer" + std::to_string(it % cfg.num_layers) + "/norm_a");
        worst_norm = std::max(worst_norm, rel_err(rms_norm(x, g), rms_norm64(x, g)));
    }
    expect(worst_norm <= 1e-4, "rms_norm off by " + std::to_string(worst_norm));

    const Mat& w_gate = store.get("layer0/expert0/w_gate");
    const Mat& w_up = store.get("layer0/expert0/w_up");
    const Mat& w_down = store.get("layer0/expert0/w_down");
    double worst_ffn = 0.0;
    for (int it = 0; it < 1000; ++it) {
        Vec x = random_vec(rng, cfg.embed_dim);
        worst_ffn = std::max(worst_ffn, rel_err(expert_ffn(w_gate, w_up, w_down, x),
                                                expert_ffn64(w_gate, w_up, w_down, x)));
    }
    expect(worst_ffn <= 1e-4, "expert_ffn off by " + std::to_string(worst_ffn));

    double worst_attn = 0.0;
    for (int it = 0; it < 1000; ++it) {
        int layer = it % cfg.num_layers;
        int n = 1 + it % 6;
        std::vector<Vec> x;
        for (int t = 0; t < n; ++t) x.push_back(random_vec(rng, cfg.embed_dim));
        auto got = attention(store, layer, x);
        auto want = attention64(store, layer, x);
        for (int t = 0; t < n; ++t)
            worst_attn = std::max(worst_attn, rel_err(got[t], want[t]));
    }
    expect(worst_attn <= 1e-4, "attention off by " + std::to_string(worst_attn));

    for (int it = 0; it < 1000; ++it) {
        const Mat& router =
            store.get("layer" + std::to_string(it % cfg.num_layers) + "/router");
        Vec x = random_vec(rng, cfg.embed_dim);
        int k = 1 + it % cfg.num_experts;
        auto d = gate(router, x, k);

        Vec p = matvec(router, x);
        softmax(p.data(), static_cast<int>(p.size()));
        std::vector<int> order(p.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return p[a] > p[b]; });
        std::vector<int> sel(order.begin(), order.begin() + k);
        std::sort(sel.begin(), sel.end());
        expect(d.experts == sel, "gate selection disagrees with the sort oracle at case " +
                                     std::to_string(it));
        float sum = 0.0f;
        for (int e : sel) sum += p[e];
        for (size_t i = 0; i < sel.size(); ++i)
            expect(bits_of(d.weights[i]) == bits_of(p[sel[i]] / sum),
                   "gate weight diverges at case " + std::to_string(it));
    }
}

}  // namespace

int main() {
    struct Check {
        const char* name;
        void (*fn)();
    };
    const std::vector<Check> checks = {
        {"remote forward bit-equal to the reference for block sizes 1-8",
         check_remote_forward_equivalence},
        {"all four strategies generate identical texts", check_strategy_equivalence},
        {"expert residency scales with tenants only for the baseline",
         check_residency_scaling},
        {"idle functions scale to zero and restart with exact cold start counts",
         check_scale_to_zero},
        {"per-layer invocations never rise with block size; block bytes stay linear",
         check_block_size_sweep},
        {"cross-tenant batching strictly reduces platform invocations",
         check_cross_tenant_batching},
        {"10000 randomized requests conserve counters and respect replica caps",
         check_platform_conservation},
        {"float32 kernels match the float64 oracle within 1e-4",
         check_numeric_kernels},
    };

    {
        char tmpl[] = "/tmp/moeserve-acceptance-XXXXXX";
        char* dir = mkdtemp(tmpl);
        if (dir == nullptr) {
            std::fprintf(stderr, "cannot create scratch directory\n");
            return 1;
        }
        g_work = dir;
    }

    int failures = 0;
    for (const auto& check : checks) {
        auto t0 = std::chrono::steady_clock::now();
        std::string detail;
        bool ok = true;
        try {
            check.fn();
        } catch (const std::exception& e) {
            ok = false;
            detail = e.what();
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                          .count();
        if (ok) {
            std::printf("PASS  %s (%.1fs)\n", check.name, secs);
        } else {
            ++failures;
            std::printf("FAIL  %s (%.1fs)\n      %s\n", check.name, secs, detail.c_str());
        }
        std::fflush(stdout);
    }
    if (failures > 0)
        std::printf("%d of %zu checks failed; artifacts in %s\n", failures, checks.size(),
                    g_work.c_str());
    return failures;
}
