#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <moeserve/core/kernels.hpp>
#include <moeserve/core/model.hpp>
#include <moeserve/core/params.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

using namespace moeserve;

namespace {

uint32_t bits_of(float f) {
    uint32_t u;
    std::memcpy(&u, &f, sizeof(u));
    return u;
}

Vec random_vec(std::mt19937& rng, int n, float lo = -2.0f, float hi = 2.0f) {
    std::uniform_real_distribution<float> dist(lo, hi);
    Vec v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

// Largest element deviation relative to the output's own magnitude. Guards
// against per-element cancellation blowing up a pure relative measure.
double rel_err(const Vec& got, const std::vector<double>& want) {
    double scale = 1e-6;
    for (double w : want) scale = std::max(scale, std::abs(w));
    double worst = 0.0;
    for (size_t i = 0; i < got.size(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(got[i]) - want[i]) / scale);
    return worst;
}

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

std::vector<double> widen(const Vec& v) {
    return std::vector<double>(v.begin(), v.end());
}

std::vector<double> rms_norm64(const Vec& x, const Mat& gain) {
    double ss = 0.0;
    for (float v : x) ss += static_cast<double>(v) * v;
    double denom = std::sqrt(ss / static_cast<double>(x.size()) + 1e-6);
    std::vector<double> out(x.size());
    for (size_t i = 0; i < x.size(); ++i)
        out[i] = static_cast<double>(x[i]) * static_cast<double>(gain.at(0, static_cast<int>(i))) / denom;
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

}  // namespace

TEST_CASE("exp32 and silu32 round through double libm") {
    CHECK(bits_of(exp32(1.0f)) == bits_of(static_cast<float>(std::exp(1.0))));
    CHECK(bits_of(exp32(-3.5f)) == bits_of(static_cast<float>(std::exp(-3.5))));
    CHECK(silu32(0.0f) == 0.0f);
    float x = 1.25f;
    CHECK(silu32(x) == x / (1.0f + exp32(-x)));
}

TEST_CASE("dot_f32 accumulates left to right") {
    float a[3] = {1e8f, 1.0f, -1e8f};
    float b[3] = {1.0f, 1.0f, 1.0f};
    // (1e8 + 1) collapses to 1e8 in f32, so the strict left-to-right sum is 0.
    CHECK(dot_f32(a, b, 3) == 0.0f);
}

TEST_CASE("matvec and vecmat basic shapes") {
    Mat m(2, 3);
    // [[1 2 3], [4 5 6]]
    for (int i = 0; i < 6; ++i) m.data[i] = static_cast<float>(i + 1);
    Vec x = {1.0f, 1.0f, 1.0f};
    Vec y = matvec(m, x);
    REQUIRE(y.size() == 2);
    CHECK(y[0] == 6.0f);
    CHECK(y[1] == 15.0f);
    Vec z2 = {1.0f, 1.0f};
    Vec z = vecmat(z2.data(), m);
    REQUIRE(z.size() == 3);
    CHECK(z[0] == 5.0f);
    CHECK(z[1] == 7.0f);
    CHECK(z[2] == 9.0f);
}

TEST_CASE("rms_norm zero input gives zero output") {
    Mat gain(1, 8);
    for (auto& g : gain.data) g = 1.0f;
    Vec x(8, 0.0f);
    Vec y = rms_norm(x, gain);
    for (float v : y) CHECK(v == 0.0f);
}

TEST_CASE("rms_norm of ones with unit gain") {
    Mat gain(1, 16);
    for (auto& g : gain.data) g = 1.0f;
    Vec x(16, 1.0f);
    Vec y = rms_norm(x, gain);
    float want = 1.0f / static_cast<float>(std::sqrt(1.0 + 1e-6));
    for (float v : y) CHECK(v == doctest::Approx(want).epsilon(1e-6));
}

TEST_CASE("rms_norm matches f64 oracle on 1000 random inputs") {
    std::mt19937 rng(7);
    Mat gain(1, 32);
    ModelConfig cfg;
    ParamStore store(cfg);
    store.materialize("layer0/norm_a");
    const Mat& g = store.get("layer0/norm_a");
    double worst = 0.0;
    for (int it = 0; it < 1000; ++it) {
        Vec x = random_vec(rng, 32);
        Vec y = rms_norm(x, g);
        auto want = rms_norm64(x, g);
        worst = std::max(worst, rel_err(y, want));
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("softmax of equal inputs is uniform and large inputs do not overflow") {
    Vec x(4, 123.0f);
    softmax(x.data(), 4);
    for (float v : x) CHECK(v == 0.25f);
    Vec big = {1000.0f, 1000.0f};
    softmax(big.data(), 2);
    CHECK(big[0] == 0.5f);
    CHECK(big[1] == 0.5f);
    Vec mix = {0.0f, -std::numeric_limits<float>::infinity()};
    softmax(mix.data(), 2);
    CHECK(mix[0] == 1.0f);
    CHECK(mix[1] == 0.0f);
}

TEST_CASE("gate with two experts and k=2 keeps the softmax weights") {
    std::mt19937 rng(11);
    ModelConfig cfg;
    Mat router(2, 8);
    for (auto& w : router.data) w = std::uniform_real_distribution<float>(-1, 1)(rng);
    Vec x = random_vec(rng, 8);
    auto d = gate(router, x, 2);
    REQUIRE(d.experts == std::vector<int>{0, 1});
    Vec p = matvec(router, x);
    softmax(p.data(), 2);
    CHECK(d.weights[0] == doctest::Approx(p[0]).epsilon(1e-6));
    CHECK(d.weights[1] == doctest::Approx(p[1]).epsilon(1e-6));
    CHECK(d.weights[0] + d.weights[1] == doctest::Approx(1.0f).epsilon(1e-6));
}

TEST_CASE("gate breaks ties toward the lower expert index") {
    Mat router(4, 8);  // all-zero rows: every expert gets the same probability
    Vec x(8, 0.5f);
    auto d1 = gate(router, x, 1);
    CHECK(d1.experts == std::vector<int>{0});
    CHECK(d1.weights == std::vector<float>{1.0f});
    auto d3 = gate(router, x, 3);
    CHECK(d3.experts == std::vector<int>{0, 1, 2});
}

TEST_CASE("gate matches an argsort oracle on 1000 random cases") {
    std::mt19937 rng(23);
    ModelConfig cfg;
    ParamStore store(cfg);
    for (int l = 0; l < cfg.num_layers; ++l)
        store.materialize("layer" + std::to_string(l) + "/router");
    for (int it = 0; it < 1000; ++it) {
        const Mat& router = store.get("layer" + std::to_string(it % cfg.num_layers) + "/router");
        Vec x = random_vec(rng, cfg.embed_dim);
        int k = 1 + it % cfg.num_experts;
        auto d = gate(router, x, k);

        Vec p = matvec(router, x);
        softmax(p.data(), static_cast<int>(p.size()));
        std::vector<int> order(p.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return p[a] > p[b]; });
        std::vector<int> want(order.begin(), order.begin() + k);
        std::sort(want.begin(), want.end());

        REQUIRE(d.experts == want);
        float sum = 0.0f;
        for (int e : want) sum += p[e];
        for (size_t i = 0; i < want.size(); ++i)
            CHECK(bits_of(d.weights[i]) == bits_of(p[want[i]] / sum));
        float total = 0.0f;
        for (float w : d.weights) total += w;
        CHECK(total == doctest::Approx(1.0f).epsilon(1e-6));
        CHECK(std::is_sorted(d.experts.begin(), d.experts.end()));
    }
}

TEST_CASE("expert_ffn of the zero vector is zero") {
    ModelConfig cfg;
    ParamStore store(cfg);
    materialize_expert(store, 0, 0);
    Vec x(cfg.embed_dim, 0.0f);
    Vec y = expert_ffn(store.get("layer0/expert0/w_gate"), store.get("layer0/expert0/w_up"),
                       store.get("layer0/expert0/w_down"), x);
    for (float v : y) CHECK(v == 0.0f);
}

TEST_CASE("expert_ffn is bit-deterministic") {
    ModelConfig cfg;
    ParamStore store(cfg);
    materialize_expert(store, 2, 5);
    std::mt19937 rng(3);
    Vec x = random_vec(rng, cfg.embed_dim);
    Vec a = expert_ffn(store.get("layer2/expert5/w_gate"), store.get("layer2/expert5/w_up"),
                       store.get("layer2/expert5/w_down"), x);
    Vec b = expert_ffn(store.get("layer2/expert5/w_gate"), store.get("layer2/expert5/w_up"),
                       store.get("layer2/expert5/w_down"), x);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(bits_of(a[i]) == bits_of(b[i]));
}

TEST_CASE("expert_ffn matches f64 oracle on 1000 random inputs") {
    ModelConfig cfg;
    ParamStore store(cfg);
    materialize_full(store);
    std::mt19937 rng(17);
    double worst = 0.0;
    for (int it = 0; it < 1000; ++it) {
        int l = it % cfg.num_layers;
        int e = (it / cfg.num_layers) % cfg.num_experts;
        std::string p = "layer" + std::to_string(l) + "/expert" + std::to_string(e) + "/";
        Vec x = random_vec(rng, cfg.embed_dim);
        Vec y = expert_ffn(store.get(p + "w_gate"), store.get(p + "w_up"),
                           store.get(p + "w_down"), x);
        auto want = expert_ffn64(store.get(p + "w_gate"), store.get(p + "w_up"),
                                 store.get(p + "w_down"), x);
        worst = std::max(worst, rel_err(y, want));
    }
    CHECK(worst <= 1e-4);
}

TEST_CASE("single-token attention is the value row through the output projection") {
    ModelConfig cfg;
    ParamStore store(cfg);
    materialize_trunk(store);
    std::mt19937 rng(5);
    Vec x = random_vec(rng, cfg.embed_dim);
    auto out = attention(store, 1, {x});
    Vec value = vecmat(x.data(), store.get("layer1/wv"));
    Vec want = vecmat(value.data(), store.get("layer1/wo"));
    REQUIRE(out.size() == 1);
    REQUIRE(out[0].size() == want.size());
    for (size_t i = 0; i < want.size(); ++i) CHECK(bits_of(out[0][i]) == bits_of(want[i]));
}

TEST_CASE("attention is causal: appending tokens never changes earlier rows") {
    ModelConfig cfg;
    ParamStore store(cfg);
    materialize_trunk(store);
    std::mt19937 rng(9);
    std::vector<Vec> xs;
    for (int t = 0; t < 5; ++t) xs.push_back(random_vec(rng, cfg.embed_dim));
    auto full = attention(store, 0, xs);
    for (int n = 1; n < 5; ++n) {
        std::vector<Vec> prefix(xs.begin(), xs.begin() + n);
        auto part = attention(store, 0, prefix);
        for (int t = 0; t < n; ++t)
            for (int i = 0; i < cfg.embed_dim; ++i)
                CHECK(bits_of(part[t][i]) == bits_of(full[t][i]));
    }
}

TEST_CASE("attention matches f64 oracle on 1000 random inputs") {
    ModelConfig cfg;
    ParamStore store(cfg);
    materialize_trunk(store);
    std::mt19937 rng(31);
    double worst = 0.0;
    for (int it = 0; it < 1000; ++it) {
        int layer = it % cfg.num_layers;
        int n = 1 + it % 4;
        std::vector<Vec> xs;
        for (int t = 0; t < n; ++t) xs.push_back(random_vec(rng, cfg.embed_dim));
        auto got = attention(store, layer, xs);
        auto want = attention64(store, layer, xs);
        for (int t = 0; t < n; ++t) worst = std::max(worst, rel_err(got[t], want[t]));
    }
    CHECK(worst <= 1e-4);
}

TEST_CASE("moe_layer with k=1 and no shared experts is a pure expert output") {
    ModelConfig cfg;
    cfg.top_k = 1;
    cfg.num_shared = 0;
    ParamStore store(cfg);
    materialize_full(store);
    std::mt19937 rng(13);
    Vec x = random_vec(rng, cfg.embed_dim);
    GateDecision d = gate(store.get("layer0/router"), x, 1);
    REQUIRE(d.experts.size() == 1);
    CHECK(d.weights[0] == 1.0f);
    Vec got = moe_layer(store, 0, x, 1, [&](int layer, int e, const Vec& xin) {
        std::string p = "layer" + std::to_string(layer) + "/expert" + std::to_string(e) + "/";
        return expert_ffn(store.get(p + "w_gate"), store.get(p + "w_up"),
                          store.get(p + "w_down"), xin);
    });
    std::string p = "layer0/expert" + std::to_string(d.experts[0]) + "/";
    Vec want = expert_ffn(store.get(p + "w_gate"), store.get(p + "w_up"),
                          store.get(p + "w_down"), x);
    for (size_t i = 0; i < want.size(); ++i) CHECK(bits_of(got[i]) == bits_of(want[i]));
}

TEST_CASE("moe_combine order is fixed regardless of completion order") {
    // moe_combine consumes results positionally, so delivering the same
    // results array must always produce the same bits; a shuffled evaluation
    // schedule that fills the array by index cannot change the outcome.
    ModelConfig cfg;
    ParamStore store(cfg);
    materialize_full(store);
    std::mt19937 rng(19);
    Vec x = random_vec(rng, cfg.embed_dim);
    GateDecision d = gate(store.get("layer1/router"), x, cfg.top_k);
    std::vector<Vec> routed(d.experts.size());
    std::vector<Vec> shared;
    shared.push_back(expert_ffn(store.get("layer1/shared0/w_gate"),
                                store.get("layer1/shared0/w_up"),
                                store.get("layer1/shared0/w_down"), x));
    auto eval_one = [&](size_t j) {
        std::string p = "layer1/expert" + std::to_string(d.experts[j]) + "/";
        routed[j] = expert_ffn(store.get(p + "w_gate"), store.get(p + "w_up"),
                               store.get(p + "w_down"), x);
    };
    std::vector<size_t> order(d.experts.size());
    std::iota(order.begin(), order.end(), 0);

    Vec first;
    for (int trial = 0; trial < 10; ++trial) {
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t j : order) eval_one(j);
        Vec h = x;
        moe_combine(h, shared, d, routed);
        if (trial == 0) {
            first = h;
        } else {
            for (size_t i = 0; i < h.size(); ++i) CHECK(bits_of(h[i]) == bits_of(first[i]));
        }
    }
}
