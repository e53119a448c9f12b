#pragma once

#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "moeserve/core/config.hpp"
#include "moeserve/core/kernels.hpp"
#include "moeserve/core/params.hpp"

namespace moeserve {

// --------------------------------------------------------------------------
// Tokenizer: byte identity plus BOS/EOS. Token ids 0..255 are the byte
// values, 256 is BOS, 257 is EOS.

inline std::vector<int> tokenize(const std::string& text) {
  std::vector<int> ids;
  ids.reserve(text.size() + 1);
  ids.push_back(kBosId);
  for (unsigned char c : text) ids.push_back(static_cast<int>(c));
  return ids;
}

// Renders byte tokens; BOS and EOS produce nothing.
inline std::string detokenize(const std::vector<int>& ids) {
  std::string out;
  for (int id : ids)
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
  return out;
}

inline int argmax(const Vec& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// --------------------------------------------------------------------------
// Routed expert evaluation is pluggable: the monolithic engine computes
// experts in process, the serving engine ships activations to functions.
// Either way the per-call output must be the bit-identical expert_ffn result.

struct ExpertCall {
  int slot = 0;    // token position within the current forward pass
  int expert = 0;  // routed expert index
  Vec activation;  // post-norm input, embed_dim floats
};

class ExpertBackend {
 public:
  virtual ~ExpertBackend() = default;
  // Evaluates all routed experts for one layer. Result i corresponds to
  // calls[i] and has embed_dim floats.
  virtual std::vector<Vec> eval_layer(int layer, const std::vector<ExpertCall>& calls) = 0;
};

class LocalExpertBackend : public ExpertBackend {
 public:
  explicit LocalExpertBackend(std::shared_ptr<const ParamStore> store)
      : store_(std::move(store)) {}

  std::vector<Vec> eval_layer(int layer, const std::vector<ExpertCall>& calls) override {
    std::vector<Vec> out;
    out.reserve(calls.size());
    for (const auto& c : calls) {
      std::string p =
          "layer" + std::to_string(layer) + "/expert" + std::to_string(c.expert) + "/";
      out.push_back(expert_ffn(store_->get(p + "w_gate"), store_->get(p + "w_up"),
                               store_->get(p + "w_down"), c.activation));
    }
    return out;
  }

 private:
  std::shared_ptr<const ParamStore> store_;
};

// --------------------------------------------------------------------------
// MoE combination. Shared expert outputs add first in ascending index order,
// then routed outputs scaled by their gate weight in ascending expert order,
// all into a zero accumulator that is added to the residual at the end. This
// order is part of the numeric contract; every execution path uses it.

inline void moe_combine(Vec& h, const std::vector<Vec>& shared_outs,
                        const GateDecision& decision,
                        const std::vector<Vec>& routed_outs) {
  Vec acc(h.size(), 0.0f);
  for (const Vec& y : shared_outs)
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += y[i];
  for (size_t j = 0; j < routed_outs.size(); ++j) {
    float w = decision.weights[j];
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += w * routed_outs[j][i];
  }
  for (size_t i = 0; i < h.size(); ++i) h[i] += acc[i];
}

// Single-token MoE layer against a per-expert callable. The callable may be
// evaluated in any order; the combination order is fixed, so results are
// independent of completion order.
template <typename ExpertEval>
Vec moe_layer(const ParamStore& store, int layer, const Vec& x_norm, int top_k,
              ExpertEval&& expert_eval) {
  const ModelConfig& cfg = store.config();
  std::string lp = "layer" + std::to_string(layer) + "/";
  GateDecision d = gate(store.get(lp + "router"), x_norm, top_k);
  std::vector<Vec> shared_outs;
  for (int s = 0; s < cfg.num_shared; ++s) {
    std::string sp = lp + "shared" + std::to_string(s) + "/";
    shared_outs.push_back(expert_ffn(store.get(sp + "w_gate"), store.get(sp + "w_up"),
                                     store.get(sp + "w_down"), x_norm));
  }
  std::vector<Vec> routed;
  for (int e : d.experts) routed.push_back(expert_eval(layer, e, x_norm));
  Vec out(x_norm.size(), 0.0f);
  moe_combine(out, shared_outs, d, routed);
  return out;
}

// --------------------------------------------------------------------------
// Single-head causal attention over the whole prefix: Q=xWq, K=xWk, V=xWv,
// scores QK^T/sqrt(d) with future positions masked, row softmax, context
// projected through Wo. No KV cache; generation recomputes the prefix.

inline std::vector<Vec> attention(const ParamStore& store, int layer,
                                  const std::vector<Vec>& x) {
  const ModelConfig& cfg = store.config();
  int n = static_cast<int>(x.size());
  int d = cfg.embed_dim;
  std::string lp = "layer" + std::to_string(layer) + "/";
  const Mat& wq = store.get(lp + "wq");
  const Mat& wk = store.get(lp + "wk");
  const Mat& wv = store.get(lp + "wv");
  const Mat& wo = store.get(lp + "wo");

  std::vector<Vec> q(n), k(n), v(n);
  for (int t = 0; t < n; ++t) {
    q[t] = vecmat(x[t].data(), wq);
    k[t] = vecmat(x[t].data(), wk);
    v[t] = vecmat(x[t].data(), wv);
  }
  float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(d)));
  std::vector<Vec> out(n);
  Vec scores(n);
  for (int t = 0; t < n; ++t) {
    for (int u = 0; u < n; ++u)
      scores[u] = u > t ? -std::numeric_limits<float>::infinity()
                        : dot_f32(q[t].data(), k[u].data(), d) * scale;
    softmax(scores.data(), n);
    Vec ctx(d);
    for (int i = 0; i < d; ++i) {
      float acc = 0.0f;
      for (int u = 0; u < n; ++u) acc += scores[u] * v[u][i];
      ctx[i] = acc;
    }
    out[t] = vecmat(ctx.data(), wo);
  }
  return out;
}

// --------------------------------------------------------------------------
// Engine: the full forward pass.

class Engine {
 public:
  Engine(std::shared_ptr<const ParamStore> store, ExpertBackend* backend = nullptr)
      : store_(std::move(store)), backend_(backend) {
    if (backend_ == nullptr) {
      owned_backend_ = std::make_unique<LocalExpertBackend>(store_);
      backend_ = owned_backend_.get();
    }
  }

  const ModelConfig& config() const { return store_->config(); }

  // Logits for the last position of ids.
  Vec forward(const std::vector<int>& ids) { return forward_rows(ids).back(); }

  // Logits for every position.
  std::vector<Vec> forward_rows(const std::vector<int>& ids) {
    const ModelConfig& cfg = store_->config();
    int n = static_cast<int>(ids.size());
    if (n == 0) throw std::invalid_argument("empty token sequence");
    if (n > cfg.max_seq) throw std::invalid_argument("sequence exceeds max_seq");
    const Mat& emb = store_->get("embed");
    const Mat& pos = store_->get("pos");
    std::vector<Vec> h(n, Vec(cfg.embed_dim));
    for (int t = 0; t < n; ++t) {
      if (ids[t] < 0 || ids[t] >= kVocabSize)
        throw std::invalid_argument("token id out of range");
      const float* e = emb.row(ids[t]);
      const float* p = pos.row(t);
      for (int i = 0; i < cfg.embed_dim; ++i) h[t][i] = e[i] + p[i];
    }
    for (int l = 0; l < cfg.num_layers; ++l) layer_pass(l, h);
    const Mat& nf = store_->get("norm_f");
    std::vector<Vec> logits(n);
    for (int t = 0; t < n; ++t) {
      Vec xf = rms_norm(h[t], nf);
      Vec row(kVocabSize);
      for (int v = 0; v < kVocabSize; ++v)
        row[v] = dot_f32(xf.data(), emb.row(v), cfg.embed_dim);
      logits[t] = std::move(row);
    }
    return logits;
  }

  struct GenResult {
    std::vector<int> new_ids;  // generated continuation, EOS excluded
    std::string text;          // rendered bytes of new_ids
  };

  // Greedy decoding: argmax with ties to the lower id, stop on EOS, on
  // max_new tokens, or when the context window is full.
  GenResult generate(const std::string& prompt, int max_new) {
    std::vector<int> ids = tokenize(prompt);
    GenResult r;
    for (int step = 0; step < max_new; ++step) {
      if (static_cast<int>(ids.size()) >= config().max_seq) break;
      int next = argmax(forward(ids));
      if (next == kEosId) break;
      ids.push_back(next);
      r.new_ids.push_back(next);
    }
    r.text = detokenize(r.new_ids);
    return r;
  }

 private:
  void layer_pass(int l, std::vector<Vec>& h) {
    const ModelConfig& cfg = store_->config();
    int n = static_cast<int>(h.size());
    std::string lp = "layer" + std::to_string(l) + "/";
    const Mat& norm_a = store_->get(lp + "norm_a");
    const Mat& norm_m = store_->get(lp + "norm_m");

    std::vector<Vec> xn(n);
    for (int t = 0; t < n; ++t) xn[t] = rms_norm(h[t], norm_a);
    std::vector<Vec> att = attention(*store_, l, xn);
    for (int t = 0; t < n; ++t)
      for (int i = 0; i < cfg.embed_dim; ++i) h[t][i] += att[t][i];

    const Mat& router = store_->get(lp + "router");
    std::vector<Vec> xm(n);
    std::vector<GateDecision> decisions(n);
    std::vector<ExpertCall> calls;
    for (int t = 0; t < n; ++t) {
      xm[t] = rms_norm(h[t], norm_m);
      decisions[t] = gate(router, xm[t], cfg.top_k);
      for (int e : decisions[t].experts) calls.push_back(ExpertCall{t, e, xm[t]});
    }
    std::vector<Vec> routed = backend_->eval_layer(l, calls);
    if (routed.size() != calls.size())
      throw std::runtime_error("expert backend returned wrong result count");

    size_t cursor = 0;
    for (int t = 0; t < n; ++t) {
      std::vector<Vec> shared_outs;
      for (int s = 0; s < cfg.num_shared; ++s) {
        std::string sp = lp + "shared" + std::to_string(s) + "/";
        shared_outs.push_back(expert_ffn(store_->get(sp + "w_gate"),
                                         store_->get(sp + "w_up"),
                                         store_->get(sp + "w_down"), xm[t]));
      }
      std::vector<Vec> routed_t(routed.begin() + cursor,
                                routed.begin() + cursor + decisions[t].experts.size());
      cursor += decisions[t].experts.size();
      moe_combine(h[t], shared_outs, decisions[t], routed_t);
    }
  }

  std::shared_ptr<const ParamStore> store_;
  ExpertBackend* backend_;
  std::unique_ptr<LocalExpertBackend> owned_backend_;
};

// Convenience constructor for a fully local engine.
inline std::shared_ptr<ParamStore> make_full_store(const ModelConfig& cfg) {
  auto store = std::make_shared<ParamStore>(cfg);
  materialize_full(*store);
  return store;
}

inline std::shared_ptr<ParamStore> make_trunk_store(const ModelConfig& cfg) {
  auto store = std::make_shared<ParamStore>(cfg);
  materialize_trunk(*store);
  return store;
}

}  // namespace moeserve
