#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "moeserve/core/config.hpp"
#include "moeserve/util/hash.hpp"

namespace moeserve {

// Row-major f32 matrix. Vectors are stored as (1, n).
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c) {}

  float* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
  const float* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
  float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  size_t bytes() const { return data.size() * sizeof(float); }
};

using Vec = std::vector<float>;

struct ParamKey {
  std::string path;
  int rows = 0;
  int cols = 0;
};

// The expected shape for every valid parameter path of a model, or nullopt
// for paths that do not belong to the model.
inline std::optional<std::pair<int, int>> param_shape(const ModelConfig& cfg,
                                                      const std::string& path) {
  int d = cfg.embed_dim, f = cfg.ffn_dim;
  if (path == "embed") return {{kVocabSize, d}};
  if (path == "pos") return {{cfg.max_seq, d}};
  if (path == "norm_f") return {{1, d}};
  if (path.rfind("layer", 0) != 0) return std::nullopt;
  size_t slash = path.find('/');
  if (slash == std::string::npos) return std::nullopt;
  int layer;
  try {
    size_t pos = 0;
    layer = std::stoi(path.substr(5, slash - 5), &pos);
    if (pos != slash - 5) return std::nullopt;
  } catch (...) {
    return std::nullopt;
  }
  if (layer < 0 || layer >= cfg.num_layers) return std::nullopt;
  std::string rest = path.substr(slash + 1);
  if (rest == "wq" || rest == "wk" || rest == "wv" || rest == "wo") return {{d, d}};
  if (rest == "router") return {{cfg.num_experts, d}};
  if (rest == "norm_a" || rest == "norm_m") return {{1, d}};
  // expert{e}/{w_gate|w_up|w_down} and shared{s}/...
  size_t slash2 = rest.find('/');
  if (slash2 == std::string::npos) return std::nullopt;
  std::string owner = rest.substr(0, slash2);
  std::string mat = rest.substr(slash2 + 1);
  int limit;
  size_t digits;
  if (owner.rfind("expert", 0) == 0) {
    limit = cfg.num_experts;
    digits = 6;
  } else if (owner.rfind("shared", 0) == 0) {
    limit = cfg.num_shared;
    digits = 6;
  } else {
    return std::nullopt;
  }
  int idx;
  try {
    size_t pos = 0;
    idx = std::stoi(owner.substr(digits), &pos);
    if (pos != owner.size() - digits || owner.size() == digits) return std::nullopt;
  } catch (...) {
    return std::nullopt;
  }
  if (idx < 0 || idx >= limit) return std::nullopt;
  if (mat == "w_gate" || mat == "w_up") return {{f, d}};
  if (mat == "w_down") return {{d, f}};
  return std::nullopt;
}

// Deterministic weight materialization: FNV-1a-64 of "m{seed}/{path}" seeds a
// SplitMix64 stream; element t (row-major) maps the t-th output to
// (2u-1)/sqrt(fan_in) with u = (z >> 40) / 2^24, rounded to f32. fan_in = cols.
inline Mat derive_param(const ModelConfig& cfg, const ParamKey& key) {
  auto shape = param_shape(cfg, key.path);
  if (!shape) throw std::invalid_argument("unknown parameter path: " + key.path);
  if (shape->first != key.rows || shape->second != key.cols)
    throw std::invalid_argument("shape mismatch for " + key.path);
  uint64_t h = fnv1a64("m" + std::to_string(cfg.model_seed) + "/" + key.path);
  SplitMix64 sm(h);
  double scale = 1.0 / std::sqrt(static_cast<double>(key.cols));
  Mat m(key.rows, key.cols);
  for (auto& v : m.data) {
    double u = sm.next_unit();
    v = static_cast<float>((2.0 * u - 1.0) * scale);
  }
  return m;
}

inline Mat derive_param(const ModelConfig& cfg, const std::string& path) {
  auto shape = param_shape(cfg, path);
  if (!shape) throw std::invalid_argument("unknown parameter path: " + path);
  return derive_param(cfg, ParamKey{path, shape->first, shape->second});
}

// ---------------------------------------------------------------------------
// Byte accounting. "Expert bytes" counts routed-expert FFN parameters only;
// "trunk bytes" is everything the orchestrator holds (embeddings, attention,
// routers, norms, and shared experts).

inline size_t expert_param_bytes_one(const ModelConfig& cfg) {
  return (2ull * cfg.ffn_dim * cfg.embed_dim + 1ull * cfg.embed_dim * cfg.ffn_dim) *
         sizeof(float);
}

inline size_t expert_param_bytes_all(const ModelConfig& cfg) {
  return expert_param_bytes_one(cfg) * cfg.num_experts * cfg.num_layers;
}

inline size_t trunk_param_bytes(const ModelConfig& cfg) {
  size_t d = cfg.embed_dim;
  size_t per_layer = 4 * d * d                       // wq wk wv wo
                     + static_cast<size_t>(cfg.num_experts) * d  // router
                     + 2 * d;                        // norm_a, norm_m
  size_t bytes = (static_cast<size_t>(kVocabSize) * d   // embed
                  + static_cast<size_t>(cfg.max_seq) * d  // pos
                  + d                                   // norm_f
                  + per_layer * cfg.num_layers) *
                 sizeof(float);
  bytes += expert_param_bytes_one(cfg) * cfg.num_shared * cfg.num_layers;
  return bytes;
}

inline size_t full_param_bytes(const ModelConfig& cfg) {
  return trunk_param_bytes(cfg) + expert_param_bytes_all(cfg);
}

// Enumerates every ParamKey of the model, each exactly once.
inline std::vector<ParamKey> param_keys(const ModelConfig& cfg) {
  std::vector<ParamKey> keys;
  auto add = [&](const std::string& path) {
    auto s = *param_shape(cfg, path);
    keys.push_back(ParamKey{path, s.first, s.second});
  };
  add("embed");
  add("pos");
  for (int l = 0; l < cfg.num_layers; ++l) {
    std::string p = "layer" + std::to_string(l) + "/";
    add(p + "wq");
    add(p + "wk");
    add(p + "wv");
    add(p + "wo");
    add(p + "router");
    add(p + "norm_a");
    add(p + "norm_m");
    for (int e = 0; e < cfg.num_experts; ++e) {
      std::string ep = p + "expert" + std::to_string(e) + "/";
      add(ep + "w_gate");
      add(ep + "w_up");
      add(ep + "w_down");
    }
    for (int s = 0; s < cfg.num_shared; ++s) {
      std::string sp = p + "shared" + std::to_string(s) + "/";
      add(sp + "w_gate");
      add(sp + "w_up");
      add(sp + "w_down");
    }
  }
  add("norm_f");
  return keys;
}

// Immutable parameter cache. Materialize everything needed up front, then
// reads are lock-free and safe to share across threads.
class ParamStore {
 public:
  explicit ParamStore(const ModelConfig& cfg) : cfg_(cfg) {}

  const ModelConfig& config() const { return cfg_; }

  void materialize(const std::string& path) {
    if (cache_.count(path)) return;
    Mat m = derive_param(cfg_, path);
    resident_bytes_ += m.bytes();
    cache_.emplace(path, std::move(m));
  }

  const Mat& get(const std::string& path) const {
    auto it = cache_.find(path);
    if (it == cache_.end())
      throw std::logic_error("parameter not materialized: " + path);
    return it->second;
  }

  bool has(const std::string& path) const { return cache_.count(path) > 0; }
  size_t resident_bytes() const { return resident_bytes_; }

 private:
  ModelConfig cfg_;
  std::unordered_map<std::string, Mat> cache_;
  size_t resident_bytes_ = 0;
};

// Orchestrator-side parameters: everything except routed experts.
inline void materialize_trunk(ParamStore& store) {
  const ModelConfig& cfg = store.config();
  store.materialize("embed");
  store.materialize("pos");
  for (int l = 0; l < cfg.num_layers; ++l) {
    std::string p = "layer" + std::to_string(l) + "/";
    for (const char* n : {"wq", "wk", "wv", "wo", "router", "norm_a", "norm_m"})
      store.materialize(p + n);
    for (int s = 0; s < cfg.num_shared; ++s) {
      std::string sp = p + "shared" + std::to_string(s) + "/";
      store.materialize(sp + "w_gate");
      store.materialize(sp + "w_up");
      store.materialize(sp + "w_down");
    }
  }
  store.materialize("norm_f");
}

inline void materialize_expert(ParamStore& store, int layer, int expert) {
  std::string p =
      "layer" + std::to_string(layer) + "/expert" + std::to_string(expert) + "/";
  store.materialize(p + "w_gate");
  store.materialize(p + "w_up");
  store.materialize(p + "w_down");
}

inline void materialize_full(ParamStore& store) {
  materialize_trunk(store);
  const ModelConfig& cfg = store.config();
  for (int l = 0; l < cfg.num_layers; ++l)
    for (int e = 0; e < cfg.num_experts; ++e) materialize_expert(store, l, e);
}

}  // namespace moeserve
