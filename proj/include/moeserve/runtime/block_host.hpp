#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "moeserve/core/config.hpp"
#include "moeserve/core/kernels.hpp"
#include "moeserve/core/params.hpp"
#include "moeserve/protocol/messages.hpp"

namespace moeserve {

// The body of one expert-block function: holds exactly its hosted experts'
// parameters, derived at construction (so weight materialization is part of
// the cold-start cost), and evaluates batched work items statelessly.
class BlockHost {
 public:
  BlockHost(const ModelConfig& cfg, int layer, int block, const BlockMap& bm)
      : cfg_(cfg), layer_(layer), block_(block), store_(cfg) {
    hosted_ = bm.entry(layer, block).experts;  // throws on unknown block
    for (int e : hosted_) materialize_expert(store_, layer, e);
  }

  int layer() const { return layer_; }
  int block() const { return block_; }
  const std::vector<int>& hosted() const { return hosted_; }
  uint64_t resident_bytes() const { return store_.resident_bytes(); }
  uint64_t requests_served() const { return requests_served_.load(); }

  bool hosts(int expert) const {
    for (int e : hosted_)
      if (e == expert) return true;
    return false;
  }

  // Typed handler. The error string is empty on success.
  Decoded<ExpertBatchResponse> handle(const ExpertBatchRequest& req) {
    using R = Decoded<ExpertBatchResponse>;
    if (req.model_seed != cfg_.model_seed)
      return R::fail("model_seed mismatch: host has " + std::to_string(cfg_.model_seed));
    if (req.layer != layer_ || req.block != block_)
      return R::fail("request addressed to layer " + std::to_string(req.layer) +
                     " block " + std::to_string(req.block) + ", host is layer " +
                     std::to_string(layer_) + " block " + std::to_string(block_));
    for (const auto& it : req.items) {
      if (!hosts(it.expert))
        return R::fail("expert " + std::to_string(it.expert) + " not hosted by this block");
      if (static_cast<int>(it.activation.size()) != cfg_.embed_dim)
        return R::fail("activation has " + std::to_string(it.activation.size()) +
                       " dims, model has " + std::to_string(cfg_.embed_dim));
    }
    ExpertBatchResponse resp;
    resp.items.reserve(req.items.size());
    for (const auto& it : req.items) {
      std::string p =
          "layer" + std::to_string(layer_) + "/expert" + std::to_string(it.expert) + "/";
      ExpertResultItem out;
      out.token_ref = it.token_ref;
      out.expert = it.expert;
      out.output = expert_ffn(store_.get(p + "w_gate"), store_.get(p + "w_up"),
                              store_.get(p + "w_down"), it.activation);
      resp.items.push_back(std::move(out));
    }
    requests_served_.fetch_add(1);
    R r;
    r.value = std::move(resp);
    return r;
  }

  // Wire-level handler: decode, evaluate, encode. Never throws on bad input.
  Decoded<std::string> handle_bytes(const std::string& payload) {
    using R = Decoded<std::string>;
    auto req = decode_request(payload);
    if (!req.ok()) return R::fail(req.error);
    auto resp = handle(req.value);
    if (!resp.ok()) return R::fail(resp.error);
    R r;
    r.value = encode_response(resp.value);
    return r;
  }

 private:
  ModelConfig cfg_;
  int layer_;
  int block_;
  std::vector<int> hosted_;
  ParamStore store_;
  std::atomic<uint64_t> requests_served_{0};
};

}  // namespace moeserve
