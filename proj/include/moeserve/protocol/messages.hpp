#pragma once

#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "moeserve/util/base64.hpp"

// Wire format for expert invocation. One JSON envelope per batch; f32
// vectors travel as base64 of their little-endian IEEE-754 bytes, so a
// vector that crosses the wire comes back with identical bit patterns.
//
// Request keys, in order:  v, model_seed, layer, block, items
//   item keys:             token_ref, expert, activation
// Response keys, in order: v, items
//   item keys:             token_ref, expert, output
//
// v is the protocol version and must be 1. Decoding is strict: unknown or
// missing keys, wrong types, a non-canonical base64 payload, or a payload
// whose byte length is not a multiple of 4 all yield a structured error.

namespace moeserve {

using ordered_json = nlohmann::ordered_json;

struct ExpertWorkItem {
  uint64_t token_ref = 0;
  int expert = 0;
  std::vector<float> activation;

  bool operator==(const ExpertWorkItem& o) const {
    if (token_ref != o.token_ref || expert != o.expert ||
        activation.size() != o.activation.size())
      return false;
    return std::memcmp(activation.data(), o.activation.data(),
                       activation.size() * sizeof(float)) == 0;
  }
};

struct ExpertBatchRequest {
  uint64_t model_seed = 0;
  int layer = 0;
  int block = 0;
  std::vector<ExpertWorkItem> items;

  bool operator==(const ExpertBatchRequest& o) const {
    return model_seed == o.model_seed && layer == o.layer && block == o.block &&
           items == o.items;
  }
};

struct ExpertResultItem {
  uint64_t token_ref = 0;
  int expert = 0;
  std::vector<float> output;

  bool operator==(const ExpertResultItem& o) const {
    if (token_ref != o.token_ref || expert != o.expert ||
        output.size() != o.output.size())
      return false;
    return std::memcmp(output.data(), o.output.data(),
                       output.size() * sizeof(float)) == 0;
  }
};

struct ExpertBatchResponse {
  std::vector<ExpertResultItem> items;

  bool operator==(const ExpertBatchResponse& o) const { return items == o.items; }
};

template <typename T>
struct Decoded {
  T value{};
  std::string error;

  bool ok() const { return error.empty(); }
  static Decoded fail(std::string msg) {
    Decoded d;
    d.error = std::move(msg);
    return d;
  }
};

inline std::string encode_f32_vector(const std::vector<float>& v) {
  std::string bytes(v.size() * 4, '\0');
  for (size_t i = 0; i < v.size(); ++i) {
    uint32_t bits;
    std::memcpy(&bits, &v[i], 4);
    bytes[4 * i + 0] = static_cast<char>(bits & 0xff);
    bytes[4 * i + 1] = static_cast<char>((bits >> 8) & 0xff);
    bytes[4 * i + 2] = static_cast<char>((bits >> 16) & 0xff);
    bytes[4 * i + 3] = static_cast<char>((bits >> 24) & 0xff);
  }
  return base64_encode(bytes);
}

inline Decoded<std::vector<float>> decode_f32_vector(const std::string& b64) {
  auto bytes = base64_decode(b64);
  if (!bytes) return Decoded<std::vector<float>>::fail("malformed base64");
  if (bytes->size() % 4 != 0)
    return Decoded<std::vector<float>>::fail("vector byte length not a multiple of 4");
  std::vector<float> v(bytes->size() / 4);
  for (size_t i = 0; i < v.size(); ++i) {
    uint32_t bits = (static_cast<uint32_t>(static_cast<unsigned char>((*bytes)[4 * i + 0]))) |
                    (static_cast<uint32_t>(static_cast<unsigned char>((*bytes)[4 * i + 1])) << 8) |
                    (static_cast<uint32_t>(static_cast<unsigned char>((*bytes)[4 * i + 2])) << 16) |
                    (static_cast<uint32_t>(static_cast<unsigned char>((*bytes)[4 * i + 3])) << 24);
    std::memcpy(&v[i], &bits, 4);
  }
  Decoded<std::vector<float>> d;
  d.value = std::move(v);
  return d;
}

inline std::string encode_request(const ExpertBatchRequest& req) {
  if (req.items.empty())
    throw std::invalid_argument("batch request must contain at least one item");
  ordered_json j;
  j["v"] = 1;
  j["model_seed"] = req.model_seed;
  j["layer"] = req.layer;
  j["block"] = req.block;
  j["items"] = ordered_json::array();
  for (const auto& it : req.items) {
    ordered_json ji;
    ji["token_ref"] = it.token_ref;
    ji["expert"] = it.expert;
    ji["activation"] = encode_f32_vector(it.activation);
    j["items"].push_back(std::move(ji));
  }
  return j.dump();
}

namespace detail {

inline bool keys_exactly(const ordered_json& j, std::initializer_list<const char*> keys) {
  if (!j.is_object() || j.size() != keys.size()) return false;
  for (const char* k : keys)
    if (!j.contains(k)) return false;
  return true;
}

inline bool as_u64(const ordered_json& j, uint64_t& out) {
  if (j.is_number_unsigned()) {
    out = j.get<uint64_t>();
    return true;
  }
  if (j.is_number_integer() && j.get<int64_t>() >= 0) {
    out = static_cast<uint64_t>(j.get<int64_t>());
    return true;
  }
  return false;
}

inline bool as_count(const ordered_json& j, int& out) {
  if (!j.is_number_integer() && !j.is_number_unsigned()) return false;
  int64_t v = j.get<int64_t>();
  if (v < 0 || v > std::numeric_limits<int>::max()) return false;
  out = static_cast<int>(v);
  return true;
}

}  // namespace detail

inline Decoded<ExpertBatchRequest> decode_request(const std::string& bytes) {
  using R = Decoded<ExpertBatchRequest>;
  ordered_json j = ordered_json::parse(bytes, nullptr, false);
  if (j.is_discarded()) return R::fail("malformed envelope: not valid JSON");
  if (!detail::keys_exactly(j, {"v", "model_seed", "layer", "block", "items"}))
    return R::fail("malformed envelope: unexpected request keys");
  uint64_t v = 0;
  if (!detail::as_u64(j["v"], v)) return R::fail("malformed envelope: bad version field");
  if (v != 1) return R::fail("unsupported protocol version " + std::to_string(v));
  ExpertBatchRequest req;
  if (!detail::as_u64(j["model_seed"], req.model_seed))
    return R::fail("malformed envelope: bad model_seed");
  if (!detail::as_count(j["layer"], req.layer))
    return R::fail("malformed envelope: bad layer");
  if (!detail::as_count(j["block"], req.block))
    return R::fail("malformed envelope: bad block");
  if (!j["items"].is_array() || j["items"].empty())
    return R::fail("malformed envelope: items must be a non-empty array");
  std::unordered_set<uint64_t> seen;
  for (const auto& ji : j["items"]) {
    if (!detail::keys_exactly(ji, {"token_ref", "expert", "activation"}))
      return R::fail("malformed envelope: unexpected item keys");
    ExpertWorkItem it;
    if (!detail::as_u64(ji["token_ref"], it.token_ref))
      return R::fail("malformed envelope: bad token_ref");
    if (!detail::as_count(ji["expert"], it.expert))
      return R::fail("malformed envelope: bad expert index");
    if (!ji["activation"].is_string())
      return R::fail("malformed envelope: activation must be a string");
    auto vec = decode_f32_vector(ji["activation"].get<std::string>());
    if (!vec.ok()) return R::fail("activation: " + vec.error);
    it.activation = std::move(vec.value);
    if (!seen.insert(it.token_ref).second)
      return R::fail("duplicate token_ref in batch");
    req.items.push_back(std::move(it));
  }
  R r;
  r.value = std::move(req);
  return r;
}

inline std::string encode_response(const ExpertBatchResponse& resp) {
  ordered_json j;
  j["v"] = 1;
  j["items"] = ordered_json::array();
  for (const auto& it : resp.items) {
    ordered_json ji;
    ji["token_ref"] = it.token_ref;
    ji["expert"] = it.expert;
    ji["output"] = encode_f32_vector(it.output);
    j["items"].push_back(std::move(ji));
  }
  return j.dump();
}

inline Decoded<ExpertBatchResponse> decode_response(const std::string& bytes) {
  using R = Decoded<ExpertBatchResponse>;
  ordered_json j = ordered_json::parse(bytes, nullptr, false);
  if (j.is_discarded()) return R::fail("malformed envelope: not valid JSON");
  if (!detail::keys_exactly(j, {"v", "items"}))
    return R::fail("malformed envelope: unexpected response keys");
  uint64_t v = 0;
  if (!detail::as_u64(j["v"], v)) return R::fail("malformed envelope: bad version field");
  if (v != 1) return R::fail("unsupported protocol version " + std::to_string(v));
  if (!j["items"].is_array())
    return R::fail("malformed envelope: items must be an array");
  ExpertBatchResponse resp;
  for (const auto& ji : j["items"]) {
    if (!detail::keys_exactly(ji, {"token_ref", "expert", "output"}))
      return R::fail("malformed envelope: unexpected item keys");
    ExpertResultItem it;
    if (!detail::as_u64(ji["token_ref"], it.token_ref))
      return R::fail("malformed envelope: bad token_ref");
    if (!detail::as_count(ji["expert"], it.expert))
      return R::fail("malformed envelope: bad expert index");
    if (!ji["output"].is_string())
      return R::fail("malformed envelope: output must be a string");
    auto vec = decode_f32_vector(ji["output"].get<std::string>());
    if (!vec.ok()) return R::fail("output: " + vec.error);
    it.output = std::move(vec.value);
    resp.items.push_back(std::move(it));
  }
  R r;
  r.value = std::move(resp);
  return r;
}

}  // namespace moeserve
