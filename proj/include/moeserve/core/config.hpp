#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace moeserve {

inline constexpr int kVocabSize = 258;  // 256 bytes + BOS + EOS
inline constexpr int kBosId = 256;
inline constexpr int kEosId = 257;

// Model dimensions. All weights are derived deterministically from
// (model_seed, parameter path), so an instance of this struct fully
// identifies a model.
struct ModelConfig {
  uint64_t model_seed = 0;
  int num_layers = 4;
  int embed_dim = 32;
  int ffn_dim = 64;
  int num_experts = 8;
  int num_shared = 1;
  int top_k = 2;
  int max_seq = 64;

  int vocab_size() const { return kVocabSize; }

  void validate() const {
    if (num_layers < 1) throw std::invalid_argument("num_layers must be >= 1");
    if (embed_dim < 1) throw std::invalid_argument("embed_dim must be >= 1");
    if (ffn_dim < 1) throw std::invalid_argument("ffn_dim must be >= 1");
    if (num_experts < 1) throw std::invalid_argument("num_experts must be >= 1");
    if (num_shared < 0) throw std::invalid_argument("num_shared must be >= 0");
    if (top_k < 1 || top_k > num_experts)
      throw std::invalid_argument("top_k must satisfy 1 <= k <= num_experts");
    if (max_seq < 1) throw std::invalid_argument("max_seq must be >= 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

// (layer, block) -> function name and hosted expert range.
struct BlockEntry {
  int layer = 0;
  int block = 0;
  std::string name;
  std::vector<int> experts;  // sorted, contiguous

  bool operator==(const BlockEntry&) const = default;
};

struct BlockMap {
  int block_size = 0;
  int num_layers = 0;
  int num_experts = 0;
  std::vector<BlockEntry> entries;  // ordered by (layer, block)

  int blocks_per_layer() const {
    return (num_experts + block_size - 1) / block_size;
  }
  int block_for_expert(int expert) const { return expert / block_size; }

  const BlockEntry& entry(int layer, int block) const {
    int bpl = blocks_per_layer();
    if (layer < 0 || layer >= num_layers || block < 0 || block >= bpl)
      throw std::out_of_range("no such (layer, block) in BlockMap");
    return entries[static_cast<size_t>(layer) * bpl + block];
  }

  bool operator==(const BlockMap&) const = default;
};

inline std::string block_function_name(int layer, int block) {
  return "exp-l" + std::to_string(layer) + "-b" + std::to_string(block);
}

// Partition each layer's experts into contiguous blocks of size B
// (last block may be short).
inline BlockMap pack_blocks(const ModelConfig& cfg, int block_size) {
  if (block_size < 1 || block_size > cfg.num_experts)
    throw std::invalid_argument("block_size must satisfy 1 <= B <= num_experts");
  BlockMap bm;
  bm.block_size = block_size;
  bm.num_layers = cfg.num_layers;
  bm.num_experts = cfg.num_experts;
  int bpl = (cfg.num_experts + block_size - 1) / block_size;
  for (int l = 0; l < cfg.num_layers; ++l) {
    for (int b = 0; b < bpl; ++b) {
      BlockEntry e;
      e.layer = l;
      e.block = b;
      e.name = block_function_name(l, b);
      int lo = b * block_size;
      int hi = std::min((b + 1) * block_size, cfg.num_experts);
      for (int x = lo; x < hi; ++x) e.experts.push_back(x);
      bm.entries.push_back(std::move(e));
    }
  }
  return bm;
}

// ---------------------------------------------------------------------------
// Canonical text configuration document. One "key=value" per line, fixed key
// order, '#' starts a comment. block_size rides along so a single file
// describes both the model and its expert partitioning.

struct RunConfig {
  ModelConfig model;
  int block_size = 3;
};

inline std::string serialize_config(const RunConfig& rc) {
  std::ostringstream os;
  os << "model_seed=" << rc.model.model_seed << "\n"
     << "num_layers=" << rc.model.num_layers << "\n"
     << "embed_dim=" << rc.model.embed_dim << "\n"
     << "ffn_dim=" << rc.model.ffn_dim << "\n"
     << "num_experts=" << rc.model.num_experts << "\n"
     << "num_shared=" << rc.model.num_shared << "\n"
     << "top_k=" << rc.model.top_k << "\n"
     << "max_seq=" << rc.model.max_seq << "\n"
     << "block_size=" << rc.block_size << "\n";
  return os.str();
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig rc;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    // trim
    size_t b = line.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    size_t e = line.find_last_not_of(" \t");
    line = line.substr(b, e - b + 1);
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key=value");
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    auto as_u64 = [&] {
      size_t pos = 0;
      uint64_t v = std::stoull(val, &pos);
      if (pos != val.size()) throw std::invalid_argument("bad value for " + key);
      return v;
    };
    auto as_int = [&] {
      size_t pos = 0;
      long v = std::stol(val, &pos);
      if (pos != val.size()) throw std::invalid_argument("bad value for " + key);
      return static_cast<int>(v);
    };
    if (key == "model_seed") rc.model.model_seed = as_u64();
    else if (key == "num_layers") rc.model.num_layers = as_int();
    else if (key == "embed_dim") rc.model.embed_dim = as_int();
    else if (key == "ffn_dim") rc.model.ffn_dim = as_int();
    else if (key == "num_experts") rc.model.num_experts = as_int();
    else if (key == "num_shared") rc.model.num_shared = as_int();
    else if (key == "top_k") rc.model.top_k = as_int();
    else if (key == "max_seq") rc.model.max_seq = as_int();
    else if (key == "block_size") rc.block_size = as_int();
    else throw std::invalid_argument("unknown config key: " + key);
  }
  rc.model.validate();
  if (rc.block_size < 1 || rc.block_size > rc.model.num_experts)
    throw std::invalid_argument("block_size out of range");
  return rc;
}

// ---------------------------------------------------------------------------
// Canonical BlockMap text format.
//
//   block_size=3
//   num_layers=4
//   num_experts=8
//   entry layer=0 block=0 name=exp-l0-b0 experts=0-2
//   ...
//
// Expert lists are contiguous by construction and written as "lo-hi"
// inclusive ranges (single-expert blocks as "lo-lo").

inline std::string serialize_blockmap(const BlockMap& bm) {
  std::ostringstream os;
  os << "block_size=" << bm.block_size << "\n"
     << "num_layers=" << bm.num_layers << "\n"
     << "num_experts=" << bm.num_experts << "\n";
  for (const auto& e : bm.entries) {
    os << "entry layer=" << e.layer << " block=" << e.block << " name=" << e.name
       << " experts=" << e.experts.front() << "-" << e.experts.back() << "\n";
  }
  return os.str();
}

inline BlockMap parse_blockmap(const std::string& text) {
  BlockMap bm;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("entry ", 0) == 0) {
      BlockEntry e;
      int lo = -1, hi = -1;
      std::istringstream ls(line.substr(6));
      std::string tok;
      while (ls >> tok) {
        size_t eq = tok.find('=');
        if (eq == std::string::npos)
          throw std::invalid_argument("bad blockmap entry token: " + tok);
        std::string k = tok.substr(0, eq), v = tok.substr(eq + 1);
        if (k == "layer") e.layer = std::stoi(v);
        else if (k == "block") e.block = std::stoi(v);
        else if (k == "name") e.name = v;
        else if (k == "experts") {
          size_t dash = v.find('-');
          if (dash == std::string::npos)
            throw std::invalid_argument("bad experts range: " + v);
          lo = std::stoi(v.substr(0, dash));
          hi = std::stoi(v.substr(dash + 1));
        } else {
          throw std::invalid_argument("unknown blockmap entry key: " + k);
        }
      }
      if (lo < 0 || hi < lo) throw std::invalid_argument("bad experts range");
      for (int x = lo; x <= hi; ++x) e.experts.push_back(x);
      bm.entries.push_back(std::move(e));
    } else {
      size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("bad blockmap line: " + line);
      std::string k = line.substr(0, eq), v = line.substr(eq + 1);
      if (k == "block_size") bm.block_size = std::stoi(v);
      else if (k == "num_layers") bm.num_layers = std::stoi(v);
      else if (k == "num_experts") bm.num_experts = std::stoi(v);
      else throw std::invalid_argument("unknown blockmap key: " + k);
    }
  }
  return bm;
}

}  // namespace moeserve
