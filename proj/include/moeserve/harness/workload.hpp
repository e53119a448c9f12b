#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "moeserve/util/hash.hpp"

namespace moeserve {

struct WorkloadSpec {
  uint64_t seed = 42;
  int tenants = 6;
  int requests = 5;
  double skew = 1.0;   // Zipf exponent over the letter alphabet; 0 = uniform
  int min_len = 4;
  int max_len = 12;
};

// Synthetic prompt stream for one tenant, fully determined by (seed, tenant).
// Letters are drawn Zipf-skewed so some byte patterns (and therefore some
// experts) run hot.
inline std::vector<std::string> tenant_prompts(const WorkloadSpec& spec, int tenant) {
  SplitMix64 rng(fnv1a64("w" + std::to_string(spec.seed) + "/t" + std::to_string(tenant)));

  constexpr int kAlphabet = 26;
  double weights[kAlphabet];
  double total = 0.0;
  for (int r = 0; r < kAlphabet; ++r) {
    weights[r] = 1.0 / std::pow(static_cast<double>(r + 1), spec.skew);
    total += weights[r];
  }

  auto draw_letter = [&]() {
    double u = rng.next_unit() * total;
    double acc = 0.0;
    for (int r = 0; r < kAlphabet; ++r) {
      acc += weights[r];
      if (u < acc) return static_cast<char>('a' + r);
    }
    return static_cast<char>('a' + kAlphabet - 1);
  };

  std::vector<std::string> prompts;
  prompts.reserve(spec.requests);
  for (int i = 0; i < spec.requests; ++i) {
    int len = spec.min_len +
              static_cast<int>(rng.next_below(
                  static_cast<uint64_t>(spec.max_len - spec.min_len + 1)));
    std::string p;
    p.reserve(len);
    for (int c = 0; c < len; ++c) p.push_back(draw_letter());
    prompts.push_back(std::move(p));
  }
  return prompts;
}

inline std::vector<std::vector<std::string>> make_workload(const WorkloadSpec& spec) {
  std::vector<std::vector<std::string>> all;
  all.reserve(spec.tenants);
  for (int t = 0; t < spec.tenants; ++t) all.push_back(tenant_prompts(spec, t));
  return all;
}

}  // namespace moeserve
