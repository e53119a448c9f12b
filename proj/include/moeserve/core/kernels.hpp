#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "moeserve/core/params.hpp"

// Numeric kernels. Every operation here has one pinned evaluation order so the
// same inputs produce the same f32 bits in every process, which is what makes
// remote expert execution checkable against a monolithic run. Dot products
// accumulate in f32 left to right; transcendentals go through double libm and
// round once to f32; rms_norm accumulates its mean of squares in double.
// Builds must keep fp contraction off for this to hold across inlining.

namespace moeserve {

inline float exp32(float x) { return static_cast<float>(std::exp(static_cast<double>(x))); }

inline float silu32(float x) {
  float e = exp32(-x);
  return x / (1.0f + e);
}

inline float dot_f32(const float* a, const float* b, int n) {
  float acc = 0.0f;
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

// y = M x for row-major M (rows, cols), x of length cols.
inline void matvec(const Mat& m, const float* x, float* y) {
  for (int r = 0; r < m.rows; ++r) y[r] = dot_f32(m.row(r), x, m.cols);
}

inline Vec matvec(const Mat& m, const Vec& x) {
  Vec y(static_cast<size_t>(m.rows));
  matvec(m, x.data(), y.data());
  return y;
}

// y = x M for row-major M (rows, cols), x of length rows. Used by attention,
// where projections multiply the hidden row vector from the left.
inline Vec vecmat(const float* x, const Mat& m) {
  Vec y(static_cast<size_t>(m.cols));
  for (int c = 0; c < m.cols; ++c) {
    float acc = 0.0f;
    for (int r = 0; r < m.rows; ++r) acc += x[r] * m.at(r, c);
    y[c] = acc;
  }
  return y;
}

// RMS norm with learned gain g: out_i = (x_i * g_i) / sqrt(mean(x^2) + eps).
// The mean of squares accumulates in double; the product and divide stay f32.
inline void rms_norm(const float* x, const float* g, int n, float* out) {
  double ss = 0.0;
  for (int i = 0; i < n; ++i)
    ss += static_cast<double>(x[i]) * static_cast<double>(x[i]);
  float denom = static_cast<float>(std::sqrt(ss / n + 1e-6));
  for (int i = 0; i < n; ++i) out[i] = (x[i] * g[i]) / denom;
}

inline Vec rms_norm(const Vec& x, const Mat& gain) {
  Vec out(x.size());
  rms_norm(x.data(), gain.row(0), static_cast<int>(x.size()), out.data());
  return out;
}

// Max-subtracted softmax in place.
inline void softmax(float* x, int n) {
  float mx = x[0];
  for (int i = 1; i < n; ++i)
    if (x[i] > mx) mx = x[i];
  float sum = 0.0f;
  for (int i = 0; i < n; ++i) {
    x[i] = exp32(x[i] - mx);
    sum += x[i];
  }
  for (int i = 0; i < n; ++i) x[i] /= sum;
}

// Expert FFN: y = W_down(silu(W_gate x) * (W_up x)).
inline Vec expert_ffn(const Mat& w_gate, const Mat& w_up, const Mat& w_down,
                      const Vec& x) {
  Vec g = matvec(w_gate, x);
  Vec u = matvec(w_up, x);
  for (size_t i = 0; i < g.size(); ++i) g[i] = silu32(g[i]) * u[i];
  return matvec(w_down, g);
}

struct GateDecision {
  std::vector<int> experts;   // ascending expert index
  std::vector<float> weights; // aligned with experts, sums to 1 in f32
};

// Router: logits = R x, softmax over all experts, pick the top_k by weight
// (ties broken toward the lower index), then renormalize the selected
// weights so they sum to one. The result lists experts in ascending order.
inline GateDecision gate(const Mat& router, const Vec& x, int top_k) {
  Vec logits = matvec(router, x);
  softmax(logits.data(), static_cast<int>(logits.size()));
  int n = static_cast<int>(logits.size());
  std::vector<int> selected;
  std::vector<char> taken(n, 0);
  for (int pick = 0; pick < top_k; ++pick) {
    int best = -1;
    for (int e = 0; e < n; ++e) {
      if (taken[e]) continue;
      if (best < 0 || logits[e] > logits[best]) best = e;
    }
    taken[best] = 1;
    selected.push_back(best);
  }
  std::sort(selected.begin(), selected.end());
  float sum = 0.0f;
  for (int e : selected) sum += logits[e];
  GateDecision d;
  d.experts = selected;
  for (int e : selected) d.weights.push_back(logits[e] / sum);
  return d;
}

}  // namespace moeserve
