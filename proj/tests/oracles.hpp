#pragma once

// Independent reference implementations used as test oracles. Nothing here calls
// into the library's numerics.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "speechrl/lm_core.hpp"

namespace oracle {

// Plain recursive edit distance (no memo); fine for sequences up to length ~6.
inline int edit_distance(const std::vector<std::string>& a, std::size_t i, const std::vector<std::string>& b,
                         std::size_t j) {
  if (i == 0) return static_cast<int>(j);
  if (j == 0) return static_cast<int>(i);
  const int sub = edit_distance(a, i - 1, b, j - 1) + (a[i - 1] == b[j - 1] ? 0 : 1);
  const int del = edit_distance(a, i - 1, b, j) + 1;
  const int ins = edit_distance(a, i, b, j - 1) + 1;
  return std::min({sub, del, ins});
}

inline int edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  return edit_distance(a, a.size(), b, b.size());
}

// All sequences of length 0..max_len over the alphabet.
inline std::vector<std::vector<std::string>> all_sequences(const std::vector<std::string>& alphabet, int max_len) {
  std::vector<std::vector<std::string>> out{{}};
  std::vector<std::vector<std::string>> frontier{{}};
  for (int len = 1; len <= max_len; ++len) {
    std::vector<std::vector<std::string>> next;
    for (const auto& s : frontier)
      for (const auto& w : alphabet) {
        auto t = s;
        t.push_back(w);
        next.push_back(t);
      }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

// Straight-line scalar forward pass of the transformer in double precision,
// written against the documented layout: weights [in, out], RMSNorm eps 1e-6,
// rotary base 10000 on consecutive pairs, tanh GELU, every query head attending
// to kv_heads shared key/value heads. With kv_heads == n_query_heads and each kv
// head a copy of the shared projection it is a textbook multi-head attention.
struct ScalarModel {
  int V, d, L, H, hd, f;
  std::vector<double> p;
  speechrl::ParamLayout layout;

  ScalarModel(const speechrl::ModelConfig& cfg, const std::vector<float>& params)
      : V(cfg.vocab_size), d(cfg.d_model), L(cfg.n_layers), H(cfg.n_query_heads), hd(cfg.head_dim),
        f(cfg.ffn_dim), p(params.begin(), params.end()), layout(cfg) {}

  double at(std::size_t off, int r, int c, int cols) const { return p[off + static_cast<std::size_t>(r) * cols + c]; }

  std::vector<double> rmsnorm(const std::vector<double>& x, std::size_t g) const {
    double ss = 0;
    for (double v : x) ss += v * v;
    const double r = 1.0 / std::sqrt(ss / d + 1e-6);
    std::vector<double> y(x.size());
    for (int i = 0; i < d; ++i) y[i] = x[i] * r * p[g + i];
    return y;
  }

  std::vector<double> linear(const std::vector<double>& x, std::size_t w, int in, int out) const {
    std::vector<double> y(out, 0.0);
    for (int o = 0; o < out; ++o)
      for (int i = 0; i < in; ++i) y[o] += x[i] * at(w, i, o, out);
    return y;
  }

  void rope(std::vector<double>& v, int pos) const {
    for (int i = 0; i < hd / 2; ++i) {
      const double th = pos * std::pow(10000.0, -2.0 * i / hd);
      const double a = v[2 * i], b = v[2 * i + 1];
      v[2 * i] = a * std::cos(th) - b * std::sin(th);
      v[2 * i + 1] = a * std::sin(th) + b * std::cos(th);
    }
  }

  static double gelu(double z) {
    return 0.5 * z * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (z + 0.044715 * z * z * z)));
  }

  // logits[t][v]
  std::vector<std::vector<double>> forward(const std::vector<int>& tokens) const {
    const int n = static_cast<int>(tokens.size());
    std::vector<std::vector<double>> x(n, std::vector<double>(d));
    for (int t = 0; t < n; ++t)
      for (int i = 0; i < d; ++i) x[t][i] = at(layout.tok_emb, tokens[t], i, d);
    for (int l = 0; l < L; ++l) {
      const auto& Ly = layout.layers[l];
      std::vector<std::vector<double>> q(n), k(n), v(n);
      for (int t = 0; t < n; ++t) {
        const auto h = rmsnorm(x[t], Ly.attn_norm);
        q[t] = linear(h, Ly.wq, d, d);
        k[t] = linear(h, Ly.wk, d, hd);
        v[t] = linear(h, Ly.wv, d, hd);
      }
      // Per-head copies of the shared key/value head, rotated per position.
      std::vector<std::vector<std::vector<double>>> qh(H, std::vector<std::vector<double>>(n)), kh = qh, vh = qh;
      for (int h = 0; h < H; ++h)
        for (int t = 0; t < n; ++t) {
          qh[h][t].assign(q[t].begin() + h * hd, q[t].begin() + (h + 1) * hd);
          kh[h][t] = k[t];
          vh[h][t] = v[t];
          rope(qh[h][t], t);
          rope(kh[h][t], t);
        }
      for (int t = 0; t < n; ++t) {
        std::vector<double> o(d, 0.0);
        for (int h = 0; h < H; ++h) {
          std::vector<double> s(t + 1);
          double mx = -1e300;
          for (int u = 0; u <= t; ++u) {
            double dot = 0;
            for (int j = 0; j < hd; ++j) dot += qh[h][t][j] * kh[h][u][j];
            s[u] = dot / std::sqrt(static_cast<double>(hd));
            mx = std::max(mx, s[u]);
          }
          double z = 0;
          for (int u = 0; u <= t; ++u) z += std::exp(s[u] - mx);
          for (int u = 0; u <= t; ++u) {
            const double a = std::exp(s[u] - mx) / z;
            for (int j = 0; j < hd; ++j) o[h * hd + j] += a * vh[h][u][j];
          }
        }
        const auto proj = linear(o, Ly.wo, d, d);
        for (int i = 0; i < d; ++i) x[t][i] += proj[i];
      }
      for (int t = 0; t < n; ++t) {
        const auto h = rmsnorm(x[t], Ly.ffn_norm);
        auto z = linear(h, Ly.w1, d, f);
        for (auto& zz : z) zz = gelu(zz);
        const auto y = linear(z, Ly.w2, f, d);
        for (int i = 0; i < d; ++i) x[t][i] += y[i];
      }
    }
    std::vector<std::vector<double>> logits(n);
    for (int t = 0; t < n; ++t) logits[t] = linear(rmsnorm(x[t], layout.final_norm), layout.out, d, V);
    return logits;
  }
};

}  // namespace oracle
