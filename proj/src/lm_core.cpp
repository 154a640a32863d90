#include "speechrl/lm_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "speechrl/kernels.hpp"

namespace speechrl {

namespace {

constexpr double kNormEps = 1e-6;
constexpr double kRopeBase = 10000.0;

template <class T>
std::span<const T> view(std::span<const T> p, std::size_t off, std::size_t n) {
  return p.subspan(off, n);
}

template <class T>
void rmsnorm_forward(std::span<const T> x, std::span<const T> g, int n, int d, std::span<T> y, std::span<T> rinv) {
  for (int t = 0; t < n; ++t) {
    const T* xr = x.data() + static_cast<std::size_t>(t) * d;
    T ss = 0;
    for (int i = 0; i < d; ++i) ss += xr[i] * xr[i];
    const T r = T(1) / std::sqrt(ss / d + T(kNormEps));
    rinv[static_cast<std::size_t>(t)] = r;
    T* yr = y.data() + static_cast<std::size_t>(t) * d;
    for (int i = 0; i < d; ++i) yr[i] = xr[i] * r * g[static_cast<std::size_t>(i)];
  }
}

// Accumulates into dx and dg.
template <class T>
void rmsnorm_backward(std::span<const T> x, std::span<const T> g, std::span<const T> rinv, std::span<const T> dy, int n,
                      int d, std::span<T> dx, std::span<T> dg) {
  for (int t = 0; t < n; ++t) {
    const std::size_t row = static_cast<std::size_t>(t) * d;
    const T r = rinv[static_cast<std::size_t>(t)];
    T s = 0;
    for (int i = 0; i < d; ++i) {
      s += dy[row + i] * g[static_cast<std::size_t>(i)] * x[row + i];
      dg[static_cast<std::size_t>(i)] += dy[row + i] * x[row + i] * r;
    }
    const T c = r * r * s / d;
    for (int i = 0; i < d; ++i) dx[row + i] += r * (dy[row + i] * g[static_cast<std::size_t>(i)] - x[row + i] * c);
  }
}

// Rotates consecutive pairs of each head_dim block; sign=-1 applies the inverse.
template <class T>
void apply_rope(std::span<T> x, int n, int heads, int hd, std::span<const T> cos_t, std::span<const T> sin_t, T sign) {
  const int half = hd / 2;
  for (int t = 0; t < n; ++t)
    for (int h = 0; h < heads; ++h) {
      T* v = x.data() + (static_cast<std::size_t>(t) * heads + h) * hd;
      for (int i = 0; i < half; ++i) {
        const T c = cos_t[static_cast<std::size_t>(t) * half + i];
        const T s = sign * sin_t[static_cast<std::size_t>(t) * half + i];
        const T a = v[2 * i], b = v[2 * i + 1];
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
      }
    }
}

template <class T>
T gelu(T z) {
  const T k = T(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * z * (T(1) + std::tanh(k * (z + T(0.044715) * z * z * z)));
}

template <class T>
T gelu_grad(T z) {
  const T k = T(0.7978845608028654);
  const T u = k * (z + T(0.044715) * z * z * z);
  const T th = std::tanh(u);
  return T(0.5) * (T(1) + th) + T(0.5) * z * (T(1) - th * th) * k * (T(1) + T(3 * 0.044715) * z * z);
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < kNumReserved + 1) throw ArgumentError("ModelConfig: vocab_size too small");
  if (d_model < 1 || n_layers < 0 || n_query_heads < 1 || head_dim < 2 || ffn_dim < 1 || max_seq_len < 2)
    throw ArgumentError("ModelConfig: non-positive dimension");
  if (head_dim % 2 != 0) throw ArgumentError("ModelConfig: head_dim must be even for rotary embeddings");
  if (d_model != n_query_heads * head_dim) throw ArgumentError("ModelConfig: d_model must equal n_query_heads * head_dim");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ArgumentError("ModelConfig: dropout_rate must be in [0,1)");
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t v = static_cast<std::size_t>(vocab_size), d = static_cast<std::size_t>(d_model),
                    hd = static_cast<std::size_t>(head_dim), f = static_cast<std::size_t>(ffn_dim);
  const std::size_t per_layer = d + d * d + 2 * d * hd + d * d + d + 2 * d * f;
  return v * d + static_cast<std::size_t>(n_layers) * per_layer + d + d * v;
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.d_model, hd = cfg.head_dim, f = cfg.ffn_dim, v = cfg.vocab_size;
  std::size_t off = 0;
  auto add = [&](std::string name, std::vector<int> shape) {
    std::size_t size = 1;
    for (int s : shape) size *= static_cast<std::size_t>(s);
    tensors.push_back({std::move(name), std::move(shape), off, size});
    const std::size_t at = off;
    off += size;
    return at;
  };
  tok_emb = add("tok_emb", {v, d});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Layer L{};
    L.attn_norm = add(p + "attn_norm", {d});
    L.wq = add(p + "wq", {d, d});
    L.wk = add(p + "wk", {d, hd});
    L.wv = add(p + "wv", {d, hd});
    L.wo = add(p + "wo", {d, d});
    L.ffn_norm = add(p + "ffn_norm", {d});
    L.w1 = add(p + "w1", {d, f});
    L.w2 = add(p + "w2", {f, d});
    layers.push_back(L);
  }
  final_norm = add("final_norm", {d});
  out = add("out", {d, v});
  total = off;
}

PolicyCheckpoint init_model(const ModelConfig& cfg, std::uint64_t seed, InitMode mode) {
  const ParamLayout layout(cfg);
  PolicyCheckpoint ck;
  ck.config = cfg;
  ck.params.assign(layout.total, 0.0f);
  if (mode == InitMode::kZero) return ck;
  Rng rng(derive_seed(seed, "init_model"));
  for (const auto& t : layout.tensors) {
    float* p = ck.params.data() + t.offset;
    if (t.shape.size() == 1) {
      std::fill(p, p + t.size, 1.0f);  // norm gains start at identity
      continue;
    }
    const double std_dev = t.name == "tok_emb" ? 1.0 : 1.0 / std::sqrt(static_cast<double>(t.shape[0]));
    for (std::size_t i = 0; i < t.size; ++i) p[i] = static_cast<float>(std_dev * rng.normal());
  }
  return ck;
}

template <class T>
Transformer<T>::Transformer(const ModelConfig& cfg) : cfg_(cfg), layout_(cfg) {}

template <class T>
void Transformer<T>::forward(std::span<const T> params, std::span<const int> tokens, ForwardCache<T>& c,
                             std::span<const T> dropout_mask) const {
  const int n = static_cast<int>(tokens.size());
  const int d = cfg_.d_model, hd = cfg_.head_dim, H = cfg_.n_query_heads, f = cfg_.ffn_dim, V = cfg_.vocab_size;
  if (n < 1 || n > cfg_.max_seq_len) throw ArgumentError("forward: sequence length outside [1, max_seq_len]");
  if (params.size() != layout_.total) throw ArgumentError("forward: parameter count does not match config");
  for (int tok : tokens)
    if (tok < 0 || tok >= V) throw ArgumentError("forward: token id out of range");
  const std::size_t nd = static_cast<std::size_t>(n) * d;

  c.n = n;
  c.tokens.assign(tokens.begin(), tokens.end());
  c.x0.resize(nd);
  for (int t = 0; t < n; ++t)
    std::copy_n(params.data() + layout_.tok_emb + static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]) * d, d,
                c.x0.begin() + static_cast<std::ptrdiff_t>(t) * d);
  c.dropout_mask.assign(dropout_mask.begin(), dropout_mask.end());
  if (!dropout_mask.empty()) {
    if (dropout_mask.size() != nd) throw ArgumentError("forward: dropout mask has the wrong shape");
    for (std::size_t i = 0; i < nd; ++i) c.x0[i] *= dropout_mask[i];
  }

  const int half = hd / 2;
  c.rope_cos.resize(static_cast<std::size_t>(n) * half);
  c.rope_sin.resize(static_cast<std::size_t>(n) * half);
  for (int t = 0; t < n; ++t)
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(kRopeBase, -2.0 * i / hd);
      c.rope_cos[static_cast<std::size_t>(t) * half + i] = static_cast<T>(std::cos(t * freq));
      c.rope_sin[static_cast<std::size_t>(t) * half + i] = static_cast<T>(std::sin(t * freq));
    }

  std::vector<T> x = c.x0;
  std::vector<T> tmp(nd);
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  c.layers.resize(static_cast<std::size_t>(cfg_.n_layers));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const auto& L = layout_.layers[static_cast<std::size_t>(l)];
    auto& C = c.layers[static_cast<std::size_t>(l)];
    C.x_in = x;
    C.rinv1.resize(static_cast<std::size_t>(n));
    C.h1.resize(nd);
    rmsnorm_forward<T>(x, view(params, L.attn_norm, static_cast<std::size_t>(d)), n, d, C.h1, C.rinv1);

    C.q.resize(nd);
    C.k.resize(static_cast<std::size_t>(n) * hd);
    C.v.resize(static_cast<std::size_t>(n) * hd);
    kernels::matmul<T>(C.h1, view(params, L.wq, static_cast<std::size_t>(d) * d), C.q, n, d, d);
    kernels::matmul<T>(C.h1, view(params, L.wk, static_cast<std::size_t>(d) * hd), C.k, n, d, hd);
    kernels::matmul<T>(C.h1, view(params, L.wv, static_cast<std::size_t>(d) * hd), C.v, n, d, hd);
    apply_rope<T>(C.q, n, H, hd, c.rope_cos, c.rope_sin, T(1));
    apply_rope<T>(C.k, n, 1, hd, c.rope_cos, c.rope_sin, T(1));

    // Causal attention; every query head reads the single shared K/V head.
    C.probs.assign(static_cast<std::size_t>(H) * n * n, T(0));
    C.o.assign(nd, T(0));
#pragma omp parallel for collapse(2) schedule(static) if (static_cast<long>(H) * n * n * hd > 65536)
    for (int h = 0; h < H; ++h)
      for (int t = 0; t < n; ++t) {
        const T* qt = C.q.data() + static_cast<std::size_t>(t) * d + static_cast<std::size_t>(h) * hd;
        T* p = C.probs.data() + (static_cast<std::size_t>(h) * n + t) * n;
        T mx = -std::numeric_limits<T>::infinity();
        for (int u = 0; u <= t; ++u) {
          const T* ku = C.k.data() + static_cast<std::size_t>(u) * hd;
          T s = 0;
          for (int j = 0; j < hd; ++j) s += qt[j] * ku[j];
          p[u] = s * scale;
          mx = std::max(mx, p[u]);
        }
        T sum = 0;
        for (int u = 0; u <= t; ++u) {
          p[u] = std::exp(p[u] - mx);
          sum += p[u];
        }
        T* ot = C.o.data() + static_cast<std::size_t>(t) * d + static_cast<std::size_t>(h) * hd;
        for (int u = 0; u <= t; ++u) {
          p[u] /= sum;
          const T* vu = C.v.data() + static_cast<std::size_t>(u) * hd;
          for (int j = 0; j < hd; ++j) ot[j] += p[u] * vu[j];
        }
      }
    kernels::matmul<T>(C.o, view(params, L.wo, static_cast<std::size_t>(d) * d), tmp, n, d, d);
    for (std::size_t i = 0; i < nd; ++i) x[i] += tmp[i];

    C.x_mid = x;
    C.rinv2.resize(static_cast<std::size_t>(n));
    C.h2.resize(nd);
    rmsnorm_forward<T>(x, view(params, L.ffn_norm, static_cast<std::size_t>(d)), n, d, C.h2, C.rinv2);
    C.z.resize(static_cast<std::size_t>(n) * f);
    C.gz.resize(static_cast<std::size_t>(n) * f);
    kernels::matmul<T>(C.h2, view(params, L.w1, static_cast<std::size_t>(d) * f), C.z, n, d, f);
    for (std::size_t i = 0; i < C.z.size(); ++i) C.gz[i] = gelu(C.z[i]);
    kernels::matmul<T>(C.gz, view(params, L.w2, static_cast<std::size_t>(f) * d), tmp, n, f, d);
    for (std::size_t i = 0; i < nd; ++i) x[i] += tmp[i];
  }

  c.x_final = x;
  c.rinvf.resize(static_cast<std::size_t>(n));
  c.hf.resize(nd);
  rmsnorm_forward<T>(x, view(params, layout_.final_norm, static_cast<std::size_t>(d)), n, d, c.hf, c.rinvf);
  c.logits.resize(static_cast<std::size_t>(n) * V);
  kernels::matmul<T>(c.hf, view(params, layout_.out, static_cast<std::size_t>(d) * V), c.logits, n, d, V);
}

template <class T>
void Transformer<T>::backward(std::span<const T> params, const ForwardCache<T>& c, std::span<const T> dlogits,
                              std::span<T> grads) const {
  const int n = c.n;
  const int d = cfg_.d_model, hd = cfg_.head_dim, H = cfg_.n_query_heads, f = cfg_.ffn_dim, V = cfg_.vocab_size;
  const std::size_t nd = static_cast<std::size_t>(n) * d;
  if (grads.size() != layout_.total) throw ArgumentError("backward: gradient buffer has the wrong size");
  if (dlogits.size() != static_cast<std::size_t>(n) * V) throw ArgumentError("backward: dlogits has the wrong shape");
  auto gview = [&](std::size_t off, std::size_t len) { return grads.subspan(off, len); };

  kernels::matmul_at_acc<T>(c.hf, dlogits, gview(layout_.out, static_cast<std::size_t>(d) * V), n, d, V);
  std::vector<T> dhf(nd);
  kernels::matmul_bt<T>(dlogits, view(params, layout_.out, static_cast<std::size_t>(d) * V), dhf, n, V, d);
  std::vector<T> dx(nd, T(0));
  rmsnorm_backward<T>(c.x_final, view(params, layout_.final_norm, static_cast<std::size_t>(d)), c.rinvf, dhf, n, d, dx,
                      gview(layout_.final_norm, static_cast<std::size_t>(d)));

  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  std::vector<T> dh(nd), dgz(static_cast<std::size_t>(n) * f), dq(nd), dk(static_cast<std::size_t>(n) * hd),
      dv(static_cast<std::size_t>(n) * hd), dO(nd), dp(static_cast<std::size_t>(n));
  for (int l = cfg_.n_layers - 1; l >= 0; --l) {
    const auto& L = layout_.layers[static_cast<std::size_t>(l)];
    const auto& C = c.layers[static_cast<std::size_t>(l)];

    // MLP branch: dx is the gradient w.r.t. its output.
    kernels::matmul_at_acc<T>(C.gz, dx, gview(L.w2, static_cast<std::size_t>(f) * d), n, f, d);
    kernels::matmul_bt<T>(dx, view(params, L.w2, static_cast<std::size_t>(f) * d), dgz, n, d, f);
    for (std::size_t i = 0; i < dgz.size(); ++i) dgz[i] *= gelu_grad(C.z[i]);
    kernels::matmul_at_acc<T>(C.h2, dgz, gview(L.w1, static_cast<std::size_t>(d) * f), n, d, f);
    kernels::matmul_bt<T>(dgz, view(params, L.w1, static_cast<std::size_t>(d) * f), dh, n, f, d);
    rmsnorm_backward<T>(C.x_mid, view(params, L.ffn_norm, static_cast<std::size_t>(d)), C.rinv2, dh, n, d, dx,
                        gview(L.ffn_norm, static_cast<std::size_t>(d)));

    // Attention branch.
    kernels::matmul_at_acc<T>(C.o, dx, gview(L.wo, static_cast<std::size_t>(d) * d), n, d, d);
    kernels::matmul_bt<T>(dx, view(params, L.wo, static_cast<std::size_t>(d) * d), dO, n, d, d);
    std::fill(dq.begin(), dq.end(), T(0));
    std::fill(dk.begin(), dk.end(), T(0));
    std::fill(dv.begin(), dv.end(), T(0));
    for (int h = 0; h < H; ++h)
      for (int t = 0; t < n; ++t) {
        const T* p = C.probs.data() + (static_cast<std::size_t>(h) * n + t) * n;
        const T* dot = dO.data() + static_cast<std::size_t>(t) * d + static_cast<std::size_t>(h) * hd;
        T dot_sum = 0;
        for (int u = 0; u <= t; ++u) {
          const T* vu = C.v.data() + static_cast<std::size_t>(u) * hd;
          T* dvu = dv.data() + static_cast<std::size_t>(u) * hd;
          T s = 0;
          for (int j = 0; j < hd; ++j) {
            s += dot[j] * vu[j];
            dvu[j] += p[u] * dot[j];
          }
          dp[static_cast<std::size_t>(u)] = s;
          dot_sum += p[u] * s;
        }
        const T* qt = C.q.data() + static_cast<std::size_t>(t) * d + static_cast<std::size_t>(h) * hd;
        T* dqt = dq.data() + static_cast<std::size_t>(t) * d + static_cast<std::size_t>(h) * hd;
        for (int u = 0; u <= t; ++u) {
          const T ds = p[u] * (dp[static_cast<std::size_t>(u)] - dot_sum) * scale;
          const T* ku = C.k.data() + static_cast<std::size_t>(u) * hd;
          T* dku = dk.data() + static_cast<std::size_t>(u) * hd;
          for (int j = 0; j < hd; ++j) {
            dqt[j] += ds * ku[j];
            dku[j] += ds * qt[j];
          }
        }
      }
    apply_rope<T>(dq, n, H, hd, c.rope_cos, c.rope_sin, T(-1));
    apply_rope<T>(dk, n, 1, hd, c.rope_cos, c.rope_sin, T(-1));
    kernels::matmul_at_acc<T>(C.h1, dq, gview(L.wq, static_cast<std::size_t>(d) * d), n, d, d);
    kernels::matmul_at_acc<T>(C.h1, dk, gview(L.wk, static_cast<std::size_t>(d) * hd), n, d, hd);
    kernels::matmul_at_acc<T>(C.h1, dv, gview(L.wv, static_cast<std::size_t>(d) * hd), n, d, hd);
    kernels::matmul_bt<T>(dq, view(params, L.wq, static_cast<std::size_t>(d) * d), dh, n, d, d);
    kernels::matmul_bt<T>(dk, view(params, L.wk, static_cast<std::size_t>(d) * hd), dh, n, hd, d, true);
    kernels::matmul_bt<T>(dv, view(params, L.wv, static_cast<std::size_t>(d) * hd), dh, n, hd, d, true);
    rmsnorm_backward<T>(C.x_in, view(params, L.attn_norm, static_cast<std::size_t>(d)), C.rinv1, dh, n, d, dx,
                        gview(L.attn_norm, static_cast<std::size_t>(d)));
  }

  for (int t = 0; t < n; ++t) {
    T* ge = grads.data() + layout_.tok_emb + static_cast<std::size_t>(c.tokens[static_cast<std::size_t>(t)]) * d;
    const T* dxt = dx.data() + static_cast<std::size_t>(t) * d;
    if (c.dropout_mask.empty()) {
      for (int i = 0; i < d; ++i) ge[i] += dxt[i];
    } else {
      const T* m = c.dropout_mask.data() + static_cast<std::size_t>(t) * d;
      for (int i = 0; i < d; ++i) ge[i] += dxt[i] * m[i];
    }
  }
}

template class Transformer<float>;
template class Transformer<double>;

std::vector<float> forward(const PolicyCheckpoint& ckpt, std::span<const int> tokens) {
  Transformer<float> model(ckpt.config);
  ForwardCache<float> cache;
  model.forward(ckpt.params, tokens, cache);
  return std::move(cache.logits);
}

template <class T>
void masked_log_softmax(std::span<const T> logits, double temperature, int mask_begin, int mask_end,
                        std::span<double> out) {
  const int V = static_cast<int>(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < V; ++i) {
    if (i >= mask_begin && i < mask_end) continue;
    mx = std::max(mx, static_cast<double>(logits[static_cast<std::size_t>(i)]) / temperature);
  }
  double sum = 0.0;
  for (int i = 0; i < V; ++i) {
    if (i >= mask_begin && i < mask_end) continue;
    sum += std::exp(static_cast<double>(logits[static_cast<std::size_t>(i)]) / temperature - mx);
  }
  const double lse = mx + std::log(sum);
  for (int i = 0; i < V; ++i) {
    out[static_cast<std::size_t>(i)] = (i >= mask_begin && i < mask_end)
                                           ? -std::numeric_limits<double>::infinity()
                                           : static_cast<double>(logits[static_cast<std::size_t>(i)]) / temperature - lse;
  }
}

template void masked_log_softmax<float>(std::span<const float>, double, int, int, std::span<double>);
template void masked_log_softmax<double>(std::span<const double>, double, int, int, std::span<double>);

namespace {

template <class T>
std::vector<T> make_dropout_mask(std::size_t size, double rate, std::uint64_t seed) {
  std::vector<T> mask(size);
  Rng rng(seed);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : mask) m = rng.uniform() < rate ? T(0) : keep_scale;
  return mask;
}

}  // namespace

template <class T>
double loss_and_grads(const ModelConfig& cfg, std::span<const T> params, std::span<const EncodedExample> batch,
                      bool dropout_on, std::uint64_t seed, std::span<T> grads) {
  if (batch.empty()) throw ArgumentError("loss_and_grads: empty batch");
  std::size_t masked = 0;
  for (const auto& ex : batch) {
    if (ex.loss_mask.size() + 1 != ex.tokens.size()) throw ArgumentError("loss_and_grads: loss mask has the wrong length");
    for (auto m : ex.loss_mask) masked += m ? 1 : 0;
  }
  if (masked == 0) throw ArgumentError("loss_and_grads: batch has no masked positions");

  Transformer<T> model(cfg);
  ForwardCache<T> cache;
  const int V = cfg.vocab_size;
  const double inv = 1.0 / static_cast<double>(masked);
  double loss = 0.0;
  std::vector<double> logp(static_cast<std::size_t>(V));
  std::vector<T> dlogits;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ex = batch[b];
    const std::size_t n = ex.tokens.size();
    std::vector<T> mask;
    if (dropout_on && cfg.dropout_rate > 0.0)
      mask = make_dropout_mask<T>(n * static_cast<std::size_t>(cfg.d_model), cfg.dropout_rate, mix64(seed, b));
    model.forward(params, ex.tokens, cache, mask);
    dlogits.assign(n * static_cast<std::size_t>(V), T(0));
    for (std::size_t t = 0; t + 1 < n; ++t) {
      if (!ex.loss_mask[t]) continue;
      const std::span<const T> row(cache.logits.data() + t * V, static_cast<std::size_t>(V));
      masked_log_softmax<T>(row, 1.0, V, V, logp);
      const int target = ex.tokens[t + 1];
      loss -= logp[static_cast<std::size_t>(target)] * inv;
      T* dl = dlogits.data() + t * V;
      for (int i = 0; i < V; ++i) dl[i] = static_cast<T>(std::exp(logp[static_cast<std::size_t>(i)]) * inv);
      dl[target] -= static_cast<T>(inv);
    }
    model.backward(params, cache, dlogits, grads);
  }
  return loss;
}

template double loss_and_grads<float>(const ModelConfig&, std::span<const float>, std::span<const EncodedExample>, bool,
                                      std::uint64_t, std::span<float>);
template double loss_and_grads<double>(const ModelConfig&, std::span<const double>, std::span<const EncodedExample>,
                                       bool, std::uint64_t, std::span<double>);

LossAndGrads loss_and_grads(const PolicyCheckpoint& ckpt, std::span<const EncodedExample> batch, bool dropout_on,
                            std::uint64_t seed) {
  LossAndGrads out;
  out.grads.assign(ckpt.params.size(), 0.0f);
  out.loss = loss_and_grads<float>(ckpt.config, ckpt.params, batch, dropout_on, seed, out.grads);
  return out;
}

double eval_loss(const PolicyCheckpoint& ckpt, std::span<const EncodedExample> batch) {
  Transformer<float> model(ckpt.config);
  ForwardCache<float> cache;
  const int V = ckpt.config.vocab_size;
  std::vector<double> logp(static_cast<std::size_t>(V));
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& ex : batch) {
    model.forward(ckpt.params, ex.tokens, cache);
    for (std::size_t t = 0; t + 1 < ex.tokens.size(); ++t) {
      if (!ex.loss_mask[t]) continue;
      masked_log_softmax<float>(std::span<const float>(cache.logits.data() + t * V, static_cast<std::size_t>(V)), 1.0, V, V, logp);
      total -= logp[static_cast<std::size_t>(ex.tokens[t + 1])];
      ++count;
    }
  }
  if (count == 0) throw ArgumentError("eval_loss: no masked positions");
  return total / static_cast<double>(count);
}

std::pair<int, int> audio_mask_range(const PolicyCheckpoint& ckpt, bool forbid_audio_ids) {
  const int V = ckpt.config.vocab_size;
  if (!forbid_audio_ids || ckpt.vocab_map.k == 0) return {V, V};
  if (ckpt.vocab_map.v != V) throw CompatibilityError("vocabulary map size does not match the model");
  return {ckpt.vocab_map.audio_begin(), V};
}

namespace {

void check_prompt(const PolicyCheckpoint& ckpt, std::span<const int> prompt) {
  if (prompt.empty() || prompt.back() != kSep) throw ArgumentError("generate: prompt must end with SEP");
  if (static_cast<int>(prompt.size()) >= ckpt.config.max_seq_len) throw ArgumentError("generate: prompt fills the context");
}

double effective_temperature(const DecodeConfig& cfg) {
  if (cfg.mode == DecodeMode::kGreedy) return 1.0;
  if (!(cfg.temperature > 0.0)) throw ArgumentError("generate: temperature must be positive");
  return cfg.temperature;
}

}  // namespace

Generation generate(const PolicyCheckpoint& ckpt, std::span<const int> prompt, const DecodeConfig& cfg) {
  check_prompt(ckpt, prompt);
  if (cfg.max_new_tokens < 1) throw ArgumentError("generate: max_new_tokens must be >= 1");
  const double tau = effective_temperature(cfg);
  const auto [mb, me] = audio_mask_range(ckpt, cfg.forbid_audio_ids);
  const int V = ckpt.config.vocab_size;

  Transformer<float> model(ckpt.config);
  ForwardCache<float> cache;
  Rng rng(derive_seed(cfg.seed, "generate"));
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<double> logp(static_cast<std::size_t>(V));
  Generation out;
  for (int step = 0; step < cfg.max_new_tokens && static_cast<int>(seq.size()) < ckpt.config.max_seq_len; ++step) {
    model.forward(ckpt.params, seq, cache);
    const std::span<const float> row(cache.logits.data() + (seq.size() - 1) * V, static_cast<std::size_t>(V));
    masked_log_softmax<float>(row, tau, mb, me, logp);
    int pick = -1;
    if (cfg.mode == DecodeMode::kGreedy) {
      double best = -std::numeric_limits<double>::infinity();
      for (int i = 0; i < V; ++i)
        if (logp[static_cast<std::size_t>(i)] > best) {
          best = logp[static_cast<std::size_t>(i)];
          pick = i;
        }
    } else {
      const double u = rng.uniform();
      double acc = 0.0;
      for (int i = 0; i < V; ++i) {
        if (i >= mb && i < me) continue;
        acc += std::exp(logp[static_cast<std::size_t>(i)]);
        pick = i;
        if (u < acc) break;
      }
    }
    out.tokens.push_back(pick);
    out.logprobs.push_back(logp[static_cast<std::size_t>(pick)]);
    seq.push_back(pick);
    if (pick == kEos) break;
  }
  return out;
}

std::vector<double> score_continuation(const PolicyCheckpoint& ckpt, std::span<const int> prompt,
                                       std::span<const int> continuation, const DecodeConfig& cfg) {
  check_prompt(ckpt, prompt);
  const double tau = effective_temperature(cfg);
  const auto [mb, me] = audio_mask_range(ckpt, cfg.forbid_audio_ids);
  const int V = ckpt.config.vocab_size;
  std::vector<int> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), continuation.begin(), continuation.end());
  if (continuation.empty()) return {};
  // The final token is only a target, never an input.
  seq.pop_back();
  const auto logits = forward(ckpt, seq);
  std::vector<double> logp(static_cast<std::size_t>(V));
  std::vector<double> out;
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    const std::size_t pos = prompt.size() - 1 + i;
    masked_log_softmax<float>(std::span<const float>(logits.data() + pos * V, static_cast<std::size_t>(V)), tau, mb, me, logp);
    out.push_back(logp[static_cast<std::size_t>(continuation[i])]);
  }
  return out;
}

bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

}  // namespace speechrl
