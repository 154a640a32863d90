#pragma once

// Decoder-only transformer with multi-query attention (one shared K/V head),
// rotary position embeddings, RMSNorm pre-normalisation and a GELU MLP. Forward
// and backward passes are written out by hand and templated on the scalar type so
// gradients can be checked in double precision; training runs in float.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "speechrl/token_bridge.hpp"

namespace speechrl {

struct ModelConfig {
  int vocab_size = 512;
  int d_model = 128;
  int n_layers = 4;
  int n_query_heads = 4;
  int head_dim = 32;
  int ffn_dim = 512;
  int max_seq_len = 256;
  double dropout_rate = 0.05;  // input-embedding dropout, training only

  static constexpr int kKvHeads = 1;

  void validate() const;
  std::size_t parameter_count() const;
  bool operator==(const ModelConfig&) const = default;
};

struct TensorInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Offsets of every tensor inside the flat parameter vector. Linear weights are
// stored [in, out] so activations multiply on the left.
struct ParamLayout {
  struct Layer {
    std::size_t attn_norm, wq, wk, wv, wo, ffn_norm, w1, w2;
  };
  std::size_t tok_emb = 0;
  std::vector<Layer> layers;
  std::size_t final_norm = 0;
  std::size_t out = 0;
  std::size_t total = 0;
  std::vector<TensorInfo> tensors;

  explicit ParamLayout(const ModelConfig& cfg);
};

// Training-state snapshot: configuration, parameters and the fingerprints of the
// vocabulary map and codebook the model was trained against.
struct PolicyCheckpoint {
  ModelConfig config;
  std::vector<float> params;
  VocabMap vocab_map;  // v == 0 when absent
  std::uint64_t vocab_map_fingerprint = 0;
  std::uint64_t codebook_fingerprint = 0;
  std::uint64_t step = 0;

  bool operator==(const PolicyCheckpoint&) const = default;
};

enum class InitMode { kRandom, kZero };

PolicyCheckpoint init_model(const ModelConfig& cfg, std::uint64_t seed, InitMode mode = InitMode::kRandom);

template <class T>
struct ForwardCache {
  int n = 0;
  std::vector<int> tokens;
  std::vector<T> x0;            // [n,d] embeddings after dropout
  std::vector<T> dropout_mask;  // [n,d] or empty
  std::vector<T> rope_cos, rope_sin;
  struct Layer {
    std::vector<T> x_in, rinv1, h1, q, k, v, probs, o, x_mid, rinv2, h2, z, gz;
  };
  std::vector<Layer> layers;
  std::vector<T> x_final, rinvf, hf;  // hf: final normalised hidden state [n,d]
  std::vector<T> logits;              // [n,V]
};

// Stateless numerics over a flat parameter span.
template <class T>
class Transformer {
 public:
  explicit Transformer(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }

  // dropout_mask, when non-empty, multiplies the input embeddings elementwise.
  void forward(std::span<const T> params, std::span<const int> tokens, ForwardCache<T>& cache,
               std::span<const T> dropout_mask = {}) const;

  // Accumulates into grads (same layout as params).
  void backward(std::span<const T> params, const ForwardCache<T>& cache, std::span<const T> dlogits,
                std::span<T> grads) const;

 private:
  ModelConfig cfg_;
  ParamLayout layout_;
};

extern template class Transformer<float>;
extern template class Transformer<double>;

// Eval-mode logits, row-major [tokens.size(), V].
std::vector<float> forward(const PolicyCheckpoint& ckpt, std::span<const int> tokens);

// Mean masked cross-entropy over the batch and its gradient. Input dropout uses a
// mask seeded by (seed, example index) when dropout_on is set.
template <class T>
double loss_and_grads(const ModelConfig& cfg, std::span<const T> params, std::span<const EncodedExample> batch,
                      bool dropout_on, std::uint64_t seed, std::span<T> grads);

struct LossAndGrads {
  double loss = 0.0;
  std::vector<float> grads;
};

LossAndGrads loss_and_grads(const PolicyCheckpoint& ckpt, std::span<const EncodedExample> batch, bool dropout_on,
                            std::uint64_t seed);

// Mean masked cross-entropy without gradients (eval mode).
double eval_loss(const PolicyCheckpoint& ckpt, std::span<const EncodedExample> batch);

enum class DecodeMode { kGreedy, kTemperature };

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kGreedy;
  double temperature = 1.0;
  int max_new_tokens = 16;
  std::uint64_t seed = 0;
  bool forbid_audio_ids = true;
};

struct Generation {
  std::vector<int> tokens;             // generated ids (EOS included when emitted)
  std::vector<double> logprobs;        // per generated token, under the decode distribution
};

// Autoregressive decoding. The prompt must end with SEP. Greedy picks the lowest
// id among maximal logits; temperature mode samples from softmax(logits / tau).
// With forbid_audio_ids the audio range of the checkpoint's vocabulary map is
// removed from the distribution before normalisation.
Generation generate(const PolicyCheckpoint& ckpt, std::span<const int> prompt, const DecodeConfig& cfg);

// Teacher-forced per-token log-probabilities of `continuation` after `prompt`
// under the same masking and temperature rules as generate().
std::vector<double> score_continuation(const PolicyCheckpoint& ckpt, std::span<const int> prompt,
                                       std::span<const int> continuation, const DecodeConfig& cfg);

// Log-softmax of row/temperature with optional [mask_begin, mask_end) removed.
template <class T>
void masked_log_softmax(std::span<const T> logits, double temperature, int mask_begin, int mask_end,
                        std::span<double> out);

// Audio range to mask under a decode config, or {V, V} for none.
std::pair<int, int> audio_mask_range(const PolicyCheckpoint& ckpt, bool forbid_audio_ids);

template <class T>
std::vector<T> convert_params(std::span<const float> params) {
  return std::vector<T>(params.begin(), params.end());
}

bool all_finite(std::span<const float> v);

}  // namespace speechrl
