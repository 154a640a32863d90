#include "speechrl/audio_tokenizer.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "speechrl/kernels.hpp"

namespace speechrl {

void FrameSet::append(const EmbeddingSequence& emb) {
  if (dim == 0) dim = emb.dim;
  if (emb.dim != dim) throw ArgumentError("FrameSet: dimension mismatch");
  data.insert(data.end(), emb.data.begin(), emb.data.end());
}

namespace {

double sqdist(const float* a, const float* b, int dim) {
  double d = 0.0;
  for (int j = 0; j < dim; ++j) {
    const double diff = static_cast<double>(a[j]) - static_cast<double>(b[j]);
    d += diff * diff;
  }
  return d;
}

void check_frames(const FrameSet& frames) {
  for (float v : frames.data)
    if (!std::isfinite(v)) throw DataError("non-finite value in frame set");
}

}  // namespace

CodebookTraining train_codebook(const FrameSet& frames, int k, std::uint64_t seed, int max_iters, double rel_tol,
                                std::uint64_t data_fingerprint) {
  const int n = frames.count();
  const int dim = frames.dim;
  if (k < 1) throw ArgumentError("train_codebook: K must be >= 1");
  if (n < k) throw ArgumentError("train_codebook: fewer frames than clusters");
  if (max_iters < 1 || !(rel_tol >= 0.0)) throw ArgumentError("train_codebook: bad stopping criteria");
  check_frames(frames);

  Rng rng(derive_seed(seed, "kmeans++"));
  Codebook cb;
  cb.k = k;
  cb.dim = dim;
  cb.centroids.resize(static_cast<std::size_t>(k) * dim);
  const float* x = frames.data.data();

  // Greedy k-means++ seeding: several D^2 candidates per centroid, keep the one
  // that lowers the total squared distance most.
  const int trials = 2 + static_cast<int>(std::log(static_cast<double>(k)));
  std::vector<double> closest(static_cast<std::size_t>(n));
  std::size_t first = rng.below(static_cast<std::uint64_t>(n));
  std::copy_n(x + first * dim, dim, cb.centroids.begin());
  for (int i = 0; i < n; ++i)
    closest[static_cast<std::size_t>(i)] = sqdist(x + static_cast<std::size_t>(i) * dim, x + first * dim, dim);
  std::vector<double> trial(static_cast<std::size_t>(n)), best_closest(static_cast<std::size_t>(n));
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (double d : closest) total += d;
    std::size_t pick = 0;
    double best_total = std::numeric_limits<double>::infinity();
    for (int t = 0; t < trials; ++t) {
      const std::size_t cand = total > 0.0 ? rng.categorical(closest) : rng.below(static_cast<std::uint64_t>(n));
      double cand_total = 0.0;
      for (int i = 0; i < n; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        trial[ui] = std::min(closest[ui], sqdist(x + ui * dim, x + cand * dim, dim));
        cand_total += trial[ui];
      }
      if (cand_total < best_total) {
        best_total = cand_total;
        pick = cand;
        best_closest.swap(trial);
      }
    }
    closest.swap(best_closest);
    std::copy_n(x + pick * dim, dim, cb.centroids.begin() + static_cast<std::ptrdiff_t>(c) * dim);
  }

  CodebookTraining out;
  std::vector<std::int32_t> ids(static_cast<std::size_t>(n));
  std::vector<double> d2(static_cast<std::size_t>(n));
  std::vector<double> sums(static_cast<std::size_t>(k) * dim);
  std::vector<int> counts(static_cast<std::size_t>(k));

  auto assign = [&] {
    kernels::nearest_centroid(frames.data, cb.centroids, n, k, dim, ids, d2);
    double total = 0.0;
    for (double v : d2) total += v;
    return total / n;
  };

  double prev = assign();
  out.distortion_trace.push_back(prev);
  for (int iter = 0; iter < max_iters; ++iter) {
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (int i = 0; i < n; ++i) {
      const int c = ids[static_cast<std::size_t>(i)];
      counts[static_cast<std::size_t>(c)]++;
      for (int j = 0; j < dim; ++j) sums[static_cast<std::size_t>(c) * dim + j] += x[static_cast<std::size_t>(i) * dim + j];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) continue;
      for (int j = 0; j < dim; ++j)
        cb.centroids[static_cast<std::size_t>(c) * dim + j] =
            static_cast<float>(sums[static_cast<std::size_t>(c) * dim + j] / counts[static_cast<std::size_t>(c)]);
    }
    // Empty clusters: move to the frame currently worst served by its centroid.
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] != 0) continue;
      std::size_t far = 0;
      double best = -1.0;
      for (int i = 0; i < n; ++i) {
        const double d = sqdist(x + static_cast<std::size_t>(i) * dim,
                                cb.centroids.data() + static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * dim, dim);
        if (d > best) {
          best = d;
          far = static_cast<std::size_t>(i);
        }
      }
      std::copy_n(x + far * dim, dim, cb.centroids.begin() + static_cast<std::ptrdiff_t>(c) * dim);
      ids[far] = c;
    }
    const double cur = assign();
    out.distortion_trace.push_back(cur);
    out.iterations = iter + 1;
    const double rel = prev > 0.0 ? (prev - cur) / prev : 0.0;
    const bool stalled = cur >= prev;
    prev = cur;
    if (stalled || rel < rel_tol) break;
  }

  Fnv1a fp;
  fp.update("kmeans").update_u64(static_cast<std::uint64_t>(k)).update_u64(seed).update_u64(static_cast<std::uint64_t>(max_iters));
  fp.update(&rel_tol, sizeof(rel_tol)).update_u64(data_fingerprint).update_span(std::span<const float>(frames.data));
  cb.train_fingerprint = fp.digest();
  out.codebook = std::move(cb);
  return out;
}

std::vector<int> quantize(const Codebook& cb, const EmbeddingSequence& emb) {
  if (emb.dim != cb.dim) throw ArgumentError("quantize: embedding dim does not match codebook");
  std::vector<std::int32_t> ids(static_cast<std::size_t>(emb.frames));
  std::vector<double> d2(static_cast<std::size_t>(emb.frames));
  kernels::nearest_centroid(emb.data, cb.centroids, emb.frames, cb.k, cb.dim, ids, d2);
  return {ids.begin(), ids.end()};
}

double distortion(const Codebook& cb, const FrameSet& frames) {
  if (frames.count() == 0) throw ArgumentError("distortion: empty frame set");
  if (frames.dim != cb.dim) throw ArgumentError("distortion: dim mismatch");
  const int n = frames.count();
  std::vector<std::int32_t> ids(static_cast<std::size_t>(n));
  std::vector<double> d2(static_cast<std::size_t>(n));
  kernels::nearest_centroid(frames.data, cb.centroids, n, cb.k, cb.dim, ids, d2);
  double total = 0.0;
  for (double v : d2) total += v;
  return total / n;
}

void write_codebook(const std::filesystem::path& path, const Codebook& cb) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("KMC1", 4);
  write_u32(out, static_cast<std::uint32_t>(cb.k));
  write_u32(out, static_cast<std::uint32_t>(cb.dim));
  write_f32s(out, cb.centroids);
  write_u64(out, cb.train_fingerprint);
  if (!out) throw IoError("write failed: " + path.string());
}

Codebook read_codebook(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "KMC1") throw DataError("bad codebook magic in " + path.string());
  Codebook cb;
  cb.k = static_cast<int>(read_u32(in));
  cb.dim = static_cast<int>(read_u32(in));
  if (cb.k < 1 || cb.dim < 1) throw DataError("empty codebook in " + path.string());
  cb.centroids.resize(static_cast<std::size_t>(cb.k) * cb.dim);
  read_f32s(in, cb.centroids);
  cb.train_fingerprint = read_u64(in);
  for (float v : cb.centroids)
    if (!std::isfinite(v)) throw DataError("non-finite centroid in " + path.string());
  return cb;
}

std::uint64_t codebook_fingerprint(const Codebook& cb) {
  return Fnv1a()
      .update_u64(static_cast<std::uint64_t>(cb.k))
      .update_u64(static_cast<std::uint64_t>(cb.dim))
      .update_span(std::span<const float>(cb.centroids))
      .update_u64(cb.train_fingerprint)
      .digest();
}

}  // namespace speechrl
