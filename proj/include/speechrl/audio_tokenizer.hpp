#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "speechrl/synth_data.hpp"

namespace speechrl {

// Row-major collection of equal-dimension frames.
struct FrameSet {
  int dim = 0;
  std::vector<float> data;

  int count() const { return dim == 0 ? 0 : static_cast<int>(data.size()) / dim; }
  void append(const EmbeddingSequence& emb);
};

// K centroids; audio-token id i is centroid row i.
struct Codebook {
  int k = 0;
  int dim = 0;
  std::vector<float> centroids;
  std::uint64_t train_fingerprint = 0;

  std::span<const float> centroid(int i) const {
    return {centroids.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)};
  }
  bool operator==(const Codebook&) const = default;
};

struct CodebookTraining {
  Codebook codebook;
  // Mean squared distance to the nearest centroid after each assignment step.
  std::vector<double> distortion_trace;
  int iterations = 0;
};

// Lloyd's algorithm with seeded k-means++ initialisation. Stops after max_iters
// assignment/update rounds or when the relative distortion decrease drops below
// rel_tol. A cluster that loses all members is re-seeded at the frame farthest
// from its assigned centroid.
CodebookTraining train_codebook(const FrameSet& frames, int k, std::uint64_t seed, int max_iters, double rel_tol,
                                std::uint64_t data_fingerprint = 0);

// Nearest-centroid id per frame; ties go to the lowest id.
std::vector<int> quantize(const Codebook& cb, const EmbeddingSequence& emb);

// Mean over frames of the squared distance to the nearest centroid.
double distortion(const Codebook& cb, const FrameSet& frames);

// KMC1 container: magic, K (u32), dim (u32), f32 centroids, u64 fingerprint.
void write_codebook(const std::filesystem::path& path, const Codebook& cb);
Codebook read_codebook(const std::filesystem::path& path);

std::uint64_t codebook_fingerprint(const Codebook& cb);

}  // namespace speechrl
