#include <doctest.h>

#include <filesystem>
#include <limits>

#include "speechrl/audio_tokenizer.hpp"

using namespace speechrl;

namespace {

FrameSet frames_of(int dim, std::vector<float> data) {
  FrameSet f;
  f.dim = dim;
  f.data = std::move(data);
  return f;
}

// Best total squared distance over every assignment of the points to two
// nonempty clusters, each cluster represented by its mean.
double brute_force_two_means(const FrameSet& f) {
  const int n = f.count(), d = f.dim;
  double best = std::numeric_limits<double>::infinity();
  for (int mask = 1; mask + 1 < (1 << n); ++mask) {
    double total = 0;
    for (int side = 0; side < 2; ++side) {
      std::vector<double> mean(d, 0.0);
      int cnt = 0;
      for (int i = 0; i < n; ++i)
        if (((mask >> i) & 1) == side) {
          ++cnt;
          for (int j = 0; j < d; ++j) mean[j] += f.data[i * d + j];
        }
      for (auto& m : mean) m /= cnt;
      for (int i = 0; i < n; ++i)
        if (((mask >> i) & 1) == side)
          for (int j = 0; j < d; ++j) total += (f.data[i * d + j] - mean[j]) * (f.data[i * d + j] - mean[j]);
    }
    best = std::min(best, total);
  }
  return best;
}

}  // namespace

TEST_CASE("four points, two clusters: the brute-force optimum") {
  const auto f = frames_of(2, {0, 0, 0, 1, 10, 10, 10, 11});
  const auto tr = train_codebook(f, 2, 1, 50, 0.0);
  const auto& cb = tr.codebook;
  // Either row order.
  const int lo = cb.centroid(0)[0] < cb.centroid(1)[0] ? 0 : 1;
  CHECK(cb.centroid(lo)[0] == doctest::Approx(0.0));
  CHECK(cb.centroid(lo)[1] == doctest::Approx(0.5));
  CHECK(cb.centroid(1 - lo)[0] == doctest::Approx(10.0));
  CHECK(cb.centroid(1 - lo)[1] == doctest::Approx(10.5));
  const double total = brute_force_two_means(f);
  CHECK(total == doctest::Approx(1.0));
  CHECK(distortion(cb, f) == doctest::Approx(total / 4));
  CHECK(tr.distortion_trace.back() == doctest::Approx(0.25));
}

TEST_CASE("k equal to the number of distinct frames reaches zero distortion") {
  const auto f = frames_of(2, {0, 0, 5, 5, 0, 0, 9, 1, 5, 5});
  const auto tr = train_codebook(f, 3, 4, 50, 0.0);
  CHECK(distortion(tr.codebook, f) == doctest::Approx(0.0));
}

TEST_CASE("distortion traces never increase") {
  for (int run = 0; run < 20; ++run) {
    Rng rng(mix64(5, run));
    FrameSet f;
    f.dim = 3;
    for (int i = 0; i < 300 * 3; ++i) f.data.push_back(static_cast<float>(rng.normal()));
    const auto tr = train_codebook(f, 8, run, 100, 0.0);
    for (std::size_t i = 1; i < tr.distortion_trace.size(); ++i)
      CHECK(tr.distortion_trace[i] <= tr.distortion_trace[i - 1] + 1e-9);
  }
}

TEST_CASE("training is deterministic in its seed") {
  Rng rng(8);
  FrameSet f;
  f.dim = 4;
  for (int i = 0; i < 200 * 4; ++i) f.data.push_back(static_cast<float>(rng.normal()));
  CHECK(train_codebook(f, 5, 3, 30, 1e-6).codebook == train_codebook(f, 5, 3, 30, 1e-6).codebook);
}

TEST_CASE("train_codebook input errors") {
  const auto f = frames_of(2, {0, 0, 1, 1});
  CHECK_THROWS_AS(train_codebook(f, 3, 1, 10, 0.0), ArgumentError);
  auto bad = frames_of(2, {0, 0, std::numeric_limits<float>::quiet_NaN(), 1});
  CHECK_THROWS_AS(train_codebook(bad, 1, 1, 10, 0.0), DataError);
}

TEST_CASE("quantize: nearest centroid, ties low, identity on centroids") {
  Codebook cb{2, 2, {0, 0, 1, 1}, 0};
  CHECK(quantize(cb, EmbeddingSequence{2, 2, {0.1f, 0.2f, 0.9f, 0.8f}}) == std::vector<int>{0, 1});
  CHECK(quantize(cb, EmbeddingSequence{2, 1, {0.5f, 0.5f}}) == std::vector<int>{0});
  CHECK(quantize(cb, EmbeddingSequence{2, 2, {0, 0, 1, 1}}) == std::vector<int>{0, 1});
  CHECK_THROWS_AS(quantize(cb, EmbeddingSequence{3, 1, {0, 0, 0}}), ArgumentError);
}

TEST_CASE("distortion: hand values and agreement with quantize") {
  Codebook one{1, 2, {0, 0}, 0};
  CHECK(distortion(one, frames_of(2, {0, 1})) == doctest::Approx(1.0));
  CHECK_THROWS_AS(distortion(one, FrameSet{2, {}}), ArgumentError);

  Rng rng(12);
  Codebook cb{6, 3, {}, 0};
  for (int i = 0; i < 18; ++i) cb.centroids.push_back(static_cast<float>(rng.normal()));
  FrameSet f;
  f.dim = 3;
  for (int i = 0; i < 150; ++i) f.data.push_back(static_cast<float>(rng.normal()));
  EmbeddingSequence emb{3, f.count(), f.data};
  const auto ids = quantize(cb, emb);
  double total = 0;
  for (int i = 0; i < f.count(); ++i)
    for (int j = 0; j < 3; ++j) {
      const double diff = f.data[i * 3 + j] - cb.centroid(ids[i])[j];
      total += diff * diff;
    }
  CHECK(distortion(cb, f) == doctest::Approx(total / f.count()).epsilon(1e-6));  // float distances
}

TEST_CASE("codebook file round trip and corruption") {
  const auto dir = std::filesystem::temp_directory_path() / "speechrl_kmc_test";
  std::filesystem::remove_all(dir);
  Codebook cb{2, 3, {1, 2, 3, 4, 5, 6}, 0xabcdef};
  write_codebook(dir / "cb.kmc", cb);
  CHECK(read_codebook(dir / "cb.kmc") == cb);
  write_text_file((dir / "bad.kmc").string(), "KMC1xx");
  CHECK_THROWS_AS(read_codebook(dir / "bad.kmc"), DataError);
  std::filesystem::remove_all(dir);
}
