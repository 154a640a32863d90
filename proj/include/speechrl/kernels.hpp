#pragma once

// Dense kernels used by the clustering and transformer code. Each kernel has a
// serial reference in `serial::` and an OpenMP version in `omp::`; the rest of the
// library calls the unqualified names, which forward to `omp::`. All matrices are
// row-major. The OpenMP versions partition work over output rows only and keep the
// serial summation order inside each entry; results agree up to FMA contraction.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>

namespace speechrl::kernels {

namespace serial {

// C[m,n] (+)= A[m,k] * B[k,n]
template <class T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n,
            bool accumulate = false) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T sum = accumulate ? c[static_cast<std::size_t>(i) * n + j] : T(0);
      for (int p = 0; p < k; ++p) sum += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(p) * n + j];
      c[static_cast<std::size_t>(i) * n + j] = sum;
    }
  }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
template <class T>
void matmul_bt(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n,
               bool accumulate = false) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T sum = accumulate ? c[static_cast<std::size_t>(i) * n + j] : T(0);
      for (int p = 0; p < k; ++p) sum += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(j) * k + p];
      c[static_cast<std::size_t>(i) * n + j] = sum;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]   (weight-gradient shape)
template <class T>
void matmul_at_acc(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    for (int j = 0; j < n; ++j) {
      T sum = c[static_cast<std::size_t>(p) * n + j];
      for (int i = 0; i < m; ++i) sum += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(i) * n + j];
      c[static_cast<std::size_t>(p) * n + j] = sum;
    }
  }
}

// For each of n points, index of the nearest centroid under squared Euclidean
// distance (ties toward the lower index) and that squared distance.
inline void nearest_centroid(std::span<const float> points, std::span<const float> centroids, int n, int num_centroids,
                             int dim, std::span<std::int32_t> ids, std::span<double> sqdist) {
  for (int i = 0; i < n; ++i) {
    const float* x = points.data() + static_cast<std::size_t>(i) * dim;
    double best = std::numeric_limits<double>::infinity();
    std::int32_t best_id = 0;
    for (int c = 0; c < num_centroids; ++c) {
      const float* mu = centroids.data() + static_cast<std::size_t>(c) * dim;
      double d = 0.0;
      for (int j = 0; j < dim; ++j) {
        const double diff = static_cast<double>(x[j]) - static_cast<double>(mu[j]);
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        best_id = c;
      }
    }
    ids[i] = best_id;
    sqdist[i] = best;
  }
}

}  // namespace serial

namespace omp {

template <class T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n,
            bool accumulate = false) {
#pragma omp parallel for schedule(static) if (static_cast<long>(m) * k * n > 32768)
  for (int i = 0; i < m; ++i) {
    T* crow = c.data() + static_cast<std::size_t>(i) * n;
    if (!accumulate)
      for (int j = 0; j < n; ++j) crow[j] = T(0);
    const T* arow = a.data() + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b.data() + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void matmul_bt(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n,
               bool accumulate = false) {
#pragma omp parallel for schedule(static) if (static_cast<long>(m) * k * n > 32768)
  for (int i = 0; i < m; ++i) {
    const T* arow = a.data() + static_cast<std::size_t>(i) * k;
    T* crow = c.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b.data() + static_cast<std::size_t>(j) * k;
      T sum = accumulate ? crow[j] : T(0);
      for (int p = 0; p < k; ++p) sum += arow[p] * brow[p];
      crow[j] = sum;
    }
  }
}

template <class T>
void matmul_at_acc(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<long>(m) * k * n > 32768)
  for (int p = 0; p < k; ++p) {
    T* crow = c.data() + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = a[static_cast<std::size_t>(i) * k + p];
      const T* brow = b.data() + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void nearest_centroid(std::span<const float> points, std::span<const float> centroids, int n, int num_centroids,
                             int dim, std::span<std::int32_t> ids, std::span<double> sqdist) {
#pragma omp parallel for schedule(static) if (n > 256)
  for (int i = 0; i < n; ++i) {
    serial::nearest_centroid(points.subspan(static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)),
                             centroids, 1, num_centroids, dim, ids.subspan(static_cast<std::size_t>(i), 1),
                             sqdist.subspan(static_cast<std::size_t>(i), 1));
  }
}

}  // namespace omp

using omp::matmul;
using omp::matmul_at_acc;
using omp::matmul_bt;
using omp::nearest_centroid;

}  // namespace speechrl::kernels
