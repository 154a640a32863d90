#include <doctest.h>

#include <array>
#include <cmath>

#include "speechrl/common.hpp"
#include "speechrl/kernels.hpp"

using namespace speechrl;
namespace k = speechrl::kernels;

namespace {

template <class T>
std::vector<T> random_matrix(Rng& rng, int rows, int cols) {
  std::vector<T> m(static_cast<std::size_t>(rows) * cols);
  for (auto& x : m) x = static_cast<T>(rng.normal());
  return m;
}

template <class T>
double max_rel_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double den = std::max({std::abs(double(a[i])), std::abs(double(b[i])), 1.0});
    worst = std::max(worst, std::abs(double(a[i]) - double(b[i])) / den);
  }
  return worst;
}

}  // namespace

TEST_CASE_TEMPLATE("omp matmul kernels agree with the serial reference", T, float, double) {
  Rng rng(17);
  const double tol = sizeof(T) == 4 ? 1e-5 : 1e-12;
  for (auto [m, kk, n] : std::array<std::array<int, 3>, 3>{{{3, 5, 7}, {64, 64, 96}, {40, 128, 512}}}) {
    const auto a = random_matrix<T>(rng, m, kk);
    const auto b = random_matrix<T>(rng, kk, n);
    const auto bt = random_matrix<T>(rng, n, kk);
    const auto g = random_matrix<T>(rng, m, n);
    const auto c0 = random_matrix<T>(rng, m, n);

    std::vector<T> s(c0), o(c0);
    k::serial::matmul<T>(a, b, s, m, kk, n);
    k::omp::matmul<T>(a, b, o, m, kk, n);
    CHECK(max_rel_diff(s, o) < tol);

    s = c0;
    o = c0;
    k::serial::matmul<T>(a, b, s, m, kk, n, true);
    k::omp::matmul<T>(a, b, o, m, kk, n, true);
    CHECK(max_rel_diff(s, o) < tol);

    k::serial::matmul_bt<T>(a, bt, s, m, kk, n);
    k::omp::matmul_bt<T>(a, bt, o, m, kk, n);
    CHECK(max_rel_diff(s, o) < tol);

    std::vector<T> ws(static_cast<std::size_t>(kk) * n, T(0.5)), wo = ws;
    k::serial::matmul_at_acc<T>(a, g, ws, m, kk, n);
    k::omp::matmul_at_acc<T>(a, g, wo, m, kk, n);
    CHECK(max_rel_diff(ws, wo) < tol);
  }
}

TEST_CASE("serial matmul matches hand arithmetic") {
  const std::vector<double> a{1, 2, 3, 4};  // 2x2
  const std::vector<double> b{5, 6, 7, 8};
  std::vector<double> c(4);
  k::serial::matmul<double>(a, b, c, 2, 2, 2);
  CHECK(c == std::vector<double>{19, 22, 43, 50});
  k::serial::matmul_bt<double>(a, b, c, 2, 2, 2);
  CHECK(c == std::vector<double>{17, 23, 39, 53});
}

TEST_CASE("nearest centroid: serial and omp give identical ids and distances") {
  Rng rng(23);
  const int n = 2000, kc = 37, dim = 16;
  const auto pts = random_matrix<float>(rng, n, dim);
  const auto cents = random_matrix<float>(rng, kc, dim);
  std::vector<std::int32_t> is(n), io(n);
  std::vector<double> ds(n), dd(n);
  k::serial::nearest_centroid(pts, cents, n, kc, dim, is, ds);
  k::omp::nearest_centroid(pts, cents, n, kc, dim, io, dd);
  CHECK(is == io);
  CHECK(ds == dd);
}

TEST_CASE("nearest centroid breaks ties toward the lower id") {
  const std::vector<float> cents{0, 0, 1, 1};
  const std::vector<float> pts{0.5f, 0.5f};
  std::vector<std::int32_t> id(1);
  std::vector<double> dist(1);
  k::serial::nearest_centroid(pts, cents, 1, 2, 2, id, dist);
  CHECK(id[0] == 0);
  CHECK(dist[0] == doctest::Approx(0.5));
}
