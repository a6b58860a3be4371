// Scalar reference vs AVX2 equivalence for every kernel, plus basic semantics.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "gmoe/rng.hpp"
#include "gmoe/simd/kernels.hpp"

using namespace gmoe;
using simd::Isa;

namespace {

template <typename T>
std::vector<T> random_vec(RngStream& rng, std::size_t n, double lo = -2.0,
                          double hi = 2.0) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(lo + (hi - lo) * rng.uniform());
  return v;
}

bool have_avx2() { return simd::detected_isa() == Isa::avx2; }

// Sizes chosen to exercise full vectors plus every remainder-lane count.
const std::size_t kSizes[] = {1, 2, 3, 4, 5, 7, 8, 9, 15, 16, 17, 31, 64, 1000};

}  // namespace

TEST_CASE_TEMPLATE("elementwise kernels agree bitwise across ISAs", T, float,
                   double) {
  if (!have_avx2()) return;
  const auto& ref = simd::kernels_for<T>(Isa::scalar);
  const auto& vec = simd::kernels_for<T>(Isa::avx2);
  RngStream rng(42);

  for (std::size_t n : kSizes) {
    auto a = random_vec<T>(rng, n);
    auto b = random_vec<T>(rng, n);
    std::vector<T> out_s(n), out_v(n);

    ref.add(a.data(), b.data(), out_s.data(), n);
    vec.add(a.data(), b.data(), out_v.data(), n);
    CHECK(out_s == out_v);

    ref.sub(a.data(), b.data(), out_s.data(), n);
    vec.sub(a.data(), b.data(), out_v.data(), n);
    CHECK(out_s == out_v);

    ref.mul(a.data(), b.data(), out_s.data(), n);
    vec.mul(a.data(), b.data(), out_v.data(), n);
    CHECK(out_s == out_v);

    ref.scale(a.data(), T(1.7), out_s.data(), n);
    vec.scale(a.data(), T(1.7), out_v.data(), n);
    CHECK(out_s == out_v);

    ref.relu(a.data(), out_s.data(), n);
    vec.relu(a.data(), out_v.data(), n);
    CHECK(out_s == out_v);

    ref.relu_mask(a.data(), b.data(), out_s.data(), n);
    vec.relu_mask(a.data(), b.data(), out_v.data(), n);
    CHECK(out_s == out_v);
  }
}

TEST_CASE_TEMPLATE("axpy agrees across ISAs within fma rounding", T, float,
                   double) {
  if (!have_avx2()) return;
  const auto& ref = simd::kernels_for<T>(Isa::scalar);
  const auto& vec = simd::kernels_for<T>(Isa::avx2);
  RngStream rng(7);
  const T tol = std::is_same_v<T, float> ? T(1e-6) : T(1e-15);

  for (std::size_t n : kSizes) {
    auto x = random_vec<T>(rng, n);
    auto y0 = random_vec<T>(rng, n);
    auto y1 = y0, y2 = y0;
    ref.axpy(T(0.37), x.data(), y1.data(), n);
    vec.axpy(T(0.37), x.data(), y2.data(), n);
    for (std::size_t i = 0; i < n; ++i)
      CHECK(std::abs(y1[i] - y2[i]) <= tol * (std::abs(y1[i]) + T(1)));
  }
}

TEST_CASE_TEMPLATE("reductions agree across ISAs within reassociation slack",
                   T, float, double) {
  if (!have_avx2()) return;
  const auto& ref = simd::kernels_for<T>(Isa::scalar);
  const auto& vec = simd::kernels_for<T>(Isa::avx2);
  RngStream rng(11);
  const double tol = std::is_same_v<T, float> ? 1e-4 : 1e-12;

  for (std::size_t n : kSizes) {
    auto a = random_vec<T>(rng, n);
    auto b = random_vec<T>(rng, n);
    CHECK(std::abs(double(ref.dot(a.data(), b.data(), n)) -
                   double(vec.dot(a.data(), b.data(), n))) <= tol * double(n));
    CHECK(std::abs(double(ref.sum(a.data(), n)) -
                   double(vec.sum(a.data(), n))) <= tol * double(n));
    CHECK(ref.max(a.data(), n) == vec.max(a.data(), n));
  }
}

TEST_CASE_TEMPLATE("all_finite agrees and catches NaN/Inf in any lane", T,
                   float, double) {
  const auto& act = simd::kernels<T>();
  RngStream rng(3);
  for (std::size_t n : kSizes) {
    auto a = random_vec<T>(rng, n);
    CHECK(act.all_finite(a.data(), n));
    for (std::size_t pos : {std::size_t(0), n / 2, n - 1}) {
      auto bad = a;
      bad[pos] = std::numeric_limits<T>::quiet_NaN();
      CHECK_FALSE(act.all_finite(bad.data(), n));
      bad[pos] = std::numeric_limits<T>::infinity();
      CHECK_FALSE(act.all_finite(bad.data(), n));
      bad[pos] = -std::numeric_limits<T>::infinity();
      CHECK_FALSE(act.all_finite(bad.data(), n));
    }
  }
}

TEST_CASE_TEMPLATE("matmul agrees across ISAs and with a naive oracle", T,
                   float, double) {
  const auto& act = simd::kernels<T>();
  RngStream rng(5);
  const double tol = std::is_same_v<T, float> ? 1e-4 : 1e-12;

  for (std::size_t m : {1, 2, 5, 8}) {
    for (std::size_t k : {1, 3, 7, 8}) {
      for (std::size_t n : {1, 2, 4, 8, 13}) {
        auto a = random_vec<T>(rng, m * k, -1.0, 1.0);
        auto b = random_vec<T>(rng, k * n, -1.0, 1.0);
        std::vector<T> c(m * n);
        act.matmul(a.data(), b.data(), c.data(), m, k, n);

        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            double acc = 0;
            for (std::size_t p = 0; p < k; ++p)
              acc += double(a[i * k + p]) * double(b[p * n + j]);
            CHECK(std::abs(acc - double(c[i * n + j])) <= tol);
          }

        if (have_avx2()) {
          const auto& ref = simd::kernels_for<T>(Isa::scalar);
          std::vector<T> c2(m * n);
          ref.matmul(a.data(), b.data(), c2.data(), m, k, n);
          for (std::size_t i = 0; i < m * n; ++i)
            CHECK(std::abs(double(c[i]) - double(c2[i])) <= tol);
        }
      }
    }
  }
}

TEST_CASE_TEMPLATE("adam kernel agrees across ISAs", T, float, double) {
  if (!have_avx2()) return;
  const auto& ref = simd::kernels_for<T>(Isa::scalar);
  const auto& vec = simd::kernels_for<T>(Isa::avx2);
  RngStream rng(13);
  const double tol = std::is_same_v<T, float> ? 1e-6 : 1e-14;

  for (std::size_t n : kSizes) {
    auto p = random_vec<T>(rng, n);
    auto g = random_vec<T>(rng, n);
    auto m = random_vec<T>(rng, n, 0.0, 0.1);
    auto v = random_vec<T>(rng, n, 0.0, 0.1);
    auto p2 = p, m2 = m, v2 = v;
    const T bc1 = T(0.1), bc2 = T(0.001);
    ref.adam_update(p.data(), g.data(), m.data(), v.data(), n, T(1e-3), T(0.9),
                    T(0.999), T(1e-8), bc1, bc2);
    vec.adam_update(p2.data(), g.data(), m2.data(), v2.data(), n, T(1e-3),
                    T(0.9), T(0.999), T(1e-8), bc1, bc2);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::abs(double(p[i]) - double(p2[i])) <= tol);
      CHECK(std::abs(double(m[i]) - double(m2[i])) <= tol);
      CHECK(std::abs(double(v[i]) - double(v2[i])) <= tol);
    }
  }
}

TEST_CASE("dispatch respects availability and the test hook") {
  const Isa before = simd::active_isa();
  simd::set_active_isa(Isa::scalar);
  CHECK(simd::active_isa() == Isa::scalar);
  CHECK(simd::kernels<double>().add ==
        simd::kernels_for<double>(Isa::scalar).add);
  if (have_avx2()) {
    simd::set_active_isa(Isa::avx2);
    CHECK(simd::kernels<double>().add ==
          simd::kernels_for<double>(Isa::avx2).add);
  }
  simd::set_active_isa(before);
}
