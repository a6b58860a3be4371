#include <cmath>
#include <cstring>

#include "gmoe/simd/kernels.hpp"

// Reference kernels. Plain loops, no tricks: these define the semantics the
// vector variants are tested against.

namespace gmoe::simd {
namespace {

template <typename T>
void add_k(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void sub_k(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

template <typename T>
void mul_k(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <typename T>
void scale_k(const T* x, T alpha, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

template <typename T>
void axpy_k(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void relu_k(const T* x, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_mask_k(const T* x, const T* g, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? g[i] : T(0);
}

template <typename T>
T dot_k(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T sum_k(const T* x, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
T max_k(const T* x, std::size_t n) {
  T best = x[0];
  for (std::size_t i = 1; i < n; ++i)
    if (x[i] > best) best = x[i];
  return best;
}

template <typename T>
bool all_finite_k(const T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

template <typename T>
void matmul_k(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
              std::size_t n) {
  std::memset(c, 0, m * n * sizeof(T));
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <typename T>
void adam_k(T* p, const T* g, T* m, T* v, std::size_t n, T lr, T beta1,
            T beta2, T eps, T bc1, T bc2) {
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
    v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
    const T mhat = m[i] / bc1;
    const T vhat = v[i] / bc2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

template <typename T>
Kernels<T> make_table() {
  Kernels<T> t;
  t.add = add_k<T>;
  t.sub = sub_k<T>;
  t.mul = mul_k<T>;
  t.scale = scale_k<T>;
  t.axpy = axpy_k<T>;
  t.relu = relu_k<T>;
  t.relu_mask = relu_mask_k<T>;
  t.dot = dot_k<T>;
  t.sum = sum_k<T>;
  t.max = max_k<T>;
  t.all_finite = all_finite_k<T>;
  t.matmul = matmul_k<T>;
  t.adam_update = adam_k<T>;
  return t;
}

}  // namespace

namespace detail {

template <>
const Kernels<float>& scalar_kernels<float>() {
  static const Kernels<float> t = make_table<float>();
  return t;
}

template <>
const Kernels<double>& scalar_kernels<double>() {
  static const Kernels<double> t = make_table<double>();
  return t;
}

}  // namespace detail
}  // namespace gmoe::simd
