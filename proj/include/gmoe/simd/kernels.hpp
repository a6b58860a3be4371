#pragma once

#include <cstddef>

// Data-parallel inner loops behind every tensor operation. Each kernel has a
// scalar reference implementation and (on x86-64) an AVX2/FMA variant; the
// active set is picked once at runtime from CPUID, overridable with
// GMOE_KERNELS=scalar|avx2. Scalar and vector variants are equivalence-tested
// against each other in tests/test_kernels.cpp.

namespace gmoe::simd {

enum class Isa { scalar, avx2 };

const char* isa_name(Isa isa);

// Best ISA this process can run (CPUID + env override).
Isa detected_isa();

// Table currently used by the tensor layer.
Isa active_isa();

// Swap the active table (test hook). Throws if the ISA is unavailable.
void set_active_isa(Isa isa);

template <typename T>
struct Kernels {
  void (*add)(const T* a, const T* b, T* out, std::size_t n);
  void (*sub)(const T* a, const T* b, T* out, std::size_t n);
  void (*mul)(const T* a, const T* b, T* out, std::size_t n);
  void (*scale)(const T* x, T alpha, T* out, std::size_t n);
  void (*axpy)(T alpha, const T* x, T* y, std::size_t n);  // y += alpha*x
  void (*relu)(const T* x, T* out, std::size_t n);
  void (*relu_mask)(const T* x, const T* g, T* out, std::size_t n);  // g where x>0
  T (*dot)(const T* a, const T* b, std::size_t n);
  T (*sum)(const T* x, std::size_t n);
  T (*max)(const T* x, std::size_t n);  // requires n >= 1
  bool (*all_finite)(const T* x, std::size_t n);
  // c = a @ b, row-major, c overwritten. a: m x k, b: k x n.
  void (*matmul)(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                 std::size_t n);
  // Fused Adam update with precomputed bias corrections bc1 = 1-beta1^t,
  // bc2 = 1-beta2^t. Weight decay is applied by the caller beforehand.
  void (*adam_update)(T* p, const T* g, T* m, T* v, std::size_t n, T lr,
                      T beta1, T beta2, T eps, T bc1, T bc2);
};

template <typename T>
const Kernels<T>& kernels();  // active table

template <typename T>
const Kernels<T>& kernels_for(Isa isa);  // explicit table (tests)

namespace detail {
template <typename T>
const Kernels<T>& scalar_kernels();
#if defined(__x86_64__) || defined(_M_X64)
template <typename T>
const Kernels<T>& avx2_kernels();
#endif
}  // namespace detail

}  // namespace gmoe::simd
