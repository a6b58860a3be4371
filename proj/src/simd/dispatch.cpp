#include <atomic>
#include <cstdlib>
#include <cstring>
#include <stdexcept>

#include "gmoe/simd/kernels.hpp"

namespace gmoe::simd {
namespace {

bool avx2_supported() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa pick_isa() {
  if (const char* env = std::getenv("GMOE_KERNELS")) {
    if (std::strcmp(env, "scalar") == 0) return Isa::scalar;
    if (std::strcmp(env, "avx2") == 0 && avx2_supported()) return Isa::avx2;
  }
  return avx2_supported() ? Isa::avx2 : Isa::scalar;
}

std::atomic<Isa>& active_slot() {
  static std::atomic<Isa> isa{pick_isa()};
  return isa;
}

}  // namespace

const char* isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
  }
  return "?";
}

Isa detected_isa() { return pick_isa(); }

Isa active_isa() { return active_slot().load(std::memory_order_relaxed); }

void set_active_isa(Isa isa) {
  if (isa == Isa::avx2 && !avx2_supported())
    throw std::runtime_error("avx2 kernels not supported on this CPU");
  active_slot().store(isa, std::memory_order_relaxed);
}

template <typename T>
const Kernels<T>& kernels_for(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return detail::scalar_kernels<T>();
    case Isa::avx2:
#if defined(__x86_64__) || defined(_M_X64)
      if (avx2_supported()) return detail::avx2_kernels<T>();
#endif
      throw std::runtime_error("avx2 kernels not available");
  }
  return detail::scalar_kernels<T>();
}

template <typename T>
const Kernels<T>& kernels() {
  return kernels_for<T>(active_isa());
}

template const Kernels<float>& kernels_for<float>(Isa);
template const Kernels<double>& kernels_for<double>(Isa);
template const Kernels<float>& kernels<float>();
template const Kernels<double>& kernels<double>();

}  // namespace gmoe::simd
