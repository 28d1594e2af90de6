#include <atomic>
#include <cstdlib>
#include <string_view>

#include "palab/kernels.hpp"

namespace palab::kernels {

#if defined(PALAB_HAVE_AVX2)
const KernelTable& avx2_table_unchecked();
#endif

const KernelTable* avx2_table() {
#if defined(PALAB_HAVE_AVX2)
  static const bool supported = __builtin_cpu_supports("avx2");
  return supported ? &avx2_table_unchecked() : nullptr;
#else
  return nullptr;
#endif
}

namespace {

const KernelTable* best_table() {
  const KernelTable* simd = avx2_table();
  return simd != nullptr ? simd : &scalar_table();
}

const KernelTable* lookup(std::string_view name) {
  if (name == "scalar") return &scalar_table();
  if (name == "avx2") return avx2_table();
  if (name == "auto") return best_table();
  return nullptr;
}

const KernelTable* initial_table() {
  if (const char* env = std::getenv("PALAB_KERNELS")) {
    if (const KernelTable* t = lookup(env)) return t;
  }
  return best_table();
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{initial_table()};
  return table;
}

}  // namespace

const KernelTable& active() { return *current().load(std::memory_order_relaxed); }

bool select(std::string_view name) {
  const KernelTable* t = lookup(name);
  if (t == nullptr) return false;
  current().store(t, std::memory_order_relaxed);
  return true;
}

}  // namespace palab::kernels
