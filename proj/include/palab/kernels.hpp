#pragma once

// Dense f64 inner loops used by the autograd engine and the optimizer.
//
// Every kernel exists as a scalar reference and, on x86-64, as an AVX2
// variant picked at runtime. The variants vectorize across independent
// output elements only, so each element sees the same sequence of IEEE
// operations as in the scalar loop and the two agree bit for bit.

#include <cstddef>
#include <string_view>

namespace palab::kernels {

struct AdamWStep {
  double learning_rate;
  double weight_decay;
  double beta1;
  double beta2;
  double eps;
  double bias_correction1;  // 1 - beta1^t
  double bias_correction2;  // 1 - beta2^t
};

struct KernelTable {
  std::string_view name;

  // c[m,n] = a[m,k] * b[k,n], or c += a * b when accumulate is set.
  // All operands are row-major and contiguous. Each c[i,j] is summed in
  // increasing k order starting from its prior value (or zero).
  void (*gemm)(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate);

  // y += alpha * x
  void (*axpy)(std::size_t n, double alpha, const double* x, double* y);

  void (*add)(std::size_t n, const double* x, const double* y, double* out);
  void (*mul)(std::size_t n, const double* x, const double* y, double* out);
  void (*scale)(std::size_t n, double alpha, const double* x, double* out);

  void (*relu)(std::size_t n, const double* x, double* out);
  // dx += (x > 0) ? dy : 0
  void (*relu_backward)(std::size_t n, const double* x, const double* dy,
                        double* dx);

  // Decoupled weight decay followed by the bias-corrected Adam update.
  void (*adamw)(std::size_t n, const AdamWStep& step, double* w,
                const double* g, double* m, double* v);
};

const KernelTable& scalar_table();

// nullptr when the build has no AVX2 variant or the CPU lacks AVX2.
const KernelTable* avx2_table();

// The table used by the engine. Defaults to the best supported variant;
// PALAB_KERNELS=scalar|avx2 in the environment overrides the first lookup.
const KernelTable& active();

// Force a variant by name ("scalar", "avx2", "auto"). Returns false if the
// requested variant is unavailable; the active table is then unchanged.
bool select(std::string_view name);

}  // namespace palab::kernels
