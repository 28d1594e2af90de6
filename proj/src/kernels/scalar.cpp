#include <cmath>

#include "palab/kernels.hpp"

namespace palab::kernels {
namespace {

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c_row = c + i * n;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) c_row[j] = 0.0;
    }
    const double* a_row = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double a_ip = a_row[p];
      const double* b_row = b + p * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] = c_row[j] + a_ip * b_row[j];
    }
  }
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

void add(std::size_t n, const double* x, const double* y, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
}

void mul(std::size_t n, const double* x, const double* y, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
}

void scale(std::size_t n, double alpha, const double* x, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

void relu(std::size_t n, const double* x, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(std::size_t n, const double* x, const double* dy,
                   double* dx) {
  for (std::size_t i = 0; i < n; ++i) dx[i] = dx[i] + (x[i] > 0.0 ? dy[i] : 0.0);
}

void adamw(std::size_t n, const AdamWStep& s, double* w, const double* g,
           double* m, double* v) {
  const double decay = s.learning_rate * s.weight_decay;
  const double one_minus_b1 = 1.0 - s.beta1;
  const double one_minus_b2 = 1.0 - s.beta2;
  for (std::size_t i = 0; i < n; ++i) {
    double wi = w[i] - decay * w[i];
    const double gi = g[i];
    const double mi = s.beta1 * m[i] + one_minus_b1 * gi;
    const double vi = s.beta2 * v[i] + one_minus_b2 * (gi * gi);
    const double m_hat = mi / s.bias_correction1;
    const double v_hat = vi / s.bias_correction2;
    wi = wi - s.learning_rate * m_hat / (std::sqrt(v_hat) + s.eps);
    m[i] = mi;
    v[i] = vi;
    w[i] = wi;
  }
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{"scalar", gemm,  axpy,          add,  mul,
                                 scale,    relu,  relu_backward, adamw};
  return table;
}

}  // namespace palab::kernels
