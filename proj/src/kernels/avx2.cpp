#include <immintrin.h>

#include <cmath>

#include "palab/kernels.hpp"

namespace palab::kernels {
namespace {

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c_row = c + i * n;
    const double* a_row = a + i * k;
    std::size_t j = 0;
    // 16 output columns held in registers across the whole k loop.
    for (; j + 16 <= n; j += 16) {
      __m256d acc0, acc1, acc2, acc3;
      if (accumulate) {
        acc0 = _mm256_loadu_pd(c_row + j);
        acc1 = _mm256_loadu_pd(c_row + j + 4);
        acc2 = _mm256_loadu_pd(c_row + j + 8);
        acc3 = _mm256_loadu_pd(c_row + j + 12);
      } else {
        acc0 = acc1 = acc2 = acc3 = _mm256_setzero_pd();
      }
      for (std::size_t p = 0; p < k; ++p) {
        const __m256d a_ip = _mm256_set1_pd(a_row[p]);
        const double* b_row = b + p * n + j;
        acc0 = _mm256_add_pd(acc0, _mm256_mul_pd(a_ip, _mm256_loadu_pd(b_row)));
        acc1 = _mm256_add_pd(acc1, _mm256_mul_pd(a_ip, _mm256_loadu_pd(b_row + 4)));
        acc2 = _mm256_add_pd(acc2, _mm256_mul_pd(a_ip, _mm256_loadu_pd(b_row + 8)));
        acc3 = _mm256_add_pd(acc3, _mm256_mul_pd(a_ip, _mm256_loadu_pd(b_row + 12)));
      }
      _mm256_storeu_pd(c_row + j, acc0);
      _mm256_storeu_pd(c_row + j + 4, acc1);
      _mm256_storeu_pd(c_row + j + 8, acc2);
      _mm256_storeu_pd(c_row + j + 12, acc3);
    }
    for (; j + 4 <= n; j += 4) {
      __m256d acc = accumulate ? _mm256_loadu_pd(c_row + j) : _mm256_setzero_pd();
      for (std::size_t p = 0; p < k; ++p) {
        const __m256d a_ip = _mm256_set1_pd(a_row[p]);
        acc = _mm256_add_pd(acc, _mm256_mul_pd(a_ip, _mm256_loadu_pd(b + p * n + j)));
      }
      _mm256_storeu_pd(c_row + j, acc);
    }
    for (; j < n; ++j) {
      double acc = accumulate ? c_row[j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) acc = acc + a_row[p] * b[p * n + j];
      c_row[j] = acc;
    }
  }
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d vy = _mm256_loadu_pd(y + i);
    _mm256_storeu_pd(y + i, _mm256_add_pd(vy, _mm256_mul_pd(va, _mm256_loadu_pd(x + i))));
  }
  for (; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

void add(std::size_t n, const double* x, const double* y, double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) out[i] = x[i] + y[i];
}

void mul(std::size_t n, const double* x, const double* y, double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) out[i] = x[i] * y[i];
}

void scale(std::size_t n, double alpha, const double* x, double* out) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) out[i] = alpha * x[i];
}

void relu(std::size_t n, const double* x, double* out) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    // max_pd(a, b) returns b unless a > b, which matches the scalar select.
    _mm256_storeu_pd(out + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
  }
  for (; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(std::size_t n, const double* x, const double* dy,
                   double* dx) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d positive = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
    const __m256d pass = _mm256_and_pd(positive, _mm256_loadu_pd(dy + i));
    _mm256_storeu_pd(dx + i, _mm256_add_pd(_mm256_loadu_pd(dx + i), pass));
  }
  for (; i < n; ++i) dx[i] = dx[i] + (x[i] > 0.0 ? dy[i] : 0.0);
}

void adamw(std::size_t n, const AdamWStep& s, double* w, const double* g,
           double* m, double* v) {
  const double decay = s.learning_rate * s.weight_decay;
  const double one_minus_b1 = 1.0 - s.beta1;
  const double one_minus_b2 = 1.0 - s.beta2;
  const __m256d v_decay = _mm256_set1_pd(decay);
  const __m256d v_b1 = _mm256_set1_pd(s.beta1);
  const __m256d v_b2 = _mm256_set1_pd(s.beta2);
  const __m256d v_1mb1 = _mm256_set1_pd(one_minus_b1);
  const __m256d v_1mb2 = _mm256_set1_pd(one_minus_b2);
  const __m256d v_bc1 = _mm256_set1_pd(s.bias_correction1);
  const __m256d v_bc2 = _mm256_set1_pd(s.bias_correction2);
  const __m256d v_lr = _mm256_set1_pd(s.learning_rate);
  const __m256d v_eps = _mm256_set1_pd(s.eps);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d wi = _mm256_loadu_pd(w + i);
    wi = _mm256_sub_pd(wi, _mm256_mul_pd(v_decay, wi));
    const __m256d gi = _mm256_loadu_pd(g + i);
    const __m256d mi = _mm256_add_pd(_mm256_mul_pd(v_b1, _mm256_loadu_pd(m + i)),
                                     _mm256_mul_pd(v_1mb1, gi));
    const __m256d vi = _mm256_add_pd(_mm256_mul_pd(v_b2, _mm256_loadu_pd(v + i)),
                                     _mm256_mul_pd(v_1mb2, _mm256_mul_pd(gi, gi)));
    const __m256d m_hat = _mm256_div_pd(mi, v_bc1);
    const __m256d v_hat = _mm256_div_pd(vi, v_bc2);
    const __m256d step = _mm256_div_pd(_mm256_mul_pd(v_lr, m_hat),
                                       _mm256_add_pd(_mm256_sqrt_pd(v_hat), v_eps));
    wi = _mm256_sub_pd(wi, step);
    _mm256_storeu_pd(m + i, mi);
    _mm256_storeu_pd(v + i, vi);
    _mm256_storeu_pd(w + i, wi);
  }
  for (; i < n; ++i) {
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

const KernelTable& avx2_table_unchecked() {
  static const KernelTable table{"avx2", gemm,  axpy,          add,  mul,
                                 scale,  relu,  relu_backward, adamw};
  return table;
}

}  // namespace palab::kernels
