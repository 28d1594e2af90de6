#include <cstring>
#include <vector>

#include "doctest.h"
#include "palab/kernels.hpp"
#include "palab/rng.hpp"

using namespace palab;

namespace {

std::vector<double> randoms(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform() * 2.0 - 1.0;
  return v;
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("scalar gemm matches hand products") {
  const auto& k = kernels::scalar_table();
  const double a[] = {1, 0, 0, 1};
  const double b[] = {5, 6, 7, 8};
  double c[4];
  k.gemm(2, 2, 2, a, b, c, false);
  CHECK(c[0] == 5);
  CHECK(c[3] == 8);
  const double r[] = {1, 2};
  const double col[] = {3, 4};
  double dot = 0;
  k.gemm(1, 1, 2, r, col, &dot, false);
  CHECK(dot == 11);
  k.gemm(1, 1, 2, r, col, &dot, true);
  CHECK(dot == 22);
}

TEST_CASE("avx2 kernels agree bit for bit with scalar") {
  const kernels::KernelTable* simd = kernels::avx2_table();
  if (simd == nullptr) {
    MESSAGE("no AVX2 on this host; equivalence not exercised");
    return;
  }
  const auto& ref = kernels::scalar_table();
  Rng rng(7);
  for (std::size_t m : {1u, 3u, 8u}) {
    for (std::size_t n : {1u, 3u, 4u, 5u, 15u, 16u, 17u, 33u, 64u}) {
      for (std::size_t kk : {0u, 1u, 7u, 16u}) {
        const auto a = randoms(m * kk, rng);
        const auto b = randoms(kk * n, rng);
        auto c1 = randoms(m * n, rng);
        auto c2 = c1;
        ref.gemm(m, n, kk, a.data(), b.data(), c1.data(), true);
        simd->gemm(m, n, kk, a.data(), b.data(), c2.data(), true);
        CHECK(same_bits(c1, c2));
        ref.gemm(m, n, kk, a.data(), b.data(), c1.data(), false);
        simd->gemm(m, n, kk, a.data(), b.data(), c2.data(), false);
        CHECK(same_bits(c1, c2));
      }
    }
  }
  for (std::size_t n : {0u, 1u, 3u, 4u, 7u, 64u, 1001u}) {
    const auto x = randoms(n, rng);
    const auto y = randoms(n, rng);
    std::vector<double> o1(n), o2(n);
    ref.add(n, x.data(), y.data(), o1.data());
    simd->add(n, x.data(), y.data(), o2.data());
    CHECK(same_bits(o1, o2));
    ref.mul(n, x.data(), y.data(), o1.data());
    simd->mul(n, x.data(), y.data(), o2.data());
    CHECK(same_bits(o1, o2));
    ref.scale(n, 0.37, x.data(), o1.data());
    simd->scale(n, 0.37, x.data(), o2.data());
    CHECK(same_bits(o1, o2));
    ref.relu(n, x.data(), o1.data());
    simd->relu(n, x.data(), o2.data());
    CHECK(same_bits(o1, o2));
    o1 = y;
    o2 = y;
    ref.axpy(n, -1.5, x.data(), o1.data());
    simd->axpy(n, -1.5, x.data(), o2.data());
    CHECK(same_bits(o1, o2));
    o1 = y;
    o2 = y;
    ref.relu_backward(n, x.data(), y.data(), o1.data());
    simd->relu_backward(n, x.data(), y.data(), o2.data());
    CHECK(same_bits(o1, o2));

    auto w1 = x;
    auto w2 = x;
    auto m1 = randoms(n, rng);
    auto m2 = m1;
    auto v1 = std::vector<double>(n, 0.25);
    auto v2 = v1;
    const kernels::AdamWStep s{1e-3, 0.01, 0.9, 0.999, 1e-8, 1 - 0.9 * 0.9, 1 - 0.999 * 0.999};
    ref.adamw(n, s, w1.data(), y.data(), m1.data(), v1.data());
    simd->adamw(n, s, w2.data(), y.data(), m2.data(), v2.data());
    CHECK(same_bits(w1, w2));
    CHECK(same_bits(m1, m2));
    CHECK(same_bits(v1, v2));
  }
}

TEST_CASE("kernel selection by name") {
  const auto before = kernels::active().name;
  CHECK(kernels::select("scalar"));
  CHECK(kernels::active().name == "scalar");
  CHECK_FALSE(kernels::select("sse9"));
  CHECK(kernels::active().name == "scalar");
  CHECK(kernels::select("auto"));
  CHECK(kernels::select(before));
}
