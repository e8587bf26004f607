// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/kernels.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <vector>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

namespace peftlab::kernels {
namespace {

// Register tile: kMr rows of A against one packed panel of kNr columns of B.
constexpr std::size_t kMr = 6;
constexpr std::size_t kVec = 8;
constexpr std::size_t kNv = 2;
constexpr std::size_t kNr = kVec * kNv;

// A(i, p) = a[i * rs + p * cs]; B(p, j) = b[p * rs + j * cs].
struct View {
  const float* ptr;
  std::size_t rs;
  std::size_t cs;
};

// Panel layout: panel[p * kNr + jj] = B(p, j0 + jj), zero past column n.
void pack_panel(const View& b, std::size_t j0, std::size_t cols, std::size_t k, float* panel) {
  if (b.cs == 1) {
    for (std::size_t p = 0; p < k; ++p) {
      const float* src = b.ptr + p * b.rs + j0;
      float* dst = panel + p * kNr;
      std::copy(src, src + cols, dst);
      std::fill(dst + cols, dst + kNr, 0.0f);
    }
    return;
  }
  for (std::size_t jj = 0; jj < kNr; ++jj) {
    if (jj < cols) {
      const float* src = b.ptr + (j0 + jj) * b.cs;
      for (std::size_t p = 0; p < k; ++p) panel[p * kNr + jj] = src[p * b.rs];
    } else {
      for (std::size_t p = 0; p < k; ++p) panel[p * kNr + jj] = 0.0f;
    }
  }
}

// Row-panel layout: apanel[p * kMr + r] = A(i0 + r, p), zero past row m.
void pack_rows(const View& a, std::size_t i0, std::size_t rows, std::size_t k, float* apanel) {
  for (std::size_t p = 0; p < k; ++p) {
    float* dst = apanel + p * kMr;
    for (std::size_t r = 0; r < rows; ++r) dst[r] = a.ptr[(i0 + r) * a.rs + p * a.cs];
    for (std::size_t r = rows; r < kMr; ++r) dst[r] = 0.0f;
  }
}

// Every C(i, j) is a plain left-to-right sum over p of fused multiply-adds,
// so it depends only on row i of A and column j of B, and trailing zero
// terms leave it unchanged.
#if defined(__AVX2__) && defined(__FMA__)
template <std::size_t R>
void micro_kernel(const float* apanel, const float* bpanel, std::size_t k, float* c, std::size_t ldc,
                  std::size_t cols) {
  __m256 acc[R][kNv];
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t v = 0; v < kNv; ++v) acc[r][v] = _mm256_setzero_ps();
  }
  for (std::size_t p = 0; p < k; ++p) {
    __m256 bv[kNv];
    for (std::size_t v = 0; v < kNv; ++v) bv[v] = _mm256_loadu_ps(bpanel + p * kNr + v * kVec);
    for (std::size_t r = 0; r < R; ++r) {
      const __m256 av = _mm256_broadcast_ss(apanel + p * kMr + r);
      for (std::size_t v = 0; v < kNv; ++v) acc[r][v] = _mm256_fmadd_ps(av, bv[v], acc[r][v]);
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    float* dst = c + r * ldc;
    if (cols == kNr) {
      for (std::size_t v = 0; v < kNv; ++v) _mm256_storeu_ps(dst + v * kVec, acc[r][v]);
    } else {
      alignas(32) float tmp[kNr];
      for (std::size_t v = 0; v < kNv; ++v) _mm256_store_ps(tmp + v * kVec, acc[r][v]);
      std::copy(tmp, tmp + cols, dst);
    }
  }
}
#else
template <std::size_t R>
void micro_kernel(const float* apanel, const float* bpanel, std::size_t k, float* c, std::size_t ldc,
                  std::size_t cols) {
  float acc[R][kNr] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const float* bp = bpanel + p * kNr;
    for (std::size_t r = 0; r < R; ++r) {
      const float av = apanel[p * kMr + r];
      for (std::size_t jj = 0; jj < kNr; ++jj) acc[r][jj] += av * bp[jj];
    }
  }
  for (std::size_t r = 0; r < R; ++r) std::copy(acc[r], acc[r] + cols, c + r * ldc);
}
#endif

void gemm(const View& a, const View& b, float* c, std::size_t ldc, std::size_t m, std::size_t n,
          std::size_t k) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (std::size_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, 0.0f);
    return;
  }
  const std::size_t row_panels = (m + kMr - 1) / kMr;
  thread_local std::vector<float> apack, bpack;
  apack.resize(row_panels * kMr * k);
  bpack.resize(k * kNr);
  for (std::size_t ip = 0; ip < row_panels; ++ip) {
    const std::size_t i0 = ip * kMr;
    pack_rows(a, i0, std::min(kMr, m - i0), k, apack.data() + ip * kMr * k);
  }
  for (std::size_t j0 = 0; j0 < n; j0 += kNr) {
    const std::size_t cols = std::min(kNr, n - j0);
    pack_panel(b, j0, cols, k, bpack.data());
    for (std::size_t ip = 0; ip < row_panels; ++ip) {
      const std::size_t i0 = ip * kMr;
      const float* ap = apack.data() + ip * kMr * k;
      float* cp = c + i0 * ldc + j0;
      switch (std::min(kMr, m - i0)) {
        case 6: micro_kernel<6>(ap, bpack.data(), k, cp, ldc, cols); break;
        case 5: micro_kernel<5>(ap, bpack.data(), k, cp, ldc, cols); break;
        case 4: micro_kernel<4>(ap, bpack.data(), k, cp, ldc, cols); break;
        case 3: micro_kernel<3>(ap, bpack.data(), k, cp, ldc, cols); break;
        case 2: micro_kernel<2>(ap, bpack.data(), k, cp, ldc, cols); break;
        default: micro_kernel<1>(ap, bpack.data(), k, cp, ldc, cols); break;
      }
    }
  }
}

}  // namespace

void gemm_nt(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
             std::size_t ldc, std::size_t m, std::size_t n, std::size_t k) {
  gemm({a, lda, 1}, {b, 1, ldb}, c, ldc, m, n, k);
}

void gemm_nn(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
             std::size_t ldc, std::size_t m, std::size_t n, std::size_t k) {
  gemm({a, lda, 1}, {b, ldb, 1}, c, ldc, m, n, k);
}

void gemm_tn(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
             std::size_t ldc, std::size_t m, std::size_t n, std::size_t k) {
  gemm({a, 1, lda}, {b, ldb, 1}, c, ldc, m, n, k);
}

void transpose(const float* in, float* out, std::size_t m, std::size_t n) {
  constexpr std::size_t kTile = 32;
  for (std::size_t i0 = 0; i0 < m; i0 += kTile) {
    for (std::size_t j0 = 0; j0 < n; j0 += kTile) {
      const std::size_t i1 = std::min(m, i0 + kTile);
      const std::size_t j1 = std::min(n, j0 + kTile);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) out[j * m + i] = in[i * n + j];
      }
    }
  }
}

namespace {

using Chunk = Eigen::Array<float, 8, 1>;

template <class Fn>
void chunked(const float* in, float* out, std::size_t n, Fn fn) {
  alignas(32) float buf[8];
  for (std::size_t i = 0; i < n; i += 8) {
    const std::size_t len = std::min<std::size_t>(8, n - i);
    std::copy(in + i, in + i + len, buf);
    std::fill(buf + len, buf + 8, 0.0f);
    Eigen::Map<Chunk, Eigen::Aligned32> v(buf);
    v = fn(v);
    std::copy(buf, buf + len, out + i);
  }
}

}  // namespace

void vexp(const float* in, float* out, std::size_t n) {
  chunked(in, out, n, [](const auto& v) { return v.exp().eval(); });
}

void vtanh(const float* in, float* out, std::size_t n) {
  chunked(in, out, n, [](const auto& v) { return v.tanh().eval(); });
}

float round_to_f16(float x) { return static_cast<float>(Eigen::half(x)); }

void round_to_f16(std::span<float> values) {
  for (float& v : values) v = static_cast<float>(Eigen::half(v));
}

bool is_f16_exact(float x) { return round_to_f16(x) == x; }

}  // namespace peftlab::kernels
