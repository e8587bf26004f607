// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>

namespace peftlab::kernels {

// Single-precision GEMM with explicit leading dimensions; C is overwritten.
//
// Each C[i,j] is accumulated left to right over k with one fused
// multiply-add per term (plain multiply-add when the target lacks FMA). It
// depends only on row i of A and column j of B, never on m, n or how the
// caller tiles the problem, and appending zero terms leaves it bitwise
// unchanged. The three layouts below agree bit for bit on the same operands.

// C[m,n] = A[m,k] * B[n,k]^T
void gemm_nt(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
             std::size_t ldc, std::size_t m, std::size_t n, std::size_t k);
// C[m,n] = A[m,k] * B[k,n]
void gemm_nn(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
             std::size_t ldc, std::size_t m, std::size_t n, std::size_t k);
// C[m,n] = A[k,m]^T * B[k,n]
void gemm_tn(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
             std::size_t ldc, std::size_t m, std::size_t n, std::size_t k);

// out[n,m] = in[m,n]^T
void transpose(const float* in, float* out, std::size_t m, std::size_t n);

// Element-wise exp / tanh through Eigen's packet math. Inputs are always fed
// in aligned, zero-padded groups of eight, so an element's result does not
// depend on its neighbours, its address or n. `in` and `out` may alias.
void vexp(const float* in, float* out, std::size_t n);
void vtanh(const float* in, float* out, std::size_t n);

// IEEE binary16 round-to-nearest-even, widened back to float.
float round_to_f16(float x);
void round_to_f16(std::span<float> values);
bool is_f16_exact(float x);

}  // namespace peftlab::kernels
