// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "peftlab/tensor.hpp"

// Differentiable tensor operations. Every op takes the Graph it records into,
// never mutates its inputs, and returns an f32 tensor. Shape violations throw
// ShapeMismatch; when the library is built with finite checks, a NaN or Inf in
// any output throws NonFiniteValue.
namespace peftlab::ops {

// C[m,n] = A[m,k] B[k,n]. With compute = kF16 both operands are rounded to
// binary16 before the products; accumulation stays f32.
Tensor matmul(Graph& g, const Tensor& a, const Tensor& b, DType compute = DType::kF32);

// C[m,n] = A[m,k] B[n,k]^T, the layout of a linear layer with weight [out,in].
Tensor matmul_nt(Graph& g, const Tensor& a, const Tensor& b, DType compute = DType::kF32);

// Same-shape add, or bias add when `b` is 1-D with the last extent of `a`.
Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);
Tensor mul_scalar(Graph& g, const Tensor& a, float s);
Tensor sum(Graph& g, const Tensor& a);
Tensor gelu(Graph& g, const Tensor& a);

// Softmax over the last axis of a 2-D tensor. With `causal`, row i sees only
// columns j <= i + causal_offset; hidden entries come out as exact zeros.
Tensor softmax(Graph& g, const Tensor& a, bool causal = false, std::size_t causal_offset = 0);

Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps = 1e-5f);

// Rows of `table` selected by `ids`.
Tensor embedding_lookup(Graph& g, const Tensor& table, std::span<const std::int32_t> ids);

// Mean of -log softmax(logits[t])[targets[t]] over rows with mask[t] set.
// Unmasked rows contribute exactly zero loss and zero gradient. Throws
// EmptyMask when no row is selected.
Tensor cross_entropy(Graph& g, const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask);

// Concatenation / slicing of 2-D tensors along axis 0 or 1.
Tensor concat(Graph& g, const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(Graph& g, const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor transpose(Graph& g, const Tensor& a);

// Rotary position encoding on x[T, n_heads * head_dim]; row t is rotated for
// position t + position_offset. Pairs (i, i + head_dim/2) are rotated by
// angle pos * base^(-2i/head_dim).
Tensor rope(Graph& g, const Tensor& x, std::size_t n_heads, std::size_t position_offset,
            float base = 10000.0f);

// Inverted dropout. Identity when p == 0.
Tensor dropout(Graph& g, const Tensor& x, float p, std::mt19937_64& rng);

}  // namespace peftlab::ops
