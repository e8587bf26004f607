// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include <boost/rational.hpp>

#include "peftlab/tensor.hpp"

namespace peftlab::quant {

using Rational = boost::rational<std::int64_t>;

// 16 strictly increasing code values spanning [-1, 1] with exactly one zero.
struct Codebook {
  std::array<float, 16> values{};

  // Index of the value nearest to `normalized`; ties go to the lower index.
  std::uint8_t nearest(float normalized) const;
  std::uint8_t zero_index() const;
  float max_adjacent_gap() const;
  // Throws InvalidConfig when the invariants above do not hold.
  void validate() const;
};

// Normal-float code set: quantiles of N(0,1) at evenly spaced probabilities,
// 7 strictly negative, one exact zero and 8 positive, scaled to [-1, 1].
Codebook build_nf4_codebook();
// Process-wide instance of build_nf4_codebook().
const Codebook& nf4_codebook();

struct QuantConfig {
  std::size_t block_size = 64;
  bool double_quant = true;
  std::size_t dq_group_size = 256;
};

// Block-wise 4-bit representation of an f32 tensor.
//
// Codes are packed two per byte, the even element in the low nibble. Each
// block of `block_size` consecutive elements shares one absmax scale. Under
// double quantization the absmax values are themselves stored as int8 codes
// in groups of `dq_group_size`, reconstructed as code * scale + offset.
struct QuantizedTensor {
  Shape shape;
  std::vector<std::uint8_t> codes;
  std::size_t block_size = 64;
  bool double_quantized = false;
  std::vector<float> absmax;  // plain scales, empty under double quantization

  std::size_t dq_group_size = 256;
  std::vector<std::int8_t> absmax_codes;
  std::vector<float> absmax_scale;
  std::vector<float> absmax_offset;

  Codebook codebook;

  std::size_t numel() const { return shape_numel(shape); }
  std::size_t num_blocks() const { return (numel() + block_size - 1) / block_size; }
  std::size_t num_groups() const { return (num_blocks() + dq_group_size - 1) / dq_group_size; }

  std::uint8_t code(std::size_t index) const;
  // First-level scale of `block` as the dequantizer sees it.
  float block_absmax(std::size_t block) const;
  // Dequantized value of one element in f32.
  float value(std::size_t index) const;
  // Bytes occupied by codes and scale storage.
  std::size_t storage_bytes() const;

  // Throws CorruptIndex when array sizes disagree with shape/block settings.
  void validate() const;
};

std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> codes);
std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> packed, std::size_t count);

// Throws NonFiniteInput for NaN/Inf input and InvalidConfig for zero sizes.
QuantizedTensor quantize(const Tensor& x, const QuantConfig& config,
                         const Codebook& codebook = nf4_codebook());

Tensor dequantize(const QuantizedTensor& q, DType out_dtype);

// Exact storage cost per logical element: 4 + 32/block without double
// quantization, 4 + 8/block + 64/(block * group) with it.
Rational bits_per_parameter(std::size_t block_size, bool double_quant, std::size_t dq_group_size);
Rational bits_per_parameter(const QuantizedTensor& q);

// x[T, in] times the dequantized (f16) weight [out, in] transposed, with f16
// products and f32 accumulation. Rows of the weight are dequantized in
// panels, never the whole matrix at once, yet the result is bitwise equal to
// ops::matmul(x, transpose(dequantize(q, f16)), kF16). Only x receives a
// gradient; the quantized weight is frozen.
Tensor qmatmul(Graph& g, const Tensor& x, std::shared_ptr<const QuantizedTensor> weight);

}  // namespace peftlab::quant
