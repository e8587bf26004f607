// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/quant4.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <boost/math/distributions/normal.hpp>

#include "peftlab/errors.hpp"
#include "peftlab/kernels.hpp"

namespace peftlab::quant {

std::uint8_t Codebook::nearest(float normalized) const {
  std::uint8_t best = 0;
  float best_dist = std::fabs(normalized - values[0]);
  for (std::uint8_t i = 1; i < values.size(); ++i) {
    const float d = std::fabs(normalized - values[i]);
    if (d < best_dist) {
      best_dist = d;
      best = i;
    }
  }
  return best;
}

std::uint8_t Codebook::zero_index() const {
  for (std::uint8_t i = 0; i < values.size(); ++i) {
    if (values[i] == 0.0f) return i;
  }
  throw InvalidConfig("codebook has no zero value");
}

float Codebook::max_adjacent_gap() const {
  float gap = 0.0f;
  for (std::size_t i = 1; i < values.size(); ++i) gap = std::max(gap, values[i] - values[i - 1]);
  return gap;
}

void Codebook::validate() const {
  if (values.front() != -1.0f || values.back() != 1.0f) {
    throw InvalidConfig("codebook endpoints must be exactly -1 and 1");
  }
  int zeros = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] == 0.0f) ++zeros;
    if (i > 0 && !(values[i] > values[i - 1])) throw InvalidConfig("codebook must be strictly increasing");
  }
  if (zeros != 1) throw InvalidConfig("codebook must contain exactly one zero");
}

Codebook build_nf4_codebook() {
  // The outermost probability sits halfway between the symmetric choices
  // 1 - 1/(2*15) and 1 - 1/(2*16); the extremes are then scaled to +/-1.
  const double outer = 0.5 * ((1.0 - 1.0 / 30.0) + (1.0 - 1.0 / 32.0));
  const boost::math::normal standard;
  auto linspace = [](double lo, double hi, int count, int i) {
    return lo + (hi - lo) * double(i) / double(count - 1);
  };

  std::array<double, 16> v{};
  std::size_t n = 0;
  // 8 positive quantiles: linspace(outer, 0.5, 9) without the final 0.5.
  for (int i = 0; i < 8; ++i) v[n++] = boost::math::quantile(standard, linspace(outer, 0.5, 9, i));
  v[n++] = 0.0;
  // 7 negative quantiles: linspace(outer, 0.5, 8) without the final 0.5.
  for (int i = 0; i < 7; ++i) v[n++] = -boost::math::quantile(standard, linspace(outer, 0.5, 8, i));

  std::sort(v.begin(), v.end());
  const double scale = std::max(std::fabs(v.front()), std::fabs(v.back()));
  Codebook cb;
  for (std::size_t i = 0; i < v.size(); ++i) cb.values[i] = static_cast<float>(v[i] / scale);
  cb.values.front() = -1.0f;
  cb.values.back() = 1.0f;
  cb.validate();
  return cb;
}

const Codebook& nf4_codebook() {
  static const Codebook cb = build_nf4_codebook();
  return cb;
}

std::uint8_t QuantizedTensor::code(std::size_t index) const {
  const std::uint8_t byte = codes[index / 2];
  return (index % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
}

float QuantizedTensor::block_absmax(std::size_t block) const {
  if (!double_quantized) return absmax[block];
  const std::size_t group = block / dq_group_size;
  return static_cast<float>(absmax_codes[block]) * absmax_scale[group] + absmax_offset[group];
}

float QuantizedTensor::value(std::size_t index) const {
  return codebook.values[code(index)] * block_absmax(index / block_size);
}

std::size_t QuantizedTensor::storage_bytes() const {
  std::size_t bytes = codes.size();
  if (double_quantized) {
    bytes += absmax_codes.size() + 4 * (absmax_scale.size() + absmax_offset.size());
  } else {
    bytes += 4 * absmax.size();
  }
  return bytes;
}

void QuantizedTensor::validate() const {
  if (block_size == 0 || dq_group_size == 0) throw CorruptIndex("zero block or group size");
  if (shape.empty() && numel() != 1) throw CorruptIndex("bad shape");
  if (codes.size() != (numel() + 1) / 2) throw CorruptIndex("packed code count does not match shape");
  if (double_quantized) {
    if (absmax_codes.size() != num_blocks() || absmax_scale.size() != num_groups() ||
        absmax_offset.size() != num_groups() || !absmax.empty()) {
      throw CorruptIndex("double-quantized scale arrays do not match block layout");
    }
  } else if (absmax.size() != num_blocks() || !absmax_codes.empty()) {
    throw CorruptIndex("absmax count does not match block layout");
  }
  for (std::size_t b = 0; b < num_blocks(); ++b) {
    if (!(block_absmax(b) >= 0.0f)) throw CorruptIndex("negative block scale");
  }
}

std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> codes) {
  std::vector<std::uint8_t> packed((codes.size() + 1) / 2, 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const std::uint8_t nib = codes[i] & 0x0F;
    packed[i / 2] |= (i % 2 == 0) ? nib : static_cast<std::uint8_t>(nib << 4);
  }
  return packed;
}

std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> packed, std::size_t count) {
  if (packed.size() * 2 < count) throw CorruptIndex("not enough packed bytes");
  std::vector<std::uint8_t> codes(count);
  for (std::size_t i = 0; i < count; ++i) {
    codes[i] = (i % 2 == 0) ? (packed[i / 2] & 0x0F) : (packed[i / 2] >> 4);
  }
  return codes;
}

QuantizedTensor quantize(const Tensor& x, const QuantConfig& config, const Codebook& codebook) {
  if (config.block_size == 0) throw InvalidConfig("block_size must be >= 1");
  if (config.double_quant && config.dq_group_size == 0) throw InvalidConfig("dq_group_size must be >= 1");
  const auto xv = x.data();
  for (float v : xv) {
    if (!std::isfinite(v)) throw NonFiniteInput("quantize: input contains NaN or Inf");
  }

  QuantizedTensor q;
  q.shape = x.shape();
  q.block_size = config.block_size;
  q.dq_group_size = config.dq_group_size;
  q.codebook = codebook;
  const std::size_t n = xv.size();
  const std::size_t blocks = q.num_blocks();
  const std::uint8_t zero_code = codebook.zero_index();

  std::vector<float> absmax(blocks, 0.0f);
  std::vector<std::uint8_t> codes(n, zero_code);
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t lo = b * q.block_size;
    const std::size_t hi = std::min(n, lo + q.block_size);
    float m = 0.0f;
    for (std::size_t i = lo; i < hi; ++i) m = std::max(m, std::fabs(xv[i]));
    absmax[b] = m;
    if (m == 0.0f) continue;
    for (std::size_t i = lo; i < hi; ++i) codes[i] = codebook.nearest(xv[i] / m);
  }
  q.codes = pack_nibbles(codes);

  if (!config.double_quant) {
    q.absmax = std::move(absmax);
    return q;
  }

  q.double_quantized = true;
  const std::size_t groups = q.num_groups();
  q.absmax_codes.assign(blocks, 0);
  q.absmax_scale.assign(groups, 0.0f);
  q.absmax_offset.assign(groups, 0.0f);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t lo = gi * q.dq_group_size;
    const std::size_t hi = std::min(blocks, lo + q.dq_group_size);
    const auto [mn_it, mx_it] = std::minmax_element(absmax.begin() + lo, absmax.begin() + hi);
    const float mn = *mn_it, mx = *mx_it;
    // Centred on the group midrange so the 255-step grid fits the int8 range
    // symmetrically; codes stay within [-127, 127].
    const float offset = 0.5f * (mn + mx);
    const float scale = (mx - mn) / 255.0f;
    q.absmax_offset[gi] = offset;
    q.absmax_scale[gi] = scale;
    if (scale == 0.0f) continue;
    for (std::size_t b = lo; b < hi; ++b) {
      const float steps = std::round((absmax[b] - offset) / scale);
      q.absmax_codes[b] = static_cast<std::int8_t>(std::clamp(steps, -127.0f, 127.0f));
    }
  }
  return q;
}

Tensor dequantize(const QuantizedTensor& q, DType out_dtype) {
  std::vector<float> out(q.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = q.value(i);
  return Tensor::from_data(q.shape, std::move(out), out_dtype);
}

Rational bits_per_parameter(std::size_t block_size, bool double_quant, std::size_t dq_group_size) {
  if (block_size == 0 || (double_quant && dq_group_size == 0)) {
    throw InvalidConfig("block and group sizes must be positive");
  }
  const auto block = static_cast<std::int64_t>(block_size);
  if (!double_quant) return Rational(4) + Rational(32, block);
  const auto group = static_cast<std::int64_t>(dq_group_size);
  return Rational(4) + Rational(8, block) + Rational(64, block * group);
}

Rational bits_per_parameter(const QuantizedTensor& q) {
  return bits_per_parameter(q.block_size, q.double_quantized, q.dq_group_size);
}

namespace {

// Dequantized f16 values of weight rows [row0, row0 + rows) into `out`.
void dequantize_rows(const QuantizedTensor& q, std::size_t row0, std::size_t rows,
                     std::size_t width, float* out) {
  const std::size_t base = row0 * width;
  for (std::size_t i = 0; i < rows * width; ++i) out[i] = kernels::round_to_f16(q.value(base + i));
}

}  // namespace

Tensor qmatmul(Graph& g, const Tensor& x, std::shared_ptr<const QuantizedTensor> weight) {
  const QuantizedTensor& q = *weight;
  if (x.rank() != 2 || q.shape.size() != 2 || x.dim(1) != q.shape[1]) {
    throw ShapeMismatch("qmatmul: " + shape_to_string(x.shape()) + " x " + shape_to_string(q.shape) +
                        "^T");
  }
  const std::size_t rows = x.dim(0), in = q.shape[1], out_features = q.shape[0];
  std::vector<float> xr(x.data().begin(), x.data().end());
  kernels::round_to_f16(xr);

  constexpr std::size_t kPanelRows = 32;
  std::vector<float> panel(kPanelRows * in);
  std::vector<float> y(rows * out_features);
  for (std::size_t r0 = 0; r0 < out_features; r0 += kPanelRows) {
    const std::size_t nr = std::min(kPanelRows, out_features - r0);
    dequantize_rows(q, r0, nr, in, panel.data());
    kernels::gemm_nt(xr.data(), in, panel.data(), in, y.data() + r0, out_features, rows, nr, in);
  }

  const bool track = g.recording() && x.requires_grad();
  Tensor out = Tensor::from_data({rows, out_features}, std::move(y), DType::kF32, track);
#ifdef PEFTLAB_CHECK_FINITE
  for (float v : out.data()) {
    if (!std::isfinite(v)) throw NonFiniteValue("qmatmul produced a non-finite value");
  }
#endif
  if (track) {
    g.record("qmatmul", out, [out, x, weight, rows, in, out_features]() mutable {
      // dx[T,in] = dy[T,out] * W[out,in]
      std::vector<float> w(out_features * in);
      dequantize_rows(*weight, 0, out_features, in, w.data());
      std::vector<float> dx(rows * in);
      const auto dy = out.grad();
      kernels::gemm_nn(dy.data(), out_features, w.data(), in, dx.data(), in, rows, in, out_features);
      x.accumulate_grad(dx);
    });
  }
  return out;
}

}  // namespace peftlab::quant
