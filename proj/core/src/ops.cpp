// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "peftlab/errors.hpp"
#include "peftlab/kernels.hpp"

namespace peftlab::ops {
namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (!t.defined() || t.rank() != rank) {
    throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                        (t.defined() ? shape_to_string(t.shape()) : std::string("undefined")));
  }
}

bool needs_grad(Graph& g, std::initializer_list<const Tensor*> inputs) {
  if (!g.recording()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

Tensor finish(Tensor out, const char* op) {
#ifdef PEFTLAB_CHECK_FINITE
  for (float v : out.data()) {
    if (!std::isfinite(v)) throw NonFiniteValue(std::string(op) + " produced a non-finite value");
  }
#else
  (void)op;
#endif
  return out;
}

std::vector<float> to_vector(std::span<const float> s) { return {s.begin(), s.end()}; }

std::vector<float> maybe_round(std::span<const float> s, DType compute) {
  std::vector<float> v = to_vector(s);
  if (compute == DType::kF16) kernels::round_to_f16(v);
  return v;
}

std::vector<float> transposed(std::span<const float> s, std::size_t m, std::size_t n) {
  std::vector<float> out(s.size());
  kernels::transpose(s.data(), out.data(), m, n);
  return out;
}

}  // namespace

Tensor matmul_nt(Graph& g, const Tensor& a, const Tensor& b, DType compute) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeMismatch("matmul_nt: " + shape_to_string(a.shape()) + " x " +
                        shape_to_string(b.shape()) + "^T");
  }
  auto av = maybe_round(a.data(), compute);
  auto bv = maybe_round(b.data(), compute);
  std::vector<float> c(m * n);
  kernels::gemm_nt(av.data(), k, bv.data(), k, c.data(), n, m, n, k);
  const bool track = needs_grad(g, {&a, &b});
  Tensor out = finish(Tensor::from_data({m, n}, std::move(c), DType::kF32, track), "matmul_nt");
  if (track) {
    g.record("matmul_nt", out, [out, a, b, av = std::move(av), bv = std::move(bv), m, n, k]() mutable {
      const auto dc = out.grad();
      if (a.requires_grad()) {
        std::vector<float> da(m * k);
        kernels::gemm_nn(dc.data(), n, bv.data(), k, da.data(), k, m, k, n);
        a.accumulate_grad(da);
      }
      if (b.requires_grad()) {
        std::vector<float> db(n * k);
        kernels::gemm_tn(dc.data(), n, av.data(), k, db.data(), k, n, k, m);
        b.accumulate_grad(db);
      }
    });
  }
  return out;
}

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b, DType compute) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeMismatch("matmul: " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  }
  auto av = maybe_round(a.data(), compute);
  auto bv = maybe_round(b.data(), compute);
  std::vector<float> c(m * n);
  kernels::gemm_nn(av.data(), k, bv.data(), n, c.data(), n, m, n, k);
  const bool track = needs_grad(g, {&a, &b});
  Tensor out = finish(Tensor::from_data({m, n}, std::move(c), DType::kF32, track), "matmul");
  if (track) {
    g.record("matmul", out, [out, a, b, av = std::move(av), bv = std::move(bv), m, n, k]() mutable {
      const auto dc = out.grad();
      if (a.requires_grad()) {
        std::vector<float> da(m * k);
        kernels::gemm_nt(dc.data(), n, bv.data(), n, da.data(), k, m, k, n);
        a.accumulate_grad(da);
      }
      if (b.requires_grad()) {
        std::vector<float> db(k * n);
        kernels::gemm_tn(av.data(), k, dc.data(), n, db.data(), n, k, n, m);
        b.accumulate_grad(db);
      }
    });
  }
  return out;
}

Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
  const bool bias = b.rank() == 1 && a.rank() >= 1 && b.dim(0) == a.shape().back() &&
                    a.shape() != b.shape();
  if (!bias && a.shape() != b.shape()) {
    throw ShapeMismatch("add: " + shape_to_string(a.shape()) + " + " + shape_to_string(b.shape()));
  }
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<float> c(ad.size());
  const std::size_t width = bd.size();
  for (std::size_t i = 0; i < ad.size(); ++i) c[i] = ad[i] + bd[bias ? i % width : i];
  const bool track = needs_grad(g, {&a, &b});
  Tensor out = finish(Tensor::from_data(a.shape(), std::move(c), DType::kF32, track), "add");
  if (track) {
    g.record("add", out, [out, a, b, bias, width]() mutable {
      const auto dc = out.grad();
      a.accumulate_grad(dc);
      if (!b.requires_grad()) return;
      if (!bias) {
        b.accumulate_grad(dc);
        return;
      }
      std::vector<float> db(width, 0.0f);
      for (std::size_t i = 0; i < dc.size(); ++i) db[i % width] += dc[i];
      b.accumulate_grad(db);
    });
  }
  return out;
}

Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch("mul: " + shape_to_string(a.shape()) + " * " + shape_to_string(b.shape()));
  }
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<float> c(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) c[i] = ad[i] * bd[i];
  const bool track = needs_grad(g, {&a, &b});
  Tensor out = finish(Tensor::from_data(a.shape(), std::move(c), DType::kF32, track), "mul");
  if (track) {
    g.record("mul", out, [out, a, b]() mutable {
      const auto dc = out.grad();
      if (a.requires_grad()) {
        std::vector<float> da(dc.size());
        for (std::size_t i = 0; i < dc.size(); ++i) da[i] = dc[i] * b.data()[i];
        a.accumulate_grad(da);
      }
      if (b.requires_grad()) {
        std::vector<float> db(dc.size());
        for (std::size_t i = 0; i < dc.size(); ++i) db[i] = dc[i] * a.data()[i];
        b.accumulate_grad(db);
      }
    });
  }
  return out;
}

Tensor mul_scalar(Graph& g, const Tensor& a, float s) {
  std::vector<float> c = to_vector(a.data());
  for (float& v : c) v *= s;
  const bool track = needs_grad(g, {&a});
  Tensor out = finish(Tensor::from_data(a.shape(), std::move(c), DType::kF32, track), "mul_scalar");
  if (track) {
    g.record("mul_scalar", out, [out, a, s]() mutable {
      std::vector<float> da = to_vector(out.grad());
      for (float& v : da) v *= s;
      a.accumulate_grad(da);
    });
  }
  return out;
}

Tensor sum(Graph& g, const Tensor& a) {
  double total = 0.0;
  for (float v : a.data()) total += v;
  const bool track = needs_grad(g, {&a});
  Tensor out = finish(Tensor::from_data({}, {static_cast<float>(total)}, DType::kF32, track), "sum");
  if (track) {
    g.record("sum", out, [out, a]() mutable {
      std::vector<float> da(a.numel(), out.grad()[0]);
      a.accumulate_grad(da);
    });
  }
  return out;
}

Tensor gelu(Graph& g, const Tensor& a) {
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float kA = 0.044715f;
  const auto x = a.data();
  std::vector<float> t(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) t[i] = kC * (x[i] + kA * x[i] * x[i] * x[i]);
  kernels::vtanh(t.data(), t.data(), t.size());
  std::vector<float> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = 0.5f * x[i] * (1.0f + t[i]);
  const bool track = needs_grad(g, {&a});
  Tensor out = finish(Tensor::from_data(a.shape(), std::move(y), DType::kF32, track), "gelu");
  if (track) {
    g.record("gelu", out, [out, a, t = std::move(t)]() mutable {
      const auto dy = out.grad();
      const auto xs = a.data();
      std::vector<float> dx(xs.size());
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const float xv = xs[i];
        const float du = kC * (1.0f + 3.0f * kA * xv * xv);
        dx[i] = dy[i] * (0.5f * (1.0f + t[i]) + 0.5f * xv * (1.0f - t[i] * t[i]) * du);
      }
      a.accumulate_grad(dx);
    });
  }
  return out;
}

Tensor softmax(Graph& g, const Tensor& a, bool causal, std::size_t causal_offset) {
  require_rank(a, 2, "softmax");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  const auto x = a.data();
  std::vector<float> y(x.size(), 0.0f);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t visible = causal ? std::min(cols, r + causal_offset + 1) : cols;
    const float* xr = x.data() + r * cols;
    float* yr = y.data() + r * cols;
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < visible; ++j) mx = std::max(mx, xr[j]);
    for (std::size_t j = 0; j < visible; ++j) yr[j] = xr[j] - mx;
    kernels::vexp(yr, yr, visible);
    double total = 0.0;
    for (std::size_t j = 0; j < visible; ++j) total += yr[j];
    const float inv = static_cast<float>(1.0 / total);
    for (std::size_t j = 0; j < visible; ++j) yr[j] *= inv;
  }
  const bool track = needs_grad(g, {&a});
  Tensor out = finish(Tensor::from_data(a.shape(), std::move(y), DType::kF32, track), "softmax");
  if (track) {
    g.record("softmax", out, [out, a, rows, cols]() mutable {
      const auto dy = out.grad();
      const auto yv = out.data();
      std::vector<float> dx(dy.size());
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) dot += double(dy[r * cols + j]) * yv[r * cols + j];
        for (std::size_t j = 0; j < cols; ++j) {
          dx[r * cols + j] = yv[r * cols + j] * (dy[r * cols + j] - static_cast<float>(dot));
        }
      }
      a.accumulate_grad(dx);
    });
  }
  return out;
}

Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t rows = x.dim(0), width = x.dim(1);
  if (gain.shape() != Shape{width} || bias.shape() != Shape{width}) {
    throw ShapeMismatch("layer_norm: gain/bias must be [" + std::to_string(width) + "]");
  }
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  std::vector<float> y(xv.size());
  std::vector<float> xhat(xv.size());
  std::vector<float> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = xv.data() + r * width;
    double mean = 0.0;
    for (std::size_t j = 0; j < width; ++j) mean += xr[j];
    mean /= double(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= double(width);
    rstd[r] = static_cast<float>(1.0 / std::sqrt(var + eps));
    for (std::size_t j = 0; j < width; ++j) {
      const float h = static_cast<float>((xr[j] - mean) * rstd[r]);
      xhat[r * width + j] = h;
      y[r * width + j] = h * gv[j] + bv[j];
    }
  }
  const bool track = needs_grad(g, {&x, &gain, &bias});
  Tensor out = finish(Tensor::from_data(x.shape(), std::move(y), DType::kF32, track), "layer_norm");
  if (track) {
    g.record("layer_norm", out,
             [out, x, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd), rows, width]() mutable {
               const auto dy = out.grad();
               const auto gv = gain.data();
               if (x.requires_grad()) {
                 std::vector<float> dx(dy.size());
                 for (std::size_t r = 0; r < rows; ++r) {
                   double mean_d = 0.0, mean_dh = 0.0;
                   for (std::size_t j = 0; j < width; ++j) {
                     const double d = double(dy[r * width + j]) * gv[j];
                     mean_d += d;
                     mean_dh += d * xhat[r * width + j];
                   }
                   mean_d /= double(width);
                   mean_dh /= double(width);
                   for (std::size_t j = 0; j < width; ++j) {
                     const double d = double(dy[r * width + j]) * gv[j];
                     dx[r * width + j] =
                         static_cast<float>(rstd[r] * (d - mean_d - xhat[r * width + j] * mean_dh));
                   }
                 }
                 x.accumulate_grad(dx);
               }
               if (gain.requires_grad() || bias.requires_grad()) {
                 std::vector<float> dg(width, 0.0f), db(width, 0.0f);
                 for (std::size_t r = 0; r < rows; ++r) {
                   for (std::size_t j = 0; j < width; ++j) {
                     dg[j] += dy[r * width + j] * xhat[r * width + j];
                     db[j] += dy[r * width + j];
                   }
                 }
                 gain.accumulate_grad(dg);
                 bias.accumulate_grad(db);
               }
             });
  }
  return out;
}

Tensor embedding_lookup(Graph& g, const Tensor& table, std::span<const std::int32_t> ids) {
  require_rank(table, 2, "embedding_lookup");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  if (ids.empty()) throw ShapeMismatch("embedding_lookup: empty id list");
  const auto tv = table.data();
  std::vector<float> y(ids.size() * width);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
      throw ShapeMismatch("embedding_lookup: id " + std::to_string(ids[t]) + " outside table");
    }
    std::copy_n(tv.begin() + ids[t] * width, width, y.begin() + t * width);
  }
  const bool track = needs_grad(g, {&table});
  Tensor out = finish(Tensor::from_data({ids.size(), width}, std::move(y), DType::kF32, track),
                      "embedding_lookup");
  if (track) {
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    g.record("embedding_lookup", out, [out, table, idv = std::move(idv), vocab, width]() mutable {
      const auto dy = out.grad();
      std::vector<float> dt(vocab * width, 0.0f);
      for (std::size_t t = 0; t < idv.size(); ++t) {
        for (std::size_t j = 0; j < width; ++j) dt[idv[t] * width + j] += dy[t * width + j];
      }
      table.accumulate_grad(dt);
    });
  }
  return out;
}

Tensor cross_entropy(Graph& g, const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows || mask.size() != rows) {
    throw ShapeMismatch("cross_entropy: targets/mask length must equal " + std::to_string(rows));
  }
  const auto x = logits.data();
  std::size_t count = 0;
  double total = 0.0;
  std::vector<float> probs(x.size(), 0.0f);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw ShapeMismatch("cross_entropy: target " + std::to_string(targets[r]) + " out of range");
    }
    const float* xr = x.data() + r * vocab;
    float mx = xr[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(double(xr[j]) - mx);
    const double lse = mx + std::log(z);
    total += lse - xr[targets[r]];
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[r * vocab + j] = static_cast<float>(std::exp(double(xr[j]) - lse));
    }
    ++count;
  }
  if (count == 0) throw EmptyMask("cross_entropy: no position selected by the loss mask");
  const bool track = needs_grad(g, {&logits});
  Tensor out = finish(Tensor::from_data({}, {static_cast<float>(total / double(count))},
                                        DType::kF32, track),
                      "cross_entropy");
  if (track) {
    std::vector<std::int32_t> tv(targets.begin(), targets.end());
    std::vector<std::uint8_t> mv(mask.begin(), mask.end());
    g.record("cross_entropy", out,
             [out, logits, probs = std::move(probs), tv = std::move(tv), mv = std::move(mv), rows,
              vocab, count]() mutable {
               const float scale = out.grad()[0] / static_cast<float>(count);
               std::vector<float> dx(rows * vocab, 0.0f);
               for (std::size_t r = 0; r < rows; ++r) {
                 if (!mv[r]) continue;
                 for (std::size_t j = 0; j < vocab; ++j) dx[r * vocab + j] = probs[r * vocab + j] * scale;
                 dx[r * vocab + tv[r]] -= scale;
               }
               logits.accumulate_grad(dx);
             });
  }
  return out;
}

Tensor concat(Graph& g, const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeMismatch("concat: no inputs");
  if (axis > 1) throw ShapeMismatch("concat: axis must be 0 or 1");
  for (const auto& p : parts) require_rank(p, 2, "concat");
  const std::size_t other = parts[0].dim(1 - axis);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.dim(1 - axis) != other) throw ShapeMismatch("concat: mismatched extents");
    total += p.dim(axis);
  }
  const std::size_t rows = axis == 0 ? total : other;
  const std::size_t cols = axis == 0 ? other : total;
  std::vector<float> y(rows * cols);
  std::size_t pos = 0;
  for (const auto& p : parts) {
    const auto pv = p.data();
    const std::size_t pr = p.dim(0), pc = p.dim(1);
    for (std::size_t r = 0; r < pr; ++r) {
      for (std::size_t c = 0; c < pc; ++c) {
        const std::size_t rr = axis == 0 ? pos + r : r;
        const std::size_t cc = axis == 0 ? c : pos + c;
        y[rr * cols + cc] = pv[r * pc + c];
      }
    }
    pos += p.dim(axis);
  }
  bool track = false;
  if (g.recording()) {
    for (const auto& p : parts) track = track || p.requires_grad();
  }
  Tensor out = finish(Tensor::from_data({rows, cols}, std::move(y), DType::kF32, track), "concat");
  if (track) {
    g.record("concat", out, [out, parts, axis, cols]() mutable {
      const auto dy = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        const std::size_t pr = p.dim(0), pc = p.dim(1);
        if (p.requires_grad()) {
          std::vector<float> dp(pr * pc);
          for (std::size_t r = 0; r < pr; ++r) {
            for (std::size_t c = 0; c < pc; ++c) {
              const std::size_t rr = axis == 0 ? offset + r : r;
              const std::size_t cc = axis == 0 ? c : offset + c;
              dp[r * pc + c] = dy[rr * cols + cc];
            }
          }
          p.accumulate_grad(dp);
        }
        offset += p.dim(axis);
      }
    });
  }
  return out;
}

Tensor slice(Graph& g, const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  require_rank(a, 2, "slice");
  if (axis > 1 || length == 0 || start + length > a.dim(axis)) {
    throw ShapeMismatch("slice: [" + std::to_string(start) + ", +" + std::to_string(length) +
                        ") on axis " + std::to_string(axis) + " of " + shape_to_string(a.shape()));
  }
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  const std::size_t out_rows = axis == 0 ? length : rows;
  const std::size_t out_cols = axis == 0 ? cols : length;
  const std::size_t r0 = axis == 0 ? start : 0;
  const std::size_t c0 = axis == 0 ? 0 : start;
  const auto av = a.data();
  std::vector<float> y(out_rows * out_cols);
  for (std::size_t r = 0; r < out_rows; ++r) {
    std::copy_n(av.begin() + (r0 + r) * cols + c0, out_cols, y.begin() + r * out_cols);
  }
  const bool track = needs_grad(g, {&a});
  Tensor out = finish(Tensor::from_data({out_rows, out_cols}, std::move(y), DType::kF32, track), "slice");
  if (track) {
    g.record("slice", out, [out, a, r0, c0, out_rows, out_cols, cols]() mutable {
      const auto dy = out.grad();
      std::vector<float> da(a.numel(), 0.0f);
      for (std::size_t r = 0; r < out_rows; ++r) {
        std::copy_n(dy.begin() + r * out_cols, out_cols, da.begin() + (r0 + r) * cols + c0);
      }
      a.accumulate_grad(da);
    });
  }
  return out;
}

Tensor transpose(Graph& g, const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto y = transposed(a.data(), m, n);
  const bool track = needs_grad(g, {&a});
  Tensor out = finish(Tensor::from_data({n, m}, std::move(y), DType::kF32, track), "transpose");
  if (track) {
    g.record("transpose", out, [out, a, m, n]() mutable {
      a.accumulate_grad(transposed(out.grad(), n, m));
    });
  }
  return out;
}

namespace {

// cos/sin table for rows [offset, offset + rows) and half-width `half`.
void rope_table(std::size_t rows, std::size_t offset, std::size_t head_dim, float base,
                std::vector<float>& cosv, std::vector<float>& sinv) {
  const std::size_t half = head_dim / 2;
  cosv.resize(rows * half);
  sinv.resize(rows * half);
  for (std::size_t t = 0; t < rows; ++t) {
    const double pos = double(t + offset);
    for (std::size_t i = 0; i < half; ++i) {
      const double inv_freq = std::pow(double(base), -2.0 * double(i) / double(head_dim));
      const double angle = pos * inv_freq;
      cosv[t * half + i] = static_cast<float>(std::cos(angle));
      sinv[t * half + i] = static_cast<float>(std::sin(angle));
    }
  }
}

}  // namespace

Tensor rope(Graph& g, const Tensor& x, std::size_t n_heads, std::size_t position_offset, float base) {
  require_rank(x, 2, "rope");
  const std::size_t rows = x.dim(0), width = x.dim(1);
  if (n_heads == 0 || width % n_heads != 0 || (width / n_heads) % 2 != 0) {
    throw ShapeMismatch("rope: width " + std::to_string(width) + " is not n_heads * even head_dim");
  }
  const std::size_t head_dim = width / n_heads, half = head_dim / 2;
  std::vector<float> cosv, sinv;
  rope_table(rows, position_offset, head_dim, base, cosv, sinv);
  const auto xv = x.data();
  std::vector<float> y(xv.size());
  for (std::size_t t = 0; t < rows; ++t) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t o = t * width + h * head_dim;
      for (std::size_t i = 0; i < half; ++i) {
        const float c = cosv[t * half + i], s = sinv[t * half + i];
        const float x1 = xv[o + i], x2 = xv[o + i + half];
        y[o + i] = x1 * c - x2 * s;
        y[o + i + half] = x1 * s + x2 * c;
      }
    }
  }
  const bool track = needs_grad(g, {&x});
  Tensor out = finish(Tensor::from_data(x.shape(), std::move(y), DType::kF32, track), "rope");
  if (track) {
    g.record("rope", out,
             [out, x, cosv = std::move(cosv), sinv = std::move(sinv), rows, width, n_heads, head_dim,
              half]() mutable {
               const auto dy = out.grad();
               std::vector<float> dx(dy.size());
               for (std::size_t t = 0; t < rows; ++t) {
                 for (std::size_t h = 0; h < n_heads; ++h) {
                   const std::size_t o = t * width + h * head_dim;
                   for (std::size_t i = 0; i < half; ++i) {
                     const float c = cosv[t * half + i], s = sinv[t * half + i];
                     const float d1 = dy[o + i], d2 = dy[o + i + half];
                     dx[o + i] = d1 * c + d2 * s;
                     dx[o + i + half] = -d1 * s + d2 * c;
                   }
                 }
               }
               x.accumulate_grad(dx);
             });
  }
  return out;
}

Tensor dropout(Graph& g, const Tensor& x, float p, std::mt19937_64& rng) {
  if (p < 0.0f || p >= 1.0f) throw InvalidConfig("dropout probability must be in [0, 1)");
  if (p == 0.0f) return x;
  std::uniform_real_distribution<float> uniform(0.0f, 1.0f);
  const float keep_scale = 1.0f / (1.0f - p);
  std::vector<float> mask(x.numel());
  for (float& m : mask) m = uniform(rng) < p ? 0.0f : keep_scale;
  const auto xv = x.data();
  std::vector<float> y(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] * mask[i];
  const bool track = needs_grad(g, {&x});
  Tensor out = finish(Tensor::from_data(x.shape(), std::move(y), DType::kF32, track), "dropout");
  if (track) {
    g.record("dropout", out, [out, x, mask = std::move(mask)]() mutable {
      const auto dy = out.grad();
      std::vector<float> dx(dy.size());
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * mask[i];
      x.accumulate_grad(dx);
    });
  }
  return out;
}

}  // namespace peftlab::ops
