// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "peftlab/errors.hpp"
#include "peftlab/kernels.hpp"
#include "peftlab/ops.hpp"
#include "test_support.hpp"

namespace peftlab {
namespace {

using testing::gradient_errors;
using testing::random_tensor;

constexpr double kTol = 1e-3;

void expect_grads_ok(const testing::OpFn& f, const std::vector<Tensor>& inputs) {
  for (double e : gradient_errors(f, inputs)) EXPECT_LT(e, kTol);
}

class GradCheck : public ::testing::TestWithParam<std::uint64_t> {
 protected:
  std::mt19937_64 rng{GetParam()};
  std::size_t extent(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  }
  Tensor leaf(Shape s, float scale = 1.0f) { return random_tensor(std::move(s), rng, scale, true); }
};

TEST_P(GradCheck, Matmul) {
  const std::size_t m = extent(1, 5), k = extent(1, 6), n = extent(1, 5);
  expect_grads_ok([](Graph& g, const auto& in) { return ops::matmul(g, in[0], in[1]); },
                  {leaf({m, k}), leaf({k, n})});
}

TEST_P(GradCheck, MatmulNt) {
  const std::size_t m = extent(1, 5), k = extent(1, 6), n = extent(1, 5);
  expect_grads_ok([](Graph& g, const auto& in) { return ops::matmul_nt(g, in[0], in[1]); },
                  {leaf({m, k}), leaf({n, k})});
}

TEST_P(GradCheck, AddAndBias) {
  const std::size_t m = extent(1, 4), n = extent(1, 6);
  expect_grads_ok([](Graph& g, const auto& in) { return ops::add(g, in[0], in[1]); },
                  {leaf({m, n}), leaf({m, n})});
  expect_grads_ok([](Graph& g, const auto& in) { return ops::add(g, in[0], in[1]); },
                  {leaf({m, n}), leaf({n})});
}

TEST_P(GradCheck, MulAndScale) {
  const std::size_t m = extent(1, 4), n = extent(1, 6);
  expect_grads_ok([](Graph& g, const auto& in) { return ops::mul(g, in[0], in[1]); },
                  {leaf({m, n}), leaf({m, n})});
  expect_grads_ok([](Graph& g, const auto& in) { return ops::mul_scalar(g, in[0], -1.75f); }, {leaf({m, n})});
}

TEST_P(GradCheck, Sum) {
  expect_grads_ok([](Graph& g, const auto& in) { return ops::sum(g, in[0]); }, {leaf({extent(1, 4), 3})});
}

TEST_P(GradCheck, Gelu) {
  expect_grads_ok([](Graph& g, const auto& in) { return ops::gelu(g, in[0]); }, {leaf({extent(1, 4), 7}, 2.0f)});
}

TEST_P(GradCheck, Softmax) {
  const std::size_t n = extent(2, 6);
  expect_grads_ok([](Graph& g, const auto& in) { return ops::softmax(g, in[0]); }, {leaf({extent(1, 4), n})});
  expect_grads_ok([](Graph& g, const auto& in) { return ops::softmax(g, in[0], true, 1); }, {leaf({3, 5})});
}

TEST_P(GradCheck, LayerNorm) {
  const std::size_t n = extent(2, 8);
  expect_grads_ok([](Graph& g, const auto& in) { return ops::layer_norm(g, in[0], in[1], in[2]); },
                  {leaf({extent(1, 4), n}), leaf({n}), leaf({n})});
}

TEST_P(GradCheck, EmbeddingLookup) {
  const std::vector<std::int32_t> ids = {2, 0, 2, 4};
  expect_grads_ok([&](Graph& g, const auto& in) { return ops::embedding_lookup(g, in[0], ids); },
                  {leaf({5, extent(1, 6)})});
}

TEST_P(GradCheck, CrossEntropy) {
  const std::size_t rows = 4, vocab = extent(2, 7);
  std::vector<std::int32_t> targets(rows);
  for (auto& t : targets) t = static_cast<std::int32_t>(extent(0, vocab - 1));
  const std::vector<std::uint8_t> mask = {1, 0, 1, 1};
  expect_grads_ok([&](Graph& g, const auto& in) { return ops::cross_entropy(g, in[0], targets, mask); },
                  {leaf({rows, vocab})});
}

TEST_P(GradCheck, ConcatSliceTranspose) {
  expect_grads_ok([](Graph& g, const auto& in) { return ops::concat(g, {in[0], in[1]}, 0); },
                  {leaf({2, 3}), leaf({extent(1, 3), 3})});
  expect_grads_ok([](Graph& g, const auto& in) { return ops::concat(g, {in[0], in[1]}, 1); },
                  {leaf({2, 3}), leaf({2, extent(1, 3)})});
  expect_grads_ok([](Graph& g, const auto& in) { return ops::slice(g, in[0], 1, 1, 3); }, {leaf({3, 5})});
  expect_grads_ok([](Graph& g, const auto& in) { return ops::slice(g, in[0], 0, 2, 2); }, {leaf({5, 2})});
  expect_grads_ok([](Graph& g, const auto& in) { return ops::transpose(g, in[0]); }, {leaf({extent(1, 4), 3})});
}

TEST_P(GradCheck, Rope) {
  const std::size_t offset = extent(0, 9);
  expect_grads_ok([&](Graph& g, const auto& in) { return ops::rope(g, in[0], 2, offset); }, {leaf({3, 8})});
}

TEST_P(GradCheck, Dropout) {
  expect_grads_ok(
      [](Graph& g, const auto& in) {
        std::mt19937_64 local(99);
        return ops::dropout(g, in[0], 0.3f, local);
      },
      {leaf({4, 6})});
}

TEST_P(GradCheck, Composite) {
  // Attention-shaped chain: reused inputs must accumulate.
  expect_grads_ok(
      [](Graph& g, const auto& in) {
        const Tensor s = ops::mul_scalar(g, ops::matmul_nt(g, in[0], in[0]), 0.5f);
        return ops::matmul(g, ops::softmax(g, s, true), ops::gelu(g, in[0]));
      },
      {leaf({4, 3})});
}

INSTANTIATE_TEST_SUITE_P(Seeds, GradCheck, ::testing::Values(1u, 2u, 3u));

TEST(Matmul, HandExamples) {
  Graph g(Graph::Mode::kInference);
  const Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  const Tensor ab = ops::matmul(g, a, b);
  EXPECT_EQ(std::vector<float>(ab.data().begin(), ab.data().end()), (std::vector<float>{19, 22, 43, 50}));

  std::mt19937_64 rng(12);
  const Tensor x = random_tensor({5, 7}, rng);
  std::vector<float> eye(49, 0.0f);
  for (std::size_t i = 0; i < 7; ++i) eye[i * 8] = 1.0f;
  const Tensor y = ops::matmul(g, x, Tensor::from_data({7, 7}, eye));
  EXPECT_TRUE(testing::bitwise_equal(y.data(), x.data()));
}

TEST(Matmul, HalfPrecisionCloseToSingle) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> va(32 * 32), vb(32 * 32);
  for (float& v : va) v = dist(rng);
  for (float& v : vb) v = dist(rng);
  const Tensor a = Tensor::from_data({32, 32}, va), b = Tensor::from_data({32, 32}, vb);
  Graph g(Graph::Mode::kInference);
  const Tensor full = ops::matmul(g, a, b), half = ops::matmul(g, a, b, DType::kF16);
  // Relative to sum_k |a_ik b_kj|: a plain element-wise ratio is unbounded
  // where the dot product cancels to near zero.
  double worst = 0.0, d2 = 0.0, f2 = 0.0;
  for (std::size_t i = 0; i < 32; ++i) {
    for (std::size_t j = 0; j < 32; ++j) {
      double mag = 0.0;
      for (std::size_t k = 0; k < 32; ++k) mag += std::abs(double(va[i * 32 + k]) * vb[k * 32 + j]);
      const double f = full.data()[i * 32 + j], d = std::abs(double(half.data()[i * 32 + j]) - f);
      worst = std::max(worst, d / mag);
      d2 += d * d;
      f2 += f * f;
    }
  }
  EXPECT_LE(worst, std::ldexp(1.0, -9));
  EXPECT_LE(std::sqrt(d2 / f2), std::ldexp(1.0, -9));
}

TEST(Autodiff, ClosedFormGradients) {
  std::mt19937_64 rng(14);
  const Tensor w = random_tensor({4, 4}, rng, 1.0f, true);
  {
    Graph g;
    g.backward(ops::sum(g, w));
    for (float v : w.grad()) EXPECT_EQ(v, 1.0f);
  }
  w.clear_grad();
  const Tensor x = random_tensor({4, 1}, rng);
  Graph g;
  const Tensor wx = ops::matmul(g, w, x);
  g.backward(ops::mul_scalar(g, ops::sum(g, ops::mul(g, wx, wx)), 0.5f));
  for (std::size_t i = 0; i < 4; ++i) {
    double wxi = 0.0;
    for (std::size_t k = 0; k < 4; ++k) wxi += double(w.data()[i * 4 + k]) * x.data()[k];
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(w.grad()[i * 4 + j], wxi * x.data()[j], 1e-6);
  }
}

TEST(CrossEntropy, UniformAndSingleRow) {
  Graph g(Graph::Mode::kInference);
  const std::vector<std::int32_t> targets = {3, 17, 259};
  EXPECT_NEAR(ops::cross_entropy(g, Tensor::zeros({3, 260}), targets, std::vector<std::uint8_t>{1, 1, 1}).item(),
              std::log(260.0), 1e-5);

  std::mt19937_64 rng(15);
  const Tensor logits = random_tensor({3, 260}, rng, 2.0f);
  const float one = ops::cross_entropy(g, logits, targets, std::vector<std::uint8_t>{0, 1, 0}).item();
  const auto row = logits.data().subspan(260, 260);
  double z = 0.0;
  for (float v : row) z += std::exp(double(v));
  EXPECT_NEAR(one, std::log(z) - row[17], 1e-5);
}

TEST(Softmax, RowsAreProbabilities) {
  std::mt19937_64 rng(11);
  Graph g(Graph::Mode::kInference);
  const Tensor x = random_tensor({6, 9}, rng, 4.0f);
  const Tensor y = ops::softmax(g, x);
  for (std::size_t r = 0; r < 6; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 9; ++c) {
      const float p = y.at(r, c);
      EXPECT_GT(p, 0.0f);
      EXPECT_LT(p, 1.0f);
      total += p;
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Softmax, CausalHidesFuture) {
  std::mt19937_64 rng(12);
  Graph g(Graph::Mode::kInference);
  const Tensor y = ops::softmax(g, random_tensor({4, 6}, rng), true, 2);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 6; ++c) {
      if (c > r + 2) EXPECT_EQ(y.at(r, c), 0.0f);
      else EXPECT_GT(y.at(r, c), 0.0f);
    }
  }
}

TEST(Ops, Deterministic) {
  std::mt19937_64 rng(5);
  const Tensor a = random_tensor({7, 33}, rng), b = random_tensor({19, 33}, rng);
  Graph g1(Graph::Mode::kInference), g2(Graph::Mode::kInference);
  const Tensor y1 = ops::gelu(g1, ops::matmul_nt(g1, a, b));
  const Tensor y2 = ops::gelu(g2, ops::matmul_nt(g2, a, b));
  EXPECT_TRUE(testing::bitwise_equal(y1.data(), y2.data()));
}

TEST(Ops, ShapeErrors) {
  Graph g;
  EXPECT_THROW(ops::matmul(g, Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeMismatch);
  EXPECT_THROW(ops::add(g, Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeMismatch);
  EXPECT_THROW(ops::slice(g, Tensor::zeros({2, 3}), 1, 2, 2), ShapeMismatch);
  EXPECT_THROW(ops::rope(g, Tensor::zeros({2, 6}), 2, 0), ShapeMismatch);
  const std::vector<std::int32_t> t = {0, 1};
  const std::vector<std::uint8_t> none = {0, 0};
  EXPECT_THROW(ops::cross_entropy(g, Tensor::zeros({2, 3}), t, none), EmptyMask);
}

TEST(Ops, NonFiniteRejected) {
  Graph g(Graph::Mode::kInference);
  const Tensor big = Tensor::from_data({1, 1}, {3e38f});
  EXPECT_THROW(ops::mul(g, big, big), NonFiniteValue);
}

TEST(Graph, BackwardOnlyOnce) {
  Graph g;
  const Tensor x = Tensor::from_data({2}, {1.0f, 2.0f}, DType::kF32, true);
  const Tensor loss = ops::sum(g, ops::mul(g, x, x));
  g.backward(loss);
  EXPECT_FLOAT_EQ(x.grad()[1], 4.0f);
  EXPECT_THROW(g.backward(loss), GraphConsumed);
}

TEST(Graph, InferenceRecordsNothing) {
  Graph g(Graph::Mode::kInference);
  const Tensor x = Tensor::from_data({2}, {1.0f, 2.0f}, DType::kF32, true);
  const Tensor y = ops::gelu(g, x);
  EXPECT_EQ(g.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Kernels, GemmLayoutsAgreeBitwise) {
  std::mt19937_64 rng(3);
  for (std::size_t trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng() % 23, n = 1 + rng() % 37, k = 1 + rng() % 41;
    const Tensor a = random_tensor({m, k}, rng), b = random_tensor({n, k}, rng);
    std::vector<float> at(k * m), bt(k * n), c1(m * n), c2(m * n), c3(m * n);
    kernels::transpose(a.data().data(), at.data(), m, k);
    kernels::transpose(b.data().data(), bt.data(), n, k);
    kernels::gemm_nt(a.data().data(), k, b.data().data(), k, c1.data(), n, m, n, k);
    kernels::gemm_nn(a.data().data(), k, bt.data(), n, c2.data(), n, m, n, k);
    kernels::gemm_tn(at.data(), m, bt.data(), n, c3.data(), n, m, n, k);
    EXPECT_TRUE(testing::bitwise_equal(c1, c2));
    EXPECT_TRUE(testing::bitwise_equal(c1, c3));
    // Against a double reference.
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double ref = 0.0;
        for (std::size_t p = 0; p < k; ++p) ref += double(a.at(i, p)) * double(b.at(j, p));
        EXPECT_NEAR(c1[i * n + j], ref, 1e-5 * (1.0 + std::fabs(ref)) * double(k));
      }
    }
  }
}

TEST(Kernels, GemmRowIndependentOfShape) {
  std::mt19937_64 rng(4);
  const std::size_t k = 29, n = 21;
  const Tensor a = random_tensor({9, k}, rng), b = random_tensor({n, k}, rng);
  std::vector<float> full(9 * n), one(n);
  kernels::gemm_nt(a.data().data(), k, b.data().data(), k, full.data(), n, 9, n, k);
  for (std::size_t i = 0; i < 9; ++i) {
    kernels::gemm_nt(a.data().data() + i * k, k, b.data().data(), k, one.data(), n, 1, n, k);
    EXPECT_TRUE(testing::bitwise_equal(one, std::span<const float>(full).subspan(i * n, n)));
  }
}

TEST(Kernels, VectorMathIndependentOfPosition) {
  std::mt19937_64 rng(8);
  std::vector<float> x(67);
  for (float& v : x) v = std::normal_distribution<float>(0.0f, 3.0f)(rng);
  std::vector<float> e(x.size()), t(x.size());
  kernels::vexp(x.data(), e.data(), x.size());
  kernels::vtanh(x.data(), t.data(), x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(e[i], std::exp(x[i]), 2e-6 * std::exp(x[i]));
    EXPECT_NEAR(t[i], std::tanh(x[i]), 2e-6);
    float e1, t1;
    kernels::vexp(&x[i], &e1, 1);
    kernels::vtanh(&x[i], &t1, 1);
    EXPECT_EQ(e1, e[i]);
    EXPECT_EQ(t1, t[i]);
  }
}

TEST(Kernels, F16Rounding) {
  EXPECT_EQ(kernels::round_to_f16(1.0f + 1.0f / 4096.0f), 1.0f);  // halfway, ties to even
  EXPECT_EQ(kernels::round_to_f16(65519.0f), 65504.0f);
  EXPECT_TRUE(kernels::is_f16_exact(0.5f));
  EXPECT_FALSE(kernels::is_f16_exact(0.1f));
  const Tensor t = Tensor::from_data({2}, {0.1f, 1.0f}).to(DType::kF16);
  EXPECT_EQ(t.dtype(), DType::kF16);
  EXPECT_TRUE(kernels::is_f16_exact(t.data()[0]));
}

}  // namespace
}  // namespace peftlab
