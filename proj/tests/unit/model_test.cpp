// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "peftlab/errors.hpp"
#include "peftlab/model.hpp"
#include "peftlab/ops.hpp"
#include "test_support.hpp"

namespace peftlab {
namespace {

ModelConfig small_config(std::size_t layers, std::size_t q_heads, std::size_t kv_heads) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = layers;
  c.n_query_heads = q_heads;
  c.n_kv_heads = kv_heads;
  c.d_ff = 24;
  c.max_seq_len = 40;
  return c;
}

std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t n) {
  std::vector<TokenId> t(n);
  for (auto& id : t) id = static_cast<TokenId>(rng() % Vocab::kSize);
  return t;
}

Tensor logits_of(Model& m, std::span<const TokenId> tokens) {
  Graph g(Graph::Mode::kInference);
  return forward(g, m, tokens, false);
}

struct Heads {
  std::size_t layers, q, kv;
};

class ModelShapes : public ::testing::TestWithParam<Heads> {};

TEST_P(ModelShapes, CausalPrefixUnaffectedBySuffix) {
  const auto [layers, q, kv] = GetParam();
  Model m = init_weights(small_config(layers, q, kv), 11);
  std::mt19937_64 rng(1);
  auto tokens = random_tokens(rng, 12);
  const Tensor base = logits_of(m, tokens);
  for (std::size_t cut = 1; cut < tokens.size(); cut += 3) {
    auto changed = tokens;
    for (std::size_t i = cut; i < changed.size(); ++i) changed[i] = (changed[i] + 17) % Vocab::kSize;
    const Tensor other = logits_of(m, changed);
    const std::size_t prefix = cut * Vocab::kSize;
    EXPECT_TRUE(testing::bitwise_equal(base.data().subspan(0, prefix), other.data().subspan(0, prefix)));
    EXPECT_FALSE(testing::bitwise_equal(base.data(), other.data()));
  }
}

TEST_P(ModelShapes, KvCacheMatchesFullForward) {
  const auto [layers, q, kv] = GetParam();
  Model m = init_weights(small_config(layers, q, kv), 12);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const auto tokens = random_tokens(rng, 3 + rng() % 30);
    const Tensor full = logits_of(m, tokens);
    KvCache cache;
    std::size_t pos = 0;
    while (pos < tokens.size()) {
      const std::size_t n = std::min<std::size_t>(1 + rng() % 4, tokens.size() - pos);
      const Tensor part = forward_cached(m, std::span(tokens).subspan(pos, n), cache);
      EXPECT_TRUE(testing::bitwise_equal(part.data(),
                                         full.data().subspan(pos * Vocab::kSize, n * Vocab::kSize)));
      pos += n;
    }
    EXPECT_EQ(cache.length, tokens.size());
  }
}

INSTANTIATE_TEST_SUITE_P(Configs, ModelShapes,
                         ::testing::Values(Heads{1, 1, 1}, Heads{2, 2, 1}, Heads{3, 4, 2}, Heads{2, 4, 4}));

TEST(Model, DefaultConfigShapes) {
  const ModelConfig c;
  Model m = init_weights(c, 0);
  EXPECT_EQ(weight_shape(m.weight("embedding")), (Shape{260, 128}));
  EXPECT_EQ(weight_shape(m.weight("layer.0.attn.key")), (Shape{32, 128}));
  EXPECT_EQ(weight_shape(m.weight("layer.3.mlp.down")), (Shape{128, 512}));
  EXPECT_FALSE(m.has_weight("lm_head"));
  const std::vector<TokenId> tokens = {1, 2, 3};
  const Tensor logits = logits_of(m, tokens);
  EXPECT_EQ(logits.shape(), (Shape{3, 260}));
  // Near-uniform logits at init: the loss starts close to ln(260).
  Graph g(Graph::Mode::kInference);
  const std::vector<std::uint8_t> mask = {0, 1, 1};
  EXPECT_NEAR(lm_loss(g, logits, tokens, mask).item(), std::log(260.0), 0.1);
}

TEST(Model, UntiedHead) {
  ModelConfig c = small_config(1, 2, 1);
  c.tie_embeddings = false;
  Model m = init_weights(c, 3);
  EXPECT_TRUE(m.has_weight("lm_head"));
  const std::vector<TokenId> tokens = {5, 6};
  EXPECT_EQ(logits_of(m, tokens).shape(), (Shape{2, 260}));
}

TEST(Model, Deterministic) {
  Model a = init_weights(small_config(2, 2, 1), 9);
  Model b = init_weights(small_config(2, 2, 1), 9);
  std::mt19937_64 rng(3);
  const auto tokens = random_tokens(rng, 10);
  EXPECT_TRUE(testing::bitwise_equal(logits_of(a, tokens).data(), logits_of(b, tokens).data()));
  Model c = init_weights(small_config(2, 2, 1), 10);
  EXPECT_FALSE(testing::bitwise_equal(logits_of(a, tokens).data(), logits_of(c, tokens).data()));
}

TEST(Model, CloneIsIndependent) {
  Model a = init_weights(small_config(1, 2, 1), 4);
  Model b = a.clone();
  b.dense("embedding").mutable_data()[0] += 1.0f;
  EXPECT_NE(a.dense("embedding").data()[0], b.dense("embedding").data()[0]);
}

TEST(Model, Errors) {
  Model m = init_weights(small_config(1, 2, 1), 5);
  const std::vector<TokenId> long_seq(41, 4);
  const std::vector<TokenId> bad = {1, 260};
  EXPECT_THROW(logits_of(m, long_seq), SequenceTooLong);
  EXPECT_THROW(logits_of(m, bad), TokenOutOfRange);
  KvCache cache;
  const std::vector<TokenId> chunk(30, 4);
  forward_cached(m, chunk, cache);
  const std::vector<TokenId> more(11, 4);
  EXPECT_THROW(forward_cached(m, more, cache), SequenceTooLong);

  ModelConfig c = small_config(1, 3, 1);
  EXPECT_THROW(c.validate(), InvalidConfig);
  c = small_config(1, 4, 3);
  EXPECT_THROW(c.validate(), InvalidConfig);
}

TEST(Rope, ScoresDependOnlyOnRelativePosition) {
  std::mt19937_64 rng(6);
  const std::size_t hd = 8;
  const Tensor q = testing::random_tensor({1, hd}, rng);
  const Tensor k = testing::random_tensor({1, hd}, rng);
  auto score = [&](std::size_t i, std::size_t j) {
    Graph g(Graph::Mode::kInference);
    const Tensor qi = ops::rope(g, q, 1, i);
    const Tensor kj = ops::rope(g, k, 1, j);
    return ops::matmul_nt(g, qi, kj).item();
  };
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      for (std::size_t shift : {1u, 7u, 100u}) {
        EXPECT_NEAR(score(i + shift, j + shift), score(i, j), 1e-4f) << i << "," << j;
      }
    }
  }
  EXPECT_GT(std::fabs(score(3, 0) - score(3, 2)), 1e-4f);
}

TEST(Rope, ZeroOffsetIdentityAtPositionZero) {
  std::mt19937_64 rng(7);
  const Tensor x = testing::random_tensor({1, 8}, rng);
  Graph g(Graph::Mode::kInference);
  EXPECT_TRUE(testing::bitwise_equal(ops::rope(g, x, 2, 0).data(), x.data()));
}

TEST(Model, QuantizeBaseKeepsShapesAndFreezes) {
  Model m = init_weights(small_config(2, 2, 1), 8);
  quantize_base(m, {});
  for (const auto& name : Model::linear_weight_names(m.config())) EXPECT_TRUE(is_quantized(m.weight(name)));
  EXPECT_FALSE(is_quantized(m.weight("embedding")));
  EXPECT_TRUE(m.trainable_parameters().empty());
  EXPECT_TRUE(Model::is_linear_weight_name("layer.12.mlp.up"));
  EXPECT_FALSE(Model::is_linear_weight_name("layer.1.norm.gain"));
}

}  // namespace
}  // namespace peftlab
