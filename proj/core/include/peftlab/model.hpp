// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "peftlab/lora.hpp"
#include "peftlab/quant4.hpp"
#include "peftlab/tensor.hpp"
#include "peftlab/tokenizer.hpp"

namespace peftlab {

struct ModelConfig {
  std::size_t vocab_size = Vocab::kSize;
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  std::size_t n_query_heads = 4;
  std::size_t n_kv_heads = 1;
  std::size_t d_ff = 512;
  std::size_t max_seq_len = 512;
  bool tie_embeddings = true;

  std::size_t head_dim() const { return d_model / n_query_heads; }
  std::size_t kv_width() const { return n_kv_heads * head_dim(); }
  // Throws InvalidConfig.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Decoder weights by name plus attached adapters.
//
// Names: "embedding", "layer.{i}.norm.{gain,bias}",
// "layer.{i}.attn.{query,key,value,output}", "layer.{i}.mlp.{up,down}",
// "final_norm.{gain,bias}", and "lm_head" when embeddings are untied.
// Linear weights are [out, in]. Tensors are shared handles, so Model is
// move-only; clone() makes an independent copy.
class Model {
 public:
  explicit Model(ModelConfig config);
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  Model clone() const;

  const ModelConfig& config() const { return config_; }

  const std::map<std::string, BaseWeight>& weights() const { return weights_; }
  bool has_weight(const std::string& name) const { return weights_.count(name) != 0; }
  const BaseWeight& weight(const std::string& name) const;
  // Dense view; throws InvalidConfig if the weight is quantized.
  const Tensor& dense(const std::string& name) const;
  void set_weight(const std::string& name, BaseWeight w);

  const std::map<std::string, LoraAdapter>& adapters() const { return adapters_; }
  std::map<std::string, LoraAdapter>& mutable_adapters() { return adapters_; }
  const LoraAdapter* adapter(const std::string& name) const;

  // Trainable tensors in deterministic (name) order; adapter factors appear
  // as "{target}.lora_a" / "{target}.lora_b".
  std::vector<std::pair<std::string, Tensor>> trainable_parameters() const;

  std::mt19937_64& dropout_rng() { return dropout_rng_; }
  void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

  // Per-layer linear weight names in layer order.
  static std::vector<std::string> linear_weight_names(const ModelConfig& config);
  static bool is_linear_weight_name(const std::string& name);

 private:
  ModelConfig config_;
  std::map<std::string, BaseWeight> weights_;
  std::map<std::string, LoraAdapter> adapters_;
  std::mt19937_64 dropout_rng_;
};

// Normal(0, 0.02) weights, unit gains, zero biases; deterministic in `seed`.
Model init_weights(const ModelConfig& config, std::uint64_t seed);

// Turns off requires_grad on every base weight.
void freeze_base(Model& model);

// Freezes the base and replaces every per-layer linear weight with its
// block-wise 4-bit form. Weights that already carry an adapter keep it.
void quantize_base(Model& model, const quant::QuantConfig& config);

// Keys/values per layer for incremental decoding (post-rotary keys).
struct KvCache {
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
  std::size_t length = 0;
};

// Logits [len(tokens), vocab]. Throws SequenceTooLong / TokenOutOfRange.
Tensor forward(Graph& g, Model& model, std::span<const TokenId> tokens, bool training);

// Logits for `tokens` appended after the cached prefix; updates the cache.
// Rows are bitwise equal to the matching rows of a full forward().
Tensor forward_cached(Model& model, std::span<const TokenId> tokens, KvCache& cache);

// Mean cross-entropy of logits[t] against tokens[t+1] over t with
// loss_mask[t+1] set. Throws EmptyMask.
Tensor lm_loss(Graph& g, const Tensor& logits, std::span<const TokenId> tokens,
               std::span<const std::uint8_t> loss_mask);

}  // namespace peftlab
