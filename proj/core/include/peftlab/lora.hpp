// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "peftlab/quant4.hpp"
#include "peftlab/tensor.hpp"

namespace peftlab {

class Model;

// A linear-layer weight [out, in]: either a dense tensor or a frozen 4-bit one.
using BaseWeight = std::variant<Tensor, std::shared_ptr<const quant::QuantizedTensor>>;

const Shape& weight_shape(const BaseWeight& w);
std::size_t weight_numel(const BaseWeight& w);
bool is_quantized(const BaseWeight& w);
bool is_trainable(const BaseWeight& w);

// y = x W^T, through qmatmul when the weight is quantized.
Tensor base_linear(Graph& g, const Tensor& x, const BaseWeight& w);

// Low-rank pair attached to one frozen base weight: delta W = (alpha/r) B A.
struct LoraAdapter {
  std::string name;  // target weight
  Tensor a;          // [r, in]
  Tensor b;          // [out, r]
  std::size_t rank = 0;
  float alpha = 16.0f;
  float dropout_p = 0.0f;

  float scaling() const { return alpha / static_cast<float>(rank); }
  std::size_t in_features() const { return a.dim(1); }
  std::size_t out_features() const { return b.dim(0); }
  std::size_t parameter_count() const { return a.numel() + b.numel(); }

  // A ~ U(-1/sqrt(in), 1/sqrt(in)) from `rng`, B = 0. Throws RankTooLarge.
  static LoraAdapter create(std::string name, std::size_t in_features, std::size_t out_features,
                            std::size_t rank, float alpha, float dropout_p, std::mt19937_64& rng);
};

struct LoraConfig {
  std::size_t rank = 2;
  float alpha = 16.0f;
  float dropout = 0.05f;
  // Glob patterns over weight names; only per-layer linear weights are eligible.
  std::vector<std::string> targets = {"layer.*.attn.query", "layer.*.attn.value"};
  std::uint64_t seed = 0;
};

// y = base(x) + (alpha/r) * (dropout(x) A^T) B^T. Dropout is active only when
// `training`; gradients reach A and B, never a frozen base.
Tensor adapter_forward(Graph& g, const Tensor& x, const BaseWeight& base, const LoraAdapter& adapter,
                       bool training, std::mt19937_64& rng);

// W + (alpha/r) B A.
Tensor merge(const Tensor& base, const LoraAdapter& adapter);

// Freezes every eligible weight matched by a pattern and pairs it with a new
// adapter. Throws NoTargetMatched / RankTooLarge; leaves the model untouched
// on error.
Model& inject(Model& model, const LoraConfig& config);

// Copy of `model` with each adapter folded into a dense f32 base weight.
Model merge_adapters(const Model& model);

struct PeftReport {
  std::size_t total_parameters = 0;
  std::size_t trainable_parameters = 0;
  quant::Rational trainable_fraction{0};
  std::map<std::string, std::size_t> per_target;

  double fraction() const { return boost::rational_cast<double>(trainable_fraction); }
};

// Parameters are counted once each at logical size; adapters count as trainable.
PeftReport report(const Model& model);

// Percentage with two decimals, e.g. "0.44%".
std::string format_percent(const quant::Rational& fraction);

}  // namespace peftlab
