// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/lora.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "peftlab/errors.hpp"
#include "peftlab/kernels.hpp"
#include "peftlab/model.hpp"
#include "peftlab/ops.hpp"

namespace peftlab {

const Shape& weight_shape(const BaseWeight& w) {
  if (const auto* t = std::get_if<Tensor>(&w)) return t->shape();
  return std::get<std::shared_ptr<const quant::QuantizedTensor>>(w)->shape;
}

std::size_t weight_numel(const BaseWeight& w) { return shape_numel(weight_shape(w)); }

bool is_quantized(const BaseWeight& w) { return std::holds_alternative<std::shared_ptr<const quant::QuantizedTensor>>(w); }

bool is_trainable(const BaseWeight& w) {
  const auto* t = std::get_if<Tensor>(&w);
  return t != nullptr && t->requires_grad();
}

Tensor base_linear(Graph& g, const Tensor& x, const BaseWeight& w) {
  if (const auto* t = std::get_if<Tensor>(&w)) return ops::matmul_nt(g, x, *t);
  return quant::qmatmul(g, x, std::get<std::shared_ptr<const quant::QuantizedTensor>>(w));
}

LoraAdapter LoraAdapter::create(std::string name, std::size_t in_features, std::size_t out_features,
                                std::size_t rank, float alpha, float dropout_p, std::mt19937_64& rng) {
  if (rank < 1 || rank > std::min(in_features, out_features)) {
    throw RankTooLarge("rank " + std::to_string(rank) + " invalid for '" + name + "' [" +
                       std::to_string(out_features) + "x" + std::to_string(in_features) + "]");
  }
  if (!(alpha > 0.0f)) throw InvalidConfig("lora alpha must be positive");
  if (dropout_p < 0.0f || dropout_p >= 1.0f) throw InvalidConfig("lora dropout must be in [0, 1)");
  const float bound = 1.0f / std::sqrt(static_cast<float>(in_features));
  std::uniform_real_distribution<float> uniform(-bound, bound);
  std::vector<float> a(rank * in_features);
  for (float& v : a) v = uniform(rng);
  LoraAdapter ad;
  ad.name = std::move(name);
  ad.a = Tensor::from_data({rank, in_features}, std::move(a), DType::kF32, true);
  ad.b = Tensor::zeros({out_features, rank}, DType::kF32, true);
  ad.rank = rank;
  ad.alpha = alpha;
  ad.dropout_p = dropout_p;
  return ad;
}

Tensor adapter_forward(Graph& g, const Tensor& x, const BaseWeight& base, const LoraAdapter& adapter,
                       bool training, std::mt19937_64& rng) {
  const Shape& ws = weight_shape(base);
  if (ws.size() != 2 || ws[0] != adapter.out_features() || ws[1] != adapter.in_features()) {
    throw ShapeMismatch("adapter '" + adapter.name + "' does not fit base weight " + shape_to_string(ws));
  }
  Tensor y = base_linear(g, x, base);
  Tensor xin = training ? ops::dropout(g, x, adapter.dropout_p, rng) : x;
  Tensor low = ops::matmul_nt(g, xin, adapter.a);
  Tensor delta = ops::mul_scalar(g, ops::matmul_nt(g, low, adapter.b), adapter.scaling());
  return ops::add(g, y, delta);
}

Tensor merge(const Tensor& base, const LoraAdapter& adapter) {
  if (base.rank() != 2 || base.dim(0) != adapter.out_features() || base.dim(1) != adapter.in_features()) {
    throw ShapeMismatch("merge: adapter '" + adapter.name + "' does not fit " + shape_to_string(base.shape()));
  }
  const std::size_t out = base.dim(0), in = base.dim(1), r = adapter.rank;
  std::vector<float> ba(out * in);
  kernels::gemm_nn(adapter.b.data().data(), r, adapter.a.data().data(), in, ba.data(), in, out, in, r);
  std::vector<float> w(base.data().begin(), base.data().end());
  const float s = adapter.scaling();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += s * ba[i];
  return Tensor::from_data(base.shape(), std::move(w), DType::kF32, false);
}

Model& inject(Model& model, const LoraConfig& config) {
  const auto names = Model::linear_weight_names(model.config());
  std::vector<std::string> chosen;
  for (const auto& pattern : config.targets) {
    bool matched = false;
    for (const auto& name : names) {
      if (fnmatch(pattern.c_str(), name.c_str(), 0) == 0) {
        matched = true;
        if (std::find(chosen.begin(), chosen.end(), name) == chosen.end()) chosen.push_back(name);
      }
    }
    if (!matched) throw NoTargetMatched("pattern '" + pattern + "' matches no linear weight");
  }
  std::sort(chosen.begin(), chosen.end());

  std::mt19937_64 rng(config.seed);
  std::vector<LoraAdapter> created;
  for (const auto& name : chosen) {
    const Shape& s = weight_shape(model.weight(name));
    created.push_back(LoraAdapter::create(name, s[1], s[0], config.rank, config.alpha, config.dropout, rng));
  }
  for (auto& ad : created) {
    if (const auto* t = std::get_if<Tensor>(&model.weight(ad.name))) {
      Tensor handle = *t;
      handle.set_requires_grad(false);
    }
    std::string key = ad.name;
    model.mutable_adapters().insert_or_assign(key, std::move(ad));
  }
  return model;
}

Model merge_adapters(const Model& model) {
  Model merged = model.clone();
  for (const auto& [name, ad] : model.adapters()) {
    const BaseWeight& w = model.weight(name);
    Tensor dense = std::holds_alternative<Tensor>(w)
                       ? std::get<Tensor>(w)
                       : quant::dequantize(*std::get<std::shared_ptr<const quant::QuantizedTensor>>(w),
                                           DType::kF32);
    merged.set_weight(name, merge(dense, ad));
  }
  merged.mutable_adapters().clear();
  return merged;
}

PeftReport report(const Model& model) {
  PeftReport r;
  for (const auto& [name, w] : model.weights()) {
    const std::size_t n = weight_numel(w);
    r.total_parameters += n;
    if (is_trainable(w)) r.trainable_parameters += n;
  }
  for (const auto& [name, ad] : model.adapters()) {
    const std::size_t n = ad.parameter_count();
    r.total_parameters += n;
    if (ad.a.requires_grad()) r.trainable_parameters += ad.a.numel();
    if (ad.b.requires_grad()) r.trainable_parameters += ad.b.numel();
    r.per_target[name] = n;
  }
  if (r.total_parameters > 0) {
    r.trainable_fraction = quant::Rational(static_cast<std::int64_t>(r.trainable_parameters),
                                           static_cast<std::int64_t>(r.total_parameters));
  }
  return r;
}

std::string format_percent(const quant::Rational& fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * boost::rational_cast<double>(fraction));
  return buf;
}

}  // namespace peftlab
