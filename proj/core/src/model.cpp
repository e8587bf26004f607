// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/model.hpp"

#include <cmath>
#include <regex>

#include "peftlab/errors.hpp"
#include "peftlab/ops.hpp"

namespace peftlab {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw InvalidConfig("model: " + what); };
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || d_ff == 0 || max_seq_len == 0) {
    fail("all extents must be positive");
  }
  if (n_query_heads == 0 || d_model % n_query_heads != 0) fail("d_model must be divisible by n_query_heads");
  if (n_kv_heads == 0 || n_query_heads % n_kv_heads != 0) fail("n_query_heads must be divisible by n_kv_heads");
  if (head_dim() % 2 != 0) fail("head_dim must be even for rotary encoding");
}

Model::Model(ModelConfig config) : config_(config) { config_.validate(); }

Model Model::clone() const {
  Model copy(config_);
  for (const auto& [name, w] : weights_) {
    if (const auto* t = std::get_if<Tensor>(&w)) {
      copy.weights_.emplace(name, t->clone());
    } else {
      // Quantized weights are immutable; sharing them is a faithful copy.
      copy.weights_.emplace(name, w);
    }
  }
  for (const auto& [name, ad] : adapters_) {
    LoraAdapter c = ad;
    c.a = ad.a.clone();
    c.b = ad.b.clone();
    copy.adapters_.emplace(name, std::move(c));
  }
  copy.dropout_rng_ = dropout_rng_;
  return copy;
}

const BaseWeight& Model::weight(const std::string& name) const {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw InvalidConfig("no weight named '" + name + "'");
  return it->second;
}

const Tensor& Model::dense(const std::string& name) const {
  const auto* t = std::get_if<Tensor>(&weight(name));
  if (t == nullptr) throw InvalidConfig("weight '" + name + "' is quantized");
  return *t;
}

void Model::set_weight(const std::string& name, BaseWeight w) { weights_[name] = std::move(w); }

const LoraAdapter* Model::adapter(const std::string& name) const {
  auto it = adapters_.find(name);
  return it == adapters_.end() ? nullptr : &it->second;
}

std::vector<std::pair<std::string, Tensor>> Model::trainable_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, w] : weights_) {
    if (const auto* t = std::get_if<Tensor>(&w); t != nullptr && t->requires_grad()) {
      out.emplace_back(name, *t);
    }
  }
  for (const auto& [name, ad] : adapters_) {
    if (ad.a.requires_grad()) out.emplace_back(name + ".lora_a", ad.a);
    if (ad.b.requires_grad()) out.emplace_back(name + ".lora_b", ad.b);
  }
  return out;
}

std::vector<std::string> Model::linear_weight_names(const ModelConfig& config) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    const std::string p = "layer." + std::to_string(i) + ".";
    for (const char* c : {"attn.query", "attn.key", "attn.value", "attn.output", "mlp.up", "mlp.down"}) {
      names.push_back(p + c);
    }
  }
  return names;
}

bool Model::is_linear_weight_name(const std::string& name) {
  static const std::regex kPattern(R"(layer\.\d+\.(attn\.(query|key|value|output)|mlp\.(up|down)))");
  return std::regex_match(name, kPattern);
}

Model init_weights(const ModelConfig& config, std::uint64_t seed) {
  Model model(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 0.02f);
  auto random = [&](Shape shape) {
    std::vector<float> v(shape_numel(shape));
    for (float& x : v) x = normal(rng);
    return Tensor::from_data(std::move(shape), std::move(v), DType::kF32, true);
  };
  auto constant = [](std::size_t n, float value) {
    return Tensor::from_data({n}, std::vector<float>(n, value), DType::kF32, true);
  };
  const std::size_t d = config.d_model;
  model.set_weight("embedding", random({config.vocab_size, d}));
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    const std::string p = "layer." + std::to_string(i) + ".";
    model.set_weight(p + "norm.gain", constant(d, 1.0f));
    model.set_weight(p + "norm.bias", constant(d, 0.0f));
    model.set_weight(p + "attn.query", random({d, d}));
    model.set_weight(p + "attn.key", random({config.kv_width(), d}));
    model.set_weight(p + "attn.value", random({config.kv_width(), d}));
    model.set_weight(p + "attn.output", random({d, d}));
    model.set_weight(p + "mlp.up", random({config.d_ff, d}));
    model.set_weight(p + "mlp.down", random({d, config.d_ff}));
  }
  model.set_weight("final_norm.gain", constant(d, 1.0f));
  model.set_weight("final_norm.bias", constant(d, 0.0f));
  if (!config.tie_embeddings) model.set_weight("lm_head", random({config.vocab_size, d}));
  model.reseed_dropout(seed ^ 0x9E3779B97F4A7C15ULL);
  return model;
}

void freeze_base(Model& model) {
  for (const auto& [name, w] : model.weights()) {
    if (const auto* t = std::get_if<Tensor>(&w)) {
      Tensor handle = *t;
      handle.set_requires_grad(false);
    }
  }
}

void quantize_base(Model& model, const quant::QuantConfig& config) {
  freeze_base(model);
  for (const auto& name : Model::linear_weight_names(model.config())) {
    const BaseWeight& w = model.weight(name);
    if (const auto* t = std::get_if<Tensor>(&w)) {
      auto q = std::make_shared<const quant::QuantizedTensor>(quant::quantize(*t, config));
      model.set_weight(name, std::move(q));
    }
  }
}

namespace {

void check_tokens(const Model& model, std::span<const TokenId> tokens, std::size_t prefix) {
  const auto& cfg = model.config();
  if (tokens.empty()) throw ShapeMismatch("forward: empty token sequence");
  if (prefix + tokens.size() > cfg.max_seq_len) {
    throw SequenceTooLong("sequence of " + std::to_string(prefix + tokens.size()) +
                          " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  for (TokenId id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw TokenOutOfRange("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(cfg.vocab_size));
    }
  }
}

Tensor linear(Graph& g, Model& model, const std::string& name, const Tensor& x, bool training) {
  const BaseWeight& w = model.weight(name);
  if (const LoraAdapter* ad = model.adapter(name)) {
    return adapter_forward(g, x, w, *ad, training, model.dropout_rng());
  }
  return base_linear(g, x, w);
}

Tensor run(Graph& g, Model& model, std::span<const TokenId> tokens, bool training, KvCache* cache) {
  const auto& cfg = model.config();
  const std::size_t offset = cache != nullptr ? cache->length : 0;
  check_tokens(model, tokens, offset);
  if (cache != nullptr && cache->keys.empty()) {
    cache->keys.resize(cfg.n_layers);
    cache->values.resize(cfg.n_layers);
  }

  const std::size_t hd = cfg.head_dim();
  const std::size_t group = cfg.n_query_heads / cfg.n_kv_heads;
  const float score_scale = 1.0f / std::sqrt(static_cast<float>(hd));

  Tensor x = ops::embedding_lookup(g, model.dense("embedding"), tokens);
  for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
    const std::string p = "layer." + std::to_string(layer) + ".";
    // One shared norm feeds the attention and MLP branches in parallel.
    Tensor h = ops::layer_norm(g, x, model.dense(p + "norm.gain"), model.dense(p + "norm.bias"));

    Tensor q = ops::rope(g, linear(g, model, p + "attn.query", h, training), cfg.n_query_heads, offset);
    Tensor k = ops::rope(g, linear(g, model, p + "attn.key", h, training), cfg.n_kv_heads, offset);
    Tensor v = linear(g, model, p + "attn.value", h, training);
    if (cache != nullptr) {
      if (cache->keys[layer].defined()) {
        k = ops::concat(g, {cache->keys[layer], k}, 0);
        v = ops::concat(g, {cache->values[layer], v}, 0);
      }
      cache->keys[layer] = k;
      cache->values[layer] = v;
    }

    std::vector<Tensor> kv_k(cfg.n_kv_heads), kv_v(cfg.n_kv_heads);
    for (std::size_t j = 0; j < cfg.n_kv_heads; ++j) {
      kv_k[j] = cfg.n_kv_heads == 1 ? k : ops::slice(g, k, 1, j * hd, hd);
      kv_v[j] = cfg.n_kv_heads == 1 ? v : ops::slice(g, v, 1, j * hd, hd);
    }
    std::vector<Tensor> heads;
    heads.reserve(cfg.n_query_heads);
    for (std::size_t head = 0; head < cfg.n_query_heads; ++head) {
      const std::size_t j = head / group;
      Tensor qh = ops::slice(g, q, 1, head * hd, hd);
      Tensor scores = ops::mul_scalar(g, ops::matmul_nt(g, qh, kv_k[j]), score_scale);
      Tensor probs = ops::softmax(g, scores, /*causal=*/true, offset);
      heads.push_back(ops::matmul(g, probs, kv_v[j]));
    }
    Tensor attn = linear(g, model, p + "attn.output", ops::concat(g, heads, 1), training);
    Tensor mlp = linear(g, model, p + "mlp.down",
                        ops::gelu(g, linear(g, model, p + "mlp.up", h, training)), training);
    x = ops::add(g, ops::add(g, x, attn), mlp);
  }
  if (cache != nullptr) cache->length += tokens.size();

  Tensor hf = ops::layer_norm(g, x, model.dense("final_norm.gain"), model.dense("final_norm.bias"));
  const Tensor& head = cfg.tie_embeddings ? model.dense("embedding") : model.dense("lm_head");
  return ops::matmul_nt(g, hf, head);
}

}  // namespace

Tensor forward(Graph& g, Model& model, std::span<const TokenId> tokens, bool training) {
  return run(g, model, tokens, training, nullptr);
}

Tensor forward_cached(Model& model, std::span<const TokenId> tokens, KvCache& cache) {
  Graph g(Graph::Mode::kInference);
  return run(g, model, tokens, /*training=*/false, &cache);
}

Tensor lm_loss(Graph& g, const Tensor& logits, std::span<const TokenId> tokens,
               std::span<const std::uint8_t> loss_mask) {
  const std::size_t seq = tokens.size();
  if (loss_mask.size() != seq || logits.rank() != 2 || logits.dim(0) != seq) {
    throw ShapeMismatch("lm_loss: logits, tokens and mask must share the sequence length");
  }
  std::vector<TokenId> targets(seq, 0);
  std::vector<std::uint8_t> mask(seq, 0);
  for (std::size_t t = 0; t + 1 < seq; ++t) {
    targets[t] = tokens[t + 1];
    mask[t] = loss_mask[t + 1];
  }
  return ops::cross_entropy(g, logits, targets, mask);
}

}  // namespace peftlab
