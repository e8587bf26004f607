// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>

#include "peftlab/errors.hpp"
#include "peftlab/ops.hpp"

namespace peftlab {

void TrainConfig::validate() const {
  if (steps < 1) throw InvalidConfig("train: steps must be >= 1");
  if (batch_size < 1) throw InvalidConfig("train: batch_size must be >= 1");
  if (!(learning_rate >= 0.0)) throw InvalidConfig("train: learning_rate must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw InvalidConfig("train: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw InvalidConfig("train: eps must be positive");
  if (!(grad_clip_norm > 0.0)) throw InvalidConfig("train: grad_clip_norm must be positive");
  if (max_seq_len < 2) throw InvalidConfig("train: max_seq_len must be >= 2");
  if (template_id != kDefaultTemplate) throw InvalidConfig("unknown template '" + template_id + "'");
}

std::vector<TokenId> format_prompt(std::string_view question, std::string_view question_type,
                                   std::string_view template_id) {
  if (template_id != kDefaultTemplate) {
    throw InvalidConfig("unknown template '" + std::string(template_id) + "'");
  }
  std::string text = "Question: ";
  text.append(question);
  text.append("\nType: ");
  text.append(question_type);
  text.append("\nAnswer: ");
  std::vector<TokenId> tokens{Vocab::kBos};
  const auto body = Tokenizer{}.encode(text, false);
  tokens.insert(tokens.end(), body.begin(), body.end());
  return tokens;
}

Example format_example(const corpus::QARecord& record, std::string_view template_id,
                       std::size_t max_seq_len) {
  if (corpus::trim_unicode(record.question_text).empty()) {
    throw InvalidConfig("record " + record.question_id + " has an empty question");
  }
  Example ex;
  ex.tokens = format_prompt(record.question_text, record.question_type, template_id);
  const std::size_t prompt_len = ex.tokens.size();
  if (prompt_len + 1 > max_seq_len) {
    throw QuestionTooLong("prompt for " + record.question_id + " needs " + std::to_string(prompt_len) +
                          " tokens; max_seq_len is " + std::to_string(max_seq_len));
  }
  const auto answer = Tokenizer{}.encode(record.answer_text, false);
  ex.tokens.insert(ex.tokens.end(), answer.begin(), answer.end());
  ex.tokens.push_back(Vocab::kEos);
  if (ex.tokens.size() > max_seq_len) ex.tokens.resize(max_seq_len);
  ex.loss_mask.assign(ex.tokens.size(), 0);
  std::fill(ex.loss_mask.begin() + static_cast<std::ptrdiff_t>(prompt_len), ex.loss_mask.end(), 1);
  return ex;
}

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params, const TrainConfig& config)
    : params_(std::move(params)),
      lr_(config.learning_rate),
      beta1_(config.beta1),
      beta2_(config.beta2),
      eps_(config.eps),
      weight_decay_(config.weight_decay) {
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.numel(), 0.0f);
    v_.emplace_back(p.numel(), 0.0f);
  }
}

void AdamW::step() {
  ++t_;
  const double bias1 = 1.0 - std::pow(beta1_, double(t_));
  const double bias2 = 1.0 - std::pow(beta2_, double(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k].second;
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = static_cast<float>(beta1_ * m[i] + (1.0 - beta1_) * g[i]);
      v[i] = static_cast<float>(beta2_ * v[i] + (1.0 - beta2_) * double(g[i]) * g[i]);
      const double mhat = m[i] / bias1;
      const double vhat = v[i] / bias2;
      const double update = mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * w[i];
      w[i] = static_cast<float>(w[i] - lr_ * update);
    }
  }
}

double global_grad_norm(std::span<const std::pair<std::string, Tensor>> params) {
  double total = 0.0;
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) total += double(g) * g;
  }
  return std::sqrt(total);
}

double clip_grad_norm(std::span<const std::pair<std::string, Tensor>> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const float scale = static_cast<float>(max_norm / (norm + 1e-6));
    for (const auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      Tensor handle = p;
      for (float& g : handle.mutable_grad()) g *= scale;
    }
  }
  return norm;
}

std::vector<float> train(Model& model, const std::vector<corpus::QARecord>& corpus,
                         const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  if (corpus.empty()) throw InvalidConfig("train: corpus is empty");
  auto params = model.trainable_parameters();
  if (params.empty()) throw NoTrainableParameters("model has no trainable parameters");

  const std::size_t max_len = std::min(cfg.max_seq_len, model.config().max_seq_len);
  std::vector<Example> examples;
  examples.reserve(corpus.size());
  for (const auto& r : corpus) examples.push_back(format_example(r, cfg.template_id, max_len));

  std::mt19937_64 rng(cfg.seed);
  model.reseed_dropout(cfg.seed + 1);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();  // forces a shuffle before the first batch

  AdamW optimizer(params, cfg);
  std::vector<float> history;
  history.reserve(cfg.steps);
  const float inv_batch = 1.0f / static_cast<float>(cfg.batch_size);

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (auto& [name, p] : params) p.clear_grad();
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const Example& ex = examples[order[cursor++]];
      Graph g;
      Tensor logits = forward(g, model, ex.tokens, /*training=*/true);
      Tensor loss = lm_loss(g, logits, ex.tokens, ex.loss_mask);
      if (!std::isfinite(loss.item())) throw NonFiniteLoss(step);
      batch_loss += loss.item();
      g.backward(ops::mul_scalar(g, loss, inv_batch));
    }
    const float mean_loss = static_cast<float>(batch_loss / double(cfg.batch_size));
    if (!std::isfinite(mean_loss)) throw NonFiniteLoss(step);
    const double norm = clip_grad_norm(params, cfg.grad_clip_norm);
    optimizer.step();
    history.push_back(mean_loss);
    if (on_step) on_step(TrainStep{step, mean_loss, norm});
  }
  return history;
}

void write_loss_csv(std::span<const float> history, std::ostream& out, std::size_t first_step) {
  out << "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < history.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", first_step + i, double(history[i]));
    out << buf;
  }
}

std::pair<std::vector<corpus::QARecord>, std::vector<corpus::QARecord>> holdout_split(
    const std::vector<corpus::QARecord>& records, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw InvalidConfig("holdout fraction must be in [0, 1)");
  std::vector<std::size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto held = static_cast<std::size_t>(std::floor(fraction * double(records.size())));
  std::vector<bool> is_held(records.size(), false);
  for (std::size_t i = 0; i < held; ++i) is_held[idx[i]] = true;
  std::pair<std::vector<corpus::QARecord>, std::vector<corpus::QARecord>> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    (is_held[i] ? out.second : out.first).push_back(records[i]);
  }
  return out;
}

}  // namespace peftlab
