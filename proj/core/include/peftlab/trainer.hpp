// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "peftlab/corpus.hpp"
#include "peftlab/model.hpp"
#include "peftlab/tokenizer.hpp"

namespace peftlab {

inline constexpr std::string_view kDefaultTemplate = "default";

struct TrainConfig {
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  double grad_clip_norm = 1.0;
  std::uint64_t seed = 0;
  std::size_t max_seq_len = 512;
  std::string template_id = std::string(kDefaultTemplate);

  // Throws InvalidConfig.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct Example {
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> loss_mask;  // 1 on answer tokens and the final EOS
};

// BOS + "Question: {q}\nType: {t}\nAnswer: " as tokens. Throws InvalidConfig
// for an unknown template id.
std::vector<TokenId> format_prompt(std::string_view question, std::string_view question_type,
                                   std::string_view template_id);

// Prompt + answer + EOS, truncated from the answer's tail to fit
// max_seq_len. Throws QuestionTooLong when the prompt leaves no room for a
// single supervised token.
Example format_example(const corpus::QARecord& record, std::string_view template_id,
                       std::size_t max_seq_len);

// Decoupled-weight-decay Adam over a fixed, ordered parameter list.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor>> params, const TrainConfig& config);
  void step();
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::vector<float>> m_, v_;
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
};

// L2 norm over every parameter gradient (absent gradients count as zero).
double global_grad_norm(std::span<const std::pair<std::string, Tensor>> params);

// Rescales gradients so the global norm is at most max_norm; returns the
// pre-clip norm.
double clip_grad_norm(std::span<const std::pair<std::string, Tensor>> params, double max_norm);

struct TrainStep {
  std::size_t step = 0;  // 1-based
  float loss = 0.0f;
  double grad_norm = 0.0;
};

using StepCallback = std::function<void(const TrainStep&)>;

// Runs cfg.steps optimisation steps on every trainable parameter of `model`
// (adapter factors and any unfrozen base weight). Batches come from a
// seeded per-epoch shuffle; the returned history holds the mean batch loss
// of each step. Throws NoTrainableParameters, NonFiniteLoss.
std::vector<float> train(Model& model, const std::vector<corpus::QARecord>& corpus,
                         const TrainConfig& cfg, const StepCallback& on_step = {});

// "step,loss" header then one row per step, numbered from first_step.
void write_loss_csv(std::span<const float> history, std::ostream& out, std::size_t first_step = 1);

// Seeded split for the optional evaluation holdout; the corpus is not split
// unless this is called explicitly.
std::pair<std::vector<corpus::QARecord>, std::vector<corpus::QARecord>> holdout_split(
    const std::vector<corpus::QARecord>& records, double fraction, std::uint64_t seed);

}  // namespace peftlab
