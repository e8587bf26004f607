// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/generator.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>

#include "peftlab/errors.hpp"
#include "peftlab/trainer.hpp"

namespace peftlab {

void DecodeConfig::validate() const {
  if (mode == DecodeMode::kGreedy) return;
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw InvalidConfig("temperature must be positive");
  if (mode == DecodeMode::kTopK && k < 1) throw InvalidConfig("top-k needs k >= 1");
  if (mode == DecodeMode::kNucleus && !(p > 0.0 && p <= 1.0)) throw InvalidConfig("top-p must be in (0, 1]");
}

TokenId select_token(std::span<const float> logits, const DecodeConfig& cfg, std::mt19937_64& rng) {
  if (logits.empty()) throw ShapeMismatch("select_token: empty logits");
  if (cfg.mode == DecodeMode::kGreedy) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  // Probabilities in double, ranked descending with ties broken by id.
  const double inv_t = 1.0 / cfg.temperature;
  const float top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> prob(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    prob[i] = std::exp((double(logits[i]) - top) * inv_t);
    total += prob[i];
  }
  for (double& q : prob) q /= total;
  std::vector<std::size_t> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return prob[a] > prob[b]; });

  std::size_t keep = order.size();
  if (cfg.mode == DecodeMode::kTopK) {
    keep = std::min(cfg.k, order.size());
  } else if (cfg.p < 1.0) {
    double mass = 0.0;
    keep = 0;
    while (keep < order.size()) {
      mass += prob[order[keep++]];
      if (mass >= cfg.p) break;
    }
  }
  double kept_mass = 0.0;
  for (std::size_t i = 0; i < keep; ++i) kept_mass += prob[order[i]];
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * kept_mass;
  double acc = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    acc += prob[order[i]];
    if (u < acc) return static_cast<TokenId>(order[i]);
  }
  return static_cast<TokenId>(order[keep - 1]);
}

std::vector<TokenId> generate(Model& model, std::span<const TokenId> prompt, const DecodeConfig& cfg) {
  cfg.validate();
  if (prompt.empty()) throw PromptTooLong("prompt is empty");
  const std::size_t limit = model.config().max_seq_len;
  if (prompt.size() > limit) {
    throw PromptTooLong("prompt has " + std::to_string(prompt.size()) + " tokens; max_seq_len is " +
                        std::to_string(limit));
  }
  std::vector<TokenId> out(prompt.begin(), prompt.end());
  if (cfg.max_new_tokens == 0) return out;

  std::mt19937_64 rng(cfg.seed);
  KvCache cache;
  Tensor logits = forward_cached(model, prompt, cache);
  const std::size_t vocab = model.config().vocab_size;
  for (std::size_t produced = 0; produced < cfg.max_new_tokens && out.size() < limit; ++produced) {
    const auto row = logits.data().subspan((logits.dim(0) - 1) * vocab, vocab);
    const TokenId next = select_token(row, cfg, rng);
    out.push_back(next);
    if (cfg.stop_tokens.count(next) != 0 || out.size() >= limit) break;
    const TokenId step[1] = {next};
    logits = forward_cached(model, step, cache);
  }
  return out;
}

std::string answer_question(Model& model, std::string_view question, std::string_view question_type,
                            std::string_view template_id, const DecodeConfig& cfg) {
  const auto prompt = format_prompt(question, question_type, template_id);
  const auto tokens = generate(model, prompt, cfg);
  std::vector<TokenId> answer(tokens.begin() + static_cast<std::ptrdiff_t>(prompt.size()), tokens.end());
  if (!answer.empty() && cfg.stop_tokens.count(answer.back()) != 0) answer.pop_back();
  return Tokenizer{}.decode(answer);
}

int repl(Model& model, const ReplConfig& cfg, std::istream& in, std::ostream& out, std::ostream& err) {
  DecodeConfig decode = cfg.decode;
  std::string line;
  std::uint64_t turn = 0;
  while (true) {
    out << kReplPrompt << std::flush;
    if (!std::getline(in, line)) {
      out << '\n';
      return 0;
    }
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string question = corpus::trim_unicode(line);
    if (question.empty()) continue;
    if (question == "/quit") return 0;
    // Each turn draws from its own stream so a transcript replays exactly.
    decode.seed = cfg.decode.seed + turn++;
    try {
      const std::string answer = answer_question(model, question, cfg.question_type, cfg.template_id, decode);
      out << kDisclaimer << '\n' << answer << '\n';
    } catch (const Error& e) {
      err << "error: " << e.what() << '\n';
    }
  }
}

}  // namespace peftlab
