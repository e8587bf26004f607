// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "peftlab/model.hpp"
#include "peftlab/tokenizer.hpp"

namespace peftlab {

enum class DecodeMode { kGreedy, kTopK, kNucleus };

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kGreedy;
  std::size_t k = 40;
  double p = 0.9;
  double temperature = 1.0;
  std::size_t max_new_tokens = 256;
  std::set<TokenId> stop_tokens = {Vocab::kEos};
  std::uint64_t seed = 0;

  // Throws InvalidConfig (k = 0, p outside (0, 1], temperature <= 0).
  void validate() const;
};

// Picks the next token from one row of logits. Greedy returns the argmax
// (lowest id on ties) and leaves `rng` untouched. Sampled modes rank tokens
// by probability (ties by id), keep the top k or the smallest prefix whose
// mass reaches p, renormalise and draw once.
TokenId select_token(std::span<const float> logits, const DecodeConfig& cfg, std::mt19937_64& rng);

// Prompt followed by generated tokens. Stops after emitting a stop token or
// max_new_tokens tokens, and never runs past the model's max_seq_len. Uses a
// KV cache. Throws PromptTooLong.
std::vector<TokenId> generate(Model& model, std::span<const TokenId> prompt, const DecodeConfig& cfg);

// Decoded answer text for one question (stop tokens and prompt removed).
std::string answer_question(Model& model, std::string_view question, std::string_view question_type,
                            std::string_view template_id, const DecodeConfig& cfg);

inline constexpr std::string_view kDisclaimer =
    "[disclaimer] Research prototype. This is not medical advice; consult a qualified health "
    "professional.";
inline constexpr std::string_view kReplPrompt = "> ";

struct ReplConfig {
  std::string template_id = "default";
  std::string question_type = "information";
  DecodeConfig decode;
};

// Reads one question per line from `in` until EOF or "/quit". Each answer is
// printed after the disclaimer line. Generation errors are reported on `err`
// and the session continues. Returns the process exit code.
int repl(Model& model, const ReplConfig& cfg, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace peftlab
