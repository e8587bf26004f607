// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace peftlab {

using TokenId = std::int32_t;

// Byte-level vocabulary: four special tokens followed by the 256 byte values.
struct Vocab {
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kByteOffset = 4;
  static constexpr TokenId kSize = kByteOffset + 256;

  static bool is_special(TokenId id) { return id >= 0 && id < kByteOffset; }
};

class Tokenizer {
 public:
  // Raw UTF-8 bytes shifted by the byte offset; BOS ... EOS when add_specials.
  std::vector<TokenId> encode(std::string_view text, bool add_specials) const;

  // Drops specials, maps the rest back to bytes, and replaces invalid UTF-8
  // with U+FFFD. Throws UnknownToken for ids outside the vocabulary.
  std::string decode(std::span<const TokenId> tokens) const;

  static constexpr TokenId vocab_size() { return Vocab::kSize; }
};

// Replaces every maximal invalid UTF-8 subsequence with U+FFFD.
std::string sanitize_utf8(std::string_view bytes);

}  // namespace peftlab
